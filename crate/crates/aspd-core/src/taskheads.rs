//! Frozen downstream task network: a vanilla PointNet classifier.
//!
//! Point-wise linear+relu layers, a global max pool over the points and a
//! fully connected head. No input/feature transforms, no dropout. During
//! sampler training the weights stay on the tape as constants so gradients
//! flow through the network to the sampled coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::params::{glorot, zero_bias, ParamSet};
use crate::tensor::{Activation, Reduce, Tape, Tensor};

/// Architecture of the classifier. `pointwise` are the per-point widths
/// (the last one is the global feature size), `head` the two hidden fully
/// connected widths before the class logits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointNetConfig {
    pub pointwise: Vec<usize>,
    pub head: [usize; 2],
    pub classes: usize,
}

impl PointNetConfig {
    pub fn new(classes: usize) -> Self {
        Self {
            pointwise: vec![64, 64, 128, 1024],
            head: [512, 256],
            classes,
        }
    }

    /// The widened variant used for the unseen-task-model study.
    pub fn with_pointwise(mut self, widths: Vec<usize>) -> Self {
        self.pointwise = widths;
        self
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut p = ParamSet::new();
        let mut prev = 3;
        for (i, &w) in self.pointwise.iter().enumerate() {
            p.insert(format!("task.pw{}.w", i + 1), glorot(rng, prev, w));
            p.insert(format!("task.pw{}.b", i + 1), zero_bias(w));
            prev = w;
        }
        let dims = [prev, self.head[0], self.head[1], self.classes];
        for i in 0..3 {
            p.insert(format!("task.fc{}.w", i + 1), glorot(rng, dims[i], dims[i + 1]));
            p.insert(format!("task.fc{}.b", i + 1), zero_bias(dims[i + 1]));
        }
        p
    }
}

/// Logits for one sampled set: point-wise stack, global max pool, FC head.
pub fn classify_forward(
    tape: &Tape,
    points: &Tensor,
    bound: &ParamSet,
    cfg: &PointNetConfig,
) -> Result<Tensor> {
    let m = points.rows();
    if m == 0 {
        return Err(Error::Contract("classify_forward: empty point set".into()));
    }
    let mut h = points.clone();
    for i in 0..cfg.pointwise.len() {
        h = tape.linear_act(
                &h,
                bound.get(&format!("task.pw{}.w", i + 1))?,
                bound.get(&format!("task.pw{}.b", i + 1))?, Activation::Relu)?;
    }
    let global_width = *cfg.pointwise.last().unwrap();
    let grouped = tape.reshape(&h, vec![1, m, global_width])?;
    let mut g = tape.reduce_group(&grouped, Reduce::Max)?;
    for i in 0..2 {
        g = tape.linear_act(
                &g,
                bound.get(&format!("task.fc{}.w", i + 1))?,
                bound.get(&format!("task.fc{}.b", i + 1))?, Activation::Relu)?;
    }
    tape.linear(&g, bound.get("task.fc3.w")?, bound.get("task.fc3.b")?)
}

/// A classifier with its weights; the unit passed around by training,
/// evaluation and checkpoints.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub cfg: PointNetConfig,
    pub params: ParamSet,
}

impl TaskModel {
    pub fn init(cfg: PointNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = cfg.init(&mut rng);
        Self { cfg, params }
    }

    /// Inference logits for a cloud (no gradients kept).
    pub fn logits(&self, points: &PointCloud) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let out = classify_forward(&tape, &points.to_tensor(), &bound, &self.cfg)?;
        Ok(out.data().to_vec())
    }

    pub fn predict(&self, points: &PointCloud) -> Result<usize> {
        let logits = self.logits(points)?;
        Ok(argmax(&logits))
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of argmax-correct predictions over a labeled set, optionally
/// downsampling each cloud first.
pub fn accuracy_eval(
    model: &TaskModel,
    items: &[(PointCloud, usize)],
    sampler: Option<&dyn Fn(&PointCloud) -> Result<PointCloud>>,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Contract("accuracy_eval: empty dataset".into()));
    }
    let mut correct = 0usize;
    for (cloud, label) in items {
        let sampled;
        let eval_cloud = match sampler {
            Some(f) => {
                sampled = f(cloud)?;
                &sampled
            }
            None => cloud,
        };
        if model.predict(eval_cloud)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}
