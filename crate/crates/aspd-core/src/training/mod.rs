//! Training loops and evaluation grids.
//!
//! The task network trains on full augmented clouds. The sampler trains in
//! two stages: stage 1 bypasses density attention at one fixed sample size;
//! stage 2 warm-starts from stage 1, enables the density attention
//! sub-block with fresh parameters and draws a new (input size, sample
//! size) pair per batch. A one-stage mode trains the full model directly.
//!
//! Batch items run on private tapes, optionally in parallel; gradients are
//! reduced in item order, so results are bit-identical regardless of the
//! thread count. All randomness is drawn on the control thread.

mod eval;

pub use eval::{evaluate_grid, SamplerSpec};

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{self, IndexMatrix, PointCloud};
use crate::io::dataset::Dataset;
use crate::objectives::{compound_loss_on_tape, conformity_loss, offset_loss_on_tape, LossWeights};
use crate::params::ParamSet;
use crate::presampling::derive_draw;
use crate::sampler::{forward_on_tape, AspdSampler, SamplerConfig};
use crate::taskheads::{argmax, classify_forward, PointNetConfig, TaskModel};
use crate::tensor::{adam_step, AdamState, Tape};

/// Adaptive neighborhood rule: k scales linearly with the input size from
/// a reference pair (n0, k0), rounded and clamped to [4, n].
pub fn adaptive_k(n: usize, n0: usize, k0: usize) -> usize {
    let raw = (k0 as f64 * n as f64 / n0 as f64).round() as usize;
    raw.max(4).min(n)
}

/// Random rotation about the vertical (y) axis plus truncated Gaussian
/// jitter per coordinate (sigma 0.01, clamped to +-0.05).
pub fn augment(cloud: &PointCloud, rng: &mut ChaCha8Rng) -> PointCloud {
    let angle = rng.gen_range(0.0..TAU);
    let rotated = rotate_y(cloud, angle);
    let mut pts = rotated.points().to_vec();
    for p in pts.iter_mut() {
        for d in 0..3 {
            p[d] += (0.01 * gaussian(rng)).clamp(-0.05, 0.05);
        }
    }
    PointCloud::new(pts).expect("jittered cloud stays finite")
}

/// Rotates a cloud about the y axis by `angle` radians.
pub fn rotate_y(cloud: &PointCloud, angle: f64) -> PointCloud {
    let (s, c) = angle.sin_cos();
    let pts = cloud
        .points()
        .iter()
        .map(|p| [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]])
        .collect();
    PointCloud::new(pts).expect("rotation keeps coordinates finite")
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; 1 - u keeps the log argument in (0, 1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Staircase learning-rate decay with a floor.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub every: usize,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-3,
            decay: 0.7,
            every: 20,
            floor: 1e-5,
        }
    }
}

impl LrSchedule {
    /// lr(e) = max(floor, initial * decay^(e / every))
    pub fn at(&self, epoch: usize) -> f64 {
        (self.initial * self.decay.powi((epoch / self.every) as i32)).max(self.floor)
    }
}

/// Which part of the two-stage scheme to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Density attention cut off, one fixed small sample size.
    Stage1,
    /// Warm start from stage 1, density attention back, sizes drawn per batch.
    Stage2,
    /// Train the full model directly with drawn sizes (ablation).
    OneStage,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Stage1 => "1",
            Stage::Stage2 => "2",
            Stage::OneStage => "one",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stage::Stage1),
            "2" => Ok(Stage::Stage2),
            "one" => Ok(Stage::OneStage),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }
}

/// Input sizes seen during sampler training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InputSizes {
    /// Clouds are used at their native size.
    Native,
    /// One size drawn uniformly from [lo, hi] per batch; clouds are
    /// subsampled to it.
    Range(usize, usize),
}

/// Sampler training configuration.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: Stage,
    pub sampler: SamplerConfig,
    /// Sample-size candidates for stage 2 / one-stage.
    pub sizes: Vec<usize>,
    /// Fixed sample size for stage 1.
    pub stage1_m: usize,
    pub input_sizes: InputSizes,
    pub batch: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Stage2,
            sampler: SamplerConfig::default(),
            sizes: vec![16, 32, 64, 128, 256, 512],
            stage1_m: 32,
            input_sizes: InputSizes::Native,
            batch: 32,
            epochs: 30,
            lr: LrSchedule::default(),
            weights: LossWeights::classification(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be positive".into()));
        }
        if self.sizes.is_empty() {
            return Err(Error::Config("sample-size candidates are empty".into()));
        }
        if let InputSizes::Range(lo, hi) = self.input_sizes {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!(
                    "invalid input-size range {lo}..{hi}"
                )));
            }
        }
        self.sampler.validate()
    }
}

/// Task-network training configuration.
#[derive(Clone, Debug)]
pub struct TaskTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    pub pointwise: Vec<usize>,
    pub head: [usize; 2],
}

impl Default for TaskTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 32,
            lr: LrSchedule::default(),
            seed: 0,
            pointwise: vec![64, 64, 128, 1024],
            head: [512, 256],
        }
    }
}

/// Per-epoch record of task-network training.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// Per-epoch record of sampler training.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_task: f64,
    pub loss_conf: f64,
    pub loss_off: f64,
    /// Draw counts per (input size, sample size).
    pub nm_counts: BTreeMap<(usize, usize), usize>,
}

/// CSV lines for sampler training logs:
/// `epoch,lr,loss_total,loss_task,loss_conf,loss_off,nm_histogram`.
pub fn sampler_log_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,loss_total,loss_task,loss_conf,loss_off,nm_histogram\n");
    for log in logs {
        let hist = log
            .nm_counts
            .iter()
            .map(|((n, m), count)| format!("{n}:{m}={count}"))
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{:.8},{:.6},{:.6},{:.6},{:.6},{}\n",
            log.epoch, log.lr, log.loss_total, log.loss_task, log.loss_conf, log.loss_off, hist
        ));
    }
    out
}

/// Config-block entries embedding a task training log into a checkpoint.
pub fn task_log_config_entries(logs: &[TaskEpochLog]) -> Vec<(String, String)> {
    logs.iter()
        .map(|l| {
            (
                format!("log.{:04}", l.epoch),
                format!("{:.8},{:.6},{:.6}", l.lr, l.loss, l.accuracy),
            )
        })
        .collect()
}

/// Cross-entropy training of the classifier on full augmented clouds.
pub fn train_task(dataset: &Dataset, cfg: &TaskTrainConfig) -> Result<(TaskModel, Vec<TaskEpochLog>)> {
    if dataset.train.is_empty() {
        return Err(Error::Contract("train_task: empty train split".into()));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch and epochs must be positive".into()));
    }
    let net_cfg = PointNetConfig {
        pointwise: cfg.pointwise.clone(),
        head: cfg.head,
        classes: dataset.classes.len(),
    };
    let mut model = TaskModel::init(net_cfg.clone(), cfg.seed);
    let mut adam = AdamState::new(cfg.lr.at(0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7461736b);
    let mut logs = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr.at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch) {
            let item_seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            let results: Vec<(ParamSet, f64, bool)> = batch
                .par_iter()
                .zip(item_seeds.par_iter())
                .map(|(&idx, &seed)| -> Result<(ParamSet, f64, bool)> {
                    let (cloud, label) = &dataset.train[idx];
                    let mut item_rng = ChaCha8Rng::seed_from_u64(seed);
                    let aug = augment(cloud, &mut item_rng);
                    let tape = Tape::new();
                    let bound = model.params.bind(&tape, true);
                    let logits = classify_forward(&tape, &aug.to_tensor(), &bound, &model.cfg)?;
                    let loss = tape.cross_entropy_logits(&logits, *label)?;
                    let grads = bound.grads(&tape.backward(&loss)?)?;
                    let hit = argmax(logits.data()) == *label;
                    Ok((grads, loss.item()?, hit))
                })
                .collect::<Result<Vec<_>>>()?;

            let scale = 1.0 / results.len() as f64;
            let mut grad_sum: Option<ParamSet> = None;
            for (grads, loss, hit) in results {
                loss_sum += loss;
                correct += hit as usize;
                seen += 1;
                grad_sum = Some(match grad_sum {
                    None => grads,
                    Some(acc) => add_params(acc, &grads)?,
                });
            }
            let grads = scale_params(grad_sum.expect("non-empty batch"), scale)?;
            adam_step(&mut model.params, &grads, &mut adam)?;
        }
        let log = TaskEpochLog {
            epoch,
            lr: adam.lr,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
        };
        if !log.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "task training diverged at epoch {epoch}"
            )));
        }
        logs.push(log);
    }
    Ok((model, logs))
}

/// Sampler training; dispatches on the configured stage.
///
/// `warm_start` must carry the stage-1 parameters when running stage 2 and
/// must be absent otherwise.
pub fn train_sampler(
    dataset: &Dataset,
    task: &TaskModel,
    cfg: &TrainConfig,
    warm_start: Option<&ParamSet>,
) -> Result<(AspdSampler, Vec<EpochLog>)> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Contract("train_sampler: empty train split".into()));
    }

    // Stage-specific model structure and initialization.
    let mut model_cfg = cfg.sampler.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x73616d70);
    let params = match cfg.stage {
        Stage::Stage1 => {
            if warm_start.is_some() {
                return Err(Error::Config("stage 1 does not take warm-start weights".into()));
            }
            model_cfg.density_attention = false;
            AspdSampler::init(model_cfg.clone(), cfg.seed)?.params
        }
        Stage::Stage2 => {
            let warm = warm_start.ok_or_else(|| {
                Error::Checkpoint("stage 2 requires stage-1 weights to warm-start from".into())
            })?;
            let mut reference = model_cfg.clone();
            reference.density_attention = false;
            let expect = AspdSampler::init(reference, cfg.seed)?.params;
            if expect.len() != warm.len() {
                return Err(Error::Checkpoint(format!(
                    "stage-1 checkpoint has {} tensors, expected {}",
                    warm.len(),
                    expect.len()
                )));
            }
            for (name, t) in expect.iter() {
                let w = warm.get(name)?;
                if w.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "stage-1 tensor '{name}' has shape {:?}, expected {:?}",
                        w.shape(),
                        t.shape()
                    )));
                }
            }
            let mut params = warm.clone();
            if model_cfg.density_attention {
                params.merge(model_cfg.refine.init_density_attention(&mut rng))?;
            }
            params
        }
        Stage::OneStage => {
            if warm_start.is_some() {
                return Err(Error::Config(
                    "one-stage training does not take warm-start weights".into(),
                ));
            }
            AspdSampler::init(model_cfg.clone(), cfg.seed)?.params
        }
    };
    let mut sampler = AspdSampler {
        cfg: model_cfg,
        params,
    };

    // k-NN graphs of the native clouds are static across epochs.
    let graphs: Option<Vec<Arc<IndexMatrix>>> = match cfg.input_sizes {
        InputSizes::Native => Some(
            dataset
                .train
                .par_iter()
                .map(|(cloud, _)| {
                    let k = adaptive_k(cloud.len(), sampler.cfg.n0, sampler.cfg.k0);
                    geometry::knn(cloud.points(), cloud.points(), k).map(Arc::new)
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        InputSizes::Range(_, _) => None,
    };

    let mut adam = AdamState::new(cfg.lr.at(0));
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr.at(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        let mut nm_counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();

        for batch in order.chunks(cfg.batch) {
            // Batch-level size draws keep every tensor in the batch rectangular.
            let m = match cfg.stage {
                Stage::Stage1 => cfg.stage1_m,
                _ => cfg.sizes[rng.gen_range(0..cfg.sizes.len())],
            };
            let n_draw = match cfg.input_sizes {
                InputSizes::Native => None,
                InputSizes::Range(lo, hi) => Some(rng.gen_range(lo..=hi)),
            };
            let draws: Vec<(u64, u64)> = batch
                .iter()
                .map(|_| {
                    let n_for_draw = n_draw.unwrap_or(dataset.points_per_cloud);
                    (
                        derive_draw(&mut rng, sampler.cfg.presampler, n_for_draw),
                        rng.gen(),
                    )
                })
                .collect();

            let results: Vec<(ParamSet, [f64; 4])> = batch
                .par_iter()
                .zip(draws.par_iter())
                .map(|(&idx, &(draw, subsample_seed))| {
                    sampler_item_step(
                        dataset,
                        idx,
                        task,
                        &sampler,
                        cfg,
                        m,
                        n_draw,
                        draw,
                        subsample_seed,
                        graphs.as_deref(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;

            let scale = 1.0 / results.len() as f64;
            let mut grad_sum: Option<ParamSet> = None;
            let mut batch_losses = [0.0f64; 4];
            for (grads, losses) in results {
                for (s, l) in batch_losses.iter_mut().zip(losses) {
                    *s += l;
                }
                grad_sum = Some(match grad_sum {
                    None => grads,
                    Some(acc) => add_params(acc, &grads)?,
                });
            }
            let grads = scale_params(grad_sum.expect("non-empty batch"), scale)?;
            adam_step(&mut sampler.params, &grads, &mut adam)?;

            for (s, b) in sums.iter_mut().zip(batch_losses) {
                *s += b * scale;
            }
            batches += 1;
            let n_logged = n_draw.unwrap_or(dataset.points_per_cloud);
            *nm_counts.entry((n_logged, m)).or_insert(0) += 1;
        }

        let inv = 1.0 / batches as f64;
        let log = EpochLog {
            epoch,
            lr: adam.lr,
            loss_total: sums[0] * inv,
            loss_task: sums[1] * inv,
            loss_conf: sums[2] * inv,
            loss_off: sums[3] * inv,
            nm_counts,
        };
        if !log.loss_total.is_finite() {
            return Err(Error::Numeric(format!(
                "sampler training diverged at epoch {epoch}"
            )));
        }
        logs.push(log);
    }
    Ok((sampler, logs))
}

#[allow(clippy::too_many_arguments)]
fn sampler_item_step(
    dataset: &Dataset,
    idx: usize,
    task: &TaskModel,
    sampler: &AspdSampler,
    cfg: &TrainConfig,
    m: usize,
    n_draw: Option<usize>,
    draw: u64,
    subsample_seed: u64,
    graphs: Option<&[Arc<IndexMatrix>]>,
) -> Result<(ParamSet, [f64; 4])> {
    let (cloud, label) = &dataset.train[idx];
    let owned;
    let effective: &PointCloud = match n_draw {
        Some(n) => {
            if n > cloud.len() {
                return Err(Error::Contract(format!(
                    "drawn input size {n} exceeds cloud size {}",
                    cloud.len()
                )));
            }
            let subset = geometry::random_sample(cloud, n, subsample_seed)?;
            owned = cloud.select(&subset);
            &owned
        }
        None => cloud,
    };
    if m >= effective.len() {
        return Err(Error::Contract(format!(
            "sample size {m} must stay below input size {}",
            effective.len()
        )));
    }

    let tape = Tape::new();
    let bound = sampler.params.bind(&tape, true);
    let task_bound = task.params.bind(&tape, false);
    let graph = match (n_draw, graphs) {
        (None, Some(g)) => Some(g[idx].as_ref()),
        _ => None,
    };
    let fwd = forward_on_tape(&tape, &bound, &sampler.cfg, effective, m, draw, graph)?;
    let logits = classify_forward(&tape, &fwd.refined, &task_bound, &task.cfg)?;
    let l_task = tape.cross_entropy_logits(&logits, *label)?;
    let l_conf = conformity_loss(&tape, &fwd.refined, effective)?;
    let l_off = offset_loss_on_tape(&tape, &fwd.s_prime, &fwd.refined)?;
    let loss = compound_loss_on_tape(&tape, &l_task, &l_conf, &l_off, &cfg.weights)?;
    let grads = bound.grads(&tape.backward(&loss)?)?;
    Ok((
        grads,
        [
            loss.item()?,
            l_task.item()?,
            l_conf.item()?,
            l_off.item()?,
        ],
    ))
}

fn add_params(mut acc: ParamSet, other: &ParamSet) -> Result<ParamSet> {
    let names: Vec<String> = acc.names().cloned().collect();
    for name in names {
        let a = acc.get(&name)?;
        let b = other.get(&name)?;
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let t = crate::tensor::Tensor::new(a.shape().to_vec(), data)?;
        acc.insert(name, t);
    }
    Ok(acc)
}

fn scale_params(mut set: ParamSet, scale: f64) -> Result<ParamSet> {
    let names: Vec<String> = set.names().cloned().collect();
    for name in names {
        let t = set.get(&name)?;
        let data: Vec<f64> = t.data().iter().map(|v| v * scale).collect();
        set.insert(name, crate::tensor::Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::dataset::gen_synthetic;
    use crate::presampling::{EmbedderConfig, PresamplerKind};
    use crate::refinement::RefinerConfig;

    pub(crate) fn tiny_sampler_config() -> SamplerConfig {
        SamplerConfig {
            embed: EmbedderConfig {
                widths: [4, 4, 8],
                c: 8,
            },
            refine: RefinerConfig {
                c_in: 11,
                c1: 8,
                c2: 4,
                density_hidden: 4,
                attn_hidden: 8,
                proj_hidden: 4,
                k_d: 4,
            },
            k0: 6,
            n0: 64,
            presampler: PresamplerKind::Fps,
            density_attention: true,
        }
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        let dir = tempfile::tempdir().unwrap();
        gen_synthetic(dir.path(), 2, 5, 64, seed).unwrap();
        crate::io::dataset::load_dataset(dir.path()).unwrap()
    }

    #[test]
    fn adaptive_k_examples() {
        assert_eq!(adaptive_k(1024, 1024, 40), 40);
        assert_eq!(adaptive_k(2048, 1024, 40), 80);
        assert_eq!(adaptive_k(512, 1024, 40), 20);
        // Clamping at both ends.
        assert_eq!(adaptive_k(10, 1024, 40), 4);
        assert_eq!(adaptive_k(3, 1024, 40), 3);
        assert_eq!(adaptive_k(4096, 64, 64), 4096);
    }

    #[test]
    fn lr_schedule_matches_closed_form() {
        let s = LrSchedule::default();
        for epoch in 0..200 {
            let expect = (1e-3 * 0.7f64.powi((epoch / 20) as i32)).max(1e-5);
            assert_eq!(s.at(epoch), expect);
        }
        assert_eq!(s.at(0), 1e-3);
        assert_eq!(s.at(19), 1e-3);
        assert!((s.at(20) - 7e-4).abs() < 1e-18);
        // Deep epochs hit the floor exactly.
        assert_eq!(s.at(1000), 1e-5);
    }

    #[test]
    fn augment_identity_when_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cloud = crate::io::dataset::sample_shape(0, 32, &mut rng)
            .unwrap()
            .normalize_unit_sphere();
        let same = rotate_y(&cloud, 0.0);
        for (a, b) in cloud.points().iter().zip(same.points()) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = crate::io::dataset::sample_shape(1, 24, &mut rng)
            .unwrap()
            .normalize_unit_sphere();
        let rotated = rotate_y(&cloud, 1.234);
        for i in 0..cloud.len() {
            for j in (i + 1)..cloud.len() {
                let d = |c: &PointCloud| {
                    let (a, b) = (c.points()[i], c.points()[j]);
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                };
                assert!((d(&cloud) - d(&rotated)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn jitter_is_truncated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = crate::io::dataset::sample_shape(0, 64, &mut rng)
            .unwrap()
            .normalize_unit_sphere();
        for _ in 0..20 {
            let angle_rng_state = rng.clone();
            let aug = augment(&cloud, &mut rng);
            // Undo the rotation to isolate the jitter.
            let mut check_rng = angle_rng_state;
            let angle = check_rng.gen_range(0.0..TAU);
            let rotated = rotate_y(&cloud, angle);
            for (a, b) in rotated.points().iter().zip(aug.points()) {
                for d in 0..3 {
                    assert!((b[d] - a[d]).abs() <= 0.05 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn task_training_smoke_and_determinism() {
        let dataset = tiny_dataset(3);
        let cfg = TaskTrainConfig {
            epochs: 2,
            batch: 4,
            pointwise: vec![8, 16],
            head: [8, 8],
            seed: 5,
            ..Default::default()
        };
        let (model_a, logs_a) = train_task(&dataset, &cfg).unwrap();
        assert_eq!(logs_a.len(), 2);
        assert!(logs_a.iter().all(|l| l.loss.is_finite()));

        let (model_b, logs_b) = train_task(&dataset, &cfg).unwrap();
        assert_eq!(logs_a, logs_b);
        for (name, t) in model_a.params.iter() {
            let other = model_b.params.get(name).unwrap();
            for (x, y) in t.data().iter().zip(other.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn stage1_trains_and_lacks_density_params() {
        let dataset = tiny_dataset(4);
        let cfg = TaskTrainConfig {
            epochs: 1,
            batch: 4,
            pointwise: vec![8, 16],
            head: [8, 8],
            seed: 1,
            ..Default::default()
        };
        let (task, _) = train_task(&dataset, &cfg).unwrap();

        let train_cfg = TrainConfig {
            stage: Stage::Stage1,
            sampler: tiny_sampler_config(),
            stage1_m: 8,
            batch: 4,
            epochs: 2,
            seed: 2,
            ..Default::default()
        };
        let (sampler, logs) = train_sampler(&dataset, &task, &train_cfg, None).unwrap();
        assert_eq!(logs.len(), 2);
        assert!(!crate::refinement::has_density_attention_params(&sampler.params));
        // Every batch drew the fixed stage-1 (n, m).
        for log in &logs {
            assert_eq!(log.nm_counts.len(), 1);
            assert!(log.nm_counts.contains_key(&(64, 8)));
        }
    }

    #[test]
    fn stage2_requires_warm_start_and_adds_density() {
        let dataset = tiny_dataset(5);
        let cfg = TaskTrainConfig {
            epochs: 1,
            batch: 4,
            pointwise: vec![8, 16],
            head: [8, 8],
            seed: 1,
            ..Default::default()
        };
        let (task, _) = train_task(&dataset, &cfg).unwrap();

        let mut stage1_cfg = TrainConfig {
            stage: Stage::Stage1,
            sampler: tiny_sampler_config(),
            stage1_m: 8,
            batch: 4,
            epochs: 1,
            seed: 2,
            ..Default::default()
        };
        let (stage1, _) = train_sampler(&dataset, &task, &stage1_cfg, None).unwrap();

        stage1_cfg.stage = Stage::Stage2;
        stage1_cfg.sizes = vec![4, 8, 16];
        let err = train_sampler(&dataset, &task, &stage1_cfg, None);
        assert!(matches!(err, Err(Error::Checkpoint(_))));

        let (stage2, logs) =
            train_sampler(&dataset, &task, &stage1_cfg, Some(&stage1.params)).unwrap();
        assert!(crate::refinement::has_density_attention_params(&stage2.params));
        // Drawn sizes come from the candidate set.
        for log in &logs {
            for (n, m) in log.nm_counts.keys() {
                assert_eq!(*n, 64);
                assert!([4, 8, 16].contains(m));
            }
        }
        // The trained checkpoint produces exactly m points for every candidate.
        for &m in &[4usize, 8, 16] {
            let out = stage2
                .sample(&dataset.test[0].0, m, 0)
                .unwrap();
            assert_eq!(out.len(), m);
        }
    }

    #[test]
    fn variable_input_sizes_draw_within_range() {
        let dataset = tiny_dataset(6);
        let cfg = TaskTrainConfig {
            epochs: 1,
            batch: 4,
            pointwise: vec![8, 16],
            head: [8, 8],
            seed: 1,
            ..Default::default()
        };
        let (task, _) = train_task(&dataset, &cfg).unwrap();
        let train_cfg = TrainConfig {
            stage: Stage::OneStage,
            sampler: tiny_sampler_config(),
            sizes: vec![4, 8],
            input_sizes: InputSizes::Range(32, 64),
            batch: 4,
            epochs: 1,
            seed: 3,
            ..Default::default()
        };
        let (_, logs) = train_sampler(&dataset, &task, &train_cfg, None).unwrap();
        for log in &logs {
            for (n, m) in log.nm_counts.keys() {
                assert!((32..=64).contains(n));
                assert!([4, 8].contains(m));
            }
        }
    }

    #[test]
    fn sampler_training_is_bit_deterministic() {
        let dataset = tiny_dataset(7);
        let cfg = TaskTrainConfig {
            epochs: 1,
            batch: 4,
            pointwise: vec![8, 16],
            head: [8, 8],
            seed: 1,
            ..Default::default()
        };
        let (task, _) = train_task(&dataset, &cfg).unwrap();
        let train_cfg = TrainConfig {
            stage: Stage::OneStage,
            sampler: tiny_sampler_config(),
            sizes: vec![8],
            batch: 4,
            epochs: 1,
            seed: 9,
            ..Default::default()
        };
        let (a, la) = train_sampler(&dataset, &task, &train_cfg, None).unwrap();
        let (b, lb) = train_sampler(&dataset, &task, &train_cfg, None).unwrap();
        assert_eq!(la, lb);
        for (name, t) in a.params.iter() {
            let other = b.params.get(name).unwrap();
            for (x, y) in t.data().iter().zip(other.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
