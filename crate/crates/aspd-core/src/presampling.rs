//! Feature embedding and heuristic pre-sampling.
//!
//! A small edge-convolution backbone embeds per-point features over a
//! static coordinate-space k-NN graph shared by all layers. A flexible
//! heuristic sampler (FPS or RS) then picks m of the n points; the chosen
//! coordinates, features and their concatenation feed the refiner.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, IndexMatrix, IndexSet, PointCloud};
use crate::params::{glorot, zero_bias, ParamSet};
use crate::tensor::{Activation, Tape, Tensor};

/// Structure of the embedding backbone: three edge-conv widths fused down
/// to the feature width `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbedderConfig {
    pub widths: [usize; 3],
    pub c: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            widths: [64, 64, 128],
            c: 128,
        }
    }
}

impl EmbedderConfig {
    /// Fresh Glorot-initialized parameters under the `embed.` prefix.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let [w0, w1, w2] = self.widths;
        let mut p = ParamSet::new();
        p.insert("embed.ec1.w", glorot(rng, 2 * 3, w0));
        p.insert("embed.ec1.b", zero_bias(w0));
        p.insert("embed.ec2.w", glorot(rng, 2 * w0, w1));
        p.insert("embed.ec2.b", zero_bias(w1));
        p.insert("embed.ec3.w", glorot(rng, 2 * w1, w2));
        p.insert("embed.ec3.b", zero_bias(w2));
        p.insert("embed.fuse.w", glorot(rng, w0 + w1 + w2, self.c));
        p.insert("embed.fuse.b", zero_bias(self.c));
        p
    }
}

/// One edge-convolution layer: per neighbor edge features
/// concat(f_i, f_j - f_i) -> linear -> relu, max-pooled over the k
/// neighbors of each point.
pub fn edgeconv_layer(
    tape: &Tape,
    features: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    neighbors: &IndexMatrix,
) -> Result<Tensor> {
    tape.edge_conv(features, weight, bias, neighbors)
}

/// Embeds n x 3 coordinates into n x c features over a fixed neighbor
/// graph: three edge-conv layers, concatenated and fused point-wise.
pub fn embed(
    tape: &Tape,
    points: &Tensor,
    neighbors: &IndexMatrix,
    bound: &ParamSet,
    _cfg: &EmbedderConfig,
) -> Result<Tensor> {
    let ec1 = tape.edge_conv(
        points,
        bound.get("embed.ec1.w")?,
        bound.get("embed.ec1.b")?,
        neighbors,
    )?;
    let ec2 = tape.edge_conv(
        &ec1,
        bound.get("embed.ec2.w")?,
        bound.get("embed.ec2.b")?,
        neighbors,
    )?;
    let ec3 = tape.edge_conv(
        &ec2,
        bound.get("embed.ec3.w")?,
        bound.get("embed.ec3.b")?,
        neighbors,
    )?;
    let cat = tape.concat_cols(&tape.concat_cols(&ec1, &ec2)?, &ec3)?;
    tape.linear_act(
        &cat,
        bound.get("embed.fuse.w")?,
        bound.get("embed.fuse.b")?,
        Activation::Relu,
    )
}

/// Convenience wrapper that builds the k-NN graph from the cloud itself.
pub fn embed_cloud(
    tape: &Tape,
    cloud: &PointCloud,
    k: usize,
    bound: &ParamSet,
    cfg: &EmbedderConfig,
) -> Result<Tensor> {
    let neighbors = geometry::knn(cloud.points(), cloud.points(), k)?;
    embed(tape, &cloud.to_tensor(), &neighbors, bound, cfg)
}

/// Which heuristic picks the pre-sampled subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresamplerKind {
    Fps,
    Rs,
}

impl PresamplerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PresamplerKind::Fps => "fps",
            PresamplerKind::Rs => "rs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fps" => Ok(PresamplerKind::Fps),
            "rs" => Ok(PresamplerKind::Rs),
            other => Err(Error::Config(format!("unknown presampler '{other}'"))),
        }
    }
}

/// Output of the pre-sampling stage.
pub struct PreSampleOutput {
    pub indices: IndexSet,
    /// m x 3 selected coordinates; exact copies of input rows.
    pub s_prime: Tensor,
    /// m x c selected features, differentiable w.r.t. the embedding.
    pub f_prime: Tensor,
    /// m x (c+3) concatenation [S' | F'].
    pub sf: Tensor,
}

/// Selects m of n points with the requested heuristic and gathers their
/// coordinates and features.
///
/// `draw` is the FPS start index or the RS seed depending on the kind.
/// The gather is differentiable w.r.t. the features; the index selection
/// itself is not.
pub fn presample(
    tape: &Tape,
    cloud: &PointCloud,
    features: &Tensor,
    m: usize,
    kind: PresamplerKind,
    draw: u64,
) -> Result<PreSampleOutput> {
    let n = cloud.len();
    if m >= n {
        return Err(Error::Contract(format!(
            "presample: m={m} must be smaller than n={n}"
        )));
    }
    let indices = match kind {
        PresamplerKind::Fps => geometry::fps(cloud, m, draw as usize)?,
        PresamplerKind::Rs => geometry::random_sample(cloud, m, draw)?,
    };
    let s_prime = cloud.select(&indices).to_tensor();
    let gathered = tape.gather_group(features, &indices.as_matrix())?;
    let f_prime = tape.reshape(&gathered, vec![m, features.cols()])?;
    let sf = tape.concat_cols(&s_prime, &f_prime)?;
    Ok(PreSampleOutput {
        indices,
        s_prime,
        f_prime,
        sf,
    })
}

/// Deterministic rng handle for presampler draws during training.
pub fn derive_draw(rng: &mut ChaCha8Rng, kind: PresamplerKind, n: usize) -> u64 {
    use rand::Rng;
    match kind {
        PresamplerKind::Fps => rng.gen_range(0..n as u64),
        PresamplerKind::Rs => rng.gen::<u64>(),
    }
}
