//! The offset refining block.
//!
//! A point-wise trunk lifts pre-sampled coordinates+features to c1-wide
//! point features E. The density attention sub-block (a density embedding
//! unit over fixed-size k-NN regions of the pre-sampled set plus a channel
//! attention unit) rescales E channel-wise so one network can serve many
//! sample sizes; a point-wise projection then emits per-point offsets that
//! are added to the pre-sampled coordinates.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry;
use crate::params::{glorot, zero_bias, ParamSet};
use crate::tensor::{Activation, Reduce, Tape, Tensor};

/// Widths of the refiner. `c_in` is the SF' width (feature width + 3);
/// the trunk output width is `c1`, the density feature width `c2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefinerConfig {
    pub c_in: usize,
    pub c1: usize,
    pub c2: usize,
    pub density_hidden: usize,
    pub attn_hidden: usize,
    pub proj_hidden: usize,
    pub k_d: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            c_in: 131,
            c1: 128,
            c2: 64,
            density_hidden: 64,
            attn_hidden: 128,
            proj_hidden: 64,
            k_d: 16,
        }
    }
}

impl RefinerConfig {
    /// Trunk and projection parameters under the `refine.` prefix. The
    /// final projection layer starts at exactly zero so a fresh sampler
    /// reproduces its pre-sampler bit for bit.
    pub fn init_trunk(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("refine.trunk1.w", glorot(rng, self.c_in, self.c1));
        p.insert("refine.trunk1.b", zero_bias(self.c1));
        p.insert("refine.trunk2.w", glorot(rng, self.c1, self.c1));
        p.insert("refine.trunk2.b", zero_bias(self.c1));
        p.insert("refine.proj1.w", glorot(rng, self.c1, self.proj_hidden));
        p.insert("refine.proj1.b", zero_bias(self.proj_hidden));
        p.insert("refine.proj2.w", Tensor::zeros(vec![self.proj_hidden, 3]));
        p.insert("refine.proj2.b", zero_bias(3));
        p
    }

    /// Density embedding and channel attention parameters; kept separate
    /// so the first training stage can omit them entirely.
    pub fn init_density_attention(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(
            "refine.density1.w",
            glorot(rng, 3 + self.c_in, self.density_hidden),
        );
        p.insert("refine.density1.b", zero_bias(self.density_hidden));
        p.insert("refine.density2.w", glorot(rng, self.density_hidden, self.c2));
        p.insert("refine.density2.b", zero_bias(self.c2));
        p.insert("refine.attn1.w", glorot(rng, self.c1 + self.c2, self.attn_hidden));
        p.insert("refine.attn1.b", zero_bias(self.attn_hidden));
        p.insert("refine.attn2.w", glorot(rng, self.attn_hidden, self.c1));
        p.insert("refine.attn2.b", zero_bias(self.c1));
        p
    }
}

/// Point-wise trunk: two linear+relu layers, row i of the output depends
/// only on row i of SF'.
pub fn trunk(tape: &Tape, sf: &Tensor, bound: &ParamSet) -> Result<Tensor> {
    let h = tape.linear_act(sf, bound.get("refine.trunk1.w")?, bound.get("refine.trunk1.b")?, Activation::Relu)?;
    tape.linear_act(&h, bound.get("refine.trunk2.w")?, bound.get("refine.trunk2.b")?, Activation::Relu)
}

/// Density embedding unit: for each pre-sampled point, gathers its k_d
/// nearest pre-sampled neighbors, feeds concat(s_j - s_i, SF'_j) through a
/// per-neighbor MLP and max-pools the region. Local density varies with
/// the sample size, so the pooled features carry sample-size cues.
pub fn density_embedding(
    tape: &Tape,
    s_prime: &[[f64; 3]],
    sf: &Tensor,
    k_d: usize,
    bound: &ParamSet,
) -> Result<Tensor> {
    let m = s_prime.len();
    if k_d > m {
        return Err(Error::Contract(format!(
            "density_embedding: k_d={k_d} exceeds m={m}"
        )));
    }
    let neighbors = geometry::knn(s_prime, s_prime, k_d)?;

    // Relative coordinates are a pure function of the fixed pre-sampled
    // coordinates; no gradient flows through them.
    let mut rel = vec![0.0; m * k_d * 3];
    for i in 0..m {
        for (j, &r) in neighbors.row(i).iter().enumerate() {
            let p = &s_prime[r as usize];
            let q = &s_prime[i];
            let at = (i * k_d + j) * 3;
            rel[at] = p[0] - q[0];
            rel[at + 1] = p[1] - q[1];
            rel[at + 2] = p[2] - q[2];
        }
    }
    let rel = Tensor::new(vec![m, k_d, 3], rel)?;
    let gathered = tape.gather_group(sf, &neighbors)?;
    let per_neighbor = tape.concat_cols(&rel, &gathered)?;
    let width = 3 + sf.cols();

    let flat = tape.reshape(&per_neighbor, vec![m * k_d, width])?;
    let h = tape.linear_act(
            &flat,
            bound.get("refine.density1.w")?,
            bound.get("refine.density1.b")?, Activation::Relu)?;
    let h = tape.linear_act(
            &h,
            bound.get("refine.density2.w")?,
            bound.get("refine.density2.b")?, Activation::Relu)?;
    let c2 = h.cols();
    let grouped = tape.reshape(&h, vec![m, k_d, c2])?;
    tape.reduce_group(&grouped, Reduce::Max)
}

/// Channel attention unit: average-pools concat(E, E-bar) over the m rows,
/// maps it through an MLP with a final sigmoid, duplicates the attention
/// vector m times and gates E channel-wise.
///
/// Returns (W, E') with E' = E ⊙ W.
pub fn channel_attention(
    tape: &Tape,
    e: &Tensor,
    e_bar: &Tensor,
    bound: &ParamSet,
) -> Result<(Tensor, Tensor)> {
    if e.rows() != e_bar.rows() {
        return Err(Error::Dimension(format!(
            "channel_attention: {} vs {} rows",
            e.rows(),
            e_bar.rows()
        )));
    }
    let m = e.rows();
    let cat = tape.concat_cols(e, e_bar)?;
    let pooled = tape.mean_rows(&cat)?;
    let h = tape.linear_act(&pooled, bound.get("refine.attn1.w")?, bound.get("refine.attn1.b")?, Activation::Relu)?;
    let gate = tape.linear_act(&h, bound.get("refine.attn2.w")?, bound.get("refine.attn2.b")?, Activation::Sigmoid)?;
    let w = tape.broadcast_rows(&gate, m)?;
    let adjusted = tape.hadamard(e, &w)?;
    Ok((w, adjusted))
}

/// Point-wise projection to offsets: linear+relu then a bare linear layer.
pub fn predict_offsets(tape: &Tape, e_adjusted: &Tensor, bound: &ParamSet) -> Result<Tensor> {
    let h = tape.linear_act(
            e_adjusted,
            bound.get("refine.proj1.w")?,
            bound.get("refine.proj1.b")?, Activation::Relu)?;
    tape.linear(&h, bound.get("refine.proj2.w")?, bound.get("refine.proj2.b")?)
}

/// Result of the refinement block.
pub struct RefineOutput {
    /// S = S' + offsets, m x 3.
    pub refined: Tensor,
    /// The predicted per-point offsets, m x 3.
    pub offsets: Tensor,
}

/// Full offset refining block.
///
/// With density attention disabled the gate is identically one (E' = E)
/// and neither k_d nor any density/attention parameter is touched. When
/// enabled, k_d is capped at m so small sample sizes remain valid.
pub fn refine_forward(
    tape: &Tape,
    s_prime: &Tensor,
    sf: &Tensor,
    bound: &ParamSet,
    cfg: &RefinerConfig,
    enable_density_attention: bool,
) -> Result<RefineOutput> {
    let e = trunk(tape, sf, bound)?;
    let adjusted = if enable_density_attention {
        let coords = s_prime.to_rows3()?;
        let k_d = cfg.k_d.min(coords.len());
        let e_bar = density_embedding(tape, &coords, sf, k_d, bound)?;
        let (_, adjusted) = channel_attention(tape, &e, &e_bar, bound)?;
        adjusted
    } else {
        e
    };
    let offsets = predict_offsets(tape, &adjusted, bound)?;
    let refined = geometry::apply_offsets(tape, s_prime, &offsets)?;
    Ok(RefineOutput { refined, offsets })
}

/// True when a parameter set contains density-attention tensors.
pub fn has_density_attention_params(params: &ParamSet) -> bool {
    params.contains("refine.density1.w") || params.contains("refine.attn1.w")
}
