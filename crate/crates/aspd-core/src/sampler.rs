//! The composed downsampler: feature embedding, heuristic pre-sampling and
//! offset refinement behind one parameter set, serializable as a single
//! checkpoint that serves any (input size, sample size) pair.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{IndexMatrix, IndexSet, PointCloud};
use crate::params::ParamSet;
use crate::presampling::{self, EmbedderConfig, PresamplerKind};
use crate::refinement::{self, RefinerConfig};
use crate::tensor::{Tape, Tensor};
use crate::training::adaptive_k;

/// Structure of the full sampler.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub embed: EmbedderConfig,
    pub refine: RefinerConfig,
    /// Reference neighborhood size at the reference input size.
    pub k0: usize,
    /// Reference input size for the adaptive neighborhood rule.
    pub n0: usize,
    pub presampler: PresamplerKind,
    pub density_attention: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            embed: EmbedderConfig::default(),
            refine: RefinerConfig::default(),
            k0: 40,
            n0: 1024,
            presampler: PresamplerKind::Fps,
            density_attention: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refine.c_in != self.embed.c + 3 {
            return Err(Error::Config(format!(
                "refiner input width {} must equal feature width {} + 3",
                self.refine.c_in, self.embed.c
            )));
        }
        if self.k0 == 0 || self.n0 == 0 {
            return Err(Error::Config("k0 and n0 must be positive".into()));
        }
        Ok(())
    }

    /// Serializes the structure into checkpoint config entries.
    pub fn to_config(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        map.insert("model".into(), "aspd".into());
        map.insert(
            "embed_widths".into(),
            format!(
                "{},{},{}",
                self.embed.widths[0], self.embed.widths[1], self.embed.widths[2]
            ),
        );
        map.insert("c".into(), self.embed.c.to_string());
        map.insert("c1".into(), self.refine.c1.to_string());
        map.insert("c2".into(), self.refine.c2.to_string());
        map.insert("density_hidden".into(), self.refine.density_hidden.to_string());
        map.insert("attn_hidden".into(), self.refine.attn_hidden.to_string());
        map.insert("proj_hidden".into(), self.refine.proj_hidden.to_string());
        map.insert("k_d".into(), self.refine.k_d.to_string());
        map.insert("k0".into(), self.k0.to_string());
        map.insert("n0".into(), self.n0.to_string());
        map.insert("presampler".into(), self.presampler.as_str().into());
        map.insert(
            "density_attention".into(),
            if self.density_attention { "1" } else { "0" }.into(),
        );
        map
    }

    pub fn from_config(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |key: &str| -> Result<&String> {
            map.get(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing config key '{key}'")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad config value for '{key}'")))
        };
        if get("model")? != "aspd" {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a '{}' model, expected 'aspd'",
                get("model")?
            )));
        }
        let widths: Vec<usize> = get("embed_widths")?
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint("bad embed_widths".into()))?;
        if widths.len() != 3 {
            return Err(Error::Checkpoint("embed_widths must have 3 entries".into()));
        }
        let c = parse_usize("c")?;
        let cfg = SamplerConfig {
            embed: EmbedderConfig {
                widths: [widths[0], widths[1], widths[2]],
                c,
            },
            refine: RefinerConfig {
                c_in: c + 3,
                c1: parse_usize("c1")?,
                c2: parse_usize("c2")?,
                density_hidden: parse_usize("density_hidden")?,
                attn_hidden: parse_usize("attn_hidden")?,
                proj_hidden: parse_usize("proj_hidden")?,
                k_d: parse_usize("k_d")?,
            },
            k0: parse_usize("k0")?,
            n0: parse_usize("n0")?,
            presampler: PresamplerKind::parse(get("presampler")?)?,
            density_attention: get("density_attention")? == "1",
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything produced by one sampler forward pass.
pub struct SamplerForward {
    pub indices: IndexSet,
    pub s_prime: Tensor,
    pub f_prime: Tensor,
    pub sf: Tensor,
    pub offsets: Tensor,
    pub refined: Tensor,
}

/// One forward pass over already-bound parameters.
///
/// `draw` selects the pre-sampler start (FPS) or seed (RS); `neighbors`
/// optionally reuses a precomputed k-NN graph of the cloud.
pub fn forward_on_tape(
    tape: &Tape,
    bound: &ParamSet,
    cfg: &SamplerConfig,
    cloud: &PointCloud,
    m: usize,
    draw: u64,
    neighbors: Option<&IndexMatrix>,
) -> Result<SamplerForward> {
    let n = cloud.len();
    let k = adaptive_k(n, cfg.n0, cfg.k0);
    let owned;
    let graph = match neighbors {
        Some(g) => g,
        None => {
            owned = crate::geometry::knn(cloud.points(), cloud.points(), k)?;
            &owned
        }
    };
    let features = presampling::embed(tape, &cloud.to_tensor(), graph, bound, &cfg.embed)?;
    let pre = presampling::presample(tape, cloud, &features, m, cfg.presampler, draw)?;
    let refined = refinement::refine_forward(
        tape,
        &pre.s_prime,
        &pre.sf,
        bound,
        &cfg.refine,
        cfg.density_attention,
    )?;
    Ok(SamplerForward {
        indices: pre.indices,
        s_prime: pre.s_prime,
        f_prime: pre.f_prime,
        sf: pre.sf,
        offsets: refined.offsets,
        refined: refined.refined,
    })
}

/// A trained (or fresh) sampler: structure plus parameters.
#[derive(Clone, Debug)]
pub struct AspdSampler {
    pub cfg: SamplerConfig,
    pub params: ParamSet,
}

impl AspdSampler {
    /// Fresh sampler. Density-attention parameters are created only when
    /// the configuration enables the sub-block.
    pub fn init(cfg: SamplerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = cfg.embed.init(&mut rng);
        params.merge(cfg.refine.init_trunk(&mut rng))?;
        if cfg.density_attention {
            params.merge(cfg.refine.init_density_attention(&mut rng))?;
        }
        Ok(Self { cfg, params })
    }

    /// Checks that the parameter set structurally matches the config.
    pub fn validate_params(&self) -> Result<()> {
        if self.cfg.density_attention && !refinement::has_density_attention_params(&self.params) {
            return Err(Error::Checkpoint(
                "density attention enabled but its parameters are missing".into(),
            ));
        }
        Ok(())
    }

    /// Downsamples a cloud to m points (inference).
    pub fn sample(&self, cloud: &PointCloud, m: usize, draw: u64) -> Result<PointCloud> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let fwd = forward_on_tape(&tape, &bound, &self.cfg, cloud, m, draw, None)?;
        PointCloud::from_tensor(&fwd.refined)
    }

    /// Downsamples one cloud to several sizes, sharing the embedding.
    pub fn sample_many(
        &self,
        cloud: &PointCloud,
        sizes: &[usize],
        draw: u64,
    ) -> Result<Vec<PointCloud>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let n = cloud.len();
        let k = adaptive_k(n, self.cfg.n0, self.cfg.k0);
        let graph = crate::geometry::knn(cloud.points(), cloud.points(), k)?;
        let features =
            presampling::embed(&tape, &cloud.to_tensor(), &graph, &bound, &self.cfg.embed)?;
        let mut out = Vec::with_capacity(sizes.len());
        for &m in sizes {
            let pre = presampling::presample(&tape, cloud, &features, m, self.cfg.presampler, draw)?;
            let refined = refinement::refine_forward(
                &tape,
                &pre.s_prime,
                &pre.sf,
                &bound,
                &self.cfg.refine,
                self.cfg.density_attention,
            )?;
            out.push(PointCloud::from_tensor(&refined.refined)?);
        }
        Ok(out)
    }
}
