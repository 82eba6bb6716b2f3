//! Evaluation grids over samplers, task models and size pairs.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{self, PointCloud};
use crate::io::dataset::Dataset;
use crate::io::metrics::MetricsRow;
use crate::sampler::AspdSampler;
use crate::taskheads::TaskModel;

/// A sampler under evaluation.
pub enum SamplerSpec {
    /// Farthest point sampling from start index 0 (deterministic).
    Fps,
    /// Random sampling with per-cloud seeds derived from `seed`.
    Rs { seed: u64 },
    /// A trained (or fresh) refinement sampler.
    Aspd { name: String, sampler: AspdSampler },
}

impl SamplerSpec {
    pub fn name(&self) -> &str {
        match self {
            SamplerSpec::Fps => "fps",
            SamplerSpec::Rs { .. } => "rs",
            SamplerSpec::Aspd { name, .. } => name,
        }
    }
}

/// Runs every (sampler, task model, input size, sample size) cell over the
/// test split: classification accuracy of the sampled sets plus their mean
/// Hausdorff distance to the inputs. Rows are emitted in deterministic
/// sampler -> task -> n -> m order.
pub fn evaluate_grid(
    samplers: &[SamplerSpec],
    tasks: &[(String, TaskModel)],
    dataset: &Dataset,
    sizes: &[usize],
    input_sizes: Option<&[usize]>,
) -> Result<Vec<MetricsRow>> {
    if samplers.is_empty() || tasks.is_empty() {
        return Err(Error::Contract(
            "evaluate_grid: need at least one sampler and one task model".into(),
        ));
    }
    if dataset.test.is_empty() {
        return Err(Error::Contract("evaluate_grid: empty test split".into()));
    }
    if sizes.is_empty() {
        return Err(Error::Contract("evaluate_grid: no sample sizes".into()));
    }
    let native = vec![dataset.points_per_cloud];
    let input_sizes = input_sizes.unwrap_or(&native);

    let mut rows = Vec::new();
    for spec in samplers {
        for n in input_sizes.iter().copied() {
            // Sample every test cloud once per m; embeddings are shared
            // across the m grid for the learned sampler.
            let per_cloud: Vec<(Vec<PointCloud>, Vec<f64>, usize)> = dataset
                .test
                .par_iter()
                .enumerate()
                .map(|(ci, (cloud, label))| -> Result<(Vec<PointCloud>, Vec<f64>, usize)> {
                    let resized = resize_cloud(cloud, n)?;
                    let sampled = sample_all_sizes(spec, &resized, sizes, ci)?;
                    let hd = sampled
                        .iter()
                        .map(|s| geometry::hausdorff(resized.points(), s.points()))
                        .collect::<Result<Vec<f64>>>()?;
                    Ok((sampled, hd, *label))
                })
                .collect::<Result<Vec<_>>>()?;

            for (task_name, task) in tasks {
                for (mi, &m) in sizes.iter().enumerate() {
                    let mut correct = 0usize;
                    let mut hd_sum = 0.0;
                    let preds: Vec<(usize, usize)> = per_cloud
                        .par_iter()
                        .map(|(sampled, _, label)| {
                            task.predict(&sampled[mi]).map(|p| (p, *label))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    for ((pred, label), (_, hd, _)) in preds.iter().zip(&per_cloud) {
                        correct += (pred == label) as usize;
                        hd_sum += hd[mi];
                    }
                    rows.push(MetricsRow {
                        sampler: spec.name().to_string(),
                        task_model: task_name.clone(),
                        n,
                        m,
                        acc: correct as f64 / per_cloud.len() as f64,
                        hd: hd_sum / per_cloud.len() as f64,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Takes the first n points when shrinking; the generated clouds are in
/// random surface order, so a prefix is an unbiased subset.
fn resize_cloud(cloud: &PointCloud, n: usize) -> Result<PointCloud> {
    if n > cloud.len() {
        return Err(Error::Contract(format!(
            "requested input size {n} exceeds cloud size {}",
            cloud.len()
        )));
    }
    if n == cloud.len() {
        return Ok(cloud.clone());
    }
    PointCloud::new(cloud.points()[..n].to_vec())
}

fn sample_all_sizes(
    spec: &SamplerSpec,
    cloud: &PointCloud,
    sizes: &[usize],
    cloud_index: usize,
) -> Result<Vec<PointCloud>> {
    match spec {
        SamplerSpec::Fps => {
            // One maximal FPS run serves every m via the prefix property.
            let max_m = sizes.iter().copied().max().unwrap().min(cloud.len());
            let full = geometry::fps(cloud, max_m, 0)?;
            sizes
                .iter()
                .map(|&m| {
                    if m > cloud.len() {
                        return Err(Error::Contract(format!(
                            "sample size {m} exceeds input size {}",
                            cloud.len()
                        )));
                    }
                    let idx =
                        geometry::IndexSet::new(full.indices()[..m].to_vec()).expect("distinct");
                    Ok(cloud.select(&idx))
                })
                .collect()
        }
        SamplerSpec::Rs { seed } => sizes
            .iter()
            .map(|&m| {
                let per_cloud =
                    seed ^ (cloud_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (m as u64);
                let idx = geometry::random_sample(cloud, m, per_cloud)?;
                Ok(cloud.select(&idx))
            })
            .collect(),
        SamplerSpec::Aspd { sampler, .. } => sampler.sample_many(cloud, sizes, 0),
    }
}
