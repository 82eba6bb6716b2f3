//! Pure point-set kernels: k-NN, farthest point sampling, random sampling,
//! Chamfer and Hausdorff distances, normalization.
//!
//! Everything here is a deterministic function of its inputs and safe to
//! call from any number of threads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// A point set in model space, one `[x, y, z]` row per point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("point cloud must contain a point".into()));
        }
        if !points.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Numeric("point cloud has non-finite coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows3(&self.points).expect("cloud coordinates are finite")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.to_rows3()?)
    }

    /// Rows selected by an index set, in selection order.
    pub fn select(&self, idx: &IndexSet) -> PointCloud {
        PointCloud {
            points: idx.indices().iter().map(|&i| self.points[i as usize]).collect(),
        }
    }

    /// Centers on the centroid and scales by the max point norm so the
    /// cloud fits the unit sphere. An all-identical cloud maps to all
    /// zeros with scale 1.
    pub fn normalize_unit_sphere(&self) -> PointCloud {
        let (cloud, _, _) = self.normalize_with_transform();
        cloud
    }

    /// Normalization that also reports the applied (centroid, scale) so
    /// results can be mapped back to the input frame.
    pub fn normalize_with_transform(&self) -> (PointCloud, [f64; 3], f64) {
        let n = self.points.len() as f64;
        let mut centroid = [0.0; 3];
        for p in &self.points {
            for d in 0..3 {
                centroid[d] += p[d];
            }
        }
        for c in centroid.iter_mut() {
            *c /= n;
        }
        let mut shifted: Vec<[f64; 3]> = self
            .points
            .iter()
            .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
            .collect();
        let max_norm = shifted
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max);
        let scale = if max_norm > 0.0 { max_norm } else { 1.0 };
        if max_norm > 0.0 {
            for p in shifted.iter_mut() {
                for d in 0..3 {
                    p[d] /= scale;
                }
            }
        }
        (PointCloud { points: shifted }, centroid, scale)
    }
}

/// Ordered distinct indices into a cloud; order is selection order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexSet {
    indices: Vec<u32>,
}

impl IndexSet {
    pub fn new(indices: Vec<u32>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(indices.len());
        for &i in &indices {
            if !seen.insert(i) {
                return Err(Error::Contract(format!("duplicate index {i}")));
            }
        }
        Ok(Self { indices })
    }

    pub(crate) fn from_distinct(indices: Vec<u32>) -> Self {
        Self { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// One-column index matrix view, for gathering rows.
    pub fn as_matrix(&self) -> IndexMatrix {
        IndexMatrix {
            rows: self.indices.len(),
            k: 1,
            data: self.indices.clone(),
        }
    }
}

/// Row-major matrix of indices, one row of k entries per query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMatrix {
    rows: usize,
    k: usize,
    data: Vec<u32>,
}

impl IndexMatrix {
    pub fn from_rows(rows: usize, k: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != rows * k {
            return Err(Error::Dimension(format!(
                "index matrix: {} entries for {rows} x {k}",
                data.len()
            )));
        }
        Ok(Self { rows, k, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn entries(&self) -> &[u32] {
        &self.data
    }

    pub(crate) fn check_bounds(&self, n: usize) -> Result<()> {
        match self.data.iter().find(|&&i| i as usize >= n) {
            Some(&i) => Err(Error::Index(format!("index {i} out of range for {n} rows"))),
            None => Ok(()),
        }
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Brute-force k nearest neighbors by squared Euclidean distance.
///
/// Each output row lists the k nearest reference indices for one query,
/// ascending by distance with ties broken by the lower index. When queries
/// and reference are the same set, each point is its own nearest neighbor.
pub fn knn(queries: &[[f64; 3]], reference: &[[f64; 3]], k: usize) -> Result<IndexMatrix> {
    let n = reference.len();
    if k == 0 || k > n {
        return Err(Error::Contract(format!(
            "knn: k={k} invalid for {n} reference points"
        )));
    }
    let mut data = vec![0u32; queries.len() * k];
    let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
    for (qi, q) in queries.iter().enumerate() {
        best.clear();
        let mut worst = (f64::INFINITY, u32::MAX);
        for (ri, r) in reference.iter().enumerate() {
            let key = (dist2(q, r), ri as u32);
            if best.len() == k && key >= worst {
                continue;
            }
            let pos = best.partition_point(|e| *e < key);
            best.insert(pos, key);
            if best.len() > k {
                best.pop();
            }
            worst = *best.last().unwrap();
        }
        for (j, (_, ri)) in best.iter().enumerate() {
            data[qi * k + j] = *ri;
        }
    }
    IndexMatrix::from_rows(queries.len(), k, data)
}

/// Farthest point sampling from an explicit start index.
///
/// Each subsequent selection maximizes the minimum distance to the points
/// already selected; ties go to the lowest index. Runs in O(n * m) via an
/// incremental minimum-distance array.
pub fn fps(cloud: &PointCloud, m: usize, start: usize) -> Result<IndexSet> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::Contract(format!("fps: m={m} invalid for n={n}")));
    }
    if start >= n {
        return Err(Error::Contract(format!("fps: start={start} out of range")));
    }
    let pts = cloud.points();
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut selected = Vec::with_capacity(m);
    let mut cur = start;
    loop {
        selected.push(cur as u32);
        taken[cur] = true;
        if selected.len() == m {
            break;
        }
        let p = pts[cur];
        let mut best = f64::NEG_INFINITY;
        let mut best_i = usize::MAX;
        for i in 0..n {
            let d2 = dist2(&pts[i], &p);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if !taken[i] && min_d2[i] > best {
                best = min_d2[i];
                best_i = i;
            }
        }
        cur = best_i;
    }
    Ok(IndexSet::from_distinct(selected))
}

/// m distinct indices drawn without replacement from a seeded generator.
pub fn random_sample(cloud: &PointCloud, m: usize, seed: u64) -> Result<IndexSet> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::Contract(format!(
            "random_sample: m={m} invalid for n={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<u32> = (0..n as u32).collect();
    let (chosen, _) = all.partial_shuffle(&mut rng, m);
    Ok(IndexSet::from_distinct(chosen.to_vec()))
}

/// Symmetric Chamfer distance: mean squared nearest-neighbor distance in
/// both directions.
pub fn chamfer(p: &[[f64; 3]], s: &[[f64; 3]]) -> Result<f64> {
    let (a, b) = chamfer_parts(p, s)?;
    Ok(a + b)
}

/// The two mean terms of the Chamfer distance: (sample->p mean, p->sample
/// mean). Exposed so losses and metrics share one evaluation order.
pub(crate) fn chamfer_parts(p: &[[f64; 3]], s: &[[f64; 3]]) -> Result<(f64, f64)> {
    if p.is_empty() || s.is_empty() {
        return Err(Error::Contract("chamfer: empty point set".into()));
    }
    let mut sum_s = 0.0;
    for q in s {
        sum_s += p.iter().map(|r| dist2(q, r)).fold(f64::INFINITY, f64::min);
    }
    let mut sum_p = 0.0;
    for q in p {
        sum_p += s.iter().map(|r| dist2(q, r)).fold(f64::INFINITY, f64::min);
    }
    Ok((sum_s / s.len() as f64, sum_p / p.len() as f64))
}

/// Symmetric Hausdorff distance with plain (non-squared) Euclidean
/// distances: the larger of the two directed max-min distances.
pub fn hausdorff(p: &[[f64; 3]], s: &[[f64; 3]]) -> Result<f64> {
    if p.is_empty() || s.is_empty() {
        return Err(Error::Contract("hausdorff: empty point set".into()));
    }
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
        from.iter()
            .map(|q| to.iter().map(|r| dist2(q, r)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Ok(directed(p, s).max(directed(s, p)).sqrt())
}

/// S = S' + dS on the tape; both operands m x 3.
pub fn apply_offsets(tape: &Tape, s_prime: &Tensor, delta: &Tensor) -> Result<Tensor> {
    tape.add(s_prime, delta)
}
