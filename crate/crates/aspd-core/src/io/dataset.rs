//! Synthetic parametric-shape datasets and the on-disk manifest.
//!
//! Clouds are uniformly surface-sampled from a fixed shape menu, normalized
//! to the unit sphere and written as XYZ files with an 80/20 train/test
//! split per class. A generic directory loader ingests any dataset laid out
//! the same way.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::io::xyz::{load_xyz, save_xyz};

/// Shape menu in class-index order.
pub const SHAPE_MENU: [&str; 8] = [
    "sphere",
    "cube",
    "cylinder",
    "cone",
    "torus",
    "plane",
    "two_spheres",
    "capped_cylinder",
];

/// Lists the dataset contents. Paths are relative to the manifest's
/// directory; class indices are dense in `[0, classes.len())`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub points_per_cloud: usize,
    pub train: Vec<(String, usize)>,
    pub test: Vec<(String, usize)>,
}

impl DatasetManifest {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        fs::write(dir.as_ref().join("manifest.json"), text)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("manifest.json");
        let text = fs::read_to_string(&path)?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        let n = self.classes.len();
        let mut seen = vec![false; n];
        for (file, class) in self.train.iter().chain(&self.test) {
            if *class >= n {
                return Err(Error::Format(format!(
                    "manifest entry '{file}' has class {class} outside [0, {n})"
                )));
            }
            seen[*class] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Format("manifest class indices are not dense".into()));
        }
        Ok(())
    }
}

/// A dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub points_per_cloud: usize,
    pub train: Vec<(PointCloud, usize)>,
    pub test: Vec<(PointCloud, usize)>,
}

/// Reads the manifest under `dir` and loads every listed cloud.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = DatasetManifest::load(dir)?;
    let read = |entries: &[(String, usize)]| -> Result<Vec<(PointCloud, usize)>> {
        entries
            .iter()
            .map(|(file, class)| Ok((load_xyz(dir.join(file))?, *class)))
            .collect()
    };
    Ok(Dataset {
        classes: manifest.classes.clone(),
        points_per_cloud: manifest.points_per_cloud,
        train: read(&manifest.train)?,
        test: read(&manifest.test)?,
    })
}

/// Generates a synthetic dataset under `out_dir`: `classes` shapes from the
/// menu, `per_class` clouds each of `points` points, split 80/20 into train
/// and test. Byte-deterministic for a fixed seed.
pub fn gen_synthetic(
    out_dir: impl AsRef<Path>,
    classes: usize,
    per_class: usize,
    points: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(2..=SHAPE_MENU.len()).contains(&classes) {
        return Err(Error::Config(format!(
            "classes must be in [2, {}], got {classes}",
            SHAPE_MENU.len()
        )));
    }
    if per_class == 0 || points == 0 {
        return Err(Error::Config("per_class and points must be positive".into()));
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_test = per_class / 5;
    let n_train = per_class - n_test;

    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..classes {
        let name = SHAPE_MENU[class];
        fs::create_dir_all(dir.join(name))?;
        for i in 0..per_class {
            let cloud = sample_shape(class, points, &mut rng)?.normalize_unit_sphere();
            let split = if i < n_train { "train" } else { "test" };
            let rel: PathBuf = [name, &format!("{split}_{i:04}.xyz")].iter().collect();
            save_xyz(&cloud, dir.join(&rel))?;
            let entry = (rel.to_string_lossy().into_owned(), class);
            if i < n_train {
                train.push(entry);
            } else {
                test.push(entry);
            }
        }
    }
    let manifest = DatasetManifest {
        classes: SHAPE_MENU[..classes].iter().map(|s| s.to_string()).collect(),
        points_per_cloud: points,
        train,
        test,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Uniformly surface-samples one cloud of the given shape class.
pub fn sample_shape(class: usize, points: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    if class >= SHAPE_MENU.len() {
        return Err(Error::Config(format!("shape class {class} out of range")));
    }
    let pts = (0..points).map(|_| shape_point(class, rng)).collect();
    PointCloud::new(pts)
}

fn shape_point(class: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match class {
        // Sphere of radius 1.
        0 => sphere_point(rng, 1.0, [0.0; 3]),
        // Cube surface, half-side 0.8.
        1 => {
            let h = 0.8;
            let face = rng.gen_range(0..6u8);
            let a = rng.gen_range(-h..h);
            let b = rng.gen_range(-h..h);
            match face {
                0 => [h, a, b],
                1 => [-h, a, b],
                2 => [a, h, b],
                3 => [a, -h, b],
                4 => [a, b, h],
                _ => [a, b, -h],
            }
        }
        // Open cylinder side wall, radius 0.6, half-height 0.9.
        2 => {
            let theta = rng.gen_range(0.0..TAU);
            [0.6 * theta.cos(), 0.6 * theta.sin(), rng.gen_range(-0.9..0.9)]
        }
        // Cone side surface: apex above a base circle; area density grows
        // linearly from the apex, hence the sqrt draw.
        3 => {
            let apex = [0.0, 0.0, 0.9];
            let theta = rng.gen_range(0.0..TAU);
            let base = [0.8 * theta.cos(), 0.8 * theta.sin(), -0.6];
            let t = rng.gen::<f64>().sqrt();
            [
                apex[0] + t * (base[0] - apex[0]),
                apex[1] + t * (base[1] - apex[1]),
                apex[2] + t * (base[2] - apex[2]),
            ]
        }
        // Torus, ring radius 0.7, tube radius 0.28; the tube angle is
        // rejection-sampled against its area weight.
        4 => {
            let (big_r, small_r) = (0.7, 0.28);
            let theta = rng.gen_range(0.0..TAU);
            let phi = loop {
                let phi = rng.gen_range(0.0..TAU);
                let w = (big_r + small_r * phi.cos()) / (big_r + small_r);
                if rng.gen::<f64>() < w {
                    break phi;
                }
            };
            let ring = big_r + small_r * phi.cos();
            [ring * theta.cos(), ring * theta.sin(), small_r * phi.sin()]
        }
        // Flat square patch.
        5 => [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), 0.0],
        // Two disjoint spheres of equal area.
        6 => {
            let center = if rng.gen::<bool>() { 0.55 } else { -0.55 };
            sphere_point(rng, 0.42, [center, 0.0, 0.0])
        }
        // Cylinder with both end caps, area-weighted.
        _ => {
            let (r, hh) = (0.6, 0.9);
            let lateral = TAU * r * (2.0 * hh);
            let caps = TAU * r * r; // two caps: 2 * pi r^2
            let u = rng.gen_range(0.0..lateral + caps);
            if u < lateral {
                let theta = rng.gen_range(0.0..TAU);
                [r * theta.cos(), r * theta.sin(), rng.gen_range(-hh..hh)]
            } else {
                let theta = rng.gen_range(0.0..TAU);
                let rad = r * rng.gen::<f64>().sqrt();
                let z = if rng.gen::<bool>() { hh } else { -hh };
                [rad * theta.cos(), rad * theta.sin(), z]
            }
        }
    }
}

fn sphere_point(rng: &mut ChaCha8Rng, radius: f64, center: [f64; 3]) -> [f64; 3] {
    let z = rng.gen_range(-1.0..1.0f64);
    let phi = rng.gen_range(0.0..TAU);
    let r = (1.0 - z * z).sqrt();
    [
        center[0] + radius * r * phi.cos(),
        center[1] + radius * r * phi.sin(),
        center[2] + radius * z,
    ]
}
