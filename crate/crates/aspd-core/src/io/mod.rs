//! File formats: XYZ clouds, binary checkpoints, dataset manifests and
//! metric CSVs.

pub mod checkpoint;
pub mod dataset;
pub mod metrics;
pub mod xyz;

pub use checkpoint::{load_checkpoint, load_sampler, load_task, save_checkpoint, save_sampler, save_task};
pub use dataset::{gen_synthetic, load_dataset, Dataset, DatasetManifest};
pub use metrics::{metrics_csv_string, write_metrics_csv, MetricsRow};
pub use xyz::{load_xyz, save_xyz};
