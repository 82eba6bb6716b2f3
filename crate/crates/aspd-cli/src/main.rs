//! Command-line surface for dataset generation, training, sampling,
//! evaluation and micro-benchmarks.
//!
//! Exit codes: 0 success, 2 configuration/contract errors, 3 io/format
//! errors, 4 numeric errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use aspd_core::error::{Error, Result};
use aspd_core::geometry::{self, PointCloud};
use aspd_core::io::{
    self, dataset::load_dataset, load_sampler, load_task, metrics::write_metrics_csv,
    save_sampler, save_task,
};
use aspd_core::objectives::LossWeights;
use aspd_core::presampling::PresamplerKind;
use aspd_core::taskheads::accuracy_eval;
use aspd_core::training::{
    evaluate_grid, sampler_log_csv, task_log_config_entries, train_sampler, train_task,
    InputSizes, SamplerSpec, Stage, TaskTrainConfig, TrainConfig,
};

#[derive(Parser)]
#[command(name = "aspd", version, about = "Arbitrary-size task-aware point cloud downsampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape-classification dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long = "per-class")]
        per_class: usize,
        #[arg(long)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the classification task network on full clouds.
    TrainTask {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Point-wise layer widths.
        #[arg(long, default_value = "64,64,128,1024")]
        widths: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the downsampler against a frozen task network.
    TrainSampler {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training stage: 1, 2 or one.
        #[arg(long, default_value = "2")]
        stage: String,
        /// Stage-1 checkpoint to warm-start stage 2 from.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Sample-size candidates (stage 2/one); a single value fixes the
        /// stage-1 sample size.
        #[arg(long, default_value = "16,32,64,128,256,512")]
        sizes: String,
        #[arg(long, default_value = "fps")]
        presampler: String,
        /// Cut off the density attention sub-block.
        #[arg(long = "no-density-attention", default_value_t = false)]
        no_density_attention: bool,
        /// Draw input sizes per batch from lo:hi instead of native sizes.
        #[arg(long = "var-input")]
        var_input: Option<String>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 10.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Downsample one XYZ file.
    Sample {
        #[arg(long)]
        input: PathBuf,
        /// `fps`, `rs`, or a sampler checkpoint path.
        #[arg(long)]
        sampler: String,
        #[arg(long)]
        m: usize,
        /// FPS start index or RS seed.
        #[arg(long, default_value_t = 0)]
        start: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate samplers against task checkpoints over a size grid.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: `fps`, `rs`, or checkpoint paths.
        #[arg(long)]
        samplers: String,
        /// Comma-separated task checkpoint paths.
        #[arg(long)]
        tasks: String,
        #[arg(long, default_value = "16,32,64,128,256,512")]
        sizes: String,
        #[arg(long = "input-sizes")]
        input_sizes: Option<String>,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Time a geometry kernel.
    Bench {
        #[arg(long)]
        op: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        m: usize,
        #[arg(long, default_value_t = 40)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        repeat: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            classes,
            per_class,
            points,
            seed,
        } => {
            let manifest = io::gen_synthetic(&out, classes, per_class, points, seed)?;
            println!(
                "wrote {} train + {} test clouds ({} classes, {} points each) to {}",
                manifest.train.len(),
                manifest.test.len(),
                manifest.classes.len(),
                manifest.points_per_cloud,
                out.display()
            );
            Ok(())
        }
        Command::TrainTask {
            data,
            out,
            epochs,
            batch,
            widths,
            seed,
        } => {
            let dataset = load_dataset(&data)?;
            let cfg = TaskTrainConfig {
                epochs,
                batch,
                pointwise: parse_usize_list(&widths, "widths")?,
                seed,
                ..Default::default()
            };
            let start = Instant::now();
            let (model, logs) = train_task(&dataset, &cfg)?;
            let acc = accuracy_eval(&model, &dataset.test, None)?;
            println!(
                "trained {} epochs in {:.1?}; final train loss {:.4}, test accuracy {:.4}",
                epochs,
                start.elapsed(),
                logs.last().map(|l| l.loss).unwrap_or(f64::NAN),
                acc
            );
            let mut extra: BTreeMap<String, String> =
                task_log_config_entries(&logs).into_iter().collect();
            extra.insert("test_acc".into(), format!("{acc:.6}"));
            extra.insert("seed".into(), seed.to_string());
            save_task(&out, &model, &extra)?;
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::TrainSampler {
            data,
            task,
            out,
            stage,
            from,
            sizes,
            presampler,
            no_density_attention,
            var_input,
            epochs,
            lambda,
            alpha,
            beta,
            seed,
        } => {
            let dataset = load_dataset(&data)?;
            let (task_model, _) = load_task(&task)?;
            let stage = Stage::parse(&stage)?;
            let sizes = parse_usize_list(&sizes, "sizes")?;
            let mut cfg = TrainConfig {
                stage,
                epochs,
                seed,
                weights: LossWeights::new(lambda, alpha, beta)?,
                ..Default::default()
            };
            cfg.sampler.presampler = PresamplerKind::parse(&presampler)?;
            cfg.sampler.density_attention = !no_density_attention;
            if stage == Stage::Stage1 && sizes.len() == 1 {
                cfg.stage1_m = sizes[0];
            } else {
                cfg.sizes = sizes;
            }
            if let Some(range) = var_input {
                let (lo, hi) = range
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("bad --var-input '{range}'")))?;
                let lo = lo
                    .parse()
                    .map_err(|_| Error::Config(format!("bad --var-input '{range}'")))?;
                let hi = hi
                    .parse()
                    .map_err(|_| Error::Config(format!("bad --var-input '{range}'")))?;
                cfg.input_sizes = InputSizes::Range(lo, hi);
            }

            let warm = match (stage, from) {
                (Stage::Stage2, Some(path)) => Some(load_sampler(path)?.0.params),
                (Stage::Stage2, None) => {
                    return Err(Error::Config(
                        "--stage 2 requires --from with the stage-1 checkpoint".into(),
                    ))
                }
                (_, Some(_)) => {
                    return Err(Error::Config(
                        "--from is only meaningful with --stage 2".into(),
                    ))
                }
                (_, None) => None,
            };

            let start = Instant::now();
            let (sampler, logs) = train_sampler(&dataset, &task_model, &cfg, warm.as_ref())?;
            println!(
                "stage {} trained {} epochs in {:.1?}; compound loss {:.4} -> {:.4}",
                stage.as_str(),
                epochs,
                start.elapsed(),
                logs.first().map(|l| l.loss_total).unwrap_or(f64::NAN),
                logs.last().map(|l| l.loss_total).unwrap_or(f64::NAN),
            );

            let mut extra = BTreeMap::new();
            extra.insert("stage".to_string(), stage.as_str().to_string());
            extra.insert("seed".to_string(), seed.to_string());
            save_sampler(&out, &sampler, &extra)?;
            let log_path = log_path_for(&out);
            std::fs::write(&log_path, sampler_log_csv(&logs))?;
            println!(
                "checkpoint written to {}; log to {}",
                out.display(),
                log_path.display()
            );
            Ok(())
        }
        Command::Sample {
            input,
            sampler,
            m,
            start,
            out,
        } => {
            let cloud = io::load_xyz(&input)?;
            let sampled = match sampler.as_str() {
                "fps" => {
                    let idx = geometry::fps(&cloud, m, start as usize)?;
                    cloud.select(&idx)
                }
                "rs" => {
                    let idx = geometry::random_sample(&cloud, m, start)?;
                    cloud.select(&idx)
                }
                path => {
                    let (model, _) = load_sampler(path)?;
                    // The network runs in normalized space; results map back
                    // to the input frame.
                    let (normalized, centroid, scale) = cloud.normalize_with_transform();
                    let refined = model.sample(&normalized, m, start)?;
                    let restored: Vec<[f64; 3]> = refined
                        .points()
                        .iter()
                        .map(|p| {
                            [
                                p[0] * scale + centroid[0],
                                p[1] * scale + centroid[1],
                                p[2] * scale + centroid[2],
                            ]
                        })
                        .collect();
                    PointCloud::new(restored)?
                }
            };
            io::save_xyz(&sampled, &out)?;
            println!("sampled {} -> {} points into {}", cloud.len(), m, out.display());
            Ok(())
        }
        Command::Eval {
            data,
            samplers,
            tasks,
            sizes,
            input_sizes,
            csv,
        } => {
            let dataset = load_dataset(&data)?;
            let mut specs = Vec::new();
            for token in samplers.split(',') {
                match token {
                    "fps" => specs.push(SamplerSpec::Fps),
                    "rs" => specs.push(SamplerSpec::Rs { seed: 0 }),
                    path => {
                        let (model, _) = load_sampler(path)?;
                        specs.push(SamplerSpec::Aspd {
                            name: stem_name(path),
                            sampler: model,
                        });
                    }
                }
            }
            let mut task_models = Vec::new();
            for path in tasks.split(',') {
                let (model, _) = load_task(path)?;
                task_models.push((stem_name(path), model));
            }
            let sizes = parse_usize_list(&sizes, "sizes")?;
            let input_sizes = input_sizes
                .map(|s| parse_usize_list(&s, "input-sizes"))
                .transpose()?;
            let rows = evaluate_grid(
                &specs,
                &task_models,
                &dataset,
                &sizes,
                input_sizes.as_deref(),
            )?;
            write_metrics_csv(&rows, &csv)?;
            for row in &rows {
                println!(
                    "{:12} {:10} n={:5} m={:4} acc={:.4} hd={:.4}",
                    row.sampler, row.task_model, row.n, row.m, row.acc, row.hd
                );
            }
            println!("{} grid cells written to {}", rows.len(), csv.display());
            Ok(())
        }
        Command::Bench {
            op,
            n,
            m,
            k,
            repeat,
        } => bench(&op, n, m, k, repeat),
    }
}

fn bench(op: &str, n: usize, m: usize, k: usize, repeat: usize) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xbe7c);
    let cloud = PointCloud::new(
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect(),
    )?;
    let other = PointCloud::new(
        (0..m.max(1))
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect(),
    )?;
    if repeat == 0 {
        return Err(Error::Config("--repeat must be positive".into()));
    }
    let mut total = std::time::Duration::ZERO;
    let mut best = std::time::Duration::MAX;
    for _ in 0..repeat {
        let start = Instant::now();
        match op {
            "fps" => {
                geometry::fps(&cloud, m, 0)?;
            }
            "knn" => {
                geometry::knn(cloud.points(), cloud.points(), k)?;
            }
            "chamfer" => {
                geometry::chamfer(cloud.points(), other.points())?;
            }
            other => return Err(Error::Config(format!("unknown bench op '{other}'"))),
        }
        let el = start.elapsed();
        total += el;
        best = best.min(el);
    }
    println!(
        "{op}: n={n} m={m} k={k} repeat={repeat}  mean={:?}  best={:?}",
        total / repeat as u32,
        best
    );
    Ok(())
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>> {
    let list: Vec<usize> = s
        .split(',')
        .map(|tok| tok.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad --{what} list '{s}'")))?;
    if list.is_empty() {
        return Err(Error::Config(format!("--{what} list is empty")));
    }
    Ok(list)
}

fn stem_name(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

fn log_path_for(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".log.csv");
    ckpt.with_file_name(name)
}
