//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! - magic `ASPD`, format version (u32)
//! - config block: u32 byte length, then UTF-8 `key=value` lines sorted by key
//! - tensor count (u32), then per tensor sorted by name:
//!   name (u32 length + UTF-8), rank (u8), dims (u64 each),
//!   data as f32 little-endian, row-major.
//!
//! Tensors are stored at 32-bit precision and widened to f64 on load; a
//! saved-then-loaded checkpoint reproduces its tensors bit-exactly at
//! 32-bit precision.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::sampler::{AspdSampler, SamplerConfig};
use crate::taskheads::{PointNetConfig, TaskModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ASPD";
const VERSION: u32 = 1;

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ParamSet,
    config: &BTreeMap<String, String>,
) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let mut block = String::new();
    for (k, v) in config {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Config(format!(
                "config entry '{k}' contains reserved characters"
            )));
        }
        block.push_str(k);
        block.push('=');
        block.push_str(v);
        block.push('\n');
    }
    w.write_all(&(block.len() as u32).to_le_bytes())?;
    w.write_all(block.as_bytes())?;

    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = tensor.shape();
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(ParamSet, BTreeMap<String, String>)> {
    let file = File::open(path.as_ref())?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }

    let config_len = read_u32(&mut r)? as usize;
    let mut block = vec![0u8; config_len];
    read_exact(&mut r, &mut block)?;
    let block =
        String::from_utf8(block).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let mut config = BTreeMap::new();
    for line in block.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed config line '{line}'")))?;
        config.insert(k.to_string(), v.to_string());
    }

    let count = read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok((params, config))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated checkpoint".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Saves a sampler with its structural config plus any extra entries
/// (training stage, presampler, epoch counts).
pub fn save_sampler(
    path: impl AsRef<Path>,
    sampler: &AspdSampler,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let mut config = sampler.cfg.to_config();
    for (k, v) in extra {
        config.insert(k.clone(), v.clone());
    }
    save_checkpoint(path, &sampler.params, &config)
}

pub fn load_sampler(path: impl AsRef<Path>) -> Result<(AspdSampler, BTreeMap<String, String>)> {
    let (params, config) = load_checkpoint(path)?;
    let cfg = SamplerConfig::from_config(&config)?;
    let sampler = AspdSampler { cfg, params };
    sampler.validate_params()?;
    Ok((sampler, config))
}

pub fn save_task(
    path: impl AsRef<Path>,
    model: &TaskModel,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let mut config = BTreeMap::new();
    config.insert("model".to_string(), "pointnet".to_string());
    config.insert(
        "pointwise".to_string(),
        model
            .cfg
            .pointwise
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    config.insert(
        "head".to_string(),
        format!("{},{}", model.cfg.head[0], model.cfg.head[1]),
    );
    config.insert("classes".to_string(), model.cfg.classes.to_string());
    for (k, v) in extra {
        config.insert(k.clone(), v.clone());
    }
    save_checkpoint(path, &model.params, &config)
}

pub fn load_task(path: impl AsRef<Path>) -> Result<(TaskModel, BTreeMap<String, String>)> {
    let (params, config) = load_checkpoint(path)?;
    let get = |key: &str| -> Result<&String> {
        config
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing config key '{key}'")))
    };
    if get("model")? != "pointnet" {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a '{}' model, expected 'pointnet'",
            get("model")?
        )));
    }
    let pointwise: Vec<usize> = get("pointwise")?
        .split(',')
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Checkpoint("bad pointwise widths".into()))?;
    let head: Vec<usize> = get("head")?
        .split(',')
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Checkpoint("bad head widths".into()))?;
    if head.len() != 2 {
        return Err(Error::Checkpoint("head must have 2 widths".into()));
    }
    let classes: usize = get("classes")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad class count".into()))?;
    let cfg = PointNetConfig {
        pointwise,
        head: [head[0], head[1]],
        classes,
    };
    Ok((TaskModel { cfg, params }, config))
}
