//! Plain-text model checkpoints.
//!
//! ```text
//! car-checkpoint 1
//! dim 16
//! num_items 1000
//! num_users 500
//! max_len 20
//! user_embedding false
//! variant car
//! catalog 9f3c...            (FNV-1a of the item and user names)
//! tensor items 1001 16
//! <one row per line, space separated>
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so load then save
//! reproduces the file byte for byte.

use std::io::{BufRead, Write};

use crate::data::SplitCorpus;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Weights};

const MAGIC: &str = "car-checkpoint 1";

/// Fingerprint of the catalog a model was trained against.
pub fn catalog_fingerprint(split: &SplitCorpus) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let items = split.items.names().iter().map(|n| (n, 0xfe));
    let users = split.users.names().iter().map(|n| (n, 0xff));
    for (name, sep) in items.chain(users) {
        for b in name.bytes().chain([sep]) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

pub fn save<W: Write>(params: &ModelParams, fingerprint: u64, mut out: W) -> Result<()> {
    let c = &params.config;
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "dim {}", c.dim)?;
    writeln!(out, "num_items {}", c.num_items)?;
    writeln!(out, "num_users {}", c.num_users)?;
    writeln!(out, "max_len {}", c.max_len)?;
    writeln!(out, "user_embedding {}", c.use_user_embedding)?;
    writeln!(out, "variant {}", c.variant)?;
    writeln!(out, "catalog {fingerprint:016x}")?;
    for ((name, values), shape) in params.weights.tensors().into_iter().zip(params.weights.shapes()) {
        let cols = *shape.last().unwrap();
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        writeln!(out, "tensor {name} {}", dims.join(" "))?;
        if cols == 0 {
            continue;
        }
        for row in values.chunks(cols) {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

pub struct Loaded {
    pub params: ModelParams,
    pub fingerprint: u64,
}

pub fn load<R: BufRead>(source: R) -> Result<Loaded> {
    let mut lines = source.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Checkpoint(format!("truncated before {what}")))
    };
    if next("header")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut field = |key: &str| -> Result<String> {
        let line = next(key)?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.to_string()),
            _ => Err(Error::Checkpoint(format!("expected `{key}`, found {line:?}"))),
        }
    };
    let num = |v: String, key: &str| -> Result<usize> {
        v.parse().map_err(|_| Error::Checkpoint(format!("bad {key} {v:?}")))
    };
    let dim = num(field("dim")?, "dim")?;
    let num_items = num(field("num_items")?, "num_items")?;
    let num_users = num(field("num_users")?, "num_users")?;
    let max_len = num(field("max_len")?, "max_len")?;
    let use_user_embedding = match field("user_embedding")?.as_str() {
        "true" => true,
        "false" => false,
        other => return Err(Error::Checkpoint(format!("bad user_embedding {other:?}"))),
    };
    let variant = field("variant")?.parse()?;
    let fp = field("catalog")?;
    let fingerprint =
        u64::from_str_radix(&fp, 16).map_err(|_| Error::Checkpoint(format!("bad catalog fingerprint {fp:?}")))?;

    let config = ModelConfig {
        dim,
        num_items,
        num_users,
        max_len,
        use_user_embedding,
        variant,
    };
    let mut weights = Weights::zeros(&config);
    let shapes = weights.shapes();
    for ((name, dst), shape) in weights.tensors_mut().into_iter().zip(shapes) {
        let header = next(name)?;
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        let expected = format!("tensor {name} {}", dims.join(" "));
        if header != expected {
            return Err(Error::Checkpoint(format!("expected {expected:?}, found {header:?}")));
        }
        let cols = *shape.last().unwrap();
        if cols == 0 {
            continue;
        }
        for row in dst.chunks_mut(cols) {
            let line = next(name)?;
            let values: Vec<f64> = line
                .split(' ')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Checkpoint(format!("bad value in tensor {name}")))?;
            if values.len() != cols {
                return Err(Error::Checkpoint(format!("row of tensor {name} has {} values", values.len())));
            }
            row.copy_from_slice(&values);
        }
    }
    if let Some(extra) = lines.next().transpose()? {
        if !extra.trim().is_empty() {
            return Err(Error::Checkpoint("trailing data".into()));
        }
    }
    if weights.items.row(0).iter().any(|&v| v != 0.0) {
        return Err(Error::Checkpoint("padding row is not zero".into()));
    }
    Ok(Loaded {
        params: ModelParams { config, weights },
        fingerprint,
    })
}
