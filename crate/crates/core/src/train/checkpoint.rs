//! `UTKC` checkpoint files.
//!
//! Layout (little-endian): magic `UTKC`, u32 version, u32 class count,
//! u64 step, the config as length-prefixed TOML, the named parameters
//! (name, rank, extents, f32 values), an optional embedded `UTKQ`
//! quantizer followed by each codebook's usage counts and EMA state, the
//! optimizer moments, and the metric history.

use std::path::Path;

use super::{MetricsRow, Optimizer, OptimizerKind, TrainConfig, Trainer};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ParamStore, TokenizerModel};
use crate::quantize::io::{
    encode_quantizer, put_f32s, put_u32, put_u64, read_all, read_quantizer, write_atomic,
    ByteReader,
};
use crate::train::optim::Moments;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UTKC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut ByteReader<'_>, what: &str) -> Result<String> {
    let n = r.u32(what)? as usize;
    let at = r.position();
    let b = r.take(n, what)?;
    String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
        offset: at as u64,
        msg: format!("{what} is not UTF-8"),
    })
}

pub fn encode_checkpoint(t: &Trainer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, t.model.num_classes() as u32);
    put_u64(&mut out, t.step);
    put_str(&mut out, &t.config.to_toml());

    let params = t.model.params();
    put_u32(&mut out, params.len() as u32);
    for (name, tensor) in params.iter() {
        put_str(&mut out, name);
        put_u32(&mut out, tensor.shape().len() as u32);
        for &e in tensor.shape() {
            put_u32(&mut out, e as u32);
        }
        put_f32s(&mut out, tensor.data());
    }

    match t.model.quantizer() {
        None => put_u32(&mut out, 0),
        Some(q) => {
            put_u32(&mut out, 1);
            out.extend(encode_quantizer(q)?);
            for cb in q.codebooks() {
                for &u in cb.usage_counts() {
                    put_u64(&mut out, u);
                }
                put_f32s(&mut out, cb.ema_cluster_size());
                put_f32s(&mut out, cb.ema_embed_sum());
            }
        }
    }

    let o = &t.optimizer;
    put_u32(&mut out, matches!(o.kind, OptimizerKind::Adam) as u32);
    put_u64(&mut out, o.t);
    put_u32(&mut out, o.moments.len() as u32);
    for (name, m) in &o.moments {
        put_str(&mut out, name);
        put_u32(&mut out, m.m.len() as u32);
        put_f32s(&mut out, &m.m);
        put_f32s(&mut out, &m.v);
    }

    put_u32(&mut out, t.history.len() as u32);
    for row in &t.history {
        put_u64(&mut out, row.step);
        for v in [row.recon, row.vq, row.contrastive, row.total] {
            put_u64(&mut out, v.to_bits());
        }
        let optional = [row.perplexity, row.utilization, row.psnr, row.zs_acc];
        let mask = optional
            .iter()
            .enumerate()
            .fold(0u32, |m, (i, v)| m | ((v.is_some() as u32) << i));
        put_u32(&mut out, mask);
        for v in optional {
            put_u64(&mut out, v.unwrap_or(0.0).to_bits());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Trainer> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let num_classes = r.u32("class count")? as usize;
    let step = r.u64("step")?;
    let config = TrainConfig::from_toml(&read_str(&mut r, "config")?)
        .map_err(|e| Error::Corrupt(format!("embedded config: {e}")))?;

    let n_params = r.u32("parameter count")?;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name = read_str(&mut r, "parameter name")?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let len = len.ok_or_else(|| Error::Corrupt(format!("{name}: extent overflow")))?;
        let data = r.f32s(len, &name)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("{name}: {e}")))?;
        params.insert(name, t);
    }

    let quantizer = match r.u32("quantizer flag")? {
        0 => None,
        1 => {
            let mut q = read_quantizer(&mut r)?;
            for cb in q.codebooks_mut() {
                let (k, c) = (cb.size(), cb.dim());
                let usage = r.u64s(k, "usage counts")?;
                let sizes = r.f32s(k, "ema cluster sizes")?;
                let sums = r.f32s(k * c, "ema sums")?;
                cb.set_state(usage, sizes, sums)?;
            }
            Some(q)
        }
        other => return Err(Error::Corrupt(format!("quantizer flag {other}"))),
    };
    let model = TokenizerModel::from_parts(
        config.model.clone(),
        config.quantizer.clone(),
        num_classes,
        params,
        quantizer,
    )?;

    let kind = match r.u32("optimizer kind")? {
        0 => OptimizerKind::Sgd,
        1 => OptimizerKind::Adam,
        other => return Err(Error::Corrupt(format!("optimizer kind {other}"))),
    };
    let mut optimizer = Optimizer::new(kind);
    optimizer.t = r.u64("optimizer step")?;
    let n_moments = r.u32("moment count")?;
    for _ in 0..n_moments {
        let name = read_str(&mut r, "moment name")?;
        let len = r.u32("moment length")? as usize;
        let m = r.f32s(len, "first moment")?;
        let v = r.f32s(len, "second moment")?;
        optimizer.moments.insert(name, Moments { m, v });
    }

    let rows = r.u32("history length")?;
    let mut history = Vec::with_capacity((rows as usize).min(1 << 16));
    for _ in 0..rows {
        let step = r.u64("history step")?;
        let mut fixed = [0.0; 4];
        for v in &mut fixed {
            *v = r.f64("history value")?;
        }
        let mask = r.u32("history mask")?;
        let mut optional = [None; 4];
        for (i, v) in optional.iter_mut().enumerate() {
            let x = r.f64("history value")?;
            *v = (mask >> i & 1 == 1).then_some(x);
        }
        history.push(MetricsRow {
            step,
            recon: fixed[0],
            vq: fixed[1],
            contrastive: fixed[2],
            total: fixed[3],
            perplexity: optional[0],
            utilization: optional[1],
            psnr: optional[2],
            zs_acc: optional[3],
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.position() as u64,
            msg: format!("{} trailing bytes", r.remaining()),
        });
    }
    if config.optim.optimizer != kind {
        return Err(Error::Corrupt(
            "optimizer kind disagrees with the config".into(),
        ));
    }
    Ok(Trainer::from_parts(config, model, optimizer, step, history))
}

/// Writes atomically: either the whole file appears or nothing does.
pub fn save_checkpoint(t: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(t)?)
}

/// Loads a checkpoint; on any error no state is returned.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    let f = std::fs::File::open(path.as_ref())?;
    decode_checkpoint(&read_all(f)?)
}
