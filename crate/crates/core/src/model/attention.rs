use serde::{Deserialize, Serialize};

use super::params::{init_weight, ParamStore};
use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Wide to narrow; head outputs are averaged.
    Down,
    /// Narrow to wide; head outputs are concatenated.
    Up,
}

/// Multi-head self-attention that changes the channel count.
///
/// With `heads` heads of width `head_dim` the wide side is
/// `heads * head_dim`. Going down, queries, keys and values are `C -> C`
/// maps split into heads, and the per-head outputs (width `head_dim`) are
/// averaged before a `head_dim x head_dim` output map. Going up, the
/// projections are `head_dim -> C`, the heads are concatenated back to `C`
/// and a `C x C` output map follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionProjection {
    pub heads: usize,
    pub head_dim: usize,
    pub direction: Direction,
}

/// Tape handles of one projection's weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
}

impl AttentionProjection {
    pub fn new(heads: usize, head_dim: usize, direction: Direction) -> Result<Self> {
        if heads == 0 || head_dim == 0 {
            return Err(Error::InvalidParameter(
                "attention projection needs at least one head of nonzero width".into(),
            ));
        }
        Ok(Self {
            heads,
            head_dim,
            direction,
        })
    }

    pub fn wide_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn input_dim(&self) -> usize {
        match self.direction {
            Direction::Down => self.wide_dim(),
            Direction::Up => self.head_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.direction {
            Direction::Down => self.head_dim,
            Direction::Up => self.wide_dim(),
        }
    }

    /// Initializes `{prefix}.query|key|value|output`.
    pub fn init(&self, params: &mut ParamStore, prefix: &str, seed: u64) {
        let (i, w, o) = (self.input_dim(), self.wide_dim(), self.output_dim());
        for part in ["query", "key", "value"] {
            let name = format!("{prefix}.{part}");
            params.insert(name.clone(), init_weight(seed, &name, i, w));
        }
        let name = format!("{prefix}.output");
        params.insert(name.clone(), init_weight(seed, &name, o, o));
    }

    /// `x` is `[batch * seq_len, input_dim]`; attention runs within each
    /// length-`seq_len` sequence.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        seq_len: usize,
        w: &AttentionWeights,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2
            || shape[1] != self.input_dim()
            || seq_len == 0
            || shape[0] % seq_len != 0
        {
            return Err(Error::ShapeMismatch {
                op: "attention_projection",
                detail: format!(
                    "input {shape:?}, want [*, {}] in sequences of {seq_len}",
                    self.input_dim()
                ),
            });
        }
        let (h, c) = (self.heads, self.head_dim);
        let batch = shape[0] / seq_len;
        let split = |tape: &mut Tape<T>, proj: Var| -> Result<Var> {
            let p = tape.matmul(x, proj)?;
            let p = tape.reshape(p, &[batch, seq_len, h, c])?;
            let p = tape.swap_middle(p)?;
            tape.reshape(p, &[batch * h, seq_len, c])
        };
        let q = split(tape, w.query)?;
        let k = split(tape, w.key)?;
        let v = split(tape, w.value)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, T::from_f64(1.0 / (c as f64).sqrt()));
        let attn = tape.softmax_rows(scores);
        let heads = tape.batch_matmul(attn, v, false)?;
        let merged = match self.direction {
            Direction::Down => {
                let per_head = tape.reshape(heads, &[batch, h, seq_len * c])?;
                let avg = tape.mean_pool(per_head, 1)?;
                tape.reshape(avg, &[batch * seq_len, c])?
            }
            Direction::Up => {
                let per_head = tape.reshape(heads, &[batch, h, seq_len, c])?;
                let tokens = tape.swap_middle(per_head)?;
                tape.reshape(tokens, &[batch * seq_len, h * c])?
            }
        };
        tape.matmul(merged, w.output)
    }
}
