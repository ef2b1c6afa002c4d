use super::codebook::Codebook;
use super::distance::{nearest_row, sq_dist_f64};
use super::QuantizedToken;
use crate::error::{ensure_dim, ensure_finite, Error, Result};

/// Coarse-to-fine residual quantizer: every level sees the full token
/// dimension and quantizes what the previous levels left over.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualQuantizer {
    /// One codebook when shared, otherwise one per level.
    codebooks: Vec<Codebook>,
    num_levels: usize,
    shared: bool,
}

impl ResidualQuantizer {
    /// One codebook reused at every level.
    pub fn shared(codebook: Codebook, num_levels: usize) -> Result<Self> {
        if num_levels == 0 {
            return Err(Error::InvalidParameter(
                "RQ needs at least one level".into(),
            ));
        }
        Ok(Self {
            codebooks: vec![codebook],
            num_levels,
            shared: true,
        })
    }

    /// A separate codebook per level.
    pub fn per_level(levels: Vec<Codebook>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::InvalidParameter("RQ needs at least one level".into()))?;
        let dim = first.dim();
        for cb in &levels {
            ensure_dim(dim, cb.dim())?;
        }
        Ok(Self {
            num_levels: levels.len(),
            codebooks: levels,
            shared: false,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.codebooks[0].dim()
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    /// Physical codebooks (one when shared).
    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    pub fn codebooks_mut(&mut self) -> &mut [Codebook] {
        &mut self.codebooks
    }

    /// Index into [`Self::codebooks`] used at `level`.
    pub fn slot(&self, level: usize) -> usize {
        if self.shared {
            0
        } else {
            level
        }
    }

    pub fn level(&self, level: usize) -> &Codebook {
        &self.codebooks[self.slot(level)]
    }

    pub fn encode(&self, token: &[f32]) -> Result<QuantizedToken> {
        let d = self.token_dim();
        ensure_dim(d, token.len())?;
        ensure_finite(token)?;
        let mut residual = token.to_vec();
        let mut quantized = vec![0.0f32; d];
        let mut indices = Vec::with_capacity(self.num_levels);
        for level in 0..self.num_levels {
            let cb = self.level(level);
            let (i, _) = nearest_row(cb.entries(), d, &residual);
            let code = cb.entry(i);
            for ((r, q), &e) in residual.iter_mut().zip(quantized.iter_mut()).zip(code) {
                *r -= e;
                *q += e;
            }
            indices.push(i);
        }
        let error = sq_dist_f64(token, &quantized);
        Ok(QuantizedToken {
            indices,
            quantized,
            error,
        })
    }

    pub fn quantize(&mut self, token: &[f32]) -> Result<QuantizedToken> {
        let q = self.encode(token)?;
        self.record(&q.indices);
        Ok(q)
    }

    pub(crate) fn record(&mut self, indices: &[usize]) {
        for (level, &i) in indices.iter().enumerate() {
            let slot = self.slot(level);
            self.codebooks[slot].record_usage(i);
        }
    }

    /// Sum of the selected codes, accumulated in level order.
    pub fn decode(&self, indices: &[usize]) -> Result<Vec<f32>> {
        ensure_dim(self.num_levels, indices.len())?;
        let mut out = vec![0.0f32; self.token_dim()];
        for (level, &i) in indices.iter().enumerate() {
            let cb = self.level(level);
            if i >= cb.size() {
                return Err(Error::InvalidParameter(format!(
                    "code index {i} out of range for K={}",
                    cb.size()
                )));
            }
            for (o, &e) in out.iter_mut().zip(cb.entry(i)) {
                *o += e;
            }
        }
        Ok(out)
    }

    /// The residual each level quantized, given the chosen indices.
    pub fn level_inputs(&self, token: &[f32], indices: &[usize]) -> Vec<Vec<f32>> {
        let mut residual = token.to_vec();
        let mut out = Vec::with_capacity(indices.len());
        for (level, &i) in indices.iter().enumerate() {
            out.push(residual.clone());
            for (r, &e) in residual.iter_mut().zip(self.level(level).entry(i)) {
                *r -= e;
            }
        }
        out
    }
}
