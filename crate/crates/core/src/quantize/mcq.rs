use super::codebook::Codebook;
use super::distance::{nearest_row, sq_dist_f64};
use super::QuantizedToken;
use crate::error::{ensure_dim, ensure_finite, Error, Result};

/// `n` independent sub-codebooks, each quantizing one contiguous chunk of a
/// `d`-dimensional token.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiCodebookQuantizer {
    sub_codebooks: Vec<Codebook>,
    token_dim: usize,
}

impl MultiCodebookQuantizer {
    pub fn new(sub_codebooks: Vec<Codebook>) -> Result<Self> {
        let first = sub_codebooks
            .first()
            .ok_or_else(|| Error::InvalidParameter("MCQ needs at least one sub-codebook".into()))?;
        let chunk = first.dim();
        for cb in &sub_codebooks {
            ensure_dim(chunk, cb.dim())?;
        }
        Ok(Self {
            token_dim: chunk * sub_codebooks.len(),
            sub_codebooks,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn chunk_dim(&self) -> usize {
        self.token_dim / self.sub_codebooks.len()
    }

    pub fn num_sub_codebooks(&self) -> usize {
        self.sub_codebooks.len()
    }

    pub fn sub_codebooks(&self) -> &[Codebook] {
        &self.sub_codebooks
    }

    pub fn sub_codebooks_mut(&mut self) -> &mut [Codebook] {
        &mut self.sub_codebooks
    }

    /// Quantizes without recording usage.
    pub fn encode(&self, token: &[f32]) -> Result<QuantizedToken> {
        ensure_dim(self.token_dim, token.len())?;
        ensure_finite(token)?;
        let c = self.chunk_dim();
        let mut indices = Vec::with_capacity(self.sub_codebooks.len());
        let mut quantized = Vec::with_capacity(self.token_dim);
        for (cb, chunk) in self.sub_codebooks.iter().zip(token.chunks_exact(c)) {
            let (i, _) = nearest_row(cb.entries(), c, chunk);
            indices.push(i);
            quantized.extend_from_slice(cb.entry(i));
        }
        let error = sq_dist_f64(token, &quantized);
        Ok(QuantizedToken {
            indices,
            quantized,
            error,
        })
    }

    /// Quantizes and increments the selected entries' usage counters.
    pub fn quantize(&mut self, token: &[f32]) -> Result<QuantizedToken> {
        let q = self.encode(token)?;
        self.record(&q.indices);
        Ok(q)
    }

    pub(crate) fn record(&mut self, indices: &[usize]) {
        for (cb, &i) in self.sub_codebooks.iter_mut().zip(indices) {
            cb.record_usage(i);
        }
    }

    pub fn decode(&self, indices: &[usize]) -> Result<Vec<f32>> {
        ensure_dim(self.sub_codebooks.len(), indices.len())?;
        let mut out = Vec::with_capacity(self.token_dim);
        for (cb, &i) in self.sub_codebooks.iter().zip(indices) {
            if i >= cb.size() {
                return Err(Error::InvalidParameter(format!(
                    "code index {i} out of range for K={}",
                    cb.size()
                )));
            }
            out.extend_from_slice(cb.entry(i));
        }
        Ok(out)
    }
}
