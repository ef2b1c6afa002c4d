//! `UTKQ` codebook containers and `UTKV` raw vector files.
//!
//! All integers are little-endian `u32`, all reals little-endian IEEE-754
//! `f32`, matrices row-major.
//!
//! ```text
//! UTKQ: "UTKQ" version scheme d n { K c K·c×f32 }×n
//! UTKV: "UTKV" count dim count·dim×f32
//! ```
//!
//! A shared RQ codebook is written once per level; on load, an RQ file
//! whose level codebooks are bit-identical is read back as shared.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Codebook, MultiCodebookQuantizer, Quantizer, ResidualQuantizer, Scheme};
use crate::error::{Error, Result};

pub const QUANTIZER_MAGIC: &[u8; 4] = b"UTKQ";
pub const VECTORS_MAGIC: &[u8; 4] = b"UTKV";
pub const QUANTIZER_VERSION: u32 = 1;

/// Cursor over an in-memory buffer that reports byte offsets on failure.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Corrupt(format!(
                "truncated while reading {what} at byte {} (need {n}, have {})",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Corrupt(format!("{what}: length overflow")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn u64s(&mut self, n: usize, what: &str) -> Result<Vec<u64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Corrupt(format!("{what}: length overflow")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.reserve(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidParameter(format!("{what} {v} exceeds u32")))
}

pub fn encode_quantizer(q: &Quantizer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(QUANTIZER_MAGIC);
    put_u32(&mut out, QUANTIZER_VERSION);
    put_u32(&mut out, q.scheme().code());
    put_u32(&mut out, u32_of(q.token_dim(), "token dim")?);
    put_u32(&mut out, u32_of(q.num_codes(), "codebook count")?);
    for j in 0..q.num_codes() {
        let cb = &q.codebooks()[q.slot(j)];
        put_u32(&mut out, u32_of(cb.size(), "K")?);
        put_u32(&mut out, u32_of(cb.dim(), "c")?);
        put_f32s(&mut out, cb.entries());
    }
    Ok(out)
}

pub fn decode_quantizer(bytes: &[u8]) -> Result<Quantizer> {
    let mut r = ByteReader::new(bytes);
    let q = read_quantizer(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.position() as u64,
            msg: format!("{} trailing bytes after codebooks", r.remaining()),
        });
    }
    Ok(q)
}

pub(crate) fn read_quantizer(r: &mut ByteReader<'_>) -> Result<Quantizer> {
    r.magic(QUANTIZER_MAGIC)?;
    let version = r.u32("version")?;
    if version != QUANTIZER_VERSION {
        return Err(Error::Version {
            found: version,
            expected: QUANTIZER_VERSION,
        });
    }
    let at = r.position() as u64;
    let scheme = Scheme::from_code(r.u32("scheme")?).ok_or_else(|| Error::Format {
        offset: at,
        msg: "unknown scheme code".into(),
    })?;
    let d = r.u32("d")? as usize;
    let n = r.u32("n")? as usize;
    if n == 0 {
        return Err(Error::Format {
            offset: r.position() as u64 - 4,
            msg: "zero codebooks".into(),
        });
    }
    let mut books = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.position() as u64;
        let k = r.u32("K")? as usize;
        let c = r.u32("c")? as usize;
        let entries = r.f32s(k.saturating_mul(c), "codebook entries")?;
        let cb = Codebook::new(entries, k, c).map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
        books.push(cb);
    }
    let dim_err = |msg: String| Error::Format { offset: 16, msg };
    let q = match scheme {
        Scheme::Vq => {
            if n != 1 {
                return Err(dim_err(format!("VQ container with {n} codebooks")));
            }
            Quantizer::Vq(books.pop().expect("one codebook"))
        }
        Scheme::Mcq => Quantizer::Mcq(MultiCodebookQuantizer::new(books)?),
        Scheme::Rq => {
            if books.len() > 1 && books.iter().all(|b| b.entries() == books[0].entries()) {
                Quantizer::Rq(ResidualQuantizer::shared(books.swap_remove(0), n)?)
            } else {
                Quantizer::Rq(ResidualQuantizer::per_level(books)?)
            }
        }
    };
    if q.token_dim() != d {
        return Err(dim_err(format!(
            "header d={d} but codebooks imply {}",
            q.token_dim()
        )));
    }
    Ok(q)
}

pub fn save_quantizer(q: &Quantizer, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_quantizer(q)?)
}

pub fn load_quantizer(path: impl AsRef<Path>) -> Result<Quantizer> {
    decode_quantizer(&fs::read(path)?)
}

/// A dense set of `count` vectors of width `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorSet {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl VectorSet {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    /// Rows whose index satisfies `keep`, in order.
    pub fn select(&self, mut keep: impl FnMut(usize) -> bool) -> VectorSet {
        let data = self
            .rows()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .flat_map(|(_, r)| r.iter().copied())
            .collect();
        VectorSet {
            dim: self.dim,
            data,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(VECTORS_MAGIC);
        put_u32(&mut out, u32_of(self.len(), "count")?);
        put_u32(&mut out, u32_of(self.dim, "dim")?);
        put_f32s(&mut out, &self.data);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(VECTORS_MAGIC)?;
        let count = r.u32("count")? as usize;
        let dim = r.u32("dim")? as usize;
        if dim == 0 {
            return Err(Error::Format {
                offset: 8,
                msg: "dim must be positive".into(),
            });
        }
        let data = r.f32s(count.saturating_mul(dim), "vector payload")?;
        if r.remaining() != 0 {
            return Err(Error::Format {
                offset: r.position() as u64,
                msg: format!("{} trailing bytes", r.remaining()),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Writes via a sibling temporary file and a rename, so a failed write
/// never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("{} is not a file path", path.display())))?;
    let tmp = match dir {
        Some(d) => d.join(format!(".{}.partial", file_name.to_string_lossy())),
        None => format!(".{}.partial", file_name.to_string_lossy()).into(),
    };
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn read_all(mut r: impl Read) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    r.read_to_end(&mut v)?;
    Ok(v)
}
