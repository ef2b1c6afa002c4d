use super::ImageTensor;
use crate::error::{Error, Result};

/// Splits an image into `p×p` patches in row-major patch order; each patch
/// is flattened row by row, channel-last, giving `T × 3p²` values.
pub fn patchify(image: &ImageTensor, p: usize) -> Result<Vec<f32>> {
    let (h, w) = (image.height(), image.width());
    check(h, w, p)?;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..h / p {
        for px in 0..w / p {
            for y in 0..p {
                let start = ((py * p + y) * w + px * p) * 3;
                out.extend_from_slice(&src[start..start + p * 3]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]; values are clamped into `[0, 1]`.
pub fn unpatchify(tokens: &[f32], h: usize, w: usize, p: usize) -> Result<ImageTensor> {
    check(h, w, p)?;
    if tokens.len() != h * w * 3 {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            detail: format!("{} values for a {h}x{w} image", tokens.len()),
        });
    }
    let mut data = vec![0.0f32; h * w * 3];
    let mut src = tokens.chunks_exact(p * 3);
    for py in 0..h / p {
        for px in 0..w / p {
            for y in 0..p {
                let start = ((py * p + y) * w + px * p) * 3;
                let row = src.next().expect("length checked");
                for (d, &s) in data[start..start + p * 3].iter_mut().zip(row) {
                    *d = s.clamp(0.0, 1.0);
                }
            }
        }
    }
    ImageTensor::new(h, w, data)
}

fn check(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidParameter(format!(
            "patch size {p} does not divide {h}x{w}"
        )));
    }
    Ok(())
}
