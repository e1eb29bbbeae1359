//! Raster-order patch extraction and its inverse.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `[B, C, S, S] -> [B, (S/p)^2, C*p*p]`. Tokens run left to right, top to
/// bottom; features within a token are ordered channel, row, column.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[2] != s[3] || patch == 0 || s[2] % patch != 0 {
        return Err(shape_err(format!(
            "images {s:?} cannot be split into {patch}x{patch} patches"
        )));
    }
    let (b, c, side) = (s[0], s[1], s[2]);
    let grid = side / patch;
    let pd = c * patch * patch;
    let mut out = vec![0.0; b * grid * grid * pd];
    let src = images.data();
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                let tok = gy * grid + gx;
                let dst = &mut out[(bi * grid * grid + tok) * pd..][..pd];
                let mut k = 0;
                for ci in 0..c {
                    for py in 0..patch {
                        let row = ((bi * c + ci) * side + gy * patch + py) * side + gx * patch;
                        dst[k..k + patch].copy_from_slice(&src[row..row + patch]);
                        k += patch;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, grid * grid, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, patch: usize, channels: usize) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 3 || patch == 0 || channels == 0 || s[2] != channels * patch * patch {
        return Err(shape_err(format!("tokens {s:?} do not hold {channels}x{patch}x{patch} patches")));
    }
    let (b, n, pd) = (s[0], s[1], s[2]);
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(shape_err(format!("{n} tokens do not form a square grid")));
    }
    let side = grid * patch;
    let mut out = vec![0.0; b * channels * side * side];
    let src = tokens.data();
    for bi in 0..b {
        for tok in 0..n {
            let (gy, gx) = (tok / grid, tok % grid);
            let from = &src[(bi * n + tok) * pd..][..pd];
            let mut k = 0;
            for ci in 0..channels {
                for py in 0..patch {
                    let row = ((bi * channels + ci) * side + gy * patch + py) * side + gx * patch;
                    out[row..row + patch].copy_from_slice(&from[k..k + patch]);
                    k += patch;
                }
            }
        }
    }
    Tensor::new(vec![b, channels, side, side], out)
}
