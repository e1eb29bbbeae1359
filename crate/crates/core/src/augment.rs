//! Image augmentations: random resized crop for distillation views and
//! pad-crop for fine-tuning, both with horizontal flips.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

const CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Crop area as a fraction of the image.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Crop aspect ratio (width / height), sampled log-uniformly.
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scale_min: 0.08,
            scale_max: 1.0,
            ratio_min: 3.0 / 4.0,
            ratio_max: 4.0 / 3.0,
            flip: true,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(invalid("crop scale range must satisfy 0 < min <= max <= 1"));
        }
        if !(0.0 < self.ratio_min && self.ratio_min <= self.ratio_max) {
            return Err(invalid("crop ratio range must satisfy 0 < min <= max"));
        }
        Ok(())
    }
}

/// Integer crop window of a square image plus the flip decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub flip: bool,
}

impl CropBox {
    pub fn full(size: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height: size,
            width: size,
            flip: false,
        }
    }
}

/// Samples a random-resized-crop window on a `size x size` image. Falls
/// back to the whole image when no attempt fits.
pub fn sample_crop<R: Rng + ?Sized>(size: usize, aug: &AugmentConfig, rng: &mut R) -> CropBox {
    let area = (size * size) as f64;
    let (lo, hi) = (aug.ratio_min.ln(), aug.ratio_max.ln());
    let mut crop = CropBox::full(size);
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.random_range(aug.scale_min..=aug.scale_max);
        let ratio = rng.random_range(lo..=hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if (1..=size).contains(&w) && (1..=size).contains(&h) {
            crop.top = rng.random_range(0..=size - h);
            crop.left = rng.random_range(0..=size - w);
            crop.height = h;
            crop.width = w;
            break;
        }
    }
    crop.flip = aug.flip && rng.random_bool(0.5);
    crop
}

/// Bilinear sampling positions for resizing `src` pixels onto `dst`
/// (half-pixel centres, edges clamped).
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Crops one `[C, S, S]` image and resizes the window back to `S x S`.
pub fn resized_crop(image: &[f64], channels: usize, size: usize, crop: &CropBox) -> Vec<f64> {
    let ys = taps(crop.height, size);
    let xs = taps(crop.width, size);
    let mut out = Vec::with_capacity(image.len());
    for c in 0..channels {
        let plane = &image[c * size * size..(c + 1) * size * size];
        let px = |y: usize, x: usize| plane[(crop.top + y) * size + crop.left + x];
        for &(y0, y1, fy) in &ys {
            for ox in 0..size {
                let sx = if crop.flip { size - 1 - ox } else { ox };
                let (x0, x1, fx) = xs[sx];
                let top = px(y0, x0) + fx * (px(y0, x1) - px(y0, x0));
                let bottom = px(y1, x0) + fx * (px(y1, x1) - px(y1, x0));
                out.push(top + fy * (bottom - top));
            }
        }
    }
    out
}

fn image_dims(images: &Tensor) -> Result<(usize, usize, usize)> {
    let s = images.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(shape_err(format!("expected square images [B, C, S, S], got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// One augmented view per image, returned twice: the teacher and the
/// student see the same pixels.
pub fn shared_view_batch<R: Rng + ?Sized>(
    images: &Tensor,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let (b, c, s) = image_dims(images)?;
    if !aug.enabled {
        return Ok((images.clone(), images.clone()));
    }
    aug.validate()?;
    let per = c * s * s;
    let mut data = Vec::with_capacity(images.len());
    for i in 0..b {
        let crop = sample_crop(s, aug, rng);
        data.extend(resized_crop(&images.data()[i * per..(i + 1) * per], c, s, &crop));
    }
    let view = Tensor::new(images.shape().to_vec(), data)?;
    Ok((view.clone(), view))
}

/// Zero-pads each image by `pad` pixels, takes a random `S x S` window and
/// flips it horizontally with probability 1/2.
pub fn pad_crop_flip<R: Rng + ?Sized>(images: &Tensor, pad: usize, rng: &mut R) -> Result<Tensor> {
    let (b, c, s) = image_dims(images)?;
    let per = c * s * s;
    let mut data = Vec::with_capacity(images.len());
    for i in 0..b {
        let img = &images.data()[i * per..(i + 1) * per];
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random_bool(0.5);
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let sx = if flip { s - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    let inside = (0..s as isize).contains(&sx) && (0..s as isize).contains(&sy);
                    data.push(if inside {
                        img[ch * s * s + sy as usize * s + sx as usize]
                    } else {
                        0.0
                    });
                }
            }
        }
    }
    Tensor::new(images.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(b: usize, c: usize, s: usize) -> Tensor {
        let n = b * c * s * s;
        Tensor::new(vec![b, c, s, s], (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn full_crop_is_identity() {
        let img = ramp(1, 2, 5);
        let out = resized_crop(img.data(), 2, 5, &CropBox::full(5));
        assert_eq!(out, img.data());
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = ramp(1, 1, 3);
        let crop = CropBox { flip: true, ..CropBox::full(3) };
        let out = resized_crop(img.data(), 1, 3, &crop);
        assert_eq!(out, vec![2., 1., 0., 5., 4., 3., 8., 7., 6.]);
    }

    #[test]
    fn upsampled_single_pixel_is_constant() {
        let img = ramp(1, 1, 4);
        let crop = CropBox { top: 1, left: 2, height: 1, width: 1, flip: false };
        let out = resized_crop(img.data(), 1, 4, &crop);
        assert!(out.iter().all(|&v| v == 6.0));
    }

    #[test]
    fn views_are_identical() {
        let img = ramp(3, 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, s) = shared_view_batch(&img, &AugmentConfig::default(), &mut rng).unwrap();
        assert!(t.bit_eq(&s));
        let (t, _) = shared_view_batch(&img, &AugmentConfig::disabled(), &mut rng).unwrap();
        assert!(t.bit_eq(&img));
    }

    #[test]
    fn crops_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let c = sample_crop(16, &AugmentConfig::default(), &mut rng);
            assert!(c.top + c.height <= 16 && c.left + c.width <= 16);
            assert!(c.height >= 1 && c.width >= 1);
        }
    }

    #[test]
    fn pad_crop_without_padding_only_flips() {
        let img = ramp(4, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = pad_crop_flip(&img, 0, &mut rng).unwrap();
        for i in 0..4 {
            let a = &img.data()[i * 9..(i + 1) * 9];
            let b = &out.data()[i * 9..(i + 1) * 9];
            let mirrored: Vec<f64> = a.chunks(3).flat_map(|r| r.iter().rev().copied()).collect();
            assert!(b == a || b == mirrored.as_slice());
        }
    }
}
