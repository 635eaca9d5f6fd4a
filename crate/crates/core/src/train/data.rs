use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::Result;
use crate::io::{is_supported, read_image};
use crate::metrics::gaussian_taps;
use crate::scalar::Scalar;
use crate::tensor::{reflect_index, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unpaired files: blur-only {blur_only:?}, sharp-only {sharp_only:?}")]
    Orphans {
        blur_only: Vec<String>,
        sharp_only: Vec<String>,
    },
    #[error("pair `{id}`: blurred {blurred:?} and sharp {sharp:?} differ in shape")]
    ShapeMismatch {
        id: String,
        blurred: Vec<usize>,
        sharp: Vec<usize>,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("patch {patch} does not fit image `{id}` of {height}x{width}")]
    PatchTooLarge {
        id: String,
        patch: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid blur: {0}")]
    BadBlur(String),
}

/// A blurred/sharp pair of `[H, W, 3]` images in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample<T> {
    pub blurred: Tensor<T>,
    pub sharp: Tensor<T>,
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Blur {
    Gaussian {
        sigma: f64,
    },
    /// Line of `length` pixels at `angle` degrees, centered on the pixel.
    Motion {
        length: usize,
        angle: f64,
    },
}

impl Blur {
    /// Normalized 2-D kernel, square with odd side.
    pub fn kernel(self) -> std::result::Result<Tensor<f64>, DataError> {
        match self {
            Blur::Gaussian { sigma } => {
                if !sigma.is_finite() || sigma < 0.0 {
                    return Err(DataError::BadBlur(format!("sigma {sigma}")));
                }
                if sigma < 1e-3 {
                    return Ok(Tensor::ones([1, 1]));
                }
                let radius = (3.0 * sigma).ceil() as usize;
                let taps = gaussian_taps(2 * radius + 1, sigma);
                let side = taps.len();
                Ok(Tensor::from_fn([side, side], |i| {
                    taps[i / side] * taps[i % side]
                }))
            }
            Blur::Motion { length, angle } => {
                if length == 0 || !angle.is_finite() {
                    return Err(DataError::BadBlur(format!(
                        "motion length {length}, angle {angle}"
                    )));
                }
                let radius = length / 2;
                let side = 2 * radius + 1;
                let (dy, dx) = angle.to_radians().sin_cos();
                let mut k = vec![0.0; side * side];
                // Midpoints of equal segments over [-L/2, L/2]. Offsets are rounded
                // before the shift to the center so ties stay point-symmetric.
                let samples = 4 * length;
                for s in 0..samples {
                    let t = ((s as f64 + 0.5) / samples as f64 - 0.5) * length as f64;
                    let y = (radius as isize + (-t * dy).round() as isize) as usize;
                    let x = (radius as isize + (t * dx).round() as isize) as usize;
                    k[y * side + x] += 1.0;
                }
                let total: f64 = k.iter().sum();
                Ok(Tensor::from_fn([side, side], |i| k[i] / total))
            }
        }
    }
}

/// Convolves each channel of an `[H, W, C]` image with `kernel`, padding by
/// half-sample symmetric reflection.
pub fn blur_image(image: &Tensor<f64>, kernel: &Tensor<f64>) -> Tensor<f64> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let side = kernel.shape()[0];
    let r = (side / 2) as isize;
    let mut out = vec![0.0; image.numel()];
    for y in 0..h {
        for x in 0..w {
            for ky in 0..side {
                let sy = reflect_index(y as isize + ky as isize - r, h);
                for kx in 0..side {
                    let wt = kernel.data()[ky * side + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    let sx = reflect_index(x as isize + kx as isize - r, w);
                    for ch in 0..c {
                        out[(y * w + x) * c + ch] += wt * image.data()[(sy * w + sx) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::new(image.shape(), out).expect("same shape")
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Procedural sharp image: a linear gradient field, filled rectangles and
/// one-pixel strokes, all seeded.
pub fn synth_sharp(seed: u64, size: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0; size * size * 3];
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (sy, sx) = theta.sin_cos();
    let span = size.max(2) as f64 - 1.0;
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f64 * sx + y as f64 * sy) / span) * 0.5 + 0.5).clamp(0.0, 1.0);
            for ch in 0..3 {
                img[(y * size + x) * 3 + ch] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }
    let paint = |img: &mut [f64], y: usize, x: usize, col: &[f64; 3]| {
        img[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(col);
    };
    for _ in 0..rng.random_range(3..=6) {
        let col = color(&mut rng);
        let (h, w) = (
            rng.random_range(1..=size.div_ceil(2)),
            rng.random_range(1..=size.div_ceil(2)),
        );
        let (y0, x0) = (rng.random_range(0..size), rng.random_range(0..size));
        for y in y0..(y0 + h).min(size) {
            for x in x0..(x0 + w).min(size) {
                paint(&mut img, y, x, &col);
            }
        }
    }
    for _ in 0..rng.random_range(2..=5) {
        let col = color(&mut rng);
        let (ya, xa) = (
            rng.random_range(0..size) as f64,
            rng.random_range(0..size) as f64,
        );
        let (yb, xb) = (
            rng.random_range(0..size) as f64,
            rng.random_range(0..size) as f64,
        );
        let steps = ((yb - ya).abs().max((xb - xa).abs()) as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let y = (ya + t * (yb - ya)).round() as usize;
            let x = (xa + t * (xb - xa)).round() as usize;
            paint(&mut img, y, x, &col);
        }
    }
    Tensor::new([size, size, 3], img).expect("shape matches data")
}

/// Seeded synthetic pair: [`synth_sharp`] blurred by `blur`.
pub fn synth_pair<T: Scalar>(seed: u64, size: usize, blur: Blur) -> Result<PairSample<T>> {
    let sharp = synth_sharp(seed, size);
    let blurred = blur_image(&sharp, &blur.kernel()?);
    Ok(PairSample {
        blurred: blurred.cast(),
        sharp: sharp.cast(),
        id: format!("synth_{seed:08}"),
    })
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && is_supported(&path) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Loads `dir/blur/*` and `dir/sharp/*` paired by file name, in name order.
pub fn load_pairs<T: Scalar>(dir: impl AsRef<Path>) -> Result<Vec<PairSample<T>>> {
    let dir = dir.as_ref();
    let blur = list_images(&dir.join("blur"))?;
    let sharp = list_images(&dir.join("sharp"))?;
    let blur_only: Vec<String> = blur
        .keys()
        .filter(|k| !sharp.contains_key(*k))
        .cloned()
        .collect();
    let sharp_only: Vec<String> = sharp
        .keys()
        .filter(|k| !blur.contains_key(*k))
        .cloned()
        .collect();
    if !blur_only.is_empty() || !sharp_only.is_empty() {
        return Err(DataError::Orphans {
            blur_only,
            sharp_only,
        }
        .into());
    }
    blur.iter()
        .map(|(name, path)| {
            let blurred: Tensor<T> = read_image(path)?;
            let sharp: Tensor<T> = read_image(&sharp[name])?;
            if blurred.shape() != sharp.shape() {
                return Err(DataError::ShapeMismatch {
                    id: name.clone(),
                    blurred: blurred.shape().to_vec(),
                    sharp: sharp.shape().to_vec(),
                }
                .into());
            }
            Ok(PairSample {
                blurred,
                sharp,
                id: name.clone(),
            })
        })
        .collect()
}

fn crop<T: Scalar>(img: &Tensor<T>, y0: usize, x0: usize, patch: usize, flip: bool) -> Tensor<T> {
    let w = img.shape()[1];
    let mut out = Vec::with_capacity(patch * patch * 3);
    for y in y0..y0 + patch {
        for i in 0..patch {
            let x = if flip { x0 + patch - 1 - i } else { x0 + i };
            let o = (y * w + x) * 3;
            out.extend_from_slice(&img.data()[o..o + 3]);
        }
    }
    Tensor::new([patch, patch, 3], out).expect("shape matches data")
}

/// Random `patch x patch` crop, mirrored horizontally with probability 1/2.
/// The same window and flip apply to both images.
pub fn random_crop<T: Scalar, R: Rng + ?Sized>(
    pair: &PairSample<T>,
    patch: usize,
    rng: &mut R,
) -> std::result::Result<PairSample<T>, DataError> {
    let (h, w) = (pair.sharp.shape()[0], pair.sharp.shape()[1]);
    if patch == 0 || patch > h || patch > w {
        return Err(DataError::PatchTooLarge {
            id: pair.id.clone(),
            patch,
            height: h,
            width: w,
        });
    }
    let y0 = rng.random_range(0..=h - patch);
    let x0 = rng.random_range(0..=w - patch);
    let flip = rng.random_bool(0.5);
    Ok(PairSample {
        blurred: crop(&pair.blurred, y0, x0, patch, flip),
        sharp: crop(&pair.sharp, y0, x0, patch, flip),
        id: pair.id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_sum_to_one() {
        for blur in [
            Blur::Gaussian { sigma: 2.0 },
            Blur::Motion {
                length: 7,
                angle: 30.0,
            },
            Blur::Motion {
                length: 1,
                angle: 0.0,
            },
        ] {
            let k = blur.kernel().unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-12, "{blur:?}");
        }
        assert!(Blur::Gaussian { sigma: -1.0 }.kernel().is_err());
    }

    #[test]
    fn sharp_is_in_range_and_seeded() {
        let a = synth_sharp(4, 24);
        assert_eq!(a, synth_sharp(4, 24));
        assert_ne!(a, synth_sharp(5, 24));
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn crop_is_seeded() {
        let pair: PairSample<f32> = synth_pair(1, 20, Blur::Gaussian { sigma: 1.0 }).unwrap();
        let a = random_crop(&pair, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = random_crop(&pair, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sharp.shape(), &[8, 8, 3]);
        assert!(random_crop(&pair, 21, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }
}
