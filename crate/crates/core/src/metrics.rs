//! Image quality metrics on `[H, W, C]` images with values in `[0, 1]`.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn dims<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
) -> Result<(usize, usize, usize)> {
    a.expect_same_shape(b, op)?;
    match *a.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::Invalid(format!(
            "{op}: expected an [H, W, C] image, got {:?}",
            a.shape()
        ))),
    }
}

/// Peak signal-to-noise ratio in dB for unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    let mse = sse / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian of `size` taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mean structural similarity over all valid window positions, averaged
/// across channels. Images narrower than the window use a window as wide
/// as their shorter side.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (h, w, c) = dims(a, b, "ssim")?;
    let size = SSIM_WINDOW.min(h).min(w);
    let taps = gaussian_taps(size, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        for y0 in 0..=h - size {
            for x0 in 0..=w - size {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, &ty) in taps.iter().enumerate() {
                    for (dx, &tx) in taps.iter().enumerate() {
                        let i = ((y0 + dy) * w + x0 + dx) * c + ch;
                        let (va, vb, wt) = (ad[i].as_f64(), bd[i].as_f64(), ty * tx);
                        ma += wt * va;
                        mb += wt * vb;
                        aa += wt * (va * va);
                        bb += wt * (vb * vb);
                        ab += wt * (va * vb);
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                acc += ((2.0 * (ma * mb) + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total += acc / ((h - size + 1) * (w - size + 1)) as f64;
    }
    Ok(total / c as f64)
}

/// Hue in degrees `[0, 360)` and saturation of one RGB pixel.
pub fn rgb_to_hue_sat(r: f64, g: f64, b: f64) -> (f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 0.0 || max <= 0.0 {
        return (0.0, 0.0);
    }
    let sat = delta / max;
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    ((sector * 60.0).rem_euclid(360.0), sat)
}

/// Mean circular hue difference as a percentage of the 180 degree maximum.
/// Pixels that are achromatic in both images contribute zero.
pub fn hue_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (h, w, c) = dims(a, b, "hue_distance")?;
    if c != 3 {
        return Err(Error::Invalid(format!(
            "hue_distance needs RGB images, got {c} channels"
        )));
    }
    let px = |t: &Tensor<T>, i: usize| {
        let d = &t.data()[i * 3..i * 3 + 3];
        rgb_to_hue_sat(d[0].as_f64(), d[1].as_f64(), d[2].as_f64())
    };
    let total: f64 = (0..h * w)
        .map(|i| {
            let ((ha, sa), (hb, sb)) = (px(a, i), px(b, i));
            if sa == 0.0 && sb == 0.0 {
                return 0.0;
            }
            let d = (ha - hb).abs();
            d.min(360.0 - d)
        })
        .sum();
    Ok(total / (h * w) as f64 / 180.0 * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Psnr,
    Ssim,
    Hue,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Psnr, Metric::Ssim, Metric::Hue];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Hue => "hue",
        }
    }

    pub fn compute<T: Scalar>(self, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
        match self {
            Metric::Psnr => psnr(a, b),
            Metric::Ssim => ssim(a, b),
            Metric::Hue => hue_distance(a, b),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| {
                Error::Invalid(format!("unknown metric `{s}` (expected psnr, ssim or hue)"))
            })
    }
}

/// Per-image scores for a fixed list of metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metrics: Vec<Metric>,
    pub names: Vec<String>,
    /// `scores[i][j]` is metric `j` on image `i`.
    pub scores: Vec<Vec<f64>>,
}

impl MetricReport {
    /// Scores `(name, estimate, reference)` triples in parallel; rows keep input order.
    pub fn evaluate<T: Scalar>(
        metrics: &[Metric],
        items: &[(String, Tensor<T>, Tensor<T>)],
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Invalid("no images to evaluate".into()));
        }
        let scores = items
            .par_iter()
            .map(|(_, a, b)| {
                metrics
                    .iter()
                    .map(|m| m.compute(a, b))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            metrics: metrics.to_vec(),
            names: items.iter().map(|(n, _, _)| n.clone()).collect(),
            scores,
        })
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn mean(&self, metric: Metric) -> Option<f64> {
        let j = self.metrics.iter().position(|&m| m == metric)?;
        Some(self.scores.iter().map(|row| row[j]).sum::<f64>() / self.count() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image");
        for m in &self.metrics {
            let _ = write!(s, ",{}", m.name());
        }
        s.push('\n');
        for (name, row) in self.names.iter().zip(&self.scores) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.names.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut s = format!("{:<width$}", "image");
        for m in &self.metrics {
            let _ = write!(s, " {:>10}", m.name());
        }
        s.push('\n');
        for (name, row) in self.names.iter().zip(&self.scores) {
            let _ = write!(s, "{name:<width$}");
            for v in row {
                let _ = write!(s, " {v:>10.4}");
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<width$}", "mean");
        for &m in &self.metrics {
            let _ = write!(s, " {:>10.4}", self.mean(m).unwrap_or(f64::NAN));
        }
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hue_of_primaries() {
        assert_eq!(rgb_to_hue_sat(1.0, 0.0, 0.0), (0.0, 1.0));
        assert_eq!(rgb_to_hue_sat(0.0, 1.0, 0.0).0, 120.0);
        assert_eq!(rgb_to_hue_sat(0.0, 1.0, 1.0).0, 180.0);
        assert_eq!(rgb_to_hue_sat(1.0, 0.0, 1.0).0, 300.0);
        assert_eq!(rgb_to_hue_sat(0.4, 0.4, 0.4), (0.0, 0.0));
    }

    #[test]
    fn gaussian_is_normalized() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[10]);
    }

    #[test]
    fn report_layout() {
        let a = Tensor::<f64>::full([4, 4, 3], 0.5);
        let b = Tensor::<f64>::full([4, 4, 3], 0.4);
        let items = vec![
            ("x.ppm".to_string(), a.clone(), b),
            ("y.ppm".to_string(), a.clone(), a),
        ];
        let r = MetricReport::evaluate(&[Metric::Psnr], &items).unwrap();
        assert_eq!(r.to_csv().lines().next(), Some("image,psnr"));
        assert!((r.mean(Metric::Psnr).unwrap() - (20.0 + PSNR_CAP) / 2.0).abs() < 1e-9);
        assert!(r.to_text().contains("mean"));
    }
}
