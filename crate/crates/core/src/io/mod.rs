//! Image file codecs. Binary PPM (P6) and PGM (P5) are always available;
//! PNG needs the `png` feature.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("bad magic {0:?}: expected P5 or P6")]
    BadMagic(String),
    #[error("unsupported maxval {0}: only 255 is accepted")]
    UnsupportedMaxval(u64),
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    Malformed(String),
    #[error("unsupported image format `{0}`")]
    UnsupportedFormat(String),
    #[error("image must be [H, W, 3], got {0:?}")]
    BadShape(Vec<usize>),
    #[cfg(feature = "png")]
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ImageError>;

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Malformed(format!("missing {what}")))
    }
}

/// Decodes binary PPM/PGM bytes into an `[H, W, 3]` image in `[0, 1]`.
/// Grayscale input is replicated across the three channels.
pub fn decode_pnm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let magic = bytes.get(..2).unwrap_or(bytes);
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        _ => {
            return Err(ImageError::BadMagic(
                String::from_utf8_lossy(magic).into_owned(),
            ))
        }
    };
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")? as usize;
    let height = hdr.number("height")? as usize;
    let maxval = hdr.number("maxval")?;
    if maxval != 255 {
        return Err(ImageError::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::Malformed(format!(
            "empty image {width}x{height}"
        )));
    }
    if !bytes.get(hdr.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ImageError::Malformed("no whitespace after maxval".into()));
    }
    let payload = &bytes[hdr.pos + 1..];
    let expected = width * height * channels;
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let scale = T::lit(1.0 / 255.0);
    let data = (0..width * height * 3)
        .map(|i| {
            let src = if channels == 3 { i } else { i / 3 };
            T::lit(payload[src] as f64) * scale
        })
        .collect();
    Ok(Tensor::new([height, width, 3], data).expect("shape matches data"))
}

fn check_image<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w, 3] => Ok((h, w)),
        _ => Err(ImageError::BadShape(image.shape().to_vec())),
    }
}

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an `[H, W, 3]` image as binary PPM, clamping to `[0, 1]`.
pub fn encode_ppm<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = check_image(image)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Whether `path` has an extension this build can read.
pub fn is_supported(path: &Path) -> bool {
    matches!(extension(path).as_str(), "ppm" | "pgm" | "pnm")
        || (cfg!(feature = "png") && extension(path) == "png")
}

pub fn read_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    match extension(path).as_str() {
        #[cfg(feature = "png")]
        "png" => png_codec::decode(&fs::read(path)?),
        "ppm" | "pgm" | "pnm" => decode_pnm(&fs::read(path)?),
        other => Err(ImageError::UnsupportedFormat(other.to_string())),
    }
}

pub fn write_image<T: Scalar>(image: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match extension(path).as_str() {
        #[cfg(feature = "png")]
        "png" => png_codec::encode(image)?,
        "ppm" | "pnm" => encode_ppm(image)?,
        other => return Err(ImageError::UnsupportedFormat(other.to_string())),
    };
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(feature = "png")]
mod png_codec {
    use super::{check_image, quantize, ImageError, Result};
    use crate::scalar::Scalar;
    use crate::tensor::Tensor;

    fn err(e: impl std::fmt::Display) -> ImageError {
        ImageError::Png(e.to_string())
    }

    pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
        let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = decoder.read_info().map_err(err)?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(err)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let step = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => return Err(err("indexed color after expansion")),
        };
        let scale = T::lit(1.0 / 255.0);
        let data = (0..w * h * 3)
            .map(|i| {
                let (px, c) = (i / 3, i % 3);
                let src = px * step + if step >= 3 { c } else { 0 };
                T::lit(buf[src] as f64) * scale
            })
            .collect();
        Ok(Tensor::new([h, w, 3], data).expect("shape matches data"))
    }

    pub fn encode<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
        let (h, w) = check_image(image)?;
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(err)?;
            let px: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
            writer.write_image_data(&px).map_err(err)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_p6() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        let img: Tensor<f32> = decode_pnm(&bytes).unwrap();
        assert_eq!(img.shape(), &[1, 2, 3]);
        assert_eq!(img.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn header_comments() {
        let mut bytes = b"P5 # gray\n# size\n1 2\n255\n".to_vec();
        bytes.extend([0, 51]);
        let img: Tensor<f64> = decode_pnm(&bytes).unwrap();
        assert_eq!(img.shape(), &[2, 1, 3]);
        assert_eq!(img.data()[3..], [0.2, 0.2, 0.2]);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(
            decode_pnm::<f32>(b"P3\n1 1\n255\n"),
            Err(ImageError::BadMagic(_))
        ));
        assert!(matches!(
            decode_pnm::<f32>(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(ImageError::UnsupportedMaxval(65535))
        ));
        assert!(matches!(
            decode_pnm::<f32>(b"P6\n1 1\n255\n\0\0"),
            Err(ImageError::Truncated {
                expected: 3,
                found: 2
            })
        ));
        assert!(matches!(
            decode_pnm::<f32>(b"P6\nx"),
            Err(ImageError::Malformed(_))
        ));
    }
}
