//! Grayscale image files. PGM (P5, maxval 255) is the native format; PNG
//! goes through the same entry points when asked for.

use crate::{Error, Latent, Result};
use ndarray::{Ix2, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Png => "png",
        }
    }
}

impl std::str::FromStr for ImageFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(ImageFormat::Pgm),
            "png" => Ok(ImageFormat::Png),
            other => Err(Error::Usage(format!(
                "unknown image format {other:?}, expected pgm or png"
            ))),
        }
    }
}

impl std::fmt::Display for ImageFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.extension())
    }
}

fn quantize(img: &Latent) -> Result<(usize, usize, Vec<u8>)> {
    let v = img
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Usage(format!("images must be 2-d, got shape {:?}", img.shape())))?;
    let (h, w) = v.dim();
    if h == 0 || w == 0 {
        return Err(Error::Usage("cannot write an empty image".into()));
    }
    // Values are clamped to [0,1] on write.
    let bytes = v
        .iter()
        .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok((h, w, bytes))
}

pub fn write_image(path: &Path, img: &Latent, format: ImageFormat) -> Result<()> {
    let (h, w, bytes) = quantize(img)?;
    match format {
        ImageFormat::Pgm => {
            let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
            out.extend_from_slice(&bytes);
            std::fs::write(path, out)?;
        }
        ImageFormat::Png => {
            let buf = ::image::GrayImage::from_raw(w as u32, h as u32, bytes)
                .expect("buffer length matches dimensions");
            buf.save_with_format(path, ::image::ImageFormat::Png)
                .map_err(|e| Error::Format {
                    path: path.display().to_string(),
                    reason: format!("png encoding failed: {e}"),
                })?;
        }
    }
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Latent> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default();
    match ext {
        "pgm" => read_pgm(path),
        "png" => read_png(path),
        other => Err(Error::Usage(format!(
            "unknown image extension {other:?}, expected pgm or png"
        ))),
    }
}

fn fmt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Option<usize> {
    std::str::from_utf8(next_token(bytes, pos)?).ok()?.parse().ok()
}

fn read_pgm(path: &Path) -> Result<Latent> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    if next_token(&bytes, &mut pos) != Some(b"P5".as_slice()) {
        return Err(fmt_err(path, "not a P5 pgm file"));
    }
    let w = header_number(&bytes, &mut pos).ok_or_else(|| fmt_err(path, "bad width"))?;
    let h = header_number(&bytes, &mut pos).ok_or_else(|| fmt_err(path, "bad height"))?;
    let maxval = header_number(&bytes, &mut pos).ok_or_else(|| fmt_err(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(fmt_err(path, format!("unsupported maxval {maxval}")));
    }
    let npix = w
        .checked_mul(h)
        .ok_or_else(|| fmt_err(path, "image dimensions overflow"))?;
    let data_start = pos + 1; // single whitespace byte after maxval
    let data = data_start
        .checked_add(npix)
        .and_then(|end| bytes.get(data_start..end))
        .ok_or_else(|| fmt_err(path, "truncated pixel data"))?;
    let values: Vec<f64> = data.iter().map(|&b| b as f64 / 255.0).collect();
    Latent::from_shape_vec(IxDyn(&[h, w]), values)
        .map_err(|_| fmt_err(path, "pixel count does not match header"))
}

fn read_png(path: &Path) -> Result<Latent> {
    let img = ::image::open(path)
        .map_err(|e| fmt_err(path, format!("png decoding failed: {e}")))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let values: Vec<f64> = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Latent::from_shape_vec(IxDyn(&[h as usize, w as usize]), values)
        .map_err(|_| fmt_err(path, "pixel count does not match header"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_stream;
    use rand::Rng;

    fn sample_image(h: usize, w: usize) -> Latent {
        let mut rng = seed_stream(70, "pgm");
        Latent::from_shape_simple_fn(IxDyn(&[h, w]), || rng.gen::<f64>())
    }

    #[test]
    fn pgm_header_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Latent::zeros(IxDyn(&[16, 16]));
        write_image(&path, &img, ImageFormat::Pgm).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(bytes.len(), 13 + 256);
        assert!(bytes[13..].iter().all(|&b| b == 0));
    }

    #[test]
    fn pgm_roundtrip_stays_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = sample_image(16, 16);
        write_image(&path, &img, ImageFormat::Pgm).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn png_roundtrip_matches_pgm_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = sample_image(12, 9);
        let p_pgm = dir.path().join("img.pgm");
        let p_png = dir.path().join("img.png");
        write_image(&p_pgm, &img, ImageFormat::Pgm).unwrap();
        write_image(&p_png, &img, ImageFormat::Png).unwrap();
        assert_eq!(read_image(&p_pgm).unwrap(), read_image(&p_png).unwrap());
    }

    #[test]
    fn out_of_range_values_are_clamped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Latent::from_shape_vec(IxDyn(&[1, 3]), vec![-0.5, 0.5, 1.5]).unwrap();
        write_image(&path, &img, ImageFormat::Pgm).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0u8, 128, 255]);
    }

    #[test]
    fn non_2d_input_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Latent::zeros(IxDyn(&[8]));
        assert!(matches!(
            write_image(&path, &img, ImageFormat::Pgm),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        std::fs::write(&path, b"P6\n2 2\n255\nxxxx").unwrap();
        assert!(matches!(read_image(&path), Err(Error::Format { .. })));
        std::fs::write(&path, b"P5\n4 4\n255\nxx").unwrap();
        assert!(matches!(read_image(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn format_parsing_roundtrips() {
        assert_eq!("pgm".parse::<ImageFormat>().unwrap(), ImageFormat::Pgm);
        assert_eq!("png".parse::<ImageFormat>().unwrap(), ImageFormat::Png);
        assert!("bmp".parse::<ImageFormat>().is_err());
        assert_eq!(ImageFormat::Png.to_string(), "png");
    }
}
