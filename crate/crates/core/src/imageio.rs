//! 8-bit RGB image files: PNG via the `image` crate, binary PPM (P6) by hand.

use std::path::Path;

use image::{ColorType, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Loads an image as `[1,3,H,W]` with values in `[0,1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else {
        Err(Error::Format("unsupported image format (expected PNG or binary PPM)".into()))
    }
}

fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("PNG decode failed: {e}")))?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::Format(format!("PNG must be 8-bit RGB, got {:?}", img.color())));
    }
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    from_interleaved(h as usize, w as usize, rgb.as_raw(), 255)
}

fn from_interleaved(h: usize, w: usize, raw: &[u8], maxval: u32) -> Result<Tensor> {
    let maxval = maxval as f32;
    Tensor::new(
        [1, 3, h, w],
        (0..3)
            .flat_map(|c| (0..h * w).map(move |p| (c, p)))
            .map(|(c, p)| raw[p * 3 + c] as f32 / maxval)
            .collect(),
    )
}

fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("PPM header truncated or malformed at field {}", i + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format("PPM header value out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("PPM header must end with a single whitespace byte".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("PPM has empty dimensions {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("only 8-bit PPM is supported, maxval {maxval}")));
    }
    let (w, h) = (w as usize, h as usize);
    let raster = &bytes[pos..];
    if raster.len() < w * h * 3 {
        return Err(Error::Format(format!(
            "PPM truncated: {} of {} raster bytes",
            raster.len(),
            w * h * 3
        )));
    }
    from_interleaved(h, w, &raster[..w * h * 3], maxval)
}

/// Clamps to `[0,1]` and quantizes with round-half-up.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn interleave(t: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (b, c, h, w) = t.dims();
    if b != 1 || c != 3 {
        return Err(Error::InvalidArgument(format!("save_image expects [1,3,H,W], got {:?}", t.shape())));
    }
    let mut raw = vec![0u8; h * w * 3];
    for ch in 0..3 {
        for (p, &v) in t.plane(0, ch).iter().enumerate() {
            raw[p * 3 + ch] = quantize(v);
        }
    }
    Ok((h, w, raw))
}

pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w, raw) = interleave(t)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(raw);
    Ok(out)
}

/// Writes PPM for a `.ppm` extension and PNG otherwise.
pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        std::fs::write(path, encode_ppm(t)?)?;
        return Ok(());
    }
    let (h, w, raw) = interleave(t)?;
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from dimensions");
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("PNG encode failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(0.5), 128);
    }

    #[test]
    fn ppm_fixture() {
        let mut bytes = b"P6\n# comment\n2 2\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 204]);
        let t = decode_image(&bytes).unwrap();
        assert_eq!(t.shape(), [1, 3, 2, 2]);
        assert_eq!(t.plane(0, 0), &[1.0, 0.0, 0.0, 0.2]);
        assert_eq!(t.plane(0, 1), &[0.0, 1.0, 0.0, 0.4]);
        assert_eq!(t.plane(0, 2), &[0.0, 0.0, 1.0, 0.8]);
        assert!(decode_image(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(decode_image(&encode_ppm(&t).unwrap()).unwrap(), t);
    }
}
