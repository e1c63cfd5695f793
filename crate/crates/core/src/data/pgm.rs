//! Binary PGM (P5) with maxval 255, grayscale values mapped to `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, PgmError, Result};
use crate::numerics::Tensor;

/// Parse P5 bytes into a `[1, H, W]` tensor.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f64>> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(PgmError::BadMagic.into());
    }
    match bytes[1] {
        b'5' => {}
        b'1'..=b'4' | b'6' | b'7' => return Err(PgmError::UnsupportedFormat(format!("P{}", bytes[1] as char)).into()),
        _ => return Err(PgmError::BadMagic.into()),
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    let mut comments = 0;
    for field in fields.iter_mut() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                comments += 1;
                if comments > 1 {
                    return Err(PgmError::Header("more than one comment line".into()).into());
                }
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text
            .parse()
            .map_err(|_| PgmError::Header(format!("expected a number at byte {start}")))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PgmError::Header("missing whitespace after maxval".into()).into());
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(PgmError::UnsupportedMaxval(maxval).into());
    }
    if w == 0 || h == 0 {
        return Err(PgmError::Header(format!("degenerate size {w}x{h}")).into());
    }
    let need = w as usize * h as usize;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(PgmError::Truncated {
            expected: need,
            found: payload.len(),
        }
        .into());
    }
    let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(&[1, h as usize, w as usize], data)
}

/// Encode a `[1, H, W]` (or `[H, W]`) tensor; values are clamped to `[0, 1]`
/// and rounded to the nearest of 256 levels.
pub fn encode_pgm(t: &Tensor<f64>) -> Result<Vec<u8>> {
    let (h, w) = match t.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::shape("write_pgm", format!("expected [1,H,W], got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn write_pgm(t: &Tensor<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(t)?).map_err(|e| Error::io(path, e))
}

/// Write a mask as `{0, 255}`: values `>= 0.5` are foreground.
pub fn write_mask_pgm(t: &Tensor<f64>, path: impl AsRef<Path>) -> Result<()> {
    write_pgm(&binarize(t), path)
}

pub fn binarize(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}
