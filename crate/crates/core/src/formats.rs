//! Byte-level file formats. `docs/formats.md` describes each layout.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::challenge::Challenge;
use crate::error::{Error, Result};
use crate::gabor::BitResponse;
use crate::image::ResponseImage;

pub const IMAGE_MAGIC: [u8; 4] = *b"PUFR";
pub const REGRESSION_MAGIC: [u8; 4] = *b"PUFM";
pub const GENERATOR_MAGIC: [u8; 4] = *b"PUFG";
pub const IMAGE_HEADER_LEN: usize = 16;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Packs bits LSB first into `ceil(len / 8)` bytes.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// One packed row of `ceil(n / 8)` bytes per challenge.
pub fn write_challenges(path: &Path, challenges: &[Challenge]) -> Result<()> {
    let mut out = Vec::new();
    for ch in challenges {
        out.extend(pack_bits(ch.bits()));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_challenges(path: &Path, grid_side: usize, count: usize) -> Result<Vec<Challenge>> {
    let bytes = fs::read(path)?;
    let n = grid_side * grid_side;
    let row = n.div_ceil(8);
    if bytes.len() != row * count {
        return Err(format_err(
            path,
            format!("expected {} bytes for {count} challenges, found {}", row * count, bytes.len()),
        ));
    }
    bytes
        .chunks(row.max(1))
        .take(count)
        .map(|chunk| Challenge::new(grid_side, unpack_bits(chunk, n)))
        .collect()
}

/// `PUFR` magic, then u32 height, width and count, then little-endian f32
/// pixels image after image.
pub fn write_images(path: &Path, images: &[ResponseImage]) -> Result<()> {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height(), i.width()));
    let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + images.len() * h * w * 4);
    out.extend_from_slice(&IMAGE_MAGIC);
    for v in [h, w, images.len()] {
        out.extend_from_slice(&u32::try_from(v).map_err(|_| format_err(path, "dimension exceeds u32"))?.to_le_bytes());
    }
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::Invalid("all images in one block must share a shape".into()));
        }
        for v in img.pixels() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_images(path: &Path) -> Result<Vec<ResponseImage>> {
    let bytes = fs::read(path)?;
    if bytes.len() < IMAGE_HEADER_LEN || bytes[..4] != IMAGE_MAGIC {
        return Err(format_err(path, "missing PUFR header"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, count) = (field(0), field(1), field(2));
    let expected = IMAGE_HEADER_LEN + h * w * count * 4;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("expected {expected} bytes for {count} images of {h}x{w}, found {}", bytes.len()),
        ));
    }
    let body = &bytes[IMAGE_HEADER_LEN..];
    (0..count)
        .map(|k| {
            let data = body[k * h * w * 4..(k + 1) * h * w * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            ResponseImage::new(h, w, data).map_err(|e| format_err(path, format!("image {k}: {e}")))
        })
        .collect()
}

/// Concatenated packed bit responses, `ceil(h * w / 8)` bytes each.
pub fn write_bit_responses(path: &Path, responses: &[BitResponse]) -> Result<()> {
    let mut out = Vec::new();
    for r in responses {
        out.extend(r.to_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_bit_responses(path: &Path, height: usize, width: usize, count: usize) -> Result<Vec<BitResponse>> {
    let bytes = fs::read(path)?;
    let row = (height * width).div_ceil(8);
    if bytes.len() != row * count {
        return Err(format_err(
            path,
            format!("expected {} bytes, found {}", row * count, bytes.len()),
        ));
    }
    bytes
        .chunks(row.max(1))
        .take(count)
        .map(|c| BitResponse::from_bytes(height, width, c))
        .collect()
}

/// Magic, u32 header length, JSON header, then little-endian f64 values.
pub fn write_framed<H: Serialize>(path: &Path, magic: [u8; 4], header: &H, block: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(8 + json.len() + block.len() * 8);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in block {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_framed<H: DeserializeOwned>(path: &Path, magic: [u8; 4]) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || bytes[..4] != magic {
        return Err(format_err(
            path,
            format!("expected magic {}", String::from_utf8_lossy(&magic)),
        ));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + len || !(bytes.len() - 8 - len).is_multiple_of(8) {
        return Err(format_err(path, "truncated header or value block"));
    }
    let header = serde_json::from_slice(&bytes[8..8 + len])
        .map_err(|e| format_err(path, format!("bad header: {e}")))?;
    let block: Vec<f64> = bytes[8 + len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if block.iter().any(|v| !v.is_finite()) {
        return Err(format_err(path, "non-finite value in block"));
    }
    Ok((header, block))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_is_lsb_first() {
        let bits = [true, false, false, true, false, false, false, false, true];
        assert_eq!(pack_bits(&bits), vec![0b0000_1001, 0b0000_0001]);
        assert_eq!(unpack_bits(&pack_bits(&bits), 9), bits);
    }

    #[test]
    fn images_round_trip_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.f32");
        let a = ResponseImage::new(2, 3, vec![0.0, 1.5, 2.25, 3.0, 0.5, 8.0]).unwrap();
        write_images(&p, &[a.clone(), a.clone()]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"PUFR");
        assert_eq!(bytes.len(), 16 + 2 * 6 * 4);
        assert_eq!(read_images(&p).unwrap(), vec![a.clone(), a]);
    }

    #[test]
    fn truncated_image_block_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.f32");
        write_images(&p, &[ResponseImage::zeros(2, 2)]).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_images(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn framed_round_trip_and_magic_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        write_framed(&p, REGRESSION_MAGIC, &serde_json::json!({"k": 1}), &[1.0, -2.5]).unwrap();
        let (h, v): (serde_json::Value, Vec<f64>) = read_framed(&p, REGRESSION_MAGIC).unwrap();
        assert_eq!(h["k"], 1);
        assert_eq!(v, vec![1.0, -2.5]);
        assert!(read_framed::<serde_json::Value>(&p, GENERATOR_MAGIC).is_err());
    }
}
