//! XPB1 tensor container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "XPB1"
//! 4       4     u32 channels (always 3)
//! 8       4     u32 height
//! 12      4     u32 width
//! 16      4*n   f32 data, C-order CHW, n = c*h*w
//! ```
//!
//! A batch is a plain concatenation of frames. Decoded tensors are tagged
//! `Normalized`, the only range that crosses the wire.

use super::{ImageTensor, ImagingError, RangeTag, Result, CHANNELS};
use byteorder::{ByteOrder, LittleEndian};
use std::path::Path;

pub const XPB1_MAGIC: &[u8; 4] = b"XPB1";
const HEADER_LEN: usize = 16;

pub fn encode_xpb1(img: &ImageTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * img.data.len());
    append_frame(&mut out, img);
    out
}

fn append_frame(out: &mut Vec<u8>, img: &ImageTensor) {
    out.extend_from_slice(XPB1_MAGIC);
    let mut header = [0u8; 12];
    LittleEndian::write_u32_into(
        &[CHANNELS as u32, img.height as u32, img.width as u32],
        &mut header,
    );
    out.extend_from_slice(&header);
    let start = out.len();
    out.resize(start + 4 * img.data.len(), 0);
    LittleEndian::write_f32_into(&img.data, &mut out[start..]);
}

pub fn encode_xpb1_batch(batch: &[ImageTensor]) -> Vec<u8> {
    let total: usize = batch.iter().map(|t| HEADER_LEN + 4 * t.data.len()).sum();
    let mut out = Vec::with_capacity(total);
    for img in batch {
        append_frame(&mut out, img);
    }
    out
}

/// Decodes one frame from the start of `bytes`, returning it and the number of
/// bytes consumed.
pub fn decode_xpb1(bytes: &[u8]) -> Result<(ImageTensor, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(ImagingError::Xpb1(format!(
            "need {HEADER_LEN} header bytes, got {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != XPB1_MAGIC {
        return Err(ImagingError::Xpb1(format!("bad magic {:?}", &bytes[..4])));
    }
    let c = LittleEndian::read_u32(&bytes[4..8]) as usize;
    let h = LittleEndian::read_u32(&bytes[8..12]) as usize;
    let w = LittleEndian::read_u32(&bytes[12..16]) as usize;
    if c != CHANNELS {
        return Err(ImagingError::Xpb1(format!("expected 3 channels, got {c}")));
    }
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| ImagingError::Xpb1("shape overflows".into()))?;
    let end = HEADER_LEN + 4 * n;
    if bytes.len() < end {
        return Err(ImagingError::Xpb1(format!(
            "frame needs {end} bytes, got {}",
            bytes.len()
        )));
    }
    let mut data = vec![0f32; n];
    LittleEndian::read_f32_into(&bytes[HEADER_LEN..end], &mut data);
    Ok((ImageTensor::new(data, h, w, RangeTag::Normalized)?, end))
}

pub fn decode_xpb1_batch(mut bytes: &[u8]) -> Result<Vec<ImageTensor>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (t, used) = decode_xpb1(bytes)?;
        out.push(t);
        bytes = &bytes[used..];
    }
    Ok(out)
}

pub fn write_xpb1(path: &Path, img: &ImageTensor) -> Result<()> {
    std::fs::write(path, encode_xpb1(img))?;
    Ok(())
}

pub fn read_xpb1(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path)?;
    let (t, used) = decode_xpb1(&bytes)?;
    if used != bytes.len() {
        return Err(ImagingError::Xpb1(format!(
            "{} trailing bytes",
            bytes.len() - used
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_bit_exact() {
        let img = ImageTensor::new(
            vec![1.0, -2.5, 0.0, 3.0, 0.25, -1.0],
            1,
            2,
            RangeTag::Normalized,
        )
        .unwrap();
        let bytes = encode_xpb1(&img);
        assert_eq!(
            &bytes[..16],
            b"XPB1\x03\x00\x00\x00\x01\x00\x00\x00\x02\x00\x00\x00"
        );
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
    }

    #[test]
    fn malformed_payloads() {
        assert!(decode_xpb1(b"XPB").is_err());
        assert!(decode_xpb1(b"XPB2\x03\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00").is_err());
        let mut ok =
            encode_xpb1(&ImageTensor::filled([0.0; 3], 2, 2, RangeTag::Normalized).unwrap());
        ok.truncate(ok.len() - 1);
        assert!(decode_xpb1(&ok).is_err());
    }

    proptest! {
        #[test]
        fn batch_round_trip(h in 1usize..5, w in 1usize..5, n in 0usize..4, seed in any::<u32>()) {
            let batch: Vec<ImageTensor> = (0..n)
                .map(|k| {
                    let data = (0..3 * h * w).map(|i| ((i as u32 ^ seed).wrapping_mul(2654435761) as f32) / 1e9 - k as f32).collect();
                    ImageTensor::new(data, h, w, RangeTag::Normalized).unwrap()
                })
                .collect();
            let decoded = decode_xpb1_batch(&encode_xpb1_batch(&batch)).unwrap();
            prop_assert_eq!(decoded, batch);
        }
    }
}
