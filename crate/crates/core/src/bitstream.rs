//! The `PERC` container and rate accounting.
//!
//! ```text
//! "PERC" | version u8 | flags u8 | width u16 LE | height u16 LE
//!        | grid_h u8 | grid_w u8 | log2V u8
//!        | [caption_len LEB128 | caption bytes (raw DEFLATE)]  if flags say text
//!        | [pq block: M u8 | log2Vpq u8 | packed pq indices]   if flags say pq
//!        | packed spatial indices (MSB first, zero padded)
//! ```
//!
//! Flag bits 0–1 hold the global stream kind (0 none, 1 text, 2 pq). The
//! fixed header is 13 bytes.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::error::{format_err, invalid, Result};

pub const MAGIC: &[u8; 4] = b"PERC";
pub const VERSION: u8 = 1;
const KIND_MASK: u8 = 0b11;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalKind {
    None = 0,
    Text = 1,
    Pq = 2,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PqIndices {
    pub log2v: u8,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressedImage {
    pub width: u16,
    pub height: u16,
    pub grid_h: u8,
    pub grid_w: u8,
    pub log2v: u8,
    pub indices: Vec<usize>,
    /// Raw DEFLATE stream of the caption; empty when there is no caption.
    pub caption_bytes: Vec<u8>,
    pub pq: Option<PqIndices>,
}

impl CompressedImage {
    pub fn kind(&self) -> GlobalKind {
        if self.pq.is_some() {
            GlobalKind::Pq
        } else if !self.caption_bytes.is_empty() {
            GlobalKind::Text
        } else {
            GlobalKind::None
        }
    }

    pub fn spatial_bits(&self) -> usize {
        self.indices.len() * self.log2v as usize
    }

    pub fn pq_bits(&self) -> usize {
        self.pq.as_ref().map_or(0, |p| p.indices.len() * p.log2v as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.grid_h as usize * self.grid_w as usize {
            return invalid(format!(
                "{} indices for a {}×{} grid",
                self.indices.len(),
                self.grid_h,
                self.grid_w
            ));
        }
        check_range(&self.indices, self.log2v)?;
        if let Some(pq) = &self.pq {
            if !self.caption_bytes.is_empty() {
                return invalid("a stream carries either a caption or a PQ block, not both");
            }
            if pq.indices.len() > u8::MAX as usize {
                return invalid("too many PQ subvectors");
            }
            check_range(&pq.indices, pq.log2v)?;
        }
        Ok(())
    }
}

/// `grid_h·grid_w·⌈log₂V⌉ / (width·height)`.
pub fn bpp_spatial(grid_h: usize, grid_w: usize, v: usize, width: usize, height: usize) -> f64 {
    (grid_h * grid_w * crate::quantize::bits_for(v)) as f64 / (width * height) as f64
}

/// Spatial + caption + PQ bits per pixel, header excluded.
pub fn bpp_total(ci: &CompressedImage) -> f64 {
    let pixels = ci.width as f64 * ci.height as f64;
    if pixels == 0.0 {
        return 0.0;
    }
    (ci.spatial_bits() + 8 * ci.caption_bytes.len() + ci.pq_bits()) as f64 / pixels
}

/// Everything that is written, header included.
pub fn bpp_with_header(ci: &CompressedImage) -> Result<f64> {
    let bytes = write_stream(ci)?;
    Ok(8.0 * bytes.len() as f64 / (ci.width as f64 * ci.height as f64))
}

fn check_range(indices: &[usize], log2v: u8) -> Result<()> {
    if log2v == 0 || log2v > 32 {
        return invalid(format!("symbol width {log2v} outside 1..=32"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| (i as u64) >> log2v != 0) {
        return invalid(format!("index {bad} does not fit in {log2v} bits"));
    }
    Ok(())
}

/// Fixed-width MSB-first packing; the last byte is zero padded.
pub fn pack_indices(indices: &[usize], log2v: u8) -> Result<Vec<u8>> {
    check_range(indices, log2v)?;
    let width = log2v as u32;
    let mut out = Vec::with_capacity((indices.len() * width as usize).div_ceil(8));
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    for &i in indices {
        acc = (acc << width) | i as u64;
        filled += width;
        while filled >= 8 {
            filled -= 8;
            out.push((acc >> filled) as u8);
        }
        acc &= (1u64 << filled) - 1;
    }
    if filled > 0 {
        out.push((acc << (8 - filled)) as u8);
    }
    Ok(out)
}

pub fn unpack_indices(bytes: &[u8], count: usize, log2v: u8) -> Result<Vec<usize>> {
    if log2v == 0 || log2v > 32 {
        return invalid(format!("symbol width {log2v} outside 1..=32"));
    }
    let width = log2v as u32;
    let need = (count * width as usize).div_ceil(8);
    if bytes.len() < need {
        return format_err("index stream", format!("{} bytes, {need} needed", bytes.len()));
    }
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    let mut pos = 0;
    for _ in 0..count {
        while filled < width {
            acc = (acc << 8) | bytes[pos] as u64;
            pos += 1;
            filled += 8;
        }
        filled -= width;
        out.push(((acc >> filled) & ((1u64 << width) - 1)) as usize);
        acc &= (1u64 << filled) - 1;
    }
    Ok(out)
}

/// Raw DEFLATE (no zlib/gzip wrapper). The empty caption maps to no bytes.
pub fn caption_compress(caption: &str) -> Vec<u8> {
    if caption.is_empty() {
        return Vec::new();
    }
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::best());
    enc.write_all(caption.as_bytes()).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

pub fn caption_decompress(bytes: &[u8]) -> Result<String> {
    if bytes.is_empty() {
        return Ok(String::new());
    }
    let mut out = Vec::new();
    DeflateDecoder::new(bytes)
        .read_to_end(&mut out)
        .or_else(|e| format_err("caption stream", e.to_string()))?;
    String::from_utf8(out).or_else(|_| format_err("caption stream", "caption is not UTF-8"))
}

fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v: u64 = 0;
    for shift in (0..64).step_by(7) {
        let b = *bytes.get(*pos).ok_or(()).or_else(|_| format_err("stream", "truncated varint"))?;
        *pos += 1;
        v |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
    }
    format_err("stream", "varint longer than 64 bits")
}

pub fn write_stream(ci: &CompressedImage) -> Result<Vec<u8>> {
    ci.validate()?;
    let mut out = Vec::with_capacity(16 + ci.caption_bytes.len() + ci.indices.len() * 2);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(ci.kind() as u8);
    out.extend_from_slice(&ci.width.to_le_bytes());
    out.extend_from_slice(&ci.height.to_le_bytes());
    out.push(ci.grid_h);
    out.push(ci.grid_w);
    out.push(ci.log2v);
    if ci.kind() == GlobalKind::Text {
        write_varint(&mut out, ci.caption_bytes.len() as u64);
        out.extend_from_slice(&ci.caption_bytes);
    }
    if let Some(pq) = &ci.pq {
        out.push(pq.indices.len() as u8);
        out.push(pq.log2v);
        out.extend(pack_indices(&pq.indices, pq.log2v)?);
    }
    out.extend(pack_indices(&ci.indices, ci.log2v)?);
    Ok(out)
}

pub fn read_stream(bytes: &[u8]) -> Result<CompressedImage> {
    const WHAT: &str = "PERC stream";
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return format_err(WHAT, "bad magic");
    }
    if bytes[4] != VERSION {
        return format_err(WHAT, format!("unsupported version {}", bytes[4]));
    }
    if bytes.len() < 13 {
        return format_err(WHAT, "truncated header");
    }
    let flags = bytes[5];
    if flags & !KIND_MASK != 0 {
        return format_err(WHAT, format!("unknown flag bits {flags:#04x}"));
    }
    let width = u16::from_le_bytes([bytes[6], bytes[7]]);
    let height = u16::from_le_bytes([bytes[8], bytes[9]]);
    let (grid_h, grid_w, log2v) = (bytes[10], bytes[11], bytes[12]);
    if log2v == 0 || log2v > 32 {
        return format_err(WHAT, format!("symbol width {log2v}"));
    }
    let mut pos = 13;
    let kind = flags & KIND_MASK;
    let cap_len = if kind == GlobalKind::Text as u8 {
        read_varint(bytes, &mut pos)? as usize
    } else {
        0
    };
    if kind == GlobalKind::Text as u8 && cap_len == 0 {
        return format_err(WHAT, "text stream with an empty caption");
    }
    let caption_bytes = bytes
        .get(pos..pos.saturating_add(cap_len))
        .ok_or(())
        .or_else(|_| format_err(WHAT, "truncated caption"))?
        .to_vec();
    pos += cap_len;
    let pq = match kind {
        0 | 1 => None,
        2 => {
            let (m, lv) = match bytes.get(pos..pos + 2) {
                Some(&[m, lv]) => (m as usize, lv),
                _ => return format_err(WHAT, "truncated pq block"),
            };
            pos += 2;
            if lv == 0 || lv > 32 {
                return format_err(WHAT, format!("pq symbol width {lv}"));
            }
            let len = (m * lv as usize).div_ceil(8);
            let indices = unpack_indices(bytes.get(pos..).unwrap_or(&[]), m, lv)?;
            pos += len;
            Some(PqIndices { log2v: lv, indices })
        }
        _ => return format_err(WHAT, "reserved global kind 3"),
    };
    let count = grid_h as usize * grid_w as usize;
    let len = (count * log2v as usize).div_ceil(8);
    let rest = bytes.get(pos..).unwrap_or(&[]);
    if rest.len() != len {
        return format_err(WHAT, format!("{} index bytes, expected {len}", rest.len()));
    }
    let indices = unpack_indices(rest, count, log2v)?;
    Ok(CompressedImage {
        width,
        height,
        grid_h,
        grid_w,
        log2v,
        indices,
        caption_bytes,
        pq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_packed_bytes() {
        assert_eq!(pack_indices(&[3, 1, 0, 2], 2).unwrap(), vec![0xD2]);
        assert_eq!(pack_indices(&[5], 3).unwrap(), vec![0xA0]);
        assert!(pack_indices(&[4], 2).is_err());
        assert_eq!(unpack_indices(&[0xD2], 4, 2).unwrap(), vec![3, 1, 0, 2]);
        assert!(unpack_indices(&[0xD2], 5, 2).is_err());
    }

    #[test]
    fn varint_boundaries() {
        for v in [0u64, 1, 127, 128, 300, 16383, 16384, u32::MAX as u64] {
            let mut b = Vec::new();
            write_varint(&mut b, v);
            let mut p = 0;
            assert_eq!(read_varint(&b, &mut p).unwrap(), v);
            assert_eq!(p, b.len());
        }
        let mut b = Vec::new();
        write_varint(&mut b, 300);
        assert_eq!(b, vec![0xAC, 0x02]);
    }
}
