//! RGB images in `[0, 1]` and binary PPM (P6) I/O.

use std::path::Path;

use crate::error::{format_err, mismatch, Result};

/// Planar RGB, channel-major (`3 × height × width`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return mismatch(format!("{} values for a 3×{height}×{width} image", data.len()));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, width * height));
        }
        Image { width, height, data }
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Values quantised to the 8-bit grid used by PPM files.
    pub fn to_bytes(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                out.push((self.data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    const WHAT: &str = "PPM";
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return format_err(WHAT, "not a binary P6 file");
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return format_err(WHAT, "truncated header"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(())
            .or_else(|_| format_err(WHAT, "bad header number"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return format_err(WHAT, format!("maxval {maxval}, only 255 is supported"));
    }
    if width == 0 || height == 0 {
        return format_err(WHAT, "zero-sized image");
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return format_err(WHAT, "missing raster separator");
    }
    pos += 1;
    let plane = width * height;
    let raster = bytes.get(pos..pos + 3 * plane).ok_or(()).or_else(|_| format_err(WHAT, "truncated raster"))?;
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = raster[3 * p + c] as f32 / 255.0;
        }
    }
    Image::new(width, height, data)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img))?;
    Ok(())
}

/// Caption precedence: sidecar `<stem>.txt` next to the image, then the
/// given template, then empty.
pub fn caption_for(image_path: &Path, template: Option<&str>) -> Result<String> {
    let side = image_path.with_extension("txt");
    if side.is_file() {
        return Ok(std::fs::read_to_string(side)?.trim().to_string());
    }
    Ok(template.unwrap_or("").to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let mut b = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        b.extend([255, 0, 0, 0, 0, 255]);
        let img = decode_ppm(&b).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixel(0, 0, 0), 1.0);
        assert_eq!(img.pixel(2, 0, 1), 1.0);
        assert_eq!(encode_ppm(&img)[..11], b"P6\n2 1\n255\n"[..]);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(decode_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    }
}
