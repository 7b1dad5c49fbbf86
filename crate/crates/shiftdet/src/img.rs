//! Dense RGB image buffer, HWC layout, values in [0, 1].

use crate::error::{Error, Result};

/// H x W x 3 image, `f32` per channel, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize) -> Self {
        ImageBuf {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = ImageBuf::new(height, width);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * 3
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = self.idx(y, x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = self.idx(y, x);
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    pub fn clamp_inplace(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Encode as binary PPM (P6), quantizing to 8 bits per channel.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.data.len());
        for v in &self.data {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out
    }

    /// Decode a binary PPM (P6) produced by [`ImageBuf::to_ppm`].
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut token = || -> Result<Vec<u8>> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Dataset("truncated ppm header".into()));
            }
            Ok(bytes[start..pos].to_vec())
        };
        let magic = token()?;
        if magic != b"P6" {
            return Err(Error::Dataset("not a P6 ppm".into()));
        }
        let parse = |t: Vec<u8>| -> Result<usize> {
            std::str::from_utf8(&t)
                .ok()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| Error::Dataset("bad ppm header field".into()))
        };
        let width = parse(token()?)?;
        let height = parse(token()?)?;
        let maxval = parse(token()?)?;
        if maxval != 255 {
            return Err(Error::Dataset(format!("unsupported ppm maxval {maxval}")));
        }
        // Exactly one whitespace byte separates header from pixel data.
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(Error::Dataset("ppm pixel data truncated".into()));
        }
        let data = bytes[pos..pos + need]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        Ok(ImageBuf {
            height,
            width,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_within_quantization() {
        let mut img = ImageBuf::new(5, 7);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.37) % 1.0;
        }
        let back = ImageBuf::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(back.height, 5);
        assert_eq!(back.width, 7);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn ppm_encode_is_deterministic() {
        let img = ImageBuf::filled(4, 4, [0.25, 0.5, 0.75]);
        assert_eq!(img.to_ppm(), img.to_ppm());
    }

    #[test]
    fn rejects_garbage() {
        assert!(ImageBuf::from_ppm(b"P5\n2 2\n255\nxxxx").is_err());
        assert!(ImageBuf::from_ppm(b"P6\n9 9\n255\nshort").is_err());
    }
}
