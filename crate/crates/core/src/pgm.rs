//! Binary PGM (`P5`) reading and writing, 8- or 16-bit.

use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};

/// Raw grayscale raster as stored in a PGM file.
#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl Pgm {
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut tokens = Vec::with_capacity(4);
        while tokens.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            if start == pos {
                return Err(format_err(path, "truncated PGM header"));
            }
            tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err(path, "bad header"))?);
        }
        if tokens[0] != "P5" {
            return Err(format_err(path, format!("unsupported PGM magic {:?}", tokens[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad header field {s:?}")));
        let (width, height, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(format_err(path, format!("bad dimensions {width}x{height} maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let wide = maxval > 255;
        let need = width * height * if wide { 2 } else { 1 };
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| format_err(path, format!("raster truncated: need {need} bytes")))?;
        let samples: Vec<u16> = if wide {
            raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
        } else {
            raster.iter().map(|&b| b as u16).collect()
        };
        if let Some(v) = samples.iter().find(|&&v| v as usize > maxval) {
            return Err(format_err(path, format!("sample {v} exceeds maxval {maxval}")));
        }
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::parse(&bytes, path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for &s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    /// Samples scaled by `1 / maxval`.
    pub fn to_unit(&self) -> Vec<f32> {
        let m = self.maxval as f32;
        self.samples.iter().map(|&s| s as f32 / m).collect()
    }

    /// Quantizes `[0, 1]` values to 16-bit samples.
    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Self {
        let samples = values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        Self {
            width,
            height,
            maxval: 65535,
            samples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_extremes_map_to_unit_interval() {
        let bytes = b"P5\n# comment\n2 1\n255\n\x00\xff";
        let pgm = Pgm::parse(bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(pgm.to_unit(), vec![0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_is_big_endian() {
        let pgm = Pgm::from_unit(2, 1, &[0.0, 1.0]);
        let bytes = pgm.to_bytes();
        assert!(bytes.ends_with(&[0, 0, 0xff, 0xff]));
        assert_eq!(Pgm::parse(&bytes, Path::new("x.pgm")).unwrap(), pgm);
    }

    #[test]
    fn rejects_other_formats_and_truncation() {
        assert!(Pgm::parse(b"P2\n1 1\n255\n0", Path::new("a")).is_err());
        assert!(Pgm::parse(b"P5\n2 2\n255\n\x00", Path::new("a")).is_err());
    }
}
