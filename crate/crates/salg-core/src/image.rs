//! Zero-dependency binary PPM (P6) reading and PGM (P5) writing.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Result, SalgError};
use crate::tensor::Tensor;

/// An 8-bit RGB image with pixels normalized to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageFile {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` floats, row-major, channel-minor.
    pub pixels: Vec<f64>,
}

impl ImageFile {
    /// The image as an `[H, W, 3]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.pixels.clone())
            .expect("pixel buffer matches dims")
    }

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(SalgError::ImageFormat(format!(
                "pixel payload {} bytes, expected {}",
                rgb.len(),
                width * height * 3
            )));
        }
        Ok(ImageFile {
            width,
            height,
            pixels: rgb.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }
}

fn read_token(reader: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        match reader.read_exact(&mut byte) {
            Ok(()) => {}
            Err(e) => {
                if tok.is_empty() {
                    return Err(SalgError::ImageFormat(format!("truncated header: {e}")));
                }
                return Ok(tok);
            }
        }
        let ch = byte[0];
        if in_comment {
            if ch == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match ch {
            b'#' => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            _ => tok.push(ch as char),
        }
    }
}

fn parse_dim(tok: &str, what: &str) -> Result<usize> {
    let v: usize = tok
        .parse()
        .map_err(|_| SalgError::ImageFormat(format!("bad {what}: {tok:?}")))?;
    if v == 0 {
        return Err(SalgError::ImageFormat(format!("{what} must be positive")));
    }
    Ok(v)
}

/// Reads a binary PPM (magic `P6`, maxval 255).
pub fn read_ppm(mut reader: impl BufRead) -> Result<ImageFile> {
    let magic = read_token(&mut reader)?;
    if magic != "P6" {
        return Err(SalgError::ImageFormat(format!("expected P6 magic, got {magic:?}")));
    }
    let width = parse_dim(&read_token(&mut reader)?, "width")?;
    let height = parse_dim(&read_token(&mut reader)?, "height")?;
    let maxval = parse_dim(&read_token(&mut reader)?, "maxval")?;
    if maxval != 255 {
        return Err(SalgError::ImageFormat(format!("only maxval 255 supported, got {maxval}")));
    }
    let mut rgb = vec![0u8; width * height * 3];
    reader
        .read_exact(&mut rgb)
        .map_err(|e| SalgError::ImageFormat(format!("truncated pixel data: {e}")))?;
    ImageFile::from_rgb8(width, height, &rgb)
}

pub fn read_ppm_file(path: &Path) -> Result<ImageFile> {
    let file = std::fs::File::open(path)?;
    read_ppm(std::io::BufReader::new(file))
}

/// Encodes a binary PPM from `[0,1]` floats (clamped).
pub fn ppm_bytes(width: usize, height: usize, pixels: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + pixels.len());
    write!(out, "P6\n{width} {height}\n255\n").expect("vec write");
    out.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_ppm_file(path: &Path, img: &ImageFile) -> Result<()> {
    std::fs::write(path, ppm_bytes(img.width, img.height, &img.pixels))?;
    Ok(())
}

/// Encodes a binary PGM. With `maxval <= 255` samples are single bytes;
/// otherwise two bytes each, most significant first.
pub fn pgm_bytes(width: usize, height: usize, maxval: u16, samples: &[u16]) -> Vec<u8> {
    debug_assert_eq!(samples.len(), width * height);
    debug_assert!(samples.iter().all(|&s| s <= maxval));
    let mut out = Vec::with_capacity(20 + samples.len() * 2);
    write!(out, "P5\n{width} {height}\n{maxval}\n").expect("vec write");
    if maxval <= 255 {
        out.extend(samples.iter().map(|&s| s as u8));
    } else {
        for &s in samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    out
}

pub fn write_pgm_file(path: &Path, width: usize, height: usize, maxval: u16, samples: &[u16]) -> Result<()> {
    std::fs::write(path, pgm_bytes(width, height, maxval, samples))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = ImageFile::from_rgb8(2, 3, &[0, 128, 255, 1, 2, 3, 10, 20, 30, 4, 5, 6, 7, 8, 9, 250, 251, 252]).unwrap();
        let bytes = ppm_bytes(img.width, img.height, &img.pixels);
        let back = read_ppm(std::io::Cursor::new(bytes)).unwrap();
        assert_eq!(back.width, 2);
        assert_eq!(back.height, 3);
        assert_eq!(back.pixels, img.pixels);
    }

    #[test]
    fn ppm_header_comments_and_whitespace() {
        let mut bytes = b"P6 # comment\n# another\n 2\t1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = read_ppm(std::io::Cursor::new(bytes)).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
    }

    #[test]
    fn ppm_rejects_wrong_magic_and_truncation() {
        assert!(read_ppm(std::io::Cursor::new(b"P5\n2 2\n255\n".to_vec())).is_err());
        let bytes = b"P6\n2 2\n255\n\x01\x02".to_vec();
        assert!(read_ppm(std::io::Cursor::new(bytes)).is_err());
    }

    #[test]
    fn pgm_16bit_payload_is_big_endian() {
        let bytes = pgm_bytes(1, 1, 300, &[258]);
        let header_end = bytes.len() - 2;
        assert_eq!(&bytes[header_end..], &[1, 2]);
    }

    #[test]
    fn normalization_divides_by_255() {
        let img = ImageFile::from_rgb8(1, 1, &[255, 0, 51]).unwrap();
        assert_eq!(img.pixels, vec![1.0, 0.0, 0.2]);
    }
}
