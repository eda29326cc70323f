//! 8-bit grayscale PGM (P5) I/O and nearest-neighbour resizing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Quantizes a `[H×W]` tensor with values in `[0,1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "raster must be [H×W], got {:?}",
                t.shape()
            )));
        }
        Ok(GrayImage {
            height: t.shape()[0],
            width: t.shape()[1],
            pixels: t.data().iter().map(|&v| quantize(v)).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        Tensor::from_parts(vec![self.height, self.width], data)
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Parse {
            line: 1,
            message: format!("PGM: {m}"),
        };
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("only binary P5 rasters are supported"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("invalid header number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
            return Err(bad("unsupported dimensions or maxval"));
        }
        // Exactly one whitespace byte separates the header from the data.
        pos += 1;
        let data = bytes.get(pos..pos + width * height).ok_or_else(|| bad("truncated pixel data"))?;
        let pixels = if maxval == 255 {
            data.to_vec()
        } else {
            data.iter()
                .map(|&p| ((usize::from(p) * 255 + maxval / 2) / maxval) as u8)
                .collect()
        };
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_pgm(&bytes).map_err(|e| match e {
            Error::Parse { message, .. } => Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::InvalidData, message),
            ),
            other => other,
        })
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Nearest-neighbour resize using source index `floor(i·src/dst)`.
pub fn resize_nearest(img: &Tensor, side: usize) -> Result<Tensor> {
    let shape = img.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("raster must be [H×W], got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    if h == side && w == side {
        return Ok(img.clone());
    }
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        let si = i * h / side;
        for j in 0..side {
            let sj = j * w / side;
            out.push(img.data()[si * w + sj]);
        }
    }
    Ok(Tensor::from_parts(vec![side, side], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 10, 255, 128, 7, 99],
        };
        assert_eq!(GrayImage::decode_pgm(&img.encode_pgm()).unwrap(), img);
        let with_comment = b"P5\n# made by hand\n3 2\n255\n\x00\x0a\xff\x80\x07\x63";
        assert_eq!(GrayImage::decode_pgm(with_comment).unwrap(), img);
        assert!(GrayImage::decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(GrayImage::decode_pgm(b"P5\n4 4\n255\n\x00").is_err());
    }

    #[test]
    fn white_image_is_all_ones() {
        let img = GrayImage {
            width: 4,
            height: 4,
            pixels: vec![255; 16],
        };
        assert!(img.to_tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn nearest_neighbour_index_map() {
        let src: Vec<f64> = (0..64 * 64).map(|i| i as f64).collect();
        let img = Tensor::new(vec![64, 64], src).unwrap();
        let out = resize_nearest(&img, 32).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                let (si, sj) = (i * 64 / 32, j * 64 / 32);
                assert_eq!(out.get2(i, j), (si * 64 + sj) as f64);
            }
        }
        let up = resize_nearest(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), 4).unwrap();
        assert_eq!(up.row(0), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(up.row(3), &[3.0, 3.0, 4.0, 4.0]);
    }
}
