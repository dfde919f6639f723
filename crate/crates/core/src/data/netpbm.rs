//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// 8-bit interleaved image with 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::input(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(Error::input(format!(
                "{width}×{height}×{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
        .expect("valid dimensions")
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: u8) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    /// Gray images are replicated to three channels.
    pub fn to_rgb(&self) -> Image8 {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image8 {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Planar `channels × height × width` tensor with values `p / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; c * h * w];
        for (i, px) in self.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * h * w + i] = v as f64 / 255.0;
            }
        }
        Tensor::new(vec![c, h, w], out).expect("shape matches")
    }

    /// Inverse of [`Image8::to_tensor`]: clamps to `[0, 1]` and rounds half up.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [c, h, w] => (c, h, w),
            [h, w] => (1, h, w),
            _ => {
                return Err(Error::shape(format!(
                    "cannot render tensor {:?} as an image",
                    t.shape()
                )))
            }
        };
        let mut data = vec![0u8; c * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                let v = t.data()[ch * h * w + i].clamp(0.0, 1.0);
                data[i * c + ch] = (v * 255.0 + 0.5).floor() as u8;
            }
        }
        Image8::new(w, h, c, data)
    }

    /// Nearest-neighbor resize.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Image8 {
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                let base = (sy * self.width + sx) * c;
                data.extend_from_slice(&self.data[base..base + c]);
            }
        }
        Image8 {
            width,
            height,
            channels: c,
            data,
        }
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| parse_err(start, format!("{what} out of range")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image8> {
    if bytes.len() < 2 {
        return Err(parse_err(0, "missing magic number"));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(parse_err(
                0,
                format!("unsupported format {}", String::from_utf8_lossy(other)),
            ))
        }
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    h.skip_space_and_comments();
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(maxval_at, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(2, "zero image dimension"));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(parse_err(h.pos, "expected whitespace after maxval")),
    }
    let need = width * height * channels;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!(
                "truncated payload: expected {need} bytes, found {}",
                payload.len()
            ),
        ));
    }
    Image8::new(width, height, channels, payload[..need].to_vec())
}

pub fn encode_pnm(img: &Image8) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image8> {
    let path = path.as_ref();
    decode_pnm(&fs::read(path).map_err(Error::at_path(path))?)
}

pub fn write_pnm(img: &Image8, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(img)).map_err(Error::at_path(path))
}

/// Reads a PPM/PGM as a `3 × h × w` tensor in `[0, 1]`, optionally resized
/// (nearest neighbor) to `(height, width)`.
pub fn read_image(path: impl AsRef<Path>, resize: Option<(usize, usize)>) -> Result<Tensor> {
    let mut img = read_pnm(path)?.to_rgb();
    if let Some((h, w)) = resize {
        img = img.resize_nearest(h, w);
    }
    Ok(img.to_tensor())
}

pub fn write_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_pnm(&Image8::from_tensor(t)?, path)
}
