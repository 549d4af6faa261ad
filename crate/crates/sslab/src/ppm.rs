//! Binary PPM (P6) and PGM (P5) images.

use std::fs;
use std::path::Path;

use sslab_core::data::Image;

use crate::error::{AppError, AppResult};

/// Encodes an image as P6 with maxval 255.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_ppm(path: &Path, img: &Image) -> AppResult<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| AppError::io(path, e))
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> AppResult<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| AppError::Format(format!("bad {what} in PPM header")))
    }
}

/// Decodes P6 (RGB) or P5 (gray, replicated to three channels) with maxval
/// up to 255.
pub fn decode_ppm(bytes: &[u8]) -> AppResult<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(AppError::Format("not a binary PPM/PGM file".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(AppError::Format("empty image".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(AppError::Format(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    let start = h.pos + 1;
    let need = width * height * channels;
    let payload = bytes
        .get(start..start + need)
        .ok_or_else(|| AppError::Format("truncated PPM payload".into()))?;
    let scale = |v: u8| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8;
    let data: Vec<u8> = if channels == 3 {
        payload.iter().map(|&v| scale(v)).collect()
    } else {
        payload.iter().flat_map(|&v| [scale(v); 3]).collect()
    };
    Ok(Image::from_rgb(width, height, data)?)
}

pub fn read_ppm(path: &Path) -> AppResult<Image> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| AppError::Format(format!("{}: {e}", path.display())))
}

/// Tiles equally sized images row-major into a grid with `cols` columns and
/// a one-pixel dark border.
pub fn grid(images: &[Image], cols: usize) -> AppResult<Image> {
    let first = images
        .first()
        .ok_or_else(|| AppError::Format("cannot tile an empty image list".into()))?;
    let (w, h) = (first.width, first.height);
    if images.iter().any(|i| i.width != w || i.height != h) {
        return Err(AppError::Format("grid images differ in size".into()));
    }
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let mut out = Image::new(cols * (w + 1) + 1, rows * (h + 1) + 1);
    for (k, img) in images.iter().enumerate() {
        let (ox, oy) = (1 + (k % cols) * (w + 1), 1 + (k / cols) * (h + 1));
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(ox + x, oy + y, img.pixel(x, y));
            }
        }
    }
    Ok(out)
}
