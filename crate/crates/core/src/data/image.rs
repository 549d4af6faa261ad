use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(shape_err("image", &[height, width, 3], &[data.len()]));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, H, W]` values mapped from `[0, 255]` to `[-1, 1]`.
    pub fn write_chw(&self, out: &mut [f32]) {
        let hw = self.width * self.height;
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c] as f32 / 127.5 - 1.0;
            }
        }
    }

    /// Inverse of [`Image::write_chw`], clamping and rounding.
    pub fn from_chw(width: usize, height: usize, chw: &[f32]) -> Result<Self> {
        let hw = width * height;
        if chw.len() != 3 * hw {
            return Err(shape_err("image", &[3, height, width], &[chw.len()]));
        }
        let mut img = Self::new(width, height);
        for p in 0..hw {
            for c in 0..3 {
                let v = (chw[c * hw + p].clamp(-1.0, 1.0) + 1.0) * 127.5;
                img.data[p * 3 + c] = libm::roundf(v) as u8;
            }
        }
        Ok(img)
    }

    /// Stacks same-sized images into `[N, 3, H, W]`.
    pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
        let (w, h) = images.first().map_or((0, 0), |i| (i.width, i.height));
        let per = 3 * w * h;
        let mut data = vec![0.0f32; per * images.len()];
        for (i, img) in images.iter().enumerate() {
            if img.width != w || img.height != h {
                return Err(shape_err("batch_tensor", &[img.height, img.width], &[h, w]));
            }
            img.write_chw(&mut data[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![images.len(), 3, h, w], data)
    }

    /// Splits a `[N, 3, H, W]` tensor back into images.
    pub fn from_batch_tensor(t: &Tensor) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(shape_err("from_batch_tensor", s, &[0, 3, 0, 0]));
        }
        let per = 3 * s[2] * s[3];
        t.data()
            .chunks_exact(per.max(1))
            .take(s[0])
            .map(|c| Image::from_chw(s[3], s[2], c))
            .collect()
    }
}

/// Center-crops to a square and resizes with nearest-neighbour sampling.
pub fn center_crop_resize(img: &Image, size: usize) -> Result<Image> {
    if img.width == 0 || img.height == 0 || size == 0 {
        return Err(Error::Invalid("empty image".into()));
    }
    let side = img.width.min(img.height);
    let x0 = (img.width - side) / 2;
    let y0 = (img.height - side) / 2;
    let mut out = Image::new(size, size);
    for y in 0..size {
        let sy = y0 + y * side / size;
        for x in 0..size {
            let sx = x0 + x * side / size;
            out.set_pixel(x, y, img.pixel(sx, sy));
        }
    }
    Ok(out)
}
