//! RGB image buffers plus resize, crop and PNG I/O.

use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::tensor;

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageArray {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Half-open pixel box `(x0, y0, x1, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, other: &PixelBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

impl ImageArray {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(height > 0 && width > 0, InvalidArgument, "image must be non-empty");
        ensure!(
            data.len() == height * width * 3,
            Contract,
            "RGB image {height}x{width} needs {} values, got {}",
            height * width * 3,
            data.len()
        );
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(height, width, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, h, w]` copy in `f64`.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for (p, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * n + p] = px[c] as f64;
            }
        }
        out
    }

    pub fn resize(&self, height: usize, width: usize) -> ImageArray {
        if (height, width) == self.size() {
            return self.clone();
        }
        let planar = self.to_planar();
        let resized = tensor::resize_bilinear(&planar, 3, self.size(), (height, width));
        let n = height * width;
        let mut data = vec![0.0f32; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                data[p * 3 + c] = resized[c * n + p] as f32;
            }
        }
        ImageArray { height, width, data }
    }

    pub fn crop(&self, b: PixelBox) -> Result<ImageArray> {
        ensure!(
            b.x1 <= self.width && b.y1 <= self.height && b.area() > 0,
            InvalidArgument,
            "crop {b:?} not inside a {}x{} image",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(b.area() * 3);
        for y in b.y0..b.y1 {
            let row = (y * self.width + b.x0) * 3;
            data.extend_from_slice(&self.data[row..row + b.width() * 3]);
        }
        Ok(ImageArray {
            height: b.height(),
            width: b.width(),
            data,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(h as usize, w as usize, img.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
        buf.save(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Nearest-neighbour resize of a row-major boolean mask.
pub fn resize_mask_nearest(mask: &[bool], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<bool> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = ((y as f64 + 0.5) * h as f64 / oh as f64).floor().min((h - 1) as f64) as usize;
        for x in 0..ow {
            let sx = ((x as f64 + 0.5) * w as f64 / ow as f64).floor().min((w - 1) as f64) as usize;
            out.push(mask[sy * w + sx]);
        }
    }
    out
}

/// Area-average a mask to a smaller grid, then threshold at 0.5.
pub fn downsample_mask_area(mask: &[bool], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<bool> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (ya, yb) = (y as f64 * h as f64 / oh as f64, (y + 1) as f64 * h as f64 / oh as f64);
        for x in 0..ow {
            let (xa, xb) = (x as f64 * w as f64 / ow as f64, (x + 1) as f64 * w as f64 / ow as f64);
            let mut covered = 0.0;
            let mut total = 0.0;
            for sy in ya.floor() as usize..(yb.ceil() as usize).min(h) {
                let fy = (yb.min(sy as f64 + 1.0) - ya.max(sy as f64)).max(0.0);
                for sx in xa.floor() as usize..(xb.ceil() as usize).min(w) {
                    let fx = (xb.min(sx as f64 + 1.0) - xa.max(sx as f64)).max(0.0);
                    let a = fx * fy;
                    total += a;
                    if mask[sy * w + sx] {
                        covered += a;
                    }
                }
            }
            out.push(total > 0.0 && covered / total >= 0.5);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_full_image_is_identity() {
        let mut img = ImageArray::filled(4, 5, [0.2, 0.4, 0.6]);
        img.set_pixel(1, 2, [1.0, 0.0, 0.0]);
        assert_eq!(img.crop(PixelBox::new(0, 0, 5, 4)).unwrap(), img);
        let c = img.crop(PixelBox::new(2, 1, 3, 2)).unwrap();
        assert_eq!(c.pixel(0, 0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn crop_rejects_out_of_bounds() {
        let img = ImageArray::filled(4, 4, [0.0; 3]);
        assert!(img.crop(PixelBox::new(0, 0, 5, 4)).is_err());
        assert!(img.crop(PixelBox::new(2, 2, 2, 3)).is_err());
    }

    #[test]
    fn area_downsample_identity_and_halving() {
        let m: Vec<bool> = (0..16).map(|i| i % 5 == 0).collect();
        assert_eq!(downsample_mask_area(&m, (4, 4), (4, 4)), m);
        let block = vec![true, true, false, false, true, true, false, false, false, false, false, false, false, false, false, true];
        assert_eq!(downsample_mask_area(&block, (4, 4), (2, 2)), vec![true, false, false, false]);
    }

    #[test]
    fn nearest_upsample_replicates() {
        let m = vec![true, false, false, true];
        let up = resize_mask_nearest(&m, (2, 2), (4, 4));
        assert_eq!(up[0..4], [true, true, false, false]);
        assert_eq!(up[12..16], [false, false, true, true]);
    }
}
