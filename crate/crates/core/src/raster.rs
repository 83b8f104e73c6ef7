//! RGB rasters and binary masks, with PNG I/O and the resampling used to fit
//! references into layout slots.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rope::TokenRect;

/// Pixel-space rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn new(y: usize, x: usize, h: usize, w: usize) -> Self {
        Self { y, x, h, w }
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    pub fn contains_rect(&self, o: &Rect) -> bool {
        o.y >= self.y
            && o.x >= self.x
            && o.y + o.h <= self.y + self.h
            && o.x + o.w <= self.x + self.w
    }

    pub fn intersects(&self, o: &Rect) -> bool {
        self.y < o.y + o.h && o.y < self.y + self.h && self.x < o.x + o.w && o.x < self.x + self.w
    }

    pub fn offset(&self, dy: usize, dx: usize) -> Rect {
        Rect {
            y: self.y + dy,
            x: self.x + dx,
            ..*self
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.y as f64 + self.h as f64 / 2.0,
            self.x as f64 + self.w as f64 / 2.0,
        )
    }

    pub fn is_aligned(&self, patch: usize) -> bool {
        [self.y, self.x, self.h, self.w]
            .iter()
            .all(|v| v % patch == 0)
    }

    pub fn to_tokens(&self, patch: usize) -> Result<TokenRect> {
        contract!(
            self.is_aligned(patch),
            "rectangle {:?} is not aligned to patch {}",
            self,
            patch
        );
        Ok(TokenRect::new(
            self.y / patch,
            self.x / patch,
            self.h / patch,
            self.w / patch,
        ))
    }
}

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut r = Self::new(height, width);
        for px in r.data.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        r
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        contract!(
            data.len() == height * width * 3,
            "raster data length {} for {}x{}",
            data.len(),
            height,
            width
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Self {
        let mut r = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                r.set(y, x, f(y, x));
            }
        }
        r
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, r: &Rect) -> Result<Raster> {
        contract!(
            r.y + r.h <= self.height && r.x + r.w <= self.width,
            "crop {:?} outside {}x{} raster",
            r,
            self.height,
            self.width
        );
        Ok(Raster::from_fn(r.h, r.w, |y, x| self.get(r.y + y, r.x + x)))
    }

    /// Copies `src` with its top-left corner at `(y, x)`.
    pub fn paste(&mut self, src: &Raster, y: usize, x: usize) -> Result<()> {
        contract!(
            y + src.height <= self.height && x + src.width <= self.width,
            "paste of {}x{} at ({}, {}) overflows {}x{}",
            src.height,
            src.width,
            y,
            x,
            self.height,
            self.width
        );
        for sy in 0..src.height {
            let d = ((y + sy) * self.width + x) * 3;
            let s = sy * src.width * 3;
            self.data[d..d + src.width * 3].copy_from_slice(&src.data[s..s + src.width * 3]);
        }
        Ok(())
    }

    /// Bilinear resampling with pixel-centre alignment. Same-size resizes copy.
    pub fn resize(&self, height: usize, width: usize) -> Raster {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Raster::from_fn(height, width, |y, x| {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let mut out = [0u8; 3];
            for (c, o) in out.iter_mut().enumerate() {
                let p = |yy: usize, xx: usize| self.get(yy, xx)[c] as f64;
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                *o = (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8;
            }
            out
        })
    }

    /// Values in `[0, 1]`, channel-interleaved.
    pub fn to_unit(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }

    pub fn from_unit(height: usize, width: usize, values: &[f32]) -> Result<Raster> {
        contract!(
            values.len() == height * width * 3,
            "unit buffer length mismatch"
        );
        let data = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Raster::from_raw(height, width, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img =
            image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer sized by construction");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Raster> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Raster::from_raw(h as usize, w as usize, img.into_raw())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let img =
            image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer sized by construction");
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// Sum of squared channel differences over pixels where `region` is set.
    pub fn squared_error_in(&self, other: &Raster, region: &Mask) -> f64 {
        let mut total = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                if region.get(y, x) {
                    let (a, b) = (self.get(y, x), other.get(y, x));
                    for c in 0..3 {
                        let d = a[c] as f64 - b[c] as f64;
                        total += d * d;
                    }
                }
            }
        }
        total
    }
}

/// Binary raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn from_rect(height: usize, width: usize, r: &Rect) -> Self {
        Self::from_fn(height, width, |y, x| r.contains(y, x))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn inverted(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn union(&self, o: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&o.bits)
                .map(|(a, b)| *a || *b)
                .collect(),
        }
    }

    /// Tight bounding box of the set pixels.
    pub fn bbox(&self) -> Option<Rect> {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y);
                    x1 = x1.max(x);
                }
            }
        }
        (y0 != usize::MAX).then(|| Rect::new(y0, x0, y1 - y0 + 1, x1 - x0 + 1))
    }

    pub fn crop(&self, r: &Rect) -> Result<Mask> {
        contract!(
            r.y + r.h <= self.height && r.x + r.w <= self.width,
            "mask crop {:?} out of bounds",
            r
        );
        Ok(Mask::from_fn(r.h, r.w, |y, x| self.get(r.y + y, r.x + x)))
    }

    /// Nearest-neighbour resampling with pixel-centre alignment.
    pub fn resize(&self, height: usize, width: usize) -> Mask {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        Mask::from_fn(height, width, |y, x| {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize)
                .min(self.height - 1);
            let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize)
                .min(self.width - 1);
            self.get(sy, sx)
        })
    }

    pub fn paste(&mut self, src: &Mask, y: usize, x: usize) -> Result<()> {
        contract!(
            y + src.height <= self.height && x + src.width <= self.width,
            "mask paste overflows"
        );
        for sy in 0..src.height {
            for sx in 0..src.width {
                self.set(y + sy, x + sx, src.get(sy, sx));
            }
        }
        Ok(())
    }

    pub fn rotate90(&self) -> Mask {
        // clockwise: (y, x) -> (x, h - 1 - y)
        let mut out = Mask::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, self.height - 1 - y, self.get(y, x));
            }
        }
        out
    }

    pub fn to_raster(&self) -> Raster {
        Raster::from_fn(self.height, self.width, |y, x| {
            if self.get(y, x) {
                [255; 3]
            } else {
                [0; 3]
            }
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_raster().save_png(path)
    }

    /// Loads a mask, treating any channel above mid-grey as set.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Mask> {
        let r = Raster::load_png(path)?;
        Ok(Mask::from_fn(r.height, r.width, |y, x| {
            r.get(y, x).iter().any(|&c| c >= 128)
        }))
    }
}

/// Fits `w x h` inside `slot_w x slot_h` preserving aspect; returns `(h, w)`.
pub fn fit_within(h: usize, w: usize, slot_h: usize, slot_w: usize) -> (usize, usize) {
    let s = (slot_h as f64 / h as f64).min(slot_w as f64 / w as f64);
    let nh = ((h as f64 * s).round() as usize).clamp(1, slot_h);
    let nw = ((w as f64 * s).round() as usize).clamp(1, slot_w);
    (nh, nw)
}
