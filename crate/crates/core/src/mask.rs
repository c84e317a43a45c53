//! Binary and soft masks over a pixel grid.
//!
//! Masks are stored row-major. Foreground connectivity is 8-neighbour and
//! background connectivity is 4-neighbour, so a closed 8-connected ring
//! always encloses its interior.

use std::collections::VecDeque;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned pixel box: `x..x + w` by `y..y + h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        x1.saturating_sub(x0) * y1.saturating_sub(y0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Grows the box by `margin` on every side, clipped to `width × height`.
    pub fn expand(&self, margin: usize, width: usize, height: usize) -> BBox {
        let x = self.x.saturating_sub(margin);
        let y = self.y.saturating_sub(margin);
        let x1 = (self.x + self.w + margin).min(width);
        let y1 = (self.y + self.h + margin).min(height);
        BBox {
            x,
            y,
            w: x1 - x,
            h: y1 - y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Builds a mask from row-major values; any nonzero value is foreground.
    pub fn from_vec(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::contract(format!(
                "mask buffer has {} values, expected {}x{}",
                values.len(),
                width,
                height
            )));
        }
        let data = values.into_iter().map(|v| (v != 0) as u8).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Iterator over foreground pixel coordinates.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    /// Tight bounding box, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (x, y) in self.pixels() {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        (x0 != usize::MAX).then(|| BBox {
            x: x0,
            y: y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
        })
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::contract(format!(
                "mask dimensions differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a != 0 && **b != 0)
            .count())
    }

    /// Pixel-level intersection over union. Two empty masks have IoU 0.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        self.check_dims(other)?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.data.iter().zip(&other.data) {
            let (a, b) = (*a != 0, *b != 0);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        })
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a | b)
            .collect();
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            data,
        })
    }

    pub fn invert(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }

    /// Whether any foreground pixel falls inside `bbox`.
    pub fn any_in(&self, bbox: &BBox) -> bool {
        let x1 = (bbox.x + bbox.w).min(self.width);
        let y1 = (bbox.y + bbox.h).min(self.height);
        (bbox.y..y1).any(|y| (bbox.x..x1).any(|x| self.get(x, y)))
    }

    /// Morphological dilation with a Euclidean disk of `radius` pixels.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
            .collect();
        let mut out = BinaryMask::new(self.width, self.height);
        for (x, y) in self.pixels() {
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                    out.set(nx as usize, ny as usize, true);
                }
            }
        }
        out
    }

    /// Background pixels reachable from the image border through
    /// 4-connected background.
    pub fn outside_region(&self) -> BinaryMask {
        let (w, h) = self.dims();
        let mut outside = BinaryMask::new(w, h);
        let mut queue = VecDeque::new();
        let seed = |x: usize, y: usize, outside: &mut BinaryMask, q: &mut VecDeque<(usize, usize)>| {
            if !self.get(x, y) && !outside.get(x, y) {
                outside.set(x, y, true);
                q.push_back((x, y));
            }
        };
        for x in 0..w {
            seed(x, 0, &mut outside, &mut queue);
            seed(x, h - 1, &mut outside, &mut queue);
        }
        for y in 0..h {
            seed(0, y, &mut outside, &mut queue);
            seed(w - 1, y, &mut outside, &mut queue);
        }
        while let Some((x, y)) = queue.pop_front() {
            for (nx, ny) in neighbours4(x, y, w, h) {
                seed(nx, ny, &mut outside, &mut queue);
            }
        }
        outside
    }

    /// Areas of interior holes: background components not connected to
    /// the border. Sorted descending.
    pub fn hole_areas(&self) -> Vec<usize> {
        if self.width == 0 || self.height == 0 {
            return Vec::new();
        }
        let outside = self.outside_region();
        let holes = BinaryMask::from_fn(self.width, self.height, |x, y| {
            !self.get(x, y) && !outside.get(x, y)
        });
        let mut areas: Vec<usize> = holes
            .components(false)
            .into_iter()
            .map(|c| c.len())
            .collect();
        areas.sort_unstable_by(|a, b| b.cmp(a));
        areas
    }

    /// Connected foreground components (8-connected when `eight` is set,
    /// otherwise 4-connected), each as a pixel list.
    pub fn components(&self, eight: bool) -> Vec<Vec<(usize, usize)>> {
        let (w, h) = self.dims();
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        for start in 0..w * h {
            if self.data[start] == 0 || seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(start % w, start / w)]);
            while let Some((x, y)) = queue.pop_front() {
                comp.push((x, y));
                let next: Vec<(usize, usize)> = if eight {
                    neighbours8(x, y, w, h).collect()
                } else {
                    neighbours4(x, y, w, h).collect()
                };
                for (nx, ny) in next {
                    let i = ny * w + nx;
                    if self.data[i] != 0 && !seen[i] {
                        seen[i] = true;
                        queue.push_back((nx, ny));
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    /// Keeps only the largest 8-connected component. Ties go to the
    /// component found first in raster order.
    pub fn largest_component(&self) -> BinaryMask {
        let comps = self.components(true);
        let mut out = BinaryMask::new(self.width, self.height);
        if let Some(best) = comps.iter().reduce(|a, b| if b.len() > a.len() { b } else { a }) {
            for &(x, y) in best {
                out.set(x, y, true);
            }
        }
        out
    }

    pub fn to_soft(&self) -> SoftMask {
        SoftMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Single-channel image with values {0, 255}.
    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    /// Pixels at or above 128 are foreground.
    pub fn from_image(img: &GrayImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(w, h, |x, y| img.get_pixel(x as u32, y as u32)[0] >= 128)
    }
}

fn neighbours4(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let (x, y) = (x as isize, y as isize);
    [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
        .into_iter()
        .filter(move |&(a, b)| a >= 0 && b >= 0 && (a as usize) < w && (b as usize) < h)
        .map(|(a, b)| (a as usize, b as usize))
}

fn neighbours8(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let (x, y) = (x as isize, y as isize);
    (-1..=1)
        .flat_map(move |dy| (-1..=1).map(move |dx| (x + dx, y + dy)))
        .filter(move |&(a, b)| (a, b) != (x, y))
        .filter(move |&(a, b)| a >= 0 && b >= 0 && (a as usize) < w && (b as usize) < h)
        .map(|(a, b)| (a as usize, b as usize))
}

/// Real-valued mask, typically in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl SoftMask {
    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::contract(format!(
                "soft mask buffer has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Bilinear resampling with half-pixel centres (no corner alignment).
    pub fn resize_bilinear(&self, width: usize, height: usize) -> SoftMask {
        SoftMask {
            width,
            height,
            data: resize_bilinear(&self.data, self.width, self.height, width, height),
        }
    }

    /// Pixelwise `value >= threshold`.
    pub fn threshold(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| (v >= threshold) as u8).collect(),
        }
    }

    /// Grayscale rendering, `0.0 → 0` and `1.0 → 255`.
    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(x as usize, y as usize).clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        })
    }
}

/// Bilinear interpolation of a row-major grid, sampling at
/// `(i + 0.5) * scale - 0.5` with edge clamping.
pub fn resize_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    if sw == dw && sh == dh {
        return src.to_vec();
    }
    let axis = |src_len: usize, dst_len: usize| -> Vec<(usize, usize, f32)> {
        let scale = src_len as f64 / dst_len as f64;
        (0..dst_len)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(src_len - 1);
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = axis(sw, dw);
    let ys = axis(sh, dh);
    let mut out = Vec::with_capacity(dw * dh);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
