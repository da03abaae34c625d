//! Channel-major raster grids.
//!
//! A [`Raster`] stores `channels × height × width` values in row-major order
//! with the channel as the slowest axis, the same layout the model tensors use.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Meters for DSMs and height maps, intensities for imagery.
pub type RasterTile = Raster<f32>;
/// Per-pixel class codes.
pub type ClassMap = Raster<u8>;
pub type Mask = Raster<bool>;

impl<T> Raster<T> {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    /// Fails unless `other` has the same spatial extent.
    pub fn ensure_same_grid<U>(&self, other: &Raster<U>) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::DimensionMismatch {
                expected: (self.channels, self.height, self.width),
                actual: (other.channels, other.height, other.width),
            });
        }
        Ok(())
    }

    /// Fails unless `other` has the same channel count and spatial extent.
    pub fn ensure_same_dims<U>(&self, other: &Raster<U>) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }
}

impl<T: Copy> Raster<T> {
    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::InvalidValue(format!(
                "raster buffer of length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: T) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Raster<U> {
        Raster {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Copies the `height × width` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::InvalidValue(format!(
                "crop window ({y0},{x0})+{height}x{width} exceeds raster {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in y0..y0 + height {
                let start = self.index(c, y, x0);
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Ok(Self {
            channels: self.channels,
            height,
            width,
            data,
        })
    }
}

impl Raster<bool> {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Labels 4-connected components of the `true` pixels of a single-channel mask.
///
/// Returns the label raster (0 = unlabeled, components numbered from 1 in
/// raster-scan order of their first pixel) and the number of components.
pub fn label_components(mask: &Mask) -> (Raster<u32>, usize) {
    let (h, w) = (mask.height(), mask.width());
    let mut parent: Vec<u32> = vec![0];
    let mut provisional = Raster::filled(1, h, w, 0u32);

    fn find(parent: &mut [u32], mut i: u32) -> u32 {
        while parent[i as usize] != i {
            parent[i as usize] = parent[parent[i as usize] as usize];
            i = parent[i as usize];
        }
        i
    }

    for y in 0..h {
        for x in 0..w {
            if !mask.get(0, y, x) {
                continue;
            }
            let up = if y > 0 { provisional.get(0, y - 1, x) } else { 0 };
            let left = if x > 0 { provisional.get(0, y, x - 1) } else { 0 };
            let label = match (up, left) {
                (0, 0) => {
                    let next = parent.len() as u32;
                    parent.push(next);
                    next
                }
                (a, 0) | (0, a) => a,
                (a, b) => {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                    parent[hi as usize] = lo;
                    lo
                }
            };
            provisional.set(0, y, x, label);
        }
    }

    let mut compact = vec![0u32; parent.len()];
    let mut count = 0u32;
    let mut out = Raster::filled(1, h, w, 0u32);
    for y in 0..h {
        for x in 0..w {
            let p = provisional.get(0, y, x);
            if p == 0 {
                continue;
            }
            let root = find(&mut parent, p) as usize;
            if compact[root] == 0 {
                count += 1;
                compact[root] = count;
            }
            out.set(0, y, x, compact[root]);
        }
    }
    (out, count as usize)
}
