//! Run-length coded binary masks.
//!
//! Runs alternate between 0-pixels and 1-pixels in row-major scan order and
//! always start with a (possibly empty) run of zeros, so an all-ones mask is
//! `[0, w*h]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoded binary pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<bool>,
}

impl MaskGrid {
    pub fn new(width: usize, height: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "grid {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![false; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.pixels[y * self.width + x] = v;
    }

    /// Fills the half-open rectangle `[x0, x1) × [y0, y1)`, clipped to the grid.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.set(x, y, true);
            }
        }
    }
}

/// A run-length coded `height × width` binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawMask", into = "RawMask")]
pub struct BinaryMask {
    width: usize,
    height: usize,
    runs: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct RawMask {
    w: usize,
    h: usize,
    runs: Vec<u32>,
}

impl TryFrom<RawMask> for BinaryMask {
    type Error = Error;

    fn try_from(raw: RawMask) -> Result<Self> {
        BinaryMask::from_runs(raw.w, raw.h, raw.runs)
    }
}

impl From<BinaryMask> for RawMask {
    fn from(m: BinaryMask) -> Self {
        RawMask { w: m.width, h: m.height, runs: m.runs }
    }
}

impl BinaryMask {
    /// Validates a run list: lengths must sum to `width * height` and only the
    /// leading zero-run may be empty.
    pub fn from_runs(width: usize, height: usize, runs: Vec<u32>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::CorruptMask("run list is empty".into()));
        }
        if let Some(i) = runs.iter().skip(1).position(|&r| r == 0) {
            return Err(Error::CorruptMask(format!("zero-length run at index {}", i + 1)));
        }
        let total: u64 = runs.iter().map(|&r| u64::from(r)).sum();
        if total != (width * height) as u64 {
            return Err(Error::CorruptMask(format!("runs cover {total} pixels, mask is {width}x{height}")));
        }
        Ok(Self { width, height, runs })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, runs: vec![(width * height) as u32] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as usize).sum()
    }

    /// Fraction of set pixels; zero for a zero-sized mask.
    pub fn coverage(&self) -> f64 {
        match self.pixel_count() {
            0 => 0.0,
            n => self.area() as f64 / n as f64,
        }
    }

    /// Half-open `[start, end)` pixel intervals of set pixels, in scan order.
    pub fn foreground_intervals(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.runs.len() / 2);
        let mut pos = 0usize;
        for (i, &r) in self.runs.iter().enumerate() {
            let end = pos + r as usize;
            if i % 2 == 1 {
                out.push((pos, end));
            }
            pos = end;
        }
        out
    }

    fn from_intervals(width: usize, height: usize, intervals: &[(usize, usize)]) -> Self {
        let mut runs = Vec::with_capacity(intervals.len() * 2 + 1);
        let mut pos = 0usize;
        for &(s, e) in intervals {
            runs.push((s - pos) as u32);
            runs.push((e - s) as u32);
            pos = e;
        }
        let tail = width * height - pos;
        if tail > 0 || runs.is_empty() {
            runs.push(tail as u32);
        }
        Self { width, height, runs }
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }
}

pub fn rle_encode(grid: &MaskGrid) -> BinaryMask {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &px in &grid.pixels {
        if px == current {
            len += 1;
        } else {
            runs.push(len);
            current = px;
            len = 1;
        }
    }
    runs.push(len);
    BinaryMask { width: grid.width, height: grid.height, runs }
}

pub fn rle_decode(mask: &BinaryMask) -> MaskGrid {
    let mut pixels = Vec::with_capacity(mask.pixel_count());
    for (i, &r) in mask.runs.iter().enumerate() {
        pixels.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
    }
    MaskGrid { width: mask.width, height: mask.height, pixels }
}

/// Pixel-wise OR, computed directly on the run structure.
pub fn union_mask(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let first = masks.first().ok_or_else(|| Error::invalid("union of zero masks"))?;
    if let Some(bad) = masks.iter().find(|m| !m.same_dims(first)) {
        return Err(Error::invalid(format!(
            "mask dimension mismatch: {}x{} vs {}x{}",
            first.width, first.height, bad.width, bad.height
        )));
    }
    let mut intervals: Vec<(usize, usize)> = masks.iter().flat_map(BinaryMask::foreground_intervals).collect();
    intervals.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(intervals.len());
    for (s, e) in intervals {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    Ok(BinaryMask::from_intervals(first.width, first.height, &merged))
}
