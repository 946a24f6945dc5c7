//! Distance-surface event frames.
//!
//! Events of one window are accumulated into an occupancy mask, cleaned by a
//! neighbor-count filter and a 3x3 closing, and every pixel is then given the
//! exact Euclidean distance to the nearest occupied pixel. The distance is
//! mapped to intensity `max(0, 1 - d / d_max)`, so pixels on events are 1.0
//! and the surface falls off linearly around them.

use crate::error::{Error, Result};
use crate::event_io::EventWindow;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyMask {
    pub width: usize,
    pub height: usize,
    cells: Vec<bool>,
}

impl OccupancyMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            cells: vec![false; width * height],
        }
    }

    pub fn from_cells(width: usize, height: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != width * height {
            return Err(Error::shape(
                "occupancy mask",
                format!("{} cells for {width}x{height}", cells.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            cells,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.cells[y * self.width + x] = value;
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn is_subset_of(&self, other: &OccupancyMask) -> bool {
        self.cells.iter().zip(&other.cells).all(|(a, b)| !a || *b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventFrame {
    pub width: usize,
    pub height: usize,
    /// Row-major `height x width` intensities in `[0, 1]`.
    pub intensity: Vec<f64>,
    pub window_id: u64,
}

/// Marks every pixel hit by at least one event, regardless of polarity.
pub fn accumulate(window: &EventWindow) -> OccupancyMask {
    let mut mask = OccupancyMask::new(window.sensor.width as usize, window.sensor.height as usize);
    for e in &window.events {
        mask.set(e.x as usize, e.y as usize, true);
    }
    mask
}

/// Keeps an occupied cell iff at least `min_neighbors` other occupied cells
/// lie within Chebyshev distance `radius`.
pub fn denoise(mask: &OccupancyMask, radius: usize, min_neighbors: usize) -> Result<OccupancyMask> {
    if radius == 0 {
        return Err(Error::invalid("denoise radius must be at least 1"));
    }
    let (w, h) = (mask.width, mask.height);
    // summed-area table with a zero border row/column
    let mut sat = vec![0usize; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0;
        for x in 0..w {
            row += mask.get(x, y) as usize;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = OccupancyMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let (x0, y0) = (x.saturating_sub(radius), y.saturating_sub(radius));
            let (x1, y1) = ((x + radius + 1).min(w), (y + radius + 1).min(h));
            let total = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
                - sat[y0 * (w + 1) + x1]
                - sat[y1 * (w + 1) + x0];
            if total - 1 >= min_neighbors {
                out.set(x, y, true);
            }
        }
    }
    Ok(out)
}

fn dilate3(mask: &OccupancyMask) -> OccupancyMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = OccupancyMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    out.set(nx, ny, true);
                }
            }
        }
    }
    out
}

/// Out-of-bounds neighbors count as empty.
fn erode3(mask: &OccupancyMask) -> OccupancyMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = OccupancyMask::new(w, h);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let all = (y - 1..y + 2).all(|ny| (x - 1..x + 2).all(|nx| mask.get(nx, ny)));
            out.set(x, y, all);
        }
    }
    out
}

/// Morphological closing with a 3x3 structuring element, evaluated as if the
/// grid extended without bound: the dilation may spill one pixel past the
/// edge, so both steps run on a grid padded by one pixel.
pub fn fill(mask: &OccupancyMask) -> OccupancyMask {
    let (w, h) = (mask.width, mask.height);
    let mut padded = OccupancyMask::new(w + 2, h + 2);
    for y in 0..h {
        for x in 0..w {
            padded.set(x + 1, y + 1, mask.get(x, y));
        }
    }
    let closed = erode3(&dilate3(&padded));
    let mut out = OccupancyMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, closed.get(x + 1, y + 1));
        }
    }
    out
}

/// Squared distances of the lower envelope of parabolas rooted at `f`.
fn envelope_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let key = |q: usize| f[q] + (q * q) as f64;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = (key(q) - key(p)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] {
            // k == 0 and the new parabola dominates from -inf
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *slot = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from each pixel center to the nearest occupied
/// cell, via two separable lower-envelope passes. An empty mask yields
/// `empty_value` everywhere.
pub fn distance_surface(mask: &OccupancyMask, empty_value: f64) -> Vec<f64> {
    let (w, h) = (mask.width, mask.height);
    if mask.count() == 0 {
        return vec![empty_value; w * h];
    }
    // finite stand-in for infinity; sums with squared pixel offsets stay exact
    let far = 1e12;
    let n = w.max(h);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0f64; n + 1]);
    let mut column = vec![0.0; h];
    let mut column_out = vec![0.0; h];
    let mut sq = vec![0.0; w * h];
    for x in 0..w {
        for y in 0..h {
            column[y] = if mask.get(x, y) { 0.0 } else { far };
        }
        envelope_1d(&column, &mut column_out, &mut v, &mut z);
        for y in 0..h {
            sq[y * w + x] = column_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        envelope_1d(&sq[y * w..(y + 1) * w], &mut row_out, &mut v, &mut z);
        sq[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    sq.into_iter().map(f64::sqrt).collect()
}

pub fn to_intensity(distance: &[f64], d_max: f64) -> Result<Vec<f64>> {
    if !(d_max > 0.0) {
        return Err(Error::invalid(format!("d_max {d_max} must be positive")));
    }
    Ok(distance
        .iter()
        .map(|d| (1.0 - d / d_max).max(0.0))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameParams {
    pub d_max: f64,
    pub denoise_radius: usize,
    pub min_neighbors: usize,
}

impl Default for FrameParams {
    fn default() -> Self {
        Self {
            d_max: 12.0,
            denoise_radius: 1,
            min_neighbors: 1,
        }
    }
}

/// accumulate -> denoise -> fill -> distance surface -> intensity
pub fn render_window(
    window: &EventWindow,
    params: &FrameParams,
    window_id: u64,
) -> Result<EventFrame> {
    let mask = accumulate(window);
    let mask = fill(&denoise(
        &mask,
        params.denoise_radius,
        params.min_neighbors,
    )?);
    let dist = distance_surface(&mask, params.d_max);
    Ok(EventFrame {
        width: mask.width,
        height: mask.height,
        intensity: to_intensity(&dist, params.d_max)?,
        window_id,
    })
}
