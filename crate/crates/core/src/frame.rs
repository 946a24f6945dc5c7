//! Dense channel-major frames and their on-disk forms.
//!
//! The pipeline reads and writes frames as raw little-endian `f64` files
//! (`.frm`), which round-trip bit-exactly. Portable any-map (`P5`/`P6`)
//! previews are written next to them for inspection, and PNG/PNM inputs are
//! accepted when loading images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::event_frame::EventFrame;
use crate::tensor::Tensor;

const RAW_MAGIC: &[u8; 4] = b"XVFR";

#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major `channels x height x width` values, nominally in `[0, 1]`.
    pub data: Vec<f64>,
}

impl ImageFrame {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width || channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(
                "frame",
                format!("{} values for {channels}x{height}x{width}", data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels, self.height, self.width], self.data.clone())
            .expect("frame invariants guarantee the shape")
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, height: usize, width: usize) -> Result<ImageFrame> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize target must be non-empty"));
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let coord = |o: usize, scale: f64, n: usize| {
            let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = c.floor() as usize;
            (lo, (lo + 1).min(n - 1), c - lo as f64)
        };
        let mut out = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let plane =
                &self.data[c * self.height * self.width..(c + 1) * self.height * self.width];
            for oy in 0..height {
                let (y0, y1, fy) = coord(oy, sy, self.height);
                for ox in 0..width {
                    let (x0, x1, fx) = coord(ox, sx, self.width);
                    let top =
                        plane[y0 * self.width + x0] * (1.0 - fx) + plane[y0 * self.width + x1] * fx;
                    let bottom =
                        plane[y1 * self.width + x0] * (1.0 - fx) + plane[y1 * self.width + x1] * fx;
                    out.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        ImageFrame::new(self.channels, height, width, out)
    }
}

impl From<&EventFrame> for ImageFrame {
    fn from(f: &EventFrame) -> Self {
        ImageFrame {
            channels: 1,
            height: f.height,
            width: f.width,
            data: f.intensity.clone(),
        }
    }
}

/// Per-channel zero mean and unit variance; constant channels become zero.
pub fn standardize(frame: &ImageFrame) -> ImageFrame {
    let plane = frame.height * frame.width;
    let mut data = frame.data.clone();
    for channel in data.chunks_mut(plane.max(1)) {
        let n = channel.len() as f64;
        let mean = channel.iter().sum::<f64>() / n;
        let var = channel.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let scale = if std > 1e-8 { 1.0 / std } else { 0.0 };
        channel.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    }
    ImageFrame {
        data,
        ..frame.clone()
    }
}

pub fn encode_raw(frame: &ImageFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + frame.data.len() * 8);
    out.extend_from_slice(RAW_MAGIC);
    for d in [frame.channels, frame.height, frame.width] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &frame.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(path: &Path, bytes: &[u8]) -> Result<ImageFrame> {
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 28 || &bytes[..4] != RAW_MAGIC {
        return Err(bad("missing frame header"));
    }
    let dim =
        |i: usize| u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| bad("frame dimensions overflow"))?;
    if bytes.len() != 28 + n * 8 {
        return Err(bad("payload length does not match dimensions"));
    }
    let data = bytes[28..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ImageFrame::new(c, h, w, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_raw(path: impl AsRef<Path>, frame: &ImageFrame) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_raw(frame)).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<ImageFrame> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(path, &bytes)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit preview: `P5` for one channel, `P6` for three.
pub fn write_pnm(path: impl AsRef<Path>, frame: &ImageFrame) -> Result<()> {
    let path = path.as_ref();
    let magic = match frame.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::invalid(format!(
                "cannot preview a {c}-channel frame"
            )))
        }
    };
    let plane = frame.height * frame.width;
    let mut out = format!("{magic}\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    for i in 0..plane {
        for c in 0..frame.channels {
            out.push(quantize(frame.data[c * plane + i]));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn decode_image(path: &Path, channels: usize) -> Result<ImageFrame> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let interleaved: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(Error::invalid(format!("unsupported channel count {c}"))),
    };
    let plane = h * w;
    let mut data = vec![0.0; channels * plane];
    for (i, px) in interleaved.chunks_exact(channels).enumerate() {
        for (c, v) in px.iter().enumerate() {
            data[c * plane + i] = *v as f64 / 255.0;
        }
    }
    ImageFrame::new(channels, h, w, data)
}

/// Loads a raw frame or an encoded image and resizes it to `height x width`.
/// Raw frames must already carry `channels` channels; encoded images are
/// converted to gray or RGB as requested.
pub fn load_frame(
    path: impl AsRef<Path>,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<ImageFrame> {
    let path = path.as_ref();
    let frame = if path.extension().is_some_and(|e| e == "frm") {
        let f = read_raw(path)?;
        if f.channels != channels {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("expected {channels} channels, found {}", f.channels),
            });
        }
        f
    } else {
        decode_image(path, channels)?
    };
    frame.resize(height, width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..24).map(|i| (i as f64).sin() / 3.0).collect();
        let f = ImageFrame::new(2, 3, 4, data).unwrap();
        let p = dir.path().join("a.frm");
        write_raw(&p, &f).unwrap();
        assert_eq!(read_raw(&p).unwrap(), f);
        assert!(decode_raw(&p, b"XVFR").is_err());
        let mut truncated = encode_raw(&f);
        truncated.pop();
        assert!(decode_raw(&p, &truncated).is_err());
    }

    #[test]
    fn pnm_preview_reloads_through_image_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let f = ImageFrame::new(
            3,
            2,
            2,
            vec![0.0, 1.0, 0.5, 0.25, 1.0, 0.0, 0.0, 1.0, 0.2, 0.2, 0.2, 0.2],
        )
        .unwrap();
        let p = dir.path().join("a.ppm");
        write_pnm(&p, &f).unwrap();
        let back = load_frame(&p, 3, 2, 2).unwrap();
        assert!(back
            .data
            .iter()
            .zip(&f.data)
            .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
        let gray = load_frame(&p, 1, 2, 2).unwrap();
        assert_eq!(gray.channels, 1);
    }

    #[test]
    fn resize_preserves_constants_and_identity() {
        let f = ImageFrame::new(1, 4, 6, vec![0.3; 24]).unwrap();
        let r = f.resize(2, 3).unwrap();
        assert!(r.data.iter().all(|v| (v - 0.3).abs() < 1e-15));
        let g = ImageFrame::new(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.resize(2, 2).unwrap(), g);
        let half = ImageFrame::new(1, 2, 4, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        assert_eq!(half.resize(1, 2).unwrap().data, vec![2.5, 4.5]);
    }

    #[test]
    fn raw_channel_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.frm");
        write_raw(&p, &ImageFrame::zeros(1, 2, 2)).unwrap();
        assert!(load_frame(&p, 3, 2, 2).is_err());
        assert!(load_frame(dir.path().join("missing.png"), 3, 2, 2).is_err());
    }
}
