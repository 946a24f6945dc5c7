//! Seeded synthetic route with paired images and event recordings.
//!
//! Each place gets a procedural scene of colored bars and blobs. Images are
//! the scene under a per-scenario illumination preset. Events are simulated
//! from the scene's luminance under a sub-pixel camera translation: a pixel
//! fires when its intensity changes by more than a threshold between two
//! sampled positions. Sparse noise events are added on top.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::event_frame::{render_window, FrameParams};
use crate::event_io::{
    slice_windows, write_events, write_manifest, Event, EventStream, GeoTag, Modality,
    SampleRecord, SensorSize, Split, EARTH_RADIUS_M,
};
use crate::frame::{write_pnm, write_raw, ImageFrame};

pub const SCENARIOS: [&str; 5] = ["daytime", "sunset", "sunrise", "morning", "night"];
const ORIGIN: (f64, f64) = (-27.4698, 153.0251);

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    pub places: usize,
    pub scenarios: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub spacing_m: f64,
    pub delta_t_us: i64,
    /// Intensity change that fires an event.
    pub threshold: f64,
    /// Per-pixel probability of a noise event in each window.
    pub noise: f64,
    /// Total camera translation across the recording, in pixels.
    pub motion_px: f64,
    pub frame: FrameParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            places: 200,
            scenarios: SCENARIOS.iter().map(|s| s.to_string()).collect(),
            width: 48,
            height: 36,
            spacing_m: 50.0,
            delta_t_us: 25_000,
            threshold: 0.08,
            noise: 0.003,
            motion_px: 1.0,
            frame: FrameParams {
                d_max: 6.0,
                ..FrameParams::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Illumination {
    gain: [f64; 3],
    gamma: f64,
    noise: f64,
}

fn illumination(scenario: &str) -> Result<Illumination> {
    let (gain, gamma, noise) = match scenario {
        "daytime" => ([1.0, 1.0, 1.0], 1.0, 0.005),
        "sunset" => ([0.85, 0.65, 0.5], 1.2, 0.01),
        "sunrise" => ([0.8, 0.72, 0.62], 1.1, 0.01),
        "morning" => ([0.9, 0.95, 1.0], 0.9, 0.01),
        "night" => ([0.35, 0.35, 0.4], 1.6, 0.03),
        other => {
            return Err(Error::invalid(format!(
                "unknown scenario {other:?}; known: {}",
                SCENARIOS.join(", ")
            )))
        }
    };
    Ok(Illumination { gain, gamma, noise })
}

/// Derives an independent stream seed from a base seed and labels.
fn sub_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

/// Geotags of a gently curving route with `spacing_m` between places.
pub fn route(places: usize, spacing_m: f64) -> Vec<GeoTag> {
    let meters_per_deg = EARTH_RADIUS_M * PI / 180.0;
    let (mut x, mut y) = (0.0f64, 0.0f64);
    let mut out = Vec::with_capacity(places);
    for i in 0..places {
        out.push(GeoTag::new(
            ORIGIN.0 + y / meters_per_deg,
            ORIGIN.1 + x / (meters_per_deg * ORIGIN.0.to_radians().cos()),
        ));
        let heading = 0.6 * (i as f64 * spacing_m / 700.0).sin();
        x += spacing_m * heading.cos();
        y += spacing_m * heading.sin();
    }
    out
}

enum Shape {
    Bar {
        cx: f64,
        cy: f64,
        dir: (f64, f64),
        half_len: f64,
        half_width: f64,
    },
    Blob {
        cx: f64,
        cy: f64,
        radius: f64,
    },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Bar {
                cx,
                cy,
                dir,
                half_len,
                half_width,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let along = dx * dir.0 + dy * dir.1;
                let across = -dx * dir.1 + dy * dir.0;
                along.abs() <= half_len && across.abs() <= half_width
            }
            Shape::Blob { cx, cy, radius } => {
                (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius
            }
        }
    }
}

/// RGB scene in `[0, 1]`, channel-major.
fn scene(rng: &mut ChaCha8Rng, width: usize, height: usize) -> ImageFrame {
    let (w, h) = (width as f64, height as f64);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.55));
    let grad_angle: f64 = rng.gen_range(0.0..2.0 * PI);
    let grad_amp: f64 = rng.gen_range(0.0..0.15);
    let scale = w.min(h);
    let mut shapes: Vec<(Shape, [f64; 3])> = Vec::new();
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        let bright = rng.gen_bool(0.5);
        std::array::from_fn(|_| {
            if bright {
                rng.gen_range(0.75..1.0)
            } else {
                rng.gen_range(0.0..0.15)
            }
        })
    };
    for _ in 0..rng.gen_range(2..=4) {
        let a: f64 = rng.gen_range(0.0..PI);
        let shape = Shape::Bar {
            cx: rng.gen_range(0.0..w),
            cy: rng.gen_range(0.0..h),
            dir: (a.cos(), a.sin()),
            half_len: rng.gen_range(0.12..0.4) * scale,
            half_width: rng.gen_range(0.06..0.12) * scale,
        };
        shapes.push((shape, color(rng)));
    }
    for _ in 0..rng.gen_range(1..=3) {
        let shape = Shape::Blob {
            cx: rng.gen_range(0.0..w),
            cy: rng.gen_range(0.0..h),
            radius: rng.gen_range(0.08..0.2) * scale,
        };
        shapes.push((shape, color(rng)));
    }
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for py in 0..height {
        for px in 0..width {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let ramp =
                grad_amp * ((x / w - 0.5) * grad_angle.cos() + (y / h - 0.5) * grad_angle.sin());
            let mut rgb = base.map(|b| b + ramp);
            for (shape, c) in &shapes {
                if shape.contains(x, y) {
                    rgb = *c;
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                data[c * plane + py * width + px] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageFrame::new(3, height, width, data).expect("scene dimensions are consistent")
}

pub fn luminance(rgb: &ImageFrame) -> Vec<f64> {
    let plane = rgb.width * rgb.height;
    (0..plane)
        .map(|i| {
            0.299 * rgb.data[i] + 0.587 * rgb.data[plane + i] + 0.114 * rgb.data[2 * plane + i]
        })
        .collect()
}

fn illuminate(base: &ImageFrame, light: &Illumination, rng: &mut ChaCha8Rng) -> ImageFrame {
    let plane = base.width * base.height;
    let data = base
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let lit = light.gain[i / plane] * v.powf(light.gamma);
            // Box-Muller
            let (u1, u2): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
            let n = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
            (lit + light.noise * n).clamp(0.0, 1.0)
        })
        .collect();
    ImageFrame::new(base.channels, base.height, base.width, data).expect("same shape as base")
}

/// Bilinear sample of a `width x height` plane shifted by `(dx, dy)`, clamped at the border.
fn shifted(plane: &[f64], width: usize, height: usize, dx: f64, dy: f64) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, width as isize - 1) as usize;
        let y = y.clamp(0, height as isize - 1) as usize;
        plane[y * width + x]
    };
    let mut out = Vec::with_capacity(plane.len());
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = (x as f64 + dx, y as f64 + dy);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
            let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Two windows of events from a translation of `motion_px` in a random direction.
pub fn simulate_events(
    lum: &[f64],
    width: usize,
    height: usize,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> EventStream {
    let angle: f64 = rng.gen_range(0.0..2.0 * PI);
    let (mx, my) = (cfg.motion_px * angle.cos(), cfg.motion_px * angle.sin());
    let dt = cfg.delta_t_us;
    let mut events = Vec::new();
    let mut prev = lum.to_vec();
    for k in 0..2i64 {
        let step = (k + 1) as f64 / 2.0;
        let next = shifted(lum, width, height, mx * step, my * step);
        for (i, (a, b)) in prev.iter().zip(&next).enumerate() {
            let diff = b - a;
            let fires = diff.abs() > cfg.threshold;
            let noise = rng.gen_bool(cfg.noise);
            if fires || noise {
                let polarity = if fires {
                    if diff > 0.0 {
                        1
                    } else {
                        -1
                    }
                } else if rng.gen_bool(0.5) {
                    1
                } else {
                    -1
                };
                events.push(Event {
                    x: (i % width) as u32,
                    y: (i / width) as u32,
                    t: k * dt + rng.gen_range(0..dt),
                    polarity,
                });
            }
        }
        prev = next;
    }
    // pin the recording to exactly two windows' span
    events.push(Event {
        x: 0,
        y: 0,
        t: 0,
        polarity: 1,
    });
    events.push(Event {
        x: 0,
        y: 0,
        t: 2 * dt - 1,
        polarity: 1,
    });
    events.sort_by_key(|e| (e.t, e.y, e.x));
    EventStream {
        sensor: SensorSize {
            width: width as u32,
            height: height as u32,
        },
        events,
    }
}

fn write_track(path: &Path, tag: &GeoTag, span: i64) -> Result<()> {
    let text = format!(
        "0 {} {}\n{} {} {}\n",
        tag.lat, tag.lon, span, tag.lat, tag.lon
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the dataset under `dir` and returns its records (also saved as
/// `dir/manifest.csv`). Ids are `<scenario>:pNNNN:<modality>`.
pub fn generate(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<Vec<SampleRecord>> {
    let dir = dir.as_ref();
    if cfg.places < 10 {
        return Err(Error::invalid(format!(
            "need at least 10 places, got {}",
            cfg.places
        )));
    }
    if cfg.scenarios.is_empty() {
        return Err(Error::invalid("no scenarios requested"));
    }
    let lights = cfg
        .scenarios
        .iter()
        .map(|s| illumination(s))
        .collect::<Result<Vec<_>>>()?;
    for sub in ["images", "events"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let tags = route(cfg.places, cfg.spacing_m);
    let scenes: Vec<ImageFrame> = (0..cfg.places)
        .map(|p| {
            scene(
                &mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[1, p as u64])),
                cfg.width,
                cfg.height,
            )
        })
        .collect();
    let mut records = Vec::new();
    for (s, (name, light)) in cfg.scenarios.iter().zip(&lights).enumerate() {
        for (p, (base, tag)) in scenes.iter().zip(&tags).enumerate() {
            let stem = format!("{name}_p{p:04}");
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[2, s as u64, p as u64]));

            let stream = simulate_events(&luminance(base), cfg.width, cfg.height, cfg, &mut rng);
            write_events(dir.join("events").join(format!("{stem}.txt")), &stream)?;
            write_track(
                &dir.join("events").join(format!("{stem}.gps")),
                tag,
                2 * cfg.delta_t_us,
            )?;
            let window = &slice_windows(&stream, cfg.delta_t_us)?[0];
            let frame = ImageFrame::from(&render_window(window, &cfg.frame, 0)?);
            let event_path = dir.join("events").join(format!("{stem}.frm"));
            write_raw(&event_path, &frame)?;
            write_pnm(dir.join("events").join(format!("{stem}.pgm")), &frame)?;

            let image = illuminate(base, light, &mut rng);
            let image_path = dir.join("images").join(format!("{stem}.frm"));
            write_raw(&image_path, &image)?;
            write_pnm(dir.join("images").join(format!("{stem}.ppm")), &image)?;

            for (modality, path) in [(Modality::Event, event_path), (Modality::Image, image_path)] {
                records.push(SampleRecord {
                    id: format!("{name}:p{p:04}:{modality}"),
                    modality,
                    path,
                    geotag: *tag,
                    split: Split::Unassigned,
                });
            }
        }
    }
    write_manifest(dir.join("manifest.csv"), &records)?;
    Ok(records)
}

/// The place index encoded in a synthetic sample id.
pub fn place_of(id: &str) -> Option<usize> {
    id.split(':')
        .find_map(|part| part.strip_prefix('p')?.parse().ok())
}

pub fn manifest_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join("manifest.csv")
}
