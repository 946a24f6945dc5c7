//! Event streams, geotag tracks, sample manifests and geographic splits.
//!
//! File formats (all UTF-8 text, space or comma separated as noted):
//!
//! * events: first line `width height`, then one `t x y p` line per event,
//!   `t` in microseconds, `p` in `{-1, 1}`;
//! * geotags: one `t lat lon` line per fix;
//! * manifest: one `id,modality,path,lat,lon,split` line per sample.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Mean Earth radius used by [`geo_distance`], in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Match radius for place recognition; also the buffer kept between splits.
pub const MATCH_RADIUS_M: f64 = 35.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    pub t: i64,
    pub polarity: i8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SensorSize {
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub sensor: SensorSize,
    pub events: Vec<Event>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventWindow {
    pub events: Vec<Event>,
    pub t_start: i64,
    pub t_end: i64,
    pub sensor: SensorSize,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn field<T: FromStr>(path: &Path, line: usize, name: &str, raw: Option<&str>) -> Result<T> {
    let raw = raw.ok_or_else(|| parse_err(path, line, format!("missing field `{name}`")))?;
    raw.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad {name} `{raw}`")))
}

pub fn parse_events_str(path: &Path, text: &str) -> Result<EventStream> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| parse_err(path, 1, "missing `width height` header"))?;
    let mut parts = header.split_whitespace();
    let width: u32 = field(path, 1, "width", parts.next())?;
    let height: u32 = field(path, 1, "height", parts.next())?;
    if width == 0 || height == 0 || parts.next().is_some() {
        return Err(parse_err(
            path,
            1,
            "header must be `width height` with positive sizes",
        ));
    }

    let mut events = Vec::new();
    let mut last_t = i64::MIN;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let t: i64 = field(path, lineno, "t", parts.next())?;
        let x: i64 = field(path, lineno, "x", parts.next())?;
        let y: i64 = field(path, lineno, "y", parts.next())?;
        let p: i64 = field(path, lineno, "p", parts.next())?;
        if parts.next().is_some() {
            return Err(parse_err(path, lineno, "expected `t x y p`"));
        }
        if !(0..width as i64).contains(&x) || !(0..height as i64).contains(&y) {
            return Err(parse_err(
                path,
                lineno,
                format!("pixel ({x}, {y}) outside {width}x{height} sensor"),
            ));
        }
        if p != 1 && p != -1 {
            return Err(parse_err(
                path,
                lineno,
                format!("polarity {p} not in {{-1, 1}}"),
            ));
        }
        if t < last_t {
            return Err(parse_err(
                path,
                lineno,
                format!("timestamp {t} precedes previous {last_t}"),
            ));
        }
        last_t = t;
        events.push(Event {
            x: x as u32,
            y: y as u32,
            t,
            polarity: p as i8,
        });
    }
    Ok(EventStream {
        sensor: SensorSize { width, height },
        events,
    })
}

pub fn parse_events(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    parse_events_str(path, &read_text(path)?)
}

pub fn write_events(path: impl AsRef<Path>, stream: &EventStream) -> Result<()> {
    let mut out = format!("{} {}\n", stream.sensor.width, stream.sensor.height);
    for e in &stream.events {
        out.push_str(&format!("{} {} {} {}\n", e.t, e.x, e.y, e.polarity));
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Cuts the stream into consecutive windows of `delta_t` microseconds
/// starting at the first event. A window `[s, s + delta_t)` is kept only if
/// the stream reaches its end (`last event time >= s + delta_t`); the
/// trailing partial window is dropped.
pub fn slice_windows(stream: &EventStream, delta_t: i64) -> Result<Vec<EventWindow>> {
    if delta_t <= 0 {
        return Err(Error::invalid(format!(
            "window length {delta_t} must be positive"
        )));
    }
    let (Some(first), Some(last)) = (stream.events.first(), stream.events.last()) else {
        return Ok(Vec::new());
    };
    let complete = ((last.t - first.t) / delta_t) as usize;
    let mut windows: Vec<EventWindow> = (0..complete)
        .map(|i| {
            let t_start = first.t + i as i64 * delta_t;
            EventWindow {
                events: Vec::new(),
                t_start,
                t_end: t_start + delta_t,
                sensor: stream.sensor,
            }
        })
        .collect();
    for e in &stream.events {
        let idx = ((e.t - first.t) / delta_t) as usize;
        if idx < complete {
            windows[idx].events.push(*e);
        }
    }
    Ok(windows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoTag {
    pub lat: f64,
    pub lon: f64,
    pub t: i64,
}

impl GeoTag {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon, t: 0 }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Haversine great-circle distance in meters.
pub fn geo_distance(a: &GeoTag, b: &GeoTag) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

pub fn parse_geotags(path: impl AsRef<Path>) -> Result<Vec<GeoTag>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut tags: Vec<GeoTag> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let t = field(path, lineno, "t", parts.next())?;
        let lat = field(path, lineno, "lat", parts.next())?;
        let lon = field(path, lineno, "lon", parts.next())?;
        let tag = GeoTag { lat, lon, t };
        if !tag.is_valid() {
            return Err(parse_err(
                path,
                lineno,
                format!("coordinate ({lat}, {lon}) out of range"),
            ));
        }
        if tags.last().is_some_and(|prev| prev.t > t) {
            return Err(parse_err(
                path,
                lineno,
                "geotag timestamps must be non-decreasing",
            ));
        }
        tags.push(tag);
    }
    Ok(tags)
}

/// Position at time `t`, linearly interpolated between the bracketing fixes
/// and clamped to the first/last fix outside the track.
pub fn interpolate_geotag(track: &[GeoTag], t: i64) -> Option<GeoTag> {
    let first = track.first()?;
    let last = track.last()?;
    if t <= first.t {
        return Some(GeoTag { t, ..*first });
    }
    if t >= last.t {
        return Some(GeoTag { t, ..*last });
    }
    let i = track.partition_point(|g| g.t <= t);
    let (a, b) = (&track[i - 1], &track[i]);
    let span = (b.t - a.t) as f64;
    let w = if span > 0.0 {
        (t - a.t) as f64 / span
    } else {
        0.0
    };
    Some(GeoTag {
        lat: a.lat + w * (b.lat - a.lat),
        lon: a.lon + w * (b.lon - a.lon),
        t,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Event,
    Image,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Event => "event",
            Modality::Image => "image",
        })
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "event" => Ok(Modality::Event),
            "image" => Ok(Modality::Image),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    /// Not yet assigned by [`make_splits`].
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" | "" => Ok(Split::Unassigned),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub modality: Modality,
    pub path: PathBuf,
    pub geotag: GeoTag,
    pub split: Split,
}

impl SampleRecord {
    /// Scenario tag of the sample: the id prefix before the first `:`,
    /// or `default` for ids without one.
    pub fn scenario(&self) -> &str {
        scenario_of(&self.id)
    }
}

pub fn scenario_of(id: &str) -> &str {
    id.split_once(':').map(|(s, _)| s).unwrap_or("default")
}

pub fn parse_manifest_str(path: &Path, text: &str) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(parse_err(
                path,
                lineno,
                format!(
                    "expected 6 columns `id,modality,path,lat,lon,split`, got {}",
                    cols.len()
                ),
            ));
        }
        let modality = cols[1]
            .trim()
            .parse()
            .map_err(|e: String| parse_err(path, lineno, e))?;
        let split = cols[5]
            .trim()
            .parse()
            .map_err(|e: String| parse_err(path, lineno, e))?;
        let geotag = GeoTag::new(
            field(path, lineno, "lat", Some(cols[3]))?,
            field(path, lineno, "lon", Some(cols[4]))?,
        );
        if !geotag.is_valid() {
            return Err(parse_err(path, lineno, "coordinate out of range"));
        }
        records.push(SampleRecord {
            id: cols[0].trim().to_string(),
            modality,
            path: PathBuf::from(cols[2].trim()),
            geotag,
            split,
        });
    }
    Ok(records)
}

/// Reads a manifest; relative sample paths are resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let mut records = parse_manifest_str(path, &read_text(path)?)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for r in &mut records {
        if r.path.is_relative() {
            r.path = base.join(&r.path);
        }
    }
    Ok(records)
}

pub fn format_manifest(records: &[SampleRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id,
            r.modality,
            r.path.display(),
            r.geotag.lat,
            r.geotag.lon,
            r.split
        ));
    }
    out
}

/// Writes a manifest; sample paths under the manifest's directory are stored relative to it.
pub fn write_manifest(path: impl AsRef<Path>, records: &[SampleRecord]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let rel: Vec<SampleRecord> = records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if let Ok(stripped) = r.path.strip_prefix(base) {
                if !base.as_os_str().is_empty() {
                    r.path = stripped.to_path_buf();
                }
            }
            r
        })
        .collect();
    fs::write(path, format_manifest(&rel)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = Self { train, val, test };
        if [train, val, test]
            .iter()
            .any(|v| !(v.is_finite() && *v > 0.0))
            || (train + val + test - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid(format!(
                "split fractions ({train}, {val}, {test}) must be positive and sum to 1"
            )));
        }
        Ok(f)
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Records closer than this to an existing place join it when ordering the traverse.
pub const PLACE_MERGE_RADIUS_M: f64 = 5.0;

/// Assigns contiguous train/val/test splits along the traverse and drops
/// boundary records so that no two records in different splits lie within
/// [`MATCH_RADIUS_M`] of each other.
///
/// The traverse is the sequence of distinct places in first-appearance
/// order; records within [`PLACE_MERGE_RADIUS_M`] of an earlier place (for
/// example the image and event of one sample, or a repeated traverse)
/// share that place's position in the order.
pub fn make_splits(
    records: &[SampleRecord],
    fractions: SplitFractions,
) -> Result<Vec<SampleRecord>> {
    let mut anchors: Vec<GeoTag> = Vec::new();
    let mut place_of = Vec::with_capacity(records.len());
    let mut place_counts: Vec<usize> = Vec::new();
    for r in records {
        let found = anchors
            .iter()
            .position(|a| geo_distance(a, &r.geotag) <= PLACE_MERGE_RADIUS_M);
        let place = found.unwrap_or_else(|| {
            anchors.push(r.geotag);
            place_counts.push(0);
            anchors.len() - 1
        });
        place_counts[place] += 1;
        place_of.push(place);
    }
    if anchors.len() < 3 {
        return Err(Error::invalid(format!(
            "traverse has {} distinct place(s); three geographically separate splits need more",
            anchors.len()
        )));
    }

    let n = records.len() as f64;
    let targets = [fractions.train * n, (fractions.train + fractions.val) * n];
    let mut cumulative = Vec::with_capacity(anchors.len());
    let mut acc = 0usize;
    for c in &place_counts {
        acc += c;
        cumulative.push(acc as f64);
    }
    // boundary b = number of places in the prefix; the nearest cumulative count wins
    let boundary = |target: f64, min: usize| -> usize {
        (min..anchors.len())
            .min_by(|&a, &b| {
                let da = (cumulative[a - 1] - target).abs();
                let db = (cumulative[b - 1] - target).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap_or(min)
    };
    let first_cut = boundary(targets[0], 1);
    let second_cut = boundary(targets[1], first_cut + 1).max(first_cut + 1);
    if second_cut >= anchors.len() {
        return Err(Error::invalid("traverse too short to form three splits"));
    }

    let split_of_place = |p: usize| {
        if p < first_cut {
            Split::Train
        } else if p < second_cut {
            Split::Val
        } else {
            Split::Test
        }
    };
    let assigned: Vec<Split> = place_of.iter().map(|&p| split_of_place(p)).collect();

    let mut kept = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let s = assigned[i];
        let conflicts = records
            .iter()
            .zip(&assigned)
            .any(|(other, &os)| os > s && geo_distance(&r.geotag, &other.geotag) <= MATCH_RADIUS_M);
        if !conflicts {
            let mut r = r.clone();
            r.split = s;
            kept.push(r);
        }
    }
    for s in [Split::Train, Split::Val, Split::Test] {
        if !kept.iter().any(|r| r.split == s) {
            return Err(Error::invalid(format!(
                "traverse too short: {s} split is empty after the {MATCH_RADIUS_M} m buffer"
            )));
        }
    }
    Ok(kept)
}
