//! Event stream to frame-sample conversion.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event_frame::{render_window, FrameParams};
use crate::event_io::{
    interpolate_geotag, slice_windows, EventStream, GeoTag, Modality, SampleRecord, Split,
};
use crate::frame::{write_pnm, write_raw, ImageFrame};

pub const DEFAULT_DELTA_T_US: i64 = 25_000;

/// Renders every complete window of `stream`, writes `<stem>_wNNNNN.frm`
/// (plus a `.pgm` preview) into `out_dir` and returns one unassigned event
/// record per window, geotagged at the window's midpoint.
pub fn convert_stream(
    stream: &EventStream,
    track: &[GeoTag],
    delta_t: i64,
    params: &FrameParams,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<SampleRecord>> {
    let windows = slice_windows(stream, delta_t)?;
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    if track.is_empty() {
        return Err(Error::invalid("geotag track is empty"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let frame = render_window(w, params, i as u64)?;
            let name = format!("{stem}_w{i:05}");
            let path = out_dir.join(format!("{name}.frm"));
            let image = ImageFrame::from(&frame);
            write_raw(&path, &image)?;
            write_pnm(out_dir.join(format!("{name}.pgm")), &image)?;
            let mid = w.t_start + delta_t / 2;
            let geotag = interpolate_geotag(track, mid).expect("track is non-empty");
            Ok(SampleRecord {
                id: format!("{stem}:w{i:05}"),
                modality: Modality::Event,
                path,
                geotag: GeoTag::new(geotag.lat, geotag.lon),
                split: Split::Unassigned,
            })
        })
        .collect()
}

/// Replaces records whose id already exists and appends the rest.
pub fn merge_records(existing: &mut Vec<SampleRecord>, new: Vec<SampleRecord>) {
    for r in new {
        match existing.iter_mut().find(|e| e.id == r.id) {
            Some(slot) => *slot = r,
            None => existing.push(r),
        }
    }
}
