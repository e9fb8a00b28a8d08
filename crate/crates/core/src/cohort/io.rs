//! Cohort serialization: one CSV row per frame plus a JSON sidecar holding
//! membership marks, split assignments and labels.

use super::{AttackSplit, CohortSplit, FeatureDims, Frame, Recording, SplitEntry};
use crate::error::{Error, Result};
use crate::nnet::fmt_f64;
use serde::{Deserialize, Serialize};

const ID_COLUMNS: [&str; 5] = [
    "participant_id",
    "recording_id",
    "frame_index",
    "gaze_x",
    "gaze_y",
];
const STREAMS: [&str; 4] = ["left_eye", "right_eye", "face", "face_grid"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub recording_id: u32,
    pub participant_id: u32,
    pub in_target_train: bool,
    pub split: AttackSplit,
    pub y_instance: u8,
    pub y_person: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSidecar {
    pub dims: FeatureDims,
    pub recordings: Vec<SidecarEntry>,
}

impl CohortSidecar {
    pub fn new(dims: FeatureDims, recordings: &[Recording], split: &CohortSplit) -> Result<Self> {
        let entries = recordings
            .iter()
            .map(|r| {
                let e = split.entry(r.recording_id).ok_or_else(|| {
                    Error::invalid(format!("recording {} not in split", r.recording_id))
                })?;
                Ok(SidecarEntry {
                    recording_id: r.recording_id,
                    participant_id: r.participant_id,
                    in_target_train: r.in_target_train,
                    split: e.split,
                    y_instance: e.y_instance,
                    y_person: e.y_person,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dims,
            recordings: entries,
        })
    }
}

pub fn write_frames_csv(recordings: &[Recording], dims: FeatureDims) -> String {
    let mut out = String::new();
    let mut header: Vec<String> = ID_COLUMNS.iter().map(|s| s.to_string()).collect();
    for (name, n) in STREAMS
        .iter()
        .zip([dims.eye, dims.eye, dims.face, dims.face_grid])
    {
        header.extend((0..n).map(|i| format!("{name}_{i}")));
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for f in recordings.iter().flat_map(|r| &r.frames) {
        let mut row = vec![
            f.participant_id.to_string(),
            f.recording_id.to_string(),
            f.frame_index.to_string(),
            fmt_f64(f.gaze[0]),
            fmt_f64(f.gaze[1]),
        ];
        for v in f
            .left_eye
            .iter()
            .chain(&f.right_eye)
            .chain(&f.face)
            .chain(&f.face_grid)
        {
            row.push(fmt_f64(*v));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn header_dims(header: &str) -> Result<FeatureDims> {
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < ID_COLUMNS.len() || cols[..ID_COLUMNS.len()] != ID_COLUMNS {
        return Err(Error::parse(
            1,
            "header must start with the id and gaze columns",
        ));
    }
    let mut rest = &cols[ID_COLUMNS.len()..];
    let mut counts = [0usize; 4];
    for (stream, count) in STREAMS.iter().zip(counts.iter_mut()) {
        while rest
            .first()
            .is_some_and(|c| *c == format!("{stream}_{count}"))
        {
            *count += 1;
            rest = &rest[1..];
        }
        if *count == 0 {
            return Err(Error::parse(1, format!("no `{stream}` columns")));
        }
    }
    if !rest.is_empty() {
        return Err(Error::parse(1, format!("unexpected column `{}`", rest[0])));
    }
    if counts[0] != counts[1] {
        return Err(Error::parse(1, "left and right eye widths differ"));
    }
    Ok(FeatureDims {
        eye: counts[0],
        face: counts[2],
        face_grid: counts[3],
    })
}

/// Parses the per-frame CSV, returning frames in file order and the feature
/// dimensions declared by the header.
pub fn parse_frames_csv(text: &str) -> Result<(FeatureDims, Vec<Frame>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(1, "empty file"))?;
    let dims = header_dims(header)?;
    let width = ID_COLUMNS.len() + 2 * dims.eye + dims.face + dims.face_grid;
    let mut frames = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(Error::parse(
                line_no,
                format!("expected {width} cells, found {}", cells.len()),
            ));
        }
        let int = |s: &str| {
            s.parse::<u32>()
                .map_err(|_| Error::parse(line_no, format!("invalid integer `{s}`")))
        };
        let mut reals = cells[3..].iter().map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(line_no, format!("invalid number `{s}`")))
        });
        let mut take = |n: usize| -> Result<Vec<f64>> { reals.by_ref().take(n).collect() };
        let gaze = take(2)?;
        frames.push(Frame {
            participant_id: int(cells[0])?,
            recording_id: int(cells[1])?,
            frame_index: int(cells[2])?,
            gaze: [gaze[0], gaze[1]],
            left_eye: take(dims.eye)?,
            right_eye: take(dims.eye)?,
            face: take(dims.face)?,
            face_grid: take(dims.face_grid)?,
        });
    }
    Ok((dims, frames))
}

/// Rebuilds recordings and the attack split from the CSV and sidecar.
pub fn read_cohort(csv_text: &str, sidecar_json: &str) -> Result<(Vec<Recording>, CohortSplit)> {
    let sidecar: CohortSidecar = serde_json::from_str(sidecar_json)?;
    let (dims, frames) = parse_frames_csv(csv_text)?;
    if dims != sidecar.dims {
        return Err(Error::invalid(
            "CSV header dimensions disagree with sidecar",
        ));
    }
    let mut recordings: Vec<Recording> = sidecar
        .recordings
        .iter()
        .map(|e| Recording {
            recording_id: e.recording_id,
            participant_id: e.participant_id,
            frames: Vec::new(),
            in_target_train: e.in_target_train,
        })
        .collect();
    let index: std::collections::HashMap<u32, usize> = recordings
        .iter()
        .enumerate()
        .map(|(i, r)| (r.recording_id, i))
        .collect();
    if index.len() != recordings.len() {
        return Err(Error::invalid("duplicate recording id in sidecar"));
    }
    for f in frames {
        let &i = index.get(&f.recording_id).ok_or_else(|| {
            Error::invalid(format!("frame of unknown recording {}", f.recording_id))
        })?;
        let rec = &mut recordings[i];
        if f.participant_id != rec.participant_id || f.frame_index as usize != rec.frames.len() {
            return Err(Error::invalid(format!(
                "frame {} of recording {} is out of order or misattributed",
                f.frame_index, f.recording_id
            )));
        }
        rec.frames.push(f);
    }
    if let Some(r) = recordings.iter().find(|r| r.frames.is_empty()) {
        return Err(Error::invalid(format!(
            "recording {} has no frames",
            r.recording_id
        )));
    }
    let split = CohortSplit {
        entries: sidecar
            .recordings
            .iter()
            .map(|e| SplitEntry {
                recording_id: e.recording_id,
                participant_id: e.participant_id,
                split: e.split,
                y_instance: e.y_instance,
                y_person: e.y_person,
            })
            .collect(),
    };
    Ok((recordings, split))
}
