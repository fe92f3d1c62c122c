//! Trajectory records, the JSONL interchange format, and preprocessing:
//! normalization into (0,1], special tokens, padding to 800 rows and
//! segmentation into 160 patches of 5×2.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Rows in a padded trajectory.
pub const SEQ_LEN: usize = 800;
/// Trajectory rows per patch.
pub const PATCH_ROWS: usize = 5;
/// Values in one flattened patch.
pub const PATCH_LEN: usize = PATCH_ROWS * 2;
pub const N_PATCHES: usize = SEQ_LEN / PATCH_ROWS;

pub const PEN_UP: Point = [-0.01, 0.0];
pub const PEN_DOWN: Point = [-0.01, -0.01];
pub const PADDING: Point = [0.0, -0.01];

/// Lower bound of normalized coordinates.
pub const NORM_FLOOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTrajectory {
    pub writer_id: String,
    pub label: String,
    pub strokes: Vec<Vec<Point>>,
}

impl RawTrajectory {
    pub fn validate(&self) -> Result<()> {
        if self.strokes.is_empty() {
            return Err(Error::DegenerateInput("trajectory has no strokes".into()));
        }
        for (i, s) in self.strokes.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::DegenerateInput(format!("stroke {i} has no points")));
            }
            if s.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::DegenerateInput(format!(
                    "stroke {i} has a non-finite coordinate"
                )));
            }
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        self.strokes.iter().map(Vec::len).sum()
    }

    /// Rows produced by [`tokenize`]: the points plus a pen-down and a
    /// pen-up token per stroke.
    pub fn token_len(&self) -> usize {
        self.n_points() + 2 * self.strokes.len()
    }

    pub fn points(&self) -> impl Iterator<Item = &Point> {
        self.strokes.iter().flatten()
    }
}

/// Aspect-preserving min-max map into `[0.01, 1]`.
///
/// With `D` the larger bounding-box side, each coordinate becomes
/// `0.01 + 0.99 · (v − min) / D`.
pub fn normalize(raw: &RawTrajectory) -> Result<RawTrajectory> {
    raw.validate()?;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in raw.points() {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if extent <= 0.0 {
        return Err(Error::DegenerateInput(
            "all points coincide; bounding box has zero extent".into(),
        ));
    }
    let map = |v: f64, a: usize| {
        (NORM_FLOOR + (1.0 - NORM_FLOOR) * (v - lo[a]) / extent).clamp(NORM_FLOOR, 1.0)
    };
    Ok(RawTrajectory {
        writer_id: raw.writer_id.clone(),
        label: raw.label.clone(),
        strokes: raw
            .strokes
            .iter()
            .map(|s| s.iter().map(|p| [map(p[0], 0), map(p[1], 1)]).collect())
            .collect(),
    })
}

/// A trajectory laid out as exactly [`SEQ_LEN`] token rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedTrajectory {
    pub points: Vec<Point>,
    pub content_len: usize,
    pub writer_id: String,
    pub label: String,
}

pub fn is_token(p: &Point) -> bool {
    *p == PEN_UP || *p == PEN_DOWN || *p == PADDING
}

/// Emits `pen-down, points…, pen-up` per stroke and pads to 800 rows.
///
/// The input must already be normalized.
pub fn tokenize(raw: &RawTrajectory) -> Result<TokenizedTrajectory> {
    raw.validate()?;
    if let Some(p) = raw
        .points()
        .find(|p| !(p[0] > 0.0 && p[0] <= 1.0 && p[1] > 0.0 && p[1] <= 1.0))
    {
        return Err(Error::contract(format!(
            "tokenize expects normalized coordinates in (0,1], found {p:?}"
        )));
    }
    let len = raw.token_len();
    if len > SEQ_LEN {
        return Err(Error::LengthOverflow { len, max: SEQ_LEN });
    }
    let mut points = Vec::with_capacity(SEQ_LEN);
    for s in &raw.strokes {
        points.push(PEN_DOWN);
        points.extend_from_slice(s);
        points.push(PEN_UP);
    }
    points.resize(SEQ_LEN, PADDING);
    Ok(TokenizedTrajectory {
        points,
        content_len: len,
        writer_id: raw.writer_id.clone(),
        label: raw.label.clone(),
    })
}

/// Keeps the longest window of consecutive points, starting at a random
/// offset, whose token expansion fits in `max_points` rows.
///
/// Trajectories that already fit are returned unchanged. At least one point
/// is always kept.
pub fn crop(raw: &RawTrajectory, max_points: usize, rng_seed: u64) -> RawTrajectory {
    if raw.token_len() <= max_points || raw.n_points() == 0 {
        return raw.clone();
    }
    let flat: Vec<(usize, Point)> = raw
        .strokes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| s.iter().map(move |p| (si, *p)))
        .collect();
    let n = flat.len();

    // end (exclusive) of the longest fitting window starting at `start`
    let window_end = |start: usize| {
        let mut cost = 0;
        let mut end = start;
        while end < n {
            let opens_stroke = end == start || flat[end].0 != flat[end - 1].0;
            let add = if opens_stroke { 3 } else { 1 };
            if cost + add > max_points {
                break;
            }
            cost += add;
            end += 1;
        }
        end.max(start + 1)
    };
    let last_start = (0..n).find(|&s| window_end(s) == n).unwrap_or(n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let start = rng.gen_range(0..=last_start);
    let end = window_end(start);

    let mut strokes: Vec<Vec<Point>> = Vec::new();
    for k in start..end {
        if k == start || flat[k].0 != flat[k - 1].0 {
            strokes.push(Vec::new());
        }
        strokes.last_mut().expect("pushed above").push(flat[k].1);
    }
    RawTrajectory {
        writer_id: raw.writer_id.clone(),
        label: raw.label.clone(),
        strokes,
    }
}

/// 160 flattened patches of five consecutive rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub patches: Vec<[f64; PATCH_LEN]>,
    pub n_unpadded: usize,
    pub writer_id: String,
    pub label: String,
}

pub fn patchify(t: &TokenizedTrajectory) -> PatchSequence {
    let patches = t
        .points
        .chunks(PATCH_ROWS)
        .map(|rows| {
            let mut p = [0.0; PATCH_LEN];
            for (i, r) in rows.iter().enumerate() {
                p[2 * i] = r[0];
                p[2 * i + 1] = r[1];
            }
            p
        })
        .collect();
    PatchSequence {
        patches,
        n_unpadded: t.content_len.div_ceil(PATCH_ROWS),
        writer_id: t.writer_id.clone(),
        label: t.label.clone(),
    }
}

/// Inverse of [`patchify`]. The content length is recovered as the first
/// padding row, which no normalized point can equal.
pub fn unpatchify(p: &PatchSequence) -> TokenizedTrajectory {
    let points: Vec<Point> = p
        .patches
        .iter()
        .flat_map(|patch| patch.chunks(2).map(|r| [r[0], r[1]]))
        .collect();
    let content_len = points.iter().position(|r| *r == PADDING).unwrap_or(points.len());
    TokenizedTrajectory {
        points,
        content_len,
        writer_id: p.writer_id.clone(),
        label: p.label.clone(),
    }
}

/// normalize → tokenize → patchify.
pub fn preprocess(raw: &RawTrajectory) -> Result<PatchSequence> {
    Ok(patchify(&tokenize(&normalize(raw)?)?))
}

pub fn read_jsonl<R: Read>(reader: R) -> Result<Vec<RawTrajectory>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawTrajectory = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.validate().map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(records: &[RawTrajectory], writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    let to_io = |e: std::io::Error| Error::io("<jsonl>", e);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| to_io(e.into()))?;
        w.write_all(b"\n").map_err(to_io)?;
    }
    w.flush().map_err(to_io)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<RawTrajectory>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(f)
}

pub fn save_jsonl(records: &[RawTrajectory], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(records, f).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Writer ids in order of first appearance.
pub fn writer_order(records: &[RawTrajectory]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    records
        .iter()
        .filter(|r| seen.insert(r.writer_id.as_str()))
        .map(|r| r.writer_id.clone())
        .collect()
}

/// Splits records by writer: the first `n_train` writers (by first
/// appearance) go to the first half of the result.
pub fn split_by_writer(
    records: &[RawTrajectory],
    n_train: usize,
) -> (Vec<RawTrajectory>, Vec<RawTrajectory>) {
    let order = writer_order(records);
    let train: std::collections::HashSet<&str> =
        order.iter().take(n_train).map(String::as_str).collect();
    records
        .iter()
        .cloned()
        .partition(|r| train.contains(r.writer_id.as_str()))
}

/// Number of training writers under the 8:2 split.
pub fn train_writer_count(n_writers: usize) -> usize {
    ((n_writers as f64) * 0.8).round() as usize
}
