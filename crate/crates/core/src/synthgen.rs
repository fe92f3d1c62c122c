//! Parametric synthetic writers.
//!
//! A writer is a handful of style parameters (shear, anisotropic scale,
//! baseline drift, tremor) applied to shared glyph templates. Samples of
//! one writer differ only by their smooth tremor noise, so same-writer
//! trajectories stay closer than different-writer ones.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajio::{self, Point, RawTrajectory};

/// Resampled points per unit of template arc length.
const POINTS_PER_UNIT: f64 = 22.0;
/// Sinusoids summed per axis for the tremor signal.
const TREMOR_TERMS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WriterStyle {
    pub writer_id: String,
    /// Horizontal shear applied as `x += slant · y`.
    pub slant: f64,
    pub scale_x: f64,
    pub scale_y: f64,
    /// Jitter amplitude as a fraction of glyph size.
    pub tremor: f64,
    /// Baseline slope: `y += drift · x`.
    pub drift: f64,
    pub seed: u64,
}

impl WriterStyle {
    /// Identity style: renders the template unchanged up to resampling.
    pub fn neutral(writer_id: impl Into<String>) -> Self {
        Self {
            writer_id: writer_id.into(),
            slant: 0.0,
            scale_x: 1.0,
            scale_y: 1.0,
            tremor: 0.0,
            drift: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.5..=2.0).contains(&self.scale_x)
            && (0.5..=2.0).contains(&self.scale_y)
            && (0.0..=0.1).contains(&self.tremor)
            && self.slant.is_finite()
            && self.drift.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("writer style out of range: {self:?}")))
        }
    }

    /// Writer-specific tremor frequency (cycles per stroke).
    fn tremor_frequency(&self) -> f64 {
        1.0 + (splitmix(self.seed) % 1000) as f64 / 1000.0 * 3.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphTemplate {
    pub label: String,
    /// Polylines in the unit box, y pointing up.
    pub strokes: Vec<Vec<Point>>,
}

impl GlyphTemplate {
    pub fn new(label: &str, strokes: Vec<Vec<Point>>) -> Result<Self> {
        let g = Self {
            label: label.to_string(),
            strokes,
        };
        if g.strokes.iter().map(Vec::len).sum::<usize>() < 2 || g.strokes.iter().any(Vec::is_empty) {
            return Err(Error::Config(format!(
                "glyph {label} needs at least two points and no empty strokes"
            )));
        }
        Ok(g)
    }
}

fn arc(cx: f64, cy: f64, r: f64, from: f64, to: f64, n: usize) -> Vec<Point> {
    (0..=n)
        .map(|i| {
            let t = from + (to - from) * i as f64 / n as f64;
            [cx + r * t.cos(), cy + r * t.sin()]
        })
        .collect()
}

/// The built-in glyph inventory: Latin letters, digits, CJK-like shapes
/// and symbols, single- and multi-stroke.
pub fn builtin_glyphs() -> Vec<GlyphTemplate> {
    use std::f64::consts::PI;
    let defs: Vec<(&str, Vec<Vec<Point>>)> = vec![
        ("L", vec![vec![[0.2, 1.0], [0.2, 0.0], [0.8, 0.0]]]),
        ("T", vec![vec![[0.1, 1.0], [0.9, 1.0]], vec![[0.5, 1.0], [0.5, 0.0]]]),
        ("O", vec![arc(0.5, 0.5, 0.45, 0.5 * PI, 2.5 * PI, 16)]),
        ("Z", vec![vec![[0.1, 1.0], [0.9, 1.0], [0.1, 0.0], [0.9, 0.0]]]),
        ("N", vec![vec![[0.15, 0.0], [0.15, 1.0], [0.85, 0.0], [0.85, 1.0]]]),
        ("W", vec![vec![[0.0, 1.0], [0.25, 0.0], [0.5, 0.6], [0.75, 0.0], [1.0, 1.0]]]),
        ("X", vec![vec![[0.1, 1.0], [0.9, 0.0]], vec![[0.9, 1.0], [0.1, 0.0]]]),
        ("+", vec![vec![[0.5, 1.0], [0.5, 0.0]], vec![[0.0, 0.5], [1.0, 0.5]]]),
        (
            "H",
            vec![
                vec![[0.15, 1.0], [0.15, 0.0]],
                vec![[0.85, 1.0], [0.85, 0.0]],
                vec![[0.15, 0.5], [0.85, 0.5]],
            ],
        ),
        ("S", vec![{
            let mut s = arc(0.5, 0.75, 0.25, 0.1 * PI, 1.5 * PI, 8);
            s.extend(arc(0.5, 0.25, 0.25, 0.5 * PI, -0.9 * PI, 8).into_iter().skip(1));
            s
        }]),
        ("2", vec![{
            let mut s = arc(0.5, 0.7, 0.3, 0.9 * PI, -0.2 * PI, 8);
            s.extend([[0.1, 0.0], [0.9, 0.0]]);
            s
        }]),
        (
            "口",
            vec![
                vec![[0.1, 0.9], [0.1, 0.1]],
                vec![[0.1, 0.9], [0.9, 0.9], [0.9, 0.1]],
                vec![[0.1, 0.1], [0.9, 0.1]],
            ],
        ),
        ("人", vec![vec![[0.5, 1.0], [0.45, 0.5], [0.05, 0.0]], vec![[0.48, 0.55], [0.95, 0.0]]]),
        ("?", vec![{
            let mut s = arc(0.5, 0.72, 0.28, 0.9 * PI, -0.5 * PI, 8);
            s.push([0.5, 0.25]);
            s
        }, vec![[0.5, 0.08], [0.5, 0.0]]]),
    ];
    defs.into_iter()
        .map(|(l, s)| GlyphTemplate::new(l, s).expect("built-in glyphs are valid"))
        .collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-sample seed derived from a writer seed and an index.
pub fn sample_seed(writer_seed: u64, index: u64) -> u64 {
    splitmix(writer_seed ^ splitmix(index.wrapping_add(1)))
}

/// `n` writers with distinct ids and styles drawn from `seed`.
pub fn make_writers(n: usize, seed: u64) -> Vec<WriterStyle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| WriterStyle {
            writer_id: format!("w{i:05}"),
            slant: rng.gen_range(-0.6..0.6),
            scale_x: rng.gen_range(0.6..1.6),
            scale_y: rng.gen_range(0.6..1.6),
            tremor: rng.gen_range(0.0..0.04),
            drift: rng.gen_range(-0.25..0.25),
            seed: rng.gen(),
        })
        .collect()
}

/// Resamples a polyline at uniform arc-length spacing.
fn resample(stroke: &[Point]) -> Vec<Point> {
    let seg: Vec<f64> = stroke
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .collect();
    let total: f64 = seg.iter().sum();
    if stroke.len() < 2 || total == 0.0 {
        return stroke.to_vec();
    }
    let n = ((total * POINTS_PER_UNIT).round() as usize).max(2);
    let mut out = Vec::with_capacity(n);
    let (mut k, mut walked) = (0, 0.0);
    for i in 0..n {
        let target = total * i as f64 / (n - 1) as f64;
        while k + 1 < seg.len() && walked + seg[k] < target {
            walked += seg[k];
            k += 1;
        }
        let t = if seg[k] > 0.0 {
            ((target - walked) / seg[k]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (a, b) = (stroke[k], stroke[k + 1]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out
}

/// Renders one sample of `glyph` in `style`.
pub fn render(style: &WriterStyle, glyph: &GlyphTemplate, sample_seed: u64) -> RawTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut strokes: Vec<Vec<Point>> = glyph
        .strokes
        .iter()
        .map(|s| {
            resample(s)
                .into_iter()
                .map(|[x, y]| {
                    let x = style.scale_x * (x + style.slant * y);
                    let y = style.scale_y * y + style.drift * x;
                    [x, y]
                })
                .collect()
        })
        .collect();

    if style.tremor > 0.0 {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in strokes.iter().flatten() {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let size = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let amp = style.tremor * size;
        let base_freq = style.tremor_frequency();
        for s in &mut strokes {
            let n = s.len().max(2) as f64;
            for axis in 0..2 {
                let terms: Vec<(f64, f64, f64)> = (0..TREMOR_TERMS)
                    .map(|k| {
                        (
                            rng.gen_range(-1.0..1.0),
                            base_freq * (k + 1) as f64 * rng.gen_range(0.9..1.1),
                            rng.gen_range(0.0..std::f64::consts::TAU),
                        )
                    })
                    .collect();
                for (i, p) in s.iter_mut().enumerate() {
                    let t = i as f64 / (n - 1.0);
                    let j: f64 = terms
                        .iter()
                        .map(|(a, f, ph)| a * (std::f64::consts::TAU * f * t + ph).sin())
                        .sum();
                    p[axis] += amp * j / TREMOR_TERMS as f64;
                }
            }
        }
    }

    RawTrajectory {
        writer_id: style.writer_id.clone(),
        label: glyph.label.clone(),
        strokes,
    }
}

/// Mean Euclidean distance between corresponding points of two
/// trajectories with equal point counts.
pub fn mean_point_distance(a: &RawTrajectory, b: &RawTrajectory) -> Option<f64> {
    if a.n_points() != b.n_points() || a.n_points() == 0 {
        return None;
    }
    let total: f64 = a
        .points()
        .zip(b.points())
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum();
    Some(total / a.n_points() as f64)
}

/// All records of `writers`, `chars_per_writer` each, cycling through
/// `glyphs`. Record order is writer-major.
pub fn generate(
    writers: &[WriterStyle],
    chars_per_writer: usize,
    glyphs: &[GlyphTemplate],
) -> Result<Vec<RawTrajectory>> {
    if glyphs.is_empty() {
        return Err(Error::Config("glyph set is empty".into()));
    }
    let per_writer: Vec<Vec<RawTrajectory>> = writers
        .par_iter()
        .map(|w| {
            (0..chars_per_writer)
                .map(|j| render(w, &glyphs[j % glyphs.len()], sample_seed(w.seed, j as u64)))
                .collect()
        })
        .collect();
    Ok(per_writer.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub records: usize,
    pub train_writers: usize,
    pub val_writers: usize,
    pub train_records: usize,
    pub val_records: usize,
}

/// Generates `n_writers × chars_per_writer` records and writes them as
/// JSONL. The first 80% of writers in file order form the training split.
pub fn build_dataset(
    n_writers: usize,
    chars_per_writer: usize,
    glyphs: &[GlyphTemplate],
    seed: u64,
    out_path: impl AsRef<Path>,
) -> Result<DatasetSummary> {
    if n_writers == 0 {
        return Err(Error::Config("need at least one writer".into()));
    }
    let records = generate(&make_writers(n_writers, seed), chars_per_writer, glyphs)?;
    trajio::save_jsonl(&records, out_path)?;
    let train_writers = trajio::train_writer_count(n_writers);
    let (train, val) = trajio::split_by_writer(&records, train_writers);
    Ok(DatasetSummary {
        records: records.len(),
        train_writers,
        val_writers: n_writers - train_writers,
        train_records: train.len(),
        val_records: val.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajio::{normalize, tokenize};

    #[test]
    fn writers_are_deterministic_and_distinct() {
        assert_eq!(make_writers(1, 3).len(), 1);
        let a = make_writers(50, 9);
        assert_eq!(a, make_writers(50, 9));
        assert_ne!(a, make_writers(50, 10));
        let ids: std::collections::HashSet<_> = a.iter().map(|w| &w.writer_id).collect();
        assert_eq!(ids.len(), 50);
        assert!(a.iter().all(|w| w.validate().is_ok()));
    }

    #[test]
    fn many_writers_are_fast() {
        let t = std::time::Instant::now();
        let w = make_writers(816, 1);
        assert_eq!(w.len(), 816);
        assert!(t.elapsed().as_secs_f64() < 1.0);
    }

    #[test]
    fn neutral_style_reproduces_template() {
        let glyph = GlyphTemplate::new("l", vec![vec![[0.0, 0.0], [0.0, 1.0]]]).unwrap();
        let r = render(&WriterStyle::neutral("n"), &glyph, 42);
        let s = &r.strokes[0];
        assert_eq!(s.len(), 22);
        assert_eq!(s[0], [0.0, 0.0]);
        assert!((s[21][1] - 1.0).abs() < 1e-12);
        assert!(s.iter().all(|p| p[0] == 0.0));
        assert_eq!(r, render(&WriterStyle::neutral("n"), &glyph, 43));
    }

    #[test]
    fn same_style_samples_are_near() {
        let glyphs = builtin_glyphs();
        for w in make_writers(20, 5) {
            for g in &glyphs {
                let a = render(&w, g, 1);
                let b = render(&w, g, 2);
                let d = mean_point_distance(&a, &b).unwrap();
                let (lo, hi) = a.points().fold(
                    ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]),
                    |(mut lo, mut hi), p| {
                        for k in 0..2 {
                            lo[k] = lo[k].min(p[k]);
                            hi[k] = hi[k].max(p[k]);
                        }
                        (lo, hi)
                    },
                );
                let size = (hi[0] - lo[0]).max(hi[1] - lo[1]);
                if w.tremor > 0.0 {
                    assert!(a != b);
                }
                assert!(d <= 2.0 * w.tremor * size, "{d} vs {}", w.tremor * size);
            }
        }
    }

    #[test]
    fn generated_records_preprocess() {
        let recs = generate(&make_writers(30, 2), 14, &builtin_glyphs()).unwrap();
        for r in &recs {
            let t = tokenize(&normalize(r).unwrap()).unwrap();
            assert!(t.content_len <= 800);
        }
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let s = build_dataset(10, 4, &builtin_glyphs(), 1, &p).unwrap();
        assert_eq!(s.records, 40);
        assert_eq!((s.train_writers, s.val_writers), (8, 2));
        assert_eq!((s.train_records, s.val_records), (32, 8));
        let first = std::fs::read(&p).unwrap();
        build_dataset(10, 4, &builtin_glyphs(), 1, &p).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
    }
}
