//! Open-set evaluation: rank-1 identification and same/different pair
//! classification over random writer selections, and the crop-length
//! distance analysis.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Graph;
use crate::model::{discriminator_logits, DiscInput, Groups, ModelParams};
use crate::trajio::{crop, preprocess, writer_order, PatchSequence, RawTrajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Rank1,
    Pairs,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank1" => Ok(Protocol::Rank1),
            "pairs" => Ok(Protocol::Pairs),
            _ => Err(Error::Config(format!("unknown protocol {s:?} (rank1, pairs)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSpec {
    pub n_writers: usize,
    pub chars_per_writer: usize,
    pub n_selections: usize,
    pub seed: u64,
    pub protocol: Protocol,
}

impl Default for SelectionSpec {
    fn default() -> Self {
        Self {
            n_writers: 20,
            chars_per_writer: 2,
            n_selections: 100,
            seed: 0,
            protocol: Protocol::Pairs,
        }
    }
}

impl SelectionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_writers < 2 {
            return Err(Error::Config("n_writers must be at least 2".into()));
        }
        let min_chars = match self.protocol {
            Protocol::Rank1 => 2,
            Protocol::Pairs => 1,
        };
        if self.chars_per_writer < min_chars {
            return Err(Error::Config(format!(
                "chars_per_writer must be at least {min_chars} for {:?}",
                self.protocol
            )));
        }
        if self.n_selections == 0 {
            return Err(Error::Config("n_selections must be at least 1".into()));
        }
        Ok(())
    }
}

/// Maps one preprocessed trajectory to a fixed-length vector.
pub trait Embedder: Sync {
    fn embed(&self, s: &PatchSequence) -> Result<Vec<f64>>;
}

/// Decides whether two embeddings come from the same writer.
pub trait PairClassifier: Sync {
    fn same_writer(&self, a: &[f64], b: &[f64]) -> Result<bool>;
}

/// Encoder with full visibility, summarized in the given space.
pub struct ModelEmbedder<'a> {
    pub params: &'a ModelParams,
    pub space: DiscInput,
}

impl<'a> ModelEmbedder<'a> {
    /// Unit-norm projector outputs, used for rank-1 and distances.
    pub fn projector(params: &'a ModelParams) -> Self {
        Self {
            params,
            space: DiscInput::Projected,
        }
    }

    /// Whatever the discriminator was trained on.
    pub fn discriminator_input(params: &'a ModelParams) -> Self {
        Self {
            params,
            space: params.config.disc_input,
        }
    }
}

impl Embedder for ModelEmbedder<'_> {
    fn embed(&self, s: &PatchSequence) -> Result<Vec<f64>> {
        self.params.embed(s, self.space)
    }
}

/// The trained discriminator, thresholded by argmax.
pub struct ModelDiscriminator<'a>(pub &'a ModelParams);

impl ModelDiscriminator<'_> {
    /// `(p_same, p_different)`.
    pub fn probabilities(&self, a: &[f64], b: &[f64]) -> Result<[f64; 2]> {
        let mut g = Graph::new();
        let net = self.0.bind(&mut g, Groups::NONE);
        let za = g.constant(vec![1, a.len()], a.to_vec())?;
        let zb = g.constant(vec![1, b.len()], b.to_vec())?;
        let l = discriminator_logits(&mut g, &net.discriminator, &self.0.config, za, zb)?;
        let p = g.softmax(l, 1)?;
        Ok([g.value(p)[0], g.value(p)[1]])
    }
}

impl PairClassifier for ModelDiscriminator<'_> {
    fn same_writer(&self, a: &[f64], b: &[f64]) -> Result<bool> {
        let [same, diff] = self.probabilities(a, b)?;
        Ok(same > diff)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// `None` when nothing was predicted positive.
    pub fn precision(&self) -> Option<f64> {
        let p = self.tp + self.fp;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMetrics {
    pub selection: usize,
    pub rank1: Option<f64>,
    pub confusion: Option<Confusion>,
}

/// Mean and population standard deviation over the selections where the
/// metric is defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub defined: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            defined: values.len(),
        })
    }

    /// `"mean (std)"` in percent with one decimal.
    pub fn percent(&self) -> String {
        format!("{:.1} ({:.1})", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionReport {
    pub protocol: Protocol,
    pub selections: Vec<SelectionMetrics>,
}

impl SelectionReport {
    pub fn rank1(&self) -> Option<Summary> {
        let v: Vec<f64> = self.selections.iter().filter_map(|s| s.rank1).collect();
        Summary::of(&v)
    }

    pub fn accuracy(&self) -> Option<Summary> {
        let v: Vec<f64> = self
            .selections
            .iter()
            .filter_map(|s| s.confusion.map(|c| c.accuracy()))
            .collect();
        Summary::of(&v)
    }

    /// Over selections with defined precision only; see
    /// [`SelectionReport::undefined_precision`].
    pub fn precision(&self) -> Option<Summary> {
        let v: Vec<f64> = self
            .selections
            .iter()
            .filter_map(|s| s.confusion.and_then(|c| c.precision()))
            .collect();
        Summary::of(&v)
    }

    /// Selections in which no pair was predicted positive.
    pub fn undefined_precision(&self) -> usize {
        self.selections
            .iter()
            .filter(|s| s.confusion.is_some_and(|c| c.precision().is_none()))
            .count()
    }

    pub fn confusion(&self) -> Confusion {
        let mut c = Confusion::default();
        for s in self.selections.iter().filter_map(|s| s.confusion) {
            c.tp += s.tp;
            c.fp += s.fp;
            c.tn += s.tn;
            c.fn_ += s.fn_;
        }
        c
    }

    /// One row per selection, then `mean` and `std` rows. Undefined values
    /// are empty cells.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "selection_id", "rank1", "accuracy", "precision", "tp", "fp", "tn", "fn",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.selections {
            let c = s.confusion;
            let count = |f: fn(&Confusion) -> usize| c.map(|c| f(&c).to_string()).unwrap_or_default();
            out.write_record([
                s.selection.to_string(),
                opt(s.rank1),
                opt(c.map(|c| c.accuracy())),
                opt(c.and_then(|c| c.precision())),
                count(|c| c.tp),
                count(|c| c.fp),
                count(|c| c.tn),
                count(|c| c.fn_),
            ])?;
        }
        let sums = [self.rank1(), self.accuracy(), self.precision()];
        for (name, f) in [("mean", 0), ("std", 1)] {
            let cell = |s: Option<Summary>| opt(s.map(|s| if f == 0 { s.mean } else { s.std }));
            out.write_record([
                name.to_string(),
                cell(sums[0]),
                cell(sums[1]),
                cell(sums[2]),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

/// Every record embedded once, grouped by writer in first-appearance order.
struct Embedded {
    by_writer: Vec<Vec<Vec<f64>>>,
}

fn embed_all<E: Embedder + ?Sized>(embedder: &E, records: &[RawTrajectory]) -> Result<Embedded> {
    let writers = writer_order(records);
    let index: HashMap<&str, usize> = writers
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i))
        .collect();
    let vectors: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| embedder.embed(&preprocess(r)?))
        .collect::<Result<_>>()?;
    let mut by_writer = vec![Vec::new(); writers.len()];
    for (r, v) in records.iter().zip(vectors) {
        by_writer[index[r.writer_id.as_str()]].push(v);
    }
    Ok(Embedded { by_writer })
}

fn selection_rng(seed: u64, selection: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(selection as u64);
    rng
}

/// Writers and, per writer, sample indices drawn without replacement.
fn draw(data: &Embedded, spec: &SelectionSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, Vec<usize>)> {
    sample(rng, data.by_writer.len(), spec.n_writers)
        .into_iter()
        .map(|w| {
            let picks = sample(rng, data.by_writer[w].len(), spec.chars_per_writer).into_vec();
            (w, picks)
        })
        .collect()
}

fn check_population(data: &Embedded, spec: &SelectionSpec, records: &[RawTrajectory]) -> Result<()> {
    if data.by_writer.len() < spec.n_writers {
        return Err(Error::Selection(format!(
            "{} writers requested per selection, dataset has {}",
            spec.n_writers,
            data.by_writer.len()
        )));
    }
    let names = writer_order(records);
    for (w, v) in data.by_writer.iter().enumerate() {
        if v.len() < spec.chars_per_writer {
            return Err(Error::Selection(format!(
                "writer {} has {} samples, {} needed",
                names[w],
                v.len(),
                spec.chars_per_writer
            )));
        }
    }
    Ok(())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Rank-1 identification. Per selection and writer, the first drawn
/// sample is the gallery entry and the others are probes; a probe is
/// correct when its most cosine-similar gallery entry is its own writer.
/// Exact ties are broken uniformly at random.
pub fn eval_rank1<E: Embedder + ?Sized>(
    embedder: &E,
    records: &[RawTrajectory],
    spec: &SelectionSpec,
) -> Result<SelectionReport> {
    let spec = SelectionSpec {
        protocol: Protocol::Rank1,
        ..spec.clone()
    };
    spec.validate()?;
    let data = embed_all(embedder, records)?;
    check_population(&data, &spec, records)?;
    let selections = (0..spec.n_selections)
        .into_par_iter()
        .map(|sel| {
            let mut rng = selection_rng(spec.seed, sel);
            let drawn = draw(&data, &spec, &mut rng);
            let gallery: Vec<&[f64]> = drawn
                .iter()
                .map(|(w, p)| data.by_writer[*w][p[0]].as_slice())
                .collect();
            let (mut correct, mut probes) = (0, 0);
            for (owner, (w, picks)) in drawn.iter().enumerate() {
                for &p in &picks[1..] {
                    let probe = &data.by_writer[*w][p];
                    let sims: Vec<f64> = gallery.iter().map(|g| cosine(probe, g)).collect();
                    let best = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let tied: Vec<usize> = (0..sims.len()).filter(|&i| sims[i] == best).collect();
                    let pick = tied[rng.gen_range(0..tied.len())];
                    correct += usize::from(pick == owner);
                    probes += 1;
                }
            }
            SelectionMetrics {
                selection: sel,
                rank1: Some(correct as f64 / probes as f64),
                confusion: None,
            }
        })
        .collect();
    Ok(SelectionReport {
        protocol: Protocol::Rank1,
        selections,
    })
}

/// Pair classification. Per selection, every unordered pair of the
/// `n_writers × chars_per_writer` drawn samples is classified; positives
/// are same-writer pairs.
pub fn eval_pairs<E: Embedder + ?Sized, C: PairClassifier + ?Sized>(
    embedder: &E,
    classifier: &C,
    records: &[RawTrajectory],
    spec: &SelectionSpec,
) -> Result<SelectionReport> {
    let spec = SelectionSpec {
        protocol: Protocol::Pairs,
        ..spec.clone()
    };
    spec.validate()?;
    let data = embed_all(embedder, records)?;
    check_population(&data, &spec, records)?;
    let selections = (0..spec.n_selections)
        .into_par_iter()
        .map(|sel| {
            let mut rng = selection_rng(spec.seed, sel);
            let items: Vec<(usize, &[f64])> = draw(&data, &spec, &mut rng)
                .into_iter()
                .flat_map(|(w, picks)| {
                    let data = &data;
                    picks.into_iter().map(move |p| (w, data.by_writer[w][p].as_slice()))
                })
                .collect();
            let mut c = Confusion::default();
            for i in 0..items.len() {
                for j in i + 1..items.len() {
                    let predicted = classifier.same_writer(items[i].1, items[j].1)?;
                    c.add(predicted, items[i].0 == items[j].0);
                }
            }
            Ok(SelectionMetrics {
                selection: sel,
                rank1: None,
                confusion: Some(c),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SelectionReport {
        protocol: Protocol::Pairs,
        selections,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthSpec {
    /// Crop budgets in trajectory rows (points plus pen tokens).
    pub lengths: Vec<usize>,
    pub pairs_per_cell: usize,
    pub seed: u64,
    /// Pair each trajectory with itself instead of another sample of the
    /// same writer.
    pub same_trajectory: bool,
}

impl Default for LengthSpec {
    fn default() -> Self {
        Self {
            lengths: (20..=200).step_by(20).collect(),
            pairs_per_cell: 50,
            seed: 0,
            same_trajectory: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub lengths: Vec<usize>,
    /// `cells[a][b]`: mean distance with the first trajectory cropped to
    /// `lengths[a]` and the second to `lengths[b]`.
    pub cells: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    /// Mean over the cells where both lengths satisfy `keep`.
    pub fn block_mean(&self, keep: impl Fn(usize) -> bool) -> Option<f64> {
        let mut v = Vec::new();
        for (a, &la) in self.lengths.iter().enumerate() {
            for (b, &lb) in self.lengths.iter().enumerate() {
                if keep(la) && keep(lb) {
                    v.push(self.cells[a][b]);
                }
            }
        }
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["length".to_string()];
        header.extend(self.lengths.iter().map(usize::to_string));
        out.write_record(&header)?;
        for (l, row) in self.lengths.iter().zip(&self.cells) {
            let mut rec = vec![l.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

/// Mean Euclidean embedding distance between same-writer trajectories
/// cropped to each pair of lengths. Both crops of a pair share one crop
/// seed, so an identical trajectory at equal lengths gives distance 0.
/// A trajectory qualifies for a cell only if it is at least as long as
/// both lengths.
pub fn length_distance_matrix<E: Embedder + ?Sized>(
    embedder: &E,
    records: &[RawTrajectory],
    spec: &LengthSpec,
) -> Result<DistanceMatrix> {
    if spec.lengths.is_empty() || spec.pairs_per_cell == 0 {
        return Err(Error::Config("lengths and pairs_per_cell must be non-empty".into()));
    }
    let writers = writer_order(records);
    let index: HashMap<&str, usize> = writers
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i))
        .collect();
    let mut by_writer: Vec<Vec<&RawTrajectory>> = vec![Vec::new(); writers.len()];
    for r in records {
        by_writer[index[r.writer_id.as_str()]].push(r);
    }
    let need = if spec.same_trajectory { 1 } else { 2 };
    let n = spec.lengths.len();
    let candidates = |l: usize| -> Vec<Vec<&RawTrajectory>> {
        by_writer
            .iter()
            .map(|rs| rs.iter().copied().filter(|r| r.token_len() >= l).collect::<Vec<_>>())
            .filter(|rs| rs.len() >= need)
            .collect()
    };
    let uncovered: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .map(|(a, b)| (spec.lengths[a], spec.lengths[b]))
        .filter(|&(la, lb)| candidates(la.max(lb)).is_empty())
        .collect();
    if !uncovered.is_empty() {
        return Err(Error::Coverage { cells: uncovered });
    }

    let cells: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|cell| {
            let (la, lb) = (spec.lengths[cell / n], spec.lengths[cell % n]);
            let pool = candidates(la.max(lb));
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(cell as u64);
            let mut total = 0.0;
            for _ in 0..spec.pairs_per_cell {
                let rs = &pool[rng.gen_range(0..pool.len())];
                let (i, j) = if spec.same_trajectory {
                    let i = rng.gen_range(0..rs.len());
                    (i, i)
                } else {
                    let v = sample(&mut rng, rs.len(), 2);
                    (v.index(0), v.index(1))
                };
                let seed: u64 = rng.gen();
                let a = embedder.embed(&preprocess(&crop(rs[i], la, seed))?)?;
                let b = embedder.embed(&preprocess(&crop(rs[j], lb, seed))?)?;
                total += euclidean(&a, &b);
            }
            Ok(total / spec.pairs_per_cell as f64)
        })
        .collect::<Result<_>>()?;
    Ok(DistanceMatrix {
        lengths: spec.lengths.clone(),
        cells: cells.chunks(n).map(<[f64]>::to_vec).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(writers: usize, per: usize) -> Vec<RawTrajectory> {
        let mut out = Vec::new();
        for w in 0..writers {
            for c in 0..per {
                let x = 0.1 + 0.01 * c as f64;
                out.push(RawTrajectory {
                    writer_id: format!("w{w}"),
                    label: format!("c{c}"),
                    strokes: vec![(0..30)
                        .map(|k| [x + 0.02 * k as f64, 0.1 + 0.005 * (k * (w + 1)) as f64])
                        .collect()],
                });
            }
        }
        out
    }

    /// Oracle that reads the writer back out of the trajectory shape.
    struct WriterOneHot(usize);

    impl Embedder for WriterOneHot {
        fn embed(&self, s: &PatchSequence) -> Result<Vec<f64>> {
            // vertical extent relative to horizontal encodes the writer
            let t = crate::trajio::unpatchify(s);
            let pts: Vec<_> = t.points.iter().filter(|p| !crate::trajio::is_token(p)).collect();
            let dy = pts.last().unwrap()[1] - pts[0][1];
            let dx = pts.last().unwrap()[0] - pts[0][0];
            let w = ((dy / dx) / 0.25).round() as usize - 1;
            let mut v = vec![0.0; self.0];
            v[w] = 1.0;
            Ok(v)
        }
    }

    struct Constant;

    impl Embedder for Constant {
        fn embed(&self, _: &PatchSequence) -> Result<Vec<f64>> {
            Ok(vec![1.0, 2.0])
        }
    }

    struct Never;

    impl PairClassifier for Never {
        fn same_writer(&self, _: &[f64], _: &[f64]) -> Result<bool> {
            Ok(false)
        }
    }

    struct Exact;

    impl PairClassifier for Exact {
        fn same_writer(&self, a: &[f64], b: &[f64]) -> Result<bool> {
            Ok(a == b)
        }
    }

    #[test]
    fn oracle_embedder_is_perfect() {
        let data = toy(6, 3);
        let spec = SelectionSpec {
            n_writers: 5,
            n_selections: 20,
            ..SelectionSpec::default()
        };
        let r = eval_rank1(&WriterOneHot(6), &data, &spec).unwrap();
        assert_eq!(r.rank1().unwrap().mean, 1.0);
        let r = eval_pairs(&WriterOneHot(6), &Exact, &data, &spec).unwrap();
        assert_eq!(r.accuracy().unwrap().mean, 1.0);
        assert_eq!(r.precision().unwrap().mean, 1.0);
    }

    #[test]
    fn constant_embedder_is_at_chance() {
        let data = toy(20, 2);
        let spec = SelectionSpec {
            n_selections: 2000,
            ..SelectionSpec::default()
        };
        let r = eval_rank1(&Constant, &data, &spec).unwrap();
        let m = r.rank1().unwrap().mean;
        // binomial sd of the mean: sqrt(0.05·0.95/40000) ≈ 0.0011
        assert!((m - 0.05).abs() < 0.005, "{m}");
    }

    #[test]
    fn all_negative_baseline() {
        let data = toy(20, 2);
        let spec = SelectionSpec {
            n_selections: 3,
            ..SelectionSpec::default()
        };
        let r = eval_pairs(&Constant, &Never, &data, &spec).unwrap();
        let c = r.confusion();
        assert_eq!(c.total(), 780 * 3);
        assert_eq!(c.fn_, 60);
        assert!((r.accuracy().unwrap().mean - 760.0 / 780.0).abs() < 1e-15);
        assert!(r.precision().is_none());
        assert_eq!(r.undefined_precision(), 3);
    }

    #[test]
    fn selections_are_deterministic() {
        let data = toy(8, 4);
        let spec = SelectionSpec {
            n_writers: 4,
            n_selections: 10,
            seed: 9,
            ..SelectionSpec::default()
        };
        let a = eval_rank1(&Constant, &data, &spec).unwrap();
        let b = eval_rank1(&Constant, &data, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_writer_is_a_selection_error() {
        let mut data = toy(4, 2);
        data.pop();
        let spec = SelectionSpec {
            n_writers: 2,
            ..SelectionSpec::default()
        };
        assert!(matches!(
            eval_rank1(&Constant, &data, &spec),
            Err(Error::Selection(_))
        ));
    }

    #[test]
    fn summary_uses_population_std() {
        let s = Summary::of(&[0.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.std), (0.5, 0.5));
        assert_eq!(s.percent(), "50.0 (50.0)");
    }

    #[test]
    fn report_csv_layout() {
        let data = toy(4, 2);
        let spec = SelectionSpec {
            n_writers: 3,
            n_selections: 2,
            ..SelectionSpec::default()
        };
        let r = eval_pairs(&Constant, &Never, &data, &spec).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "selection_id,rank1,accuracy,precision,tp,fp,tn,fn");
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("mean,,0.8,"));
    }

    #[test]
    fn identical_trajectory_diagonal_is_zero() {
        let data = toy(3, 2);
        let spec = LengthSpec {
            lengths: vec![10, 20, 30],
            pairs_per_cell: 5,
            seed: 1,
            same_trajectory: true,
        };
        let m = length_distance_matrix(&WriterOneHotish, &data, &spec).unwrap();
        for a in 0..3 {
            assert_eq!(m.cells[a][a], 0.0);
        }
    }

    /// Sensitive to every coordinate, so different crops almost never
    /// collide.
    struct WriterOneHotish;

    impl Embedder for WriterOneHotish {
        fn embed(&self, s: &PatchSequence) -> Result<Vec<f64>> {
            let flat: f64 = s.patches.iter().flatten().enumerate().map(|(i, v)| v * (i % 7) as f64).sum();
            Ok(vec![flat, s.n_unpadded as f64])
        }
    }

    #[test]
    fn coverage_error_lists_cells() {
        let data = toy(3, 2);
        let spec = LengthSpec {
            lengths: vec![20, 500],
            pairs_per_cell: 2,
            seed: 0,
            same_trajectory: false,
        };
        match length_distance_matrix(&Constant, &data, &spec) {
            Err(Error::Coverage { cells }) => {
                assert_eq!(cells, vec![(20, 500), (500, 20), (500, 500)])
            }
            other => panic!("{other:?}"),
        }
    }
}
