//! STEP 1 representation pretraining, STEP 2 discriminator training, the
//! optimizer and the ablation harness.

mod ablation;
mod optim;

use std::borrow::Cow;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Graph;
use crate::maskplan::MaskPlan;
use crate::model::{
    decode, discriminator_logits, embed_var, encode, project, Cmae, Groups, ModelParams,
};
use crate::objectives::{
    combine, pair_ce_from_logits, reconstruction_loss, supcon_loss, LossWeights, PairLabel,
};
use crate::trajio::{preprocess, writer_order, PatchSequence, RawTrajectory};

pub use ablation::{run_ablation, save_ablation_csv, write_ablation_csv, AblationRow, RunSpec};
pub use optim::{optimizer_step, Adam};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    NoCl,
    NoMae,
    NoRlp,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoCl => "no_cl",
            Mode::NoMae => "no_mae",
            Mode::NoRlp => "no_rlp",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "no_cl" => Ok(Mode::NoCl),
            "no_mae" => Ok(Mode::NoMae),
            "no_rlp" => Ok(Mode::NoRlp),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (full, no_cl, no_mae, no_rlp)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mask_ratio: f64,
    pub lambda: f64,
    pub temperature: f64,
    /// Writers per contrastive batch; each contributes two samples.
    pub batch_writers: usize,
    pub pretrain_epochs: usize,
    pub disc_epochs: usize,
    /// Pairs per discriminator batch, half of them same-writer.
    pub disc_batch_pairs: usize,
    /// Embeddings per sample precomputed for a frozen encoder: one with
    /// every patch visible plus `disc_views − 1` under random masks.
    pub disc_views: usize,
    pub learning_rate: f64,
    /// Magnitude of the random shear, aspect and slant applied per writer
    /// and batch during training; 0 disables it.
    pub style_jitter: f64,
    pub seed: u64,
    pub freeze_encoder_step2: bool,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.15,
            lambda: 0.5,
            temperature: 0.07,
            batch_writers: 8,
            pretrain_epochs: 50,
            disc_epochs: 50,
            disc_batch_pairs: 32,
            disc_views: 8,
            learning_rate: 1e-3,
            style_jitter: 0.3,
            seed: 0,
            freeze_encoder_step2: true,
            mode: Mode::Full,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            supcon_temperature: self.temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio {} outside (0,1)",
                self.mask_ratio
            )));
        }
        self.weights().validate()?;
        if self.batch_writers < 2 {
            return Err(Error::Config("batch_writers must be at least 2".into()));
        }
        if self.pretrain_epochs == 0 || self.disc_epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.disc_batch_pairs < 2 || !self.disc_batch_pairs.is_multiple_of(2) {
            return Err(Error::Config(
                "disc_batch_pairs must be even and at least 2".into(),
            ));
        }
        if self.disc_views == 0 {
            return Err(Error::Config("disc_views must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.style_jitter) {
            return Err(Error::Config(format!(
                "style_jitter {} outside [0,1)",
                self.style_jitter
            )));
        }
        Ok(())
    }

    /// Arrays updated in STEP 1.
    pub fn pretrain_groups(&self) -> Groups {
        let (re, cl) = match self.mode {
            Mode::Full => (true, true),
            Mode::NoCl => (true, false),
            Mode::NoMae => (false, true),
            Mode::NoRlp => (false, false),
        };
        Groups {
            encoder: re || cl,
            decoder: re,
            projector: cl,
            discriminator: false,
        }
    }

    /// Whether STEP 2 updates the encoder along with the discriminator:
    /// always in `no_rlp`, where the encoder is otherwise untrained.
    pub fn joint_step2(&self) -> bool {
        self.mode == Mode::NoRlp || !self.freeze_encoder_step2
    }
}

/// One epoch of one stage: mean losses over its steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_re: Option<f64>,
    pub l_cl: Option<f64>,
    pub l_total: Option<f64>,
    pub l_ce: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// Records with wall time removed, for determinism comparisons.
    pub fn losses(&self) -> Vec<[Option<u64>; 4]> {
        self.records
            .iter()
            .map(|r| [r.l_re, r.l_cl, r.l_total, r.l_ce].map(|v| v.map(f64::to_bits)))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        if self.records.is_empty() {
            out.write_record(["epoch", "l_re", "l_cl", "l_total", "l_ce", "seconds"])?;
        }
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

/// Preprocessed training samples grouped by writer, in first-appearance
/// order. Sequences with a single unpadded patch cannot be masked and are
/// left out.
#[derive(Clone, Debug)]
pub struct WriterPool {
    pub writers: Vec<String>,
    pub samples: Vec<Vec<PatchSequence>>,
    pub raw: Vec<Vec<RawTrajectory>>,
}

impl WriterPool {
    pub fn new(records: &[RawTrajectory]) -> Result<Self> {
        let writers = writer_order(records);
        let index: HashMap<&str, usize> = writers
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i))
            .collect();
        let mut samples = vec![Vec::new(); writers.len()];
        let mut raw = vec![Vec::new(); writers.len()];
        for r in records {
            let s = preprocess(r)?;
            if s.n_unpadded >= 2 {
                samples[index[r.writer_id.as_str()]].push(s);
                raw[index[r.writer_id.as_str()]].push(r.clone());
            }
        }
        Ok(Self { writers, samples, raw })
    }

    /// Writers with at least two usable samples.
    pub fn eligible(&self) -> Vec<usize> {
        (0..self.writers.len())
            .filter(|&w| self.samples[w].len() >= 2)
            .collect()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.iter().map(Vec::len).sum()
    }

    fn require(&self, k: usize) -> Result<Vec<usize>> {
        let e = self.eligible();
        if e.len() < k {
            return Err(Error::Dataset(format!(
                "need at least {k} writers with two or more samples, found {}",
                e.len()
            )));
        }
        Ok(e)
    }
}

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

fn two_of<R: Rng>(n: usize, rng: &mut R) -> (usize, usize) {
    let v = sample(rng, n, 2);
    (v.index(0), v.index(1))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// A random affine distortion shared by every sample of one writer in a
/// batch. Writer identity survives it, so the encoder learns to ignore
/// global shape changes that the few training writers cannot cover.
#[derive(Clone, Copy, Debug)]
struct StyleJitter {
    shear: f64,
    aspect: f64,
    slant: f64,
}

impl StyleJitter {
    fn draw<R: Rng>(mag: f64, rng: &mut R) -> Option<Self> {
        if mag == 0.0 {
            return None;
        }
        Some(Self {
            shear: rng.gen_range(-mag..mag),
            aspect: rng.gen_range(-mag..mag).exp(),
            slant: 0.5 * rng.gen_range(-mag..mag),
        })
    }

    fn apply(&self, r: &RawTrajectory) -> Result<PatchSequence> {
        let mut out = r.clone();
        for p in out.strokes.iter_mut().flatten() {
            let x = self.aspect * (p[0] + self.shear * p[1]);
            *p = [x, p[1] / self.aspect + self.slant * x];
        }
        preprocess(&out)
    }
}

/// STEP 1: masked reconstruction plus supervised contrastive training of
/// the encoder. Each step draws `batch_writers` writers and two samples of
/// each; an epoch covers roughly every sample once. Skipped in `no_rlp`.
pub fn pretrain(pool: &WriterPool, cfg: &TrainConfig, params: &mut ModelParams) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog {
        seed: cfg.seed,
        records: Vec::new(),
    };
    if cfg.mode == Mode::NoRlp {
        return Ok(log);
    }
    let eligible = pool.require(cfg.batch_writers)?;
    let k = cfg.batch_writers;
    let groups = cfg.pretrain_groups();
    let (use_re, use_cl) = (groups.decoder, groups.projector);
    let weights = cfg.weights();
    let steps = pool.n_samples().div_ceil(2 * k).max(1);
    let mut rng = stage_rng(cfg.seed, 1);
    let mut adam = Adam::new();
    let model_cfg = params.config.clone();

    for epoch in 1..=cfg.pretrain_epochs {
        let start = Instant::now();
        let (mut re, mut cl, mut tot) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..steps {
            let mut batch = Vec::with_capacity(2 * k);
            let mut labels = Vec::with_capacity(2 * k);
            for w in sample(&mut rng, eligible.len(), k) {
                let w = eligible[w];
                let (a, b) = two_of(pool.samples[w].len(), &mut rng);
                let jitter = StyleJitter::draw(cfg.style_jitter, &mut rng);
                for s in [a, b] {
                    let seq = match jitter {
                        Some(t) => Cow::Owned(t.apply(&pool.raw[w][s])?),
                        None => Cow::Borrowed(&pool.samples[w][s]),
                    };
                    let plan = MaskPlan::plan(seq.n_unpadded, cfg.mask_ratio, &mut rng)?;
                    batch.push((seq, plan));
                    labels.push(w);
                }
            }

            let mut g = Graph::new();
            let net = params.bind(&mut g, groups);
            let (mut preds, mut targets, mut projs) = (Vec::new(), Vec::new(), Vec::new());
            for (seq, plan) in &batch {
                let z = encode(&mut g, &net.encoder, &model_cfg, seq, plan)?;
                if use_re {
                    preds.push(decode(&mut g, &net.decoder, &model_cfg, z, plan)?);
                    let t = plan.masked.iter().flat_map(|&i| seq.patches[i]).collect();
                    targets.push(g.constant(vec![plan.masked.len(), seq.patches[0].len()], t)?);
                }
                if use_cl {
                    projs.push(project(&mut g, &net.projector, z)?);
                }
            }
            let l_re = if use_re {
                let p = g.concat_rows(&preds)?;
                let t = g.concat_rows(&targets)?;
                Some(reconstruction_loss(&mut g, p, t)?)
            } else {
                None
            };
            let l_cl = if use_cl {
                let z = g.concat_rows(&projs)?;
                Some(supcon_loss(&mut g, z, &labels, weights.supcon_temperature)?)
            } else {
                None
            };
            let total = match (l_re, l_cl) {
                (Some(a), Some(b)) => crate::objectives::combined_loss(&mut g, a, b, &weights)?,
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => unreachable!("no_rlp returns early"),
            };
            g.backward(total)?;
            params.store_grads(&g, &net, groups)?;
            adam.step(&mut params.arrays_mut(groups), cfg.learning_rate)?;

            if let Some(v) = l_re {
                re.push(g.item(v));
            }
            if let Some(v) = l_cl {
                cl.push(g.item(v));
            }
            tot.push(g.item(total));
        }
        let (l_re, l_cl) = (
            (!re.is_empty()).then(|| mean(&re)),
            (!cl.is_empty()).then(|| mean(&cl)),
        );
        let l_total = match (l_re, l_cl) {
            (Some(a), Some(b)) => combine(a, b, cfg.lambda),
            _ => mean(&tot),
        };
        log.records.push(EpochRecord {
            epoch,
            l_re,
            l_cl,
            l_total: Some(l_total),
            l_ce: None,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

/// A balanced batch of `n` pairs of `(writer, sample)` references: the
/// first half same-writer, the second half different-writer, each pair in
/// random order.
pub fn balanced_pairs<R: Rng>(
    pool: &WriterPool,
    eligible: &[usize],
    n: usize,
    rng: &mut R,
) -> Vec<((usize, usize), (usize, usize), PairLabel)> {
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (a, b) = if k < n / 2 {
            let w = eligible[rng.gen_range(0..eligible.len())];
            let (i, j) = two_of(pool.samples[w].len(), rng);
            ((w, i), (w, j))
        } else {
            let (x, y) = two_of(eligible.len(), rng);
            let (wa, wb) = (eligible[x], eligible[y]);
            (
                (wa, rng.gen_range(0..pool.samples[wa].len())),
                (wb, rng.gen_range(0..pool.samples[wb].len())),
            )
        };
        let (a, b) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
        out.push((a, b, PairLabel::of(k < n / 2)));
    }
    out
}

/// STEP 2: trains the discriminator with pair cross-entropy on balanced
/// same/different batches. With a frozen encoder the embeddings are
/// computed once; otherwise (`no_rlp`, or `freeze_encoder_step2` off) the
/// encoder is updated jointly.
pub fn train_discriminator(
    pool: &WriterPool,
    cfg: &TrainConfig,
    params: &mut ModelParams,
) -> Result<TrainLog> {
    cfg.validate()?;
    let eligible = pool.require(2)?;
    let model_cfg = params.config.clone();
    let space = model_cfg.disc_input;
    let joint = cfg.joint_step2();
    let groups = Groups {
        encoder: joint,
        decoder: false,
        projector: joint && space == crate::model::DiscInput::Projected,
        discriminator: true,
    };
    let mut rng = stage_rng(cfg.seed, 2);
    // frozen[w][v][s]: view v of sample s of writer w. Views past the first
    // are masked and share one style jitter per (w, v), so positives pair
    // within a view.
    let mut frozen: Vec<Vec<Vec<Vec<f64>>>> = Vec::new();
    if !joint {
        for (w, ss) in pool.samples.iter().enumerate() {
            let mut views = Vec::with_capacity(cfg.disc_views);
            for v in 0..cfg.disc_views {
                let jitter = if v > 0 {
                    StyleJitter::draw(cfg.style_jitter, &mut rng)
                } else {
                    None
                };
                let mut per = Vec::with_capacity(ss.len());
                for (i, s) in ss.iter().enumerate() {
                    let f = match (v, jitter) {
                        (0, _) => params.embed(s, space)?,
                        (_, Some(t)) => {
                            let seq = t.apply(&pool.raw[w][i])?;
                            let plan = MaskPlan::plan(seq.n_unpadded, cfg.mask_ratio, &mut rng)?;
                            params.embed_visible(&seq, &plan, space)?
                        }
                        (_, None) => {
                            let plan = MaskPlan::plan(s.n_unpadded, cfg.mask_ratio, &mut rng)?;
                            params.embed_visible(s, &plan, space)?
                        }
                    };
                    per.push(f);
                }
                views.push(per);
            }
            frozen.push(views);
        }
    }
    let steps = pool.n_samples().div_ceil(cfg.disc_batch_pairs).max(1);
    let mut adam = Adam::new();
    let mut log = TrainLog {
        seed: cfg.seed,
        records: Vec::new(),
    };

    for epoch in 1..=cfg.disc_epochs {
        let start = Instant::now();
        let mut ce = Vec::with_capacity(steps);
        for _ in 0..steps {
            let pairs = balanced_pairs(pool, &eligible, cfg.disc_batch_pairs, &mut rng);
            let mut g = Graph::new();
            let net: Cmae<_> = params.bind(&mut g, groups);
            let mut cache = HashMap::new();
            let mut feature = |g: &mut Graph, v: usize, (w, s): (usize, usize)| -> Result<_> {
                if joint {
                    if let Some(&v) = cache.get(&(w, s)) {
                        return Ok(v);
                    }
                    let seq = &pool.samples[w][s];
                    let plan = MaskPlan::unmasked(seq.n_unpadded)?;
                    let v = embed_var(g, &net, &model_cfg, seq, &plan, space)?;
                    cache.insert((w, s), v);
                    Ok(v)
                } else {
                    let f = &frozen[w][v][s];
                    g.constant(vec![1, f.len()], f.clone())
                }
            };
            let mut logits = Vec::with_capacity(pairs.len());
            let mut labels = Vec::with_capacity(pairs.len());
            for (a, b, label) in pairs {
                let va = rng.gen_range(0..cfg.disc_views);
                let vb = if label == PairLabel::Same { va } else { rng.gen_range(0..cfg.disc_views) };
                let za = feature(&mut g, va, a)?;
                let zb = feature(&mut g, vb, b)?;
                logits.push(discriminator_logits(&mut g, &net.discriminator, &model_cfg, za, zb)?);
                labels.push(label);
            }
            let logits = g.concat_rows(&logits)?;
            let loss = pair_ce_from_logits(&mut g, logits, &labels)?;
            g.backward(loss)?;
            params.store_grads(&g, &net, groups)?;
            adam.step(&mut params.arrays_mut(groups), cfg.learning_rate)?;
            ce.push(g.item(loss));
        }
        log.records.push(EpochRecord {
            epoch,
            l_re: None,
            l_cl: None,
            l_total: None,
            l_ce: Some(mean(&ce)),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

/// Trained parameters and the logs of both stages.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub params: ModelParams,
    pub pretrain_log: TrainLog,
    pub disc_log: TrainLog,
}

/// Random initialization from `cfg.seed`, then STEP 1 and STEP 2.
pub fn train_pipeline(
    model: &crate::model::ModelConfig,
    cfg: &TrainConfig,
    records: &[RawTrajectory],
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let pool = WriterPool::new(records)?;
    let mut params = ModelParams::init(model, cfg.seed)?;
    let pretrain_log = pretrain(&pool, cfg, &mut params)?;
    let disc_log = train_discriminator(&pool, cfg, &mut params)?;
    Ok(PipelineOutput {
        params,
        pretrain_log,
        disc_log,
    })
}
