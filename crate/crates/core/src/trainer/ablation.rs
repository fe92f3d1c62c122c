use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalproto::{
    eval_pairs, eval_rank1, ModelDiscriminator, ModelEmbedder, SelectionSpec, Summary,
};
use crate::model::ModelConfig;
use crate::trajio::RawTrajectory;

use super::{train_pipeline, Mode, TrainConfig};

/// One configuration of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub mode: Mode,
    pub mask_ratio: f64,
    pub enc_depth: usize,
    pub rank1: Option<Summary>,
    pub accuracy: Option<Summary>,
    pub precision: Option<Summary>,
    /// Selections with no positive prediction, left out of `precision`.
    pub undefined_precision: usize,
}

/// Trains every configuration on `train` (each from its own seed) and
/// evaluates it on the held-out `eval` writers with both protocols.
pub fn run_ablation(
    grid: &[RunSpec],
    train: &[RawTrajectory],
    eval: &[RawTrajectory],
    spec: &SelectionSpec,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    grid.iter()
        .map(|run| {
            let out = train_pipeline(&run.model, &run.train, train)?;
            let rank1 = eval_rank1(&ModelEmbedder::projector(&out.params), eval, spec)?;
            let pairs = eval_pairs(
                &ModelEmbedder::discriminator_input(&out.params),
                &ModelDiscriminator(&out.params),
                eval,
                spec,
            )?;
            Ok(AblationRow {
                label: run.label.clone(),
                mode: run.train.mode,
                mask_ratio: run.train.mask_ratio,
                enc_depth: run.model.enc_depth,
                rank1: rank1.rank1(),
                accuracy: pairs.accuracy(),
                precision: pairs.precision(),
                undefined_precision: pairs.undefined_precision(),
            })
        })
        .collect()
}

/// Table layout: one row per configuration, metrics as `mean (std)` in
/// percent; undefined precision reads `n/a`.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "label", "mode", "mask_ratio", "enc_depth", "rank1", "accuracy", "precision",
        "undefined_precision",
    ])?;
    let cell = |s: Option<Summary>| s.map_or_else(|| "n/a".to_string(), |s| s.percent());
    for r in rows {
        out.write_record([
            r.label.clone(),
            r.mode.as_str().to_string(),
            r.mask_ratio.to_string(),
            r.enc_depth.to_string(),
            cell(r.rank1),
            cell(r.accuracy),
            cell(r.precision),
            r.undefined_precision.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::Csv(e.into()))
}

pub fn save_ablation_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ablation_csv(rows, f)
}
