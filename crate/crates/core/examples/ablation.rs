//! A small ablation grid: the full objective against reconstruction only
//! and no pretraining, as a percent table.

use cmae::evalproto::SelectionSpec;
use cmae::model::ModelConfig;
use cmae::synthgen::{builtin_glyphs, generate, make_writers};
use cmae::trainer::{run_ablation, write_ablation_csv, Mode, RunSpec, TrainConfig};
use cmae::trajio::split_by_writer;

fn main() -> cmae::Result<()> {
    let records = generate(&make_writers(20, 2), 12, &builtin_glyphs())?;
    let (train, held_out) = split_by_writer(&records, 15);
    let base = TrainConfig {
        pretrain_epochs: 20,
        disc_epochs: 100,
        seed: 1,
        ..TrainConfig::default()
    };
    let grid: Vec<RunSpec> = [Mode::Full, Mode::NoCl, Mode::NoRlp]
        .into_iter()
        .map(|mode| RunSpec {
            label: mode.as_str().to_string(),
            model: ModelConfig::desk(),
            train: TrainConfig { mode, ..base.clone() },
        })
        .collect();
    let spec = SelectionSpec {
        n_writers: 5,
        ..SelectionSpec::default()
    };
    let rows = run_ablation(&grid, &train, &held_out, &spec)?;
    write_ablation_csv(&rows, std::io::stdout())
}
