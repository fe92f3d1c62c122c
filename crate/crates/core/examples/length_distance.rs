//! Same-writer embedding distance as a function of the crop length of
//! each trajectory.

use cmae::evalproto::{length_distance_matrix, LengthSpec, ModelEmbedder};
use cmae::model::ModelConfig;
use cmae::synthgen::{builtin_glyphs, generate, make_writers};
use cmae::trainer::{train_pipeline, TrainConfig};
use cmae::trajio::split_by_writer;

fn main() -> cmae::Result<()> {
    let records = generate(&make_writers(20, 4), 12, &builtin_glyphs())?;
    let (train, held_out) = split_by_writer(&records, 15);
    let cfg = TrainConfig {
        pretrain_epochs: 30,
        disc_epochs: 1,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train_pipeline(&ModelConfig::desk(), &cfg, &train)?;
    // synthetic glyphs are at most ~80 rows long
    let spec = LengthSpec {
        lengths: (10..=70).step_by(10).collect(),
        ..LengthSpec::default()
    };
    let m = length_distance_matrix(&ModelEmbedder::projector(&out.params), &held_out, &spec)?;
    m.write_csv(std::io::stdout())?;
    println!(
        "mean over lengths >= 40: {:.4}; <= 30: {:.4}",
        m.block_mean(|l| l >= 40).unwrap_or(f64::NAN),
        m.block_mean(|l| l <= 30).unwrap_or(f64::NAN)
    );
    Ok(())
}
