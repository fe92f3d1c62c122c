//! STEP 1 on a small synthetic set: masked reconstruction plus supervised
//! contrastive training, one log line per epoch.

use cmae::model::{ModelConfig, ModelParams};
use cmae::synthgen::{builtin_glyphs, generate, make_writers};
use cmae::trainer::{pretrain, TrainConfig, WriterPool};

fn main() -> cmae::Result<()> {
    let records = generate(&make_writers(12, 5), 8, &builtin_glyphs())?;
    let pool = WriterPool::new(&records)?;
    let cfg = TrainConfig {
        pretrain_epochs: 20,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut params = ModelParams::init(&ModelConfig::desk(), cfg.seed)?;
    println!("{} parameters, {} samples", params.num_params(), pool.n_samples());

    let log = pretrain(&pool, &cfg, &mut params)?;
    let mut out = Vec::new();
    log.write_csv(&mut out)?;
    print!("{}", String::from_utf8_lossy(&out));
    Ok(())
}
