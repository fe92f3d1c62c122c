//! Finite-difference check of reverse-mode gradients through one
//! transformer block and a contrastive loss.

use cmae::gradcore::{grad_check, DArray, DEFAULT_STEP};
use cmae::model::{transformer_block, ModelConfig, ModelParams, Tree};
use cmae::objectives::supcon_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cmae::Result<()> {
    let cfg = ModelConfig {
        enc_dim: 8,
        enc_depth: 1,
        enc_heads: 2,
        ..ModelConfig::desk()
    };
    let params = ModelParams::init(&cfg, 7)?;
    let block = &params.net.encoder.blocks[0];

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = DArray::new(vec![4, 8], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let mut inputs = vec![x];
    block.visit("", &mut |_, a| inputs.push(a.clone()));

    let report = grad_check(
        |g, v| {
            let mut rest = v[1..].iter().copied();
            let b = block.map(&mut |_| rest.next().unwrap());
            let y = transformer_block(g, &b, v[0], cfg.enc_heads)?;
            let z = g.l2_normalize_rows(y);
            supcon_loss(g, z, &[0, 1, 0, 1], 0.5)
        },
        &inputs,
        DEFAULT_STEP,
        1e-4,
    )?;
    println!(
        "{} entries, max relative error {:.2e}, max absolute error {:.2e}: {}",
        report.entries,
        report.max_rel_err,
        report.max_abs_err,
        if report.passed() { "ok" } else { "FAILED" }
    );
    Ok(())
}
