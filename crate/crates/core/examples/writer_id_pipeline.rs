//! The desk-scale pipeline: 30 training and 10 held-out synthetic writers,
//! STEP 1 then STEP 2, evaluated with both selection protocols.
//!
//! Takes a few minutes in release mode; `--quick` trains briefly.

use std::time::Instant;

use cmae::evalproto::{
    eval_pairs, eval_rank1, ModelDiscriminator, ModelEmbedder, Protocol, SelectionSpec,
};
use cmae::model::ModelConfig;
use cmae::synthgen::{builtin_glyphs, generate, make_writers};
use cmae::trainer::{train_pipeline, TrainConfig};
use cmae::trajio::split_by_writer;

fn main() -> cmae::Result<()> {
    let quick = std::env::args().any(|a| a == "--quick");
    let records = generate(&make_writers(40, 9), 28, &builtin_glyphs())?;
    let (train, held_out) = split_by_writer(&records, 30);
    let cfg = TrainConfig {
        pretrain_epochs: if quick { 10 } else { 100 },
        disc_epochs: if quick { 50 } else { 1000 },
        seed: 1,
        ..TrainConfig::default()
    };

    let start = Instant::now();
    let out = train_pipeline(&ModelConfig::desk(), &cfg, &train)?;
    println!("trained in {:.0}s", start.elapsed().as_secs_f64());
    let last = |log: &cmae::trainer::TrainLog| log.records.last().cloned();
    if let Some(r) = last(&out.pretrain_log) {
        println!("STEP 1 final: l_re {:?} l_cl {:?}", r.l_re, r.l_cl);
    }
    if let Some(r) = last(&out.disc_log) {
        println!("STEP 2 final: l_ce {:?}", r.l_ce);
    }

    let spec = |protocol| SelectionSpec {
        n_writers: 10,
        chars_per_writer: 2,
        protocol,
        ..SelectionSpec::default()
    };
    let rank1 = eval_rank1(&ModelEmbedder::projector(&out.params), &held_out, &spec(Protocol::Rank1))?;
    let pairs = eval_pairs(
        &ModelEmbedder::discriminator_input(&out.params),
        &ModelDiscriminator(&out.params),
        &held_out,
        &spec(Protocol::Pairs),
    )?;
    let pct = |s: Option<cmae::evalproto::Summary>| s.map_or("undefined".into(), |s| s.percent());
    println!("held-out rank-1   {}", pct(rank1.rank1()));
    println!("held-out accuracy {}", pct(pairs.accuracy()));
    println!(
        "held-out precision {} ({} selections without a positive prediction)",
        pct(pairs.precision()),
        pairs.undefined_precision()
    );
    Ok(())
}
