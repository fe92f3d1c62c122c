//! Synthetic writer styles, the same-writer separation they induce, and a
//! generated dataset on disk.
//!
//! `cargo run --example synthetic_writers [out.jsonl]`

use cmae::synthgen::{build_dataset, builtin_glyphs, make_writers, mean_point_distance, render};
use cmae::trajio::normalize;

fn main() -> cmae::Result<()> {
    let writers = make_writers(6, 42);
    println!("writer     slant  scale_x scale_y tremor  drift");
    for w in &writers {
        println!(
            "{:<10} {:>6.3} {:>7.3} {:>7.3} {:>6.3} {:>6.3}",
            w.writer_id, w.slant, w.scale_x, w.scale_y, w.tremor, w.drift
        );
    }

    let glyphs = builtin_glyphs();
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for g in &glyphs {
        for (a, wa) in writers.iter().enumerate() {
            let x = normalize(&render(wa, g, 1))?;
            let y = normalize(&render(wa, g, 2))?;
            same.extend(mean_point_distance(&x, &y));
            for wb in &writers[a + 1..] {
                diff.extend(mean_point_distance(&x, &normalize(&render(wb, g, 2))?));
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "mean point distance: same writer {:.4} over {} pairs, different writers {:.4} over {} pairs",
        mean(&same),
        same.len(),
        mean(&diff),
        diff.len()
    );

    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("cmae_synthetic.jsonl"));
    let summary = build_dataset(10, 4, &glyphs, 1, &out)?;
    println!("{summary:?} -> {}", out.display());
    Ok(())
}
