//! Normalization, special tokens, padding and patching of one trajectory.
//!
//! `cargo run --example preprocess [data.jsonl]` uses the first record of
//! the file, otherwise a synthetic glyph.

use cmae::synthgen::{builtin_glyphs, make_writers, render};
use cmae::trajio::{load_jsonl, normalize, patchify, tokenize, unpatchify, PEN_DOWN, PEN_UP};

fn main() -> cmae::Result<()> {
    let raw = match std::env::args().nth(1) {
        Some(path) => load_jsonl(path)?.into_iter().next().expect("empty file"),
        None => render(&make_writers(1, 3)[0], &builtin_glyphs()[4], 0),
    };
    println!(
        "{} / {:?}: {} strokes, {} points",
        raw.writer_id,
        raw.label,
        raw.strokes.len(),
        raw.n_points()
    );

    let norm = normalize(&raw)?;
    let (lo, hi) = norm
        .points()
        .flatten()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    println!("normalized coordinates span [{lo:.3}, {hi:.3}]");

    let t = tokenize(&norm)?;
    let label = |p: &[f64; 2]| match *p {
        PEN_DOWN => "down".to_string(),
        PEN_UP => "up".to_string(),
        [x, y] => format!("({x:.3}, {y:.3})"),
    };
    let head: Vec<String> = t.points.iter().take(4).map(label).collect();
    println!(
        "{} content rows then {} padding rows; first rows {}",
        t.content_len,
        t.points.len() - t.content_len,
        head.join(" ")
    );

    let seq = patchify(&t);
    println!(
        "{} patches of {} values, {} unpadded; inverse exact: {}",
        seq.patches.len(),
        seq.patches[0].len(),
        seq.n_unpadded,
        unpatchify(&seq) == t
    );
    Ok(())
}
