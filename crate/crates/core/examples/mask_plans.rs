//! Random masking of unpadded patches at the two paper ratios.

use cmae::maskplan::{mask_count, MaskPlan};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cmae::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [2, 7, 40, 160] {
        for ratio in [0.15, 0.75] {
            let plan = MaskPlan::plan(n, ratio, &mut rng)?;
            println!(
                "n_unpadded {n:>3}  ratio {ratio:.2}  masked {:>3} (expected {:>3})  visible {:>3}  padded {:>3}",
                plan.masked.len(),
                mask_count(n, ratio),
                plan.visible.len(),
                plan.padded.len()
            );
        }
    }
    let plan = MaskPlan::plan(20, 0.25, &mut rng)?;
    println!("one plan over 20 patches masks {:?}", plan.masked);
    Ok(())
}
