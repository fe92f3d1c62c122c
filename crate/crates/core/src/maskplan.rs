//! Per-sample random masking over the unpadded patches only.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::trajio::N_PATCHES;

/// Partition of the 160 patch indices of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub padded: Vec<usize>,
    /// Requested mask ratio; 0 for [`MaskPlan::unmasked`].
    pub ratio: f64,
}

/// `clamp(floor(ratio · n), 1, n − 1)`
pub fn mask_count(n_unpadded: usize, ratio: f64) -> usize {
    ((ratio * n_unpadded as f64).floor() as usize).clamp(1, n_unpadded - 1)
}

impl MaskPlan {
    pub fn plan<R: Rng + ?Sized>(n_unpadded: usize, ratio: f64, rng: &mut R) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {ratio} outside (0,1)")));
        }
        if n_unpadded == 0 || n_unpadded > N_PATCHES {
            return Err(Error::contract(format!(
                "n_unpadded {n_unpadded} outside 1..={N_PATCHES}"
            )));
        }
        if n_unpadded == 1 {
            return Err(Error::DegenerateSample(
                "a single unpadded patch cannot be both masked and visible".into(),
            ));
        }
        let k = mask_count(n_unpadded, ratio);
        let mut is_masked = vec![false; n_unpadded];
        for i in sample(rng, n_unpadded, k) {
            is_masked[i] = true;
        }
        let (masked, visible): (Vec<usize>, Vec<usize>) =
            (0..n_unpadded).partition(|&i| is_masked[i]);
        Ok(Self {
            visible,
            masked,
            padded: (n_unpadded..N_PATCHES).collect(),
            ratio,
        })
    }

    /// Full visibility of every unpadded patch, used at evaluation time.
    pub fn unmasked(n_unpadded: usize) -> Result<Self> {
        if n_unpadded == 0 || n_unpadded > N_PATCHES {
            return Err(Error::contract(format!(
                "n_unpadded {n_unpadded} outside 1..={N_PATCHES}"
            )));
        }
        Ok(Self {
            visible: (0..n_unpadded).collect(),
            masked: Vec::new(),
            padded: (n_unpadded..N_PATCHES).collect(),
            ratio: 0.0,
        })
    }

    pub fn n_unpadded(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// Checks the partition invariants against a sample's unpadded count.
    pub fn check(&self, n_unpadded: usize) -> Result<()> {
        let mut seen = [0u8; N_PATCHES];
        for &i in self.visible.iter().chain(&self.masked).chain(&self.padded) {
            if i >= N_PATCHES {
                return Err(Error::contract(format!("patch index {i} out of range")));
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::contract("mask plan is not a partition of 0..160"));
        }
        if self.padded.first().is_some_and(|&p| p != n_unpadded)
            || self.padded.len() != N_PATCHES - n_unpadded
        {
            return Err(Error::contract(format!(
                "plan pads from {:?}, sample has {n_unpadded} unpadded patches",
                self.padded.first()
            )));
        }
        if self.visible.is_empty() {
            return Err(Error::contract("plan leaves no visible patch"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MaskPlan::plan(100, 0.15, &mut rng).unwrap();
        assert_eq!((p.masked.len(), p.visible.len(), p.padded.len()), (15, 85, 60));
        let p = MaskPlan::plan(4, 0.75, &mut rng).unwrap();
        assert_eq!((p.masked.len(), p.visible.len()), (3, 1));
        for r in [0.01, 0.5, 0.99] {
            let p = MaskPlan::plan(2, r, &mut rng).unwrap();
            assert_eq!((p.masked.len(), p.visible.len()), (1, 1));
        }
    }

    #[test]
    fn degenerate_and_invalid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            MaskPlan::plan(1, 0.5, &mut rng),
            Err(Error::DegenerateSample(_))
        ));
        assert!(MaskPlan::plan(10, 0.0, &mut rng).is_err());
        assert!(MaskPlan::plan(10, 1.0, &mut rng).is_err());
        assert!(MaskPlan::plan(161, 0.5, &mut rng).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let a = MaskPlan::plan(50, 0.4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = MaskPlan::plan(50, 0.4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        a.check(50).unwrap();
        assert!(a.check(51).is_err());
    }

    #[test]
    fn unmasked_plan() {
        let p = MaskPlan::unmasked(7).unwrap();
        assert_eq!(p.visible, (0..7).collect::<Vec<_>>());
        assert!(p.masked.is_empty());
        p.check(7).unwrap();
    }
}
