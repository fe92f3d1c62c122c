//! Reconstruction, supervised contrastive and pair cross-entropy losses,
//! and the λ-weighted combination used for representation pretraining.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the reconstruction term; the contrastive term gets `1 − λ`.
    pub lambda: f64,
    pub supcon_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            supcon_temperature: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!("lambda {} outside (0,1)", self.lambda)));
        }
        if !(self.supcon_temperature > 0.0 && self.supcon_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.supcon_temperature
            )));
        }
        Ok(())
    }
}

/// Which class of the discriminator's two outputs a pair belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairLabel {
    Same = 0,
    Different = 1,
}

impl PairLabel {
    pub fn of(same: bool) -> Self {
        if same {
            PairLabel::Same
        } else {
            PairLabel::Different
        }
    }
}

/// Mean squared error over every entry of the masked-patch predictions.
pub fn reconstruction_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.value(pred).is_empty() {
        return Err(Error::contract("reconstruction loss over an empty masked set"));
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Supervised contrastive loss over unit-norm projections `B × d`.
///
/// For anchor `i` with positives `P(i)` (same label, `≠ i`):
/// `−1/|P(i)| Σ_p log( exp(z_i·z_p/τ) / Σ_{a≠i} exp(z_i·z_a/τ) )`,
/// averaged over anchors.
pub fn supcon_loss<L: PartialEq>(
    g: &mut Graph,
    projections: Var,
    labels: &[L],
    temperature: f64,
) -> Result<Var> {
    let shape = g.shape(projections).to_vec();
    let b = labels.len();
    if shape.len() != 2 || shape[0] != b {
        return Err(Error::Shape {
            op: "supcon_loss",
            left: shape,
            right: vec![b],
        });
    }
    if b < 2 {
        return Err(Error::Dataset("contrastive batch needs at least two samples".into()));
    }
    let mut weights = vec![0.0; b * b];
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            return Err(Error::Dataset(format!(
                "batch construction: anchor {i} has no positive"
            )));
        }
        for p in &pos {
            weights[i * b + p] = -1.0 / (pos.len() * b) as f64;
        }
    }
    let t = g.transpose(projections);
    let sim = g.matmul(projections, t)?;
    let sim = g.scale(sim, 1.0 / temperature);
    let diagonal = (0..b * b).map(|k| k / b == k % b).collect();
    let logp = g.log_softmax_rows(sim, Some(diagonal))?;
    let w = g.constant(vec![b, b], weights)?;
    let terms = g.mul(logp, w)?;
    Ok(g.sum(terms))
}

/// `−log p(label)` for a `1 × 2` probability row.
pub fn pair_ce_loss(g: &mut Graph, probs: Var, label: PairLabel) -> Result<Var> {
    if g.value(probs).len() != 2 {
        return Err(Error::Shape {
            op: "pair_ce_loss",
            left: vec![1, 2],
            right: g.shape(probs).to_vec(),
        });
    }
    let probs = g.reshape(probs, vec![1, 2])?;
    let c = label as usize;
    let p = g.slice_cols(probs, c, c + 1)?;
    let lp = g.log(p);
    let s = g.sum(lp);
    Ok(g.scale(s, -1.0))
}

/// Same quantity as [`pair_ce_loss`] computed stably from logits, averaged
/// over the rows of an `n × 2` batch.
pub fn pair_ce_from_logits(g: &mut Graph, logits: Var, labels: &[PairLabel]) -> Result<Var> {
    let n = labels.len();
    if g.value(logits).len() != 2 * n || n == 0 {
        return Err(Error::Shape {
            op: "pair_ce_from_logits",
            left: vec![n, 2],
            right: g.shape(logits).to_vec(),
        });
    }
    let logits = g.reshape(logits, vec![n, 2])?;
    let lp = g.log_softmax_rows(logits, None)?;
    let mut pick = vec![0.0; 2 * n];
    for (i, l) in labels.iter().enumerate() {
        pick[2 * i + *l as usize] = -1.0 / n as f64;
    }
    let w = g.constant(vec![n, 2], pick)?;
    let terms = g.mul(lp, w)?;
    Ok(g.sum(terms))
}

/// `λ·l_re + (1 − λ)·l_cl`
pub fn combined_loss(g: &mut Graph, l_re: Var, l_cl: Var, w: &LossWeights) -> Result<Var> {
    let a = g.scale(l_re, w.lambda);
    let b = g.scale(l_cl, 1.0 - w.lambda);
    g.add(a, b)
}

/// Scalar form of [`combined_loss`].
pub fn combine(l_re: f64, l_cl: f64, lambda: f64) -> f64 {
    lambda * l_re + (1.0 - lambda) * l_cl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::DArray;

    fn scalar(g: &mut Graph, v: f64) -> Var {
        g.leaf(&DArray::scalar(v))
    }

    #[test]
    fn reconstruction_examples() {
        let mut g = Graph::new();
        let t = g.constant(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let l = reconstruction_loss(&mut g, t, t).unwrap();
        assert_eq!(g.item(l), 0.0);
        let p = g.constant(vec![2, 3], vec![1.1, 1.2, 1.3, 1.4, 1.5, 1.6]).unwrap();
        let l = reconstruction_loss(&mut g, p, t).unwrap();
        assert!((g.item(l) - 1.0).abs() < 1e-12);
        let e = g.constant(vec![0, 10], vec![]).unwrap();
        assert!(reconstruction_loss(&mut g, e, e).is_err());
    }

    #[test]
    fn supcon_identical_embeddings_give_ln_b_minus_one() {
        let mut g = Graph::new();
        let row = [0.6, 0.8];
        let z = g.constant(vec![4, 2], row.repeat(4)).unwrap();
        let l = supcon_loss(&mut g, z, &[0, 0, 1, 1], 0.07).unwrap();
        assert!((g.item(l) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn supcon_orthogonal_clusters_nearly_zero() {
        let mut g = Graph::new();
        let z = g
            .constant(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
            .unwrap();
        let l = supcon_loss(&mut g, z, &["a", "a", "b", "b"], 0.07).unwrap();
        // brute force: each anchor sees one positive at cosine 1 and two
        // negatives at cosine 0
        let e = (1.0f64 / 0.07).exp();
        let expect = -(e / (e + 2.0)).ln();
        assert!((g.item(l) - expect).abs() < 1e-12);
        assert!(g.item(l) < 0.01);
    }

    #[test]
    fn supcon_needs_positives() {
        let mut g = Graph::new();
        let z = g.constant(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(matches!(
            supcon_loss(&mut g, z, &[0, 1, 1], 0.1),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn pair_ce_examples() {
        let mut g = Graph::new();
        let p = g.constant(vec![1, 2], vec![0.5, 0.5]).unwrap();
        for l in [PairLabel::Same, PairLabel::Different] {
            let v = pair_ce_loss(&mut g, p, l).unwrap();
            assert!((g.item(v) - 2f64.ln()).abs() < 1e-15);
        }
        let p = g.constant(vec![1, 2], vec![1.0 - 1e-9, 1e-9]).unwrap();
        let v = pair_ce_loss(&mut g, p, PairLabel::Same).unwrap();
        assert!(g.item(v) < 1e-8);
    }

    #[test]
    fn logits_and_probability_forms_agree() {
        let mut g = Graph::new();
        let logits = g.constant(vec![1, 2], vec![0.3, -1.2]).unwrap();
        let probs = g.softmax(logits, 1).unwrap();
        for l in [PairLabel::Same, PairLabel::Different] {
            let a = pair_ce_loss(&mut g, probs, l).unwrap();
            let b = pair_ce_from_logits(&mut g, logits, &[l]).unwrap();
            assert!((g.item(a) - g.item(b)).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_examples() {
        let mut g = Graph::new();
        let w = LossWeights {
            lambda: 0.5,
            ..LossWeights::default()
        };
        let (a, b) = (scalar(&mut g, 0.2), scalar(&mut g, 0.8));
        let c = combined_loss(&mut g, a, b, &w).unwrap();
        assert!((g.item(c) - 0.5).abs() < 1e-15);
        for lambda in [0.1, 0.37, 0.9] {
            let w = LossWeights { lambda, ..w };
            let (a, b) = (scalar(&mut g, 1.25), scalar(&mut g, 1.25));
            let c = combined_loss(&mut g, a, b, &w).unwrap();
            assert!((g.item(c) - 1.25).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        for lambda in [0.0, 1.0, -0.1] {
            let w = LossWeights {
                lambda,
                ..LossWeights::default()
            };
            assert!(w.validate().is_err());
        }
        let w = LossWeights {
            supcon_temperature: 0.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
