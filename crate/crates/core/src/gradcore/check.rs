use crate::error::{Error, Result};

use super::{DArray, Graph, Var};

/// Finite-difference step used in 64-bit gradient checks.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so entries whose true gradient is (near) zero are compared absolutely.
const FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn eval<F>(f: &F, inputs: &[DArray], track: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|a| if track { g.param(a) } else { g.leaf(a) })
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of the scalar function `f` with central
/// differences over every entry of every input.
pub fn grad_check<F>(f: F, inputs: &[DArray], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = eval(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, a)| g.grad(v).map_or_else(|| vec![0.0; a.len()], <[f64]>::to_vec))
        .collect();

    let mut work = inputs.to_vec();
    let (mut max_rel, mut max_abs, mut entries) = (0.0f64, 0.0f64, 0);
    for (i, grads) in analytic.iter().enumerate() {
        for j in 0..grads.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let (g1, _, o1) = eval(&f, &work, false)?;
            work[i].data_mut()[j] = orig - h;
            let (g2, _, o2) = eval(&f, &work, false)?;
            work[i].data_mut()[j] = orig;
            let numeric = (g1.item(o1) - g2.item(o2)) / (2.0 * h);
            let abs = (numeric - grads[j]).abs();
            let rel = abs / numeric.abs().max(grads[j].abs()).max(FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            entries += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        entries,
        tolerance: tol,
    })
}
