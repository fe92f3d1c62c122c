use crate::error::{Error, Result};
use crate::gradcore::DArray;

/// Adaptive-moment optimizer state for a fixed, ordered list of arrays.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of every array from its stored gradient.
    /// Moment buffers are sized on the first call; later calls must pass
    /// arrays of the same sizes in the same order.
    pub fn step(&mut self, params: &mut [&mut DArray], lr: f64) -> Result<()> {
        if self.t == 0 {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if params.len() != self.m.len()
            || params.iter().zip(&self.m).any(|(p, m)| p.len() != m.len())
        {
            return Err(Error::contract(
                "optimizer state does not match the parameter list",
            ));
        }
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::contract(format!(
                "parameter {i} has no gradient"
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.take_grad().expect("checked above");
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Applies one [`Adam`] update; see [`Adam::step`].
pub fn optimizer_step(params: &mut [&mut DArray], state: &mut Adam, lr: f64) -> Result<()> {
    state.step(params, lr)
}
