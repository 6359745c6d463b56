//! Leaky echo-state network used as a fast surrogate reservoir.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_for, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsnParams {
    pub spectral_radius: f64,
    pub leak: f64,
    pub input_scale: f64,
}

impl Default for EsnParams {
    fn default() -> Self {
        Self {
            spectral_radius: 0.9,
            leak: 0.3,
            input_scale: 1.0,
        }
    }
}

impl EsnParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.leak) {
            return Err(Error::Config(format!(
                "leak must lie in [0, 1], got {}",
                self.leak
            )));
        }
        if !(self.spectral_radius >= 0.0) || !self.input_scale.is_finite() {
            return Err(Error::Config(
                "spectral radius and input scale must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// `s <- (1 - a) s + a tanh(W s + W_in x)` with a dense random `W`
/// rescaled to the requested spectral radius.
#[derive(Debug, Clone)]
pub struct EsnReservoir {
    w: DMatrix<f64>,
    w_in: DMatrix<f64>,
    leak: f64,
    state: DVector<f64>,
}

impl EsnReservoir {
    pub fn new(params: &EsnParams, n_nodes: usize, channels: usize, seed: u64) -> Result<Self> {
        params.validate()?;
        if n_nodes == 0 || channels == 0 {
            return Err(Error::Config(
                "ESN needs at least one node and one channel".into(),
            ));
        }
        let mut rng = rng_for(seed, Stream::EsnWeights, 0);
        let mut w = DMatrix::from_fn(n_nodes, n_nodes, |_, _| rng.gen_range(-1.0..1.0));
        let w_in = DMatrix::from_fn(n_nodes, channels, |_, _| {
            params.input_scale * rng.gen_range(-1.0..1.0)
        });
        let radius = spectral_radius(&w);
        if radius > 0.0 {
            w *= params.spectral_radius / radius;
        }
        Ok(Self {
            w,
            w_in,
            leak: params.leak,
            state: DVector::zeros(n_nodes),
        })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }

    pub fn step(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.w_in.ncols() {
            return Err(Error::Shape(format!(
                "input has {} channels, ESN expects {}",
                x.len(),
                self.w_in.ncols()
            )));
        }
        let mut pre = &self.w * &self.state;
        pre.gemv(1.0, &self.w_in, &DVector::from_column_slice(x), 1.0);
        let a = self.leak;
        self.state
            .iter_mut()
            .zip(pre.iter())
            .for_each(|(s, p)| *s = (1.0 - a) * *s + a * p.tanh());
        Ok(self.state.iter().copied().collect())
    }
}

pub fn spectral_radius(w: &DMatrix<f64>) -> f64 {
    w.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_is_rescaled() {
        let r = EsnReservoir::new(&EsnParams::default(), 30, 2, 5).unwrap();
        assert!((spectral_radius(r.weights()) - 0.9).abs() < 1e-9);
    }

    #[test]
    fn zero_leak_freezes_state() {
        let params = EsnParams {
            leak: 0.0,
            ..Default::default()
        };
        let mut r = EsnReservoir::new(&params, 10, 1, 0).unwrap();
        for k in 0..20 {
            let row = r.step(&[k as f64]).unwrap();
            assert!(row.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_input_zero_state() {
        let mut r = EsnReservoir::new(&EsnParams::default(), 10, 3, 0).unwrap();
        for _ in 0..10 {
            assert!(r.step(&[0.0, 0.0, 0.0]).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn states_bounded() {
        let mut r = EsnReservoir::new(&EsnParams::default(), 50, 1, 2).unwrap();
        for k in 0..500 {
            let row = r.step(&[5.0 * (k as f64 * 0.1).sin()]).unwrap();
            assert!(row.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn invalid_leak() {
        let params = EsnParams {
            leak: 1.5,
            ..Default::default()
        };
        assert!(EsnReservoir::new(&params, 4, 1, 0).is_err());
    }
}
