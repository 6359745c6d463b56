use nalgebra::DMatrix;
use rand::Rng;

use crate::rng::{rng_for, Stream};
use crate::{Error, Result};

/// Piecewise-constant input mask. Row `n` holds the per-channel weights
/// applied during the `n`-th node interval of length `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    values: DMatrix<f64>,
    theta: f64,
}

impl Mask {
    pub fn from_values(values: DMatrix<f64>, theta: f64) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Config(
                "mask needs at least one node and channel".into(),
            ));
        }
        if !(theta > 0.0) {
            return Err(Error::Config(format!(
                "theta must be positive, got {theta}"
            )));
        }
        Ok(Self { values, theta })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_nodes(&self) -> usize {
        self.values.nrows()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Mask period `T = N * theta`.
    pub fn period(&self) -> f64 {
        self.n_nodes() as f64 * self.theta
    }
}

/// Draws mask entries uniformly from `[0, 1)`.
pub fn make_mask(n_nodes: usize, channels: usize, theta: f64, seed: u64) -> Result<Mask> {
    if n_nodes == 0 || channels == 0 {
        return Err(Error::Config(
            "mask needs n_nodes >= 1 and channels >= 1".into(),
        ));
    }
    let mut rng = rng_for(seed, Stream::Mask, 0);
    let values = DMatrix::from_fn(n_nodes, channels, |_, _| rng.gen::<f64>());
    Mask::from_values(values, theta)
}

/// Drive level of every node interval for one input sample: each channel
/// is masked independently and the results are summed.
pub fn mask_input(x: &[f64], mask: &Mask) -> Result<Vec<f64>> {
    if x.len() != mask.channels() {
        return Err(Error::Shape(format!(
            "input has {} channels, mask expects {}",
            x.len(),
            mask.channels()
        )));
    }
    Ok(mask
        .values
        .row_iter()
        .map(|row| row.iter().zip(x).map(|(m, v)| m * v).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn period_is_nodes_times_theta() {
        let m = make_mask(50, 1, 1e-10, 0).unwrap();
        assert!((m.period() - 5e-9).abs() < 1e-22);
    }

    #[test]
    fn entries_in_unit_interval_and_seeded() {
        let a = make_mask(40, 3, 1e-10, 1).unwrap();
        assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, make_mask(40, 3, 1e-10, 1).unwrap());
        assert_ne!(a, make_mask(40, 3, 1e-10, 2).unwrap());
    }

    #[test]
    fn masking_is_linear() {
        let m = Mask::from_values(DMatrix::from_column_slice(3, 1, &[0.3, 0.5, 1.0]), 1.0).unwrap();
        assert_eq!(mask_input(&[0.0], &m).unwrap(), vec![0.0; 3]);
        let v = mask_input(&[2.0], &m).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15);
        let m3 = make_mask(10, 3, 1.0, 4).unwrap();
        let x = [0.4, -1.3, 2.2];
        let x2 = [0.8, -2.6, 4.4];
        let a = mask_input(&x, &m3).unwrap();
        let b = mask_input(&x2, &m3).unwrap();
        for (u, w) in a.iter().zip(&b) {
            assert!((2.0 * u - w).abs() < 1e-14);
        }
    }

    #[test]
    fn channel_mismatch() {
        let m = make_mask(4, 2, 1.0, 0).unwrap();
        assert!(mask_input(&[1.0], &m).is_err());
        assert!(make_mask(0, 1, 1.0, 0).is_err());
    }
}
