use rand::Rng;

use super::{DormandPrince, OdeSystem};
use crate::rng::{rng_for, Stream};
use crate::{Error, Result};

const SEPARATION: f64 = 1e-8;
const RENORM_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovEstimate {
    /// Largest exponent in inverse model-time units.
    pub exponent: f64,
    /// Set when a system expected to be chaotic produced a non-positive
    /// exponent.
    pub warning: Option<String>,
}

/// Benettin estimate of the largest Lyapunov exponent: a reference and a
/// perturbed trajectory are integrated side by side and their separation is
/// rescaled to a fixed length every few steps, accumulating the log growth.
pub fn largest_lyapunov(
    system: &OdeSystem,
    h: f64,
    horizon: f64,
    seed: u64,
) -> Result<LyapunovEstimate> {
    if !(h > 0.0) || !(horizon > h) {
        return Err(Error::Config(format!(
            "need 0 < h < horizon, got h={h}, horizon={horizon}"
        )));
    }
    let dim = system.dimension();
    let mut rng = rng_for(seed, Stream::Lyapunov, 0);
    let mut x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = dir
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    dir.iter_mut().for_each(|v| *v /= norm);

    let mut stepper = DormandPrince::new(dim);
    let mut y: Vec<f64> = x
        .iter()
        .zip(&dir)
        .map(|(a, d)| a + SEPARATION * d)
        .collect();
    let mut t = 0.0;
    let mut advance = |x: &mut Vec<f64>, y: &mut Vec<f64>, t: &mut f64, block: usize| {
        for _ in 0..RENORM_STEPS {
            stepper.step(system, *t, x, h);
            stepper.step(system, *t, y, h);
            *t += h;
        }
        let dist = x
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt();
        if !dist.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                context: "Lyapunov estimation".into(),
                step: (block + 1) * RENORM_STEPS,
            });
        }
        if dist == 0.0 {
            // perturbation collapsed below resolution; restart it
            for (yi, (xi, d)) in y.iter_mut().zip(x.iter().zip(&dir)) {
                *yi = xi + SEPARATION * d;
            }
            return Ok((f64::MIN_POSITIVE / SEPARATION).ln());
        }
        let scale = SEPARATION / dist;
        for (yi, xi) in y.iter_mut().zip(x.iter()) {
            *yi = xi + (*yi - xi) * scale;
        }
        Ok((dist / SEPARATION).ln())
    };

    // The transient settles the reference orbit and aligns the perturbation
    // with the dominant direction; its growth is not accumulated.
    let transient_blocks = ((horizon * 0.05).min(100.0) / h) as usize / RENORM_STEPS;
    for b in 0..transient_blocks {
        advance(&mut x, &mut y, &mut t, b)?;
    }
    let blocks = ((horizon / h) as usize / RENORM_STEPS).max(1);
    let mut log_sum = 0.0;
    for b in 0..blocks {
        log_sum += advance(&mut x, &mut y, &mut t, transient_blocks + b)?;
    }
    let exponent = log_sum / (blocks * RENORM_STEPS) as f64 / h;

    let known_chaotic = matches!(system.name(), "lorenz" | "rossler" | "uctls");
    let warning = if known_chaotic && exponent <= 0.0 {
        let msg = format!(
            "{} produced a non-positive largest exponent {exponent:.4}; dynamics collapsed",
            system.name()
        );
        log::warn!("{msg}");
        Some(msg)
    } else {
        None
    };
    Ok(LyapunovEstimate { exponent, warning })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contracting_linear_system() {
        let sys = OdeSystem::linear_decay(3, 1.0);
        let est = largest_lyapunov(&sys, 0.01, 200.0, 3).unwrap();
        assert!((est.exponent + 1.0).abs() < 0.01, "{}", est.exponent);
        assert!(est.warning.is_none());
    }

    #[test]
    fn expanding_linear_direction() {
        let sys = OdeSystem::new("saddle", 2, &[], |s, _, ds| {
            ds[0] = 0.5 * s[0];
            ds[1] = -2.0 * s[1];
        });
        let est = largest_lyapunov(&sys, 0.01, 20.0, 1).unwrap();
        assert!((est.exponent - 0.5).abs() < 0.01, "{}", est.exponent);
    }

    #[test]
    fn collapsed_chaotic_system_warns() {
        // Lorenz below the first bifurcation (b < 1) is globally attracted to the origin.
        let sys = OdeSystem::lorenz(10.0, 0.5, 8.0 / 3.0);
        let est = largest_lyapunov(&sys, 0.01, 200.0, 1).unwrap();
        assert!(est.exponent < 0.0);
        assert!(est.warning.is_some());
    }

    #[test]
    fn deterministic_per_seed() {
        let sys = OdeSystem::lorenz_default();
        let a = largest_lyapunov(&sys, 0.01, 50.0, 9).unwrap();
        let b = largest_lyapunov(&sys, 0.01, 50.0, 9).unwrap();
        assert_eq!(a, b);
    }
}
