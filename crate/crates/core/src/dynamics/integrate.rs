use nalgebra::DMatrix;

use super::OdeSystem;
use crate::{Error, Result};

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Fixed-step Dormand-Prince stepper. The embedded fourth-order solution is
/// only used to report a local error estimate; the step size never adapts.
#[derive(Debug, Clone)]
pub struct DormandPrince {
    k: [Vec<f64>; 7],
    stage: Vec<f64>,
}

impl DormandPrince {
    pub fn new(dimension: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; dimension]),
            stage: vec![0.0; dimension],
        }
    }

    /// Advances `y` in place by `h` and returns the max-norm of the embedded
    /// error estimate.
    pub fn step(&mut self, system: &OdeSystem, t: f64, y: &mut [f64], h: f64) -> f64 {
        let dim = y.len();
        for s in 0..7 {
            for i in 0..dim {
                let mut acc = y[i];
                for (j, a) in A[s].iter().enumerate().take(s) {
                    acc += h * a * self.k[j][i];
                }
                self.stage[i] = acc;
            }
            let (_, rest) = self.k.split_at_mut(s);
            system.eval(&self.stage, t + C[s] * h, &mut rest[0]);
        }
        let mut err: f64 = 0.0;
        for i in 0..dim {
            let mut inc = 0.0;
            let mut e = 0.0;
            for s in 0..7 {
                inc += B5[s] * self.k[s][i];
                e += (B5[s] - B4[s]) * self.k[s][i];
            }
            y[i] += h * inc;
            err = err.max((h * e).abs());
        }
        err
    }
}

/// Every state visited by a fixed-step integration.
#[derive(Debug, Clone)]
pub struct RawTrajectory {
    /// `(n_steps + 1) x dimension`, row 0 is the initial state.
    pub states: DMatrix<f64>,
    pub h: f64,
    /// Largest embedded local error estimate seen over the run.
    pub max_error_estimate: f64,
}

fn check_args(system: &OdeSystem, initial: &[f64], h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!(
            "step size must be positive, got {h}"
        )));
    }
    if initial.len() != system.dimension() {
        return Err(Error::Shape(format!(
            "initial state has dimension {}, system {} expects {}",
            initial.len(),
            system.name(),
            system.dimension()
        )));
    }
    Ok(())
}

/// Integrates `n_steps` fixed Dormand-Prince steps of size `h`.
pub fn integrate_fixed_step(
    system: &OdeSystem,
    initial: &[f64],
    h: f64,
    n_steps: usize,
) -> Result<RawTrajectory> {
    check_args(system, initial, h)?;
    let dim = system.dimension();
    let mut states = DMatrix::zeros(n_steps + 1, dim);
    let mut y = initial.to_vec();
    states.row_mut(0).copy_from_slice(&y);
    let mut stepper = DormandPrince::new(dim);
    let mut max_err: f64 = 0.0;
    for n in 0..n_steps {
        let err = stepper.step(system, n as f64 * h, &mut y, h);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                context: format!("integration of {}", system.name()),
                step: n + 1,
            });
        }
        max_err = max_err.max(err);
        states.row_mut(n + 1).copy_from_slice(&y);
    }
    Ok(RawTrajectory {
        states,
        h,
        max_error_estimate: max_err,
    })
}

/// Integrates and keeps every `stride`-th state after dropping the first
/// `skip` samples. Returns `n_samples x dimension`; sample `k` is the state
/// after `(skip + k) * stride` steps.
pub fn integrate_sampled(
    system: &OdeSystem,
    initial: &[f64],
    h: f64,
    stride: usize,
    skip: usize,
    n_samples: usize,
) -> Result<DMatrix<f64>> {
    check_args(system, initial, h)?;
    if stride == 0 {
        return Err(Error::Config("sampling stride must be positive".into()));
    }
    let dim = system.dimension();
    let mut out = DMatrix::zeros(n_samples, dim);
    let mut y = initial.to_vec();
    let mut stepper = DormandPrince::new(dim);
    let mut step = 0usize;
    for k in 0..skip + n_samples {
        if k > 0 {
            for _ in 0..stride {
                stepper.step(system, step as f64 * h, &mut y, h);
                step += 1;
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    context: format!("integration of {}", system.name()),
                    step,
                });
            }
        }
        if k >= skip {
            out.row_mut(k - skip).copy_from_slice(&y);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_is_fixed() {
        let sys = OdeSystem::new("zero", 2, &[], |_, _, ds| ds.fill(0.0));
        let tr = integrate_fixed_step(&sys, &[1.5, -2.0], 0.1, 50).unwrap();
        assert_eq!(tr.states.nrows(), 51);
        for r in tr.states.row_iter() {
            assert_eq!(r[0], 1.5);
            assert_eq!(r[1], -2.0);
        }
        assert_eq!(tr.max_error_estimate, 0.0);
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let sys = OdeSystem::linear_decay(1, 1.0);
        let tr = integrate_fixed_step(&sys, &[1.0], 0.01, 100).unwrap();
        let last = tr.states[(100, 0)];
        assert!((last - (-1.0f64).exp()).abs() < 1e-8, "{last}");
    }

    #[test]
    fn fifth_order_convergence() {
        // halving h should shrink the global error by ~32
        let sys = OdeSystem::new("osc", 2, &[], |s, _, ds| {
            ds[0] = s[1];
            ds[1] = -s[0];
        });
        let err = |h: f64, n: usize| {
            let tr = integrate_fixed_step(&sys, &[1.0, 0.0], h, n).unwrap();
            (tr.states[(n, 0)] - (h * n as f64).cos()).abs()
        };
        let e1 = err(0.2, 50);
        let e2 = err(0.1, 100);
        let ratio = e1 / e2;
        assert!(ratio > 20.0 && ratio < 45.0, "ratio {ratio}");
    }

    #[test]
    fn lorenz_stays_bounded() {
        let sys = OdeSystem::lorenz_default();
        let tr = integrate_fixed_step(&sys, &[0.3, -0.7, 0.2], 0.01, 50_000).unwrap();
        for n in 5_000..=50_000 {
            assert!(tr.states[(n, 0)].abs() < 25.0);
            assert!(tr.states[(n, 1)].abs() < 35.0);
            assert!(tr.states[(n, 2)] > 0.0 && tr.states[(n, 2)] < 60.0);
        }
        assert!(tr.max_error_estimate < 1e-4);
    }

    #[test]
    fn divergence_reports_step() {
        let sys = OdeSystem::new("blowup", 1, &[], |s, _, ds| ds[0] = s[0] * s[0]);
        match integrate_fixed_step(&sys, &[1.0], 0.1, 1000) {
            Err(Error::Divergence { step, .. }) => assert!(step > 5 && step < 1000),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn sampled_matches_full() {
        let sys = OdeSystem::lorenz_default();
        let full = integrate_fixed_step(&sys, &[1.0, 1.0, 1.0], 0.01, 200).unwrap();
        let s = integrate_sampled(&sys, &[1.0, 1.0, 1.0], 0.01, 10, 3, 17).unwrap();
        for k in 0..17 {
            for d in 0..3 {
                assert_eq!(s[(k, d)], full.states[((3 + k) * 10, d)]);
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let sys = OdeSystem::lorenz_default();
        assert!(matches!(
            integrate_fixed_step(&sys, &[1.0, 1.0], 0.01, 1),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            integrate_fixed_step(&sys, &[1.0, 1.0, 1.0], 0.0, 1),
            Err(Error::Config(_))
        ));
    }
}
