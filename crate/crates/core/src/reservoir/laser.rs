//! Lang-Kobayashi semiconductor laser with delayed optical feedback, used
//! as a time-multiplexed reservoir.
//!
//! Field `E` and carrier density `n` obey
//!
//! ```text
//! dE/dt = s [ (1 + i a) g E - |E|^2 E ] + k E(t - tau) exp(i phi)
//! dn/dt = s [ p + eta v(t) - (1 + |E|^2) n ]
//! ```
//!
//! with `g = n` for [`CouplingVariant::GainCoupled`] and `g = 1` for
//! [`CouplingVariant::Literal`]. `s` is the time scale of the normalized
//! terms in 1/s, `k` the feedback rate in 1/s. The literal variant has no
//! path from `n` into `E`, so the injected input never reaches the
//! intensity.

use nalgebra::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mask::{mask_input, Mask};
use crate::rng::{rng_for, Stream};
use crate::{Error, Result};

type C64 = Complex<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingVariant {
    Literal,
    GainCoupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaserParams {
    /// Linewidth enhancement factor.
    pub alpha_tilde: f64,
    /// Feedback phase in radians.
    pub phi: f64,
    /// Feedback strength in 1/s.
    pub kappa: f64,
    /// Delay in units of the mask period `T`.
    pub tau_over_period: f64,
    /// Normalized injection current.
    pub p: f64,
    /// Input strength.
    pub eta: f64,
    pub coupling_variant: CouplingVariant,
    /// Rate (1/s) multiplying the dimensionless field and carrier terms.
    pub time_scale: f64,
    /// Integration substeps per node interval `theta`.
    #[serde(skip)]
    pub substeps_per_node: usize,
}

impl Default for LaserParams {
    fn default() -> Self {
        Self {
            alpha_tilde: 3.0,
            phi: 0.0,
            kappa: 1e8,
            tau_over_period: 1.01,
            p: 1.11,
            eta: 0.08,
            coupling_variant: CouplingVariant::GainCoupled,
            time_scale: 1e9,
            substeps_per_node: 10,
        }
    }
}

impl LaserParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_over_period > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.substeps_per_node == 0 {
            return Err(Error::Config("substeps_per_node must be at least 1".into()));
        }
        if !(self.time_scale > 0.0) || !self.kappa.is_finite() || !self.p.is_finite() {
            return Err(Error::Config(
                "laser rates must be finite and time_scale > 0".into(),
            ));
        }
        Ok(())
    }

    /// Solitary-laser steady state `(n, |E|^2)` without input or feedback.
    pub fn solitary_steady_state(&self) -> (f64, f64) {
        match self.coupling_variant {
            // n = |E|^2 and p = (1 + n) n
            CouplingVariant::GainCoupled => {
                let n = (-1.0 + (1.0 + 4.0 * self.p).sqrt()) / 2.0;
                (n, n)
            }
            // |E|^2 = 1 and p = 2 n
            CouplingVariant::Literal => (self.p / 2.0, 1.0),
        }
    }
}

/// Running laser reservoir. Cloning snapshots the complete state including
/// the delay history.
#[derive(Debug, Clone)]
pub struct LaserReservoir {
    mask: Mask,
    params: LaserParams,
    h: f64,
    delay_steps: f64,
    gain: C64,
    feedback: C64,
    e: C64,
    n: f64,
    initial_field: C64,
    history: Vec<C64>,
    step_index: u64,
}

impl LaserReservoir {
    /// `h_sub` is `theta / substeps_per_node`.
    pub fn new(mask: Mask, params: LaserParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let h = mask.theta() / params.substeps_per_node as f64;
        let tau = params.tau_over_period * mask.period();
        let delay_steps = tau / h;
        if delay_steps < 2.0 {
            return Err(Error::Config(format!(
                "delay {tau:e} s spans fewer than two substeps of {h:e} s"
            )));
        }
        let mut rng = rng_for(seed, Stream::LaserInit, 0);
        let (n0, i0) = params.solitary_steady_state();
        let amp = i0.sqrt() * rng.gen_range(0.5..1.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let e0 = C64::from_polar(amp, phase);
        let cap = delay_steps.ceil() as usize + 2;
        Ok(Self {
            gain: C64::new(1.0, params.alpha_tilde) * params.time_scale,
            feedback: C64::from_polar(params.kappa, params.phi),
            h,
            delay_steps,
            e: e0,
            n: n0 * rng.gen_range(0.5..1.0),
            initial_field: e0,
            history: vec![e0; cap],
            step_index: 0,
            mask,
            params,
        })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn params(&self) -> &LaserParams {
        &self.params
    }

    pub fn h_sub(&self) -> f64 {
        self.h
    }

    pub fn intensity(&self) -> f64 {
        self.e.norm_sqr()
    }

    /// Field at fractional step position `pos`, linearly interpolated;
    /// positions before the start read the initial field.
    fn field_at(&self, pos: f64) -> C64 {
        let i0 = pos.floor();
        let w = pos - i0;
        let get = |i: f64| -> C64 {
            if i < 0.0 {
                self.initial_field
            } else {
                self.history[(i as u64 % self.history.len() as u64) as usize]
            }
        };
        let a = get(i0);
        if w == 0.0 {
            a
        } else {
            a * (1.0 - w) + get(i0 + 1.0) * w
        }
    }

    #[inline]
    fn rhs(&self, e: C64, n: f64, delayed: C64, drive: f64) -> (C64, f64) {
        let p = &self.params;
        let i = e.norm_sqr();
        let g = match p.coupling_variant {
            CouplingVariant::GainCoupled => n,
            CouplingVariant::Literal => 1.0,
        };
        let de = self.gain * g * e - e * (i * p.time_scale) + self.feedback * delayed;
        let dn = p.time_scale * (p.p + p.eta * drive - (1.0 + i) * n);
        (de, dn)
    }

    fn substep(&mut self, drive: f64) {
        let h = self.h;
        let k = self.step_index as f64;
        let d0 = self.field_at(k - self.delay_steps);
        let dh = self.field_at(k + 0.5 - self.delay_steps);
        let d1 = self.field_at(k + 1.0 - self.delay_steps);
        let (e, n) = (self.e, self.n);
        let (k1e, k1n) = self.rhs(e, n, d0, drive);
        let (k2e, k2n) = self.rhs(e + k1e * (h / 2.0), n + k1n * (h / 2.0), dh, drive);
        let (k3e, k3n) = self.rhs(e + k2e * (h / 2.0), n + k2n * (h / 2.0), dh, drive);
        let (k4e, k4n) = self.rhs(e + k3e * h, n + k3n * h, d1, drive);
        self.e = e + (k1e + k2e * 2.0 + k3e * 2.0 + k4e) * (h / 6.0);
        self.n = n + (k1n + 2.0 * k2n + 2.0 * k3n + k4n) * (h / 6.0);
        self.step_index += 1;
        let cap = self.history.len() as u64;
        self.history[(self.step_index % cap) as usize] = self.e;
    }

    /// Feeds one input sample through a full mask period and returns the
    /// intensity at the end of each node interval.
    pub fn step(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let drive = mask_input(x, &self.mask)?;
        let mut row = Vec::with_capacity(drive.len());
        for v in drive {
            for _ in 0..self.params.substeps_per_node {
                self.substep(v);
            }
            let i = self.e.norm_sqr();
            if !i.is_finite() || !self.n.is_finite() {
                return Err(Error::Divergence {
                    context: "Lang-Kobayashi field".into(),
                    step: self.step_index as usize,
                });
            }
            row.push(i);
        }
        Ok(row)
    }
}
