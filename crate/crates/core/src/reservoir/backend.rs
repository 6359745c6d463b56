use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{make_mask, EsnParams, EsnReservoir, LaserParams, LaserReservoir, Mask, StateMatrix};
use crate::dynamics::Trajectory;
use crate::rng::{rng_for, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    LangKobayashi,
    LeakyEsn,
}

/// Reservoir selection and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReservoirBackend {
    pub kind: BackendKind,
    pub nodes: usize,
    /// Node interval in seconds (laser only).
    pub theta: f64,
    pub laser: LaserParams,
    pub esn: EsnParams,
}

impl Default for ReservoirBackend {
    fn default() -> Self {
        Self {
            kind: BackendKind::LangKobayashi,
            nodes: 50,
            theta: 1e-10,
            laser: LaserParams::default(),
            esn: EsnParams::default(),
        }
    }
}

impl ReservoirBackend {
    pub fn leaky_esn(nodes: usize) -> Self {
        Self {
            kind: BackendKind::LeakyEsn,
            nodes,
            ..Default::default()
        }
    }

    pub fn lang_kobayashi(nodes: usize) -> Self {
        Self {
            kind: BackendKind::LangKobayashi,
            nodes,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::Config("reservoir needs at least one node".into()));
        }
        match self.kind {
            BackendKind::LangKobayashi => self.laser.validate(),
            BackendKind::LeakyEsn => self.esn.validate(),
        }
    }

    /// A fresh reservoir at its initial state.
    pub fn build(&self, channels: usize, seed: u64) -> Result<Reservoir> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::LangKobayashi => {
                let mask = make_mask(self.nodes, channels, self.theta, seed)?;
                Reservoir::Laser(Box::new(LaserReservoir::new(
                    mask,
                    self.laser.clone(),
                    seed,
                )?))
            }
            BackendKind::LeakyEsn => {
                Reservoir::Esn(EsnReservoir::new(&self.esn, self.nodes, channels, seed)?)
            }
        })
    }
}

/// A running reservoir of either kind. `Clone` snapshots the full dynamic
/// state, so a teacher-forced run can be forked into free runs.
#[derive(Debug, Clone)]
pub enum Reservoir {
    Laser(Box<LaserReservoir>),
    Esn(EsnReservoir),
}

impl Reservoir {
    /// Consumes one input sample and returns the node responses.
    pub fn step(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Reservoir::Laser(r) => r.step(x),
            Reservoir::Esn(r) => r.step(x),
        }
    }
}

/// Output of [`harvest`].
#[derive(Debug, Clone)]
pub struct Harvest {
    pub states: StateMatrix,
    /// `snapshots[k]` is the reservoir after consuming the first
    /// `snapshot_at[k]` inputs.
    pub snapshots: Vec<Reservoir>,
}

/// Drives a fresh reservoir with every row of `inputs` in order, without
/// resets between samples.
pub fn harvest(
    backend: &ReservoirBackend,
    inputs: &DMatrix<f64>,
    seed: u64,
    snapshot_at: &[usize],
) -> Result<Harvest> {
    let mut reservoir = backend.build(inputs.ncols(), seed)?;
    let mut data = DMatrix::zeros(inputs.nrows(), backend.nodes);
    let mut snapshots = Vec::with_capacity(snapshot_at.len());
    let mut pending: Vec<(usize, usize)> = snapshot_at.iter().copied().enumerate().collect();
    pending.sort_by_key(|&(_, s)| s);
    let mut slots: Vec<Option<Reservoir>> = vec![None; snapshot_at.len()];
    let mut next = 0;
    let mut x = vec![0.0; inputs.ncols()];
    for l in 0..=inputs.nrows() {
        while next < pending.len() && pending[next].1 == l {
            slots[pending[next].0] = Some(reservoir.clone());
            next += 1;
        }
        if l == inputs.nrows() {
            break;
        }
        for (c, v) in x.iter_mut().enumerate() {
            *v = inputs[(l, c)];
        }
        let row = reservoir.step(&x)?;
        for (j, v) in row.into_iter().enumerate() {
            data[(l, j)] = v;
        }
    }
    if next < pending.len() {
        return Err(Error::Config(format!(
            "snapshot index {} beyond input length {}",
            pending[next].1,
            inputs.nrows()
        )));
    }
    snapshots.extend(slots.into_iter().map(|s| s.expect("all snapshots filled")));
    Ok(Harvest {
        states: StateMatrix::new(data)?,
        snapshots,
    })
}

/// Runs the laser reservoir over the exposed channels of `inputs`.
/// `h_sub` must divide `theta` of the mask.
pub fn run_lang_kobayashi(
    inputs: &Trajectory,
    mask: &Mask,
    params: &LaserParams,
    h_sub: f64,
    seed: u64,
) -> Result<StateMatrix> {
    let ratio = mask.theta() / h_sub;
    let substeps = ratio.round();
    if !(h_sub > 0.0) || substeps < 1.0 || (ratio - substeps).abs() > 1e-9 * ratio {
        return Err(Error::Config(format!(
            "h_sub {h_sub:e} does not divide theta {:e}",
            mask.theta()
        )));
    }
    let params = LaserParams {
        substeps_per_node: substeps as usize,
        ..params.clone()
    };
    let x = inputs.exposed();
    let mut laser = LaserReservoir::new(mask.clone(), params, seed)?;
    let mut data = DMatrix::zeros(x.nrows(), mask.n_nodes());
    let mut buf = vec![0.0; x.ncols()];
    for l in 0..x.nrows() {
        for (c, v) in buf.iter_mut().enumerate() {
            *v = x[(l, c)];
        }
        for (j, v) in laser.step(&buf)?.into_iter().enumerate() {
            data[(l, j)] = v;
        }
    }
    StateMatrix::new(data)
}

pub fn run_leaky_esn(
    inputs: &Trajectory,
    params: &EsnParams,
    nodes: usize,
    seed: u64,
) -> Result<StateMatrix> {
    let backend = ReservoirBackend {
        kind: BackendKind::LeakyEsn,
        nodes,
        esn: params.clone(),
        ..Default::default()
    };
    Ok(harvest(&backend, &inputs.exposed(), seed, &[])?.states)
}

/// Result of probing whether inputs reach the reservoir output.
#[derive(Debug, Clone, PartialEq)]
pub struct InputCoupling {
    /// Largest column-wise absolute deviation between two runs driven by
    /// different random inputs.
    pub max_deviation: f64,
    pub input_dependent: bool,
}

/// Drives two identical reservoirs with different random inputs and
/// compares their responses after a short warm-up.
pub fn check_input_coupling(
    backend: &ReservoirBackend,
    channels: usize,
    samples: usize,
    seed: u64,
) -> Result<InputCoupling> {
    let mut rng = rng_for(seed, Stream::InitialCondition, 0xC0FFEE);
    let mut gen = |_: usize, _: usize| rng.gen_range(-1.0..1.0);
    let a = DMatrix::from_fn(samples, channels, &mut gen);
    let b = DMatrix::from_fn(samples, channels, &mut gen);
    let ra = harvest(backend, &a, seed, &[])?.states;
    let rb = harvest(backend, &b, seed, &[])?.states;
    let max_deviation = ra
        .data()
        .iter()
        .zip(rb.data().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let input_dependent = max_deviation > 1e-9;
    if !input_dependent {
        log::warn!(
            "reservoir output does not depend on its input (max deviation {max_deviation:e}); \
             check coupling_variant and eta"
        );
    }
    Ok(InputCoupling {
        max_deviation,
        input_dependent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reservoir::CouplingVariant;

    #[test]
    fn both_backends_share_shape() {
        let inputs = DMatrix::from_fn(40, 3, |i, j| ((i + j) as f64 * 0.37).sin());
        for backend in [
            ReservoirBackend::leaky_esn(12),
            ReservoirBackend::lang_kobayashi(12),
        ] {
            let h = harvest(&backend, &inputs, 1, &[]).unwrap();
            assert_eq!(h.states.data().shape(), (40, 12));
        }
    }

    #[test]
    fn snapshots_resume_exactly() {
        let inputs = DMatrix::from_fn(30, 1, |i, _| (i as f64 * 0.5).cos());
        for backend in [
            ReservoirBackend::leaky_esn(8),
            ReservoirBackend::lang_kobayashi(8),
        ] {
            let h = harvest(&backend, &inputs, 2, &[10, 0, 30]).unwrap();
            let mut r = h.snapshots[0].clone();
            for l in 10..30 {
                let row = r.step(&[inputs[(l, 0)]]).unwrap();
                for (j, v) in row.iter().enumerate() {
                    assert_eq!(*v, h.states.data()[(l, j)]);
                }
            }
            assert!(harvest(&backend, &inputs, 2, &[31]).is_err());
        }
    }

    #[test]
    fn history_continuity() {
        let inputs = DMatrix::from_fn(50, 1, |i, _| (i as f64 * 0.21).sin());
        let backend = ReservoirBackend::lang_kobayashi(10);
        let full = harvest(&backend, &inputs, 4, &[]).unwrap().states;
        let head = harvest(&backend, &inputs.rows(0, 20).into_owned(), 4, &[])
            .unwrap()
            .states;
        assert_eq!(full.data().rows(0, 20), head.data().rows(0, 20));
    }

    #[test]
    fn literal_variant_ignores_input() {
        let mut backend = ReservoirBackend::lang_kobayashi(10);
        backend.laser.coupling_variant = CouplingVariant::Literal;
        let c = check_input_coupling(&backend, 1, 60, 0).unwrap();
        assert!(!c.input_dependent, "{}", c.max_deviation);
    }

    #[test]
    fn h_sub_must_divide_theta() {
        let inputs = Trajectory::from_columns(DMatrix::from_element(5, 1, 0.1), 0.1).unwrap();
        let mask = make_mask(5, 1, 1e-10, 0).unwrap();
        let params = LaserParams::default();
        assert!(run_lang_kobayashi(&inputs, &mask, &params, 3e-11, 0).is_err());
        let r = run_lang_kobayashi(&inputs, &mask, &params, 2e-11, 0).unwrap();
        assert_eq!(r.data().shape(), (5, 5));
    }

    #[test]
    fn solitary_laser_settles_on_steady_state() {
        let mut backend = ReservoirBackend::lang_kobayashi(10);
        backend.laser.kappa = 0.0;
        let inputs = DMatrix::zeros(300, 1);
        let states = harvest(&backend, &inputs, 3, &[]).unwrap().states;
        // oracle: bisection on p = (1 + n) n
        let p = backend.laser.p;
        let (mut lo, mut hi) = (0.0, p);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (1.0 + mid) * mid > p {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        for v in states.data().row(299).iter() {
            assert!((v - lo).abs() < 1e-6, "{v} vs {lo}");
        }
    }

    #[test]
    fn zero_eta_is_input_independent() {
        let mut backend = ReservoirBackend::lang_kobayashi(10);
        backend.laser.eta = 0.0;
        let c = check_input_coupling(&backend, 1, 100, 5).unwrap();
        assert!(c.max_deviation < 1e-9);
        backend.laser.eta = 0.08;
        let c = check_input_coupling(&backend, 1, 100, 5).unwrap();
        assert!(c.max_deviation > 1e-3, "{}", c.max_deviation);
    }
}
