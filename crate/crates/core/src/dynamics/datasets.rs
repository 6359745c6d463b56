use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    integrate_sampled, standardize, OdeSystem, StandardizationStats, Trajectory, LORENZ_LYAPUNOV,
    ROSSLER_LYAPUNOV,
};
use crate::rng::{rng_for, Stream};
use crate::{Error, Result};

/// Sampled points integrated and dropped before recording starts.
pub const TRANSIENT_SAMPLES: usize = 1000;
const UCTLS_H: f64 = 0.01;
const DOWNSAMPLE: usize = 10;
const ROSSLER_H: f64 = 0.05;
const LORENZ_H: f64 = 0.01;
pub const ALRS_ROSSLER_DT: f64 = ROSSLER_H * DOWNSAMPLE as f64;
pub const ALRS_LORENZ_DT: f64 = LORENZ_H * DOWNSAMPLE as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Uctls,
    Lorenz,
    Rossler,
}

impl SystemKind {
    /// Reference largest Lyapunov exponent used to express times in
    /// Lyapunov units.
    pub fn lyapunov(self) -> f64 {
        match self {
            SystemKind::Uctls | SystemKind::Lorenz => LORENZ_LYAPUNOV,
            SystemKind::Rossler => ROSSLER_LYAPUNOV,
        }
    }
}

/// A contiguous run of samples produced by one generating system.
/// `start` indexes the concatenation of the train and test splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub system: SystemKind,
    pub dt_sample: f64,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn lyapunov(&self) -> f64 {
        self.system.lyapunov()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlrsExposure {
    /// Only `x` is visible (open-loop task).
    XOnly,
    /// `x, y, z` are visible (closed-loop task).
    Xyz,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Trajectory,
    pub test: Trajectory,
    /// Train-split statistics, already applied to both splits.
    pub stats: StandardizationStats,
    pub target_horizon: usize,
    pub segments: Vec<Segment>,
    /// Per-system statistics applied before concatenation (ALRS only).
    pub system_stats: Vec<(SystemKind, StandardizationStats)>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn total_len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    /// Exposed channels of train followed by test.
    pub fn exposed_series(&self) -> DMatrix<f64> {
        let a = self.train.exposed();
        let b = self.test.exposed();
        let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
        out.rows_mut(0, a.nrows()).copy_from(&a);
        out.rows_mut(a.nrows(), b.nrows()).copy_from(&b);
        out
    }

    /// Indices where the generating system switches.
    pub fn boundaries(&self) -> Vec<usize> {
        self.segments.iter().skip(1).map(|s| s.start).collect()
    }

    pub fn segment_at(&self, index: usize) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| index >= s.start && index < s.end())
    }
}

fn random_initial(seed: u64, index: u64, dim: usize) -> Vec<f64> {
    let mut rng = rng_for(seed, Stream::InitialCondition, index);
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn split_rows(m: &DMatrix<f64>, n_train: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n_test = m.nrows() - n_train;
    (
        m.rows(0, n_train).into_owned(),
        m.rows(n_train, n_test).into_owned(),
    )
}

/// Unidirectionally coupled two-Lorenz series. Channels `x1,y1,z1` are
/// exposed, the driver `x2,y2,z2` is kept but hidden.
pub fn build_uctls(
    sigma_force: f64,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(sigma_force >= 0.0) {
        return Err(Error::Config(format!(
            "sigma_force must be non-negative, got {sigma_force}"
        )));
    }
    if n_train < 2 || n_test < 2 {
        return Err(Error::Config(
            "train and test splits need at least two points".into(),
        ));
    }
    let system = OdeSystem::uctls(sigma_force);
    // Independent draws for the driven and driving subsystem.
    let mut initial = random_initial(seed, 0, 3);
    initial.extend(random_initial(seed, 1, 3));
    let raw = integrate_sampled(
        &system,
        &initial,
        UCTLS_H,
        DOWNSAMPLE,
        TRANSIENT_SAMPLES,
        n_train + n_test,
    )?;
    let (train_raw, test_raw) = split_rows(&raw, n_train);
    let stats = StandardizationStats::from_matrix(&train_raw)?;
    let labels: Vec<String> = ["x1", "y1", "z1", "x2", "y2", "z2"]
        .iter()
        .map(|s| (*s).to_owned())
        .collect();
    let mask = vec![true, true, true, false, false, false];
    let dt = UCTLS_H * DOWNSAMPLE as f64;
    let train = Trajectory::new(train_raw, dt, labels.clone(), mask.clone())?;
    let test = Trajectory::new(test_raw, dt, labels, mask)?;
    Ok(DatasetSplit {
        train: standardize(&train, &stats)?,
        test: standardize(&test, &stats)?,
        stats,
        target_horizon: 1,
        segments: vec![Segment {
            start: 0,
            len: n_train + n_test,
            system: SystemKind::Uctls,
            dt_sample: dt,
        }],
        system_stats: Vec::new(),
        seed,
    })
}

/// Alternating Rössler/Lorenz series. Window `i` (counting across train and
/// test) is Rössler for even `i` and Lorenz for odd `i`; every window is an
/// independent trajectory. Each system is standardized with statistics of
/// its own training windows before concatenation.
pub fn build_alrs(
    n_train: usize,
    n_test: usize,
    window: usize,
    seed: u64,
    exposure: AlrsExposure,
) -> Result<DatasetSplit> {
    if window == 0 || !n_train.is_multiple_of(window) || !n_test.is_multiple_of(window) {
        return Err(Error::Config(format!(
            "window {window} must divide n_train {n_train} and n_test {n_test}"
        )));
    }
    let n_windows = (n_train + n_test) / window;
    let train_windows = n_train / window;
    let rossler = OdeSystem::rossler_default();
    let lorenz = OdeSystem::lorenz_default();

    let mut raw_windows = Vec::with_capacity(n_windows);
    let mut segments = Vec::with_capacity(n_windows);
    for w in 0..n_windows {
        let (system, h, kind) = if w % 2 == 0 {
            (&rossler, ROSSLER_H, SystemKind::Rossler)
        } else {
            (&lorenz, LORENZ_H, SystemKind::Lorenz)
        };
        let init = random_initial(seed, w as u64, 3);
        raw_windows.push(integrate_sampled(
            system,
            &init,
            h,
            DOWNSAMPLE,
            TRANSIENT_SAMPLES,
            window,
        )?);
        segments.push(Segment {
            start: w * window,
            len: window,
            system: kind,
            dt_sample: h * DOWNSAMPLE as f64,
        });
    }

    let mut system_stats = Vec::new();
    for kind in [SystemKind::Rossler, SystemKind::Lorenz] {
        let idx: Vec<usize> = (0..train_windows)
            .filter(|&w| segments[w].system == kind)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let mut stacked = DMatrix::zeros(idx.len() * window, 3);
        for (k, &w) in idx.iter().enumerate() {
            stacked
                .rows_mut(k * window, window)
                .copy_from(&raw_windows[w]);
        }
        system_stats.push((kind, StandardizationStats::from_matrix(&stacked)?));
    }
    let mut series = DMatrix::zeros(n_windows * window, 3);
    for (w, raw) in raw_windows.iter().enumerate() {
        let kind = segments[w].system;
        let stats = system_stats
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Config("training split must contain both systems".to_owned()))?;
        series
            .rows_mut(w * window, window)
            .copy_from(&stats.apply(raw)?);
    }

    let (train_raw, test_raw) = split_rows(&series, n_train);
    let stats = StandardizationStats::from_matrix(&train_raw)?;
    let labels: Vec<String> = ["x", "y", "z"].iter().map(|s| (*s).to_owned()).collect();
    let mask = match exposure {
        AlrsExposure::XOnly => vec![true, false, false],
        AlrsExposure::Xyz => vec![true, true, true],
    };
    let train = Trajectory::new(train_raw, ALRS_LORENZ_DT, labels.clone(), mask.clone())?;
    let test = Trajectory::new(test_raw, ALRS_LORENZ_DT, labels, mask)?;
    Ok(DatasetSplit {
        train: standardize(&train, &stats)?,
        test: standardize(&test, &stats)?,
        stats,
        target_horizon: 1,
        segments,
        system_stats,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::trajectory::column_mean_std;

    #[test]
    fn uctls_shapes_and_standardization() {
        let d = build_uctls(0.05, 2000, 500, 1).unwrap();
        assert_eq!(d.train.exposed().shape(), (2000, 3));
        assert_eq!(d.test.exposed().shape(), (500, 3));
        assert_eq!(d.train.n_channels(), 6);
        assert_eq!(d.train.dt_sample(), 0.1);
        let (m, s) = column_mean_std(d.train.samples());
        for c in 0..6 {
            assert!(m[c].abs() < 1e-10 && (s[c] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn uctls_is_deterministic() {
        let a = build_uctls(0.05, 300, 100, 4).unwrap();
        let b = build_uctls(0.05, 300, 100, 4).unwrap();
        assert_eq!(a, b);
        let c = build_uctls(0.05, 300, 100, 5).unwrap();
        assert_ne!(a.train.samples(), c.train.samples());
    }

    #[test]
    fn uctls_zero_forcing_matches_single_lorenz() {
        let d = build_uctls(0.0, 300, 100, 8).unwrap();
        let init = random_initial(8, 0, 3);
        let single = integrate_sampled(
            &OdeSystem::lorenz_default(),
            &init,
            UCTLS_H,
            DOWNSAMPLE,
            TRANSIENT_SAMPLES,
            400,
        )
        .unwrap();
        let raw = d.stats.invert(d.train.samples()).unwrap();
        for k in 0..300 {
            for c in 0..3 {
                assert!((raw[(k, c)] - single[(k, c)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn negative_forcing_rejected() {
        assert!(matches!(
            build_uctls(-0.1, 100, 100, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn alrs_windows_alternate() {
        let d = build_alrs(2000, 1000, 500, 3, AlrsExposure::XOnly).unwrap();
        assert_eq!(d.segments.len(), 6);
        assert_eq!(d.boundaries(), vec![500, 1000, 1500, 2000, 2500]);
        for (w, s) in d.segments.iter().enumerate() {
            let expect = if w % 2 == 0 {
                SystemKind::Rossler
            } else {
                SystemKind::Lorenz
            };
            assert_eq!(s.system, expect);
        }
        assert_eq!(d.segment_at(1499).unwrap().system, SystemKind::Rossler);
        assert_eq!(d.segment_at(1500).unwrap().system, SystemKind::Lorenz);
        assert_eq!(d.segments[0].dt_sample, 0.5);
        assert_eq!(d.segments[1].dt_sample, 0.1);
        assert_eq!(d.train.exposed().ncols(), 1);
        let xyz = build_alrs(2000, 1000, 500, 3, AlrsExposure::Xyz).unwrap();
        assert_eq!(xyz.train.exposed().ncols(), 3);
        assert_eq!(xyz.train.samples(), d.train.samples());
    }

    #[test]
    fn alrs_per_system_mean_zero() {
        let d = build_alrs(2000, 1000, 500, 3, AlrsExposure::Xyz).unwrap();
        for kind in [SystemKind::Rossler, SystemKind::Lorenz] {
            let rows: Vec<usize> = d
                .segments
                .iter()
                .filter(|s| s.system == kind && s.end() <= 2000)
                .flat_map(|s| s.start..s.end())
                .collect();
            let m = d.train.samples().select_rows(&rows);
            let (mean, std) = column_mean_std(&m);
            for c in 0..3 {
                assert!(mean[c].abs() < 1e-10, "{kind:?} mean {}", mean[c]);
                assert!((std[c] - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn alrs_window_must_divide() {
        assert!(matches!(
            build_alrs(2000, 1100, 500, 0, AlrsExposure::XOnly),
            Err(Error::Config(_))
        ));
    }
}
