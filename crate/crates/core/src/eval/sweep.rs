//! Ensembles over seeds and parameter sweeps, aggregated into reports.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::experiment::{run_member, MemberMetric, MemberResult};
use super::metrics::SpectrumResult;
use crate::config::{Config, ReadoutChoice};
use crate::io::{atomic_write, write_csv};
use crate::reservoir::StateCache;
use crate::{Error, Result};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ReservoirSize,
    SigmaForce,
    HorizonSteps,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::ReservoirSize => "reservoir_size",
            SweepAxis::SigmaForce => "sigma_force",
            SweepAxis::HorizonSteps => "horizon_steps",
        }
    }

    /// `base` with the axis parameter set to `value`. A horizon cell only
    /// evaluates open-loop NRMSE at that horizon.
    pub fn apply(self, base: &Config, value: f64) -> Result<Config> {
        let mut cfg = base.clone();
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!(
                    "{} values must be positive integers, got {value}",
                    self.name()
                )))
            }
        };
        match self {
            SweepAxis::ReservoirSize => cfg.reservoir.nodes = count()?,
            SweepAxis::SigmaForce => cfg.dataset.sigma_force = value,
            SweepAxis::HorizonSteps => {
                cfg.eval.horizons = vec![count()?];
                cfg.eval.closed_loop = false;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub members: usize,
    pub models: Vec<ReadoutChoice>,
    pub base_config: Config,
}

impl SweepSpec {
    /// Members are taken from `dataset.members`; models default to ridge
    /// plus the configured readout.
    pub fn new(axis: SweepAxis, values: Vec<f64>, base_config: Config) -> Self {
        let mut models = vec![ReadoutChoice::Ridge];
        if base_config.readout.model != ReadoutChoice::Ridge {
            models.push(base_config.readout.model);
        }
        Self {
            axis,
            values,
            members: base_config.dataset.members,
            models,
            base_config,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        if self.values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(
                "sweep values must be strictly increasing".into(),
            ));
        }
        if self.members == 0 || self.models.is_empty() {
            return Err(Error::Config(
                "sweep needs at least one member and one model".into(),
            ));
        }
        for &v in &self.values {
            self.axis.apply(&self.base_config, v)?;
        }
        Ok(())
    }
}

/// Ensemble statistics of one metric. `value` repeats the ensemble mean;
/// `ensemble_std` is the population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: String,
    pub value: f64,
    pub unit: String,
    pub ensemble_mean: f64,
    pub ensemble_std: f64,
    pub n_members: usize,
}

impl MetricResult {
    pub fn from_values(name: &str, values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config(format!("no values for metric {name}")));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let unit = if name.starts_with("vpt") && !name.ends_with("_saturated") {
            "lyapunov_times"
        } else {
            "dimensionless"
        };
        Ok(Self {
            name: name.to_string(),
            value: mean,
            unit: unit.into(),
            ensemble_mean: mean,
            ensemble_std: var.sqrt(),
            n_members: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub axis_value: Option<f64>,
    pub model: ReadoutChoice,
    pub metric: MetricResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberFailure {
    pub axis_value: Option<f64>,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub axis_value: Option<f64>,
    pub seed: u64,
    pub state_hash: String,
}

/// Aggregated results plus everything needed to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: u32,
    pub crate_version: String,
    pub config_hash: String,
    pub config: Config,
    pub axis: Option<SweepAxis>,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub models: Vec<ReadoutChoice>,
    pub rows: Vec<ReportRow>,
    pub failures: Vec<MemberFailure>,
    pub states: Vec<StateRecord>,
}

/// Outcome of one (axis value, seed) cell.
pub struct CellOutcome {
    pub axis_value: Option<f64>,
    pub seed: u64,
    pub result: Result<(Vec<MemberMetric>, String)>,
}

impl ExperimentReport {
    /// Merges cell outcomes; failed members are listed and excluded.
    pub fn assemble(
        config: &Config,
        axis: Option<SweepAxis>,
        values: Vec<f64>,
        seeds: Vec<u64>,
        models: Vec<ReadoutChoice>,
        cells: &[CellOutcome],
    ) -> Result<Self> {
        let mut rows = Vec::new();
        let mut failures = Vec::new();
        let mut states = Vec::new();
        let axis_values: Vec<Option<f64>> = if axis.is_some() {
            values.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        for av in axis_values {
            let mut ok: Vec<&Vec<MemberMetric>> = Vec::new();
            for cell in cells.iter().filter(|c| c.axis_value == av) {
                match &cell.result {
                    Ok((metrics, hash)) => {
                        ok.push(metrics);
                        states.push(StateRecord {
                            axis_value: av,
                            seed: cell.seed,
                            state_hash: hash.clone(),
                        });
                    }
                    Err(e) => {
                        log::warn!(
                            "member seed {} at {:?} failed and is excluded: {e}",
                            cell.seed,
                            av
                        );
                        failures.push(MemberFailure {
                            axis_value: av,
                            seed: cell.seed,
                            error: e.to_string(),
                        });
                    }
                }
            }
            for &model in &models {
                let mut names: Vec<&str> = Vec::new();
                for m in ok
                    .iter()
                    .flat_map(|v| v.iter())
                    .filter(|m| m.model == model)
                {
                    if !names.contains(&m.metric.as_str()) {
                        names.push(&m.metric);
                    }
                }
                for name in names {
                    let vals: Vec<f64> = ok
                        .iter()
                        .flat_map(|v| v.iter())
                        .filter(|m| m.model == model && m.metric == name)
                        .map(|m| m.value)
                        .collect();
                    rows.push(ReportRow {
                        axis_value: av,
                        model,
                        metric: MetricResult::from_values(name, &vals)?,
                    });
                }
            }
        }
        Ok(Self {
            version: REPORT_FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config.hash(),
            config: config.clone(),
            axis,
            values,
            seeds,
            models,
            rows,
            failures,
            states,
        })
    }

    pub fn row(
        &self,
        axis_value: Option<f64>,
        model: ReadoutChoice,
        metric: &str,
    ) -> Option<&MetricResult> {
        self.rows
            .iter()
            .find(|r| r.axis_value == axis_value && r.model == model && r.metric.name == metric)
            .map(|r| &r.metric)
    }

    /// `axis_value,model,metric,mean,std,n`; the axis column is empty for a
    /// single-configuration run.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(
            path,
            &["axis_value", "model", "metric", "mean", "std", "n"],
            self.rows.iter().map(|r| {
                vec![
                    r.axis_value.map(|v| v.to_string()).unwrap_or_default(),
                    r.model.name().to_string(),
                    r.metric.name.clone(),
                    r.metric.ensemble_mean.to_string(),
                    r.metric.ensemble_std.to_string(),
                    r.metric.n_members.to_string(),
                ]
            }),
        )
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        atomic_write(path, &serde_json::to_vec_pretty(self)?)
    }
}

pub fn write_spectrum_csv(path: &Path, s: &SpectrumResult) -> Result<()> {
    write_csv(
        path,
        &["freq", "power"],
        s.frequencies
            .iter()
            .zip(&s.power)
            .map(|(f, p)| vec![f.to_string(), p.to_string()]),
    )
}

/// Applies `f` to every item on at most `jobs` threads; results keep item
/// order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let workers = jobs.max(1).min(items.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every item mapped"))
        .collect()
}

/// Seeds of the ensemble members: `dataset.seed + i`.
pub fn member_seeds(cfg: &Config, members: usize) -> Vec<u64> {
    (0..members as u64)
        .map(|i| cfg.dataset.seed.wrapping_add(i))
        .collect()
}

/// Runs all members of one configuration and keeps their full results.
pub fn run_ensemble(
    cfg: &Config,
    models: &[ReadoutChoice],
    jobs: usize,
    cache: Option<&StateCache>,
) -> Result<(ExperimentReport, Vec<Result<MemberResult>>)> {
    let seeds = member_seeds(cfg, cfg.dataset.members);
    let results = parallel_map(&seeds, jobs, |&seed| run_member(cfg, models, seed, cache));
    let cells: Vec<CellOutcome> = seeds
        .iter()
        .zip(&results)
        .map(|(&seed, r)| CellOutcome {
            axis_value: None,
            seed,
            result: match r {
                Ok(m) => Ok((m.metrics.clone(), m.state_hash.clone())),
                Err(e) => Err(Error::Format(e.to_string())),
            },
        })
        .collect();
    let report = ExperimentReport::assemble(cfg, None, Vec::new(), seeds, models.to_vec(), &cells)?;
    Ok((report, results))
}

/// Runs every (value, member) cell, each harvesting once and fitting all
/// models on the identical state matrix.
pub fn run_sweep(
    spec: &SweepSpec,
    jobs: usize,
    cache: Option<&StateCache>,
) -> Result<ExperimentReport> {
    spec.validate()?;
    let seeds = member_seeds(&spec.base_config, spec.members);
    let configs: Vec<Config> = spec
        .values
        .iter()
        .map(|&v| spec.axis.apply(&spec.base_config, v))
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, u64)> = (0..spec.values.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let outcomes = parallel_map(&cells, jobs, |&(i, seed)| {
        log::info!("{} = {} seed {seed}", spec.axis.name(), spec.values[i]);
        CellOutcome {
            axis_value: Some(spec.values[i]),
            seed,
            result: run_member(&configs[i], &spec.models, seed, cache)
                .map(|m| (m.metrics, m.state_hash)),
        }
    });
    ExperimentReport::assemble(
        &spec.base_config,
        Some(spec.axis),
        spec.values.clone(),
        seeds,
        spec.models.clone(),
        &outcomes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        Config::resolve(
            None,
            &[
                "reservoir.backend=leaky-esn".into(),
                "reservoir.nodes=8".into(),
                "dataset.n_train=1200".into(),
                "dataset.n_test=400".into(),
                "dataset.members=2".into(),
                "readout.train.epochs=50".into(),
                "eval.vpt_starts=2".into(),
                "eval.free_run_steps=100".into(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_member_has_zero_std() {
        let m = MetricResult::from_values("nrmse", &[0.3]).unwrap();
        assert_eq!((m.ensemble_std, m.n_members, m.value), (0.0, 1, 0.3));
        let m = MetricResult::from_values("vpt", &[1.0, 3.0]).unwrap();
        assert_eq!((m.ensemble_mean, m.ensemble_std), (2.0, 1.0));
        assert_eq!(m.unit, "lyapunov_times");
    }

    #[test]
    fn spec_validation() {
        let base = small();
        let ok = SweepSpec::new(SweepAxis::ReservoirSize, vec![5.0, 10.0], base.clone());
        ok.validate().unwrap();
        assert_eq!(
            ok.models,
            vec![ReadoutChoice::Ridge, ReadoutChoice::LinearAttention]
        );
        for bad in [vec![], vec![10.0, 5.0], vec![5.0, 5.0], vec![2.5]] {
            assert!(SweepSpec::new(SweepAxis::ReservoirSize, bad, base.clone())
                .validate()
                .is_err());
        }
        let h = SweepAxis::HorizonSteps.apply(&base, 3.0).unwrap();
        assert_eq!(h.eval.horizons, vec![3]);
        assert!(!h.eval.closed_loop);
    }

    #[test]
    fn failures_are_excluded() {
        let cfg = small();
        let metric = |v| MemberMetric {
            model: ReadoutChoice::Ridge,
            metric: "nrmse".into(),
            value: v,
        };
        let cells = vec![
            CellOutcome {
                axis_value: None,
                seed: 0,
                result: Ok((vec![metric(0.2)], "a".into())),
            },
            CellOutcome {
                axis_value: None,
                seed: 1,
                result: Err(Error::TrajectoryEscape { step: 3 }),
            },
            CellOutcome {
                axis_value: None,
                seed: 2,
                result: Ok((vec![metric(0.4)], "b".into())),
            },
        ];
        let r = ExperimentReport::assemble(
            &cfg,
            None,
            vec![],
            vec![0, 1, 2],
            vec![ReadoutChoice::Ridge],
            &cells,
        )
        .unwrap();
        let m = r.row(None, ReadoutChoice::Ridge, "nrmse").unwrap();
        assert_eq!(m.n_members, 2);
        assert!((m.ensemble_mean - 0.3).abs() < 1e-15);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].seed, 1);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<usize> = (0..37).collect();
        assert_eq!(
            parallel_map(&items, 4, |&i| i * i),
            items.iter().map(|i| i * i).collect::<Vec<_>>()
        );
        assert!(parallel_map(&Vec::<usize>::new(), 3, |&i| i).is_empty());
    }

    #[test]
    fn sweep_is_deterministic_across_job_counts() {
        let spec = SweepSpec::new(SweepAxis::ReservoirSize, vec![4.0, 6.0], small());
        let a = run_sweep(&spec, 1, None).unwrap();
        let b = run_sweep(&spec, 3, None).unwrap();
        assert_eq!(a, b);
        assert!(a.failures.is_empty());
        // 2 values x 2 models x (nrmse, train_nrmse, vpt, vpt_saturated)
        assert_eq!(a.rows.len(), 16);
        assert_eq!(a.states.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        a.write_csv(&dir.path().join("r.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(text.starts_with("axis_value,model,metric,mean,std,n\n4,ridge,nrmse,"));
        a.write_json(&dir.path().join("r.json")).unwrap();
        let back: ExperimentReport =
            serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(back, a);
    }
}
