//! One ensemble member end to end: dataset, reservoir harvest, readout
//! fitting, open- and closed-loop metrics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::metrics::{
    default_segment_len, nrmse, total_variance, vpt_normalized, welch, SpectrumResult, Vpt, Window,
};
use crate::config::{Config, DatasetConfig, ReadoutChoice, ReadoutConfig, SystemChoice};
use crate::dynamics::StandardizationStats;
use crate::dynamics::{build_alrs, build_uctls, AlrsExposure, DatasetSplit, SystemKind};
use crate::readout::{
    closed_loop_step, select_lambda, train_attention, LambdaSearch, ReadoutModel, TrainedAttention,
};
use crate::reservoir::{harvest, node_stats, Reservoir, ReservoirBackend, StateCache, StateMatrix};
use crate::{Error, Result};

pub fn build_dataset(
    cfg: &DatasetConfig,
    exposure: AlrsExposure,
    seed: u64,
) -> Result<DatasetSplit> {
    match cfg.system {
        SystemChoice::Uctls => build_uctls(cfg.sigma_force, cfg.n_train, cfg.n_test, seed),
        SystemChoice::Alrs => build_alrs(cfg.n_train, cfg.n_test, cfg.window, seed, exposure),
    }
}

/// Identity of a generated dataset, used in cache keys.
pub fn dataset_id(cfg: &DatasetConfig, exposure: AlrsExposure) -> String {
    match cfg.system {
        SystemChoice::Uctls => format!(
            "uctls;sigma={:e};train={};test={}",
            cfg.sigma_force, cfg.n_train, cfg.n_test
        ),
        SystemChoice::Alrs => format!(
            "alrs;window={};train={};test={};exposure={exposure:?}",
            cfg.window, cfg.n_train, cfg.n_test
        ),
    }
}

/// `(R_train, Y_train, R_test, Y_test)`.
pub type Pairs = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

/// A dataset with the reservoir response to all of its exposed samples.
#[derive(Debug, Clone)]
pub struct Harvested {
    pub split: DatasetSplit,
    /// Exposed channels of train then test, one row per input sample.
    pub inputs: DMatrix<f64>,
    /// Raw node responses; row `l` follows input `l`.
    pub raw: StateMatrix,
    /// Node statistics of the fitted training rows.
    pub state_stats: StandardizationStats,
    /// Standardized responses.
    pub states: DMatrix<f64>,
    /// `(l, reservoir)` pairs: reservoir after consuming inputs `0..l`.
    pub snapshots: Vec<(usize, Reservoir)>,
    pub washout: usize,
}

impl Harvested {
    pub fn n_train(&self) -> usize {
        self.split.train.len()
    }

    pub fn total_len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn snapshot(&self, l: usize) -> Option<&Reservoir> {
        self.snapshots.iter().find(|(i, _)| *i == l).map(|(_, r)| r)
    }

    /// Train and test pairs for `k`-step-ahead targets:
    /// `(R_train, Y_train, R_test, Y_test)`.
    pub fn pairs(&self, k: usize) -> Result<Pairs> {
        let n_train = self.n_train();
        let total = self.total_len();
        if k == 0 || n_train < self.washout + k + 2 || total < n_train + k + 2 {
            return Err(Error::Shape(format!(
                "horizon {k} leaves too few samples for training or testing"
            )));
        }
        let train_rows = n_train - k - self.washout;
        let test_rows = total - n_train - k;
        Ok((
            self.states.rows(self.washout, train_rows).into_owned(),
            self.inputs.rows(self.washout + k, train_rows).into_owned(),
            self.states.rows(n_train, test_rows).into_owned(),
            self.inputs.rows(n_train + k, test_rows).into_owned(),
        ))
    }
}

/// Generates the dataset for `seed` and drives the reservoir with it.
/// Raw states are taken from or stored into `cache`; a cached matrix must
/// match a fresh harvest bit for bit whenever one is computed anyway.
pub fn harvest_member(
    cfg: &Config,
    seed: u64,
    exposure: AlrsExposure,
    snapshot_at: &[usize],
    cache: Option<&StateCache>,
) -> Result<Harvested> {
    let backend = cfg.reservoir.backend()?;
    let split = build_dataset(&cfg.dataset, exposure, seed)?;
    let inputs = split.exposed_series();
    let key = StateCache::key(&dataset_id(&cfg.dataset, exposure), &backend, seed);
    let cached = match cache {
        Some(c) => c.load(&key)?,
        None => None,
    };
    let (raw, snapshots) = match cached {
        Some(states) if snapshot_at.is_empty() => {
            log::info!(
                "state cache hit {key} (hash {})",
                &states.content_hash()[..16]
            );
            (states, Vec::new())
        }
        cached => {
            let h = harvest(&backend, &inputs, seed, snapshot_at)?;
            if let Some(prev) = cached {
                if prev.content_hash() != h.states.content_hash() {
                    return Err(Error::Format(format!(
                        "cached states {key} differ from a fresh harvest; clear the cache"
                    )));
                }
                log::info!("state cache hash match {key}");
            } else if let Some(c) = cache {
                c.store(&key, &h.states)?;
            }
            let snaps = snapshot_at.iter().copied().zip(h.snapshots).collect();
            (h.states, snaps)
        }
    };
    if raw.rows() != inputs.nrows() || raw.cols() != backend.nodes {
        return Err(Error::Format(
            "cached state matrix has the wrong shape".into(),
        ));
    }
    finish_harvest(split, inputs, raw, snapshots, cfg.reservoir.washout)
}

/// Standardizes raw states with the statistics of the fitted training rows.
pub fn finish_harvest(
    split: DatasetSplit,
    inputs: DMatrix<f64>,
    raw: StateMatrix,
    snapshots: Vec<(usize, Reservoir)>,
    washout: usize,
) -> Result<Harvested> {
    let n_train = split.train.len();
    if washout >= n_train {
        return Err(Error::Config(
            "washout must be shorter than the training split".into(),
        ));
    }
    let (state_stats, clamped) =
        node_stats(&raw.data().rows(washout, n_train - washout).into_owned());
    if !clamped.is_empty() {
        log::warn!(
            "{} constant reservoir node(s) clamped: {:?}",
            clamped.len(),
            clamped
        );
    }
    let states = state_stats.apply(raw.data())?;
    Ok(Harvested {
        split,
        inputs,
        raw,
        state_stats,
        states,
        snapshots,
        washout,
    })
}

/// A readout fitted on one set of training pairs.
#[derive(Debug, Clone)]
pub struct FittedReadout {
    pub choice: ReadoutChoice,
    pub model: ReadoutModel,
    pub lambda: Option<LambdaSearch>,
    pub training: Option<TrainedAttention>,
}

pub fn fit_readout(
    choice: ReadoutChoice,
    cfg: &ReadoutConfig,
    seed: u64,
    r_train: &DMatrix<f64>,
    y_train: &DMatrix<f64>,
    r_test: &DMatrix<f64>,
    y_test: &DMatrix<f64>,
) -> Result<FittedReadout> {
    match choice.attention_kind() {
        None => {
            let (w, search) = select_lambda(r_train, y_train, &cfg.lambda_grid)?;
            log::debug!("ridge lambda {:e}", search.lambda);
            Ok(FittedReadout {
                choice,
                model: ReadoutModel::Ridge(w),
                lambda: Some(search),
                training: None,
            })
        }
        Some(kind) => {
            let train_cfg = crate::readout::TrainConfig {
                seed: cfg.train.seed.wrapping_add(seed),
                ..cfg.train.clone()
            };
            let trained = train_attention(kind, r_train, y_train, r_test, y_test, &train_cfg)?;
            let chosen = if cfg.use_best_epoch {
                trained.best.clone()
            } else {
                trained.last.clone()
            };
            Ok(FittedReadout {
                choice,
                model: chosen.into(),
                lambda: None,
                training: Some(trained),
            })
        }
    }
}

/// NRMSE of `k`-step-ahead predictions: row `l` of `states` predicts row
/// `l + k` of `series`.
pub fn open_loop_eval(
    model: &ReadoutModel,
    states: &DMatrix<f64>,
    series: &DMatrix<f64>,
    k: usize,
) -> Result<f64> {
    if states.nrows() != series.nrows() {
        return Err(Error::Shape("states and series must be aligned".into()));
    }
    if k == 0 || k + 2 > series.nrows() {
        return Err(Error::Shape(format!(
            "horizon {k} does not fit a test series of {} samples",
            series.nrows()
        )));
    }
    let n = series.nrows() - k;
    let pred = model.predict(&states.rows(0, n).into_owned())?;
    nrmse(&pred, &series.rows(k, n).into_owned())
}

/// Free-run prediction and its valid prediction time.
#[derive(Debug, Clone)]
pub struct ClosedLoopResult {
    /// Predicted samples; shorter than requested if the run escaped.
    pub prediction: DMatrix<f64>,
    pub vpt: Vpt,
    pub escaped_at: Option<usize>,
}

/// Parameters that convert a free run into Lyapunov time.
#[derive(Debug, Clone, Copy)]
pub struct VptScale {
    pub lyapunov: f64,
    pub dt_sample: f64,
    pub variance: f64,
    pub threshold: f64,
}

/// Predicts `steps` samples starting at input index `start` without
/// further access to the truth. `reservoir` must have consumed exactly the
/// inputs before `start`; the first prediction uses state row `start - 1`.
pub fn free_run(
    model: &ReadoutModel,
    state_stats: &StandardizationStats,
    mut reservoir: Reservoir,
    first_state: &[f64],
    steps: usize,
) -> Result<(DMatrix<f64>, Option<usize>)> {
    if steps == 0 {
        return Err(Error::Config(
            "closed-loop duration must be positive".into(),
        ));
    }
    let m = model.target_dim();
    let mut pred = DMatrix::zeros(steps, m);
    let mut d = model.predict_row(first_state)?;
    for t in 0..steps {
        if d.iter().any(|v| !v.is_finite()) {
            return Ok((pred.rows(0, t).into_owned(), Some(t)));
        }
        for (j, v) in d.iter().enumerate() {
            pred[(t, j)] = *v;
        }
        if t + 1 == steps {
            break;
        }
        d = match closed_loop_step(model, Some(state_stats), &mut reservoir, &d, t + 1) {
            Ok(next) => next,
            Err(Error::TrajectoryEscape { .. }) | Err(Error::Divergence { .. }) => {
                return Ok((pred.rows(0, t + 1).into_owned(), Some(t + 1)));
            }
            Err(e) => return Err(e),
        };
    }
    Ok((pred, None))
}

/// Teacher-forces up to `start`, free-runs `duration` samples and scores
/// the run against the exposed truth.
pub fn closed_loop_eval(
    model: &ReadoutModel,
    harvested: &Harvested,
    start: usize,
    duration: usize,
    scale: VptScale,
) -> Result<ClosedLoopResult> {
    if duration == 0 {
        return Err(Error::Config(
            "closed-loop duration must be positive".into(),
        ));
    }
    if start <= harvested.washout || start + duration > harvested.total_len() {
        return Err(Error::Config(format!(
            "closed-loop window {start}..{} lies outside the usable series",
            start + duration
        )));
    }
    let reservoir = harvested
        .snapshot(start)
        .ok_or_else(|| Error::Config(format!("no reservoir snapshot at {start}")))?
        .clone();
    let first: Vec<f64> = harvested.states.row(start - 1).iter().copied().collect();
    let (prediction, escaped_at) =
        free_run(model, &harvested.state_stats, reservoir, &first, duration)?;
    let truth = harvested.inputs.rows(start, duration).into_owned();
    let vpt = if prediction.nrows() == duration {
        vpt_normalized(
            &prediction,
            &truth,
            scale.variance,
            scale.lyapunov,
            scale.dt_sample,
            scale.threshold,
        )?
    } else {
        // pad the escaped tail so it counts as a crossing
        let mut padded = DMatrix::from_element(duration, truth.ncols(), f64::NAN);
        padded
            .rows_mut(0, prediction.nrows())
            .copy_from(&prediction);
        vpt_normalized(
            &padded,
            &truth,
            scale.variance,
            scale.lyapunov,
            scale.dt_sample,
            scale.threshold,
        )?
    };
    Ok(ClosedLoopResult {
        prediction,
        vpt,
        escaped_at,
    })
}

/// A group of closed-loop starts sharing one time scale.
#[derive(Debug, Clone)]
pub struct StartPlan {
    pub metric: &'static str,
    pub starts: Vec<usize>,
    pub duration: usize,
    pub scale: VptScale,
}

/// Closed-loop start points for a dataset.
///
/// UCTLS: `count` evenly spaced starts over the test split. ALRS: one start
/// per test window, `warmup` samples into the window, running to its end.
pub fn start_plans(split: &DatasetSplit, cfg: &Config) -> Vec<StartPlan> {
    let e = &cfg.eval;
    let n_train = split.train.len();
    let n_test = split.test.len();
    let test = split.test.exposed();
    match cfg.dataset.system {
        SystemChoice::Uctls => {
            let duration = e.free_run_steps.min(n_test - 1);
            let available = n_test - duration;
            let starts = (0..e.vpt_starts)
                .map(|i| n_train + 1 + i * (available - 1) / e.vpt_starts.max(1))
                .collect();
            vec![StartPlan {
                metric: "vpt",
                starts,
                duration,
                scale: VptScale {
                    lyapunov: SystemKind::Uctls.lyapunov(),
                    dt_sample: split.test.dt_sample(),
                    variance: total_variance(&test),
                    threshold: e.vpt_threshold,
                },
            }]
        }
        SystemChoice::Alrs => [
            (SystemKind::Rossler, "vpt_rossler"),
            (SystemKind::Lorenz, "vpt_lorenz"),
        ]
        .into_iter()
        .filter_map(|(kind, metric)| {
            let windows: Vec<_> = split
                .segments
                .iter()
                .filter(|s| s.system == kind && s.start >= n_train && s.len > e.window_warmup + 1)
                .collect();
            let first = windows.first()?;
            let mut rows = Vec::new();
            for s in &windows {
                rows.extend(s.start - n_train..s.end() - n_train);
            }
            let sys_test = DMatrix::from_fn(rows.len(), test.ncols(), |i, j| test[(rows[i], j)]);
            Some(StartPlan {
                metric,
                starts: windows.iter().map(|s| s.start + e.window_warmup).collect(),
                duration: first.len - e.window_warmup,
                scale: VptScale {
                    lyapunov: kind.lyapunov(),
                    dt_sample: first.dt_sample,
                    variance: total_variance(&sys_test),
                    threshold: e.vpt_threshold,
                },
            })
        })
        .collect(),
    }
}

/// One metric value of one readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberMetric {
    pub model: ReadoutChoice,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct MemberResult {
    pub seed: u64,
    pub metrics: Vec<MemberMetric>,
    /// One-step readouts fitted for each requested model.
    pub readouts: Vec<FittedReadout>,
    /// Content hash of the open-loop state matrix shared by all readouts.
    pub state_hash: String,
    /// The harvest the kept readouts were fitted on (the closed-loop one
    /// for ALRS).
    pub harvested: Harvested,
}

impl MemberResult {
    pub fn metric(&self, model: ReadoutChoice, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.model == model && m.metric == name)
            .map(|m| m.value)
    }

    pub fn readout(&self, model: ReadoutChoice) -> Option<&FittedReadout> {
        self.readouts.iter().find(|r| r.choice == model)
    }
}

fn horizon_metric(cfg: &Config, k: usize) -> String {
    if cfg.eval.horizons.len() == 1 {
        "nrmse".into()
    } else {
        format!("nrmse_h{k}")
    }
}

/// Runs every requested readout for one seed on a single shared harvest
/// (per exposure).
pub fn run_member(
    cfg: &Config,
    models: &[ReadoutChoice],
    seed: u64,
    cache: Option<&StateCache>,
) -> Result<MemberResult> {
    let alrs = cfg.dataset.system == SystemChoice::Alrs;
    let mut metrics = Vec::new();
    let push = |metrics: &mut Vec<MemberMetric>, model, metric: String, value| {
        metrics.push(MemberMetric {
            model,
            metric,
            value,
        });
    };

    // closed-loop runs need reservoir snapshots at the start points
    let closed_split = if cfg.eval.closed_loop {
        Some(build_dataset(&cfg.dataset, AlrsExposure::Xyz, seed)?)
    } else {
        None
    };
    let plans = closed_split
        .as_ref()
        .map(|s| start_plans(s, cfg))
        .unwrap_or_default();
    let mut snapshot_at: Vec<usize> = plans
        .iter()
        .flat_map(|p| p.starts.iter().copied())
        .collect();
    snapshot_at.sort_unstable();
    snapshot_at.dedup();

    let open_exposure = if alrs {
        AlrsExposure::XOnly
    } else {
        AlrsExposure::Xyz
    };
    let open_snaps: &[usize] = if alrs { &[] } else { &snapshot_at };
    let open = harvest_member(cfg, seed, open_exposure, open_snaps, cache)?;

    let mut readouts = Vec::new();
    for &k in &cfg.eval.horizons {
        let (r_tr, y_tr, r_te, y_te) = open.pairs(k)?;
        for &model in models {
            let fitted = fit_readout(model, &cfg.readout, seed, &r_tr, &y_tr, &r_te, &y_te)?;
            push(
                &mut metrics,
                model,
                horizon_metric(cfg, k),
                nrmse(&fitted.model.predict(&r_te)?, &y_te)?,
            );
            if k == 1 {
                push(
                    &mut metrics,
                    model,
                    "train_nrmse".into(),
                    nrmse(&fitted.model.predict(&r_tr)?, &y_tr)?,
                );
                readouts.push(fitted);
            }
        }
    }

    let state_hash = open.raw.content_hash();
    let mut closed_store = None;
    if cfg.eval.closed_loop {
        if alrs {
            closed_store = Some(harvest_member(
                cfg,
                seed,
                AlrsExposure::Xyz,
                &snapshot_at,
                cache,
            )?);
        }
        let closed = closed_store.as_ref().unwrap_or(&open);
        for &model in models {
            let fitted = if alrs || !cfg.eval.horizons.contains(&1) {
                let (r_tr, y_tr, r_te, y_te) = closed.pairs(1)?;
                fit_readout(model, &cfg.readout, seed, &r_tr, &y_tr, &r_te, &y_te)?
            } else {
                readouts
                    .iter()
                    .find(|r| r.choice == model)
                    .expect("one-step readout")
                    .clone()
            };
            for plan in &plans {
                let mut total = 0.0;
                let mut saturated = 0;
                for &s in &plan.starts {
                    let run =
                        closed_loop_eval(&fitted.model, closed, s, plan.duration, plan.scale)?;
                    total += run.vpt.lyapunov_times;
                    saturated += run.vpt.saturated as usize;
                }
                let n = plan.starts.len().max(1) as f64;
                push(&mut metrics, model, plan.metric.into(), total / n);
                push(
                    &mut metrics,
                    model,
                    format!("{}_saturated", plan.metric),
                    saturated as f64 / n,
                );
            }
            if alrs {
                // keep the closed-loop readout; it is the one that can free-run
                if let Some(r) = readouts.iter_mut().find(|r| r.choice == model) {
                    *r = fitted;
                }
            }
        }
    }

    Ok(MemberResult {
        seed,
        metrics,
        readouts,
        state_hash,
        harvested: closed_store.unwrap_or(open),
    })
}

/// Truth and free-run spectra of channel `channel`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumSet {
    pub truth: SpectrumResult,
    pub predicted: Vec<(ReadoutChoice, Option<SpectrumResult>)>,
}

/// Spectrum of the test split and of one long free run per readout,
/// started right after the training split. A run that escapes before
/// 256 samples yields no spectrum.
pub fn spectra(
    readouts: &[FittedReadout],
    backend: &ReservoirBackend,
    harvested: &Harvested,
    steps: usize,
    channel: usize,
) -> Result<SpectrumSet> {
    let dt = harvested.split.test.dt_sample();
    let n_train = harvested.n_train();
    let test = harvested.split.test.exposed();
    if channel >= test.ncols() {
        return Err(Error::Config(format!("channel {channel} is not exposed")));
    }
    // one segment length for all spectra so their frequency grids agree
    let segment = default_segment_len(test.nrows().min(steps));
    let truth = welch(
        &test.column(channel).iter().copied().collect::<Vec<_>>(),
        dt,
        segment,
        Window::Hann,
    )?;
    let reservoir = match harvested.snapshot(n_train) {
        Some(r) => r.clone(),
        None => harvest(
            backend,
            &harvested.inputs.rows(0, n_train).into_owned(),
            harvested.split.seed,
            &[n_train],
        )?
        .snapshots
        .remove(0),
    };
    let first: Vec<f64> = harvested.states.row(n_train - 1).iter().copied().collect();
    let mut predicted = Vec::new();
    for r in readouts {
        if r.model.target_dim() != test.ncols() {
            return Err(Error::Shape(
                "spectrum readout must predict every exposed channel".into(),
            ));
        }
        let (pred, escaped) = free_run(
            &r.model,
            &harvested.state_stats,
            reservoir.clone(),
            &first,
            steps,
        )?;
        if let Some(t) = escaped {
            log::warn!("{} free run escaped after {t} samples", r.choice.name());
        }
        let series: Vec<f64> = pred.column(channel).iter().copied().collect();
        predicted.push((r.choice, welch(&series, dt, segment, Window::Hann).ok()));
    }
    Ok(SpectrumSet { truth, predicted })
}

/// Mean Euclidean distance between attention-weight vectors on opposite
/// sides of a system switch, divided by the mean distance between vectors
/// on the same side. Each side is the `reach` samples next to the switch
/// (clipped to the window). Only boundaries whose both neighbouring windows
/// lie in `rows` are used.
pub fn boundary_distance_ratio(
    model: &ReadoutModel,
    states: &DMatrix<f64>,
    split: &DatasetSplit,
    rows: std::ops::Range<usize>,
    dim: usize,
    reach: usize,
) -> Result<f64> {
    let weights = |range: std::ops::Range<usize>| -> Result<Vec<Vec<f64>>> {
        range
            .map(|l| {
                let r: Vec<f64> = states.row(l).iter().copied().collect();
                Ok(model.output_weights(&r)?[dim].iter().copied().collect())
            })
            .collect()
    };
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let (mut across, mut n_across, mut within, mut n_within) = (0.0, 0usize, 0.0, 0usize);
    for pair in split.segments.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.start < rows.start || b.end() > rows.end {
            continue;
        }
        let wa = weights(a.end() - reach.min(a.len)..a.end())?;
        let wb = weights(b.start..b.start + reach.min(b.len))?;
        for x in &wa {
            for y in &wb {
                across += dist(x, y);
                n_across += 1;
            }
        }
        for w in [&wa, &wb] {
            for i in 0..w.len() {
                for j in i + 1..w.len() {
                    within += dist(&w[i], &w[j]);
                    n_within += 1;
                }
            }
        }
    }
    if n_across == 0 || n_within == 0 || within == 0.0 {
        return Err(Error::UndefinedMetric(
            "no system switch inside the evaluated rows".into(),
        ));
    }
    Ok((across / n_across as f64) / (within / n_within as f64))
}
