//! Full-batch gradient-descent training of the attention readouts.
//!
//! The loss is the mean squared residual `1/(2L) sum_l ||d_l - y_l||^2`;
//! the summed form has a gradient that grows with `L`, which makes any fixed
//! learning rate unstable at realistic dataset sizes.
//!
//! With [`Conditioning::Whitened`] the weights are optimized in decorrelated
//! coordinates `r~ = P^T r`, where `P P^T` is the inverse second-moment
//! matrix of the training states, and mapped back afterwards. The returned
//! models always act on the states as given.
//!
//! The linear model is a quadratic form, so its loss depends on the data only
//! through the Gram matrix of the symmetric quadratic features
//! `phi_ij = r_i r_j (i <= j)`. Below [`GRAM_FEATURE_LIMIT`] features the
//! Gram matrix is accumulated once and every epoch costs `O(N^4)` instead of
//! `O(L N^2)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::attention::{
    net_forward, net_gradient, predict_linear, weighted_outer_sum, AttentionNet, LinearAttention,
    NonlinearAttention,
};
use crate::io::write_csv;
use crate::{Error, Result};

/// Largest quadratic-feature count trained through the Gram matrix.
pub const GRAM_FEATURE_LIMIT: usize = 5050;

/// Training NRMSE above this is treated as divergence.
const DIVERGENCE_NRMSE: f64 = 1e12;

/// Fraction of the stability limit `2 / lambda_max` used when capping.
pub const STABLE_FRACTION: f64 = 0.95;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    PlainGd,
    /// Adaptive moments; not part of the original training procedure.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Optimize directly on the supplied (standardized) states.
    Standardized,
    /// Optimize in whitened state coordinates.
    Whitened,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Stop a target dimension after this many epochs without a new best
    /// test NRMSE. `None` always runs every epoch.
    pub patience: Option<usize>,
    pub conditioning: Conditioning,
    /// Plain gradient descent on the linear model only: reduce the step to
    /// `STABLE_FRACTION * 2 / lambda_max` of the loss Hessian when the
    /// configured rate exceeds it, instead of diverging.
    pub cap_to_stability: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 2000,
            optimizer: Optimizer::PlainGd,
            seed: 0,
            patience: Some(200),
            conditioning: Conditioning::Whitened,
            cap_to_stability: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Train and test NRMSE after each epoch; row 0 holds the initial weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub train_nrmse: Vec<f64>,
    pub test_nrmse: Vec<f64>,
}

impl LossCurve {
    pub fn len(&self) -> usize {
        self.train_nrmse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_nrmse.is_empty()
    }

    /// Writes `epoch,train_nrmse,test_nrmse`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = self
            .train_nrmse
            .iter()
            .zip(&self.test_nrmse)
            .enumerate()
            .map(|(e, (tr, te))| vec![e.to_string(), tr.to_string(), te.to_string()]);
        write_csv(path, &["epoch", "train_nrmse", "test_nrmse"], rows)
    }

    /// Means over consecutive non-overlapping windows of `width` epochs.
    pub fn smoothed_train(&self, width: usize) -> Vec<f64> {
        self.train_nrmse
            .chunks_exact(width.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionModel {
    Linear(LinearAttention),
    Nonlinear(NonlinearAttention),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedAttention {
    /// Weights after the final update of every dimension.
    pub last: AttentionModel,
    /// Weights at each dimension's lowest test NRMSE.
    pub best: AttentionModel,
    pub best_epoch: Vec<usize>,
    /// Epoch at which each dimension stopped updating.
    pub stopped_epoch: Vec<usize>,
    pub curve: LossCurve,
    /// Step size actually used (differs from the configured rate only when
    /// capped).
    pub learning_rate: f64,
}

/// Per-parameter-block update rule.
#[derive(Debug, Clone)]
enum Rule {
    Plain,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Rule {
    fn new(optimizer: Optimizer, len: usize) -> Self {
        match optimizer {
            Optimizer::PlainGd => Rule::Plain,
            Optimizer::Adam => Rule::Adam {
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            },
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Rule::Plain => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Rule::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t);
                let c2 = 1.0 - ADAM_BETA2.powi(*t);
                for i in 0..params.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Whitening map `P` with `P^T C P = I` for `C = R^T R / L`. Directions
/// with negligible variance are left unscaled.
pub(crate) fn whitening(r: &DMatrix<f64>) -> DMatrix<f64> {
    let n = r.ncols();
    let c = r.tr_mul(r) / r.nrows().max(1) as f64;
    let eig = c.symmetric_eigen();
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let mut p = eig.eigenvectors.clone();
    for j in 0..n {
        let ev = eig.eigenvalues[j];
        let s = if ev > 1e-10 * top {
            1.0 / ev.sqrt()
        } else {
            1.0
        };
        p.column_mut(j).scale_mut(s);
    }
    p
}

fn check_data(
    r_train: &DMatrix<f64>,
    y_train: &DMatrix<f64>,
    r_test: &DMatrix<f64>,
    y_test: &DMatrix<f64>,
) -> Result<()> {
    if r_train.nrows() != y_train.nrows()
        || r_test.nrows() != y_test.nrows()
        || r_train.ncols() != r_test.ncols()
        || y_train.ncols() != y_test.ncols()
    {
        return Err(Error::Shape("training and test arrays do not match".into()));
    }
    if r_train.nrows() < 2 || r_test.nrows() < 2 || r_train.ncols() == 0 || y_train.ncols() == 0 {
        return Err(Error::Shape(
            "training needs at least two train and test rows".into(),
        ));
    }
    Ok(())
}

/// Summed squared deviation from the column means, i.e. `L * Var(Y)`.
fn total_variance(y: &DMatrix<f64>) -> f64 {
    y.column_iter()
        .map(|c| {
            let m = c.mean();
            c.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
        })
        .sum()
}

/// Early stopping and best-weight bookkeeping shared by all routes.
struct Tracker {
    patience: Option<usize>,
    best_sse: Vec<f64>,
    best_epoch: Vec<usize>,
    stopped: Vec<Option<usize>>,
    curve: LossCurve,
    train_den: f64,
    test_den: f64,
    lr: f64,
}

impl Tracker {
    fn new(dims: usize, cfg: &TrainConfig, y_train: &DMatrix<f64>, y_test: &DMatrix<f64>) -> Self {
        Self {
            patience: cfg.patience,
            best_sse: vec![f64::INFINITY; dims],
            best_epoch: vec![0; dims],
            stopped: vec![None; dims],
            curve: LossCurve::default(),
            train_den: total_variance(y_train),
            test_den: total_variance(y_test),
            lr: cfg.learning_rate,
        }
    }

    fn active(&self, m: usize) -> bool {
        self.stopped[m].is_none()
    }

    fn all_stopped(&self) -> bool {
        self.stopped.iter().all(Option::is_some)
    }

    /// Records epoch `epoch` from per-dimension squared-error sums and
    /// returns which dimensions reached a new best.
    fn record(&mut self, epoch: usize, train_sse: &[f64], test_sse: &[f64]) -> Result<Vec<bool>> {
        let train = (train_sse.iter().sum::<f64>() / self.train_den).sqrt();
        let test = (test_sse.iter().sum::<f64>() / self.test_den).sqrt();
        if !train.is_finite() || train > DIVERGENCE_NRMSE {
            return Err(Error::TrainingDivergence {
                epoch,
                learning_rate: self.lr,
            });
        }
        self.curve.train_nrmse.push(train);
        self.curve.test_nrmse.push(test);
        let mut improved = vec![false; train_sse.len()];
        for m in 0..train_sse.len() {
            if !self.active(m) {
                continue;
            }
            if test_sse[m] < self.best_sse[m] {
                self.best_sse[m] = test_sse[m];
                self.best_epoch[m] = epoch;
                improved[m] = true;
            } else if let Some(p) = self.patience {
                if epoch - self.best_epoch[m] >= p {
                    self.stopped[m] = Some(epoch);
                }
            }
        }
        Ok(improved)
    }

    fn stopped_epochs(&self, last: usize) -> Vec<usize> {
        self.stopped.iter().map(|s| s.unwrap_or(last)).collect()
    }
}

pub fn train_attention(
    kind: AttentionKind,
    r_train: &DMatrix<f64>,
    y_train: &DMatrix<f64>,
    r_test: &DMatrix<f64>,
    y_test: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<TrainedAttention> {
    train_attention_with(
        kind,
        r_train,
        y_train,
        r_test,
        y_test,
        cfg,
        GRAM_FEATURE_LIMIT,
    )
}

pub(crate) fn train_attention_with(
    kind: AttentionKind,
    r_train: &DMatrix<f64>,
    y_train: &DMatrix<f64>,
    r_test: &DMatrix<f64>,
    y_test: &DMatrix<f64>,
    cfg: &TrainConfig,
    gram_limit: usize,
) -> Result<TrainedAttention> {
    cfg.validate()?;
    check_data(r_train, y_train, r_test, y_test)?;
    let n = r_train.ncols();
    let p = match cfg.conditioning {
        Conditioning::Standardized => DMatrix::identity(n, n),
        Conditioning::Whitened => whitening(r_train),
    };
    let (a_train, a_test) = (r_train * &p, r_test * &p);
    let mut out = match kind {
        AttentionKind::Linear if n * (n + 1) / 2 <= gram_limit => {
            train_linear_gram(&a_train, y_train, &a_test, y_test, cfg)?
        }
        AttentionKind::Linear => train_linear_direct(&a_train, y_train, &a_test, y_test, cfg)?,
        AttentionKind::Nonlinear => train_nonlinear(&a_train, y_train, &a_test, y_test, cfg)?,
    };
    if cfg.conditioning == Conditioning::Whitened {
        out.last = unwhiten(out.last, &p);
        out.best = unwhiten(out.best, &p);
    }
    Ok(out)
}

fn unwhiten(model: AttentionModel, p: &DMatrix<f64>) -> AttentionModel {
    match model {
        AttentionModel::Linear(m) => AttentionModel::Linear(LinearAttention {
            w_net: m.w_net.iter().map(|w| p * w * p.transpose()).collect(),
        }),
        AttentionModel::Nonlinear(m) => AttentionModel::Nonlinear(NonlinearAttention {
            nets: m
                .nets
                .iter()
                .map(|net| AttentionNet {
                    w1: &net.w1 * p.transpose(),
                    b1: net.b1.clone(),
                    w2: p * &net.w2,
                    b2: (p * DVector::from_column_slice(&net.b2))
                        .iter()
                        .copied()
                        .collect(),
                })
                .collect(),
            hidden_activation: m.hidden_activation,
        }),
    }
}

/// Largest eigenvalue of a symmetric positive semi-definite operator by
/// power iteration, started from `start`.
fn power_iteration(
    mut apply: impl FnMut(&DVector<f64>) -> DVector<f64>,
    start: DVector<f64>,
) -> f64 {
    let mut v = start.normalize();
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w = apply(&v);
        let next = v.dot(&w);
        let norm = w.norm();
        if !(norm > 0.0) {
            return 0.0;
        }
        v = w / norm;
        if (next - lambda).abs() <= 1e-10 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// `lambda_max` of the plain-gradient iteration of the linear model's mean
/// loss, `theta <- theta - lr * D G theta`, with `D` doubling off-diagonal
/// features. Gradient descent with rate `lr` is stable iff
/// `lr < 2 / lambda_max`.
pub fn linear_hessian_max(r: &DMatrix<f64>) -> f64 {
    let n = r.ncols();
    let l = r.nrows().max(1) as f64;
    // H V = 1/L sum_l (r^T S r) r r^T, S the symmetrized V; acting on
    // symmetric matrices this matches D G on features.
    let start = DVector::from_iterator(
        n * n,
        (0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.1 }),
    );
    power_iteration(
        |v| {
            let vm = DMatrix::from_column_slice(n, n, v.as_slice());
            let s = (&vm + vm.transpose()) * 0.5;
            let q = DVector::from_iterator(
                r.nrows(),
                (0..r.nrows()).map(|i| {
                    let row = r.row(i);
                    (row * &s * row.transpose())[(0, 0)]
                }),
            );
            let h = weighted_outer_sum(r, &q) / l;
            DVector::from_column_slice(h.as_slice())
        },
        start,
    )
}

fn gram_hessian_max(g: &DMatrix<f64>, pairs: &[(usize, usize)]) -> f64 {
    let d: DVector<f64> = DVector::from_iterator(
        pairs.len(),
        pairs
            .iter()
            .map(|&(i, j)| if i == j { 1.0 } else { 2.0f64.sqrt() }),
    );
    // D^{1/2} G D^{1/2} shares its spectrum with D G
    let start = DVector::from_iterator(
        pairs.len(),
        pairs.iter().map(|&(i, j)| if i == j { 1.0 } else { 0.1 }),
    );
    power_iteration(|v| (g * v.component_mul(&d)).component_mul(&d), start)
}

fn capped_rate(cfg: &TrainConfig, lambda_max: impl FnOnce() -> f64) -> f64 {
    if !cfg.cap_to_stability || cfg.optimizer != Optimizer::PlainGd || cfg.learning_rate == 0.0 {
        return cfg.learning_rate;
    }
    let limit = STABLE_FRACTION * 2.0 / lambda_max();
    if cfg.learning_rate > limit {
        log::warn!(
            "learning rate {} exceeds the stability limit; using {limit:.4e}",
            cfg.learning_rate
        );
        limit
    } else {
        cfg.learning_rate
    }
}

/// Index pairs `(i, j), i <= j` in feature order.
fn feature_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
}

/// Sufficient statistics of a quadratic-feature least-squares problem.
struct Gram {
    /// `Phi^T Phi / L`.
    g: DMatrix<f64>,
    /// `Phi^T Y / L`, one column per target.
    b: DMatrix<f64>,
    /// `sum_l y_lm^2` per target.
    yy: Vec<f64>,
    rows: f64,
}

impl Gram {
    fn build(r: &DMatrix<f64>, y: &DMatrix<f64>, pairs: &[(usize, usize)]) -> Self {
        const CHUNK: usize = 1024;
        let p = pairs.len();
        let l = r.nrows();
        let mut g = DMatrix::zeros(p, p);
        let mut b = DMatrix::zeros(p, y.ncols());
        let mut start = 0;
        while start < l {
            let len = CHUNK.min(l - start);
            let phi = DMatrix::from_fn(len, p, |k, q| {
                let (i, j) = pairs[q];
                r[(start + k, i)] * r[(start + k, j)]
            });
            g.gemm_tr(1.0, &phi, &phi, 1.0);
            b.gemm_tr(1.0, &phi, &y.rows(start, len), 1.0);
            start += len;
        }
        let lf = l as f64;
        Self {
            g: g / lf,
            b: b / lf,
            yy: y.column_iter().map(|c| c.norm_squared()).collect(),
            rows: lf,
        }
    }

    /// `sum_l (phi_l . theta - y_lm)^2`.
    fn sse(&self, theta: &DVector<f64>, m: usize) -> f64 {
        let q = theta.dot(&(&self.g * theta)) - 2.0 * theta.dot(&self.b.column(m));
        (self.rows * q + self.yy[m]).max(0.0)
    }
}

fn to_theta(w: &DMatrix<f64>, pairs: &[(usize, usize)]) -> DVector<f64> {
    DVector::from_iterator(
        pairs.len(),
        pairs.iter().map(|&(i, j)| {
            if i == j {
                w[(i, i)]
            } else {
                w[(i, j)] + w[(j, i)]
            }
        }),
    )
}

fn train_linear_gram(
    r_train: &DMatrix<f64>,
    y_train: &DMatrix<f64>,
    r_test: &DMatrix<f64>,
    y_test: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<TrainedAttention> {
    let n = r_train.ncols();
    let dims = y_train.ncols();
    let pairs = feature_pairs(n);
    let train = Gram::build(r_train, y_train, &pairs);
    let test = Gram::build(r_test, y_test, &pairs);
    let lr = capped_rate(cfg, || gram_hessian_max(&train.g, &pairs));
    let mut model = LinearAttention::init(n, dims, cfg.seed);
    let mut best = model.clone();
    let mut rules: Vec<Rule> = (0..dims).map(|_| Rule::new(cfg.optimizer, n * n)).collect();
    let mut tracker = Tracker::new(dims, cfg, y_train, y_test);
    let mut grad = DMatrix::zeros(n, n);
    let mut epoch = 0;
    loop {
        let thetas: Vec<DVector<f64>> = model.w_net.iter().map(|w| to_theta(w, &pairs)).collect();
        let train_sse: Vec<f64> = (0..dims).map(|m| train.sse(&thetas[m], m)).collect();
        let test_sse: Vec<f64> = (0..dims).map(|m| test.sse(&thetas[m], m)).collect();
        let improved = tracker.record(epoch, &train_sse, &test_sse)?;
        for m in 0..dims {
            if improved[m] {
                best.w_net[m].copy_from(&model.w_net[m]);
            }
        }
        if epoch == cfg.epochs || tracker.all_stopped() {
            break;
        }
        for m in 0..dims {
            if !tracker.active(m) {
                continue;
            }
            let g = &train.g * &thetas[m] - train.b.column(m);
            for (q, &(i, j)) in pairs.iter().enumerate() {
                grad[(i, j)] = g[q];
                grad[(j, i)] = g[q];
            }
            rules[m].apply(model.w_net[m].as_mut_slice(), grad.as_slice(), lr);
        }
        epoch += 1;
    }
    Ok(TrainedAttention {
        last: AttentionModel::Linear(model),
        best: AttentionModel::Linear(best),
        best_epoch: tracker.best_epoch.clone(),
        stopped_epoch: tracker.stopped_epochs(epoch),
        curve: tracker.curve,
        learning_rate: lr,
    })
}

fn column_sse(pred: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<f64> {
    (0..y.ncols())
        .map(|m| (pred.column(m) - y.column(m)).norm_squared())
        .collect()
}

fn train_linear_direct(
    r_train: &DMatrix<f64>,
    y_train: &DMatrix<f64>,
    r_test: &DMatrix<f64>,
    y_test: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<TrainedAttention> {
    let n = r_train.ncols();
    let dims = y_train.ncols();
    let l = r_train.nrows() as f64;
    let lr = capped_rate(cfg, || linear_hessian_max(r_train));
    let mut model = LinearAttention::init(n, dims, cfg.seed);
    let mut best = model.clone();
    let mut rules: Vec<Rule> = (0..dims).map(|_| Rule::new(cfg.optimizer, n * n)).collect();
    let mut tracker = Tracker::new(dims, cfg, y_train, y_test);
    let mut epoch = 0;
    loop {
        let pred = predict_linear(&model, r_train)?;
        let train_sse = column_sse(&pred, y_train);
        let test_sse = column_sse(&predict_linear(&model, r_test)?, y_test);
        let improved = tracker.record(epoch, &train_sse, &test_sse)?;
        for m in 0..dims {
            if improved[m] {
                best.w_net[m].copy_from(&model.w_net[m]);
            }
        }
        if epoch == cfg.epochs || tracker.all_stopped() {
            break;
        }
        for m in 0..dims {
            if !tracker.active(m) {
                continue;
            }
            let e = pred.column(m) - y_train.column(m);
            let grad = weighted_outer_sum(r_train, &e) / l;
            rules[m].apply(model.w_net[m].as_mut_slice(), grad.as_slice(), lr);
        }
        epoch += 1;
    }
    Ok(TrainedAttention {
        last: AttentionModel::Linear(model),
        best: AttentionModel::Linear(best),
        best_epoch: tracker.best_epoch.clone(),
        stopped_epoch: tracker.stopped_epochs(epoch),
        curve: tracker.curve,
        learning_rate: lr,
    })
}

fn train_nonlinear(
    r_train: &DMatrix<f64>,
    y_train: &DMatrix<f64>,
    r_test: &DMatrix<f64>,
    y_test: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<TrainedAttention> {
    let n = r_train.ncols();
    let dims = y_train.ncols();
    let l = r_train.nrows() as f64;
    let mut model = NonlinearAttention::init(n, dims, cfg.seed);
    let mut best = model.clone();
    let mut rules: Vec<[Rule; 4]> = (0..dims)
        .map(|_| {
            [
                Rule::new(cfg.optimizer, n * n),
                Rule::new(cfg.optimizer, n),
                Rule::new(cfg.optimizer, n * n),
                Rule::new(cfg.optimizer, n),
            ]
        })
        .collect();
    let mut tracker = Tracker::new(dims, cfg, y_train, y_test);
    let mut epoch = 0;
    loop {
        let passes: Vec<_> = model
            .nets
            .iter()
            .map(|net| net_forward(net, r_train))
            .collect();
        let train_sse: Vec<f64> = (0..dims)
            .map(|m| (&passes[m].d - y_train.column(m)).norm_squared())
            .collect();
        let test_sse: Vec<f64> = (0..dims)
            .map(|m| (net_forward(&model.nets[m], r_test).d - y_test.column(m)).norm_squared())
            .collect();
        let improved = tracker.record(epoch, &train_sse, &test_sse)?;
        for m in 0..dims {
            if improved[m] {
                best.nets[m] = model.nets[m].clone();
            }
        }
        if epoch == cfg.epochs || tracker.all_stopped() {
            break;
        }
        for m in 0..dims {
            if !tracker.active(m) {
                continue;
            }
            let e = &passes[m].d - y_train.column(m);
            let g = net_gradient(&model.nets[m], r_train, &passes[m], &e);
            let net = &mut model.nets[m];
            let lr = cfg.learning_rate;
            let [r1, rb1, r2, rb2] = &mut rules[m];
            r1.apply(net.w1.as_mut_slice(), (g.w1 / l).as_slice(), lr);
            rb1.apply(
                &mut net.b1,
                &g.b1.iter().map(|v| v / l).collect::<Vec<_>>(),
                lr,
            );
            r2.apply(net.w2.as_mut_slice(), (g.w2 / l).as_slice(), lr);
            rb2.apply(
                &mut net.b2,
                &g.b2.iter().map(|v| v / l).collect::<Vec<_>>(),
                lr,
            );
        }
        epoch += 1;
    }
    Ok(TrainedAttention {
        last: AttentionModel::Nonlinear(model),
        best: AttentionModel::Nonlinear(best),
        best_epoch: tracker.best_epoch.clone(),
        stopped_epoch: tracker.stopped_epochs(epoch),
        curve: tracker.curve,
        learning_rate: cfg.learning_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::readout::attention::predict_nonlinear;
    use crate::rng::{rng_for, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_for(seed, Stream::ReadoutInit, 55);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn cfg(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            epochs,
            patience: None,
            conditioning: Conditioning::Standardized,
            cap_to_stability: false,
            ..Default::default()
        }
    }

    fn linear(model: &AttentionModel) -> &LinearAttention {
        match model {
            AttentionModel::Linear(m) => m,
            _ => panic!("expected linear model"),
        }
    }

    #[test]
    fn zero_rate_keeps_initial_weights() {
        let r = random(30, 4, 1);
        let y = random(30, 2, 2);
        for kind in [AttentionKind::Linear, AttentionKind::Nonlinear] {
            let out = train_attention(kind, &r, &y, &r, &y, &cfg(0.0, 15)).unwrap();
            let init = match kind {
                AttentionKind::Linear => AttentionModel::Linear(LinearAttention::init(4, 2, 0)),
                AttentionKind::Nonlinear => {
                    AttentionModel::Nonlinear(NonlinearAttention::init(4, 2, 0))
                }
            };
            assert_eq!(out.last, init);
            assert_eq!(out.curve.len(), 16);
        }
    }

    #[test]
    fn realizable_target_converges_monotonically() {
        let r = random(200, 5, 3);
        let target = LinearAttention::init(5, 1, 42);
        let y = predict_linear(&target, &r).unwrap();
        // step below 2 / lambda_max of the feature Gram matrix
        let out = train_attention(AttentionKind::Linear, &r, &y, &r, &y, &cfg(0.05, 3000)).unwrap();
        let c = &out.curve.train_nrmse;
        assert!(c.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(c.last().unwrap() < &1e-3, "{}", c.last().unwrap());
    }

    #[test]
    fn gram_and_direct_routes_agree() {
        let r = random(60, 4, 5);
        let y = random(60, 2, 6);
        for optimizer in [Optimizer::PlainGd, Optimizer::Adam] {
            let c = TrainConfig {
                optimizer,
                ..cfg(0.02, 40)
            };
            let a = train_attention_with(AttentionKind::Linear, &r, &y, &r, &y, &c, usize::MAX)
                .unwrap();
            let b = train_attention_with(AttentionKind::Linear, &r, &y, &r, &y, &c, 0).unwrap();
            for (wa, wb) in linear(&a.last).w_net.iter().zip(&linear(&b.last).w_net) {
                assert!((wa - wb).amax() < 1e-10);
            }
            for (x, z) in a.curve.train_nrmse.iter().zip(&b.curve.train_nrmse) {
                assert!((x - z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn whitening_preserves_the_model_family() {
        let r =
            random(80, 4, 7) * DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0, 0.2, 2.0]));
        let y = random(80, 1, 8);
        let c = TrainConfig {
            conditioning: Conditioning::Whitened,
            ..cfg(0.01, 50)
        };
        for kind in [AttentionKind::Linear, AttentionKind::Nonlinear] {
            let out = train_attention(kind, &r, &y, &r, &y, &c).unwrap();
            let pred = match &out.last {
                AttentionModel::Linear(m) => predict_linear(m, &r).unwrap(),
                AttentionModel::Nonlinear(m) => predict_nonlinear(m, &r).unwrap(),
            };
            let sse: f64 = (pred - &y).norm_squared();
            let nrmse = (sse / total_variance(&y)).sqrt();
            assert!((nrmse - out.curve.train_nrmse.last().unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let r = random(50, 4, 9) * 10.0;
        let y = random(50, 1, 10);
        let err = train_attention(AttentionKind::Linear, &r, &y, &r, &y, &cfg(1.0, 500));
        assert!(matches!(err, Err(Error::TrainingDivergence { .. })));
    }

    #[test]
    fn hessian_bound_matches_dense_eigenvalues() {
        let r = random(40, 3, 15);
        let pairs = feature_pairs(3);
        let gram = Gram::build(&r, &DMatrix::zeros(40, 1), &pairs);
        let d = DMatrix::from_diagonal(&DVector::from_iterator(
            pairs.len(),
            pairs
                .iter()
                .map(|&(i, j)| if i == j { 1.0 } else { 2.0f64.sqrt() }),
        ));
        let dense = (&d * &gram.g * &d).symmetric_eigen().eigenvalues.max();
        assert!((gram_hessian_max(&gram.g, &pairs) - dense).abs() < 1e-6 * dense);
        assert!((linear_hessian_max(&r) - dense).abs() < 1e-6 * dense);
    }

    #[test]
    fn capped_rate_stays_stable() {
        let r = random(50, 4, 9) * 10.0;
        let y = random(50, 1, 10);
        let c = TrainConfig {
            cap_to_stability: true,
            ..cfg(1.0, 300)
        };
        for limit in [usize::MAX, 0] {
            let out =
                train_attention_with(AttentionKind::Linear, &r, &y, &r, &y, &c, limit).unwrap();
            assert!(out.learning_rate < 1.0);
            let t = &out.curve.train_nrmse;
            assert!(t.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        }
    }

    #[test]
    fn early_stopping_keeps_best_weights() {
        let r = random(40, 3, 11);
        let y = random(40, 1, 12);
        let r_test = random(40, 3, 13);
        let y_test = random(40, 1, 14);
        let c = TrainConfig {
            patience: Some(5),
            ..cfg(0.5, 2000)
        };
        let out = train_attention(AttentionKind::Linear, &r, &y, &r_test, &y_test, &c).unwrap();
        assert!(out.stopped_epoch[0] < 2000);
        assert_eq!(out.stopped_epoch[0], out.best_epoch[0] + 5);
        let best = out.curve.test_nrmse[out.best_epoch[0]];
        assert!(out.curve.test_nrmse.iter().all(|&v| v >= best));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn dimensions_train_independently(seed in 0u64..1000, kind_bit in any::<bool>()) {
            let kind = if kind_bit { AttentionKind::Linear } else { AttentionKind::Nonlinear };
            let r = random(25, 3, seed);
            let y = random(25, 2, seed + 1);
            let mut y2 = y.clone();
            y2.set_column(1, &random(25, 1, seed + 2).column(0));
            let c = TrainConfig { patience: Some(3), ..cfg(0.05, 30) };
            let a = train_attention(kind, &r, &y, &r, &y, &c).unwrap();
            let b = train_attention(kind, &r, &y2, &r, &y2, &c).unwrap();
            match (&a.last, &b.last) {
                (AttentionModel::Linear(x), AttentionModel::Linear(z)) => prop_assert_eq!(&x.w_net[0], &z.w_net[0]),
                (AttentionModel::Nonlinear(x), AttentionModel::Nonlinear(z)) => prop_assert_eq!(&x.nets[0], &z.nets[0]),
                _ => unreachable!(),
            }
        }
    }
}
