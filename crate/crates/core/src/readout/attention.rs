//! Attention readouts: the output weights are themselves a function of the
//! reservoir state, `w_att = F(r)`, and the prediction is `d = w_att . r`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::serde_matrix;
use crate::rng::{rng_for, Stream};
use crate::{Error, Result};

/// Linear attention, `w_att = W_net r`, one `N x N` matrix per target
/// dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearAttention {
    #[serde(with = "serde_matrix::vec")]
    pub w_net: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Tanh,
}

/// Per-dimension weights of the three-layer attention network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionNet {
    #[serde(with = "serde_matrix")]
    pub w1: DMatrix<f64>,
    pub b1: Vec<f64>,
    #[serde(with = "serde_matrix")]
    pub w2: DMatrix<f64>,
    pub b2: Vec<f64>,
}

/// Nonlinear attention, `w_att = W2 tanh(W1 r + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearAttention {
    pub nets: Vec<AttentionNet>,
    pub hidden_activation: HiddenActivation,
}

fn uniform_matrix(n: usize, seed: u64, index: u64) -> DMatrix<f64> {
    let bound = 1.0 / (n as f64).sqrt();
    let mut rng = rng_for(seed, Stream::ReadoutInit, index);
    DMatrix::from_fn(n, n, |_, _| rng.gen_range(-bound..bound))
}

fn check_state(n: usize, r: &[f64]) -> Result<()> {
    if r.len() != n {
        return Err(Error::Shape(format!(
            "state has {} entries, model expects {n}",
            r.len()
        )));
    }
    Ok(())
}

impl LinearAttention {
    /// Seeded uniform initialization on `[-1/sqrt(N), 1/sqrt(N)]`. Each
    /// dimension draws from its own stream.
    pub fn init(n: usize, dims: usize, seed: u64) -> Self {
        Self {
            w_net: (0..dims)
                .map(|m| uniform_matrix(n, seed, m as u64))
                .collect(),
        }
    }

    pub fn zeros(n: usize, dims: usize) -> Self {
        Self {
            w_net: vec![DMatrix::zeros(n, n); dims],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.w_net.first().map_or(0, |w| w.nrows())
    }

    pub fn dims(&self) -> usize {
        self.w_net.len()
    }

    pub fn weight_count(&self) -> usize {
        self.w_net.iter().map(|w| w.len()).sum()
    }
}

impl AttentionNet {
    fn init(n: usize, seed: u64, m: usize) -> Self {
        Self {
            w1: uniform_matrix(n, seed, 2 * m as u64 + 1_000),
            b1: vec![0.0; n],
            w2: uniform_matrix(n, seed, 2 * m as u64 + 1_001),
            b2: vec![0.0; n],
        }
    }

    fn zeros(n: usize) -> Self {
        Self {
            w1: DMatrix::zeros(n, n),
            b1: vec![0.0; n],
            w2: DMatrix::zeros(n, n),
            b2: vec![0.0; n],
        }
    }
}

impl NonlinearAttention {
    pub fn init(n: usize, dims: usize, seed: u64) -> Self {
        Self {
            nets: (0..dims).map(|m| AttentionNet::init(n, seed, m)).collect(),
            hidden_activation: HiddenActivation::Tanh,
        }
    }

    pub fn zeros(n: usize, dims: usize) -> Self {
        Self {
            nets: vec![AttentionNet::zeros(n); dims],
            hidden_activation: HiddenActivation::Tanh,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nets.first().map_or(0, |w| w.w1.nrows())
    }

    pub fn dims(&self) -> usize {
        self.nets.len()
    }

    /// Interlayer weights only; biases excluded.
    pub fn interlayer_weight_count(&self) -> usize {
        self.nets.iter().map(|n| n.w1.len() + n.w2.len()).sum()
    }
}

/// Attention weights and prediction for one state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// One `N`-vector per target dimension.
    pub w_att: Vec<DVector<f64>>,
    pub d: Vec<f64>,
}

/// Two-stage evaluation: `w_att = W_net r`, then `d = w_att . r`.
pub fn attention_forward_linear(model: &LinearAttention, r: &[f64]) -> Result<AttentionOutput> {
    check_state(model.n_nodes(), r)?;
    let r = DVector::from_column_slice(r);
    let w_att: Vec<DVector<f64>> = model.w_net.iter().map(|w| w * &r).collect();
    let d = w_att.iter().map(|w| w.dot(&r)).collect();
    Ok(AttentionOutput { w_att, d })
}

/// Single quadratic form `r^T W_net^T r` per dimension.
pub fn quadratic_form(model: &LinearAttention, r: &[f64]) -> Result<Vec<f64>> {
    check_state(model.n_nodes(), r)?;
    let r = DVector::from_column_slice(r);
    Ok(model
        .w_net
        .iter()
        .map(|w| (r.transpose() * w.transpose() * &r)[(0, 0)])
        .collect())
}

pub fn attention_forward_nonlinear(
    model: &NonlinearAttention,
    r: &[f64],
) -> Result<AttentionOutput> {
    check_state(model.n_nodes(), r)?;
    let r = DVector::from_column_slice(r);
    let mut w_att = Vec::with_capacity(model.dims());
    let mut d = Vec::with_capacity(model.dims());
    for net in &model.nets {
        let hidden = (&net.w1 * &r + DVector::from_column_slice(&net.b1)).map(f64::tanh);
        let w = &net.w2 * hidden + DVector::from_column_slice(&net.b2);
        d.push(w.dot(&r));
        w_att.push(w);
    }
    Ok(AttentionOutput { w_att, d })
}

/// Batch prediction `L x M` of the linear model.
pub fn predict_linear(model: &LinearAttention, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if r.ncols() != model.n_nodes() {
        return Err(Error::Shape(format!(
            "states have {} nodes, model expects {}",
            r.ncols(),
            model.n_nodes()
        )));
    }
    let mut out = DMatrix::zeros(r.nrows(), model.dims());
    for (m, w) in model.w_net.iter().enumerate() {
        // rows of R W^T are the attention weights w_att,l
        let att = r * w.transpose();
        for l in 0..r.nrows() {
            out[(l, m)] = att.row(l).dot(&r.row(l));
        }
    }
    Ok(out)
}

/// Activations of one attention network over a batch.
pub(crate) struct NetPass {
    /// `L x N` hidden activations.
    pub hidden: DMatrix<f64>,
    pub d: DVector<f64>,
}

pub(crate) fn net_forward(net: &AttentionNet, r: &DMatrix<f64>) -> NetPass {
    let mut hidden = r * net.w1.transpose();
    for mut row in hidden.row_iter_mut() {
        for (v, b) in row.iter_mut().zip(&net.b1) {
            *v = (*v + b).tanh();
        }
    }
    let mut att = &hidden * net.w2.transpose();
    for mut row in att.row_iter_mut() {
        for (v, b) in row.iter_mut().zip(&net.b2) {
            *v += b;
        }
    }
    let d = DVector::from_iterator(r.nrows(), (0..r.nrows()).map(|l| att.row(l).dot(&r.row(l))));
    NetPass { hidden, d }
}

pub fn predict_nonlinear(model: &NonlinearAttention, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if r.ncols() != model.n_nodes() {
        return Err(Error::Shape(format!(
            "states have {} nodes, model expects {}",
            r.ncols(),
            model.n_nodes()
        )));
    }
    let mut out = DMatrix::zeros(r.nrows(), model.dims());
    for (m, net) in model.nets.iter().enumerate() {
        out.set_column(m, &net_forward(net, r).d);
    }
    Ok(out)
}

/// Gradient of one attention network's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradient {
    pub w1: DMatrix<f64>,
    pub b1: Vec<f64>,
    pub w2: DMatrix<f64>,
    pub b2: Vec<f64>,
}

/// Gradient of `F = 1/2 sum_l ||d_l - y_l||^2` with respect to every weight.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionGradient {
    Linear(Vec<DMatrix<f64>>),
    Nonlinear(Vec<NetGradient>),
}

/// Model variants accepted by [`attention_gradient`].
#[derive(Debug, Clone, Copy)]
pub enum AttentionRef<'a> {
    Linear(&'a LinearAttention),
    Nonlinear(&'a NonlinearAttention),
}

fn check_batch(n: usize, dims: usize, r: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if r.ncols() != n || y.ncols() != dims || r.nrows() != y.nrows() {
        return Err(Error::Shape(format!(
            "states {}x{} and targets {}x{} do not fit a model with {n} nodes and {dims} outputs",
            r.nrows(),
            r.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    Ok(())
}

/// `sum_l e_l r_l r_l^T` for residuals `e`.
pub(crate) fn weighted_outer_sum(r: &DMatrix<f64>, e: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = r.clone();
    for (mut row, &w) in scaled.row_iter_mut().zip(e.iter()) {
        row *= w;
    }
    scaled.tr_mul(r)
}

pub(crate) fn net_gradient(
    net: &AttentionNet,
    r: &DMatrix<f64>,
    pass: &NetPass,
    e: &DVector<f64>,
) -> NetGradient {
    // dF/d(att) = e_l r_l
    let mut d_att = r.clone();
    for (mut row, &w) in d_att.row_iter_mut().zip(e.iter()) {
        row *= w;
    }
    let w2 = d_att.tr_mul(&pass.hidden);
    let b2 = d_att.row_sum().iter().copied().collect();
    let mut d_pre = &d_att * &net.w2;
    d_pre.zip_apply(&pass.hidden, |g, h| *g *= 1.0 - h * h);
    let w1 = d_pre.tr_mul(r);
    let b1 = d_pre.row_sum().iter().copied().collect();
    NetGradient { w1, b1, w2, b2 }
}

pub fn attention_gradient(
    model: AttentionRef<'_>,
    r: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<AttentionGradient> {
    match model {
        AttentionRef::Linear(m) => {
            check_batch(m.n_nodes(), m.dims(), r, y)?;
            let pred = predict_linear(m, r)?;
            Ok(AttentionGradient::Linear(
                (0..m.dims())
                    .map(|k| weighted_outer_sum(r, &(pred.column(k) - y.column(k))))
                    .collect(),
            ))
        }
        AttentionRef::Nonlinear(m) => {
            check_batch(m.n_nodes(), m.dims(), r, y)?;
            Ok(AttentionGradient::Nonlinear(
                m.nets
                    .iter()
                    .enumerate()
                    .map(|(k, net)| {
                        let pass = net_forward(net, r);
                        let e = &pass.d - y.column(k);
                        net_gradient(net, r, &pass, &e)
                    })
                    .collect(),
            ))
        }
    }
}

/// `1/2 sum ||d - y||^2` of either attention model.
pub fn attention_loss(model: AttentionRef<'_>, r: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    let pred = match model {
        AttentionRef::Linear(m) => predict_linear(m, r)?,
        AttentionRef::Nonlinear(m) => predict_nonlinear(m, r)?,
    };
    if pred.shape() != y.shape() {
        return Err(Error::Shape("prediction and target shapes differ".into()));
    }
    Ok(0.5 * (pred - y).norm_squared())
}
