use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::attention::{
    attention_forward_linear, attention_forward_nonlinear, predict_linear, predict_nonlinear,
    LinearAttention, NonlinearAttention,
};
use super::ridge::{predict_ridge, RidgeWeights};
use super::train::AttentionModel;
use crate::dynamics::StandardizationStats;
use crate::io::atomic_write;
use crate::reservoir::Reservoir;
use crate::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Any trained readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReadoutModel {
    Ridge(RidgeWeights),
    LinearAttention(LinearAttention),
    NonlinearAttention(NonlinearAttention),
}

impl From<AttentionModel> for ReadoutModel {
    fn from(m: AttentionModel) -> Self {
        match m {
            AttentionModel::Linear(l) => ReadoutModel::LinearAttention(l),
            AttentionModel::Nonlinear(n) => ReadoutModel::NonlinearAttention(n),
        }
    }
}

impl ReadoutModel {
    pub fn n_nodes(&self) -> usize {
        match self {
            ReadoutModel::Ridge(w) => w.w.nrows(),
            ReadoutModel::LinearAttention(m) => m.n_nodes(),
            ReadoutModel::NonlinearAttention(m) => m.n_nodes(),
        }
    }

    pub fn target_dim(&self) -> usize {
        match self {
            ReadoutModel::Ridge(w) => w.w.ncols(),
            ReadoutModel::LinearAttention(m) => m.dims(),
            ReadoutModel::NonlinearAttention(m) => m.dims(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ReadoutModel::Ridge(_) => "ridge",
            ReadoutModel::LinearAttention(_) => "linear-attention",
            ReadoutModel::NonlinearAttention(_) => "nonlinear-attention",
        }
    }

    /// Predictions for every row of `r`.
    pub fn predict(&self, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            ReadoutModel::Ridge(w) => predict_ridge(r, w),
            ReadoutModel::LinearAttention(m) => predict_linear(m, r),
            ReadoutModel::NonlinearAttention(m) => predict_nonlinear(m, r),
        }
    }

    /// Output weights applied to `r`, one `N`-vector per target dimension.
    /// Static for ridge, state dependent for attention.
    pub fn output_weights(&self, r: &[f64]) -> Result<Vec<DVector<f64>>> {
        match self {
            ReadoutModel::Ridge(w) => {
                if r.len() != w.w.nrows() {
                    return Err(Error::Shape(
                        "state length does not match ridge weights".into(),
                    ));
                }
                Ok(w.w.column_iter().map(|c| c.into_owned()).collect())
            }
            ReadoutModel::LinearAttention(m) => Ok(attention_forward_linear(m, r)?.w_att),
            ReadoutModel::NonlinearAttention(m) => Ok(attention_forward_nonlinear(m, r)?.w_att),
        }
    }

    pub fn predict_row(&self, r: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .output_weights(r)?
            .iter()
            .map(|w| w.iter().zip(r).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Serialized form of a readout together with the node statistics it was
/// trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedModel {
    pub version: u32,
    pub n_nodes: usize,
    pub target_dim: usize,
    pub config_hash: Option<String>,
    pub state_stats: Option<StandardizationStats>,
    pub model: ReadoutModel,
}

impl SavedModel {
    pub fn new(
        model: ReadoutModel,
        state_stats: Option<StandardizationStats>,
        config_hash: Option<String>,
    ) -> Self {
        Self {
            version: MODEL_FORMAT_VERSION,
            n_nodes: model.n_nodes(),
            target_dim: model.target_dim(),
            config_hash,
            state_stats,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let saved: SavedModel = serde_json::from_str(&text)?;
        if saved.version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "model format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
                saved.version
            )));
        }
        if saved.n_nodes != saved.model.n_nodes() || saved.target_dim != saved.model.target_dim() {
            return Err(Error::Format(
                "model shape metadata does not match weights".into(),
            ));
        }
        Ok(saved)
    }
}

/// Feeds `last_prediction` into the reservoir for one mask period and reads
/// the next prediction. `state_stats` standardizes the node responses the
/// same way as during training.
pub fn closed_loop_step(
    model: &ReadoutModel,
    state_stats: Option<&StandardizationStats>,
    reservoir: &mut Reservoir,
    last_prediction: &[f64],
    step: usize,
) -> Result<Vec<f64>> {
    let mut r = reservoir.step(last_prediction)?;
    if let Some(stats) = state_stats {
        for ((v, m), s) in r.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - m) / s;
        }
    }
    let d = model.predict_row(&r)?;
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::TrajectoryEscape { step });
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reservoir::ReservoirBackend;

    #[test]
    fn json_round_trip_is_exact() {
        let models = [
            ReadoutModel::Ridge(RidgeWeights {
                w: DMatrix::from_fn(4, 2, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0)),
                lambda: 1e-6,
            }),
            ReadoutModel::LinearAttention(LinearAttention::init(4, 3, 9)),
            ReadoutModel::NonlinearAttention(NonlinearAttention::init(4, 2, 9)),
        ];
        let dir = tempfile::tempdir().unwrap();
        for model in models {
            let saved = SavedModel::new(model, None, Some("abc".into()));
            let path = dir.path().join("m.json");
            saved.save(&path).unwrap();
            assert_eq!(SavedModel::load(&path).unwrap(), saved);
        }
    }

    #[test]
    fn rejects_other_versions() {
        let dir = tempfile::tempdir().unwrap();
        let mut saved = SavedModel::new(
            ReadoutModel::LinearAttention(LinearAttention::init(2, 1, 0)),
            None,
            None,
        );
        saved.version = 99;
        let path = dir.path().join("m.json");
        saved.save(&path).unwrap();
        assert!(matches!(SavedModel::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn row_and_batch_predictions_agree() {
        let r = DMatrix::from_fn(5, 3, |i, j| ((i * 3 + j) as f64).sin());
        for model in [
            ReadoutModel::LinearAttention(LinearAttention::init(3, 2, 1)),
            ReadoutModel::NonlinearAttention(NonlinearAttention::init(3, 2, 1)),
            ReadoutModel::Ridge(RidgeWeights {
                w: DMatrix::from_element(3, 2, 0.5),
                lambda: 0.0,
            }),
        ] {
            let batch = model.predict(&r).unwrap();
            for l in 0..5 {
                let row: Vec<f64> = r.row(l).iter().copied().collect();
                let p = model.predict_row(&row).unwrap();
                for m in 0..2 {
                    assert!((p[m] - batch[(l, m)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn closed_loop_leaves_weights_alone() {
        let model = ReadoutModel::LinearAttention(LinearAttention::init(6, 1, 3));
        let copy = model.clone();
        let mut res = ReservoirBackend::leaky_esn(6).build(1, 0).unwrap();
        let mut d = vec![0.1];
        for s in 0..20 {
            d = closed_loop_step(&model, None, &mut res, &d, s).unwrap();
        }
        assert_eq!(model, copy);
    }
}
