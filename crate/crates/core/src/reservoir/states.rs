use nalgebra::DMatrix;

use crate::dynamics::StandardizationStats;
use crate::io::sha256_hex;
use crate::{Error, Result};

/// Harvested reservoir responses, one row per input sample and one column
/// per node.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix {
    data: DMatrix<f64>,
    stats: Option<StandardizationStats>,
}

impl StateMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                context: "reservoir state matrix".into(),
                step: i % data.nrows().max(1),
            });
        }
        Ok(Self { data, stats: None })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_standardized(&self) -> bool {
        self.stats.is_some()
    }

    /// Per-node statistics used for standardization, if any.
    pub fn stats(&self) -> Option<&StandardizationStats> {
        self.stats.as_ref()
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> StateMatrix {
        StateMatrix {
            data: self.data.rows(start, len).into_owned(),
            stats: self.stats.clone(),
        }
    }

    /// SHA-256 over shape and the exact bit patterns of the entries.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(16 + 8 * self.data.len());
        bytes.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.cols() as u64).to_le_bytes());
        for v in self.data.iter() {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}

/// Per-node statistics with zero-variance nodes clamped to unit scale.
/// Returns the indices of clamped nodes.
pub fn node_stats(data: &DMatrix<f64>) -> (StandardizationStats, Vec<usize>) {
    let n = data.nrows() as f64;
    let mut mean = Vec::with_capacity(data.ncols());
    let mut std = Vec::with_capacity(data.ncols());
    let mut clamped = Vec::new();
    for (j, col) in data.column_iter().enumerate() {
        let m = col.iter().sum::<f64>() / n;
        let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        let s = v.sqrt();
        // constant nodes carry no information; keep them at zero
        if !(s > 1e-300) || s <= 1e-12 * m.abs() {
            clamped.push(j);
            std.push(1.0);
        } else {
            std.push(s);
        }
        mean.push(m);
    }
    (StandardizationStats { mean, std }, clamped)
}

/// Z-scores every node. Without `stats` the statistics are computed from
/// `states` itself (training data); pass the training statistics when
/// standardizing test states.
pub fn standardize_states(
    states: &StateMatrix,
    stats: Option<&StandardizationStats>,
) -> Result<StateMatrix> {
    if states.is_standardized() {
        return Err(Error::Config("state matrix is already standardized".into()));
    }
    let stats = match stats {
        Some(s) => s.clone(),
        None => {
            let (s, clamped) = node_stats(&states.data);
            if !clamped.is_empty() {
                log::warn!(
                    "{} constant reservoir node(s) {:?}: std clamped to 1",
                    clamped.len(),
                    clamped
                );
            }
            s
        }
    };
    let data = stats.apply(&states.data)?;
    Ok(StateMatrix {
        data,
        stats: Some(stats),
    })
}

pub fn destandardize_states(states: &StateMatrix) -> Result<StateMatrix> {
    let stats = states
        .stats
        .as_ref()
        .ok_or_else(|| Error::Config("state matrix is not standardized".into()))?;
    Ok(StateMatrix {
        data: stats.invert(&states.data)?,
        stats: None,
    })
}
