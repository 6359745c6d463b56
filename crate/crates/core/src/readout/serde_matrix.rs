//! Row-major `{rows, cols, data}` encoding of dense matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&DMatrix<f64>> for Dense {
    fn from(m: &DMatrix<f64>) -> Self {
        Dense {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }
}

impl TryFrom<Dense> for DMatrix<f64> {
    type Error = String;

    fn try_from(d: Dense) -> Result<Self, String> {
        if d.data.len() != d.rows * d.cols {
            return Err(format!(
                "matrix declares {}x{} but holds {} values",
                d.rows,
                d.cols,
                d.data.len()
            ));
        }
        Ok(DMatrix::from_row_slice(d.rows, d.cols, &d.data))
    }
}

pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    Dense::from(m).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
    Dense::deserialize(d)?
        .try_into()
        .map_err(serde::de::Error::custom)
}

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        ms.iter().map(Dense::from).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        Vec::<Dense>::deserialize(d)?
            .into_iter()
            .map(|m| m.try_into().map_err(serde::de::Error::custom))
            .collect()
    }
}
