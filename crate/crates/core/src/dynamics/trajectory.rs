use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::io::atomic_write;
use crate::{Error, Result};

/// A sampled multi-channel time series.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    samples: DMatrix<f64>,
    dt_sample: f64,
    channel_labels: Vec<String>,
    exposed_mask: Vec<bool>,
}

impl Trajectory {
    pub fn new(
        samples: DMatrix<f64>,
        dt_sample: f64,
        channel_labels: Vec<String>,
        exposed_mask: Vec<bool>,
    ) -> Result<Self> {
        let channels = samples.ncols();
        if samples.nrows() == 0 {
            return Err(Error::Shape("trajectory needs at least one sample".into()));
        }
        if channel_labels.len() != channels || exposed_mask.len() != channels {
            return Err(Error::Shape(format!(
                "{channels} channels but {} labels and {} mask entries",
                channel_labels.len(),
                exposed_mask.len()
            )));
        }
        if !exposed_mask.iter().any(|&e| e) {
            return Err(Error::Config("at least one channel must be exposed".into()));
        }
        if !(dt_sample > 0.0) {
            return Err(Error::Config(format!(
                "dt_sample must be positive, got {dt_sample}"
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                context: "trajectory contains a non-finite sample".into(),
                step: i % samples.nrows(),
            });
        }
        Ok(Self {
            samples,
            dt_sample,
            channel_labels,
            exposed_mask,
        })
    }

    /// Single-channel trajectory with every channel exposed.
    pub fn from_columns(samples: DMatrix<f64>, dt_sample: f64) -> Result<Self> {
        let c = samples.ncols();
        Self::new(
            samples,
            dt_sample,
            (0..c).map(|i| format!("ch{i}")).collect(),
            vec![true; c],
        )
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn dt_sample(&self) -> f64 {
        self.dt_sample
    }

    pub fn channel_labels(&self) -> &[String] {
        &self.channel_labels
    }

    pub fn exposed_mask(&self) -> &[bool] {
        &self.exposed_mask
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.samples.ncols()
    }

    pub fn exposed_indices(&self) -> Vec<usize> {
        (0..self.n_channels())
            .filter(|&c| self.exposed_mask[c])
            .collect()
    }

    /// The exposed channels only, `L x exposed`.
    pub fn exposed(&self) -> DMatrix<f64> {
        self.samples.select_columns(&self.exposed_indices())
    }

    pub fn with_exposed_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.n_channels() || !mask.iter().any(|&e| e) {
            return Err(Error::Config("invalid exposure mask".into()));
        }
        self.exposed_mask = mask;
        Ok(self)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["t".to_owned()];
        header.extend((0..self.n_channels()).map(|c| format!("ch{c}")));
        wtr.write_record(&header)?;
        for (k, row) in self.samples.row_iter().enumerate() {
            let mut rec = vec![format!("{}", k as f64 * self.dt_sample)];
            rec.extend(row.iter().map(|v| format!("{v:e}")));
            wtr.write_record(&rec)?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        atomic_write(path, &bytes)
    }

    /// Reads samples written by [`Trajectory::write_csv`]; labels and
    /// exposure come from the sidecar metadata.
    pub fn read_csv(path: &Path, meta: &TrajectoryMetadata) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let channels = rdr.headers()?.len().saturating_sub(1);
        let mut data = Vec::new();
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec?;
            for f in rec.iter().skip(1) {
                data.push(
                    f.parse::<f64>()
                        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
                );
            }
            rows += 1;
        }
        let samples = DMatrix::from_row_slice(rows, channels, &data);
        Self::new(
            samples,
            meta.dt_sample,
            meta.channel_labels.clone(),
            meta.exposed_mask.clone(),
        )
    }

    pub fn metadata(&self, seed: u64, stats: Option<StandardizationStats>) -> TrajectoryMetadata {
        TrajectoryMetadata {
            version: TrajectoryMetadata::VERSION,
            dt_sample: self.dt_sample,
            channel_labels: self.channel_labels.clone(),
            exposed_mask: self.exposed_mask.clone(),
            seed,
            stats,
        }
    }
}

/// Sidecar JSON record stored next to a trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryMetadata {
    pub version: u32,
    pub dt_sample: f64,
    pub channel_labels: Vec<String>,
    pub exposed_mask: Vec<bool>,
    pub seed: u64,
    pub stats: Option<StandardizationStats>,
}

impl TrajectoryMetadata {
    pub const VERSION: u32 = 1;

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: Self = serde_json::from_str(&text)?;
        if meta.version != Self::VERSION {
            return Err(Error::Format(format!(
                "unsupported trajectory metadata version {}",
                meta.version
            )));
        }
        Ok(meta)
    }
}

/// Per-channel mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    /// Column statistics of `data`; fails on any constant column.
    pub fn from_matrix(data: &DMatrix<f64>) -> Result<Self> {
        let (mean, std) = column_mean_std(data);
        if let Some(c) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!(
                "channel {c} has zero standard deviation and cannot be standardized"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn from_trajectory(t: &Trajectory) -> Result<Self> {
        Self::from_matrix(t.samples())
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn apply(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(data.ncols())?;
        let mut out = data.clone();
        for (c, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            col.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }

    pub fn invert(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(data.ncols())?;
        let mut out = data.clone();
        for (c, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            col.iter_mut().for_each(|v| *v = *v * s + m);
        }
        Ok(out)
    }

    fn check(&self, channels: usize) -> Result<()> {
        if channels != self.mean.len() || channels != self.std.len() {
            return Err(Error::Shape(format!(
                "stats cover {} channels, data has {channels}",
                self.mean.len()
            )));
        }
        if let Some(c) = self.std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!(
                "channel {c} has zero standard deviation"
            )));
        }
        Ok(())
    }
}

pub(crate) fn column_mean_std(data: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = data.nrows() as f64;
    let mut mean = Vec::with_capacity(data.ncols());
    let mut std = Vec::with_capacity(data.ncols());
    for col in data.column_iter() {
        let m = col.iter().sum::<f64>() / n;
        let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        mean.push(m);
        std.push(v.sqrt());
    }
    (mean, std)
}

pub fn standardize(trajectory: &Trajectory, stats: &StandardizationStats) -> Result<Trajectory> {
    Ok(Trajectory {
        samples: stats.apply(trajectory.samples())?,
        ..trajectory.clone()
    })
}

pub fn destandardize(trajectory: &Trajectory, stats: &StandardizationStats) -> Result<Trajectory> {
    Ok(Trajectory {
        samples: stats.invert(trajectory.samples())?,
        ..trajectory.clone()
    })
}
