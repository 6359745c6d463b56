use nalgebra::DMatrix;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default VPT threshold on the normalized squared error.
pub const VPT_THRESHOLD: f64 = 0.4;

fn same_shape(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "prediction is {}x{} but truth is {}x{}",
            pred.nrows(),
            pred.ncols(),
            truth.nrows(),
            truth.ncols()
        )));
    }
    Ok(())
}

/// Sum over columns of the population variance.
pub fn total_variance(y: &DMatrix<f64>) -> f64 {
    let l = y.nrows() as f64;
    y.column_iter()
        .map(|c| {
            let m = c.mean();
            c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / l
        })
        .sum()
}

/// `sqrt(sum_l ||d_l - y_l||^2 / (L Var(Y)))` with `Var(Y)` the summed
/// population variance of the truth columns.
pub fn nrmse(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    same_shape(pred, truth)?;
    if truth.nrows() < 2 {
        return Err(Error::Shape("NRMSE needs at least two points".into()));
    }
    let var = total_variance(truth);
    if !(var > 0.0) {
        return Err(Error::UndefinedMetric("NRMSE of a constant target".into()));
    }
    Ok(((pred - truth).norm_squared() / (truth.nrows() as f64 * var)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vpt {
    /// Valid prediction time in Lyapunov times.
    pub lyapunov_times: f64,
    /// Index of the first sample whose error exceeds the threshold.
    pub crossing: Option<usize>,
    /// True when the threshold was never exceeded; `lyapunov_times` is then
    /// the full duration.
    pub saturated: bool,
}

/// Valid prediction time with the error normalized by the time-averaged
/// squared deviation of `truth` from its own mean.
pub fn vpt(
    pred: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    lyapunov: f64,
    dt_sample: f64,
    threshold: f64,
) -> Result<Vpt> {
    same_shape(pred, truth)?;
    vpt_normalized(
        pred,
        truth,
        total_variance(truth),
        lyapunov,
        dt_sample,
        threshold,
    )
}

/// As [`vpt`] with an explicit normalizing variance, e.g. that of a whole
/// test set when `truth` is a short window.
pub fn vpt_normalized(
    pred: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    variance: f64,
    lyapunov: f64,
    dt_sample: f64,
    threshold: f64,
) -> Result<Vpt> {
    same_shape(pred, truth)?;
    if !(lyapunov > 0.0) || !(dt_sample > 0.0) {
        return Err(Error::Config(
            "VPT needs positive lyapunov exponent and dt".into(),
        ));
    }
    if truth.nrows() == 0 {
        return Err(Error::Shape("VPT of an empty series".into()));
    }
    if !(variance > 0.0) {
        return Err(Error::UndefinedMetric(
            "VPT against a constant truth".into(),
        ));
    }
    let crossing = (0..truth.nrows()).find(|&l| {
        let err = (pred.row(l) - truth.row(l)).norm_squared() / variance;
        // a non-finite prediction counts as a crossing
        !(err <= threshold)
    });
    let steps = crossing.unwrap_or(truth.nrows());
    Ok(Vpt {
        lyapunov_times: steps as f64 * dt_sample * lyapunov,
        crossing,
        saturated: crossing.is_none(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Symmetric Hann window.
    Hann,
    Rectangular,
}

impl Window {
    fn weights(self, len: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; len],
            Window::Hann if len == 1 => vec![1.0],
            Window::Hann => (0..len)
                .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (len - 1) as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    /// Cycles per model-time unit.
    pub frequencies: Vec<f64>,
    pub power: Vec<f64>,
    pub averaging_windows: usize,
}

impl SpectrumResult {
    pub fn bin_width(&self) -> f64 {
        self.frequencies.get(1).copied().unwrap_or(0.0)
    }

    /// Frequency of the largest bin.
    pub fn peak_frequency(&self) -> f64 {
        let k = (0..self.power.len())
            .max_by(|&a, &b| self.power[a].total_cmp(&self.power[b]))
            .unwrap_or(0);
        self.frequencies[k]
    }
}

/// Smallest accepted series length.
pub const MIN_SPECTRUM_LEN: usize = 256;

/// Segment length used by [`power_spectrum`]: the largest power of two not
/// above a quarter of the series, kept between 256 and 4096.
pub fn default_segment_len(len: usize) -> usize {
    let mut s = MIN_SPECTRUM_LEN;
    while s * 2 <= len / 4 && s * 2 <= 4096 {
        s *= 2;
    }
    s.min(len)
}

/// One-sided power spectral density averaged over Hann-windowed segments
/// with 50% overlap.
pub fn power_spectrum(series: &[f64], dt_sample: f64) -> Result<SpectrumResult> {
    welch(
        series,
        dt_sample,
        default_segment_len(series.len()),
        Window::Hann,
    )
}

pub fn welch(
    series: &[f64],
    dt_sample: f64,
    segment: usize,
    window: Window,
) -> Result<SpectrumResult> {
    if series.len() < MIN_SPECTRUM_LEN {
        return Err(Error::Shape(format!(
            "spectrum needs at least {MIN_SPECTRUM_LEN} samples, got {}",
            series.len()
        )));
    }
    if segment < 2 || segment > series.len() {
        return Err(Error::Config(format!("invalid segment length {segment}")));
    }
    if !(dt_sample > 0.0) {
        return Err(Error::Config("dt_sample must be positive".into()));
    }
    let fs = 1.0 / dt_sample;
    let w = window.weights(segment);
    let w_energy: f64 = w.iter().map(|v| v * v).sum();
    let step = segment / 2;
    let fft = FftPlanner::new().plan_fft_forward(segment);
    let bins = segment / 2 + 1;
    let mut power = vec![0.0; bins];
    let mut windows = 0;
    let mut start = 0;
    let mut buf = vec![Complex::new(0.0, 0.0); segment];
    while start + segment <= series.len() {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(series[start + i] * w[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p += buf[k].norm_sqr();
        }
        windows += 1;
        start += step;
    }
    for (k, p) in power.iter_mut().enumerate() {
        let one_sided = if k == 0 || (segment.is_multiple_of(2) && k == segment / 2) {
            1.0
        } else {
            2.0
        };
        *p *= one_sided / (fs * w_energy * windows as f64);
    }
    Ok(SpectrumResult {
        frequencies: (0..bins).map(|k| k as f64 * fs / segment as f64).collect(),
        power,
        averaging_windows: windows,
    })
}
