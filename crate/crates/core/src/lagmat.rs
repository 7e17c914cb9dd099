//! Block-Hankel lag embedding.
//!
//! Column `(c, lag)` of the embedded matrix holds `x_c(t + lag)` at row `t`,
//! zero where `t + lag` leaves the trial. Blocks are ordered by channel and
//! lags ascend inside each block.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<i64>", into = "Vec<i64>")]
pub struct LagSpec {
    lags: Vec<i64>,
}

impl LagSpec {
    pub fn new(lags: Vec<i64>) -> Result<Self> {
        if lags.is_empty() {
            return Err(Error::InvalidArgument("lag list is empty".into()));
        }
        if lags.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "lags must be strictly increasing: {lags:?}"
            )));
        }
        Ok(Self { lags })
    }

    pub fn lags(&self) -> &[i64] {
        &self.lags
    }

    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    pub fn max_abs(&self) -> usize {
        self.lags.iter().map(|l| l.unsigned_abs() as usize).max().unwrap_or(0)
    }

    /// Duration in seconds spanned by the lags at `sample_rate_hz`.
    pub fn window_s(&self, sample_rate_hz: f64) -> f64 {
        (self.lags[self.lags.len() - 1] - self.lags[0]) as f64 / sample_rate_hz
    }
}

impl TryFrom<Vec<i64>> for LagSpec {
    type Error = Error;

    fn try_from(lags: Vec<i64>) -> Result<Self> {
        Self::new(lags)
    }
}

impl From<LagSpec> for Vec<i64> {
    fn from(spec: LagSpec) -> Self {
        spec.lags
    }
}

/// Centered lags `-(L-1)/2 ..= (L-1)/2` for EEG views.
pub fn eeg_lagspec(l: usize) -> Result<LagSpec> {
    if l == 0 || l % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "EEG lag count must be odd and positive, got {l}"
        )));
    }
    let half = (l as i64 - 1) / 2;
    LagSpec::new((-half..=half).collect())
}

/// Causal lags `-(P-1) ..= 0`: the current and `P-1` past stimulus samples.
pub fn stimulus_lagspec(p: usize) -> Result<LagSpec> {
    if p == 0 {
        return Err(Error::InvalidArgument("stimulus lag count must be >= 1".into()));
    }
    LagSpec::new((-(p as i64 - 1)..=0).collect())
}

pub fn lag_embed(signal: &DMatrix<f64>, spec: &LagSpec) -> Result<DMatrix<f64>> {
    let (t, channels) = signal.shape();
    if t <= spec.max_abs() {
        return Err(Error::InvalidArgument(format!(
            "{t} samples cannot hold lag {}",
            spec.max_abs()
        )));
    }
    let n_lags = spec.len();
    let mut out = DMatrix::zeros(t, channels * n_lags);
    for c in 0..channels {
        let src = signal.column(c);
        for (j, &lag) in spec.lags().iter().enumerate() {
            let mut dst = out.column_mut(c * n_lags + j);
            // rows t where 0 <= t + lag < T
            let start = (-lag).max(0) as usize;
            let end = (t as i64 - lag).min(t as i64) as usize;
            for row in start..end {
                dst[row] = src[(row as i64 + lag) as usize];
            }
        }
    }
    Ok(out)
}
