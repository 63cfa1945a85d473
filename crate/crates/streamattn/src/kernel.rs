//! Influence kernels over causal step pairs.
//!
//! A kernel profile assigns a nonnegative weight `K(t, i)` to every causal
//! pair of steps `i <= t`, describing how strongly evidence written at step
//! `i` still influences the readout at step `t`. Step indices are 1-based in
//! every public signature, matching the way the weights are written out;
//! storage is 0-based row-major and the mapping happens at the API boundary.

use std::path::Path;

use crate::error::{Error, Result};

// =========================================================================
// Shapes
// =========================================================================

/// Canonical influence patterns used for side-by-side stream comparisons.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelShape {
    /// Sliding window: weight 1 while `t - i < window`, 0 beyond it.
    Box { window: usize },
    /// Full weight inside a block of `period` steps, zero across block
    /// boundaries; models a cache that is rebuilt from scratch every period.
    BlockRefresh { period: usize },
    /// Constant weight 1 on the whole causal range: nothing is ever forgotten.
    HeavyTail,
    /// A fixed fraction of each row's mass sits on one sink step, the rest is
    /// spread uniformly over the causal range.
    SpikeSink { sink: usize, sink_mass: f64 },
    /// Per-channel exponential decay `gamma^(t-i)`, evaluated for one channel.
    ExponentialChannelwise { gammas: Vec<f64>, channel: usize },
}

impl KernelShape {
    pub fn spike_sink(sink: usize) -> Self {
        KernelShape::SpikeSink {
            sink,
            sink_mass: 0.9,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelShape::Box { .. } => "box",
            KernelShape::BlockRefresh { .. } => "block_refresh",
            KernelShape::HeavyTail => "heavy_tail",
            KernelShape::SpikeSink { .. } => "spike_sink",
            KernelShape::ExponentialChannelwise { .. } => "exponential",
        }
    }
}

// =========================================================================
// Profiles
// =========================================================================

/// A dense `horizon x horizon` table of causal influence weights.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelProfile {
    horizon: usize,
    weights: Vec<f64>,
}

impl KernelProfile {
    /// Number of steps the profile covers.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Weight for the 1-based step pair `(t, i)`. Pairs above the diagonal
    /// (`i > t`) are rejected rather than silently read as zero.
    pub fn weight(&self, t: usize, i: usize) -> Result<f64> {
        self.check_pair(t, i)?;
        Ok(self.weights[(t - 1) * self.horizon + (i - 1)])
    }

    fn check_pair(&self, t: usize, i: usize) -> Result<()> {
        if t == 0 || t > self.horizon {
            return Err(Error::IndexOutOfRange {
                context: "KernelProfile query step t",
                index: t,
                len: self.horizon,
            });
        }
        if i == 0 || i > t {
            return Err(Error::IndexOutOfRange {
                context: "KernelProfile evidence step i",
                index: i,
                len: t,
            });
        }
        Ok(())
    }

    /// All weights for query step `t` (1-based), `i = 1..=t`.
    pub fn causal_row(&self, t: usize) -> Result<&[f64]> {
        self.check_pair(t, t)?;
        Ok(&self.weights[(t - 1) * self.horizon..(t - 1) * self.horizon + t])
    }

    /// Writes `t,i,weight` rows for every nonzero causal entry. Weights are
    /// printed with 17 significant digits so the file round-trips exactly.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "t,i,weight")?;
        for t in 1..=self.horizon {
            for i in 1..=t {
                let w = self.weights[(t - 1) * self.horizon + (i - 1)];
                if w != 0.0 {
                    writeln!(out, "{t},{i},{w:.16e}")?;
                }
            }
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Materializes a shape as a dense profile over `horizon` steps.
pub fn build_profile(shape: &KernelShape, horizon: usize) -> Result<KernelProfile> {
    if horizon == 0 {
        return Err(Error::InvalidConfig(
            "kernel profile horizon must be at least 1".into(),
        ));
    }
    let weight: Box<dyn Fn(usize, usize) -> f64> = match shape {
        KernelShape::Box { window } => {
            if *window == 0 {
                return Err(Error::InvalidConfig("box window must be at least 1".into()));
            }
            let w = *window;
            Box::new(move |t, i| if t - i < w { 1.0 } else { 0.0 })
        }
        KernelShape::BlockRefresh { period } => {
            if *period == 0 {
                return Err(Error::InvalidConfig(
                    "block refresh period must be at least 1".into(),
                ));
            }
            let p = *period;
            Box::new(move |t, i| if (t - 1) / p == (i - 1) / p { 1.0 } else { 0.0 })
        }
        KernelShape::HeavyTail => Box::new(|_, _| 1.0),
        KernelShape::SpikeSink { sink, sink_mass } => {
            if *sink == 0 || *sink > horizon {
                return Err(Error::IndexOutOfRange {
                    context: "spike sink position",
                    index: *sink,
                    len: horizon,
                });
            }
            if !(0.0..=1.0).contains(sink_mass) {
                return Err(Error::Domain(format!(
                    "spike sink mass {sink_mass} outside [0, 1]"
                )));
            }
            let (s, m) = (*sink, *sink_mass);
            Box::new(move |t, i| {
                if s <= t {
                    let uniform = (1.0 - m) / t as f64;
                    if i == s {
                        m + uniform
                    } else {
                        uniform
                    }
                } else {
                    1.0 / t as f64
                }
            })
        }
        KernelShape::ExponentialChannelwise { gammas, channel } => {
            if *channel >= gammas.len() {
                return Err(Error::IndexOutOfRange {
                    context: "exponential kernel channel",
                    index: *channel,
                    len: gammas.len(),
                });
            }
            let g = gammas[*channel];
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::Domain(format!(
                    "channel retention {g} outside (0, 1)"
                )));
            }
            Box::new(move |t, i| g.powi((t - i) as i32))
        }
    };
    let mut weights = vec![0.0; horizon * horizon];
    for t in 1..=horizon {
        for i in 1..=t {
            weights[(t - 1) * horizon + (i - 1)] = weight(t, i);
        }
    }
    Ok(KernelProfile { horizon, weights })
}

/// Entrywise product of two profiles over the same horizon. Composing two
/// causal profiles stays causal, and nonnegative weights stay nonnegative.
pub fn compose_kernel(spatial: &KernelProfile, temporal: &KernelProfile) -> Result<KernelProfile> {
    if spatial.horizon != temporal.horizon {
        return Err(Error::DimensionMismatch {
            context: "compose_kernel horizons",
            expected: spatial.horizon,
            got: temporal.horizon,
        });
    }
    let weights = spatial
        .weights
        .iter()
        .zip(&temporal.weights)
        .map(|(a, b)| a * b)
        .collect();
    Ok(KernelProfile {
        horizon: spatial.horizon,
        weights,
    })
}

// =========================================================================
// Gate-induced kernels and horizons
// =========================================================================

/// Influence of step `i` on step `t` under per-step retention scalars:
/// the product of `gammas[j]` over `j = i+1 ..= t` (1-based, empty at `i == t`).
pub fn eval_time_kernel(gammas: &[f64], t: usize, i: usize) -> Result<f64> {
    if t == 0 || t > gammas.len() {
        return Err(Error::IndexOutOfRange {
            context: "time kernel query step t",
            index: t,
            len: gammas.len(),
        });
    }
    if i == 0 || i > t {
        return Err(Error::IndexOutOfRange {
            context: "time kernel evidence step i",
            index: i,
            len: t,
        });
    }
    for &g in &gammas[..t] {
        if !(g > 0.0 && g <= 1.0) {
            return Err(Error::Domain(format!(
                "per-step retention {g} outside (0, 1]"
            )));
        }
    }
    let mut w = 1.0;
    for j in (i + 1)..=t {
        w *= gammas[j - 1];
    }
    Ok(w)
}

/// Stationary single-channel influence at a given lag: `gamma^lag`. The lag
/// is a real number so the kernel can be probed between integer steps;
/// integer lags reproduce the per-step product with constant retention.
pub fn eval_channel_kernel(gamma: f64, lag: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Domain(format!(
            "channel retention {gamma} outside (0, 1)"
        )));
    }
    if !(lag >= 0.0) {
        return Err(Error::Domain(format!("lag {lag} must be nonnegative")));
    }
    Ok(gamma.powf(lag))
}

/// Number of steps over which a channel's influence falls by `1/e`:
/// `tau = -1 / ln(gamma)`. Influence at lag `tau` is `e^-1`, at `3 tau`
/// it is `e^-3`, just under 5% of the weight at lag zero.
pub fn effective_horizon(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Domain(format!(
            "channel retention {gamma} outside (0, 1)"
        )));
    }
    Ok(-1.0 / gamma.ln())
}

/// Channel indices split by retention: `fast` below the threshold, `slow` at
/// or above it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPartition {
    pub fast: Vec<usize>,
    pub slow: Vec<usize>,
}

pub fn partition_channels(gammas: &[f64], threshold: f64) -> Result<ChannelPartition> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!(
            "partition threshold {threshold} outside (0, 1)"
        )));
    }
    let mut fast = Vec::new();
    let mut slow = Vec::new();
    for (c, &g) in gammas.iter().enumerate() {
        if !(g > 0.0 && g < 1.0) {
            return Err(Error::Domain(format!(
                "channel retention {g} outside (0, 1)"
            )));
        }
        if g < threshold {
            fast.push(c);
        } else {
            slow.push(c);
        }
    }
    Ok(ChannelPartition { fast, slow })
}
