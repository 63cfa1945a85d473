//! Head-gated causal softmax attention over short windows, three-axis rotary
//! position indices, and the relevant-mass dilution bound for full-history
//! softmax attention.
//!
//! Rotary indices carry a (time, height, width) triple. Content tokens at
//! frame `t`, row `y`, column `x` are stored as `(t+1, y+1, x+1)`; special
//! tokens are stored as `(0, 0, 0)`, which makes every rotation angle zero,
//! so they pass through unrotated.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{all_finite, dot, sigmoid, Mat};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

// =========================================================================
// Rotary position indices
// =========================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RopeIndex {
    pi: [u64; 3],
}

impl RopeIndex {
    /// Index for a content token at 0-based frame `t`, row `y`, column `x`.
    pub fn new(t: u64, y: u64, x: u64) -> Self {
        RopeIndex {
            pi: [t + 1, y + 1, x + 1],
        }
    }

    /// Index for a special token (registers, separators): all components
    /// zero, exempt from rotation.
    pub fn special() -> Self {
        RopeIndex { pi: [0, 0, 0] }
    }

    pub fn is_special(&self) -> bool {
        self.pi == [0, 0, 0]
    }

    /// The stored (time, height, width) triple, already shifted so content
    /// components start at 1.
    pub fn components(&self) -> [u64; 3] {
        self.pi
    }

    /// Content index displaced by the given offsets. Special tokens have no
    /// position to displace, and content components must stay at least 1.
    pub fn shifted(&self, dt: i64, dy: i64, dx: i64) -> Result<RopeIndex> {
        if self.is_special() {
            return Err(Error::Domain(
                "special tokens have no position to shift".into(),
            ));
        }
        let mut pi = [0u64; 3];
        for (slot, (cur, d)) in pi
            .iter_mut()
            .zip(self.pi.iter().zip([dt, dy, dx]))
        {
            let moved = *cur as i64 + d;
            if moved < 1 {
                return Err(Error::Domain(format!(
                    "shift {d} pushes component {cur} below 1"
                )));
            }
            *slot = moved as u64;
        }
        Ok(RopeIndex { pi })
    }
}

/// Rewrites temporal components to `1 + ((t - 1) mod period)` so long streams
/// reuse a bounded range of rotation angles. Special tokens are untouched.
pub fn temporal_index_reset(indices: &[RopeIndex], period: u64) -> Result<Vec<RopeIndex>> {
    if period == 0 {
        return Err(Error::InvalidConfig("reset period must be at least 1".into()));
    }
    Ok(indices
        .iter()
        .map(|idx| {
            if idx.is_special() {
                *idx
            } else {
                let mut pi = idx.pi;
                pi[0] = 1 + (pi[0] - 1) % period;
                RopeIndex { pi }
            }
        })
        .collect())
}

/// Rotates a vector by its three-axis position. The width must be divisible
/// by 6: each axis owns a third of the dimensions, rotated pairwise at
/// frequencies `base^(-2m / (d/3))`.
pub fn rope_rotate(v: &[f64], idx: &RopeIndex, base: f64) -> Result<Vec<f64>> {
    let d = v.len();
    if d == 0 || d % 6 != 0 {
        return Err(Error::InvalidConfig(format!(
            "rotary width must be a positive multiple of 6, got {d}"
        )));
    }
    if !(base > 1.0) || !base.is_finite() {
        return Err(Error::Domain(format!(
            "rotary base {base} must be finite and above 1"
        )));
    }
    if !all_finite(v) {
        return Err(Error::NonFinite("rotary input"));
    }
    let third = d / 3;
    let pairs = third / 2;
    let mut out = v.to_vec();
    for axis in 0..3 {
        let pos = idx.pi[axis] as f64;
        let offset = axis * third;
        for m in 0..pairs {
            let freq = base.powf(-2.0 * m as f64 / third as f64);
            let angle = pos * freq;
            let (sin, cos) = angle.sin_cos();
            let a = out[offset + 2 * m];
            let b = out[offset + 2 * m + 1];
            out[offset + 2 * m] = a * cos - b * sin;
            out[offset + 2 * m + 1] = a * sin + b * cos;
        }
    }
    Ok(out)
}

// =========================================================================
// Causal softmax attention over a window
// =========================================================================

/// Numerically stable softmax over a score row.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidConfig("softmax over an empty row".into()));
    }
    if !all_finite(scores) {
        return Err(Error::NonFinite("softmax scores"));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// One aggregated value per query.
    pub outputs: Vec<Vec<f64>>,
    /// Per query, the weights over its causal key range; each row sums to 1.
    pub weights: Vec<Vec<f64>>,
}

/// Masked softmax attention where the queries align with the tail of the key
/// window: with `nq` queries over `nk` keys, query `j` attends keys
/// `0 ..= nk - nq + j`. Scores are scaled by `1/sqrt(d)`.
pub fn causal_softmax_attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
) -> Result<AttentionOutput> {
    if q.is_empty() || k.is_empty() {
        return Err(Error::InvalidConfig(
            "attention window must contain at least one query and one key".into(),
        ));
    }
    if q.len() > k.len() {
        return Err(Error::DimensionMismatch {
            context: "attention queries vs keys",
            expected: k.len(),
            got: q.len(),
        });
    }
    if v.len() != k.len() {
        return Err(Error::DimensionMismatch {
            context: "attention values vs keys",
            expected: k.len(),
            got: v.len(),
        });
    }
    let d = q[0].len();
    if d == 0 {
        return Err(Error::InvalidConfig("attention width must be positive".into()));
    }
    for row in q.iter().chain(k) {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                context: "attention query/key width",
                expected: d,
                got: row.len(),
            });
        }
        if !all_finite(row) {
            return Err(Error::NonFinite("attention inputs"));
        }
    }
    let d_v = v[0].len();
    for row in v {
        if row.len() != d_v {
            return Err(Error::DimensionMismatch {
                context: "attention value width",
                expected: d_v,
                got: row.len(),
            });
        }
        if !all_finite(row) {
            return Err(Error::NonFinite("attention values"));
        }
    }
    let offset = k.len() - q.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut outputs = Vec::with_capacity(q.len());
    let mut weights = Vec::with_capacity(q.len());
    for (j, query) in q.iter().enumerate() {
        let reach = offset + j + 1;
        let scores: Vec<f64> = k[..reach]
            .iter()
            .map(|key| dot(query, key) * scale)
            .collect();
        let w = softmax(&scores)?;
        let mut out = vec![0.0; d_v];
        for (i, wi) in w.iter().enumerate() {
            for (c, val) in v[i].iter().enumerate() {
                out[c] += wi * val;
            }
        }
        outputs.push(out);
        weights.push(w);
    }
    Ok(AttentionOutput { outputs, weights })
}

// =========================================================================
// Head gating
// =========================================================================

/// Per-head scalar gate computed from a pooled summary token.
#[derive(Debug, Clone)]
pub struct HeadGateParams {
    pub w_g: Mat,
    pub b_g: Vec<f64>,
}

impl HeadGateParams {
    pub fn new(w_g: Mat, b_g: Vec<f64>) -> Result<Self> {
        if w_g.rows() != b_g.len() {
            return Err(Error::DimensionMismatch {
                context: "head gate bias length",
                expected: w_g.rows(),
                got: b_g.len(),
            });
        }
        if !w_g.is_finite() || !all_finite(&b_g) {
            return Err(Error::NonFinite("head gate parameters"));
        }
        Ok(HeadGateParams { w_g, b_g })
    }

    /// Zero mixing weights and bias 2 everywhere, so every head starts
    /// mostly open at `sigmoid(2) ~= 0.881` regardless of the input.
    pub fn open_default(heads: usize, d_model: usize) -> Self {
        HeadGateParams {
            w_g: Mat::zeros(heads, d_model),
            b_g: vec![2.0; heads],
        }
    }
}

/// The per-head gate values `sigmoid(w_g pooled + b_g)`.
pub fn head_gates(pooled: &[f64], params: &HeadGateParams) -> Result<Vec<f64>> {
    if pooled.len() != params.w_g.cols() {
        return Err(Error::DimensionMismatch {
            context: "head gate input width",
            expected: params.w_g.cols(),
            got: pooled.len(),
        });
    }
    if !all_finite(pooled) {
        return Err(Error::NonFinite("head gate input"));
    }
    let mut g = params.w_g.matvec(pooled);
    for (h, v) in g.iter_mut().enumerate() {
        *v = sigmoid(*v + params.b_g[h]);
    }
    Ok(g)
}

/// Scales each head's output by its gate: `y_h -> g_h * y_h`.
pub fn head_gate_apply(
    pooled: &[f64],
    head_outputs: &[Vec<f64>],
    params: &HeadGateParams,
) -> Result<Vec<Vec<f64>>> {
    if head_outputs.len() != params.w_g.rows() {
        return Err(Error::DimensionMismatch {
            context: "head count",
            expected: params.w_g.rows(),
            got: head_outputs.len(),
        });
    }
    let gates = head_gates(pooled, params)?;
    Ok(head_outputs
        .iter()
        .zip(&gates)
        .map(|(y, g)| y.iter().map(|v| g * v).collect())
        .collect())
}

// =========================================================================
// Attention dilution
// =========================================================================

/// Geometry of the dilution analysis: each query has `w_geo` relevant steps
/// (the most recent ones) and scores are bounded by `m` in magnitude.
#[derive(Debug, Clone, Copy)]
pub struct DilutionConfig {
    pub w_geo: usize,
    pub m: f64,
}

impl DilutionConfig {
    pub fn new(w_geo: usize, m: f64) -> Result<Self> {
        if w_geo == 0 {
            return Err(Error::InvalidConfig(
                "the relevant window w_geo must be at least 1".into(),
            ));
        }
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::Domain(format!(
                "score bound m must be positive and finite, got {m}"
            )));
        }
        Ok(DilutionConfig { w_geo, m })
    }

    /// 0-based index range of the relevant steps within a causal row of
    /// length `t`: the most recent `w_geo` steps.
    pub fn relevant_range(&self, t: usize) -> std::ops::Range<usize> {
        t.saturating_sub(self.w_geo)..t
    }

    /// The history length beyond which even best-case scores leave less than
    /// half the attention mass on relevant steps: `w_geo * (1 + e^(2m))`.
    pub fn crossing_point(&self) -> f64 {
        self.w_geo as f64 * (1.0 + (2.0 * self.m).exp())
    }
}

/// Share of softmax mass on a set of indices. The weight row must already be
/// normalized; anything off by more than 1e-9 is rejected as unnormalized.
pub fn relevant_mass(weights: &[f64], relevant: &[usize]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidConfig("empty weight row".into()));
    }
    if !all_finite(weights) {
        return Err(Error::NonFinite("attention weights"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "attention weights sum to {sum}, not 1"
        )));
    }
    let mut mass = 0.0;
    for &i in relevant {
        if i >= weights.len() {
            return Err(Error::IndexOutOfRange {
                context: "relevant index",
                index: i,
                len: weights.len(),
            });
        }
        mass += weights[i];
    }
    Ok(mass)
}

/// Upper bound on the relevant attention mass at history length `t` when
/// scores are confined to `[-m, m]`:
/// `1 / (1 + ((t - w_geo) / w_geo) * e^(-2m))`.
///
/// `t` is continuous so the bound can be evaluated between integer steps;
/// at `t = w_geo * (1 + e^(2m))` it equals exactly one half.
pub fn dilution_bound(t: f64, cfg: &DilutionConfig) -> Result<f64> {
    if !(t > cfg.w_geo as f64) {
        return Err(Error::Domain(format!(
            "dilution bound needs history t > w_geo, got t = {t} with w_geo = {}",
            cfg.w_geo
        )));
    }
    let w = cfg.w_geo as f64;
    Ok(1.0 / (1.0 + ((t - w) / w) * (-2.0 * cfg.m).exp()))
}

#[derive(Debug, Clone)]
pub struct DilutionRow {
    pub t: usize,
    pub bound: f64,
    pub measured_mass: f64,
    pub violated: bool,
}

#[derive(Debug, Clone)]
pub struct DilutionReport {
    pub rows: Vec<DilutionRow>,
    /// Largest amount by which a measured mass exceeded its bound.
    pub max_violation: f64,
    pub random_trials: usize,
    pub pass: bool,
}

impl DilutionReport {
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "t,bound,measured_mass,violated")?;
        for row in &self.rows {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{}",
                row.t, row.bound, row.measured_mass, row.violated
            )?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

const DILUTION_TOL: f64 = 1e-12;

/// Measures relevant attention mass against the dilution bound for every
/// history length in `(w_geo, t_max]`.
///
/// The deterministic sweep drives [`causal_softmax_attention`] with the
/// best-case construction: unit keys aligned with the query on the relevant
/// steps and anti-aligned elsewhere, so scores are exactly `+m` and `-m`.
/// On top of that, `random_trials` histories with scores drawn uniformly
/// from `[-m, m]` are checked against the same bound.
pub fn verify_dilution(
    cfg: &DilutionConfig,
    t_max: usize,
    random_trials: usize,
    seed: u64,
) -> Result<DilutionReport> {
    use rand::{Rng, SeedableRng};
    if t_max <= cfg.w_geo {
        return Err(Error::InvalidConfig(format!(
            "t_max {t_max} must exceed w_geo {}",
            cfg.w_geo
        )));
    }
    let mut rows = Vec::with_capacity(t_max - cfg.w_geo);
    let mut max_violation: f64 = 0.0;
    let query = vec![vec![cfg.m]];
    for t in (cfg.w_geo + 1)..=t_max {
        let relevant: Vec<usize> = cfg.relevant_range(t).collect();
        let keys: Vec<Vec<f64>> = (0..t)
            .map(|i| {
                if relevant.contains(&i) {
                    vec![1.0]
                } else {
                    vec![-1.0]
                }
            })
            .collect();
        let values = vec![vec![0.0]; t];
        let attn = causal_softmax_attention(&query, &keys, &values)?;
        let measured = relevant_mass(&attn.weights[0], &relevant)?;
        let bound = dilution_bound(t as f64, cfg)?;
        let violation = measured - bound;
        let violated = violation > DILUTION_TOL * bound.max(1.0);
        max_violation = max_violation.max(violation);
        rows.push(DilutionRow {
            t,
            bound,
            measured_mass: measured,
            violated,
        });
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random_trials {
        let t = rng.gen_range(cfg.w_geo + 1..=t_max);
        let scores: Vec<f64> = (0..t).map(|_| rng.gen_range(-cfg.m..=cfg.m)).collect();
        let weights = softmax(&scores)?;
        let relevant: Vec<usize> = cfg.relevant_range(t).collect();
        let measured = relevant_mass(&weights, &relevant)?;
        let bound = dilution_bound(t as f64, cfg)?;
        let violation = measured - bound;
        max_violation = max_violation.max(violation);
        if violation > DILUTION_TOL * bound.max(1.0) {
            rows.push(DilutionRow {
                t,
                bound,
                measured_mass: measured,
                violated: true,
            });
        }
    }

    let pass = rows.iter().all(|r| !r.violated);
    Ok(DilutionReport {
        rows,
        max_violation,
        random_trials,
        pass,
    })
}
