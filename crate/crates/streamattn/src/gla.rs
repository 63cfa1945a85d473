//! Channel-wise gated linear attention with a bounded recurrent state.
//!
//! Each head keeps a `d_k x d_v` state matrix `S`. One step with gate vector
//! `gamma`, key `k`, and value `v` performs
//!
//! ```text
//! S_t = diag(gamma_t) * S_{t-1} + phi(k_t) * vtilde_t^T
//! o_t = S_t^T * q_t
//! ```
//!
//! so each key channel decays at its own rate before new evidence is written
//! in. The state is the exponential-moving solution of a discounted
//! least-squares problem: `discounted_objective` and
//! `recursive_objective_step` expose that objective directly, and `ttt_step`
//! shows the same update as one step of online gradient descent on it.
//!
//! `process_chunk` runs the recurrence over token chunks with constant
//! memory; outputs never depend on where chunk boundaries fall. `backward`
//! is analytic backpropagation through time, checked against central finite
//! differences by `finite_diff_check`.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{all_finite, dot, sigmoid, Mat};
use crate::local::RopeIndex;

/// Gates are clamped to `[GAMMA_FLOOR, GAMMA_CEIL]` so a channel never fully
/// erases its past within one step and never becomes exactly lossless.
pub const GAMMA_FLOOR: f64 = 1e-6;
pub const GAMMA_CEIL: f64 = 1.0 - 1e-6;

const SNAPSHOT_MAGIC: &[u8; 4] = b"GLAS";
const SNAPSHOT_VERSION: u32 = 1;

/// Steps between state checkpoints kept by the backward pass; states inside
/// a segment are rebuilt forward from the nearest checkpoint on demand.
const CHECKPOINT_EVERY: usize = 64;

// =========================================================================
// Configuration and parameters
// =========================================================================

/// Elementwise key feature map applied before evidence is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMap {
    #[default]
    Identity,
    /// Strictly positive map: `e^x` below zero, `x + 1` above, continuous
    /// with slope 1 at the origin.
    ShiftedExp,
}

impl FeatureMap {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            FeatureMap::Identity => x,
            FeatureMap::ShiftedExp => {
                if x < 0.0 {
                    x.exp()
                } else {
                    x + 1.0
                }
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            FeatureMap::Identity => 1.0,
            FeatureMap::ShiftedExp => {
                if x < 0.0 {
                    x.exp()
                } else {
                    1.0
                }
            }
        }
    }
}

/// How the written value `vtilde` is formed from the raw value `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValueRule {
    /// Write the value as-is.
    #[default]
    Plain,
    /// Write the scaled prediction error `eta * (v - S^T (gamma .* phi(k)))`,
    /// one online gradient step on the discounted least-squares objective.
    DeltaRule,
}

/// Shape of one gated-linear-attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GLADims {
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
}

impl GLADims {
    pub fn new(d_model: usize, d_k: usize, d_v: usize, heads: usize) -> Result<Self> {
        if d_model == 0 || d_k == 0 || d_v == 0 || heads == 0 {
            return Err(Error::InvalidConfig(
                "all gated-linear-attention dimensions must be positive".into(),
            ));
        }
        Ok(GLADims {
            d_model,
            d_k,
            d_v,
            heads,
        })
    }

    /// Total key channels across heads.
    pub fn key_width(&self) -> usize {
        self.d_k * self.heads
    }

    /// Total value channels across heads.
    pub fn value_width(&self) -> usize {
        self.d_v * self.heads
    }
}

/// Projections and gate parameters. The gate is computed per token over all
/// key channels; each head's state uses its own slice of that gate vector.
#[derive(Debug, Clone)]
pub struct GLAParams {
    pub dims: GLADims,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_gamma: Mat,
    pub b_gamma: Vec<f64>,
    pub feature_map: FeatureMap,
    pub value_rule: ValueRule,
    pub eta: f64,
}

impl GLAParams {
    pub fn new(
        dims: GLADims,
        w_q: Mat,
        w_k: Mat,
        w_v: Mat,
        w_gamma: Mat,
        b_gamma: Vec<f64>,
        feature_map: FeatureMap,
        value_rule: ValueRule,
        eta: f64,
    ) -> Result<Self> {
        let kw = dims.key_width();
        let vw = dims.value_width();
        for (name, m, rows) in [
            ("w_q", &w_q, kw),
            ("w_k", &w_k, kw),
            ("w_v", &w_v, vw),
            ("w_gamma", &w_gamma, kw),
        ] {
            if m.rows() != rows || m.cols() != dims.d_model {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be {rows} x {}, got {} x {}",
                    dims.d_model,
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite("projection weights"));
            }
        }
        if b_gamma.len() != kw {
            return Err(Error::DimensionMismatch {
                context: "gate bias length",
                expected: kw,
                got: b_gamma.len(),
            });
        }
        if !all_finite(&b_gamma) || !eta.is_finite() {
            return Err(Error::NonFinite("gate bias or learning rate"));
        }
        Ok(GLAParams {
            dims,
            w_q,
            w_k,
            w_v,
            w_gamma,
            b_gamma,
            feature_map,
            value_rule,
            eta,
        })
    }

    /// Seeded initialization: projections drawn uniformly from a small range
    /// and the gate bias set to +4, so every retention channel starts near
    /// `sigmoid(4) ~= 0.982` and the state forgets slowly from the start.
    pub fn seeded(dims: GLADims, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let r = 0.5 / (dims.d_model as f64).sqrt();
        let draw = |rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            Mat::from_fn(rows, cols, |_, _| rng.gen_range(-r..=r))
        };
        let kw = dims.key_width();
        let vw = dims.value_width();
        let w_q = draw(kw, dims.d_model, &mut rng);
        let w_k = draw(kw, dims.d_model, &mut rng);
        let w_v = draw(vw, dims.d_model, &mut rng);
        let w_gamma = draw(kw, dims.d_model, &mut rng);
        GLAParams {
            dims,
            w_q,
            w_k,
            w_v,
            w_gamma,
            b_gamma: vec![4.0; kw],
            feature_map: FeatureMap::Identity,
            value_rule: ValueRule::Plain,
            eta: 0.5,
        }
    }
}

// =========================================================================
// Tokens and state
// =========================================================================

/// A fixed-width sequence of input tokens, optionally tagged with rotary
/// position indices for downstream windowed attention.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    data: Vec<f64>,
    d_model: usize,
    indices: Option<Vec<RopeIndex>>,
}

impl TokenSequence {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidConfig(
                "token sequence must contain at least one token".into(),
            ));
        }
        let d_model = rows[0].len();
        if d_model == 0 {
            return Err(Error::InvalidConfig("token width must be positive".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * d_model);
        for row in rows {
            if row.len() != d_model {
                return Err(Error::DimensionMismatch {
                    context: "token width",
                    expected: d_model,
                    got: row.len(),
                });
            }
            if !all_finite(row) {
                return Err(Error::NonFinite("token sequence"));
            }
            data.extend_from_slice(row);
        }
        Ok(TokenSequence {
            data,
            d_model,
            indices: None,
        })
    }

    pub fn from_flat(d_model: usize, data: Vec<f64>) -> Result<Self> {
        if d_model == 0 || data.is_empty() || data.len() % d_model != 0 {
            return Err(Error::DimensionMismatch {
                context: "flat token buffer",
                expected: d_model.max(1),
                got: data.len(),
            });
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite("token sequence"));
        }
        Ok(TokenSequence {
            data,
            d_model,
            indices: None,
        })
    }

    pub fn with_indices(mut self, indices: Vec<RopeIndex>) -> Result<Self> {
        if indices.len() != self.len() {
            return Err(Error::DimensionMismatch {
                context: "rotary index count",
                expected: self.len(),
                got: indices.len(),
            });
        }
        self.indices = Some(indices);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.d_model
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Token at 0-based position `idx`.
    pub fn token(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.d_model..(idx + 1) * self.d_model]
    }

    pub fn indices(&self) -> Option<&[RopeIndex]> {
        self.indices.as_deref()
    }

    /// Tokens `range` as a new sequence (0-based, end exclusive).
    pub fn slice(&self, start: usize, end: usize) -> Result<TokenSequence> {
        if start >= end || end > self.len() {
            return Err(Error::IndexOutOfRange {
                context: "token slice",
                index: end,
                len: self.len(),
            });
        }
        Ok(TokenSequence {
            data: self.data[start * self.d_model..end * self.d_model].to_vec(),
            d_model: self.d_model,
            indices: self
                .indices
                .as_ref()
                .map(|ix| ix[start..end].to_vec()),
        })
    }
}

/// Per-head recurrent state matrices. Memory is fixed by the layer shape and
/// does not grow with the number of steps processed.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    blocks: Vec<Mat>,
    d_k: usize,
    d_v: usize,
    step: u64,
}

impl RecurrentState {
    pub fn zeros(dims: GLADims) -> Self {
        RecurrentState {
            blocks: (0..dims.heads).map(|_| Mat::zeros(dims.d_k, dims.d_v)).collect(),
            d_k: dims.d_k,
            d_v: dims.d_v,
            step: 0,
        }
    }

    pub fn from_blocks(blocks: Vec<Mat>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidConfig("state needs at least one head".into()));
        }
        let d_k = blocks[0].rows();
        let d_v = blocks[0].cols();
        for b in &blocks {
            if b.rows() != d_k || b.cols() != d_v {
                return Err(Error::DimensionMismatch {
                    context: "state head shape",
                    expected: d_k * d_v,
                    got: b.rows() * b.cols(),
                });
            }
            if !b.is_finite() {
                return Err(Error::NonFinite("recurrent state"));
            }
        }
        Ok(RecurrentState {
            blocks,
            d_k,
            d_v,
            step: 0,
        })
    }

    pub fn heads(&self) -> usize {
        self.blocks.len()
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    /// Monotone count of steps absorbed into this state.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn head(&self, h: usize) -> &Mat {
        &self.blocks[h]
    }

    pub fn head_mut(&mut self, h: usize) -> &mut Mat {
        &mut self.blocks[h]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let n = b.frobenius_norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Resident size of the state payload in bytes.
    pub fn byte_len(&self) -> usize {
        self.blocks.len() * self.d_k * self.d_v * std::mem::size_of::<f64>()
    }

    /// One norm per key channel and head: how much evidence each retention
    /// channel currently holds. Used as the feature vector for probing.
    pub fn row_norms(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.blocks.len() * self.d_k);
        for b in &self.blocks {
            for r in 0..self.d_k {
                out.push(crate::linalg::norm2(b.row(r)));
            }
        }
        out
    }

    fn check_finite(&self) -> Result<()> {
        for b in &self.blocks {
            if !b.is_finite() {
                return Err(Error::NonFinite("recurrent state"));
            }
        }
        Ok(())
    }

    /// Serializes the state as a 16-byte header (`GLAS`, format version,
    /// key rows, value columns across heads) followed by the matrix in
    /// little-endian `f64` row-major order, heads side by side.
    pub fn write_snapshot<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        out.write_all(&(self.d_k as u32).to_le_bytes())?;
        out.write_all(&((self.d_v * self.blocks.len()) as u32).to_le_bytes())?;
        for r in 0..self.d_k {
            for b in &self.blocks {
                for c in 0..self.d_v {
                    out.write_all(&b.get(r, c).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn write_snapshot_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// A state snapshot as read back from the wire format. Heads are laid out
/// side by side along the columns; the split is not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    pub d_k: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl StateSnapshot {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// One norm per key row, matching `RecurrentState::row_norms` for
    /// single-head states.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.d_k)
            .map(|r| crate::linalg::norm2(&self.data[r * self.cols..(r + 1) * self.cols]))
            .collect()
    }
}

pub fn read_snapshot<R: Read>(input: &mut R) -> Result<StateSnapshot> {
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::Malformed("state snapshot shorter than its header".into()))?;
    if &header[0..4] != SNAPSHOT_MAGIC {
        return Err(Error::Malformed("state snapshot magic is not GLAS".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != SNAPSHOT_VERSION {
        return Err(Error::Malformed(format!(
            "unsupported state snapshot version {version}"
        )));
    }
    let d_k = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    if d_k == 0 || cols == 0 {
        return Err(Error::Malformed("state snapshot has empty shape".into()));
    }
    let mut payload = vec![0u8; d_k * cols * 8];
    input
        .read_exact(&mut payload)
        .map_err(|_| Error::Malformed("state snapshot payload truncated".into()))?;
    let data = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(StateSnapshot { d_k, cols, data })
}

pub fn read_snapshot_file(path: &Path) -> Result<StateSnapshot> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_snapshot(&mut bytes.as_slice())
}

// =========================================================================
// Discounted least-squares objective
// =========================================================================

/// The discounted regression error a state matrix accumulates over a
/// history: `sum_i (prod_{j=i+1..t} gamma_j) * ||S^T k_i - v_i||^2`.
pub fn discounted_objective(
    s: &Mat,
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    gammas: &[f64],
) -> Result<f64> {
    let t = keys.len();
    if values.len() != t || gammas.len() != t {
        return Err(Error::DimensionMismatch {
            context: "objective history length",
            expected: t,
            got: values.len().min(gammas.len()),
        });
    }
    if t == 0 {
        return Ok(0.0);
    }
    for g in gammas {
        if !(*g > 0.0 && *g <= 1.0) {
            return Err(Error::Domain(format!(
                "per-step retention {g} outside (0, 1]"
            )));
        }
    }
    // suffix[i] = prod_{j=i+1..t} gamma_j, built from the end.
    let mut suffix = vec![1.0; t];
    for i in (0..t - 1).rev() {
        suffix[i] = suffix[i + 1] * gammas[i + 1];
    }
    let mut total = 0.0;
    for i in 0..t {
        total += suffix[i] * residual_sq(s, &keys[i], &values[i])?;
    }
    Ok(total)
}

/// One step of the same objective in recursive form:
/// `J_t = gamma_t * J_{t-1} + ||S^T k_t - v_t||^2`.
pub fn recursive_objective_step(
    j_prev: f64,
    s: &Mat,
    k: &[f64],
    v: &[f64],
    gamma: f64,
) -> Result<f64> {
    if !(j_prev >= 0.0) {
        return Err(Error::Domain(format!(
            "accumulated objective {j_prev} must be nonnegative"
        )));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Domain(format!(
            "per-step retention {gamma} outside (0, 1]"
        )));
    }
    Ok(gamma * j_prev + residual_sq(s, k, v)?)
}

fn residual_sq(s: &Mat, k: &[f64], v: &[f64]) -> Result<f64> {
    if k.len() != s.rows() {
        return Err(Error::DimensionMismatch {
            context: "objective key width",
            expected: s.rows(),
            got: k.len(),
        });
    }
    if v.len() != s.cols() {
        return Err(Error::DimensionMismatch {
            context: "objective value width",
            expected: s.cols(),
            got: v.len(),
        });
    }
    if !all_finite(k) || !all_finite(v) {
        return Err(Error::NonFinite("objective inputs"));
    }
    let pred = s.tr_matvec(k);
    Ok(pred
        .iter()
        .zip(v)
        .map(|(p, v)| {
            let r = p - v;
            r * r
        })
        .sum())
}

// =========================================================================
// Forward operations
// =========================================================================

/// Retention gate for one token: `sigmoid(w_gamma x + b_gamma)` per key
/// channel, clamped away from 0 and 1.
pub fn gate(x: &[f64], params: &GLAParams) -> Result<Vec<f64>> {
    if x.len() != params.dims.d_model {
        return Err(Error::DimensionMismatch {
            context: "gate input width",
            expected: params.dims.d_model,
            got: x.len(),
        });
    }
    if !all_finite(x) {
        return Err(Error::NonFinite("gate input"));
    }
    let mut g = params.w_gamma.matvec(x);
    for (c, v) in g.iter_mut().enumerate() {
        *v = sigmoid(*v + params.b_gamma[c]).clamp(GAMMA_FLOOR, GAMMA_CEIL);
    }
    Ok(g)
}

fn check_step_inputs(
    state: &RecurrentState,
    params: &GLAParams,
    k: &[f64],
    v: &[f64],
    gamma: Option<&[f64]>,
) -> Result<()> {
    let dims = params.dims;
    if state.heads() != dims.heads || state.d_k != dims.d_k || state.d_v != dims.d_v {
        return Err(Error::DimensionMismatch {
            context: "state shape vs layer shape",
            expected: dims.heads * dims.d_k * dims.d_v,
            got: state.heads() * state.d_k * state.d_v,
        });
    }
    if k.len() != dims.key_width() {
        return Err(Error::DimensionMismatch {
            context: "key width",
            expected: dims.key_width(),
            got: k.len(),
        });
    }
    if v.len() != dims.value_width() {
        return Err(Error::DimensionMismatch {
            context: "value width",
            expected: dims.value_width(),
            got: v.len(),
        });
    }
    if !all_finite(k) || !all_finite(v) {
        return Err(Error::NonFinite("step inputs"));
    }
    if let Some(g) = gamma {
        if g.len() != dims.key_width() {
            return Err(Error::DimensionMismatch {
                context: "gate width",
                expected: dims.key_width(),
                got: g.len(),
            });
        }
        for gv in g {
            if !(*gv > 0.0) || !gv.is_finite() {
                return Err(Error::Domain(format!(
                    "retention {gv} must be positive and finite"
                )));
            }
        }
    }
    Ok(())
}

fn step_head_in_place(
    block: &mut Mat,
    gamma: &[f64],
    phi_k: &[f64],
    v: &[f64],
    value_rule: ValueRule,
    eta: f64,
    vtilde_out: Option<&mut Vec<f64>>,
) {
    let vtilde: Vec<f64> = match value_rule {
        ValueRule::Plain => v.to_vec(),
        ValueRule::DeltaRule => {
            // Prediction error against the decayed state, measured through
            // the gated feature vector.
            let gated_k: Vec<f64> = gamma.iter().zip(phi_k).map(|(g, p)| g * p).collect();
            let pred = block.tr_matvec(&gated_k);
            v.iter().zip(&pred).map(|(v, p)| eta * (v - p)).collect()
        }
    };
    block.scale_rows(gamma);
    block.add_outer(phi_k, &vtilde, 1.0);
    if let Some(out) = vtilde_out {
        *out = vtilde;
    }
}

/// One recurrence step: decay each key channel by its gate, then write the
/// new evidence outer product. `k`, `v`, and `gamma` span all heads.
///
/// The gate produced by [`gate`] is always clamped below 1; this function
/// accepts any positive finite retention so callers can also drive the
/// recurrence with explicit schedules, including the lossless `gamma = 1`.
pub fn state_update(
    state: &RecurrentState,
    k: &[f64],
    v: &[f64],
    gamma: &[f64],
    params: &GLAParams,
) -> Result<RecurrentState> {
    check_step_inputs(state, params, k, v, Some(gamma))?;
    let dims = params.dims;
    let mut next = state.clone();
    for h in 0..dims.heads {
        let ks = &k[h * dims.d_k..(h + 1) * dims.d_k];
        let gs = &gamma[h * dims.d_k..(h + 1) * dims.d_k];
        let vs = &v[h * dims.d_v..(h + 1) * dims.d_v];
        let phi_k: Vec<f64> = ks.iter().map(|x| params.feature_map.apply(*x)).collect();
        step_head_in_place(
            next.head_mut(h),
            gs,
            &phi_k,
            vs,
            params.value_rule,
            params.eta,
            None,
        );
    }
    next.step = state.step + 1;
    next.check_finite()?;
    Ok(next)
}

/// Per-head readout `S^T q`, concatenated across heads.
pub fn readout(q: &[f64], state: &RecurrentState) -> Result<Vec<f64>> {
    if q.len() != state.heads() * state.d_k {
        return Err(Error::DimensionMismatch {
            context: "readout query width",
            expected: state.heads() * state.d_k,
            got: q.len(),
        });
    }
    if !all_finite(q) {
        return Err(Error::NonFinite("readout query"));
    }
    let mut out = Vec::with_capacity(state.heads() * state.d_v);
    for h in 0..state.heads() {
        let qs = &q[h * state.d_k..(h + 1) * state.d_k];
        out.extend(state.head(h).tr_matvec(qs));
    }
    Ok(out)
}

/// One online-gradient step on the discounted regression objective with a
/// shared scalar retention:
/// `S_t = gamma * S_{t-1} + eta * k * (v - gamma * S_{t-1}^T k)^T`.
///
/// With `gamma = 1` this is the classical undiscounted fast-weight update.
/// It coincides with [`state_update`] under the delta value rule, an
/// identity feature map, and a gate vector holding `gamma` in every channel.
pub fn ttt_step(
    state: &RecurrentState,
    k: &[f64],
    v: &[f64],
    gamma: f64,
    eta: f64,
) -> Result<RecurrentState> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Domain(format!(
            "retention {gamma} must be positive and finite"
        )));
    }
    if !eta.is_finite() {
        return Err(Error::NonFinite("learning rate"));
    }
    if k.len() != state.heads() * state.d_k || v.len() != state.heads() * state.d_v {
        return Err(Error::DimensionMismatch {
            context: "ttt step input width",
            expected: state.heads() * state.d_k,
            got: k.len(),
        });
    }
    if !all_finite(k) || !all_finite(v) {
        return Err(Error::NonFinite("ttt step inputs"));
    }
    let mut next = state.clone();
    for h in 0..state.heads() {
        let ks = &k[h * state.d_k..(h + 1) * state.d_k];
        let vs = &v[h * state.d_v..(h + 1) * state.d_v];
        let block = next.head_mut(h);
        let pred = block.tr_matvec(ks);
        let vtilde: Vec<f64> = vs
            .iter()
            .zip(&pred)
            .map(|(v, p)| eta * (v - gamma * p))
            .collect();
        for r in 0..block.rows() {
            for c in 0..block.cols() {
                let decayed = gamma * block.get(r, c);
                block.set(r, c, decayed + ks[r] * vtilde[c]);
            }
        }
    }
    next.step = state.step + 1;
    next.check_finite()?;
    Ok(next)
}

/// Runs gate, state update, and readout for every token in order, carrying
/// the state across the chunk. Outputs depend only on the tokens seen so
/// far, never on where the stream was cut into chunks.
pub fn process_chunk(
    tokens: &TokenSequence,
    state: RecurrentState,
    params: &GLAParams,
) -> Result<(Vec<Vec<f64>>, RecurrentState)> {
    if tokens.d_model() != params.dims.d_model {
        return Err(Error::DimensionMismatch {
            context: "chunk token width",
            expected: params.dims.d_model,
            got: tokens.d_model(),
        });
    }
    let dims = params.dims;
    let mut current = state;
    if current.heads() != dims.heads || current.d_k != dims.d_k || current.d_v != dims.d_v {
        return Err(Error::DimensionMismatch {
            context: "chunk state shape",
            expected: dims.heads * dims.d_k * dims.d_v,
            got: current.heads() * current.d_k * current.d_v,
        });
    }
    let mut outputs = Vec::with_capacity(tokens.len());
    for t in 0..tokens.len() {
        let x = tokens.token(t);
        let q = params.w_q.matvec(x);
        let k = params.w_k.matvec(x);
        let v = params.w_v.matvec(x);
        let gamma = gate(x, params)?;
        for h in 0..dims.heads {
            let ks = &k[h * dims.d_k..(h + 1) * dims.d_k];
            let gs = &gamma[h * dims.d_k..(h + 1) * dims.d_k];
            let vs = &v[h * dims.d_v..(h + 1) * dims.d_v];
            let phi_k: Vec<f64> = ks.iter().map(|x| params.feature_map.apply(*x)).collect();
            step_head_in_place(
                current.head_mut(h),
                gs,
                &phi_k,
                vs,
                params.value_rule,
                params.eta,
                None,
            );
        }
        current.step += 1;
        let mut o = Vec::with_capacity(dims.value_width());
        for h in 0..dims.heads {
            let qs = &q[h * dims.d_k..(h + 1) * dims.d_k];
            o.extend(current.head(h).tr_matvec(qs));
        }
        outputs.push(o);
    }
    current.check_finite()?;
    Ok((outputs, current))
}

// =========================================================================
// Backpropagation through time
// =========================================================================

#[derive(Debug, Clone)]
pub struct Gradients {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_gamma: Mat,
    pub b_gamma: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
}

struct StepRecord {
    q: Vec<f64>,
    k: Vec<f64>,
    phi_k: Vec<f64>,
    gamma: Vec<f64>,
    preact: Vec<f64>,
    clamped: Vec<bool>,
    vtilde: Vec<f64>,
}

struct ForwardTrace {
    steps: Vec<StepRecord>,
    checkpoints: Vec<RecurrentState>,
}

fn record_forward(
    tokens: &TokenSequence,
    state0: &RecurrentState,
    params: &GLAParams,
) -> Result<ForwardTrace> {
    let dims = params.dims;
    let mut current = state0.clone();
    let mut steps = Vec::with_capacity(tokens.len());
    let mut checkpoints = vec![state0.clone()];
    for t in 0..tokens.len() {
        let x = tokens.token(t);
        let q = params.w_q.matvec(x);
        let k = params.w_k.matvec(x);
        let v = params.w_v.matvec(x);
        let mut preact = params.w_gamma.matvec(x);
        for (c, p) in preact.iter_mut().enumerate() {
            *p += params.b_gamma[c];
        }
        let mut gamma = vec![0.0; dims.key_width()];
        let mut clamped = vec![false; dims.key_width()];
        for c in 0..dims.key_width() {
            let raw = sigmoid(preact[c]);
            let g = raw.clamp(GAMMA_FLOOR, GAMMA_CEIL);
            gamma[c] = g;
            clamped[c] = g != raw;
        }
        let phi_k: Vec<f64> = k.iter().map(|x| params.feature_map.apply(*x)).collect();
        let mut vtilde = vec![0.0; dims.value_width()];
        for h in 0..dims.heads {
            let mut head_vtilde = Vec::new();
            step_head_in_place(
                current.head_mut(h),
                &gamma[h * dims.d_k..(h + 1) * dims.d_k],
                &phi_k[h * dims.d_k..(h + 1) * dims.d_k],
                &v[h * dims.d_v..(h + 1) * dims.d_v],
                params.value_rule,
                params.eta,
                Some(&mut head_vtilde),
            );
            vtilde[h * dims.d_v..(h + 1) * dims.d_v].copy_from_slice(&head_vtilde);
        }
        current.step += 1;
        if (t + 1) % CHECKPOINT_EVERY == 0 {
            checkpoints.push(current.clone());
        }
        steps.push(StepRecord {
            q,
            k,
            phi_k,
            gamma,
            preact,
            clamped,
            vtilde,
        });
    }
    current.check_finite()?;
    Ok(ForwardTrace { steps, checkpoints })
}

/// States for steps `seg_start..seg_end` (0-based step indices), rebuilt
/// forward from the checkpoint at `seg_start`. Entry `j` holds the state
/// after step `seg_start + j - 1`; entry 0 is the state entering the segment.
fn rebuild_segment(trace: &ForwardTrace, seg_start: usize, seg_end: usize) -> Vec<RecurrentState> {
    let mut states = Vec::with_capacity(seg_end - seg_start + 1);
    states.push(trace.checkpoints[seg_start / CHECKPOINT_EVERY].clone());
    for t in seg_start..seg_end {
        let rec = &trace.steps[t];
        let mut next = states.last().unwrap().clone();
        let heads = next.heads();
        let (d_k, d_v) = (next.d_k, next.d_v);
        for h in 0..heads {
            let block = next.head_mut(h);
            block.scale_rows(&rec.gamma[h * d_k..(h + 1) * d_k]);
            block.add_outer(
                &rec.phi_k[h * d_k..(h + 1) * d_k],
                &rec.vtilde[h * d_v..(h + 1) * d_v],
                1.0,
            );
        }
        next.step += 1;
        states.push(next);
    }
    states
}

/// Analytic backpropagation through time for a scalar loss
/// `L = sum_t <output_grads[t], o_t>`. Stores per-step vectors plus sparse
/// state checkpoints and rebuilds intermediate states forward segment by
/// segment, so memory stays linear in sequence length times vector width.
pub fn backward(
    tokens: &TokenSequence,
    state0: &RecurrentState,
    params: &GLAParams,
    output_grads: &[Vec<f64>],
) -> Result<Gradients> {
    let dims = params.dims;
    if tokens.d_model() != dims.d_model {
        return Err(Error::DimensionMismatch {
            context: "backward token width",
            expected: dims.d_model,
            got: tokens.d_model(),
        });
    }
    if output_grads.len() != tokens.len() {
        return Err(Error::DimensionMismatch {
            context: "output gradient count",
            expected: tokens.len(),
            got: output_grads.len(),
        });
    }
    for g in output_grads {
        if g.len() != dims.value_width() {
            return Err(Error::DimensionMismatch {
                context: "output gradient width",
                expected: dims.value_width(),
                got: g.len(),
            });
        }
        if !all_finite(g) {
            return Err(Error::NonFinite("output gradients"));
        }
    }
    let trace = record_forward(tokens, state0, params)?;
    let total = tokens.len();

    let mut grads = Gradients {
        w_q: Mat::zeros(dims.key_width(), dims.d_model),
        w_k: Mat::zeros(dims.key_width(), dims.d_model),
        w_v: Mat::zeros(dims.value_width(), dims.d_model),
        w_gamma: Mat::zeros(dims.key_width(), dims.d_model),
        b_gamma: vec![0.0; dims.key_width()],
        inputs: vec![vec![0.0; dims.d_model]; total],
    };

    // Gradient of the loss with respect to the state leaving the step below
    // the one being processed, excluding that step's own readout term.
    let mut carry: Vec<Mat> = (0..dims.heads).map(|_| Mat::zeros(dims.d_k, dims.d_v)).collect();

    let mut seg_end = total;
    while seg_end > 0 {
        let seg_start = (seg_end - 1) / CHECKPOINT_EVERY * CHECKPOINT_EVERY;
        let states = rebuild_segment(&trace, seg_start, seg_end);
        for t in (seg_start..seg_end).rev() {
            let rec = &trace.steps[t];
            let s_prev = &states[t - seg_start];
            let s_curr = &states[t - seg_start + 1];
            let g_out = &output_grads[t];

            let mut d_q = vec![0.0; dims.key_width()];
            let mut d_k_vec = vec![0.0; dims.key_width()];
            let mut d_v_vec = vec![0.0; dims.value_width()];
            let mut d_gamma = vec![0.0; dims.key_width()];

            for h in 0..dims.heads {
                let kr = h * dims.d_k..(h + 1) * dims.d_k;
                let vr = h * dims.d_v..(h + 1) * dims.d_v;
                let q_h = &rec.q[kr.clone()];
                let phi_h = &rec.phi_k[kr.clone()];
                let gamma_h = &rec.gamma[kr.clone()];
                let vtilde_h = &rec.vtilde[vr.clone()];
                let g_h = &g_out[vr.clone()];
                let prev = s_prev.head(h);
                let curr = s_curr.head(h);

                // Full state gradient at this step: readout term plus the
                // carry from the step above.
                let mut g_state = carry[h].clone();
                g_state.add_outer(q_h, g_h, 1.0);

                // u = G^T phi(k), the gradient reaching the written value.
                let u = g_state.tr_matvec(phi_h);

                // Readout pulls the post-update state against the query.
                for (c, dq) in d_q[kr.clone()].iter_mut().enumerate() {
                    *dq = dot(curr.row(c), g_h);
                }

                let mut d_phi = g_state.matvec(vtilde_h);
                for c in 0..dims.d_k {
                    d_gamma[h * dims.d_k + c] = dot(g_state.row(c), prev.row(c));
                }

                match params.value_rule {
                    ValueRule::Plain => {
                        for (j, dv) in d_v_vec[vr.clone()].iter_mut().enumerate() {
                            *dv = u[j];
                        }
                        carry[h] = g_state;
                        carry[h].scale_rows(gamma_h);
                    }
                    ValueRule::DeltaRule => {
                        // w = S_{t-1} u couples the prediction error back
                        // into the gate, the feature vector, and the state.
                        let w: Vec<f64> =
                            (0..dims.d_k).map(|c| dot(prev.row(c), &u)).collect();
                        for c in 0..dims.d_k {
                            d_gamma[h * dims.d_k + c] -= params.eta * phi_h[c] * w[c];
                            d_phi[c] -= params.eta * gamma_h[c] * w[c];
                        }
                        for (j, dv) in d_v_vec[vr.clone()].iter_mut().enumerate() {
                            *dv = params.eta * u[j];
                        }
                        let gated_k: Vec<f64> =
                            gamma_h.iter().zip(phi_h).map(|(g, p)| g * p).collect();
                        carry[h] = g_state;
                        carry[h].scale_rows(gamma_h);
                        carry[h].add_outer(&gated_k, &u, -params.eta);
                    }
                }

                for c in 0..dims.d_k {
                    d_k_vec[h * dims.d_k + c] =
                        d_phi[c] * params.feature_map.derivative(rec.k[h * dims.d_k + c]);
                }
            }

            // Gate pre-activation: sigmoid slope, zeroed where the clamp is
            // active.
            let mut d_preact = vec![0.0; dims.key_width()];
            for c in 0..dims.key_width() {
                if !rec.clamped[c] {
                    let s = sigmoid(rec.preact[c]);
                    d_preact[c] = d_gamma[c] * s * (1.0 - s);
                }
            }

            let x = tokens.token(t);
            grads.w_q.add_outer(&d_q, x, 1.0);
            grads.w_k.add_outer(&d_k_vec, x, 1.0);
            grads.w_v.add_outer(&d_v_vec, x, 1.0);
            grads.w_gamma.add_outer(&d_preact, x, 1.0);
            for c in 0..dims.key_width() {
                grads.b_gamma[c] += d_preact[c];
            }
            let dx = &mut grads.inputs[t];
            accumulate_tr_matvec(&params.w_q, &d_q, dx);
            accumulate_tr_matvec(&params.w_k, &d_k_vec, dx);
            accumulate_tr_matvec(&params.w_v, &d_v_vec, dx);
            accumulate_tr_matvec(&params.w_gamma, &d_preact, dx);
        }
        seg_end = seg_start;
    }
    Ok(grads)
}

fn accumulate_tr_matvec(m: &Mat, x: &[f64], out: &mut [f64]) {
    for r in 0..m.rows() {
        let xr = x[r];
        if xr == 0.0 {
            continue;
        }
        let row = m.row(r);
        for c in 0..out.len() {
            out[c] += row[c] * xr;
        }
    }
}

// =========================================================================
// Finite-difference verification
// =========================================================================

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub checked: usize,
    pub tolerance: f64,
}

impl FiniteDiffReport {
    pub fn pass(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Relative disagreement floor: differences below this scale are compared
/// absolutely, since central differences carry truncation error of their own.
const FD_SCALE_FLOOR: f64 = 1e-6;

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_SCALE_FLOOR)
}

fn loss_for(
    tokens: &TokenSequence,
    state0: &RecurrentState,
    params: &GLAParams,
    output_grads: &[Vec<f64>],
) -> Result<f64> {
    let (outputs, _) = process_chunk(tokens, state0.clone(), params)?;
    let mut loss = 0.0;
    for (o, g) in outputs.iter().zip(output_grads) {
        loss += dot(o, g);
    }
    Ok(loss)
}

fn seeded_output_grads(len: usize, width: usize) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x0fd5_11ce);
    (0..len)
        .map(|_| (0..width).map(|_| rng.gen_range(-1.0..=1.0)).collect())
        .collect()
}

/// Largest relative disagreement between the given analytic gradients and
/// central finite differences of the forward loss, over every parameter
/// entry and every input entry.
pub fn gradient_max_rel_error(
    tokens: &TokenSequence,
    params: &GLAParams,
    grads: &Gradients,
    output_grads: &[Vec<f64>],
    h: f64,
) -> Result<(f64, String)> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step size {h} must be positive")));
    }
    let state0 = RecurrentState::zeros(params.dims);
    let mut worst = (0.0f64, String::from("none"));
    let mut check = |analytic: f64, fd: f64, name: String| {
        let e = rel_error(analytic, fd);
        if e > worst.0 {
            worst = (e, name);
        }
    };

    let mut p = params.clone();
    macro_rules! sweep_mat {
        ($field:ident) => {
            for r in 0..p.$field.rows() {
                for c in 0..p.$field.cols() {
                    let orig = p.$field.get(r, c);
                    p.$field.set(r, c, orig + h);
                    let up = loss_for(tokens, &state0, &p, output_grads)?;
                    p.$field.set(r, c, orig - h);
                    let down = loss_for(tokens, &state0, &p, output_grads)?;
                    p.$field.set(r, c, orig);
                    let fd = (up - down) / (2.0 * h);
                    check(
                        grads.$field.get(r, c),
                        fd,
                        format!("{}[{r},{c}]", stringify!($field)),
                    );
                }
            }
        };
    }
    sweep_mat!(w_q);
    sweep_mat!(w_k);
    sweep_mat!(w_v);
    sweep_mat!(w_gamma);
    for c in 0..p.b_gamma.len() {
        let orig = p.b_gamma[c];
        p.b_gamma[c] = orig + h;
        let up = loss_for(tokens, &state0, &p, output_grads)?;
        p.b_gamma[c] = orig - h;
        let down = loss_for(tokens, &state0, &p, output_grads)?;
        p.b_gamma[c] = orig;
        check(grads.b_gamma[c], (up - down) / (2.0 * h), format!("b_gamma[{c}]"));
    }

    let mut rows: Vec<Vec<f64>> = (0..tokens.len()).map(|t| tokens.token(t).to_vec()).collect();
    for t in 0..rows.len() {
        for c in 0..tokens.d_model() {
            let orig = rows[t][c];
            rows[t][c] = orig + h;
            let up = loss_for(&TokenSequence::from_rows(&rows)?, &state0, params, output_grads)?;
            rows[t][c] = orig - h;
            let down = loss_for(&TokenSequence::from_rows(&rows)?, &state0, params, output_grads)?;
            rows[t][c] = orig;
            check(
                grads.inputs[t][c],
                (up - down) / (2.0 * h),
                format!("inputs[{t},{c}]"),
            );
        }
    }

    Ok(worst)
}

/// Runs the analytic backward pass from a zero initial state against central
/// finite differences with step `h`, under a fixed seeded loss weighting.
pub fn finite_diff_check(
    tokens: &TokenSequence,
    params: &GLAParams,
    h: f64,
    tolerance: f64,
) -> Result<FiniteDiffReport> {
    if !(tolerance > 0.0) {
        return Err(Error::Domain(format!(
            "tolerance {tolerance} must be positive"
        )));
    }
    let output_grads = seeded_output_grads(tokens.len(), params.dims.value_width());
    let state0 = RecurrentState::zeros(params.dims);
    let grads = backward(tokens, &state0, params, &output_grads)?;
    let (max_rel_error, worst_parameter) =
        gradient_max_rel_error(tokens, params, &grads, &output_grads, h)?;
    let checked = params.dims.key_width() * params.dims.d_model * 3
        + params.dims.value_width() * params.dims.d_model
        + params.dims.key_width()
        + tokens.len() * params.dims.d_model;
    Ok(FiniteDiffReport {
        max_rel_error,
        worst_parameter,
        checked,
        tolerance,
    })
}
