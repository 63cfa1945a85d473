//! Synthetic stream scenarios behind the command line: planted-relevance
//! generation, long rollouts with per-step records, kernel-shape
//! comparison, and batch verification.
//!
//! A scenario is fully described by a [`ScenarioConfig`]; the same config
//! and seed always produce the same stream, and with timing disabled the
//! exported `records.csv` is byte-identical across runs.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{ridge_probe, run_verification_suite, ProbeReport, SuiteOutcome};
use crate::error::{Error, Result};
use crate::gla::{
    gate, process_chunk, read_snapshot_file, readout, state_update, GLADims, GLAParams,
    RecurrentState, TokenSequence,
};
use crate::linalg::{dot, norm2, Mat};
use crate::local::{causal_softmax_attention, relevant_mass, softmax, DilutionConfig};

/// Chunk length used by the streaming protocol unless overridden.
pub const DEFAULT_CHUNK: usize = 21;

/// Local attention window, reused as the box width and refresh period in
/// kernel comparisons.
pub const DEFAULT_WINDOW: usize = 10;

/// Steps excluded from the head of the cumulative-time fit.
pub const SCALING_WARMUP_STEPS: usize = 100;

/// Relative amplitude of the orthogonal jitter mixed into planted tokens.
const TOKEN_JITTER: f64 = 0.05;

// =========================================================================
// Configuration
// =========================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn from_name(name: &str) -> Result<Precision> {
        match name {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::InvalidConfig(format!(
                "precision must be f64 or f32, got {other}"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }

    fn bytes_per_entry(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

/// Whether per-step wall time is measured. Disabling it zeroes the
/// `step_ns` column, which makes `records.csv` byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimingMode {
    Real,
    Off,
}

impl TimingMode {
    pub fn from_name(name: &str) -> Result<TimingMode> {
        match name {
            "real" => Ok(TimingMode::Real),
            "off" => Ok(TimingMode::Off),
            other => Err(Error::InvalidConfig(format!(
                "timing must be real or off, got {other}"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TimingMode::Real => "real",
            TimingMode::Off => "off",
        }
    }
}

/// Influence pattern selectable for kernel comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeChoice {
    Box,
    BlockRefresh,
    HeavyTail,
    SpikeSink,
    Exponential,
}

impl ShapeChoice {
    pub fn from_name(name: &str) -> Result<ShapeChoice> {
        match name {
            "box" => Ok(ShapeChoice::Box),
            "block_refresh" => Ok(ShapeChoice::BlockRefresh),
            "heavy_tail" => Ok(ShapeChoice::HeavyTail),
            "spike_sink" => Ok(ShapeChoice::SpikeSink),
            "exponential" => Ok(ShapeChoice::Exponential),
            other => Err(Error::InvalidConfig(format!(
                "unknown kernel shape {other}; expected box, block_refresh, heavy_tail, spike_sink, or exponential"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeChoice::Box => "box",
            ShapeChoice::BlockRefresh => "block_refresh",
            ShapeChoice::HeavyTail => "heavy_tail",
            ShapeChoice::SpikeSink => "spike_sink",
            ShapeChoice::Exponential => "exponential",
        }
    }

    pub fn all() -> [ShapeChoice; 5] {
        [
            ShapeChoice::Box,
            ShapeChoice::BlockRefresh,
            ShapeChoice::HeavyTail,
            ShapeChoice::SpikeSink,
            ShapeChoice::Exponential,
        ]
    }
}

/// Everything a scenario run depends on. Identical configs (including the
/// seed) produce identical streams; with [`TimingMode::Off`] the exported
/// records are byte-identical across runs.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub length: usize,
    pub chunk: usize,
    pub window: usize,
    pub dims: GLADims,
    pub w_geo: usize,
    pub m: f64,
    /// Kernel shape under test; `None` compares every shape.
    pub shape: Option<ShapeChoice>,
    /// Gate bias applied to every retention channel.
    pub gate_bias: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub precision: Precision,
    pub timing: TimingMode,
    /// Record relevant attention mass per step. Each step re-scores the
    /// whole history, so the run costs quadratic time in the length.
    pub dilution: bool,
    /// Write a state snapshot at every chunk boundary.
    pub export_snapshots: bool,
    /// Debug hook passed to the verification suite: drives an extra
    /// state-bound run at this constant retention against the 0.9 bound.
    pub gamma_override: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            length: 1000,
            chunk: DEFAULT_CHUNK,
            window: DEFAULT_WINDOW,
            dims: GLADims::new(8, 4, 4, 2).expect("default dims are positive"),
            w_geo: 4,
            m: 1.0,
            shape: None,
            gate_bias: 4.0,
            seed: 7,
            out_dir: PathBuf::from("out"),
            precision: Precision::F64,
            timing: TimingMode::Real,
            dilution: false,
            export_snapshots: false,
            gamma_override: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::InvalidConfig("stream length must be positive".into()));
        }
        if self.chunk == 0 {
            return Err(Error::InvalidConfig("chunk size must be positive".into()));
        }
        if self.window == 0 {
            return Err(Error::InvalidConfig("window must be positive".into()));
        }
        if self.chunk < self.window {
            return Err(Error::InvalidConfig(format!(
                "chunk size {} must be at least the window {}",
                self.chunk, self.window
            )));
        }
        if self.w_geo == 0 {
            return Err(Error::InvalidConfig("relevance budget w_geo must be positive".into()));
        }
        if !(self.m > 0.0) || !self.m.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "score margin m = {} must be positive and finite",
                self.m
            )));
        }
        if !self.gate_bias.is_finite() {
            return Err(Error::InvalidConfig("gate bias must be finite".into()));
        }
        if let Some(g) = self.gamma_override {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "gamma override {g} must be positive and finite"
                )));
            }
        }
        Ok(())
    }

    /// Applies one `key = value` setting by its documented name.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::InvalidConfig(format!("config key {key} cannot parse value `{value}`"))
            })
        }
        fn parse_bool(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::InvalidConfig(format!(
                    "config key {key} expects true or false, got `{value}`"
                ))),
            }
        }
        match key {
            "length" => self.length = parse(key, value)?,
            "chunk" => self.chunk = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "d_model" => {
                self.dims = GLADims::new(parse(key, value)?, self.dims.d_k, self.dims.d_v, self.dims.heads)?
            }
            "d_k" => {
                self.dims = GLADims::new(self.dims.d_model, parse(key, value)?, self.dims.d_v, self.dims.heads)?
            }
            "d_v" => {
                self.dims = GLADims::new(self.dims.d_model, self.dims.d_k, parse(key, value)?, self.dims.heads)?
            }
            "heads" => {
                self.dims = GLADims::new(self.dims.d_model, self.dims.d_k, self.dims.d_v, parse(key, value)?)?
            }
            "w_geo" => self.w_geo = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "shape" => self.shape = Some(ShapeChoice::from_name(value)?),
            "gate_bias" => self.gate_bias = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            "precision" => self.precision = Precision::from_name(value)?,
            "timing" => self.timing = TimingMode::from_name(value)?,
            "dilution" => self.dilution = parse_bool(key, value)?,
            "export_snapshots" => self.export_snapshots = parse_bool(key, value)?,
            "gamma_override" => self.gamma_override = Some(parse(key, value)?),
            other => {
                return Err(Error::InvalidConfig(format!("unknown config key {other}")));
            }
        }
        Ok(())
    }

    /// Loads settings from a flat `key = value` file. Blank lines are
    /// skipped and `#` starts a comment. Values set here can still be
    /// overridden by later [`apply_key`](Self::apply_key) calls, which is
    /// how command-line flags win.
    pub fn apply_config_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Malformed(format!(
                    "config line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                ))
            })?;
            self.apply_key(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

// =========================================================================
// Stream generation
// =========================================================================

/// A synthetic token stream with planted relevance structure.
///
/// Tokens within a block of `w_geo` consecutive steps share a latent
/// direction; adjacent blocks carry the opposite sign. Same-block pairs
/// therefore score near `+m` and adjacent-block pairs near `-m` once scaled
/// and clipped by [`clipped_score`]. Blocks two or more apart alternate in
/// sign, so stale scores stay inside `[-m, m]` and measured relevant mass
/// can only fall below the best-case dilution bound, never above it.
#[derive(Debug, Clone)]
pub struct PlantedStream {
    pub tokens: TokenSequence,
    /// Per step, the 0-based range of relevant steps: the portion of the
    /// current block seen so far, never more than `w_geo` steps.
    pub relevant: Vec<std::ops::Range<usize>>,
    /// Magnitude of every planted token.
    pub magnitude: f64,
    /// Shared latent direction (unit norm).
    pub direction: Vec<f64>,
}

/// Generates the planted stream for a config. Deterministic in the seed:
/// the same config yields bit-identical tokens.
pub fn generate_stream(cfg: &ScenarioConfig) -> Result<PlantedStream> {
    cfg.validate()?;
    let d = cfg.dims.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut direction: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let n = norm2(&direction);
    if n < 1e-9 {
        direction = vec![0.0; d];
        direction[0] = 1.0;
    } else {
        for v in direction.iter_mut() {
            *v /= n;
        }
    }
    let magnitude = (cfg.m * (d as f64).sqrt()).sqrt();
    let mut data = Vec::with_capacity(cfg.length * d);
    let mut relevant = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        let sign = if (t / cfg.w_geo) % 2 == 0 { 1.0 } else { -1.0 };
        let mut jitter: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let along = dot(&jitter, &direction);
        for (j, u) in jitter.iter_mut().zip(&direction) {
            *j -= along * u;
        }
        let jn = norm2(&jitter);
        if jn > 1e-9 {
            for j in jitter.iter_mut() {
                *j /= jn;
            }
        }
        for i in 0..d {
            data.push(magnitude * (sign * direction[i] + TOKEN_JITTER * jitter[i]));
        }
        let block_start = t - t % cfg.w_geo;
        relevant.push(block_start..t + 1);
    }
    Ok(PlantedStream {
        tokens: TokenSequence::from_flat(d, data)?,
        relevant,
        magnitude,
        direction,
    })
}

/// Attention score between stored tokens `i` and `t`, scaled by
/// `1/sqrt(d)` and clipped into `[-m, m]`. The clip realizes the bounded
/// score margin the dilution bound assumes.
pub fn clipped_score(tokens: &TokenSequence, i: usize, t: usize, m: f64) -> f64 {
    let scale = 1.0 / (tokens.d_model() as f64).sqrt();
    (dot(tokens.token(i), tokens.token(t)) * scale).clamp(-m, m)
}

// =========================================================================
// Scenario execution
// =========================================================================

/// Per-step measurements of a scenario run.
#[derive(Debug, Clone)]
pub struct StreamRecord {
    /// 1-based step index.
    pub t: usize,
    pub out_norm: f64,
    pub state_fro: f64,
    /// Slack of the geometric state-norm bound built from the retention
    /// and update magnitudes realized so far; nonnegative while the bound
    /// holds.
    pub bound_margin: f64,
    /// Softmax mass on the relevant steps; recorded only in dilution mode.
    pub relevant_mass: Option<f64>,
    pub step_ns: u64,
    pub state_bytes: usize,
}

/// Writes records with the header
/// `t,out_norm,state_fro,bound_margin,relevant_mass,step_ns,state_bytes`.
/// The relevant-mass field is empty outside dilution mode.
pub fn write_records_csv<W: std::io::Write>(
    records: &[StreamRecord],
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "t,out_norm,state_fro,bound_margin,relevant_mass,step_ns,state_bytes")?;
    for r in records {
        let mass = match r.relevant_mass {
            Some(m) => format!("{m:.16e}"),
            None => String::new(),
        };
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{},{},{}",
            r.t, r.out_norm, r.state_fro, r.bound_margin, mass, r.step_ns, r.state_bytes
        )?;
    }
    Ok(())
}

/// A finished scenario run: the records, the summary document, and the
/// files written under the output directory.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub records: Vec<StreamRecord>,
    pub summary: serde_json::Value,
    pub files: Vec<String>,
}

struct StepMetrics {
    sup_gate: f64,
    sup_update: f64,
}

impl StepMetrics {
    fn new() -> Self {
        StepMetrics {
            sup_gate: 0.0,
            sup_update: 0.0,
        }
    }

    /// Geometric bound on the state norm after `t` steps, from the largest
    /// retention and update magnitude seen so far.
    fn bound(&self, t: usize) -> f64 {
        let g = self.sup_gate;
        if g >= 1.0 {
            return f64::INFINITY;
        }
        self.sup_update * (1.0 - g.powi(t as i32)) / (1.0 - g)
    }
}

fn quantize_state(state: &mut RecurrentState) {
    for h in 0..state.heads() {
        for v in state.head_mut(h).data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

fn split_chunk_ns(total: u64, n: usize) -> Vec<u64> {
    let n64 = n as u64;
    let per = total / n64;
    let mut out = vec![per; n];
    out[n - 1] = total - per * (n64 - 1);
    out
}

/// Drives the gated recurrence over the planted stream chunk by chunk and
/// records per-step metrics.
///
/// In 64-bit mode each chunk is processed whole (and timed as a unit, the
/// chunk's wall time split evenly over its steps), then replayed token by
/// token to read off per-step state norms; chunking invariance makes the
/// replay bit-identical to the chunked pass. In 32-bit mode the carried
/// state and the outputs are rounded through `f32` after every step, as a
/// reduced-precision throughput variant, and steps are timed individually.
///
/// Writes `records.csv`, `summary.json`, and `manifest.json` (plus
/// `snapshots/*.glas` when enabled) under the configured output directory.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let stream = generate_stream(cfg)?;
    let dims = cfg.dims;
    let mut params = GLAParams::seeded(dims, cfg.seed);
    params.b_gamma = vec![cfg.gate_bias; dims.key_width()];
    let state_bytes = dims.heads * dims.d_k * dims.d_v * cfg.precision.bytes_per_entry();
    let dilution_cfg = DilutionConfig::new(cfg.w_geo, cfg.m)?;

    let snapshot_dir = cfg.out_dir.join("snapshots");
    if cfg.export_snapshots {
        std::fs::create_dir_all(&snapshot_dir).map_err(|e| Error::io(&snapshot_dir, e))?;
    }

    let mut records: Vec<StreamRecord> = Vec::with_capacity(cfg.length);
    let mut metrics = StepMetrics::new();
    let mut state = RecurrentState::zeros(dims);
    let mut files: Vec<String> = Vec::new();
    let mut start = 0;
    while start < cfg.length {
        let end = (start + cfg.chunk).min(cfg.length);
        let n = end - start;
        let slice = stream.tokens.slice(start, end)?;
        match cfg.precision {
            Precision::F64 => {
                let timer = Instant::now();
                let (outputs, next) = process_chunk(&slice, state.clone(), &params)?;
                let chunk_ns = match cfg.timing {
                    TimingMode::Real => timer.elapsed().as_nanos() as u64,
                    TimingMode::Off => 0,
                };
                let step_ns = split_chunk_ns(chunk_ns, n);
                let mut replay = state;
                for j in 0..n {
                    let t = start + j;
                    let x = stream.tokens.token(t);
                    let g = gate(x, &params)?;
                    let k = params.w_k.matvec(x);
                    let v = params.w_v.matvec(x);
                    track_step(&mut metrics, &g, &k, &v, &params);
                    replay = state_update(&replay, &k, &v, &g, &params)?;
                    records.push(make_record(
                        t,
                        norm2(&outputs[j]),
                        &replay,
                        &metrics,
                        step_ns[j],
                        state_bytes,
                        cfg,
                        &stream,
                        &dilution_cfg,
                    )?);
                }
                for h in 0..next.heads() {
                    debug_assert_eq!(
                        replay.head(h).data(),
                        next.head(h).data(),
                        "replayed state diverged from the chunked pass"
                    );
                }
                state = next;
            }
            Precision::F32 => {
                for j in 0..n {
                    let t = start + j;
                    let x = stream.tokens.token(t);
                    let timer = Instant::now();
                    let g = gate(x, &params)?;
                    let k = params.w_k.matvec(x);
                    let v = params.w_v.matvec(x);
                    let q = params.w_q.matvec(x);
                    state = state_update(&state, &k, &v, &g, &params)?;
                    quantize_state(&mut state);
                    let mut out = readout(&q, &state)?;
                    for o in out.iter_mut() {
                        *o = *o as f32 as f64;
                    }
                    let ns = match cfg.timing {
                        TimingMode::Real => timer.elapsed().as_nanos() as u64,
                        TimingMode::Off => 0,
                    };
                    track_step(&mut metrics, &g, &k, &v, &params);
                    let _ = j;
                    records.push(make_record(
                        t,
                        norm2(&out),
                        &state,
                        &metrics,
                        ns,
                        state_bytes,
                        cfg,
                        &stream,
                        &dilution_cfg,
                    )?);
                }
            }
        }
        if cfg.export_snapshots {
            let name = format!("snapshots/state_{:08}.glas", state.step());
            state.write_snapshot_file(&cfg.out_dir.join(&name))?;
            files.push(name);
        }
        start = end;
    }

    let summary = build_summary(cfg, &records);
    let records_path = cfg.out_dir.join("records.csv");
    let mut buf = Vec::new();
    write_records_csv(&records, &mut buf).map_err(|e| Error::io(&records_path, e))?;
    std::fs::write(&records_path, buf).map_err(|e| Error::io(&records_path, e))?;
    files.insert(0, "records.csv".into());

    let summary_path = cfg.out_dir.join("summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|e| Error::io(&summary_path, e))?;
    files.push("summary.json".into());

    write_manifest(&cfg.out_dir, "run", cfg.seed, &files, true)?;
    files.push("manifest.json".into());

    Ok(ScenarioOutcome {
        records,
        summary,
        files,
    })
}

fn track_step(metrics: &mut StepMetrics, g: &[f64], k: &[f64], v: &[f64], params: &GLAParams) {
    for gv in g {
        metrics.sup_gate = metrics.sup_gate.max(*gv);
    }
    let phi: Vec<f64> = k.iter().map(|x| params.feature_map.apply(*x)).collect();
    metrics.sup_update = metrics.sup_update.max(norm2(&phi) * norm2(v));
}

#[allow(clippy::too_many_arguments)]
fn make_record(
    t: usize,
    out_norm: f64,
    state: &RecurrentState,
    metrics: &StepMetrics,
    step_ns: u64,
    state_bytes: usize,
    cfg: &ScenarioConfig,
    stream: &PlantedStream,
    dilution_cfg: &DilutionConfig,
) -> Result<StreamRecord> {
    let mass = if cfg.dilution {
        let scores: Vec<f64> = (0..=t)
            .map(|i| clipped_score(&stream.tokens, i, t, cfg.m))
            .collect();
        let weights = softmax(&scores)?;
        let rel: Vec<usize> = stream.relevant[t].clone().collect();
        Some(relevant_mass(&weights, &rel)?)
    } else {
        None
    };
    let _ = dilution_cfg;
    Ok(StreamRecord {
        t: t + 1,
        out_norm,
        state_fro: state.frobenius_norm(),
        bound_margin: metrics.bound(t + 1) - state.frobenius_norm(),
        relevant_mass: mass,
        step_ns,
        state_bytes,
    })
}

/// Least-squares line through the points; `None` with fewer than two
/// points or no spread in x. The second value is the fit's coefficient of
/// determination (1 when y has no variance, since a flat line explains it).
pub fn linear_fit(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (x, y) in points {
        let pred = intercept + slope * x;
        ss_res += (y - pred) * (y - pred);
        ss_tot += (y - my) * (y - my);
    }
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Some((slope, r_squared))
}

fn build_summary(cfg: &ScenarioConfig, records: &[StreamRecord]) -> serde_json::Value {
    let min_bytes = records.iter().map(|r| r.state_bytes).min().unwrap_or(0);
    let max_bytes = records.iter().map(|r| r.state_bytes).max().unwrap_or(0);
    let max_out = records.iter().map(|r| r.out_norm).fold(0.0f64, f64::max);
    let min_margin = records
        .iter()
        .map(|r| r.bound_margin)
        .fold(f64::INFINITY, f64::min);

    let fit = if cfg.timing == TimingMode::Real {
        let mut cumulative = 0u64;
        let mut points = Vec::new();
        for r in records {
            cumulative += r.step_ns;
            if r.t > SCALING_WARMUP_STEPS {
                points.push((r.t as f64, cumulative as f64));
            }
        }
        linear_fit(&points)
    } else {
        None
    };

    let dilution_margin = if cfg.dilution {
        let mut min_margin = f64::INFINITY;
        for r in records {
            if r.t > cfg.w_geo {
                if let Some(mass) = r.relevant_mass {
                    let bound = crate::local::dilution_bound(
                        r.t as f64,
                        &DilutionConfig::new(cfg.w_geo, cfg.m).expect("validated config"),
                    )
                    .expect("t exceeds w_geo");
                    min_margin = min_margin.min(bound - mass);
                }
            }
        }
        if min_margin.is_finite() {
            Some(min_margin)
        } else {
            None
        }
    } else {
        None
    };

    serde_json::json!({
        "length": cfg.length,
        "chunk": cfg.chunk,
        "window": cfg.window,
        "seed": cfg.seed,
        "precision": cfg.precision.name(),
        "timing": cfg.timing.name(),
        "dilution": cfg.dilution,
        "records": records.len(),
        "state_bytes": {
            "min": min_bytes,
            "max": max_bytes,
            "constant": min_bytes == max_bytes,
        },
        "max_out_norm": max_out,
        "min_bound_margin": if min_margin.is_finite() { Some(min_margin) } else { None },
        "min_dilution_margin": dilution_margin,
        "time_fit": {
            "slope_ns_per_step": fit.map(|f| f.0),
            "r_squared": fit.map(|f| f.1),
            "warmup_steps": SCALING_WARMUP_STEPS,
        },
    })
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    seed: u64,
    files: &[String],
    pass: bool,
) -> Result<()> {
    let manifest = serde_json::json!({
        "command": command,
        "seed": seed,
        "files": files,
        "pass": pass,
    });
    let path = out_dir.join("manifest.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(&path, e))
}

// =========================================================================
// Verification wrapper
// =========================================================================

/// Runs the full verification suite into the configured output directory,
/// forwarding the debug retention override.
pub fn run_suite(cfg: &ScenarioConfig) -> Result<SuiteOutcome> {
    cfg.validate()?;
    run_verification_suite(&cfg.out_dir, cfg.seed, cfg.gamma_override)
}

// =========================================================================
// Kernel comparison
// =========================================================================

/// One step of a kernel-shape run: the drift proxy (readout error on the
/// value planted `probe_lag` steps earlier) and the memory's norm.
#[derive(Debug, Clone)]
pub struct DriftRow {
    pub t: usize,
    pub drift: f64,
    pub state_norm: f64,
}

/// Drift series and derived statistics for one shape.
#[derive(Debug, Clone)]
pub struct KernelRunStats {
    pub shape: ShapeChoice,
    pub rows: Vec<DriftRow>,
    /// Least-squares slope of the memory norm over time.
    pub norm_slope: f64,
    /// Largest step-to-step drift change relative to the median change.
    pub max_jump_ratio: f64,
    pub max_drift: f64,
    /// Geometric bound on the drift for gated shapes, from realized update
    /// magnitudes.
    pub drift_envelope: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct KernelComparison {
    pub runs: Vec<KernelRunStats>,
    pub probe_lag: usize,
}

impl KernelComparison {
    /// Writes every run with the header `shape,t,drift,state_norm`.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "shape,t,drift,state_norm")?;
        for run in &self.runs {
            for row in &run.rows {
                writeln!(
                    out,
                    "{},{},{:.16e},{:.16e}",
                    run.shape.name(),
                    row.t,
                    row.drift,
                    row.state_norm
                )?;
            }
        }
        Ok(())
    }

    pub fn stats_json(&self) -> serde_json::Value {
        serde_json::json!({
            "probe_lag": self.probe_lag,
            "shapes": self.runs.iter().map(|run| {
                serde_json::json!({
                    "shape": run.shape.name(),
                    "steps": run.rows.len(),
                    "norm_slope": run.norm_slope,
                    "max_jump_ratio": run.max_jump_ratio,
                    "max_drift": run.max_drift,
                    "drift_envelope": run.drift_envelope,
                })
            }).collect::<Vec<_>>(),
        })
    }
}

fn basis_key(t: usize, d_k: usize) -> Vec<f64> {
    let mut k = vec![0.0; d_k];
    k[(t - 1) % d_k] = 1.0;
    k
}

fn probe_index(t: usize, probe_lag: usize) -> usize {
    t.saturating_sub(probe_lag).max(1)
}

fn residual_norm(pred: &[f64], target: &[f64]) -> f64 {
    norm2(&pred.iter().zip(target).map(|(p, v)| p - v).collect::<Vec<f64>>())
}

/// Runs each shape's memory mechanism over the same planted key-value
/// stream and measures how well the value planted `probe_lag` steps ago can
/// still be read back.
///
/// Keys cycle through the standard basis (one channel per window slot) and
/// values share a coherent component, so lossless accumulation visibly
/// grows while gated decay stays bounded. Box attention keeps an exact
/// window cache; block refresh zeroes the state every `window` steps; the
/// spike-sink average mixes a fixed early value with the running mean,
/// matching the spike-sink profile rows.
pub fn compare_kernels(cfg: &ScenarioConfig, shapes: &[ShapeChoice]) -> Result<KernelComparison> {
    cfg.validate()?;
    if shapes.is_empty() {
        return Err(Error::InvalidConfig("at least one kernel shape is required".into()));
    }
    if cfg.window < 2 {
        return Err(Error::InvalidConfig(
            "kernel comparison needs a window of at least 2".into(),
        ));
    }
    let t_max = cfg.length;
    let d_k = cfg.window;
    let d_v = cfg.dims.d_v;
    let probe_lag = cfg.w_geo.min(cfg.window - 1).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coherent: Vec<f64> = (0..d_v).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let cn = norm2(&coherent);
    if cn < 1e-9 {
        coherent = vec![0.0; d_v];
        coherent[0] = 1.0;
    } else {
        for v in coherent.iter_mut() {
            *v /= cn;
        }
    }
    let values: Vec<Vec<f64>> = (0..t_max)
        .map(|_| {
            let mut j: Vec<f64> = (0..d_v).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let jn = norm2(&j).max(1e-9);
            for v in j.iter_mut() {
                *v /= jn;
            }
            coherent
                .iter()
                .zip(&j)
                .map(|(c, jv)| 0.8 * c + 0.6 * jv)
                .collect()
        })
        .collect();

    let mut runs = Vec::with_capacity(shapes.len());
    for &shape in shapes {
        let rows = match shape {
            ShapeChoice::HeavyTail => run_matrix_shape(d_k, &values, probe_lag, None, None)?,
            ShapeChoice::BlockRefresh => {
                run_matrix_shape(d_k, &values, probe_lag, None, Some(cfg.window))?
            }
            ShapeChoice::Exponential => {
                let gammas: Vec<f64> = (0..d_k)
                    .map(|c| 0.9 + 0.09 * c as f64 / (d_k - 1).max(1) as f64)
                    .collect();
                run_matrix_shape(d_k, &values, probe_lag, Some(gammas), None)?
            }
            ShapeChoice::Box => run_box_shape(d_k, &values, probe_lag, cfg.window)?,
            ShapeChoice::SpikeSink => run_spike_shape(&values, probe_lag)?,
        };
        let envelope = match shape {
            ShapeChoice::Exponential => {
                let max_v = values.iter().map(|v| norm2(v)).fold(0.0f64, f64::max);
                Some(max_v / (1.0 - 0.99) + max_v)
            }
            _ => None,
        };
        runs.push(shape_stats(shape, rows, envelope));
    }
    Ok(KernelComparison { runs, probe_lag })
}

fn run_matrix_shape(
    d_k: usize,
    values: &[Vec<f64>],
    probe_lag: usize,
    gammas: Option<Vec<f64>>,
    reset_period: Option<usize>,
) -> Result<Vec<DriftRow>> {
    let d_v = values[0].len();
    let dims = GLADims::new(1, d_k, d_v, 1)?;
    let params = GLAParams::seeded(dims, 0);
    let gate_vec = gammas.unwrap_or_else(|| vec![1.0; d_k]);
    let mut state = RecurrentState::zeros(dims);
    let mut rows = Vec::with_capacity(values.len());
    for t in 1..=values.len() {
        if let Some(period) = reset_period {
            if t > 1 && (t - 1) % period == 0 {
                state = RecurrentState::zeros(dims);
            }
        }
        let k = basis_key(t, d_k);
        state = state_update(&state, &k, &values[t - 1], &gate_vec, &params)?;
        let i = probe_index(t, probe_lag);
        let pred = readout(&basis_key(i, d_k), &state)?;
        rows.push(DriftRow {
            t,
            drift: residual_norm(&pred, &values[i - 1]),
            state_norm: state.frobenius_norm(),
        });
    }
    Ok(rows)
}

fn run_box_shape(
    d_k: usize,
    values: &[Vec<f64>],
    probe_lag: usize,
    window: usize,
) -> Result<Vec<DriftRow>> {
    let mut cache: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::with_capacity(window);
    let mut rows = Vec::with_capacity(values.len());
    for t in 1..=values.len() {
        if cache.len() == window {
            cache.pop_front();
        }
        cache.push_back((basis_key(t, d_k), values[t - 1].clone()));
        let i = probe_index(t, probe_lag);
        let keys: Vec<Vec<f64>> = cache.iter().map(|(k, _)| k.clone()).collect();
        let vals: Vec<Vec<f64>> = cache.iter().map(|(_, v)| v.clone()).collect();
        let query = basis_key(i, d_k);
        let attention = causal_softmax_attention(&[query], &keys, &vals)?;
        let norm_sq: f64 = cache
            .iter()
            .map(|(k, v)| dot(k, k) + dot(v, v))
            .sum();
        rows.push(DriftRow {
            t,
            drift: residual_norm(&attention.outputs[0], &values[i - 1]),
            state_norm: norm_sq.sqrt(),
        });
    }
    Ok(rows)
}

fn run_spike_shape(values: &[Vec<f64>], probe_lag: usize) -> Result<Vec<DriftRow>> {
    let d_v = values[0].len();
    let sink_mass = 0.9;
    let sink = &values[0];
    let mut sum = vec![0.0; d_v];
    let mut rows = Vec::with_capacity(values.len());
    for t in 1..=values.len() {
        for (s, v) in sum.iter_mut().zip(&values[t - 1]) {
            *s += v;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / t as f64).collect();
        let pred: Vec<f64> = sink
            .iter()
            .zip(&mean)
            .map(|(sk, mu)| sink_mass * sk + (1.0 - sink_mass) * mu)
            .collect();
        let i = probe_index(t, probe_lag);
        let norm_sq = dot(sink, sink) + dot(&mean, &mean);
        rows.push(DriftRow {
            t,
            drift: residual_norm(&pred, &values[i - 1]),
            state_norm: norm_sq.sqrt(),
        });
    }
    Ok(rows)
}

fn shape_stats(shape: ShapeChoice, rows: Vec<DriftRow>, envelope: Option<f64>) -> KernelRunStats {
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.t as f64, r.state_norm)).collect();
    let norm_slope = linear_fit(&points).map(|f| f.0).unwrap_or(0.0);
    let max_drift = rows.iter().map(|r| r.drift).fold(0.0f64, f64::max);
    let mut deltas: Vec<f64> = rows.windows(2).map(|w| (w[1].drift - w[0].drift).abs()).collect();
    let max_jump_ratio = if deltas.is_empty() {
        0.0
    } else {
        deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = deltas[deltas.len() / 2];
        let max = *deltas.last().unwrap();
        max / median.max(1e-9)
    };
    KernelRunStats {
        shape,
        rows,
        norm_slope,
        max_jump_ratio,
        max_drift,
        drift_envelope: envelope,
    }
}

/// Writes `kernels.csv` and `kernels.json` under the output directory and
/// returns the file names written.
pub fn write_kernel_outputs(cmp: &KernelComparison, out_dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("kernels.csv");
    let mut buf = Vec::new();
    cmp.write_csv(&mut buf).map_err(|e| Error::io(&csv_path, e))?;
    std::fs::write(&csv_path, buf).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = out_dir.join("kernels.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&cmp.stats_json()).expect("stats serialize"),
    )
    .map_err(|e| Error::io(&json_path, e))?;
    Ok(vec!["kernels.csv".into(), "kernels.json".into()])
}

/// Writes the manifest for a kernels run.
pub fn finish_kernels(cmp: &KernelComparison, cfg: &ScenarioConfig) -> Result<Vec<String>> {
    let mut files = write_kernel_outputs(cmp, &cfg.out_dir)?;
    write_manifest(&cfg.out_dir, "kernels", cfg.seed, &files, true)?;
    files.push("manifest.json".into());
    Ok(files)
}

// =========================================================================
// Snapshot probing
// =========================================================================

/// Reads a targets table (`file,target` CSV) and the named state
/// snapshots, builds one feature row per snapshot from its state row
/// norms, and fits the ridge probe.
pub fn probe_snapshots(
    snapshot_dir: &Path,
    targets_file: &Path,
    lambda: f64,
) -> Result<ProbeReport> {
    let text = std::fs::read_to_string(targets_file).map_err(|e| Error::io(targets_file, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == "file,target" => {}
        other => {
            return Err(Error::Malformed(format!(
                "targets file must start with `file,target`, got `{}`",
                other.unwrap_or("")
            )));
        }
    }
    let mut feature_rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (file, target) = line.split_once(',').ok_or_else(|| {
            Error::Malformed(format!("targets line {}: expected `file,target`", lineno + 2))
        })?;
        let target: f64 = target.trim().parse().map_err(|_| {
            Error::Malformed(format!("targets line {}: bad target `{target}`", lineno + 2))
        })?;
        let snapshot = read_snapshot_file(&snapshot_dir.join(file.trim()))?;
        feature_rows.push(snapshot.row_norms());
        targets.push(target);
    }
    if feature_rows.is_empty() {
        return Err(Error::InvalidConfig("targets file names no snapshots".into()));
    }
    let width = feature_rows[0].len();
    for row in &feature_rows {
        if row.len() != width {
            return Err(Error::DimensionMismatch {
                context: "snapshot feature width",
                expected: width,
                got: row.len(),
            });
        }
    }
    let n = feature_rows.len();
    let features = Mat::from_fn(n, width, |r, c| feature_rows[r][c]);
    ridge_probe(&features, &targets, lambda, &[])
}

/// Writes `probe.json` and the manifest for a probe run.
pub fn finish_probe(report: &ProbeReport, cfg: &ScenarioConfig) -> Result<Vec<String>> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("probe.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(report).expect("probe report serializes"),
    )
    .map_err(|e| Error::io(&path, e))?;
    let files = vec!["probe.json".to_string()];
    write_manifest(&cfg.out_dir, "probe", cfg.seed, &files, true)?;
    Ok(vec!["probe.json".into(), "manifest.json".into()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local::dilution_bound;

    fn test_config(dir: &Path) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.length = 50;
        cfg.timing = TimingMode::Off;
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn default_config_is_valid_and_rejects_bad_fields() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.length = 0;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.chunk = 5;
        assert!(bad.validate().is_err(), "chunk below window must fail");
        let mut bad = cfg.clone();
        bad.w_geo = 0;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.m = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_keys_apply_and_unknown_keys_fail() {
        let mut cfg = ScenarioConfig::default();
        cfg.apply_key("length", "123").unwrap();
        cfg.apply_key("d_k", "6").unwrap();
        cfg.apply_key("precision", "f32").unwrap();
        cfg.apply_key("timing", "off").unwrap();
        cfg.apply_key("shape", "box").unwrap();
        cfg.apply_key("dilution", "true").unwrap();
        assert_eq!(cfg.length, 123);
        assert_eq!(cfg.dims.d_k, 6);
        assert_eq!(cfg.precision, Precision::F32);
        assert_eq!(cfg.timing, TimingMode::Off);
        assert_eq!(cfg.shape, Some(ShapeChoice::Box));
        assert!(cfg.dilution);
        assert!(cfg.apply_key("no_such_key", "1").is_err());
        assert!(cfg.apply_key("length", "abc").is_err());
        assert!(cfg.apply_key("precision", "f16").is_err());
        assert!(cfg.apply_key("shape", "ring").is_err());
    }

    #[test]
    fn config_file_parses_comments_and_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenario.cfg");
        std::fs::write(
            &path,
            "# scenario\nlength = 77\n\nseed = 3 # inline comment\nwindow=5\nchunk = 9\n",
        )
        .unwrap();
        let mut cfg = ScenarioConfig::default();
        cfg.apply_config_file(&path).unwrap();
        assert_eq!(cfg.length, 77);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.window, 5);
        assert_eq!(cfg.chunk, 9);
        std::fs::write(&path, "length 77\n").unwrap();
        let mut cfg = ScenarioConfig::default();
        assert!(cfg.apply_config_file(&path).is_err());
    }

    #[test]
    fn generated_streams_are_deterministic_and_annotated() {
        let mut cfg = ScenarioConfig::default();
        cfg.length = 40;
        let a = generate_stream(&cfg).unwrap();
        let b = generate_stream(&cfg).unwrap();
        for t in 0..40 {
            assert_eq!(a.tokens.token(t), b.tokens.token(t));
        }
        for (t, range) in a.relevant.iter().enumerate() {
            assert!(range.end == t + 1);
            assert!(range.len() <= cfg.w_geo);
            assert!(range.len() >= 1);
        }
        let mut degenerate = cfg.clone();
        degenerate.w_geo = 0;
        assert!(generate_stream(&degenerate).is_err());
    }

    #[test]
    fn full_budget_makes_every_earlier_step_relevant() {
        let mut cfg = ScenarioConfig::default();
        cfg.length = 30;
        cfg.w_geo = 30;
        let stream = generate_stream(&cfg).unwrap();
        for (t, range) in stream.relevant.iter().enumerate() {
            assert_eq!(*range, 0..t + 1);
        }
    }

    #[test]
    fn planted_scores_sit_at_the_margins_after_clipping() {
        let mut cfg = ScenarioConfig::default();
        cfg.length = 20;
        cfg.w_geo = 4;
        let stream = generate_stream(&cfg).unwrap();
        let m = cfg.m;
        // Steps 8 and 9 share a block; step 5 sits in the adjacent block.
        let same = clipped_score(&stream.tokens, 8, 9, m);
        assert!(same <= m && same > 0.9 * m, "same-block score {same}");
        let opposite = clipped_score(&stream.tokens, 5, 9, m);
        assert!((-m..=-0.9 * m).contains(&opposite), "adjacent score {opposite}");
        for i in 0..=9 {
            let s = clipped_score(&stream.tokens, i, 9, m);
            assert!((-m..=m).contains(&s));
        }
    }

    #[test]
    fn scenario_records_every_step_with_constant_state_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_config(dir.path());
        let outcome = run_scenario(&cfg).unwrap();
        assert_eq!(outcome.records.len(), 50);
        for (i, r) in outcome.records.iter().enumerate() {
            assert_eq!(r.t, i + 1);
            assert_eq!(r.state_bytes, 2 * 4 * 4 * 8);
            assert!(r.bound_margin >= -1e-9, "margin {} at t {}", r.bound_margin, r.t);
            assert!(r.relevant_mass.is_none());
            assert_eq!(r.step_ns, 0);
        }
        assert!(dir.path().join("records.csv").exists());
        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("manifest.json").exists());
        assert_eq!(outcome.summary["state_bytes"]["constant"], true);
        assert_eq!(outcome.summary["time_fit"]["slope_ns_per_step"], serde_json::Value::Null);
    }

    #[test]
    fn single_step_scenario_reports_a_null_fit() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_config(dir.path());
        cfg.length = 1;
        cfg.timing = TimingMode::Real;
        let outcome = run_scenario(&cfg).unwrap();
        assert_eq!(outcome.records.len(), 1);
        assert_eq!(outcome.summary["time_fit"]["slope_ns_per_step"], serde_json::Value::Null);
    }

    #[test]
    fn identical_configs_write_identical_records() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        run_scenario(&test_config(dir_a.path())).unwrap();
        run_scenario(&test_config(dir_b.path())).unwrap();
        let a = std::fs::read(dir_a.path().join("records.csv")).unwrap();
        let b = std::fs::read(dir_b.path().join("records.csv")).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with(b"t,out_norm,state_fro,bound_margin,relevant_mass,step_ns,state_bytes\n"));
    }

    #[test]
    fn dilution_mode_masses_respect_the_bound() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_config(dir.path());
        cfg.length = 60;
        cfg.dilution = true;
        let outcome = run_scenario(&cfg).unwrap();
        let dcfg = DilutionConfig::new(cfg.w_geo, cfg.m).unwrap();
        let crossing = dcfg.crossing_point();
        for r in &outcome.records {
            let mass = r.relevant_mass.expect("dilution mode records mass");
            assert!(mass > 0.0 && mass <= 1.0);
            if r.t > cfg.w_geo {
                let bound = dilution_bound(r.t as f64, &dcfg).unwrap();
                assert!(mass <= bound + 1e-9, "t {} mass {mass} bound {bound}", r.t);
            }
            if (r.t as f64) > crossing {
                assert!(mass < 0.5);
            }
        }
        let text = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
        let second_line = text.lines().nth(1).unwrap();
        assert_eq!(second_line.split(',').count(), 7);
        assert!(!second_line.split(',').nth(4).unwrap().is_empty());
    }

    #[test]
    fn reduced_precision_runs_and_shrinks_state_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_config(dir.path());
        cfg.precision = Precision::F32;
        let outcome = run_scenario(&cfg).unwrap();
        for r in &outcome.records {
            assert_eq!(r.state_bytes, 2 * 4 * 4 * 4);
            assert!(r.out_norm.is_finite());
            assert!(r.state_fro.is_finite());
        }
    }

    #[test]
    fn snapshots_are_exported_at_chunk_boundaries() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_config(dir.path());
        cfg.export_snapshots = true;
        let outcome = run_scenario(&cfg).unwrap();
        // 50 steps in chunks of 21: boundaries after steps 21, 42, 50.
        let names: Vec<&String> = outcome
            .files
            .iter()
            .filter(|f| f.starts_with("snapshots/"))
            .collect();
        assert_eq!(names.len(), 3);
        for name in names {
            assert!(dir.path().join(name).exists());
        }
    }

    #[test]
    fn suite_wrapper_honors_the_override_hook() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_config(dir.path());
        cfg.gamma_override = Some(1.05);
        let outcome = run_suite(&cfg).unwrap();
        assert!(!outcome.all_pass);
    }

    #[test]
    fn linear_fit_recovers_slope_and_flags_degenerate_inputs() {
        let points: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, 3.0 + 2.0 * i as f64)).collect();
        let (slope, r2) = linear_fit(&points).unwrap();
        assert!((slope - 2.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
        assert!(linear_fit(&points[..1]).is_none());
        assert!(linear_fit(&[(1.0, 2.0), (1.0, 3.0)]).is_none());
    }

    fn kernels_config(length: usize) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.length = length;
        cfg.timing = TimingMode::Off;
        cfg
    }

    #[test]
    fn gated_shape_stays_bounded_while_lossless_grows() {
        let cfg = kernels_config(300);
        let cmp = compare_kernels(
            &cfg,
            &[ShapeChoice::Exponential, ShapeChoice::HeavyTail],
        )
        .unwrap();
        let expo = &cmp.runs[0];
        let heavy = &cmp.runs[1];
        let envelope = expo.drift_envelope.unwrap();
        assert!(expo.max_drift <= envelope, "{} > {envelope}", expo.max_drift);
        assert!(heavy.norm_slope > 1e-3, "slope {}", heavy.norm_slope);
        assert!(heavy.max_drift > expo.max_drift);
    }

    #[test]
    fn refresh_shape_jumps_at_period_boundaries() {
        let cfg = kernels_config(300);
        let cmp = compare_kernels(&cfg, &[ShapeChoice::BlockRefresh]).unwrap();
        let refresh = &cmp.runs[0];
        assert!(refresh.max_jump_ratio > 10.0, "ratio {}", refresh.max_jump_ratio);
    }

    #[test]
    fn comparison_csv_lists_every_shape() {
        let cfg = kernels_config(50);
        let cmp = compare_kernels(&cfg, &ShapeChoice::all()).unwrap();
        assert_eq!(cmp.runs.len(), 5);
        let mut buf = Vec::new();
        cmp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("shape,t,drift,state_norm\n"));
        assert_eq!(text.lines().count(), 1 + 5 * 50);
        for shape in ShapeChoice::all() {
            assert!(text.contains(shape.name()));
        }
        assert!(compare_kernels(&cfg, &[]).is_err());
    }

    #[test]
    fn spike_runner_matches_the_profile_rows() {
        use crate::kernel::{build_profile, KernelShape};
        let cfg = kernels_config(6);
        let cmp = compare_kernels(&cfg, &[ShapeChoice::SpikeSink]).unwrap();
        let rows = &cmp.runs[0].rows;
        // Reconstruct the prediction at t = 5 from the profile weights.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d_v = cfg.dims.d_v;
        let mut coherent: Vec<f64> = (0..d_v).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let cn = norm2(&coherent);
        for v in coherent.iter_mut() {
            *v /= cn;
        }
        let values: Vec<Vec<f64>> = (0..6)
            .map(|_| {
                let mut j: Vec<f64> = (0..d_v).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let jn = norm2(&j).max(1e-9);
                for v in j.iter_mut() {
                    *v /= jn;
                }
                coherent
                    .iter()
                    .zip(&j)
                    .map(|(c, jv)| 0.8 * c + 0.6 * jv)
                    .collect()
            })
            .collect();
        let profile = build_profile(&KernelShape::spike_sink(1), 6).unwrap();
        let t = 5;
        let mut pred = vec![0.0; d_v];
        for i in 1..=t {
            let w = profile.weight(t, i).unwrap();
            for (p, v) in pred.iter_mut().zip(&values[i - 1]) {
                *p += w * v;
            }
        }
        let i = probe_index(t, cmp.probe_lag);
        let expect = residual_norm(&pred, &values[i - 1]);
        assert!((rows[t - 1].drift - expect).abs() < 1e-12);
    }

    #[test]
    fn kernel_outputs_and_probe_artifacts_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = kernels_config(40);
        cfg.out_dir = dir.path().to_path_buf();
        let cmp = compare_kernels(&cfg, &[ShapeChoice::Exponential]).unwrap();
        let files = finish_kernels(&cmp, &cfg).unwrap();
        for f in &files {
            assert!(dir.path().join(f).exists(), "missing {f}");
        }
    }

    #[test]
    fn probe_reads_snapshots_and_targets_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_config(dir.path());
        cfg.length = 300;
        cfg.export_snapshots = true;
        let outcome = run_scenario(&cfg).unwrap();
        let snapshots: Vec<&String> = outcome
            .files
            .iter()
            .filter(|f| f.starts_with("snapshots/"))
            .collect();
        assert!(snapshots.len() >= 10, "need enough snapshots, got {}", snapshots.len());
        let mut table = String::from("file,target\n");
        for (i, name) in snapshots.iter().enumerate() {
            let base = name.strip_prefix("snapshots/").unwrap();
            table.push_str(&format!("{base},{}.0\n", i));
        }
        let targets = dir.path().join("targets.csv");
        std::fs::write(&targets, table).unwrap();
        let report = probe_snapshots(&dir.path().join("snapshots"), &targets, 1e-3).unwrap();
        assert!(report.r_squared.is_finite());
        assert_eq!(report.coefficients.len(), cfg.dims.d_k);
        let files = finish_probe(&report, &cfg).unwrap();
        for f in files {
            assert!(dir.path().join(&f).exists());
        }
        std::fs::write(&targets, "wrong,header\n").unwrap();
        assert!(probe_snapshots(&dir.path().join("snapshots"), &targets, 1e-3).is_err());
    }
}
