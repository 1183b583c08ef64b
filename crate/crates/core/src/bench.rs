//! Imagination benchmark: seeded models at configurable scale, an equivalence
//! gate, wall-clock timing per generation mode, and CSV or text reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::gaussian;
use crate::io::load_bundle;
use crate::scalar::Scalar;
use crate::stack::ModelConfig;
use crate::tokenizer::Codebook;
use crate::world_model::{
    imagine_rollout, train_forward, Block, GenerationMode, ImaginationTrace, RewardMode, Sampler,
    TokenTrajectory, UniformPolicy, WorldModelBundle, DEFAULT_CONTEXT_LEN,
};

pub const CSV_HEADER: &str = "config,mode,calls,tokens_per_call,wall_ms_mean,wall_ms_std,tok_per_s,speedup";
/// Mode label of `--train-forward` rows.
pub const TRAIN_FORWARD_MODE: &str = "train-forward";
/// Default cap on model parameters.
pub const DEFAULT_MAX_PARAMS: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F64,
    F32,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::InvalidArgument(format!("unknown precision '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub tokens_per_obs: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub layers: usize,
    pub heads: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub blocks_per_chunk: usize,
    /// Independent rollouts timed together.
    pub batch: usize,
    pub modes: Vec<GenerationMode>,
    pub seed: u64,
    pub precision: Precision,
    pub repetitions: usize,
    /// Sampling temperature of timed rollouts; the gate always decodes greedily.
    pub temperature: f64,
    /// Model file replacing the seeded model.
    pub model: Option<PathBuf>,
    pub max_params: usize,
}

impl BenchConfig {
    /// K=64, N=512, d_model=256, d_ffn=1024, L=5, h=4, H=10, B̄=3.
    pub fn paper() -> Self {
        let m = ModelConfig::paper();
        Self {
            tokens_per_obs: m.tokens_per_obs,
            vocab_size: m.vocab_size,
            d_model: m.d_model,
            d_ffn: m.d_ffn,
            layers: m.layers,
            heads: m.heads,
            num_actions: m.num_actions,
            horizon: 10,
            blocks_per_chunk: 3,
            batch: 1,
            modes: GenerationMode::ALL.to_vec(),
            seed: 0,
            precision: Precision::F64,
            repetitions: 5,
            temperature: 0.5,
            model: None,
            max_params: DEFAULT_MAX_PARAMS,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            tokens_per_obs: self.tokens_per_obs,
            vocab_size: self.vocab_size,
            num_actions: self.num_actions,
            ..ModelConfig::paper()
        }
    }

    /// Parameters of the seeded bundle.
    pub fn param_count(&self) -> usize {
        let (d, f, k, n) = (self.d_model, self.d_ffn, self.tokens_per_obs, self.vocab_size);
        let layer = 5 * d * d + 2 * d * f + 6 * d;
        self.layers * layer + n * d + self.num_actions * d + k * d + d * (n + 3 + 2)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        for (name, v) in [
            ("horizon", self.horizon),
            ("blocks per chunk", self.blocks_per_chunk),
            ("batch", self.batch),
            ("repetitions", self.repetitions),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.modes.is_empty() {
            return Err(Error::Config("no generation mode selected".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        let params = self.param_count();
        if params > self.max_params {
            return Err(Error::Config(format!(
                "model has {params} parameters, above the cap of {}",
                self.max_params
            )));
        }
        Ok(())
    }

    /// Short stable identifier of everything except mode selection and repetitions.
    pub fn hash(&self) -> String {
        let key = format!(
            "K{}-N{}-d{}-f{}-L{}-h{}-A{}-H{}-B{}-b{}-s{}-{:?}-T{}-{:?}",
            self.tokens_per_obs,
            self.vocab_size,
            self.d_model,
            self.d_ffn,
            self.layers,
            self.heads,
            self.num_actions,
            self.horizon,
            self.blocks_per_chunk,
            self.batch,
            self.seed,
            self.precision,
            self.temperature,
            self.model,
        );
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in key.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        format!("{:08x}", h >> 32)
    }
}

/// One line of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub config: String,
    pub mode: String,
    /// Sequential world-model calls of one rollout.
    pub calls: usize,
    pub tokens_per_call: f64,
    pub wall_ms_mean: f64,
    pub wall_ms_std: f64,
    pub wall_ms_median: f64,
    /// Imagined tokens (`batch · H · (K+1)`) per second at the median wall time.
    pub tok_per_s: f64,
    /// Median oracle wall time over this mode's median; absent without an oracle row.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, mode: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

/// Mean, sample standard deviation and median.
pub fn summarize(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let m = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 { sorted[m] } else { 0.5 * (sorted[m - 1] + sorted[m]) };
    (mean, var.sqrt(), median)
}

/// A seeded model, its own codebook and a random token context.
pub fn seeded_bundle<T: Scalar>(config: &BenchConfig) -> Result<WorldModelBundle<T>> {
    let mc = config.model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc0de_b00c);
    let codebook = Codebook::new(gaussian(mc.vocab_size, mc.d_model, 1.0, &mut rng))?;
    Ok(WorldModelBundle::<f64>::seeded(mc, Arc::new(codebook), RewardMode::Categorical, config.seed)?.cast())
}

/// Random blocks with in-range tokens.
pub fn random_trajectory(config: &ModelConfig, len: usize, seed: u64) -> TokenTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TokenTrajectory::new(
        (0..len)
            .map(|_| Block {
                obs: (0..config.tokens_per_obs)
                    .map(|_| rng.random_range(0..config.vocab_size as u32))
                    .collect(),
                action: rng.random_range(0..config.num_actions as u32),
                reward: 0.0,
                done: false,
            })
            .collect(),
    )
}

fn load_or_seed<T: Scalar>(config: &BenchConfig) -> Result<WorldModelBundle<T>> {
    match &config.model {
        Some(path) => {
            let b = load_bundle::<f64>(path)?;
            let c = b.config();
            let expected = config.model_config();
            if (c.tokens_per_obs, c.vocab_size, c.d_model, c.layers, c.heads, c.d_ffn, c.num_actions)
                != (
                    expected.tokens_per_obs,
                    expected.vocab_size,
                    expected.d_model,
                    expected.layers,
                    expected.heads,
                    expected.d_ffn,
                    expected.num_actions,
                )
            {
                return Err(Error::Config(format!("model file shape {c:?} differs from the requested configuration")));
            }
            Ok(b.cast())
        }
        None => seeded_bundle(config),
    }
}

/// Adopts the shape stored in a model file.
pub fn apply_model_shape(config: &mut BenchConfig, path: &Path) -> Result<()> {
    let b = load_bundle::<f64>(path)?;
    let c = b.config();
    config.tokens_per_obs = c.tokens_per_obs;
    config.vocab_size = c.vocab_size;
    config.d_model = c.d_model;
    config.d_ffn = c.d_ffn;
    config.layers = c.layers;
    config.heads = c.heads;
    config.num_actions = c.num_actions;
    config.model = Some(path.to_path_buf());
    Ok(())
}

fn check_calls(trace: &ImaginationTrace, mode: GenerationMode, config: &BenchConfig) -> Result<()> {
    let expected = mode.expected_calls(config.horizon, config.tokens_per_obs);
    if trace.sequential_calls != expected {
        return Err(Error::Equivalence(format!(
            "{mode} made {} sequential calls, expected {expected}",
            trace.sequential_calls
        )));
    }
    Ok(())
}

/// Greedy rollouts of every mode from the run's seed must be token-identical,
/// and each must make exactly its closed-form number of calls.
pub fn equivalence_gate<T: Scalar>(bundle: &WorldModelBundle<T>, config: &BenchConfig) -> Result<Vec<ImaginationTrace>> {
    let context = random_trajectory(bundle.config(), DEFAULT_CONTEXT_LEN, config.seed);
    let policy = UniformPolicy { num_actions: bundle.config().num_actions };
    let traces = GenerationMode::ALL
        .iter()
        .map(|&mode| {
            let mut sampler = Sampler::new(0.0, config.seed)?;
            let trace = imagine_rollout(bundle, &context, &policy, config.horizon, mode, &mut sampler)?;
            check_calls(&trace, mode, config)?;
            Ok(trace)
        })
        .collect::<Result<Vec<_>>>()?;
    for (mode, trace) in GenerationMode::ALL.iter().zip(&traces).skip(1) {
        if !trace.same_tokens(&traces[0]) {
            return Err(Error::Equivalence(format!(
                "greedy {mode} rollout differs from {}",
                GenerationMode::PopDefault
            )));
        }
    }
    Ok(traces)
}

/// Runs the gate only.
pub fn verify(config: &BenchConfig) -> Result<()> {
    config.validate()?;
    match config.precision {
        Precision::F64 => equivalence_gate(&load_or_seed::<f64>(config)?, config).map(|_| ()),
        Precision::F32 => equivalence_gate(&load_or_seed::<f32>(config)?, config).map(|_| ()),
    }
}

pub fn run_benchmark(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    match config.precision {
        Precision::F64 => run_typed(&load_or_seed::<f64>(config)?, config),
        Precision::F32 => run_typed(&load_or_seed::<f32>(config)?, config),
    }
}

fn run_typed<T: Scalar>(bundle: &WorldModelBundle<T>, config: &BenchConfig) -> Result<BenchReport> {
    equivalence_gate(bundle, config)?;
    let mc = bundle.config();
    let contexts: Vec<TokenTrajectory> = (0..config.batch)
        .map(|i| random_trajectory(mc, DEFAULT_CONTEXT_LEN, config.seed.wrapping_add(i as u64)))
        .collect();
    let policy = UniformPolicy { num_actions: mc.num_actions };
    let imagined = (config.batch * config.horizon * mc.block_len()) as f64;

    let mut rows = Vec::with_capacity(config.modes.len());
    for &mode in &config.modes {
        let batch = |rep: u64| -> Result<Vec<ImaginationTrace>> {
            contexts
                .par_iter()
                .enumerate()
                .map(|(i, ctx)| {
                    let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(rep.wrapping_mul(7919)).wrapping_add(i as u64);
                    let mut sampler = Sampler::new(config.temperature, seed)?;
                    imagine_rollout(bundle, ctx, &policy, config.horizon, mode, &mut sampler)
                })
                .collect()
        };
        batch(u64::MAX)?;
        let mut walls = Vec::with_capacity(config.repetitions);
        let mut traces = Vec::new();
        for rep in 0..config.repetitions {
            let t0 = Instant::now();
            traces = batch(rep as u64)?;
            walls.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        for trace in &traces {
            check_calls(trace, mode, config)?;
        }
        let trace = &traces[0];
        let (mean, std, median) = summarize(&walls);
        rows.push(BenchRow {
            config: config.hash(),
            mode: mode.name().to_string(),
            calls: trace.sequential_calls,
            tokens_per_call: trace.total_tokens() as f64 / trace.sequential_calls as f64,
            wall_ms_mean: mean,
            wall_ms_std: std,
            wall_ms_median: median,
            tok_per_s: imagined / (median / 1e3),
            speedup: None,
        });
    }
    let oracle = rows
        .iter()
        .find(|r| r.mode == GenerationMode::NoPopOracle.name())
        .map(|r| r.wall_ms_median);
    if let Some(o) = oracle {
        for r in &mut rows {
            r.speedup = Some(o / r.wall_ms_median);
        }
    }
    Ok(BenchReport { rows })
}

/// Times the POP chunkwise training forward over a random `H`-block segment.
pub fn run_train_forward(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    match config.precision {
        Precision::F64 => train_typed(&load_or_seed::<f64>(config)?, config),
        Precision::F32 => train_typed(&load_or_seed::<f32>(config)?, config),
    }
}

fn train_typed<T: Scalar>(bundle: &WorldModelBundle<T>, config: &BenchConfig) -> Result<BenchReport> {
    let mc = bundle.config();
    let segments: Vec<TokenTrajectory> = (0..config.batch)
        .map(|i| random_trajectory(mc, config.horizon, config.seed.wrapping_add(i as u64)))
        .collect();
    let run = || -> Result<()> {
        segments
            .par_iter()
            .map(|s| train_forward(bundle, s, config.blocks_per_chunk).map(|_| ()))
            .collect()
    };
    run()?;
    let mut walls = Vec::with_capacity(config.repetitions);
    for _ in 0..config.repetitions {
        let t0 = Instant::now();
        run()?;
        walls.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let (mean, std, median) = summarize(&walls);
    let chunks = config.horizon.div_ceil(config.blocks_per_chunk);
    let tokens = config.horizon * mc.block_len();
    Ok(BenchReport {
        rows: vec![BenchRow {
            config: config.hash(),
            mode: TRAIN_FORWARD_MODE.to_string(),
            calls: chunks,
            tokens_per_call: tokens as f64 / chunks as f64,
            wall_ms_mean: mean,
            wall_ms_std: std,
            wall_ms_median: median,
            tok_per_s: (config.batch * tokens) as f64 / (median / 1e3),
            speedup: None,
        }],
    })
}

/// Six significant digits, printed in shortest form.
fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    rounded.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "text" => Ok(ReportFormat::Text),
            other => Err(Error::InvalidArgument(format!("unknown report format '{other}'"))),
        }
    }
}

pub fn render_report(report: &BenchReport, format: ReportFormat) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::Empty("benchmark report"));
    }
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in &report.rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.config,
                    r.mode,
                    r.calls,
                    sig6(r.tokens_per_call),
                    sig6(r.wall_ms_mean),
                    sig6(r.wall_ms_std),
                    sig6(r.tok_per_s),
                    r.speedup.map(sig6).unwrap_or_default(),
                );
            }
        }
        ReportFormat::Text => {
            let _ = writeln!(
                out,
                "{:<10} {:<14} {:>6} {:>10} {:>12} {:>10} {:>12} {:>12} {:>8}",
                "config", "mode", "calls", "tok/call", "wall_ms", "std", "median_ms", "tok/s", "speedup"
            );
            for r in &report.rows {
                let _ = writeln!(
                    out,
                    "{:<10} {:<14} {:>6} {:>10.2} {:>12.3} {:>10.3} {:>12.3} {:>12.1} {:>8}",
                    r.config,
                    r.mode,
                    r.calls,
                    r.tokens_per_call,
                    r.wall_ms_mean,
                    r.wall_ms_std,
                    r.wall_ms_median,
                    r.tok_per_s,
                    r.speedup.map(|s| format!("{s:.2}x")).unwrap_or_else(|| "-".into()),
                );
            }
        }
    }
    Ok(out)
}

pub fn emit_report(report: &BenchReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let text = render_report(report, format)?;
    fs::write(path, text)?;
    Ok(())
}

/// Reads back a CSV report. The median column is not part of the CSV and is
/// filled with the mean.
pub fn parse_csv_report(text: &str) -> Result<BenchReport> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("report does not start with the expected CSV header".into()));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Malformed(format!("bad number '{s}'"))) };
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Malformed(format!("expected 8 fields, got {}", f.len())));
            }
            let mean = num(f[4])?;
            Ok(BenchRow {
                config: f[0].to_string(),
                mode: f[1].to_string(),
                calls: f[2].parse().map_err(|_| Error::Malformed(format!("bad call count '{}'", f[2])))?,
                tokens_per_call: num(f[3])?,
                wall_ms_mean: mean,
                wall_ms_std: num(f[5])?,
                wall_ms_median: mean,
                tok_per_s: num(f[6])?,
                speedup: if f[7].is_empty() { None } else { Some(num(f[7])?) },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport { rows })
}
