//! Token-based world model: embeddings, prediction heads, the POP training
//! forward and imagination with exact sequential-call accounting.
//!
//! A rollout starts from a context trajectory. Every block but the last is
//! summarized into recurrent states; the last block's observation is the first
//! observation the policy sees. Each imagination step then takes the current
//! observation and the sampled action as `prev_block` and produces that
//! block's reward and termination plus the next observation. So `H` steps
//! yield `H` complete blocks and one trailing observation.
//!
//! Within a step randomness is consumed in a fixed order in every mode: the
//! action, then reward, then termination, then observation slots `1..=K`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{argmax, sample_from_probs};
use crate::error::{check_dim, Error, Result};
use crate::init::gaussian;
use crate::pop::{pop_chunkwise_forward, pop_suffix_forward, PredictionTokens};
use crate::scalar::Scalar;
use crate::stack::{
    stack_forward, stack_forward_chunkwise, LayerStates, ModelConfig, RetentionMode, StackParams,
    INIT_STD,
};
use crate::tokenizer::Codebook;

/// Blocks per chunk used unless a caller asks otherwise.
pub const DEFAULT_BLOCKS_PER_CHUNK: usize = 3;
/// Context blocks handed to imagination.
pub const DEFAULT_CONTEXT_LEN: usize = 2;
/// Logits are clamped to `[-LOGIT_CAP, LOGIT_CAP]` before any softmax.
pub const LOGIT_CAP: f64 = 30.0;
/// Reward classes of the categorical head, by class index.
pub const REWARD_CLASSES: [f64; 3] = [-1.0, 0.0, 1.0];

/// One observation-action step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub obs: Vec<u32>,
    pub action: u32,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenTrajectory {
    pub blocks: Vec<Block>,
}

impl TokenTrajectory {
    pub fn new(blocks: Vec<Block>) -> Self {
        Self { blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Sub-trajectory of `len` blocks starting at `start`.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::OutOfRange { index: start + len, max: self.len() });
        }
        Ok(Self::new(self.blocks[start..start + len].to_vec()))
    }

    /// Token ranges and block shape; termination only on the final block.
    pub fn validate(&self, tokens_per_obs: usize, vocab_size: usize, num_actions: usize) -> Result<()> {
        for (b, block) in self.blocks.iter().enumerate() {
            check_block(block, b, tokens_per_obs, vocab_size, num_actions)?;
            if block.done && b + 1 != self.len() {
                return Err(Error::InvalidEpisode(format!("termination flag on block {b} before the end")));
            }
        }
        Ok(())
    }
}

fn check_block(block: &Block, b: usize, k: usize, n: usize, a: usize) -> Result<()> {
    if block.obs.len() != k {
        return Err(Error::IncompleteBlock { block: b, expected: k, actual: block.obs.len() });
    }
    if let Some((slot, &tok)) = block.obs.iter().enumerate().find(|(_, &t)| t as usize >= n) {
        return Err(Error::Vocabulary {
            kind: "observation",
            token: tok,
            size: n,
            position: format!("block {b} slot {slot}"),
        });
    }
    if block.action as usize >= a {
        return Err(Error::Vocabulary {
            kind: "action",
            token: block.action,
            size: a,
            position: format!("block {b} action"),
        });
    }
    Ok(())
}

/// Parameterization of the reward head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardMode {
    /// Three classes over the reward sign.
    Categorical,
    /// One regression output.
    Mse,
}

impl RewardMode {
    pub fn output_dim(self) -> usize {
        match self {
            RewardMode::Categorical => REWARD_CLASSES.len(),
            RewardMode::Mse => 1,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            RewardMode::Categorical => 0,
            RewardMode::Mse => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(RewardMode::Categorical),
            1 => Ok(RewardMode::Mse),
            other => Err(Error::InvalidArgument(format!("unknown reward mode code {other}"))),
        }
    }
}

impl FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "categorical" => Ok(RewardMode::Categorical),
            "mse" => Ok(RewardMode::Mse),
            other => Err(Error::InvalidArgument(format!("unknown reward mode '{other}'"))),
        }
    }
}

/// Class index of a reward's sign.
pub fn reward_class(r: f64) -> usize {
    if r < 0.0 {
        0
    } else if r > 0.0 {
        2
    } else {
        1
    }
}

/// How imagination turns states into next observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GenerationMode {
    /// One call on the previous block, one on the prediction tokens.
    PopDefault,
    /// A single call on `[previous block ‖ prediction tokens]`.
    PopCombined,
    /// `K` sequential calls per step, one observation slot each.
    NoPopOracle,
}

impl GenerationMode {
    pub const ALL: [GenerationMode; 3] =
        [GenerationMode::PopDefault, GenerationMode::PopCombined, GenerationMode::NoPopOracle];

    pub fn name(self) -> &'static str {
        match self {
            GenerationMode::PopDefault => "pop-default",
            GenerationMode::PopCombined => "pop-combined",
            GenerationMode::NoPopOracle => "no-pop-oracle",
        }
    }

    /// Sequential world-model calls for a rollout of `horizon` steps.
    pub fn expected_calls(self, horizon: usize, tokens_per_obs: usize) -> usize {
        match self {
            GenerationMode::PopDefault => 2 * horizon,
            GenerationMode::PopCombined => horizon,
            GenerationMode::NoPopOracle => tokens_per_obs * horizon,
        }
    }
}

impl fmt::Display for GenerationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GenerationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GenerationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown generation mode '{s}'")))
    }
}

/// Everything the world model needs at inference time. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldModelBundle<T> {
    stack: StackParams<T>,
    codebook: Arc<Codebook>,
    embed_adapter: Option<Array2<T>>,
    action_table: Array2<T>,
    pred_tokens: PredictionTokens<T>,
    obs_head: Array2<T>,
    reward_head: Array2<T>,
    done_head: Array2<T>,
    reward_mode: RewardMode,
    /// Codebook rows mapped through the adapter, `N × d_model`.
    obs_table: Array2<T>,
}

/// Raw parameters of a bundle, in serialization order.
#[derive(Debug, Clone)]
pub struct BundleParts<T> {
    pub stack: StackParams<T>,
    pub codebook: Arc<Codebook>,
    pub embed_adapter: Option<Array2<T>>,
    pub action_table: Array2<T>,
    pub pred_tokens: PredictionTokens<T>,
    pub obs_head: Array2<T>,
    pub reward_head: Array2<T>,
    pub done_head: Array2<T>,
    pub reward_mode: RewardMode,
}

impl<T: Scalar> WorldModelBundle<T> {
    pub fn new(parts: BundleParts<T>) -> Result<Self> {
        let c = parts.stack.config;
        let d = c.d_model;
        check_dim("codebook size", c.vocab_size, parts.codebook.size())?;
        match &parts.embed_adapter {
            Some(a) => {
                check_dim("adapter rows", parts.codebook.dim(), a.nrows())?;
                check_dim("adapter cols", d, a.ncols())?;
            }
            None => check_dim("codebook width (no adapter)", d, parts.codebook.dim())?,
        }
        check_dim("action table rows", c.num_actions, parts.action_table.nrows())?;
        check_dim("action table cols", d, parts.action_table.ncols())?;
        check_dim("prediction tokens", c.tokens_per_obs, parts.pred_tokens.count())?;
        check_dim("prediction token width", d, parts.pred_tokens.embeddings.ncols())?;
        check_dim("obs head rows", d, parts.obs_head.nrows())?;
        check_dim("obs head cols", c.vocab_size, parts.obs_head.ncols())?;
        check_dim("reward head rows", d, parts.reward_head.nrows())?;
        check_dim("reward head cols", parts.reward_mode.output_dim(), parts.reward_head.ncols())?;
        check_dim("done head rows", d, parts.done_head.nrows())?;
        check_dim("done head cols", 2, parts.done_head.ncols())?;
        let raw = parts.codebook.vectors().mapv(T::from_f64);
        let obs_table = match &parts.embed_adapter {
            Some(a) => raw.dot(a),
            None => raw,
        };
        Ok(Self {
            stack: parts.stack,
            codebook: parts.codebook,
            embed_adapter: parts.embed_adapter,
            action_table: parts.action_table,
            pred_tokens: parts.pred_tokens,
            obs_head: parts.obs_head,
            reward_head: parts.reward_head,
            done_head: parts.done_head,
            reward_mode: parts.reward_mode,
            obs_table,
        })
    }

    /// Seeded Gaussian parameters around a shared codebook. The adapter is
    /// omitted when the codebook width already equals `d_model`.
    pub fn seeded(config: ModelConfig, codebook: Arc<Codebook>, reward_mode: RewardMode, seed: u64) -> Result<Self> {
        let stack = StackParams::seeded(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        let d = config.d_model;
        let embed_adapter = (codebook.dim() != d).then(|| {
            gaussian(codebook.dim(), d, 1.0 / (codebook.dim() as f64).sqrt(), &mut rng)
        });
        Self::new(BundleParts {
            stack,
            embed_adapter,
            action_table: gaussian(config.num_actions, d, INIT_STD, &mut rng),
            pred_tokens: PredictionTokens::new(gaussian(config.tokens_per_obs, d, INIT_STD, &mut rng))?,
            obs_head: gaussian(d, config.vocab_size, INIT_STD, &mut rng),
            reward_head: gaussian(d, reward_mode.output_dim(), INIT_STD, &mut rng),
            done_head: gaussian(d, 2, INIT_STD, &mut rng),
            reward_mode,
            codebook,
        })
    }

    pub fn into_parts(self) -> BundleParts<T> {
        BundleParts {
            stack: self.stack,
            codebook: self.codebook,
            embed_adapter: self.embed_adapter,
            action_table: self.action_table,
            pred_tokens: self.pred_tokens,
            obs_head: self.obs_head,
            reward_head: self.reward_head,
            done_head: self.done_head,
            reward_mode: self.reward_mode,
        }
    }

    /// Same parameters in another precision; the codebook stays shared.
    pub fn cast<U: Scalar>(&self) -> WorldModelBundle<U> {
        let c = |a: &Array2<T>| a.mapv(|x| U::from_f64(x.to_f64()));
        WorldModelBundle::new(BundleParts {
            stack: self.stack.cast(),
            codebook: Arc::clone(&self.codebook),
            embed_adapter: self.embed_adapter.as_ref().map(c),
            action_table: c(&self.action_table),
            pred_tokens: PredictionTokens { embeddings: c(&self.pred_tokens.embeddings) },
            obs_head: c(&self.obs_head),
            reward_head: c(&self.reward_head),
            done_head: c(&self.done_head),
            reward_mode: self.reward_mode,
        })
        .expect("cast preserves shapes")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.stack.config
    }
    pub fn stack(&self) -> &StackParams<T> {
        &self.stack
    }
    pub fn codebook(&self) -> &Arc<Codebook> {
        &self.codebook
    }
    pub fn embed_adapter(&self) -> Option<&Array2<T>> {
        self.embed_adapter.as_ref()
    }
    pub fn action_table(&self) -> &Array2<T> {
        &self.action_table
    }
    pub fn pred_tokens(&self) -> &PredictionTokens<T> {
        &self.pred_tokens
    }
    pub fn obs_head(&self) -> &Array2<T> {
        &self.obs_head
    }
    pub fn reward_head(&self) -> &Array2<T> {
        &self.reward_head
    }
    pub fn done_head(&self) -> &Array2<T> {
        &self.done_head
    }
    pub fn reward_mode(&self) -> RewardMode {
        self.reward_mode
    }

    fn block_len(&self) -> usize {
        self.stack.config.block_len()
    }

    fn obs_rows(&self, tokens: &[u32]) -> Array2<T> {
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        self.obs_table.select(Axis(0), &idx)
    }

    fn action_row(&self, action: u32) -> ArrayView2<'_, T> {
        let a = action as usize;
        self.action_table.slice(s![a..a + 1, ..])
    }

    /// `K + 1` rows: the observation's code vectors (through the adapter), then the action.
    pub fn embed_block(&self, obs: &[u32], action: u32) -> Result<Array2<T>> {
        let c = &self.stack.config;
        let block = Block { obs: obs.to_vec(), action, reward: 0.0, done: false };
        check_block(&block, 0, c.tokens_per_obs, c.vocab_size, c.num_actions)?;
        Ok(self.embed_block_unchecked(obs, action))
    }

    fn embed_block_unchecked(&self, obs: &[u32], action: u32) -> Array2<T> {
        concatenate(Axis(0), &[self.obs_rows(obs).view(), self.action_row(action)]).expect("same width")
    }

    /// Block embeddings grouped into chunks of at most `blocks_per_chunk` blocks.
    pub fn embed_trajectory(&self, traj: &TokenTrajectory, blocks_per_chunk: usize) -> Result<Vec<Array2<T>>> {
        if blocks_per_chunk == 0 {
            return Err(Error::InvalidArgument("blocks per chunk must be positive".into()));
        }
        let c = &self.stack.config;
        for (b, block) in traj.blocks.iter().enumerate() {
            check_block(block, b, c.tokens_per_obs, c.vocab_size, c.num_actions)?;
        }
        Ok(traj
            .blocks
            .chunks(blocks_per_chunk)
            .map(|group| {
                let rows: Vec<Array2<T>> =
                    group.iter().map(|b| self.embed_block_unchecked(&b.obs, b.action)).collect();
                let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
                concatenate(Axis(0), &views).expect("same width")
            })
            .collect())
    }

    pub fn obs_logits(&self, outputs: ArrayView2<'_, T>) -> Array2<T> {
        outputs.dot(&self.obs_head)
    }

    pub fn reward_outputs(&self, tails: ArrayView2<'_, T>) -> Array2<T> {
        tails.dot(&self.reward_head)
    }

    pub fn done_logits(&self, tails: ArrayView2<'_, T>) -> Array2<T> {
        tails.dot(&self.done_head)
    }
}

/// Training-mode outputs over a segment of `H` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutputs<T> {
    /// `H × K × N`; entry `t` predicts block `t`'s observation from blocks `< t`.
    pub obs_logits: Array3<T>,
    /// `H × R`, read at each block's action position.
    pub reward_out: Array2<T>,
    /// `H × 2`.
    pub done_logits: Array2<T>,
    pub states: LayerStates<T>,
}

/// POP chunkwise forward over the whole segment from zero states.
pub fn train_forward<T: Scalar>(
    bundle: &WorldModelBundle<T>,
    segment: &TokenTrajectory,
    blocks_per_chunk: usize,
) -> Result<TrainOutputs<T>> {
    if segment.is_empty() {
        return Err(Error::Empty("training segment"));
    }
    let c = bundle.stack.config;
    let chunks = bundle.embed_trajectory(segment, blocks_per_chunk)?;
    let h = segment.len();
    let mut obs_logits = Array3::zeros((h, c.tokens_per_obs, c.vocab_size));
    let mut tails = Array2::zeros((h, c.d_model));
    let mut states = bundle.stack.zero_states();
    let mut block = 0;
    for chunk in &chunks {
        let out = pop_chunkwise_forward(&bundle.stack, chunk.view(), &bundle.pred_tokens, &states, block)?;
        for (j, bank) in out.obs_outputs.iter().enumerate() {
            obs_logits.index_axis_mut(Axis(0), block + j).assign(&bundle.obs_logits(bank.view()));
        }
        tails.slice_mut(s![block..block + out.num_blocks(), ..]).assign(&out.tail_outputs);
        block += out.num_blocks();
        states = out.states;
    }
    Ok(TrainOutputs {
        obs_logits,
        reward_out: bundle.reward_outputs(tails.view()),
        done_logits: bundle.done_logits(tails.view()),
        states,
    })
}

/// Mean losses of a training forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WmLoss {
    pub obs_ce: f64,
    pub reward_loss: f64,
    pub done_ce: f64,
}

fn capped<T: Scalar>(x: T) -> f64 {
    x.to_f64().clamp(-LOGIT_CAP, LOGIT_CAP)
}

/// Cross-entropy of one logit row against `target`, after capping.
pub fn cross_entropy<T: Scalar>(logits: ArrayView1<'_, T>, target: usize) -> f64 {
    let l: Vec<f64> = logits.iter().map(|&x| capped(x)).collect();
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + l.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - l[target]
}

pub fn wm_loss<T: Scalar>(outputs: &TrainOutputs<T>, targets: &TokenTrajectory, mode: RewardMode) -> Result<WmLoss> {
    let (h, k, n) = outputs.obs_logits.dim();
    check_dim("target blocks", h, targets.len())?;
    check_dim("reward outputs", mode.output_dim(), outputs.reward_out.ncols())?;
    check_dim("reward rows", h, outputs.reward_out.nrows())?;
    check_dim("done rows", h, outputs.done_logits.nrows())?;
    check_dim("done classes", 2, outputs.done_logits.ncols())?;
    if h == 0 || k == 0 {
        return Err(Error::Empty("loss targets"));
    }
    let mut obs = 0.0;
    let mut reward = 0.0;
    let mut done = 0.0;
    for (t, block) in targets.blocks.iter().enumerate() {
        check_dim("target obs tokens", k, block.obs.len())?;
        for (slot, &z) in block.obs.iter().enumerate() {
            if z as usize >= n {
                return Err(Error::Vocabulary {
                    kind: "observation",
                    token: z,
                    size: n,
                    position: format!("block {t} slot {slot}"),
                });
            }
            obs += cross_entropy(outputs.obs_logits.slice(s![t, slot, ..]), z as usize);
        }
        reward += match mode {
            RewardMode::Categorical => cross_entropy(outputs.reward_out.row(t), reward_class(block.reward)),
            RewardMode::Mse => (outputs.reward_out[[t, 0]].to_f64() - block.reward).powi(2),
        };
        done += cross_entropy(outputs.done_logits.row(t), block.done as usize);
    }
    Ok(WmLoss {
        obs_ce: obs / (h * k) as f64,
        reward_loss: reward / h as f64,
        done_ce: done / h as f64,
    })
}

/// Recurrent states plus the number of blocks they summarize.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextState<T> {
    pub states: LayerStates<T>,
    pub blocks: usize,
}

impl<T: Scalar> ContextState<T> {
    pub fn empty(bundle: &WorldModelBundle<T>) -> Self {
        Self { states: bundle.stack.zero_states(), blocks: 0 }
    }
}

/// Chunkwise forward of a context from zero states.
pub fn summarize_context<T: Scalar>(bundle: &WorldModelBundle<T>, context: &TokenTrajectory) -> Result<ContextState<T>> {
    if context.is_empty() {
        return Err(Error::Empty("context"));
    }
    let chunks = bundle.embed_trajectory(context, DEFAULT_BLOCKS_PER_CHUNK)?;
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    let (_, states) = stack_forward_chunkwise(&bundle.stack, &views, &bundle.stack.zero_states(), 0)?;
    Ok(ContextState { states, blocks: context.len() })
}

/// Temperature sampling with a seeded stream. Temperature 0 is greedy and
/// draws nothing from the stream.
#[derive(Debug, Clone)]
pub struct Sampler {
    pub temperature: f64,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(temperature: f64, seed: u64) -> Result<Self> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature {temperature} must be finite and >= 0")));
        }
        Ok(Self { temperature, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn greedy() -> Self {
        Self { temperature: 0.0, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn sample_logits<T: Scalar>(&mut self, logits: ArrayView1<'_, T>) -> usize {
        let l: Vec<f64> = logits.iter().map(|&x| capped(x)).collect();
        if self.temperature == 0.0 {
            return argmax(&l);
        }
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let probs: Vec<f64> = l.iter().map(|x| ((x - max) / self.temperature).exp()).collect();
        sample_from_probs(&probs, &mut self.rng)
    }

    /// One draw from an explicit distribution (always consumes a variate).
    pub fn sample_probs(&mut self, probs: &[f64]) -> usize {
        sample_from_probs(probs, &mut self.rng)
    }
}

/// Outcome of one imagination step.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub next_obs: Vec<u32>,
    /// `K × N` logits behind `next_obs`.
    pub obs_logits: Array2<T>,
    /// Reward and termination of `prev_block`, when one was given.
    pub reward: Option<f64>,
    pub done: Option<bool>,
    pub reward_out: Option<Array1<T>>,
    pub done_logits: Option<Array1<T>>,
    pub state: ContextState<T>,
    /// Tokens processed by each sequential call.
    pub call_costs: Vec<usize>,
}

impl<T> StepOutput<T> {
    pub fn calls_made(&self) -> usize {
        self.call_costs.len()
    }
}

fn sample_reward_done<T: Scalar>(
    bundle: &WorldModelBundle<T>,
    tail: ArrayView2<'_, T>,
    sampler: &mut Sampler,
) -> (f64, bool, Array1<T>, Array1<T>) {
    let reward_out = bundle.reward_outputs(tail).row(0).to_owned();
    let done_logits = bundle.done_logits(tail).row(0).to_owned();
    let reward = match bundle.reward_mode {
        RewardMode::Categorical => REWARD_CLASSES[sampler.sample_logits(reward_out.view())],
        RewardMode::Mse => reward_out[0].to_f64(),
    };
    let done = sampler.sample_logits(done_logits.view()) == 1;
    (reward, done, reward_out, done_logits)
}

fn sample_obs<T: Scalar>(logits: &Array2<T>, sampler: &mut Sampler) -> Vec<u32> {
    logits.rows().into_iter().map(|row| sampler.sample_logits(row) as u32).collect()
}

/// One imagination step from `state`.
///
/// With `prev_block` the block is consumed first (its action-position output
/// gives reward and termination); the prediction tokens then yield the next
/// observation. Without it only the prediction tokens are run.
pub fn imagine_step<T: Scalar>(
    bundle: &WorldModelBundle<T>,
    state: &ContextState<T>,
    prev_block: Option<(&[u32], u32)>,
    mode: GenerationMode,
    sampler: &mut Sampler,
) -> Result<StepOutput<T>> {
    let k = bundle.stack.config.tokens_per_obs;
    let block_len = bundle.block_len();
    if mode == GenerationMode::NoPopOracle {
        return Err(Error::InvalidArgument(
            "no-pop-oracle generates token by token; use imagine_rollout".into(),
        ));
    }
    let Some((obs, action)) = prev_block else {
        let (out, _) = stack_forward(
            &bundle.stack,
            bundle.pred_tokens.embeddings.view(),
            &state.states,
            state.blocks * block_len,
            RetentionMode::Chunkwise,
        )?;
        let obs_logits = bundle.obs_logits(out.view());
        return Ok(StepOutput {
            next_obs: sample_obs(&obs_logits, sampler),
            obs_logits,
            reward: None,
            done: None,
            reward_out: None,
            done_logits: None,
            state: state.clone(),
            call_costs: vec![k],
        });
    };
    let x = bundle.embed_block(obs, action)?;
    let (block_out, pred_out, states, costs) = match mode {
        GenerationMode::PopDefault => {
            let offset = state.blocks * block_len;
            let (b, next) = stack_forward(&bundle.stack, x.view(), &state.states, offset, RetentionMode::Chunkwise)?;
            let (p, _) = stack_forward(
                &bundle.stack,
                bundle.pred_tokens.embeddings.view(),
                &next,
                offset + block_len,
                RetentionMode::Chunkwise,
            )?;
            (b, p, next, vec![block_len, k])
        }
        GenerationMode::PopCombined => {
            let out = pop_suffix_forward(&bundle.stack, x.view(), &bundle.pred_tokens, &state.states, state.blocks)?;
            (out.block, out.predictions, out.states, vec![block_len + k])
        }
        GenerationMode::NoPopOracle => unreachable!("rejected above"),
    };
    let (reward, done, reward_out, done_logits) =
        sample_reward_done(bundle, block_out.slice(s![k..k + 1, ..]), sampler);
    let obs_logits = bundle.obs_logits(pred_out.view());
    Ok(StepOutput {
        next_obs: sample_obs(&obs_logits, sampler),
        obs_logits,
        reward: Some(reward),
        done: Some(done),
        reward_out: Some(reward_out),
        done_logits: Some(done_logits),
        state: ContextState { states, blocks: state.blocks + 1 },
        call_costs: costs,
    })
}

/// A policy maps the current observation and the action history to a
/// distribution over the action set.
pub trait Policy: Sync {
    fn action_distribution(&self, obs: &[u32], history: &[u32]) -> Vec<f64>;
}

impl<F> Policy for F
where
    F: Fn(&[u32], &[u32]) -> Vec<f64> + Sync,
{
    fn action_distribution(&self, obs: &[u32], history: &[u32]) -> Vec<f64> {
        self(obs, history)
    }
}

/// Equal probability on every action.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub num_actions: usize,
}

impl Policy for UniformPolicy {
    fn action_distribution(&self, _obs: &[u32], _history: &[u32]) -> Vec<f64> {
        vec![1.0 / self.num_actions as f64; self.num_actions]
    }
}

fn draw_action(policy: &dyn Policy, obs: &[u32], history: &[u32], num_actions: usize, sampler: &mut Sampler) -> Result<u32> {
    let probs = policy.action_distribution(obs, history);
    if probs.len() != num_actions {
        return Err(Error::InvalidPolicy(format!(
            "distribution has {} entries for {num_actions} actions",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidPolicy("negative or non-finite probability".into()));
    }
    let mass: f64 = probs.iter().sum();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidPolicy(format!("probabilities sum to {mass}")));
    }
    Ok(sampler.sample_probs(&probs) as u32)
}

/// An imagined rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImaginationTrace {
    /// `H` blocks; block `t` holds the observation the policy acted on.
    pub blocks: Vec<Block>,
    /// Observation following the last block.
    pub final_obs: Vec<u32>,
    pub sequential_calls: usize,
    pub call_costs: Vec<usize>,
}

impl ImaginationTrace {
    /// Same observations, actions, termination flags and reward classes.
    pub fn same_tokens(&self, other: &Self) -> bool {
        self.final_obs == other.final_obs
            && self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
                a.obs == b.obs && a.action == b.action && a.done == b.done && reward_class(a.reward) == reward_class(b.reward)
            })
    }

    pub fn total_tokens(&self) -> usize {
        self.call_costs.iter().sum()
    }
}

/// Runs `horizon` imagination steps from `context` in `mode`.
pub fn imagine_rollout<T: Scalar>(
    bundle: &WorldModelBundle<T>,
    context: &TokenTrajectory,
    policy: &dyn Policy,
    horizon: usize,
    mode: GenerationMode,
    sampler: &mut Sampler,
) -> Result<ImaginationTrace> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if context.is_empty() {
        return Err(Error::Empty("context"));
    }
    let c = bundle.stack.config;
    for (b, block) in context.blocks.iter().enumerate() {
        check_block(block, b, c.tokens_per_obs, c.vocab_size, c.num_actions)?;
    }
    let c_len = context.len();
    let start = if c_len > 1 {
        summarize_context(bundle, &context.segment(0, c_len - 1)?)?
    } else {
        ContextState::empty(bundle)
    };
    let mut history: Vec<u32> = context.blocks[..c_len - 1].iter().map(|b| b.action).collect();
    let first_obs = context.blocks[c_len - 1].obs.clone();
    if mode == GenerationMode::NoPopOracle {
        return oracle_rollout(bundle, start, first_obs, history, policy, horizon, sampler);
    }
    let mut state = start;
    let mut obs = first_obs;
    let mut blocks = Vec::with_capacity(horizon);
    let mut costs = Vec::with_capacity(mode.expected_calls(horizon, c.tokens_per_obs));
    for _ in 0..horizon {
        let action = draw_action(policy, &obs, &history, c.num_actions, sampler)?;
        history.push(action);
        let out = imagine_step(bundle, &state, Some((&obs, action)), mode, sampler)?;
        costs.extend_from_slice(&out.call_costs);
        blocks.push(Block {
            obs: std::mem::replace(&mut obs, out.next_obs),
            action,
            reward: out.reward.expect("block was given"),
            done: out.done.expect("block was given"),
        });
        state = out.state;
    }
    Ok(ImaginationTrace { blocks, final_obs: obs, sequential_calls: costs.len(), call_costs: costs })
}

/// Token-by-token generation with one sequential call per observation slot.
///
/// Two recurrent streams are kept. The main stream ingests real tokens in
/// order: call 1 of a step consumes whatever of the previous block is still
/// pending (the whole block on the first step, afterwards its last
/// observation token and the action) and call `k > 1` ingests the token
/// sampled in call `k - 1`. The scratch stream forks from the main stream at
/// the block boundary and advances by one prediction token per call. Both
/// streams use exactly the positions of the batched POP forward, so the
/// sampled distribution is the same; only the schedule is sequential.
fn oracle_rollout<T: Scalar>(
    bundle: &WorldModelBundle<T>,
    start: ContextState<T>,
    first_obs: Vec<u32>,
    mut history: Vec<u32>,
    policy: &dyn Policy,
    horizon: usize,
    sampler: &mut Sampler,
) -> Result<ImaginationTrace> {
    let c = bundle.stack.config;
    let k = c.tokens_per_obs;
    let block_len = c.block_len();
    let stack = &bundle.stack;
    let pred = &bundle.pred_tokens.embeddings;

    let mut main = start.states;
    let mut main_pos = start.blocks * block_len;
    let mut obs = first_obs;
    let mut pending = bundle.obs_rows(&obs);
    let mut blocks = Vec::with_capacity(horizon);
    let mut costs = Vec::with_capacity(k * horizon);
    for _ in 0..horizon {
        let action = draw_action(policy, &obs, &history, c.num_actions, sampler)?;
        history.push(action);
        let block_in = concatenate(Axis(0), &[pending.view(), bundle.action_row(action)]).expect("same width");
        let (out, next) = stack_forward(stack, block_in.view(), &main, main_pos, RetentionMode::Chunkwise)?;
        main = next;
        main_pos += block_in.nrows();
        let last = out.nrows() - 1;
        let (reward, done, _, _) = sample_reward_done(bundle, out.slice(s![last..last + 1, ..]), sampler);

        let slot0 = main_pos;
        let mut scratch = main.clone();
        let mut next_obs = Vec::with_capacity(k);
        for slot in 0..k {
            let mut cost = 1;
            if slot == 0 {
                cost += block_in.nrows();
            } else {
                let prev = bundle.obs_rows(&next_obs[slot - 1..slot]);
                main = stack_forward(stack, prev.view(), &main, main_pos, RetentionMode::Recurrent)?.1;
                main_pos += 1;
                cost += 1;
            }
            let (p, s_next) = stack_forward(
                stack,
                pred.slice(s![slot..slot + 1, ..]),
                &scratch,
                slot0 + slot,
                RetentionMode::Recurrent,
            )?;
            scratch = s_next;
            let logits = bundle.obs_logits(p.view());
            next_obs.push(sampler.sample_logits(logits.row(0)) as u32);
            costs.push(cost);
        }
        pending = bundle.obs_rows(&next_obs[k - 1..]);
        blocks.push(Block {
            obs: std::mem::replace(&mut obs, next_obs),
            action,
            reward,
            done,
        });
    }
    Ok(ImaginationTrace { blocks, final_obs: obs, sequential_calls: costs.len(), call_costs: costs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pop::oracle_blockwise_forward;
    use rand::Rng;

    pub(crate) fn tiny_config(k: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ffn: 16,
            tokens_per_obs: k,
            vocab_size: 12,
            num_actions: 3,
            ln_eps: 1e-6,
            dropout: 0.0,
        }
    }

    fn bundle(k: usize, mode: RewardMode) -> WorldModelBundle<f64> {
        let cfg = tiny_config(k);
        let cb = Codebook::new(gaussian(cfg.vocab_size, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(1))).unwrap();
        WorldModelBundle::seeded(cfg, Arc::new(cb), mode, 7).unwrap()
    }

    fn random_traj(len: usize, cfg: &ModelConfig, seed: u64) -> TokenTrajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenTrajectory::new(
            (0..len)
                .map(|_| Block {
                    obs: (0..cfg.tokens_per_obs).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect(),
                    action: rng.random_range(0..cfg.num_actions as u32),
                    reward: [-1.0, 0.0, 1.0][rng.random_range(0..3)],
                    done: false,
                })
                .collect(),
        )
    }

    #[test]
    fn embedding_shapes_and_errors() {
        let b = bundle(4, RewardMode::Categorical);
        let t = random_traj(1, b.config(), 2);
        let chunks = b.embed_trajectory(&t, 3).unwrap();
        assert_eq!(chunks[0].dim(), (5, 8));
        let mut two = t.clone();
        two.blocks.push(t.blocks[0].clone());
        let c = b.embed_trajectory(&two, 3).unwrap();
        assert_eq!(c[0].slice(s![..5, ..]), c[0].slice(s![5.., ..]));
        let mut bad = t.clone();
        bad.blocks[0].obs[2] = 12;
        let err = b.embed_trajectory(&bad, 3).unwrap_err();
        assert!(err.to_string().contains("block 0 slot 2"), "{err}");
    }

    #[test]
    fn train_forward_matches_oracle_heads() {
        let b = bundle(3, RewardMode::Categorical);
        let t = random_traj(5, b.config(), 3);
        let out = train_forward(&b, &t, 2).unwrap();
        assert_eq!(out.obs_logits.dim(), (5, 3, 12));
        let emb = b.embed_trajectory(&t, 5).unwrap().remove(0);
        for step in 1..=5 {
            let o = oracle_blockwise_forward(b.stack(), emb.view(), b.pred_tokens(), step).unwrap();
            let want = b.obs_logits(o.view());
            let got = out.obs_logits.index_axis(Axis(0), step - 1);
            let diff = (&got - &want).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(diff < 1e-10, "{diff}");
        }
    }

    #[test]
    fn loss_spot_values() {
        let b = bundle(2, RewardMode::Mse);
        let t = TokenTrajectory::new(vec![Block { obs: vec![0, 1], action: 0, reward: 1.0, done: false }]);
        let outputs = TrainOutputs {
            obs_logits: Array3::<f64>::zeros((1, 2, 12)),
            reward_out: ndarray::array![[0.5]],
            done_logits: Array2::zeros((1, 2)),
            states: b.stack().zero_states(),
        };
        let l = wm_loss(&outputs, &t, RewardMode::Mse).unwrap();
        assert!((l.obs_ce - 12f64.ln()).abs() < 1e-12);
        assert_eq!(l.reward_loss, 0.25);
        assert!((l.done_ce - 2f64.ln()).abs() < 1e-12);
        assert!(wm_loss(&outputs, &t, RewardMode::Categorical).is_err());
        assert!("huber".parse::<RewardMode>().is_err());
    }

    #[test]
    fn step_modes_agree_and_count_calls() {
        let b = bundle(4, RewardMode::Categorical);
        let ctx = random_traj(2, b.config(), 4);
        let state = summarize_context(&b, &ctx).unwrap();
        let prev = (&ctx.blocks[1].obs[..], 2u32);
        let d = imagine_step(&b, &state, Some(prev), GenerationMode::PopDefault, &mut Sampler::greedy()).unwrap();
        let c = imagine_step(&b, &state, Some(prev), GenerationMode::PopCombined, &mut Sampler::greedy()).unwrap();
        assert_eq!(d.call_costs, vec![5, 4]);
        assert_eq!(c.call_costs, vec![9]);
        assert_eq!(d.next_obs, c.next_obs);
        let diff = (&d.obs_logits - &c.obs_logits).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(diff < 1e-7);
        assert!(d.state.states.max_abs_diff(&c.state.states) < 1e-12);
        for row in d.obs_logits.rows() {
            let l: Vec<f64> = row.to_vec();
            assert!(d.next_obs.contains(&(argmax(&l) as u32)));
        }
        assert!(imagine_step(&b, &state, Some(prev), GenerationMode::NoPopOracle, &mut Sampler::greedy()).is_err());
        let handoff = imagine_step(&b, &state, None, GenerationMode::PopDefault, &mut Sampler::greedy()).unwrap();
        assert_eq!(handoff.call_costs, vec![4]);
        assert!(handoff.reward.is_none());
    }

    #[test]
    fn rollouts_agree_across_modes() {
        let b = bundle(4, RewardMode::Categorical);
        let ctx = random_traj(2, b.config(), 5);
        let policy = |obs: &[u32], _h: &[u32]| {
            let mut p = vec![0.0; 3];
            p[obs.iter().sum::<u32>() as usize % 3] = 1.0;
            p
        };
        let traces: Vec<_> = GenerationMode::ALL
            .iter()
            .map(|&m| imagine_rollout(&b, &ctx, &policy, 5, m, &mut Sampler::greedy()).unwrap())
            .collect();
        assert_eq!(traces[0].sequential_calls, 10);
        assert_eq!(traces[1].sequential_calls, 5);
        assert_eq!(traces[2].sequential_calls, 20);
        assert!(traces[0].same_tokens(&traces[1]));
        assert!(traces[0].same_tokens(&traces[2]));
        assert_eq!(traces[0].blocks[0].obs, ctx.blocks[1].obs);
    }

    #[test]
    fn invalid_policy_is_reported() {
        let b = bundle(2, RewardMode::Categorical);
        let ctx = random_traj(1, b.config(), 6);
        let bad = |_: &[u32], _: &[u32]| vec![0.5, 0.4, 0.0];
        let err = imagine_rollout(&b, &ctx, &bad, 2, GenerationMode::PopDefault, &mut Sampler::greedy());
        assert!(matches!(err, Err(Error::InvalidPolicy(_))));
        let short = |_: &[u32], _: &[u32]| vec![1.0];
        assert!(imagine_rollout(&b, &ctx, &short, 2, GenerationMode::NoPopOracle, &mut Sampler::greedy()).is_err());
    }
}
