//! Parallel observation prediction (POP) over chunks of observation-action blocks.
//!
//! A chunk holds `B` complete blocks of `K + 1` tokens (K observation tokens and
//! one action). Besides the ordinary chunkwise outputs, every block `j` gets a
//! bank of `K` prediction tokens evaluated against the state that summarizes
//! all blocks before `j`. Prediction tokens never enter a recurrent state.
//!
//! Per head, the block-boundary states come from a parallel step and a short
//! sequential scan:
//!
//! ```text
//! S~_j = (K_j ⊙ zeta)^T V_j          zeta_i = eta^(K - i), i = 0..=K
//! S_j  = S~_j + eta^(K+1) S_{j-1}    S_0 = incoming chunk state
//! ```
//!
//! Bank `j` reuses the absolute positions of block `j`'s observation slots, so
//! the prediction for a slot is rotated exactly like the token that will later
//! occupy it.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::kernel::{chunk_output, chunkwise_unchecked, weighted_state, HeadState};
use crate::scalar::Scalar;
use crate::stack::{
    ffn, layer_norm, msr_combine, positions_from, project_head, stack_forward_chunkwise,
    LayerParams, LayerStates, StackParams,
};

/// The `K` learned placeholder embeddings fed in place of an unknown observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTokens<T> {
    pub embeddings: Array2<T>,
}

impl<T: Scalar> PredictionTokens<T> {
    pub fn new(embeddings: Array2<T>) -> Result<Self> {
        if embeddings.nrows() == 0 {
            return Err(Error::Empty("prediction tokens"));
        }
        Ok(Self { embeddings })
    }

    pub fn count(&self) -> usize {
        self.embeddings.nrows()
    }

    /// The same table repeated once per block, stacked into `blocks * K` rows.
    pub fn banks(&self, blocks: usize) -> Array2<T> {
        let views = vec![self.embeddings.view(); blocks];
        concatenate(Axis(0), &views).expect("identical bank shapes")
    }
}

/// Block-boundary states of one head within one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStates<T> {
    /// `states[0]` is the incoming chunk state, `states[j]` summarizes blocks `1..=j`.
    pub states: Vec<HeadState<T>>,
    /// Within-block intermediate states, one per block.
    pub pseudo: Vec<HeadState<T>>,
}

impl<T: Scalar> BlockStates<T> {
    pub fn outgoing(&self) -> &HeadState<T> {
        self.states.last().expect("at least the incoming state")
    }
}

/// Output of a POP chunk forward.
#[derive(Debug, Clone, PartialEq)]
pub struct PopChunkOutput<T> {
    /// Per block: `K × d_model` outputs of that block's prediction bank.
    pub obs_outputs: Vec<Array2<T>>,
    /// Per block: output at the action position (row `j`).
    pub tail_outputs: Array2<T>,
    /// Outgoing states; identical to a plain chunkwise forward of the chunk.
    pub states: LayerStates<T>,
}

impl<T: Scalar> PopChunkOutput<T> {
    pub fn num_blocks(&self) -> usize {
        self.obs_outputs.len()
    }

    /// Block `j` in aggregation order: prediction outputs first, then the action-position output.
    pub fn block_output(&self, j: usize) -> Array2<T> {
        concatenate(
            Axis(0),
            &[self.obs_outputs[j].view(), self.tail_outputs.slice(s![j..j + 1, ..])],
        )
        .expect("matching widths")
    }
}

/// Intermediate state of one `(K+1)`-token block: what a zero-initialized head
/// would hold after consuming it.
pub fn pop_pseudo_states<T: Scalar>(
    block_k: ArrayView2<'_, T>,
    block_v: ArrayView2<'_, T>,
    eta: f64,
    tokens_per_obs: usize,
) -> Result<HeadState<T>> {
    check_dim("block length", tokens_per_obs + 1, block_k.nrows())?;
    check_dim("block value rows", block_k.nrows(), block_v.nrows())?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidDecay(eta));
    }
    Ok(HeadState {
        matrix: weighted_state(block_k, block_v, eta),
    })
}

/// Sequential scan `S_j = S~_j + eta^(K+1) S_{j-1}` seeded with `incoming`.
pub fn pop_recombine_states<T: Scalar>(
    pseudo: Vec<HeadState<T>>,
    incoming: &HeadState<T>,
    eta: f64,
    tokens_per_obs: usize,
) -> Result<BlockStates<T>> {
    if pseudo.is_empty() {
        return Err(Error::Empty("pseudo-state list"));
    }
    for p in &pseudo {
        check_dim("pseudo-state rows", incoming.d_k(), p.d_k())?;
        check_dim("pseudo-state cols", incoming.d_v(), p.d_v())?;
    }
    let carry = T::from_f64(eta.powi(tokens_per_obs as i32 + 1));
    let mut states = Vec::with_capacity(pseudo.len() + 1);
    states.push(incoming.clone());
    for p in &pseudo {
        let mut next = p.matrix.clone();
        next.scaled_add(carry, &states.last().expect("seeded").matrix);
        states.push(HeadState { matrix: next });
    }
    Ok(BlockStates { states, pseudo })
}

fn bank_positions(first_block: usize, blocks: usize, tokens_per_obs: usize) -> Vec<usize> {
    let block_len = tokens_per_obs + 1;
    (0..blocks)
        .flat_map(|j| positions_from((first_block + j) * block_len, tokens_per_obs))
        .collect()
}

/// Result of one POP layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PopLayerOutput<T> {
    pub chunk: Array2<T>,
    pub banks: Array2<T>,
    pub states: Vec<HeadState<T>>,
    /// Block-boundary states per head.
    pub block_states: Vec<BlockStates<T>>,
}

/// One RetNet layer in POP mode.
///
/// `chunk` holds `B(K+1)` rows starting at block `first_block`; `banks` holds
/// `B` banks of `K` rows, bank `j` conditioned on the state before block `j`.
/// The main branch is an ordinary chunkwise layer forward; the banks are
/// projected in one batched product and evaluated independently.
pub fn pop_layer_forward<T: Scalar>(
    layer: &LayerParams<T>,
    chunk: ArrayView2<'_, T>,
    banks: ArrayView2<'_, T>,
    incoming: &[HeadState<T>],
    first_block: usize,
    tokens_per_obs: usize,
) -> Result<PopLayerOutput<T>> {
    let k = tokens_per_obs;
    let block_len = k + 1;
    let d = layer.msr.d_model();
    check_dim("chunk width", d, chunk.ncols())?;
    check_dim("bank width", d, banks.ncols())?;
    check_dim("incoming heads", layer.msr.heads.len(), incoming.len())?;
    if chunk.nrows() == 0 {
        return Err(Error::Empty("POP chunk"));
    }
    if !chunk.nrows().is_multiple_of(block_len) {
        return Err(Error::IncompleteBlock {
            block: first_block + chunk.nrows() / block_len,
            expected: k,
            actual: chunk.nrows() % block_len - 1,
        });
    }
    let blocks = chunk.nrows() / block_len;
    if banks.nrows() != blocks * k {
        return Err(Error::DimensionMismatch {
            context: "prediction bank rows (blocks * K)",
            expected: blocks * k,
            actual: banks.nrows(),
        });
    }

    let zn = layer_norm(chunk, &layer.ln1);
    let hn = layer_norm(banks, &layer.ln1);
    let chunk_pos = positions_from(first_block * block_len, chunk.nrows());
    let bank_pos = bank_positions(first_block, blocks, k);

    let mut chunk_heads = Vec::with_capacity(incoming.len());
    let mut bank_heads = Vec::with_capacity(incoming.len());
    let mut out_states = Vec::with_capacity(incoming.len());
    let mut all_block_states = Vec::with_capacity(incoming.len());
    for (h, state_in) in incoming.iter().enumerate() {
        let eta = layer.msr.heads[h].eta;
        let main = project_head(&layer.msr, h, zn.view(), &chunk_pos);
        let (y, s_out) =
            chunkwise_unchecked(main.q.view(), main.k.view(), main.v.view(), state_in, eta);

        let pseudo = (0..blocks)
            .map(|j| {
                let rows = s![j * block_len..(j + 1) * block_len, ..];
                pop_pseudo_states(main.k.slice(rows), main.v.slice(rows), eta, k)
            })
            .collect::<Result<Vec<_>>>()?;
        let block_states = pop_recombine_states(pseudo, state_in, eta, k)?;

        let pred = project_head(&layer.msr, h, hn.view(), &bank_pos);
        let bank_outputs: Vec<Array2<T>> = (0..blocks)
            .into_par_iter()
            .map(|j| {
                let rows = s![j * k..(j + 1) * k, ..];
                chunk_output(
                    pred.q.slice(rows),
                    pred.k.slice(rows),
                    pred.v.slice(rows),
                    &block_states.states[j],
                    eta,
                )
            })
            .collect();
        let views: Vec<_> = bank_outputs.iter().map(|b| b.view()).collect();
        bank_heads.push(concatenate(Axis(0), &views).expect("bank widths agree"));
        chunk_heads.push(y);
        out_states.push(s_out);
        all_block_states.push(block_states);
    }

    let chunk_mid = msr_combine(&layer.msr, zn.view(), &chunk_heads) + chunk;
    let chunk_out = ffn(layer, layer_norm(chunk_mid.view(), &layer.ln2).view()) + &chunk_mid;
    let bank_mid = msr_combine(&layer.msr, hn.view(), &bank_heads) + banks;
    let bank_out = ffn(layer, layer_norm(bank_mid.view(), &layer.ln2).view()) + &bank_mid;
    Ok(PopLayerOutput {
        chunk: chunk_out,
        banks: bank_out,
        states: out_states,
        block_states: all_block_states,
    })
}

/// POP forward of one chunk through all layers.
///
/// Every bank starts from the prediction-token table at layer 0 and is carried
/// layer to layer alongside the chunk latents.
pub fn pop_chunkwise_forward<T: Scalar>(
    stack: &StackParams<T>,
    chunk: ArrayView2<'_, T>,
    pred: &PredictionTokens<T>,
    incoming: &LayerStates<T>,
    first_block: usize,
) -> Result<PopChunkOutput<T>> {
    let k = stack.config.tokens_per_obs;
    check_dim("prediction token count", k, pred.count())?;
    incoming.check(&stack.config)?;
    let block_len = k + 1;
    if !chunk.nrows().is_multiple_of(block_len) || chunk.nrows() == 0 {
        return Err(Error::IncompleteBlock {
            block: first_block + chunk.nrows() / block_len,
            expected: k,
            actual: (chunk.nrows() % block_len).saturating_sub(1),
        });
    }
    let blocks = chunk.nrows() / block_len;
    let mut z = chunk.to_owned();
    let mut banks = pred.banks(blocks);
    let mut states = Vec::with_capacity(stack.layers.len());
    for (layer, layer_in) in stack.layers.iter().zip(&incoming.layers) {
        let out = pop_layer_forward(layer, z.view(), banks.view(), layer_in, first_block, k)?;
        z = out.chunk;
        banks = out.banks;
        states.push(out.states);
    }
    let obs_outputs = (0..blocks)
        .map(|j| banks.slice(s![j * k..(j + 1) * k, ..]).to_owned())
        .collect();
    let tail_rows: Vec<usize> = (0..blocks).map(|j| j * block_len + k).collect();
    let tail_outputs = z.select(Axis(0), &tail_rows);
    Ok(PopChunkOutput {
        obs_outputs,
        tail_outputs,
        states: LayerStates { layers: states },
    })
}

/// Sequential reference for block `t` (1-based) of a trajectory that starts at
/// position 0 with zero states: chunkwise-forward blocks `1..t` one block at a
/// time, then forward the prediction tokens at block `t`'s observation slots.
pub fn oracle_blockwise_forward<T: Scalar>(
    stack: &StackParams<T>,
    trajectory: ArrayView2<'_, T>,
    pred: &PredictionTokens<T>,
    t: usize,
) -> Result<Array2<T>> {
    let k = stack.config.tokens_per_obs;
    let block_len = k + 1;
    check_dim("prediction token count", k, pred.count())?;
    if !trajectory.nrows().is_multiple_of(block_len) {
        return Err(Error::IncompleteBlock {
            block: trajectory.nrows() / block_len,
            expected: k,
            actual: trajectory.nrows() % block_len - 1,
        });
    }
    let blocks = trajectory.nrows() / block_len;
    if t == 0 || t > blocks {
        return Err(Error::OutOfRange { index: t, max: blocks });
    }
    let mut states = stack.zero_states();
    if t > 1 {
        let prefix: Vec<_> = (0..t - 1)
            .map(|b| trajectory.slice(s![b * block_len..(b + 1) * block_len, ..]))
            .collect();
        states = stack_forward_chunkwise(stack, &prefix, &states, 0)?.1;
    }
    let (out, _) =
        stack_forward_chunkwise(stack, &[pred.embeddings.view()], &states, (t - 1) * block_len)?;
    Ok(out.into_iter().next().expect("one chunk"))
}

/// Outputs of a single call on a block followed by the prediction tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffixOutput<T> {
    /// `K+1` outputs of the block.
    pub block: Array2<T>,
    /// `K` outputs of the prediction tokens placed at the next block's slots.
    pub predictions: Array2<T>,
    /// States after the block only.
    pub states: LayerStates<T>,
}

/// One retention pass over `[block ‖ prediction tokens]` (`2K+1` contiguous
/// positions) whose returned state summarizes the block alone.
pub fn pop_suffix_forward<T: Scalar>(
    stack: &StackParams<T>,
    block: ArrayView2<'_, T>,
    pred: &PredictionTokens<T>,
    incoming: &LayerStates<T>,
    block_index: usize,
) -> Result<SuffixOutput<T>> {
    let k = stack.config.tokens_per_obs;
    let block_len = k + 1;
    check_dim("block rows", block_len, block.nrows())?;
    check_dim("prediction token count", k, pred.count())?;
    incoming.check(&stack.config)?;
    let mut x = concatenate(Axis(0), &[block, pred.embeddings.view()]).map_err(|_| {
        Error::DimensionMismatch {
            context: "block width",
            expected: pred.embeddings.ncols(),
            actual: block.ncols(),
        }
    })?;
    let positions = positions_from(block_index * block_len, x.nrows());
    let mut states = Vec::with_capacity(stack.layers.len());
    for (layer, layer_in) in stack.layers.iter().zip(&incoming.layers) {
        let xn = layer_norm(x.view(), &layer.ln1);
        let mut heads = Vec::with_capacity(layer_in.len());
        let mut next = Vec::with_capacity(layer_in.len());
        for (h, state_in) in layer_in.iter().enumerate() {
            let eta = layer.msr.heads[h].eta;
            let qkv = project_head(&layer.msr, h, xn.view(), &positions);
            heads.push(chunk_output(qkv.q.view(), qkv.k.view(), qkv.v.view(), state_in, eta));
            let (_, s_out) = chunkwise_unchecked(
                qkv.q.slice(s![..block_len, ..]),
                qkv.k.slice(s![..block_len, ..]),
                qkv.v.slice(s![..block_len, ..]),
                state_in,
                eta,
            );
            next.push(s_out);
        }
        let mid = msr_combine(&layer.msr, xn.view(), &heads) + &x;
        x = ffn(layer, layer_norm(mid.view(), &layer.ln2).view()) + &mid;
        states.push(next);
    }
    Ok(SuffixOutput {
        block: x.slice(s![..block_len, ..]).to_owned(),
        predictions: x.slice(s![block_len.., ..]).to_owned(),
        states: LayerStates { layers: states },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::gaussian;
    use crate::kernel::retention_recurrent_step;
    use crate::stack::{layer_forward, ModelConfig, RetentionMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(layers: usize, k: usize) -> ModelConfig {
        ModelConfig {
            layers,
            heads: 2,
            d_model: 8,
            d_ffn: 16,
            tokens_per_obs: k,
            vocab_size: 10,
            num_actions: 3,
            ln_eps: 1e-6,
            dropout: 0.0,
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        gaussian(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let scale = b.iter().map(|x| x.abs()).fold(1e-30, f64::max);
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    fn recurrent_state(k: &Array2<f64>, v: &Array2<f64>, eta: f64, from: &HeadState<f64>) -> HeadState<f64> {
        let mut s = from.clone();
        for r in 0..k.nrows() {
            s = retention_recurrent_step(&s, k.row(r), k.row(r), v.row(r), eta).unwrap().1;
        }
        s
    }

    #[test]
    fn pseudo_state_extreme_decays() {
        let k = random(4, 3, 1);
        let v = random(4, 2, 2);
        let s1 = pop_pseudo_states(k.view(), v.view(), 1.0, 3).unwrap();
        assert!(rel(&s1.matrix, &k.t().dot(&v)) < 1e-14);
        let s0 = pop_pseudo_states(k.view(), v.view(), 0.0, 3).unwrap();
        let last = k.slice(s![3..4, ..]).t().dot(&v.slice(s![3..4, ..]));
        assert_eq!(s0.matrix, last);
        assert!(pop_pseudo_states(k.view(), v.view(), 0.5, 4).is_err());
    }

    #[test]
    fn pseudo_state_matches_recurrence() {
        let k = random(5, 4, 3);
        let v = random(5, 4, 4);
        let s = pop_pseudo_states(k.view(), v.view(), 0.9, 4).unwrap();
        let r = recurrent_state(&k, &v, 0.9, &HeadState::zeros(4, 4));
        assert!(s.max_abs_diff(&r) < 1e-10);
    }

    #[test]
    fn recombine_cases() {
        let incoming = HeadState { matrix: random(3, 3, 5) };
        let pseudo: Vec<_> = (0..3).map(|i| HeadState { matrix: random(3, 3, 10 + i) }).collect();
        let zero = pop_recombine_states(pseudo.clone(), &incoming, 0.0, 2).unwrap();
        for j in 0..3 {
            assert_eq!(zero.states[j + 1], pseudo[j]);
        }
        let one = pop_recombine_states(vec![pseudo[0].clone()], &incoming, 0.5, 2).unwrap();
        let expected = &pseudo[0].matrix + &(&incoming.matrix * 0.125);
        assert!(rel(&one.states[1].matrix, &expected) < 1e-15);
        assert!(pop_recombine_states(Vec::<HeadState<f64>>::new(), &incoming, 0.5, 2).is_err());
    }

    #[test]
    fn recombined_states_match_recurrent_prefixes() {
        let k_tok = 3;
        let blocks = 4;
        let eta = 0.8;
        let keys = random(blocks * (k_tok + 1), 4, 20);
        let vals = random(blocks * (k_tok + 1), 4, 21);
        let incoming = HeadState { matrix: random(4, 4, 22) };
        let pseudo = (0..blocks)
            .map(|j| {
                let rows = s![j * 4..(j + 1) * 4, ..];
                pop_pseudo_states(keys.slice(rows), vals.slice(rows), eta, k_tok).unwrap()
            })
            .collect();
        let bs = pop_recombine_states(pseudo, &incoming, eta, k_tok).unwrap();
        for j in 1..=blocks {
            let prefix_k = keys.slice(s![..j * 4, ..]).to_owned();
            let prefix_v = vals.slice(s![..j * 4, ..]).to_owned();
            let r = recurrent_state(&prefix_k, &prefix_v, eta, &incoming);
            assert!(bs.states[j].max_abs_diff(&r) < 1e-10);
        }
    }

    #[test]
    fn single_block_layer_is_two_chunkwise_calls() {
        let cfg = config(1, 3);
        let stack = StackParams::<f64>::seeded(cfg, 30).unwrap();
        let layer = &stack.layers[0];
        let chunk = random(4, 8, 31);
        let bank = random(3, 8, 32);
        let mut incoming = stack.zero_states();
        incoming = crate::stack::stack_forward(&stack, random(8, 8, 33).view(), &incoming, 0, RetentionMode::Chunkwise).unwrap().1;
        let out = pop_layer_forward(layer, chunk.view(), bank.view(), &incoming.layers[0], 2, 3).unwrap();
        let (z, s) = layer_forward(layer, chunk.view(), &incoming.layers[0], 8, RetentionMode::Chunkwise).unwrap();
        let (h, _) = layer_forward(layer, bank.view(), &incoming.layers[0], 8, RetentionMode::Chunkwise).unwrap();
        assert_eq!(out.chunk, z);
        assert_eq!(out.states, s);
        assert!(rel(&out.banks, &h) < 1e-12);
    }

    #[test]
    fn bank_count_must_match_blocks() {
        let stack = StackParams::<f64>::seeded(config(1, 3), 40).unwrap();
        let zero = stack.zero_states();
        let chunk = random(8, 8, 41);
        let bank = random(3, 8, 42);
        let err = pop_layer_forward(&stack.layers[0], chunk.view(), bank.view(), &zero.layers[0], 0, 3);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
        let partial = random(7, 8, 43);
        let pred = PredictionTokens::new(random(3, 8, 44)).unwrap();
        assert!(matches!(
            pop_chunkwise_forward(&stack, partial.view(), &pred, &zero, 0),
            Err(Error::IncompleteBlock { .. })
        ));
    }

    #[test]
    fn pop_matches_oracle_and_vanilla() {
        let cfg = config(2, 3);
        let stack = StackParams::<f64>::seeded(cfg, 50).unwrap();
        let pred = PredictionTokens::new(random(3, 8, 51)).unwrap();
        let traj = random(5 * 4, 8, 52);
        let zero = stack.zero_states();
        let mut states = zero.clone();
        let mut block = 0;
        for size in [2usize, 3] {
            let chunk = traj.slice(s![block * 4..(block + size) * 4, ..]);
            let out = pop_chunkwise_forward(&stack, chunk, &pred, &states, block).unwrap();
            let (vanilla, vs) = stack_forward_chunkwise(&stack, &[chunk], &states, block * 4).unwrap();
            assert!(out.states.max_abs_diff(&vs) <= 1e-12);
            for j in 0..size {
                let oracle = oracle_blockwise_forward(&stack, traj.view(), &pred, block + j + 1).unwrap();
                assert!(rel(&out.obs_outputs[j], &oracle) < 1e-8);
                assert_eq!(out.tail_outputs.row(j), vanilla[0].row(j * 4 + 3));
                assert_eq!(out.block_output(j).nrows(), 4);
            }
            states = out.states;
            block += size;
        }
    }

    #[test]
    fn oracle_first_block_is_prediction_tokens_alone() {
        let stack = StackParams::<f64>::seeded(config(1, 3), 60).unwrap();
        let pred = PredictionTokens::new(random(3, 8, 61)).unwrap();
        let traj = random(8, 8, 62);
        let a = oracle_blockwise_forward(&stack, traj.view(), &pred, 1).unwrap();
        let (b, _) = crate::stack::stack_forward(&stack, pred.embeddings.view(), &stack.zero_states(), 0, RetentionMode::Chunkwise).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, oracle_blockwise_forward(&stack, traj.view(), &pred, 1).unwrap());
        assert!(matches!(oracle_blockwise_forward(&stack, traj.view(), &pred, 3), Err(Error::OutOfRange { .. })));
        assert!(oracle_blockwise_forward(&stack, traj.view(), &pred, 0).is_err());
    }

    #[test]
    fn suffix_forward_matches_two_calls() {
        let stack = StackParams::<f64>::seeded(config(2, 3), 70).unwrap();
        let pred = PredictionTokens::new(random(3, 8, 71)).unwrap();
        let prefix = random(4, 8, 72);
        let (_, states) = stack_forward_chunkwise(&stack, &[prefix.view()], &stack.zero_states(), 0).unwrap();
        let block = random(4, 8, 73);
        let out = pop_suffix_forward(&stack, block.view(), &pred, &states, 1).unwrap();
        let (b, s) = stack_forward_chunkwise(&stack, &[block.view()], &states, 4).unwrap();
        let (p, _) = stack_forward_chunkwise(&stack, &[pred.embeddings.view()], &s, 8).unwrap();
        assert!(rel(&out.block, &b[0]) < 1e-12);
        assert!(rel(&out.predictions, &p[0]) < 1e-10);
        assert!(out.states.max_abs_diff(&s) < 1e-14);
    }
}
