//! Multi-scale retention layers and the pre-norm RetNet stack.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::init::gaussian;
use crate::kernel::{
    chunkwise_unchecked, recurrent_step_in_place, retention_parallel, rotate_rows_in_place,
    weighted_state, HeadProjections, HeadState, RotationAngles,
};
use crate::scalar::Scalar;

/// Standard deviation of the seeded Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Shape of a world model: the retention stack plus vocabulary sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    /// Observation tokens per block (`K`).
    pub tokens_per_obs: usize,
    /// Tokenizer vocabulary size (`N`).
    pub vocab_size: usize,
    pub num_actions: usize,
    pub ln_eps: f64,
    /// Kept for parity with the reference configuration; inference never drops.
    pub dropout: f64,
}

impl ModelConfig {
    /// L=5, h=4, d_model=256, d_ffn=1024, K=64, N=512.
    pub fn paper() -> Self {
        Self {
            layers: 5,
            heads: 4,
            d_model: 256,
            d_ffn: 1024,
            tokens_per_obs: 64,
            vocab_size: 512,
            num_actions: 18,
            ln_eps: 1e-6,
            dropout: 0.1,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    /// Tokens in one observation-action block.
    pub fn block_len(&self) -> usize {
        self.tokens_per_obs + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("tokens_per_obs", self.tokens_per_obs),
            ("num_actions", self.num_actions),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !self.d_head().is_multiple_of(2) {
            return Err(Error::Config(format!("head dimension {} must be even", self.d_head())));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Decay of head `i`: `1 - 2^(-5-i)`.
pub fn head_decay(i: usize) -> f64 {
    1.0 - 2f64.powi(-5 - i as i32)
}

/// Which of the equivalent retention forms a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetentionMode {
    /// Whole input as one parallel block; incoming states must be zero.
    Parallel,
    /// Whole input as one chunk carrying the incoming states.
    Chunkwise,
    /// Token-by-token recurrence.
    Recurrent,
}

/// Affine parameters of a layer or group normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub scale: Array1<T>,
    pub shift: Array1<T>,
    pub eps: f64,
}

impl<T: Scalar> NormParams<T> {
    pub fn identity(width: usize, eps: f64) -> Self {
        Self {
            scale: Array1::ones(width),
            shift: Array1::zeros(width),
            eps,
        }
    }

    pub fn width(&self) -> usize {
        self.scale.len()
    }
}

/// Multi-scale retention: per-head kernels, group norm, swish gate, output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MsrParams<T> {
    pub heads: Vec<HeadProjections<T>>,
    pub w_g: Array2<T>,
    pub w_o: Array2<T>,
    pub group_norm: NormParams<T>,
    pub angles: RotationAngles,
}

impl<T: Scalar> MsrParams<T> {
    pub fn new(
        heads: Vec<HeadProjections<T>>,
        w_g: Array2<T>,
        w_o: Array2<T>,
        group_norm: NormParams<T>,
    ) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::Empty("retention heads"));
        }
        let d_model = w_g.nrows();
        let d_head = heads[0].d_k();
        check_dim("heads * d_head", d_model, heads.len() * d_head)?;
        for (i, head) in heads.iter().enumerate() {
            check_dim("head input width", d_model, head.d_in())?;
            check_dim("head key width", d_head, head.d_k())?;
            check_dim("head value width", d_head, head.d_v())?;
            let expected = head_decay(i);
            if head.eta != expected {
                return Err(Error::Config(format!(
                    "head {i} decay {} does not follow the schedule value {expected}",
                    head.eta
                )));
            }
        }
        check_dim("w_g cols", d_model, w_g.ncols())?;
        check_dim("w_o rows", d_model, w_o.nrows())?;
        check_dim("w_o cols", d_model, w_o.ncols())?;
        check_dim("group norm width", d_model, group_norm.width())?;
        let angles = RotationAngles::standard(d_head)?;
        Ok(Self {
            heads,
            w_g,
            w_o,
            group_norm,
            angles,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_g.nrows()
    }

    pub fn d_head(&self) -> usize {
        self.heads[0].d_k()
    }
}

/// One RetNet layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub msr: MsrParams<T>,
    pub ffn_w1: Array2<T>,
    pub ffn_w2: Array2<T>,
    pub ln1: NormParams<T>,
    pub ln2: NormParams<T>,
}

/// `L` identical layers.
#[derive(Debug, Clone, PartialEq)]
pub struct StackParams<T> {
    pub layers: Vec<LayerParams<T>>,
    pub config: ModelConfig,
}

impl<T: Scalar> StackParams<T> {
    /// Deterministic `N(0, 0.02^2)` weights, identity norms.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let dh = config.d_head();
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let heads = (0..config.heads)
                .map(|i| {
                    HeadProjections::new(
                        gaussian(d, dh, INIT_STD, &mut rng),
                        gaussian(d, dh, INIT_STD, &mut rng),
                        gaussian(d, dh, INIT_STD, &mut rng),
                        head_decay(i),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let msr = MsrParams::new(
                heads,
                gaussian(d, d, INIT_STD, &mut rng),
                gaussian(d, d, INIT_STD, &mut rng),
                NormParams::identity(d, config.ln_eps),
            )?;
            layers.push(LayerParams {
                msr,
                ffn_w1: gaussian(d, config.d_ffn, INIT_STD, &mut rng),
                ffn_w2: gaussian(config.d_ffn, d, INIT_STD, &mut rng),
                ln1: NormParams::identity(d, config.ln_eps),
                ln2: NormParams::identity(d, config.ln_eps),
            });
        }
        Self::new(layers, config)
    }

    pub fn new(layers: Vec<LayerParams<T>>, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        check_dim("layer count", config.layers, layers.len())?;
        for layer in &layers {
            check_dim("heads", config.heads, layer.msr.heads.len())?;
            check_dim("d_model", config.d_model, layer.msr.d_model())?;
            check_dim("ffn_w1 rows", config.d_model, layer.ffn_w1.nrows())?;
            check_dim("ffn_w1 cols", config.d_ffn, layer.ffn_w1.ncols())?;
            check_dim("ffn_w2 rows", config.d_ffn, layer.ffn_w2.nrows())?;
            check_dim("ffn_w2 cols", config.d_model, layer.ffn_w2.ncols())?;
            check_dim("ln1 width", config.d_model, layer.ln1.width())?;
            check_dim("ln2 width", config.d_model, layer.ln2.width())?;
        }
        Ok(Self { layers, config })
    }

    pub fn zero_states(&self) -> LayerStates<T> {
        LayerStates::zeros(&self.config)
    }

    /// Element-type conversion, e.g. to run an `f64` model in single precision.
    pub fn cast<U: Scalar>(&self) -> StackParams<U> {
        let c = |a: &Array2<T>| a.mapv(|x| U::from_f64(x.to_f64()));
        let n = |p: &NormParams<T>| NormParams {
            scale: p.scale.mapv(|x| U::from_f64(x.to_f64())),
            shift: p.shift.mapv(|x| U::from_f64(x.to_f64())),
            eps: p.eps,
        };
        StackParams {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    msr: MsrParams {
                        heads: l
                            .msr
                            .heads
                            .iter()
                            .map(|h| HeadProjections {
                                w_q: c(&h.w_q),
                                w_k: c(&h.w_k),
                                w_v: c(&h.w_v),
                                eta: h.eta,
                            })
                            .collect(),
                        w_g: c(&l.msr.w_g),
                        w_o: c(&l.msr.w_o),
                        group_norm: n(&l.msr.group_norm),
                        angles: l.msr.angles.clone(),
                    },
                    ffn_w1: c(&l.ffn_w1),
                    ffn_w2: c(&l.ffn_w2),
                    ln1: n(&l.ln1),
                    ln2: n(&l.ln2),
                })
                .collect(),
        }
    }
}

/// Per-layer, per-head recurrent states.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates<T> {
    pub layers: Vec<Vec<HeadState<T>>>,
}

impl<T: Scalar> LayerStates<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let dh = config.d_head();
        Self {
            layers: (0..config.layers)
                .map(|_| (0..config.heads).map(|_| HeadState::zeros(dh, dh)).collect())
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)))
            .fold(0.0, f64::max)
    }

    pub(crate) fn check(&self, config: &ModelConfig) -> Result<()> {
        check_dim("state layers", config.layers, self.layers.len())?;
        let dh = config.d_head();
        for layer in &self.layers {
            check_dim("state heads", config.heads, layer.len())?;
            for head in layer {
                check_dim("state rows", dh, head.d_k())?;
                check_dim("state cols", dh, head.d_v())?;
            }
        }
        Ok(())
    }
}

/// Row-wise layer normalization.
pub fn layer_norm<T: Scalar>(x: ArrayView2<'_, T>, params: &NormParams<T>) -> Array2<T> {
    let mut out = x.to_owned();
    let eps = T::from_f64(params.eps);
    let n = T::from_f64(x.ncols() as f64);
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = (var + eps).sqrt().recip();
        for ((v, &g), &b) in row.iter_mut().zip(&params.scale).zip(&params.shift) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

/// Normalizes each token independently within each of `groups` contiguous channel groups.
pub fn group_norm<T: Scalar>(x: ArrayView2<'_, T>, groups: usize, params: &NormParams<T>) -> Array2<T> {
    let mut out = x.to_owned();
    let width = x.ncols() / groups;
    let eps = T::from_f64(params.eps);
    let n = T::from_f64(width as f64);
    for mut row in out.axis_iter_mut(Axis(0)) {
        for g in 0..groups {
            let mut seg = row.slice_mut(s![g * width..(g + 1) * width]);
            let mean = seg.sum() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = (var + eps).sqrt().recip();
            seg.mapv_inplace(|v| (v - mean) * inv);
        }
        for ((v, &gm), &b) in row.iter_mut().zip(&params.scale).zip(&params.shift) {
            *v = *v * gm + b;
        }
    }
    out
}

/// Exact GELU, `x/2 * (1 + erf(x/sqrt 2))`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn swish<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// `gelu(z W1) W2`.
pub fn ffn<T: Scalar>(layer: &LayerParams<T>, z: ArrayView2<'_, T>) -> Array2<T> {
    let mut hidden = z.dot(&layer.ffn_w1);
    hidden.mapv_inplace(gelu);
    hidden.dot(&layer.ffn_w2)
}

/// Rotated query/key and value projections of one head.
pub(crate) struct HeadQkv<T> {
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
}

pub(crate) fn project_head<T: Scalar>(
    msr: &MsrParams<T>,
    head: usize,
    x: ArrayView2<'_, T>,
    positions: &[usize],
) -> HeadQkv<T> {
    let p = &msr.heads[head];
    let mut q = x.dot(&p.w_q);
    let mut k = x.dot(&p.w_k);
    rotate_rows_in_place(q.view_mut(), positions, &msr.angles, false);
    rotate_rows_in_place(k.view_mut(), positions, &msr.angles, true);
    HeadQkv { q, k, v: x.dot(&p.w_v) }
}

/// Group norm over the concatenated heads, swish gate, output projection.
pub(crate) fn msr_combine<T: Scalar>(
    msr: &MsrParams<T>,
    x: ArrayView2<'_, T>,
    head_outputs: &[Array2<T>],
) -> Array2<T> {
    let views: Vec<_> = head_outputs.iter().map(|h| h.view()).collect();
    let y = concatenate(Axis(1), &views).expect("head outputs share a row count");
    let y = group_norm(y.view(), msr.heads.len(), &msr.group_norm);
    let mut gate = x.dot(&msr.w_g);
    gate.mapv_inplace(swish);
    (gate * y).dot(&msr.w_o)
}

pub(crate) fn positions_from(offset: usize, n: usize) -> Vec<usize> {
    (offset..offset + n).collect()
}

/// Multi-scale retention over `x` whose first row sits at absolute index `token_offset`.
pub fn msr_forward<T: Scalar>(
    msr: &MsrParams<T>,
    x: ArrayView2<'_, T>,
    states: &[HeadState<T>],
    token_offset: usize,
    mode: RetentionMode,
) -> Result<(Array2<T>, Vec<HeadState<T>>)> {
    check_dim("msr input width", msr.d_model(), x.ncols())?;
    check_dim("msr states", msr.heads.len(), states.len())?;
    if x.nrows() == 0 {
        return Err(Error::Empty("msr input"));
    }
    let dh = msr.d_head();
    for s in states {
        check_dim("state rows", dh, s.d_k())?;
        check_dim("state cols", dh, s.d_v())?;
    }
    if mode == RetentionMode::Parallel && states.iter().any(|s| !s.is_zero()) {
        return Err(Error::InvalidArgument(
            "parallel retention takes zero incoming states; use chunkwise".into(),
        ));
    }
    let positions = positions_from(token_offset, x.nrows());
    let mut outputs = Vec::with_capacity(states.len());
    let mut next = Vec::with_capacity(states.len());
    for (h, state) in states.iter().enumerate() {
        let eta = msr.heads[h].eta;
        let qkv = project_head(msr, h, x, &positions);
        let (y, s) = match mode {
            RetentionMode::Parallel => {
                let y = retention_parallel(qkv.q.view(), qkv.k.view(), qkv.v.view(), eta)?;
                let s = HeadState {
                    matrix: weighted_state(qkv.k.view(), qkv.v.view(), eta),
                };
                (y, s)
            }
            RetentionMode::Chunkwise => {
                chunkwise_unchecked(qkv.q.view(), qkv.k.view(), qkv.v.view(), state, eta)
            }
            RetentionMode::Recurrent => {
                let mut s = state.clone();
                let mut y = Array2::zeros((x.nrows(), dh));
                for r in 0..x.nrows() {
                    let row = recurrent_step_in_place(
                        &mut s,
                        qkv.q.row(r),
                        qkv.k.row(r),
                        qkv.v.row(r),
                        eta,
                    );
                    y.row_mut(r).assign(&row);
                }
                (y, s)
            }
        };
        outputs.push(y);
        next.push(s);
    }
    Ok((msr_combine(msr, x, &outputs), next))
}

/// `Y = MSR(LN(X)) + X; X' = FFN(LN(Y)) + Y`.
pub fn layer_forward<T: Scalar>(
    layer: &LayerParams<T>,
    x: ArrayView2<'_, T>,
    states: &[HeadState<T>],
    token_offset: usize,
    mode: RetentionMode,
) -> Result<(Array2<T>, Vec<HeadState<T>>)> {
    let normed = layer_norm(x, &layer.ln1);
    let (msr_out, next) = msr_forward(&layer.msr, normed.view(), states, token_offset, mode)?;
    let y = msr_out + x;
    let out = ffn(layer, layer_norm(y.view(), &layer.ln2).view()) + &y;
    Ok((out, next))
}

/// All layers over one input, threading each layer's states.
pub fn stack_forward<T: Scalar>(
    stack: &StackParams<T>,
    x: ArrayView2<'_, T>,
    initial: &LayerStates<T>,
    token_offset: usize,
    mode: RetentionMode,
) -> Result<(Array2<T>, LayerStates<T>)> {
    initial.check(&stack.config)?;
    check_dim("input width", stack.config.d_model, x.ncols())?;
    let mut h = x.to_owned();
    let mut states = Vec::with_capacity(stack.layers.len());
    for (layer, layer_states) in stack.layers.iter().zip(&initial.layers) {
        let (out, next) = layer_forward(layer, h.view(), layer_states, token_offset, mode)?;
        h = out;
        states.push(next);
    }
    Ok((h, LayerStates { layers: states }))
}

/// Chunkwise forward over consecutive chunks; the first chunk starts at `start_offset`.
pub fn stack_forward_chunkwise<T: Scalar>(
    stack: &StackParams<T>,
    chunks: &[ArrayView2<'_, T>],
    initial: &LayerStates<T>,
    start_offset: usize,
) -> Result<(Vec<Array2<T>>, LayerStates<T>)> {
    if chunks.is_empty() {
        return Err(Error::Empty("chunk list"));
    }
    let mut states = initial.clone();
    let mut offset = start_offset;
    let mut outputs = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let (out, next) = stack_forward(stack, *chunk, &states, offset, RetentionMode::Chunkwise)?;
        offset += chunk.nrows();
        outputs.push(out);
        states = next;
    }
    Ok((outputs, states))
}
