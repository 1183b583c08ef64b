//! Single-head retention in its three equivalent forms.
//!
//! The per-token recurrence
//!
//! ```text
//! S_n = eta * S_{n-1} + k_n^T v_n
//! y_n = q_n S_n
//! ```
//!
//! is the reference definition. The parallel form `(Q K^T ⊙ D) V` and the
//! chunkwise form are checked against it. With rows indexed from zero inside a
//! chunk of length `B`, the chunkwise constants that reproduce the recurrence
//! exactly are
//!
//! ```text
//! xi_i   = eta^(i + 1)       (weight of the incoming state on output row i)
//! zeta_i = eta^(B - 1 - i)   (weight of key row i in the outgoing state)
//! ```
//!
//! so the outgoing state is `(K ⊙ zeta)^T V + eta^B S_in`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};

use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

/// Causal mask combined with exponential decay: `entries[r][c] = eta^(r-c)` for `r >= c`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayMask<T> {
    eta: f64,
    entries: Array2<T>,
}

impl<T: Scalar> DecayMask<T> {
    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn entries(&self) -> &Array2<T> {
        &self.entries
    }

    pub fn into_entries(self) -> Array2<T> {
        self.entries
    }
}

/// Builds the `n × n` decay mask. Rejects `n == 0` and `eta` outside `(0, 1]`.
pub fn decay_matrix<T: Scalar>(n: usize, eta: f64) -> Result<DecayMask<T>> {
    if n == 0 {
        return Err(Error::InvalidArgument("decay mask size must be positive".into()));
    }
    check_public_decay(eta)?;
    Ok(DecayMask {
        eta,
        entries: decay_entries(n, eta),
    })
}

pub(crate) fn check_public_decay(eta: f64) -> Result<()> {
    if eta > 0.0 && eta <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidDecay(eta))
    }
}

fn check_kernel_decay(eta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eta) {
        Ok(())
    } else {
        Err(Error::InvalidDecay(eta))
    }
}

/// Closed form powers; `powi(0)` is 1 even for `eta == 0`.
pub(crate) fn decay_entries<T: Scalar>(n: usize, eta: f64) -> Array2<T> {
    let powers = decay_powers(n, eta);
    Array2::from_shape_fn((n, n), |(r, c)| {
        if r >= c {
            T::from_f64(powers[r - c])
        } else {
            T::zero()
        }
    })
}

/// `[eta^0, eta^1, ..., eta^(n-1)]`.
pub(crate) fn decay_powers(n: usize, eta: f64) -> Vec<f64> {
    (0..n).map(|e| eta.powi(e as i32)).collect()
}

/// Rotation frequencies for relative position encoding, one per coordinate pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationAngles {
    theta: Vec<f64>,
}

impl RotationAngles {
    /// `theta` holds one angle per coordinate pair, so the head dimension is `2 * theta.len()`.
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::Empty("rotation angles"));
        }
        Ok(Self { theta })
    }

    /// Geometric frequencies `10000^(-2j / d_head)`.
    pub fn standard(d_head: usize) -> Result<Self> {
        if d_head == 0 || !d_head.is_multiple_of(2) {
            return Err(Error::OddHeadDim(d_head));
        }
        let half = d_head / 2;
        let theta = (0..half)
            .map(|j| 10000f64.powf(-(2.0 * j as f64) / d_head as f64))
            .collect();
        Ok(Self { theta })
    }

    pub fn dim(&self) -> usize {
        2 * self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
}

/// Rotates each row of `x` in place; row `r` sits at absolute index `positions[r]`.
///
/// Coordinate pairs `(x[2j], x[2j+1])` are treated as complex numbers `a + ib`.
/// The plain branch multiplies by `e^{i p theta_j}`. The conjugate branch
/// multiplies by `e^{-i p theta_j}` and stores the complex conjugate of the
/// result, so that the real dot product of a plain-rotated query with a
/// conjugate-rotated key equals `Re(q e^{i n theta} k e^{-i m theta})`, a
/// function of `n - m` only.
pub(crate) fn rotate_rows_in_place<T: Scalar>(
    mut x: ArrayViewMut2<'_, T>,
    positions: &[usize],
    angles: &RotationAngles,
    conjugate: bool,
) {
    debug_assert_eq!(x.nrows(), positions.len());
    debug_assert_eq!(x.ncols(), angles.dim());
    for (mut row, &pos) in x.axis_iter_mut(Axis(0)).zip(positions) {
        let p = pos as f64;
        for (j, &theta) in angles.theta.iter().enumerate() {
            let (s, c) = (p * theta).sin_cos();
            let (s, c) = (T::from_f64(s), T::from_f64(c));
            let a = row[2 * j];
            let b = row[2 * j + 1];
            if conjugate {
                row[2 * j] = a * c + b * s;
                row[2 * j + 1] = a * s - b * c;
            } else {
                row[2 * j] = a * c - b * s;
                row[2 * j + 1] = a * s + b * c;
            }
        }
    }
}

/// Rotates a sequence whose first element sits at absolute index `start_index`.
pub fn apply_position_rotation<T: Scalar>(
    x: ArrayView2<'_, T>,
    start_index: usize,
    angles: &RotationAngles,
    conjugate: bool,
) -> Result<Array2<T>> {
    if !x.ncols().is_multiple_of(2) {
        return Err(Error::OddHeadDim(x.ncols()));
    }
    check_dim("rotation width", angles.dim(), x.ncols())?;
    let positions: Vec<usize> = (start_index..start_index + x.nrows()).collect();
    let mut out = x.to_owned();
    rotate_rows_in_place(out.view_mut(), &positions, angles, conjugate);
    Ok(out)
}

/// Recurrent accumulator of one retention head, `d_k × d_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState<T> {
    pub matrix: Array2<T>,
}

impl<T: Scalar> HeadState<T> {
    pub fn zeros(d_k: usize, d_v: usize) -> Self {
        Self {
            matrix: Array2::zeros((d_k, d_v)),
        }
    }

    pub fn d_k(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn d_v(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_zero(&self) -> bool {
        self.matrix.iter().all(|x| x.is_zero())
    }

    /// Largest absolute elementwise difference, for tolerance checks.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.matrix
            .iter()
            .zip(other.matrix.iter())
            .map(|(a, b)| (*a - *b).abs().to_f64())
            .fold(0.0, f64::max)
    }
}

/// Per-head projection weights and decay.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjections<T> {
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub eta: f64,
}

impl<T: Scalar> HeadProjections<T> {
    pub fn new(w_q: Array2<T>, w_k: Array2<T>, w_v: Array2<T>, eta: f64) -> Result<Self> {
        check_public_decay(eta)?;
        check_dim("w_k rows", w_q.nrows(), w_k.nrows())?;
        check_dim("w_v rows", w_q.nrows(), w_v.nrows())?;
        check_dim("w_k cols", w_q.ncols(), w_k.ncols())?;
        Ok(Self { w_q, w_k, w_v, eta })
    }

    pub fn d_in(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn d_k(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.ncols()
    }
}

fn check_qkv<T>(
    q: &ArrayView2<'_, T>,
    k: &ArrayView2<'_, T>,
    v: &ArrayView2<'_, T>,
) -> Result<()> {
    check_dim("key rows", q.nrows(), k.nrows())?;
    check_dim("value rows", q.nrows(), v.nrows())?;
    check_dim("key width", q.ncols(), k.ncols())
}

fn check_state<T: Scalar>(state: &HeadState<T>, d_k: usize, d_v: usize) -> Result<()> {
    check_dim("state rows", d_k, state.d_k())?;
    check_dim("state cols", d_v, state.d_v())
}

/// One token of the recurrence; returns the output and the advanced state.
pub fn retention_recurrent_step<T: Scalar>(
    state: &HeadState<T>,
    q: ArrayView1<'_, T>,
    k: ArrayView1<'_, T>,
    v: ArrayView1<'_, T>,
    eta: f64,
) -> Result<(Array1<T>, HeadState<T>)> {
    check_kernel_decay(eta)?;
    check_dim("key width", q.len(), k.len())?;
    check_state(state, k.len(), v.len())?;
    let mut next = state.clone();
    let y = recurrent_step_in_place(&mut next, q, k, v, eta);
    Ok((y, next))
}

/// Unchecked in-place variant used by the token-by-token model paths.
pub(crate) fn recurrent_step_in_place<T: Scalar>(
    state: &mut HeadState<T>,
    q: ArrayView1<'_, T>,
    k: ArrayView1<'_, T>,
    v: ArrayView1<'_, T>,
    eta: f64,
) -> Array1<T> {
    let eta = T::from_f64(eta);
    for (mut row, &ki) in state.matrix.axis_iter_mut(Axis(0)).zip(k.iter()) {
        Zip::from(&mut row).and(&v).for_each(|s, &vj| *s = eta * *s + ki * vj);
    }
    q.dot(&state.matrix)
}

/// `(Q K^T ⊙ D) V` with zero incoming state.
pub fn retention_parallel<T: Scalar>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    eta: f64,
) -> Result<Array2<T>> {
    check_kernel_decay(eta)?;
    check_qkv(&q, &k, &v)?;
    Ok(intra_chunk(q, k, v, eta))
}

fn intra_chunk<T: Scalar>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    eta: f64,
) -> Array2<T> {
    let mut scores = q.dot(&k.t());
    let n = scores.nrows();
    let powers: Vec<T> = decay_powers(n, eta).into_iter().map(T::from_f64).collect();
    for ((r, c), s) in scores.indexed_iter_mut() {
        *s = if r >= c { *s * powers[r - c] } else { T::zero() };
    }
    scores.dot(&v)
}

/// `(K ⊙ zeta)^T V` with `zeta_i = eta^(len - 1 - i)`: the state a zero-initialized
/// head reaches after consuming these rows.
pub(crate) fn weighted_state<T: Scalar>(
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    eta: f64,
) -> Array2<T> {
    let n = k.nrows();
    let powers = decay_powers(n, eta);
    let mut weighted = k.to_owned();
    for (i, mut row) in weighted.axis_iter_mut(Axis(0)).enumerate() {
        let w = T::from_f64(powers[n - 1 - i]);
        row.mapv_inplace(|x| x * w);
    }
    weighted.t().dot(&v)
}

/// Chunkwise retention: intra-chunk parallel term plus the decayed
/// contribution of `incoming`; also returns the outgoing state.
pub fn retention_chunkwise<T: Scalar>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    incoming: &HeadState<T>,
    eta: f64,
) -> Result<(Array2<T>, HeadState<T>)> {
    check_kernel_decay(eta)?;
    check_qkv(&q, &k, &v)?;
    if q.nrows() == 0 {
        return Err(Error::Empty("retention chunk"));
    }
    check_state(incoming, k.ncols(), v.ncols())?;
    Ok(chunkwise_unchecked(q, k, v, incoming, eta))
}

pub(crate) fn chunkwise_unchecked<T: Scalar>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    incoming: &HeadState<T>,
    eta: f64,
) -> (Array2<T>, HeadState<T>) {
    let out = chunk_output(q, k, v, incoming, eta);
    let n = q.nrows();
    let mut state = weighted_state(k, v, eta);
    if !incoming.is_zero() {
        let carry = T::from_f64(eta.powi(n as i32));
        state.scaled_add(carry, &incoming.matrix);
    }
    (out, HeadState { matrix: state })
}

/// Output rows of a chunk given its incoming state; the state is not advanced.
pub(crate) fn chunk_output<T: Scalar>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    incoming: &HeadState<T>,
    eta: f64,
) -> Array2<T> {
    let mut out = intra_chunk(q, k, v, eta);
    if !incoming.is_zero() {
        let cross = q.dot(&incoming.matrix);
        let mut xi = T::from_f64(eta);
        let eta_t = T::from_f64(eta);
        for (mut row, cross_row) in out.axis_iter_mut(Axis(0)).zip(cross.axis_iter(Axis(0))) {
            row.scaled_add(xi, &cross_row);
            xi = xi * eta_t;
        }
    }
    out
}
