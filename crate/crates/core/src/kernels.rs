//! Dense primitives and differentiable layer kernels.
//!
//! Every kernel is a pure function of its inputs. Backward passes are exact
//! analytic derivatives; nothing here records a tape. Where a backward pass
//! is called once per timestep inside a hot loop there is an `_acc` variant
//! that accumulates into caller-owned buffers instead of allocating.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Tensor2::from_vec",
                format!("[{rows}x{cols}]"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Tensor2::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor2<U> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}

impl<T> fmt::Display for Tensor2<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}x{}]", self.rows, self.cols)
    }
}

pub fn all_finite<T: Real>(xs: &[T]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [T::zero(); 8];
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `out = W x` for a slice `x` of length `W.cols`.
fn matvec_into<T: Real>(w: &Tensor2<T>, x: &[T], out: &mut [T]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(w.row(r), x);
    }
}

fn check_affine<T: Real>(op: &'static str, x_len: usize, w: &Tensor2<T>, out_len: usize) -> Result<()> {
    if w.cols != x_len {
        return Err(Error::shape(op, format!("W{w}"), format!("x[{x_len}]")));
    }
    if w.rows != out_len {
        return Err(Error::shape(op, format!("W{w}"), format!("out[{out_len}]")));
    }
    Ok(())
}

/// `W x + b`
pub fn affine_forward<T: Real>(x: &[T], w: &Tensor2<T>, b: &[T]) -> Result<Vec<T>> {
    check_affine("affine_forward", x.len(), w, b.len())?;
    let mut out = vec![T::zero(); w.rows];
    matvec_into(w, x, &mut out);
    for (o, &bi) in out.iter_mut().zip(b) {
        *o = *o + bi;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads<T> {
    pub grad_x: Vec<T>,
    pub grad_w: Tensor2<T>,
    pub grad_b: Vec<T>,
}

pub fn affine_backward<T: Real>(grad_out: &[T], x: &[T], w: &Tensor2<T>) -> Result<AffineGrads<T>> {
    let mut grad_w = Tensor2::zeros(w.rows, w.cols);
    let mut grad_b = vec![T::zero(); w.rows];
    let mut grad_x = vec![T::zero(); w.cols];
    affine_backward_acc(grad_out, x, w, &mut grad_w, &mut grad_b, Some(&mut grad_x))?;
    Ok(AffineGrads { grad_x, grad_w, grad_b })
}

/// Accumulating form of [`affine_backward`]: adds `grad_out ⊗ x` into
/// `grad_w`, `grad_out` into `grad_b` and, when requested, `Wᵀ grad_out`
/// into `grad_x`.
pub fn affine_backward_acc<T: Real>(
    grad_out: &[T],
    x: &[T],
    w: &Tensor2<T>,
    grad_w: &mut Tensor2<T>,
    grad_b: &mut [T],
    grad_x: Option<&mut [T]>,
) -> Result<()> {
    check_affine("affine_backward", x.len(), w, grad_out.len())?;
    if grad_w.shape() != w.shape() {
        return Err(Error::shape("affine_backward", format!("W{w}"), format!("grad_W{grad_w}")));
    }
    if grad_b.len() != w.rows {
        return Err(Error::shape("affine_backward", format!("W{w}"), format!("grad_b[{}]", grad_b.len())));
    }
    for (r, &g) in grad_out.iter().enumerate() {
        grad_b[r] = grad_b[r] + g;
        if g != T::zero() {
            axpy(g, x, grad_w.row_mut(r));
        }
    }
    if let Some(gx) = grad_x {
        if gx.len() != w.cols {
            return Err(Error::shape("affine_backward", format!("W{w}"), format!("grad_x[{}]", gx.len())));
        }
        for (r, &g) in grad_out.iter().enumerate() {
            if g != T::zero() {
                axpy(g, w.row(r), gx);
            }
        }
    }
    Ok(())
}

/// Logistic function in the branch form that never evaluates `exp` of a
/// positive argument.
#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn tanh<T: Real>(z: T) -> T {
    z.tanh()
}

pub fn concat<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

/// Keep/drop decisions for inverted dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    keep: Vec<bool>,
    rate: f64,
    scale: f64,
}

impl DropoutMask {
    /// All-keep mask with unit scale, used in eval mode.
    pub fn identity(len: usize) -> Self {
        Self {
            keep: vec![true; len],
            rate: 0.0,
            scale: 1.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(Self::identity(len));
        }
        let keep = (0..len).map(|_| rng.random::<f64>() >= rate).collect();
        Ok(Self {
            keep,
            rate,
            scale: 1.0 / (1.0 - rate),
        })
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keep_flags(&self) -> &[bool] {
        &self.keep
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// Inverted dropout. The same call applied to an upstream gradient is the
/// backward pass.
pub fn dropout_apply<T: Real>(x: &[T], mask: &DropoutMask) -> Result<Vec<T>> {
    if x.len() != mask.len() {
        return Err(Error::shape("dropout_apply", format!("x[{}]", x.len()), format!("mask[{}]", mask.len())));
    }
    let scale = T::from_f64(mask.scale);
    Ok(x
        .iter()
        .zip(&mask.keep)
        .map(|(&v, &k)| if k { v * scale } else { T::zero() })
        .collect())
}

/// Single-layer LSTM weights. `weight` is `4H × (D + H)` acting on the
/// concatenation `[x_t; h_{t-1}]`; the four row blocks are the input gate,
/// forget gate, candidate cell and output gate, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    pub weight: Tensor2<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LstmParams<T> {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            weight: Tensor2::zeros(4 * hidden, input_dim + hidden),
            bias: vec![T::zero(); 4 * hidden],
        }
    }

    pub fn hidden(&self) -> usize {
        self.bias.len() / 4
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols() - self.hidden()
    }

    fn check(&self) -> Result<()> {
        let h4 = self.bias.len();
        if h4 == 0 || !h4.is_multiple_of(4) || self.weight.rows() != h4 || self.weight.cols() <= h4 / 4 {
            return Err(Error::shape("lstm params", format!("W{}", self.weight), format!("b[{h4}]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Real> LstmCellState<T> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![T::zero(); hidden],
            c: vec![T::zero(); hidden],
        }
    }
}

/// Values saved by one cell step for its backward pass.
#[derive(Debug, Clone)]
pub struct LstmCellCache<T> {
    xh: Vec<T>,
    c_prev: Vec<T>,
    /// Activated gates `[i; f; g; o]`.
    gates: Vec<T>,
    tanh_c: Vec<T>,
}

impl<T: Real> LstmCellCache<T> {
    pub fn input_gate(&self) -> &[T] {
        &self.gates[..self.hidden()]
    }
    pub fn forget_gate(&self) -> &[T] {
        let h = self.hidden();
        &self.gates[h..2 * h]
    }
    pub fn candidate(&self) -> &[T] {
        let h = self.hidden();
        &self.gates[2 * h..3 * h]
    }
    pub fn output_gate(&self) -> &[T] {
        let h = self.hidden();
        &self.gates[3 * h..]
    }
    fn hidden(&self) -> usize {
        self.c_prev.len()
    }
}

pub fn lstm_cell_forward<T: Real>(
    x: &[T],
    prev: &LstmCellState<T>,
    params: &LstmParams<T>,
) -> Result<(LstmCellState<T>, LstmCellCache<T>)> {
    params.check()?;
    let (d, h) = (params.input_dim(), params.hidden());
    if x.len() != d {
        return Err(Error::shape("lstm_cell_forward", format!("x[{}]", x.len()), format!("D={d}")));
    }
    if prev.h.len() != h || prev.c.len() != h {
        return Err(Error::shape(
            "lstm_cell_forward",
            format!("state h[{}] c[{}]", prev.h.len(), prev.c.len()),
            format!("H={h}"),
        ));
    }
    if !all_finite(x) || !all_finite(&prev.h) || !all_finite(&prev.c) {
        return Err(Error::Numeric("non-finite input to lstm_cell_forward".into()));
    }

    let xh = concat(x, &prev.h);
    let mut gates = affine_forward(&xh, &params.weight, &params.bias)?;
    for (k, z) in gates.iter_mut().enumerate() {
        *z = if (2 * h..3 * h).contains(&k) { tanh(*z) } else { sigmoid(*z) };
    }

    let mut c = vec![T::zero(); h];
    let mut tanh_c = vec![T::zero(); h];
    let mut hn = vec![T::zero(); h];
    for j in 0..h {
        let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
        c[j] = f * prev.c[j] + i * g;
        tanh_c[j] = tanh(c[j]);
        hn[j] = o * tanh_c[j];
    }

    let cache = LstmCellCache {
        xh,
        c_prev: prev.c.clone(),
        gates,
        tanh_c,
    };
    Ok((LstmCellState { h: hn, c }, cache))
}

/// Gradients of one LSTM cell step.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellGrads<T> {
    pub params: LstmParams<T>,
    pub x: Vec<T>,
    pub h_prev: Vec<T>,
    pub c_prev: Vec<T>,
}

pub fn lstm_cell_backward<T: Real>(
    grad_h: &[T],
    grad_c: &[T],
    cache: &LstmCellCache<T>,
    params: &LstmParams<T>,
) -> Result<LstmCellGrads<T>> {
    let mut grads = LstmParams::zeros(params.input_dim(), params.hidden());
    let mut grad_x = vec![T::zero(); params.input_dim()];
    let (h_prev, c_prev) = lstm_cell_backward_acc(grad_h, grad_c, cache, params, &mut grads, Some(&mut grad_x))?;
    Ok(LstmCellGrads {
        params: grads,
        x: grad_x,
        h_prev,
        c_prev,
    })
}

/// Accumulates parameter gradients of one cell step into `grads` and
/// returns `(dL/dh_prev, dL/dc_prev)`. `grad_x`, when given, receives
/// `dL/dx_t` (added, not overwritten).
pub fn lstm_cell_backward_acc<T: Real>(
    grad_h: &[T],
    grad_c: &[T],
    cache: &LstmCellCache<T>,
    params: &LstmParams<T>,
    grads: &mut LstmParams<T>,
    grad_x: Option<&mut [T]>,
) -> Result<(Vec<T>, Vec<T>)> {
    params.check()?;
    let (d, h) = (params.input_dim(), params.hidden());
    if cache.hidden() != h || cache.xh.len() != d + h {
        return Err(Error::shape(
            "lstm_cell_backward",
            format!("cache xh[{}] H={}", cache.xh.len(), cache.hidden()),
            format!("D={d} H={h}"),
        ));
    }
    if grad_h.len() != h || grad_c.len() != h {
        return Err(Error::shape(
            "lstm_cell_backward",
            format!("grad h[{}] c[{}]", grad_h.len(), grad_c.len()),
            format!("H={h}"),
        ));
    }
    if grads.weight.shape() != params.weight.shape() {
        return Err(Error::shape("lstm_cell_backward", format!("W{}", params.weight), format!("grad_W{}", grads.weight)));
    }

    let one = T::one();
    let g = &cache.gates;
    let mut dpre = vec![T::zero(); 4 * h];
    let mut dc_prev = vec![T::zero(); h];
    for j in 0..h {
        let (i, f, cand, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
        let tc = cache.tanh_c[j];
        let d_o = grad_h[j] * tc;
        let dc = grad_c[j] + grad_h[j] * o * (one - tc * tc);
        dpre[j] = dc * cand * i * (one - i);
        dpre[h + j] = dc * cache.c_prev[j] * f * (one - f);
        dpre[2 * h + j] = dc * i * (one - cand * cand);
        dpre[3 * h + j] = d_o * o * (one - o);
        dc_prev[j] = dc * f;
    }

    let mut dh_prev = vec![T::zero(); h];
    for (r, &gr) in dpre.iter().enumerate() {
        grads.bias[r] = grads.bias[r] + gr;
        if gr == T::zero() {
            continue;
        }
        axpy(gr, &cache.xh, grads.weight.row_mut(r));
        axpy(gr, &params.weight.row(r)[d..], &mut dh_prev);
    }
    if let Some(gx) = grad_x {
        if gx.len() != d {
            return Err(Error::shape("lstm_cell_backward", format!("grad_x[{}]", gx.len()), format!("D={d}")));
        }
        for (r, &gr) in dpre.iter().enumerate() {
            if gr != T::zero() {
                axpy(gr, &params.weight.row(r)[..d], gx);
            }
        }
    }
    Ok((dh_prev, dc_prev))
}

/// Per-timestep caches of a sequence forward pass.
#[derive(Debug, Clone)]
pub struct LstmTrace<T> {
    pub steps: Vec<LstmCellCache<T>>,
}

impl<T> LstmTrace<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Runs the LSTM over the rows of `tokens` (one token per row) from a zero
/// initial state and returns the final hidden state.
pub fn lstm_sequence_forward<T: Real>(tokens: &Tensor2<T>, params: &LstmParams<T>) -> Result<(Vec<T>, LstmTrace<T>)> {
    params.check()?;
    if tokens.rows() == 0 {
        return Err(Error::data(None, "empty token sequence"));
    }
    if tokens.cols() != params.input_dim() {
        return Err(Error::shape(
            "lstm_sequence_forward",
            format!("tokens{tokens}"),
            format!("D={}", params.input_dim()),
        ));
    }
    let mut state = LstmCellState::zeros(params.hidden());
    let mut steps = Vec::with_capacity(tokens.rows());
    for t in 0..tokens.rows() {
        let (next, cache) = lstm_cell_forward(tokens.row(t), &state, params)?;
        steps.push(cache);
        state = next;
    }
    Ok((state.h, LstmTrace { steps }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmSequenceGrads<T> {
    pub params: LstmParams<T>,
    pub tokens: Tensor2<T>,
}

/// Backpropagation through time from a gradient on the final hidden state.
pub fn lstm_sequence_backward<T: Real>(
    grad_final_h: &[T],
    trace: &LstmTrace<T>,
    params: &LstmParams<T>,
) -> Result<LstmSequenceGrads<T>> {
    let mut grads = LstmParams::zeros(params.input_dim(), params.hidden());
    let mut tokens = Tensor2::zeros(trace.len(), params.input_dim());
    lstm_sequence_backward_acc(grad_final_h, trace, params, &mut grads, Some(&mut tokens))?;
    Ok(LstmSequenceGrads { params: grads, tokens })
}

pub fn lstm_sequence_backward_acc<T: Real>(
    grad_final_h: &[T],
    trace: &LstmTrace<T>,
    params: &LstmParams<T>,
    grads: &mut LstmParams<T>,
    mut token_grads: Option<&mut Tensor2<T>>,
) -> Result<()> {
    let h = params.hidden();
    if trace.is_empty() {
        return Err(Error::shape("lstm_sequence_backward", "empty trace", format!("H={h}")));
    }
    if grad_final_h.len() != h {
        return Err(Error::shape(
            "lstm_sequence_backward",
            format!("grad_h[{}]", grad_final_h.len()),
            format!("H={h}"),
        ));
    }
    if let Some(tg) = token_grads.as_deref() {
        if tg.shape() != (trace.len(), params.input_dim()) {
            return Err(Error::shape(
                "lstm_sequence_backward",
                format!("token grads{tg}"),
                format!("[{}x{}]", trace.len(), params.input_dim()),
            ));
        }
    }
    let mut dh = grad_final_h.to_vec();
    let mut dc = vec![T::zero(); h];
    for (t, cache) in trace.steps.iter().enumerate().rev() {
        let gx = token_grads.as_deref_mut().map(|tg| tg.row_mut(t));
        let (dh_prev, dc_prev) = lstm_cell_backward_acc(&dh, &dc, cache, params, grads, gx)?;
        dh = dh_prev;
        dc = dc_prev;
    }
    Ok(())
}
