//! Batched forward pass over several position plans of one `(x, y)` pair, and its
//! reverse-mode gradient.
//!
//! Every plan in a batch shares the token ids; only the position indices differ.
//! Hidden states of all sequences are stacked row-wise into one `(N*L) x d` matrix
//! so the dense projections run as single matrix products.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

use super::{Float, LayerParams, ModelError, ModelParams, PositionPlan};
use crate::lattice::LogProbLattice;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(super) struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

pub(super) fn layer_norm<F: Float>(
    x: &Array2<F>,
    gain: &Array1<F>,
    bias: &Array1<F>,
) -> (Array2<F>, LnCache<F>) {
    let d = F::cst(x.ncols() as f64);
    let eps = F::cst(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        *r = F::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let out = &xhat * gain + bias;
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward<F: Float>(
    dout: &Array2<F>,
    cache: &LnCache<F>,
    gain: &Array1<F>,
    dgain: &mut Array1<F>,
    dbias: &mut Array1<F>,
) -> Array2<F> {
    *dgain += &(dout * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dout.sum_axis(Axis(0));
    let d = F::cst(dout.ncols() as f64);
    let mut dx = dout * gain;
    for ((mut row, xhat), &rstd) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_g = row.sum() / d;
        let mean_gx = row.iter().zip(xhat.iter()).map(|(&g, &x)| g * x).sum::<F>() / d;
        row.zip_mut_with(&xhat, |g, &x| *g = rstd * (*g - mean_g - x * mean_gx));
    }
    dx
}

/// `tanh` through one `exp`; libm's version dominates the feed-forward cost otherwise.
/// Absolute error stays at a few ulps of 1.
#[inline]
fn tanh<F: Float>(z: F) -> F {
    let e = (F::cst(-2.0) * z.abs()).exp();
    let t = (F::one() - e) / (F::one() + e);
    if z < F::zero() {
        -t
    } else {
        t
    }
}

pub(super) fn gelu<F: Float>(v: F) -> F {
    let c = F::cst(GELU_C);
    let k = F::cst(0.044715);
    let half = F::cst(0.5);
    half * v * (F::one() + tanh(c * (v + k * v * v * v)))
}

fn gelu_grad<F: Float>(v: F) -> F {
    let c = F::cst(GELU_C);
    let k = F::cst(0.044715);
    let half = F::cst(0.5);
    let th = tanh(c * (v + k * v * v * v));
    half * (F::one() + th)
        + half * v * (F::one() - th * th) * c * (F::one() + F::cst(3.0) * k * v * v)
}

/// Row-wise log-softmax.
pub(super) fn log_softmax<F: Float>(logits: &mut Array2<F>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        row.mapv_inplace(|v| v - lse);
    }
}

/// Whether query position `i` may attend to key position `j` in a sequence whose
/// first `n_in` positions are inputs.
#[inline]
pub(super) fn allowed(i: usize, j: usize, n_in: usize) -> bool {
    j < n_in || j <= i
}

struct LayerTape<F> {
    ln1: LnCache<F>,
    normed1: Array2<F>,
    qkv: Array2<F>,
    /// Attention probabilities per `(sequence, head)`, `L x L`.
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
    ln2: LnCache<F>,
    normed2: Array2<F>,
    ff_pre: Array2<F>,
    ff_act: Array2<F>,
}

/// Everything the backward pass needs from one batched forward pass.
pub struct LatticeTape<F> {
    n_seq: usize,
    n_in: usize,
    n_out: usize,
    x: Vec<usize>,
    y: Vec<usize>,
    layers: Vec<LayerTape<F>>,
    final_ln: LnCache<F>,
    final_out: Array2<F>,
    /// Output-segment log-probabilities, `(N * n_out) x (V+1)`.
    log_probs: Array2<F>,
}

impl<F: Float> LatticeTape<F> {
    pub fn log_probs(&self) -> &Array2<F> {
        &self.log_probs
    }

    /// Key and value rows of layer `layer` for sequence `seq`.
    pub(super) fn keys_values(&self, layer: usize, seq: usize, d: usize) -> (Array2<F>, Array2<F>) {
        let len = self.n_in + self.n_out;
        let rows = seq * len..(seq + 1) * len;
        let qkv = &self.layers[layer].qkv;
        (
            qkv.slice(s![rows.clone(), d..2 * d]).to_owned(),
            qkv.slice(s![rows, 2 * d..3 * d]).to_owned(),
        )
    }
}

/// Sinusoid lookup covering every index that appears in `plans`.
struct PeTable {
    min: i64,
    table: Array2<f64>,
}

impl PeTable {
    fn new(plans: &[PositionPlan], d: usize) -> Self {
        let all = plans
            .iter()
            .flat_map(|p| p.abs_x.iter().chain(&p.abs_y).chain(&p.rel_x).copied());
        let (min, max) = all.fold((i64::MAX, i64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let indices: Vec<i64> = (min..=max).collect();
        Self {
            min,
            table: super::sinusoidal_embed(&indices, d),
        }
    }

    fn row(&self, index: i64) -> ndarray::ArrayView1<'_, f64> {
        self.table.row((index - self.min) as usize)
    }
}

fn embed<F: Float>(params: &ModelParams<F>, x: &[usize], y: &[usize], plans: &[PositionPlan]) -> Array2<F> {
    let d = params.config.d_model;
    let n_in = x.len();
    let len = n_in + y.len() + 1;
    let pe = PeTable::new(plans, d);
    let mut h = Array2::zeros((plans.len() * len, d));
    for (s, plan) in plans.iter().enumerate() {
        let base = s * len;
        for (i, &tok) in x.iter().enumerate() {
            let mut row = h.row_mut(base + i);
            row.assign(&params.input_embed.row(tok));
            let (a, r) = (pe.row(plan.abs_x[i]), pe.row(plan.rel_x[i]));
            row.zip_mut_with(&(&a + &r), |v, &p| *v += F::cst(p));
        }
        for u in 0..=y.len() {
            let mut row = h.row_mut(base + n_in + u);
            if u == 0 {
                row.assign(&params.sos);
            } else {
                row.assign(&params.output_embed.row(y[u - 1]));
            }
            row.zip_mut_with(&pe.row(plan.abs_y[u]), |v, &p| *v += F::cst(p));
        }
    }
    h
}

/// Masked multi-head attention for each stacked sequence; returns the context and
/// the probability matrices.
fn attention<F: Float>(
    qkv: &Array2<F>,
    n_seq: usize,
    len: usize,
    n_in: usize,
    n_heads: usize,
) -> (Array2<F>, Vec<Array2<F>>) {
    let d = qkv.ncols() / 3;
    let dh = d / n_heads;
    let scale = F::cst(1.0 / (dh as f64).sqrt());
    let mut ctx = Array2::zeros((n_seq * len, d));
    let mut probs = Vec::with_capacity(n_seq * n_heads);
    for s in 0..n_seq {
        let rows = s * len..(s + 1) * len;
        for h in 0..n_heads {
            let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut p = q.dot(&k.t());
            for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                let mut max = F::neg_infinity();
                for (j, val) in row.iter_mut().enumerate() {
                    if allowed(i, j, n_in) {
                        *val = *val * scale;
                        max = max.max(*val);
                    }
                }
                let mut z = F::zero();
                for (j, val) in row.iter_mut().enumerate() {
                    if allowed(i, j, n_in) {
                        *val = (*val - max).exp().flush();
                        z += *val;
                    } else {
                        *val = F::zero();
                    }
                }
                row.mapv_inplace(|v| v / z);
            }
            ctx.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
    }
    (ctx, probs)
}

fn attention_backward<F: Float>(
    dctx: &Array2<F>,
    qkv: &Array2<F>,
    probs: &[Array2<F>],
    n_seq: usize,
    len: usize,
    n_heads: usize,
) -> Array2<F> {
    let d = qkv.ncols() / 3;
    let dh = d / n_heads;
    let scale = F::cst(1.0 / (dh as f64).sqrt());
    let mut dqkv = Array2::zeros(qkv.dim());
    for s in 0..n_seq {
        let rows = s * len..(s + 1) * len;
        for h in 0..n_heads {
            let p = &probs[s * n_heads + h];
            let q_cols = h * dh..(h + 1) * dh;
            let k_cols = d + h * dh..d + (h + 1) * dh;
            let v_cols = 2 * d + h * dh..2 * d + (h + 1) * dh;
            let q = qkv.slice(s![rows.clone(), q_cols.clone()]);
            let k = qkv.slice(s![rows.clone(), k_cols.clone()]);
            let v = qkv.slice(s![rows.clone(), v_cols.clone()]);
            let d_out = dctx.slice(s![rows.clone(), q_cols.clone()]);

            dqkv.slice_mut(s![rows.clone(), v_cols]).assign(&p.t().dot(&d_out));
            let mut ds = d_out.dot(&v.t());
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = drow.iter().zip(prow.iter()).map(|(&g, &pp)| g * pp).sum::<F>();
                drow.zip_mut_with(&prow, |g, &pp| *g = pp * (*g - dot) * scale);
            }
            dqkv.slice_mut(s![rows.clone(), q_cols]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![rows.clone(), k_cols]).assign(&ds.t().dot(&q));
        }
    }
    dqkv
}

fn add_bias<F: Float>(m: &mut Array2<F>, bias: &Array1<F>) {
    for mut row in m.rows_mut() {
        row += bias;
    }
}

fn linear<F: Float>(x: &ArrayView2<'_, F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut out = x.dot(w);
    add_bias(&mut out, b);
    out
}

fn layer_forward<F: Float>(
    layer: &LayerParams<F>,
    h: &mut Array2<F>,
    n_seq: usize,
    len: usize,
    n_in: usize,
    n_heads: usize,
) -> LayerTape<F> {
    let (normed1, ln1) = layer_norm(h, &layer.ln1_gain, &layer.ln1_bias);
    let qkv = linear(&normed1.view(), &layer.w_qkv, &layer.b_qkv);
    let (ctx, probs) = attention(&qkv, n_seq, len, n_in, n_heads);
    *h += &linear(&ctx.view(), &layer.w_o, &layer.b_o);
    let (normed2, ln2) = layer_norm(h, &layer.ln2_gain, &layer.ln2_bias);
    let ff_pre = linear(&normed2.view(), &layer.w_ff1, &layer.b_ff1);
    let ff_act = ff_pre.mapv(gelu);
    *h += &linear(&ff_act.view(), &layer.w_ff2, &layer.b_ff2);
    LayerTape {
        ln1,
        normed1,
        qkv,
        probs,
        ctx,
        ln2,
        normed2,
        ff_pre,
        ff_act,
    }
}

fn accumulate_linear<F: Float>(
    input: &Array2<F>,
    dout: &Array2<F>,
    dw: &mut Array2<F>,
    db: &mut Array1<F>,
) {
    general_mat_mul(F::one(), &input.t(), dout, F::one(), dw);
    *db += &dout.sum_axis(Axis(0));
}

fn layer_backward<F: Float>(
    layer: &LayerParams<F>,
    tape: &LayerTape<F>,
    grad: &mut LayerParams<F>,
    dh: Array2<F>,
    n_seq: usize,
    len: usize,
    n_heads: usize,
) -> Array2<F> {
    accumulate_linear(&tape.ff_act, &dh, &mut grad.w_ff2, &mut grad.b_ff2);
    let mut dff = dh.dot(&layer.w_ff2.t());
    dff.zip_mut_with(&tape.ff_pre, |g, &pre| *g = *g * gelu_grad(pre));
    accumulate_linear(&tape.normed2, &dff, &mut grad.w_ff1, &mut grad.b_ff1);
    let dnormed2 = dff.dot(&layer.w_ff1.t());
    let dh1 = dh
        + layer_norm_backward(
            &dnormed2,
            &tape.ln2,
            &layer.ln2_gain,
            &mut grad.ln2_gain,
            &mut grad.ln2_bias,
        );

    accumulate_linear(&tape.ctx, &dh1, &mut grad.w_o, &mut grad.b_o);
    let dctx = dh1.dot(&layer.w_o.t());
    let dqkv = attention_backward(&dctx, &tape.qkv, &tape.probs, n_seq, len, n_heads);
    accumulate_linear(&tape.normed1, &dqkv, &mut grad.w_qkv, &mut grad.b_qkv);
    let dnormed1 = dqkv.dot(&layer.w_qkv.t());
    dh1 + layer_norm_backward(
        &dnormed1,
        &tape.ln1,
        &layer.ln1_gain,
        &mut grad.ln1_gain,
        &mut grad.ln1_bias,
    )
}

/// Runs the model once per plan, keeping every activation the backward pass needs.
pub(super) fn forward_batch<F: Float>(
    params: &ModelParams<F>,
    x: &[usize],
    y: &[usize],
    plans: &[PositionPlan],
) -> Result<LatticeTape<F>, ModelError> {
    let cfg = &params.config;
    params.check_ids(x, y)?;
    let n_in = x.len();
    let n_out = y.len() + 1;
    let len = n_in + n_out;
    params.check_len(len)?;
    if plans.is_empty() {
        return Err(ModelError::Plan("no position plans".into()));
    }
    for plan in plans {
        plan.validate()?;
        if plan.n_inputs() != n_in || plan.n_outputs() != n_out {
            return Err(ModelError::Plan(format!(
                "plan covers {}+{} positions but sequence has {n_in}+{n_out}",
                plan.n_inputs(),
                plan.n_outputs()
            )));
        }
    }
    let n_seq = plans.len();
    let mut h = embed(params, x, y, plans);
    let layers = params
        .layers
        .iter()
        .map(|layer| layer_forward(layer, &mut h, n_seq, len, n_in, cfg.n_heads))
        .collect();

    let out_rows: Vec<usize> = (0..n_seq)
        .flat_map(|s| (s * len + n_in)..((s + 1) * len))
        .collect();
    let h_out = h.select(Axis(0), &out_rows);
    let (final_out, final_ln) = layer_norm(&h_out, &params.final_gain, &params.final_bias);
    let mut log_probs = linear(&final_out.view(), &params.w_out, &params.b_out);
    log_softmax(&mut log_probs);
    Ok(LatticeTape {
        n_seq,
        n_in,
        n_out,
        x: x.to_vec(),
        y: y.to_vec(),
        layers,
        final_ln,
        final_out,
        log_probs,
    })
}

/// Accumulates into `grads` the gradient of `sum(grad_log_probs * log_probs)`.
pub(super) fn backward_batch<F: Float>(
    params: &ModelParams<F>,
    tape: &LatticeTape<F>,
    grad_log_probs: &Array2<F>,
    grads: &mut ModelParams<F>,
) -> Result<(), ModelError> {
    if grad_log_probs.dim() != tape.log_probs.dim() {
        return Err(ModelError::Shape(format!(
            "gradient {:?} vs output {:?}",
            grad_log_probs.dim(),
            tape.log_probs.dim()
        )));
    }
    let (n_seq, n_in, n_out) = (tape.n_seq, tape.n_in, tape.n_out);
    let len = n_in + n_out;
    let d = params.config.d_model;

    let mut dlogits = grad_log_probs.clone();
    for (mut g, lp) in dlogits.rows_mut().into_iter().zip(tape.log_probs.rows()) {
        let total = g.sum();
        g.zip_mut_with(&lp, |gv, &l| *gv = (*gv - l.exp() * total).flush());
    }
    accumulate_linear(&tape.final_out, &dlogits, &mut grads.w_out, &mut grads.b_out);
    let dfinal = dlogits.dot(&params.w_out.t());
    let dh_out = layer_norm_backward(
        &dfinal,
        &tape.final_ln,
        &params.final_gain,
        &mut grads.final_gain,
        &mut grads.final_bias,
    );

    let mut dh = Array2::zeros((n_seq * len, d));
    for s in 0..n_seq {
        dh.slice_mut(s![s * len + n_in..(s + 1) * len, ..])
            .assign(&dh_out.slice(s![s * n_out..(s + 1) * n_out, ..]));
    }
    for (i, layer) in params.layers.iter().enumerate().rev() {
        dh = layer_backward(
            layer,
            &tape.layers[i],
            &mut grads.layers[i],
            dh,
            n_seq,
            len,
            params.config.n_heads,
        );
    }

    for s in 0..n_seq {
        let base = s * len;
        for (i, &tok) in tape.x.iter().enumerate() {
            let mut row = grads.input_embed.row_mut(tok);
            row += &dh.row(base + i);
        }
        grads.sos += &dh.row(base + n_in);
        for (u, &tok) in tape.y.iter().enumerate() {
            let mut row = grads.output_embed.row_mut(tok);
            row += &dh.row(base + n_in + 1 + u);
        }
    }
    Ok(())
}

/// Output-segment log-distributions for one plan, `(U_cur + 1) x (V + 1)`.
pub fn forward_row<F: Float>(
    params: &ModelParams<F>,
    x_full: &[usize],
    y_so_far: &[usize],
    plan: &PositionPlan,
) -> Result<Array2<F>, ModelError> {
    Ok(forward_batch(params, x_full, y_so_far, std::slice::from_ref(plan))?.log_probs)
}

fn shift_plans(t_len: usize, u_len: usize) -> Result<Vec<PositionPlan>, ModelError> {
    (0..t_len)
        .map(|t| super::make_position_plan(0, t_len, t, 0, u_len))
        .collect()
}

fn to_lattice<F: Float>(log_probs: &Array2<F>, t_len: usize, u_len: usize) -> Result<LogProbLattice, ModelError> {
    let vbar = log_probs.ncols();
    let entries = Array3::from_shape_fn((t_len, u_len + 1, vbar), |(t, u, k)| {
        log_probs[[t * (u_len + 1) + u, k]].as_f64()
    });
    Ok(LogProbLattice::new(entries)?)
}

/// The `T x (U+1) x (V+1)` lattice: relative origin on each input in turn.
pub fn build_lattice<F: Float>(params: &ModelParams<F>, x: &[usize], y: &[usize]) -> Result<LogProbLattice, ModelError> {
    Ok(build_lattice_with_tape(params, x, y)?.0)
}

pub fn build_lattice_with_tape<F: Float>(
    params: &ModelParams<F>,
    x: &[usize],
    y: &[usize],
) -> Result<(LogProbLattice, LatticeTape<F>), ModelError> {
    if x.is_empty() {
        return Err(ModelError::Shape("input sequence must be nonempty".into()));
    }
    let plans = shift_plans(x.len(), y.len())?;
    let tape = forward_batch(params, x, y, &plans)?;
    let lattice = to_lattice(&tape.log_probs, x.len(), y.len())?;
    Ok((lattice, tape))
}

impl<F: Float> LatticeTape<F> {
    /// Accumulates parameter gradients for a lattice-shaped upstream gradient.
    pub fn backward(
        &self,
        params: &ModelParams<F>,
        grad_lattice: &Array3<f64>,
        grads: &mut ModelParams<F>,
    ) -> Result<(), ModelError> {
        let (t_len, u1, vbar) = grad_lattice.dim();
        if t_len != self.n_seq || u1 != self.n_out || vbar != self.log_probs.ncols() {
            return Err(ModelError::Shape(format!(
                "gradient lattice {:?} vs model output {}x{}x{}",
                grad_lattice.dim(),
                self.n_seq,
                self.n_out,
                self.log_probs.ncols()
            )));
        }
        let flat = Array2::from_shape_fn((t_len * u1, vbar), |(r, k)| {
            F::cst(grad_lattice[[r / u1, r % u1, k]]).flush()
        });
        backward_batch(params, self, &flat, grads)
    }
}

/// Parameter gradients of `sum(grad_lattice * lattice(params, x, y))`.
pub fn backward_pass<F: Float>(
    params: &ModelParams<F>,
    x: &[usize],
    y: &[usize],
    grad_lattice: &Array3<f64>,
) -> Result<ModelParams<F>, ModelError> {
    let (_, tape) = build_lattice_with_tape(params, x, y)?;
    let mut grads = params.zeros_like();
    tape.backward(params, grad_lattice, &mut grads)?;
    Ok(grads)
}
