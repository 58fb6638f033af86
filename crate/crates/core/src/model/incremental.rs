//! Key/value cache for extending the output segment one token at a time.

use ndarray::{s, Array1, Array2, Axis};

use super::transformer::{forward_batch, gelu, layer_norm, log_softmax};
use super::{sinusoidal_embed, Float, ModelError, ModelParams, PositionPlan};

/// Per-layer keys and values of every position seen so far in one sequence.
#[derive(Debug, Clone)]
pub struct DecodeState<F> {
    keys: Vec<Array2<F>>,
    values: Vec<Array2<F>>,
    next_abs_y: i64,
}

impl<F: Float> DecodeState<F> {
    /// Number of positions cached (inputs, `<sos>` and outputs).
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<F: Float> ModelParams<F> {
    /// Full pass over `[x, <sos>, y]` under `plan`; returns the cache and the
    /// log-distribution after the last output position.
    pub fn begin_decode(
        &self,
        x: &[usize],
        y: &[usize],
        plan: &PositionPlan,
    ) -> Result<(DecodeState<F>, Array1<F>), ModelError> {
        let tape = forward_batch(self, x, y, std::slice::from_ref(plan))?;
        let d = self.config.d_model;
        let (keys, values) = (0..self.layers.len())
            .map(|l| tape.keys_values(l, 0, d))
            .unzip();
        let last = tape.log_probs().row(tape.log_probs().nrows() - 1).to_owned();
        let next_abs_y = plan.abs_y.last().copied().unwrap_or(0) + 1;
        Ok((
            DecodeState {
                keys,
                values,
                next_abs_y,
            },
            last,
        ))
    }

    /// Appends one output token and returns the log-distribution that follows it.
    pub fn extend_decode(&self, state: &mut DecodeState<F>, token: usize) -> Result<Array1<F>, ModelError> {
        self.check_ids(&[], &[token])?;
        self.check_len(state.len() + 1)?;
        let cfg = &self.config;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = F::cst(1.0 / (dh as f64).sqrt());

        let pe = sinusoidal_embed(&[state.next_abs_y], d);
        let mut h: Array2<F> = self.output_embed.slice(s![token..token + 1, ..]).to_owned();
        h.zip_mut_with(&pe, |v, &p| *v += F::cst(p));

        for (l, layer) in self.layers.iter().enumerate() {
            let (normed, _) = layer_norm(&h, &layer.ln1_gain, &layer.ln1_bias);
            let mut qkv = normed.dot(&layer.w_qkv);
            qkv.row_mut(0).zip_mut_with(&layer.b_qkv, |v, &b| *v += b);
            state.keys[l]
                .push_row(qkv.slice(s![0, d..2 * d]))
                .expect("key width matches d_model");
            state.values[l]
                .push_row(qkv.slice(s![0, 2 * d..3 * d]))
                .expect("value width matches d_model");

            let mut ctx = Array2::zeros((1, d));
            for head in 0..cfg.n_heads {
                let cols = head * dh..(head + 1) * dh;
                let q = qkv.slice(s![0, cols.clone()]);
                let k = state.keys[l].slice(s![.., cols.clone()]);
                let v = state.values[l].slice(s![.., cols.clone()]);
                let mut scores: Array1<F> = k.dot(&q) * scale;
                let max = scores.fold(F::neg_infinity(), |m, &v| m.max(v));
                scores.mapv_inplace(|v| (v - max).exp().flush());
                let z = scores.sum();
                scores.mapv_inplace(|v| v / z);
                ctx.slice_mut(s![0, cols]).assign(&v.t().dot(&scores));
            }
            let mut o = ctx.dot(&layer.w_o);
            o.row_mut(0).zip_mut_with(&layer.b_o, |v, &b| *v += b);
            h += &o;

            let (normed, _) = layer_norm(&h, &layer.ln2_gain, &layer.ln2_bias);
            let mut ff = normed.dot(&layer.w_ff1);
            ff.row_mut(0).zip_mut_with(&layer.b_ff1, |v, &b| *v += b);
            ff.mapv_inplace(gelu);
            let mut z = ff.dot(&layer.w_ff2);
            z.row_mut(0).zip_mut_with(&layer.b_ff2, |v, &b| *v += b);
            h += &z;
        }
        state.next_abs_y += 1;

        let (normed, _) = layer_norm(&h, &self.final_gain, &self.final_bias);
        let mut logits = normed.dot(&self.w_out);
        logits.row_mut(0).zip_mut_with(&self.b_out, |v, &b| *v += b);
        log_softmax(&mut logits);
        Ok(logits.index_axis_move(Axis(0), 0))
    }
}
