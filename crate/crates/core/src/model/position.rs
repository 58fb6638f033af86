//! Sinusoidal position embeddings and the absolute/relative index layout of one forward pass.

use ndarray::Array2;

use super::ModelError;

/// Interleaved sinusoid: column `2j` is `sin(p / 10000^(2j/d))`, column `2j+1` the matching cosine.
///
/// Negative indices evaluate the same formula at the signed value.
pub fn sinusoidal_embed(indices: &[i64], d_model: usize) -> Array2<f64> {
    assert!(d_model % 2 == 0, "d_model must be even, got {d_model}");
    let mut out = Array2::zeros((indices.len(), d_model));
    for (row, &p) in indices.iter().enumerate() {
        for j in 0..d_model / 2 {
            let freq = 10000f64.powf(-((2 * j) as f64) / d_model as f64);
            let angle = p as f64 * freq;
            out[[row, 2 * j]] = angle.sin();
            out[[row, 2 * j + 1]] = angle.cos();
        }
    }
    out
}

/// Position indices for the concatenated `[inputs, <sos>, outputs]` sequence.
///
/// `abs_x` and `abs_y` count from zero (`abs_y[0]` is `<sos>`); `rel_x` puts 0 on the
/// input currently being generated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionPlan {
    pub abs_x: Vec<i64>,
    pub abs_y: Vec<i64>,
    pub rel_x: Vec<i64>,
}

impl PositionPlan {
    /// `n_inputs` input positions with relative 0 at `center`, and `n_outputs` output
    /// positions including `<sos>`.
    pub fn centered(n_inputs: usize, center: usize, n_outputs: usize) -> Result<Self, ModelError> {
        if center >= n_inputs {
            return Err(ModelError::Plan(format!(
                "relative origin {center} outside {n_inputs} inputs"
            )));
        }
        if n_outputs == 0 {
            return Err(ModelError::Plan("output segment needs the <sos> position".into()));
        }
        Ok(Self {
            abs_x: (0..n_inputs as i64).collect(),
            abs_y: (0..n_outputs as i64).collect(),
            rel_x: (0..n_inputs as i64).map(|i| i - center as i64).collect(),
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.abs_x.len()
    }

    /// Output positions including `<sos>`.
    pub fn n_outputs(&self) -> usize {
        self.abs_y.len()
    }

    /// Index of the input carrying relative position 0.
    pub fn center(&self) -> Option<usize> {
        self.rel_x.iter().position(|&r| r == 0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts_up = |v: &[i64]| v.iter().enumerate().all(|(i, &p)| p == i as i64);
        if !counts_up(&self.abs_x) || !counts_up(&self.abs_y) {
            return Err(ModelError::Plan("absolute indices must count up from 0".into()));
        }
        if self.abs_y.is_empty() {
            return Err(ModelError::Plan("output segment needs the <sos> position".into()));
        }
        if self.rel_x.len() != self.abs_x.len() {
            return Err(ModelError::Plan("relative and absolute input lengths differ".into()));
        }
        if self.rel_x.windows(2).any(|w| w[1] != w[0] + 1) || self.center().is_none() {
            return Err(ModelError::Plan(
                "relative indices must step by 1 and contain 0".into(),
            ));
        }
        Ok(())
    }
}

/// Layout for target input `shift` after a prompt of `t_prompt` inputs and `u_prompt` outputs,
/// with `u_cur` outputs generated so far.
pub fn make_position_plan(
    t_prompt: usize,
    t_len: usize,
    shift: usize,
    u_prompt: usize,
    u_cur: usize,
) -> Result<PositionPlan, ModelError> {
    if shift >= t_len {
        return Err(ModelError::Plan(format!("shift {shift} outside 0..{t_len}")));
    }
    PositionPlan::centered(t_prompt + t_len, t_prompt + shift, u_prompt + u_cur + 1)
}
