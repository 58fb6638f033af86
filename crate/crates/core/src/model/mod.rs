//! Toy decoder-only Transformer producing one lattice row per relative shift.
//!
//! The model consumes `[inputs, <sos>, outputs]` as one sequence. Inputs carry a
//! token embedding plus absolute and relative sinusoidal position embeddings;
//! outputs carry a token embedding plus the absolute embedding only. Inputs attend
//! bidirectionally among themselves, outputs attend to every input and causally to
//! earlier outputs.

mod checkpoint;
mod incremental;
mod position;
mod transformer;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use num_traits::FromPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::LatticeError;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use incremental::DecodeState;
pub use position::{make_position_plan, sinusoidal_embed, PositionPlan};
pub use transformer::{backward_pass, build_lattice, build_lattice_with_tape, forward_row, LatticeTape};

/// Scalar type the model can run in. Training uses `f32`; gradient checks use `f64`.
pub trait Float:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    fn cst(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite conversion")
    }

    /// Zero for subnormal values, which are far below any signal here and slow the FPU down.
    #[inline]
    fn flush(self) -> Self {
        if self.abs() < Self::min_positive_value() {
            Self::zero()
        } else {
            self
        }
    }
}

impl Float for f32 {}
impl Float for f64 {}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_len {max_len}")]
    LengthOverflow { len: usize, max_len: usize },
    #[error("{segment} id {id} at position {pos} is outside [0, {vocab})")]
    IdOutOfRange {
        segment: &'static str,
        pos: usize,
        id: usize,
        vocab: usize,
    },
    #[error("position plan: {0}")]
    Plan(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Input symbol vocabulary size.
    pub input_vocab: usize,
    /// Output token vocabulary size, blank excluded.
    pub output_vocab: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 128,
            input_vocab: 20,
            output_vocab: 24,
            max_len: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("input_vocab", self.input_vocab),
            ("output_vocab", self.output_vocab),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.d_model % 2 != 0 {
            return Err(ModelError::Config(format!("d_model {} must be even", self.d_model)));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Extended output vocabulary `V + 1`.
    pub fn vbar(&self) -> usize {
        self.output_vocab + 1
    }

    pub fn blank(&self) -> usize {
        self.output_vocab
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gain: Array1<F>,
    pub ln1_bias: Array1<F>,
    /// Fused query/key/value projection, `d x 3d`.
    pub w_qkv: Array2<F>,
    pub b_qkv: Array1<F>,
    pub w_o: Array2<F>,
    pub b_o: Array1<F>,
    pub ln2_gain: Array1<F>,
    pub ln2_bias: Array1<F>,
    pub w_ff1: Array2<F>,
    pub b_ff1: Array1<F>,
    pub w_ff2: Array2<F>,
    pub b_ff2: Array1<F>,
}

/// Every learnable tensor of the model. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub input_embed: Array2<F>,
    pub output_embed: Array2<F>,
    pub sos: Array1<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_gain: Array1<F>,
    pub final_bias: Array1<F>,
    /// Projection to the extended vocabulary, `d x (V+1)`.
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
}

fn uniform_matrix<F: Float>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || F::cst(rng.gen_range(-limit..limit)))
}

impl<F: Float> ModelParams<F> {
    /// Seeded scaled-uniform initialization.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let ones = || Array1::from_elem(d, F::one());
        let zeros = |n| Array1::from_elem(n, F::zero());
        let lecun = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();

        let input_embed = uniform_matrix(&mut rng, config.input_vocab, d, 1.0);
        let output_embed = uniform_matrix(&mut rng, config.output_vocab, d, 1.0);
        let sos = uniform_matrix::<F>(&mut rng, 1, d, 1.0).row(0).to_owned();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_gain: ones(),
                ln1_bias: zeros(d),
                w_qkv: uniform_matrix(&mut rng, d, 3 * d, lecun(d)),
                b_qkv: zeros(3 * d),
                w_o: uniform_matrix(&mut rng, d, d, lecun(d)),
                b_o: zeros(d),
                ln2_gain: ones(),
                ln2_bias: zeros(d),
                w_ff1: uniform_matrix(&mut rng, d, config.d_ff, he(d)),
                b_ff1: zeros(config.d_ff),
                w_ff2: uniform_matrix(&mut rng, config.d_ff, d, lecun(config.d_ff)),
                b_ff2: zeros(d),
            });
        }
        let w_out = uniform_matrix(&mut rng, d, config.vbar(), lecun(d));
        Ok(Self {
            config: config.clone(),
            input_embed,
            output_embed,
            sos,
            layers,
            final_gain: ones(),
            final_bias: zeros(d),
            w_out,
            b_out: zeros(config.vbar()),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, mut t) in out.tensors_mut() {
            t.fill(F::zero());
        }
        out
    }

    /// Tensors in a fixed order with stable names.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = vec![
            ("embed.input".to_string(), self.input_embed.view().into_dyn()),
            ("embed.output".to_string(), self.output_embed.view().into_dyn()),
            ("embed.sos".to_string(), self.sos.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layer{i}.{n}");
            out.extend([
                (p("ln1.gain"), l.ln1_gain.view().into_dyn()),
                (p("ln1.bias"), l.ln1_bias.view().into_dyn()),
                (p("attn.w_qkv"), l.w_qkv.view().into_dyn()),
                (p("attn.b_qkv"), l.b_qkv.view().into_dyn()),
                (p("attn.w_o"), l.w_o.view().into_dyn()),
                (p("attn.b_o"), l.b_o.view().into_dyn()),
                (p("ln2.gain"), l.ln2_gain.view().into_dyn()),
                (p("ln2.bias"), l.ln2_bias.view().into_dyn()),
                (p("ff.w1"), l.w_ff1.view().into_dyn()),
                (p("ff.b1"), l.b_ff1.view().into_dyn()),
                (p("ff.w2"), l.w_ff2.view().into_dyn()),
                (p("ff.b2"), l.b_ff2.view().into_dyn()),
            ]);
        }
        out.extend([
            ("final.gain".to_string(), self.final_gain.view().into_dyn()),
            ("final.bias".to_string(), self.final_bias.view().into_dyn()),
            ("out.w".to_string(), self.w_out.view().into_dyn()),
            ("out.b".to_string(), self.b_out.view().into_dyn()),
        ]);
        out
    }

    /// Same order and names as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = vec![
            ("embed.input".to_string(), self.input_embed.view_mut().into_dyn()),
            ("embed.output".to_string(), self.output_embed.view_mut().into_dyn()),
            ("embed.sos".to_string(), self.sos.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layer{i}.{n}");
            out.extend([
                (p("ln1.gain"), l.ln1_gain.view_mut().into_dyn()),
                (p("ln1.bias"), l.ln1_bias.view_mut().into_dyn()),
                (p("attn.w_qkv"), l.w_qkv.view_mut().into_dyn()),
                (p("attn.b_qkv"), l.b_qkv.view_mut().into_dyn()),
                (p("attn.w_o"), l.w_o.view_mut().into_dyn()),
                (p("attn.b_o"), l.b_o.view_mut().into_dyn()),
                (p("ln2.gain"), l.ln2_gain.view_mut().into_dyn()),
                (p("ln2.bias"), l.ln2_bias.view_mut().into_dyn()),
                (p("ff.w1"), l.w_ff1.view_mut().into_dyn()),
                (p("ff.b1"), l.b_ff1.view_mut().into_dyn()),
                (p("ff.w2"), l.w_ff2.view_mut().into_dyn()),
                (p("ff.b2"), l.b_ff2.view_mut().into_dyn()),
            ]);
        }
        out.extend([
            ("final.gain".to_string(), self.final_gain.view_mut().into_dyn()),
            ("final.bias".to_string(), self.final_bias.view_mut().into_dyn()),
            ("out.w".to_string(), self.w_out.view_mut().into_dyn()),
            ("out.b".to_string(), self.b_out.view_mut().into_dyn()),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, factor: F) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().map(|v| v.as_f64().powi(2)).collect::<Vec<_>>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Converts every tensor to another float type.
    pub fn cast<G: Float>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::init(&self.config).expect("config already validated");
        for ((_, src), (_, mut dst)) in self.tensors().into_iter().zip(out.tensors_mut()) {
            dst.zip_mut_with(&src, |d, s| *d = G::cst(s.as_f64()));
        }
        out
    }

    /// Raises the length guard; every embedding is functional, so no tensor changes.
    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.config.max_len = max_len;
        self
    }

    pub(crate) fn check_ids(&self, x: &[usize], y: &[usize]) -> Result<(), ModelError> {
        if let Some((pos, &id)) = x.iter().enumerate().find(|(_, &v)| v >= self.config.input_vocab) {
            return Err(ModelError::IdOutOfRange {
                segment: "input",
                pos,
                id,
                vocab: self.config.input_vocab,
            });
        }
        if let Some((pos, &id)) = y.iter().enumerate().find(|(_, &v)| v >= self.config.output_vocab) {
            return Err(ModelError::IdOutOfRange {
                segment: "output",
                pos,
                id,
                vocab: self.config.output_vocab,
            });
        }
        Ok(())
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len > self.config.max_len {
            return Err(ModelError::LengthOverflow {
                len,
                max_len: self.config.max_len,
            });
        }
        Ok(())
    }
}
