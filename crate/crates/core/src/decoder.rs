//! Blank-triggered monotonic decoding.
//!
//! The relative origin sits on one target input at a time. Each step samples the
//! distribution after the last output position: a blank moves the origin to the next
//! input, anything else is appended to the output. Every origin move invalidates the
//! cached keys (all input rows carry relative embeddings), so the model is restarted
//! on the new layout and then extended token by token until the next blank.

use std::fmt::Write as _;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::SequencePair;
use crate::exec::Exec;
use crate::fpu::FlushGuard;
use crate::lattice::{AlignmentPath, LatticeError, Step};
use crate::metrics::Tally;
use crate::model::{Float, ModelError, ModelParams, PositionPlan};

pub const DEFAULT_MAX_STEPS_PER_PHONEME: usize = 32;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("input {phoneme} emitted {steps} tokens without a blank")]
    StepBudget {
        phoneme: usize,
        steps: usize,
        partial: Vec<usize>,
        /// Cost spent before giving up, in the same units as [`DecodeOutput::work`].
        work: u64,
    },
    #[error("empty target input sequence")]
    EmptyTarget,
    #[error("a pseudo prompt needs at least one input symbol when output prompt tokens are given")]
    EmptyPseudoPrompt,
    #[error("invalid decode options: {0}")]
    Options(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature(f64),
    /// Sample among the `k` most likely entries at temperature 1.
    TopK(usize),
}

/// Inputs kept around the current one: `n` before and `m` after; `None` keeps everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Window {
    pub n: Option<usize>,
    pub m: Option<usize>,
}

impl Window {
    pub fn new(n: usize, m: usize) -> Self {
        Self { n: Some(n), m: Some(m) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub sampling: Sampling,
    pub seed: u64,
    pub window: Option<Window>,
    pub max_steps_per_phoneme: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            sampling: Sampling::Greedy,
            seed: 0,
            window: None,
            max_steps_per_phoneme: DEFAULT_MAX_STEPS_PER_PHONEME,
        }
    }
}

impl DecodeOptions {
    pub fn validate(&self) -> Result<(), DecodeError> {
        match self.sampling {
            Sampling::Temperature(tau) if !(tau > 0.0 && tau.is_finite()) => {
                Err(DecodeError::Options(format!("temperature must be positive, got {tau}")))
            }
            Sampling::TopK(0) => Err(DecodeError::Options("top-k needs k >= 1".into())),
            _ if self.max_steps_per_phoneme == 0 => {
                Err(DecodeError::Options("max_steps_per_phoneme must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Anything that yields the next-token log-distribution for a layout and can be
/// extended one output token at a time.
pub trait StepModel: Sync {
    type State;

    /// Size of the output distribution; the last entry is the blank.
    fn vbar(&self) -> usize;

    fn begin(&self, x: &[usize], y: &[usize], plan: &PositionPlan) -> Result<(Self::State, Vec<f64>), DecodeError>;

    fn extend(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>, DecodeError>;
}

impl<F: Float> StepModel for ModelParams<F> {
    type State = crate::model::DecodeState<F>;

    fn vbar(&self) -> usize {
        self.config.vbar()
    }

    fn begin(&self, x: &[usize], y: &[usize], plan: &PositionPlan) -> Result<(Self::State, Vec<f64>), DecodeError> {
        let (state, lp) = self.begin_decode(x, y, plan)?;
        Ok((state, lp.iter().map(|v| v.as_f64()).collect()))
    }

    fn extend(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>, DecodeError> {
        Ok(self.extend_decode(state, token)?.iter().map(|v| v.as_f64()).collect())
    }
}

/// Mutable state of one decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeSession {
    pub x_prompt: Vec<usize>,
    pub x_target: Vec<usize>,
    pub y_prompt: Vec<usize>,
    pub y_out: Vec<usize>,
    /// Current target input; equals `x_target.len()` once finished.
    pub t: usize,
    /// Tokens emitted per target input so far.
    pub counts: Vec<usize>,
    pub window: Option<Window>,
    pub max_steps_per_phoneme: usize,
    /// Model cost so far, see [`step_cost`].
    pub work: u64,
}

impl DecodeSession {
    pub fn new(x_prompt: &[usize], y_prompt: &[usize], x_target: &[usize], opts: &DecodeOptions) -> Self {
        Self {
            x_prompt: x_prompt.to_vec(),
            x_target: x_target.to_vec(),
            y_prompt: y_prompt.to_vec(),
            y_out: Vec::new(),
            t: 0,
            counts: vec![0; x_target.len()],
            window: opts.window,
            max_steps_per_phoneme: opts.max_steps_per_phoneme,
            work: 0,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.t >= self.x_target.len()
    }

    /// Model inputs, outputs and layout for the current step.
    pub fn view(&self) -> Result<(Vec<usize>, Vec<usize>, PositionPlan), ModelError> {
        match self.window {
            Some(window) => Ok(apply_context_window(self, window)),
            None => {
                let x = [self.x_prompt.as_slice(), &self.x_target].concat();
                let y = [self.y_prompt.as_slice(), &self.y_out].concat();
                let plan = crate::model::make_position_plan(
                    self.x_prompt.len(),
                    self.x_target.len(),
                    self.t,
                    self.y_prompt.len(),
                    self.y_out.len(),
                )?;
                Ok((x, y, plan))
            }
        }
    }
}

/// Windowed view: target inputs `[t-n, t+m]`, the outputs aligned to the retained
/// history plus the current input's partial run, positions renumbered from 0.
///
/// The prompt has no known alignment, so it is kept whole while the window still
/// reaches the first target input and dropped once it does not.
pub fn apply_context_window(session: &DecodeSession, window: Window) -> (Vec<usize>, Vec<usize>, PositionPlan) {
    let t = session.t.min(session.x_target.len().saturating_sub(1));
    let lo = window.n.map_or(0, |n| t.saturating_sub(n));
    let hi = window
        .m
        .map_or(session.x_target.len(), |m| (t + m + 1).min(session.x_target.len()));
    let keep_prompt = lo == 0;

    let mut x = Vec::new();
    let mut y = Vec::new();
    if keep_prompt {
        x.extend_from_slice(&session.x_prompt);
        y.extend_from_slice(&session.y_prompt);
    }
    let center = x.len() + (t - lo);
    x.extend_from_slice(&session.x_target[lo..hi]);
    let first_out: usize = session.counts[..lo].iter().sum();
    y.extend_from_slice(&session.y_out[first_out..]);

    let plan = PositionPlan::centered(x.len(), center, y.len() + 1).expect("center lies inside the view");
    (x, y, plan)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOutput {
    pub y_out: Vec<usize>,
    pub path: AlignmentPath,
    pub durations: Vec<usize>,
    /// Model cost, see [`step_cost`].
    pub work: u64,
}

fn pick(logp: &[f64], sampling: Sampling, rng: &mut ChaCha8Rng) -> usize {
    let argmax = || {
        let mut best = 0;
        for (k, &v) in logp.iter().enumerate() {
            if v > logp[best] {
                best = k;
            }
        }
        best
    };
    let sample = |weights: Vec<(usize, f64)>, rng: &mut ChaCha8Rng| {
        let max = weights.iter().map(|w| w.1).fold(f64::NEG_INFINITY, f64::max);
        let probs: Vec<f64> = weights.iter().map(|w| (w.1 - max).exp()).collect();
        match WeightedIndex::new(&probs) {
            Ok(dist) => weights[dist.sample(rng)].0,
            Err(_) => argmax(),
        }
    };
    match sampling {
        Sampling::Greedy => argmax(),
        Sampling::Temperature(tau) => sample(logp.iter().map(|&v| v / tau).enumerate().collect(), rng),
        Sampling::TopK(k) => {
            let mut idx: Vec<usize> = (0..logp.len()).collect();
            idx.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
            idx.truncate(k);
            sample(idx.into_iter().map(|i| (i, logp[i])).collect(), rng)
        }
    }
}

/// Cost of running one causal position whose context, itself included, is `len` long:
/// the position plus the keys it attends to.
pub fn step_cost(len: usize) -> u64 {
    1 + len as u64
}

/// Runs `session` to completion.
pub fn run_session<M: StepModel>(
    model: &M,
    session: &mut DecodeSession,
    opts: &DecodeOptions,
) -> Result<DecodeOutput, DecodeError> {
    opts.validate()?;
    let _flush = FlushGuard::new();
    if session.x_target.is_empty() {
        return Err(DecodeError::EmptyTarget);
    }
    let blank = model.vbar() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut steps = Vec::new();
    while !session.is_finished() {
        let (x, y, plan) = session.view()?;
        let mut len = x.len() + y.len() + 1;
        session.work += (1..=len).map(step_cost).sum::<u64>();
        let (mut state, mut logp) = model.begin(&x, &y, &plan)?;
        loop {
            if logp.len() != model.vbar() {
                return Err(DecodeError::Options(format!(
                    "model returned {} scores for vocabulary {}",
                    logp.len(),
                    model.vbar()
                )));
            }
            let k = pick(&logp, opts.sampling, &mut rng);
            if k == blank {
                steps.push(Step::Blank);
                session.t += 1;
                break;
            }
            if session.counts[session.t] >= session.max_steps_per_phoneme {
                return Err(DecodeError::StepBudget {
                    phoneme: session.t,
                    steps: session.counts[session.t],
                    partial: session.y_out.clone(),
                    work: session.work,
                });
            }
            steps.push(Step::Emit);
            session.y_out.push(k);
            session.counts[session.t] += 1;
            len += 1;
            session.work += step_cost(len);
            logp = model.extend(&mut state, k)?;
        }
    }
    let path = AlignmentPath::new(session.x_target.len(), session.y_out.len(), steps)?;
    Ok(DecodeOutput {
        y_out: session.y_out.clone(),
        path,
        durations: session.counts.clone(),
        work: session.work,
    })
}

/// Continues `y_prompt` for `x_target`; both prompts may be empty.
pub fn decode<M: StepModel>(
    model: &M,
    x_prompt: &[usize],
    y_prompt: &[usize],
    x_target: &[usize],
    opts: &DecodeOptions,
) -> Result<DecodeOutput, DecodeError> {
    let mut session = DecodeSession::new(x_prompt, y_prompt, x_target, opts);
    run_session(model, &mut session, opts)
}

/// Decoding where an unrelated input sequence stands in for the prompt's transcription.
pub fn decode_with_pseudo_prompt<M: StepModel>(
    model: &M,
    y_prompt: &[usize],
    pseudo_x_prompt: &[usize],
    x_target: &[usize],
    opts: &DecodeOptions,
) -> Result<DecodeOutput, DecodeError> {
    if pseudo_x_prompt.is_empty() && !y_prompt.is_empty() {
        return Err(DecodeError::EmptyPseudoPrompt);
    }
    decode(model, pseudo_x_prompt, y_prompt, x_target, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// No prompt; decode the whole utterance.
    Plain,
    /// Split each utterance, give the first part as prompt and decode the rest.
    Prompt,
    /// Like `Prompt`, with the prompt inputs taken from the next utterance in the set.
    PseudoPrompt,
}

/// Input index where a continuation example splits `pair`.
pub fn continuation_split(pair: &SequencePair) -> usize {
    pair.prompt_split.unwrap_or(pair.x.len() / 2).clamp(1, pair.x.len().max(2) - 1)
}

/// One evaluated utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub x_target: Vec<usize>,
    pub reference: Vec<usize>,
    pub ref_durations: Vec<usize>,
    pub result: Result<DecodeOutput, String>,
    /// Model cost, aborted decodes included.
    pub work: u64,
}

impl Decoded {
    /// Whether a completed decode broke a structural invariant: blanks other than
    /// `T`, an invalid path, or durations and outputs that disagree with the path.
    pub fn violates_invariants(&self) -> bool {
        match &self.result {
            Ok(out) => {
                let steps = out.path.steps();
                let blanks = steps.iter().filter(|s| **s == Step::Blank).count();
                blanks != self.x_target.len()
                    || out.path.validate().is_err()
                    || out.path.durations() != out.durations
                    || steps.len() - blanks != out.y_out.len()
            }
            Err(_) => false,
        }
    }

    /// One tab-separated line: target ids, emitted ids, durations and the path as
    /// `t,u` nodes; failures put `!` and the message in place of the outputs.
    pub fn record(&self) -> String {
        let ids = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        match &self.result {
            Ok(out) => {
                let nodes = out
                    .path
                    .nodes()
                    .into_iter()
                    .map(|(t, u)| format!("{t},{u}"))
                    .collect::<Vec<_>>()
                    .join(" ");
                format!("{}\t{}\t{}\t{}", ids(&self.x_target), ids(&out.y_out), ids(&out.durations), nodes)
            }
            Err(message) => format!("{}\t!\t{}", ids(&self.x_target), message.replace(['\t', '\n'], " ")),
        }
    }
}

/// Decodes of a whole set plus corpus-level scores.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub items: Vec<Decoded>,
    pub tally: Tally,
    /// Decodes stopped by the step budget or another error.
    pub failures: usize,
    /// Completed decodes that broke an invariant.
    pub violations: usize,
    pub work: u64,
}

impl EvalReport {
    pub fn token_error_rate(&self) -> f64 {
        self.tally.token_error_rate()
    }

    pub fn duration_accuracy(&self) -> f64 {
        self.tally.duration_accuracy()
    }
}

/// Per-utterance seed so sampled decodes do not depend on scheduling.
pub fn utterance_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Decodes every pair under `mode`; a failed decode scores its whole reference as errors.
pub fn evaluate<M: StepModel>(
    model: &M,
    corpus: &[SequencePair],
    mode: PromptMode,
    opts: &DecodeOptions,
    exec: Exec,
) -> EvalReport {
    let items = exec.map(corpus, |i, pair| {
        let opts = DecodeOptions {
            seed: utterance_seed(opts.seed, i),
            ..*opts
        };
        let (x_prompt, y_prompt, x_target, reference, ref_durations) = match mode {
            PromptMode::Plain => (&[][..], &[][..], &pair.x[..], &pair.y[..], &pair.durations[..]),
            PromptMode::Prompt | PromptMode::PseudoPrompt => {
                let split = continuation_split(pair);
                let (xp, yp, xt, yt) = pair.split_at(split);
                (xp, yp, xt, yt, &pair.durations[split..])
            }
        };
        let result = match mode {
            PromptMode::PseudoPrompt => {
                let other = &corpus[(i + 1) % corpus.len()];
                let pseudo = &other.x[..continuation_split(other)];
                decode_with_pseudo_prompt(model, y_prompt, pseudo, x_target, &opts)
            }
            _ => decode(model, x_prompt, y_prompt, x_target, &opts),
        };
        let work = match &result {
            Ok(out) => out.work,
            Err(DecodeError::StepBudget { work, .. }) => *work,
            Err(_) => 0,
        };
        Decoded {
            x_target: x_target.to_vec(),
            reference: reference.to_vec(),
            ref_durations: ref_durations.to_vec(),
            result: result.map_err(|e| e.to_string()),
            work,
        }
    });

    let mut tally = Tally::default();
    let (mut failures, mut violations, mut work) = (0, 0, 0);
    for item in &items {
        match &item.result {
            Ok(out) => {
                tally.add_tokens(&item.reference, &out.y_out);
                tally.add_durations(&item.ref_durations, &out.durations);
            }
            Err(_) => {
                tally.add_tokens(&item.reference, &[]);
                tally.add_durations(&item.ref_durations, &[]);
                failures += 1;
            }
        }
        if item.violates_invariants() {
            violations += 1;
        }
        work += item.work;
    }
    EvalReport {
        items,
        tally,
        failures,
        violations,
        work,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// History size; `None` is the unwindowed reference.
    pub n: Option<usize>,
    pub token_error_rate: f64,
    pub duration_accuracy: f64,
    pub failures: usize,
    /// Positions pushed through the model over the whole set, a deterministic cost measure.
    pub work: u64,
}

/// Plain decodes of `corpus_long` with history `n` and lookahead `m` per row. The
/// `None` row decodes without any window and lifts the model's length guard.
pub fn window_sweep<F: Float>(
    params: &ModelParams<F>,
    corpus_long: &[SequencePair],
    n_values: &[Option<usize>],
    m: usize,
    opts: &DecodeOptions,
    exec: Exec,
) -> Vec<SweepRow> {
    n_values
        .iter()
        .map(|&n| {
            let report = match n {
                Some(n) => {
                    let opts = DecodeOptions {
                        window: Some(Window::new(n, m)),
                        ..*opts
                    };
                    evaluate(params, corpus_long, PromptMode::Plain, &opts, exec)
                }
                None => {
                    let lifted = params.clone().with_max_len(usize::MAX);
                    let opts = DecodeOptions { window: None, ..*opts };
                    evaluate(&lifted, corpus_long, PromptMode::Plain, &opts, exec)
                }
            };
            SweepRow {
                n,
                token_error_rate: report.token_error_rate(),
                duration_accuracy: report.duration_accuracy(),
                failures: report.failures,
                work: report.work,
            }
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("n,ter,duration_accuracy,failures,work\n");
    for row in rows {
        let n = row.n.map_or("unbounded".to_string(), |n| n.to_string());
        writeln!(
            out,
            "{n},{:.6},{:.6},{},{}",
            row.token_error_rate, row.duration_accuracy, row.failures, row.work
        )
        .expect("writing to a String");
    }
    out
}
