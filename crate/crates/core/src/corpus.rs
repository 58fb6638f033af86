//! Synthetic monotonic sequence-to-sequence task with exact ground-truth alignments.
//!
//! Each input symbol emits a run of output tokens. How many depends on the symbol
//! and on the symbol that follows it; which tokens depends on the symbol, the frame
//! index inside the run and, for the first frame, on the preceding symbol.

use std::fmt::Write as _;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Longest run a single input symbol can emit under the contextual law.
pub const MAX_DURATION: usize = 5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One utterance: inputs, outputs, and how many outputs each input emitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePair {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub durations: Vec<usize>,
    /// Input index where a continuation prompt ends, when this pair is prompt-style.
    pub prompt_split: Option<usize>,
}

impl SequencePair {
    pub fn validate(&self, input_vocab: usize, output_vocab: usize) -> Result<(), String> {
        if self.x.is_empty() {
            return Err("empty input sequence".into());
        }
        if self.durations.len() != self.x.len() {
            return Err(format!(
                "{} durations for {} inputs",
                self.durations.len(),
                self.x.len()
            ));
        }
        if self.durations.iter().any(|&d| d == 0) {
            return Err("every duration must be at least 1".into());
        }
        let total: usize = self.durations.iter().sum();
        if total != self.y.len() {
            return Err(format!("durations sum to {total} but U = {}", self.y.len()));
        }
        if let Some(&bad) = self.x.iter().find(|&&v| v >= input_vocab) {
            return Err(format!("input id {bad} outside vocab {input_vocab}"));
        }
        if let Some(&bad) = self.y.iter().find(|&&v| v >= output_vocab) {
            return Err(format!("output id {bad} outside vocab {output_vocab}"));
        }
        if let Some(split) = self.prompt_split {
            if split == 0 || split >= self.x.len() {
                return Err(format!("prompt split {split} outside 1..{}", self.x.len()));
            }
        }
        Ok(())
    }

    /// Output index where input `t`'s run begins.
    pub fn output_offset(&self, t: usize) -> usize {
        self.durations[..t].iter().sum()
    }

    /// Splits at input `split`: `(x_prompt, y_prompt, x_target, y_target)`.
    pub fn split_at(&self, split: usize) -> (&[usize], &[usize], &[usize], &[usize]) {
        let off = self.output_offset(split);
        let (xp, xt) = self.x.split_at(split);
        let (yp, yt) = self.y.split_at(off);
        (xp, yp, xt, yt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DurationLaw {
    /// Every symbol emits exactly this many tokens.
    Fixed(usize),
    /// Per-symbol base in `1..=4` plus a jitter in `{-1, 0, +1}` looked up from the
    /// following symbol, clamped to at least 1.
    Contextual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmissionLaw {
    /// Token id equals the symbol id.
    Identity,
    /// Token depends on the symbol and the frame index; with `context` the first frame
    /// is also offset by the preceding symbol.
    Table { context: bool },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub input_vocab: usize,
    pub output_vocab: usize,
    pub durations: DurationLaw,
    pub emissions: EmissionLaw,
    /// Seeds the symbol-to-token and duration tables.
    pub law_seed: u64,
    /// Seeds the sampled utterances.
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            input_vocab: 20,
            output_vocab: 24,
            durations: DurationLaw::Contextual,
            emissions: EmissionLaw::Table { context: true },
            law_seed: 0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// Duration 1, `y = x`.
    pub fn identity(vocab: usize) -> Self {
        Self {
            input_vocab: vocab,
            output_vocab: vocab,
            durations: DurationLaw::Fixed(1),
            emissions: EmissionLaw::Identity,
            law_seed: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.input_vocab == 0 || self.output_vocab == 0 {
            return Err(CorpusError::Spec("vocabularies must be nonempty".into()));
        }
        if self.emissions == EmissionLaw::Identity && self.output_vocab < self.input_vocab {
            return Err(CorpusError::Spec(format!(
                "identity emission needs output_vocab >= input_vocab ({} < {})",
                self.output_vocab, self.input_vocab
            )));
        }
        if let DurationLaw::Fixed(0) = self.durations {
            return Err(CorpusError::Spec("fixed duration must be at least 1".into()));
        }
        Ok(())
    }

    pub fn laws(&self) -> Result<Laws, CorpusError> {
        self.validate()?;
        Ok(Laws::new(self))
    }

    /// Expected duration of an interior symbol when symbols are drawn uniformly.
    pub fn analytic_mean_duration(&self) -> Result<f64, CorpusError> {
        let laws = self.laws()?;
        let v = self.input_vocab;
        let mut total = 0.0;
        for s in 0..v {
            for next in 0..v {
                total += laws.duration(s, Some(next)) as f64;
            }
        }
        Ok(total / (v * v) as f64)
    }
}

/// Lookup tables realized from a [`TaskSpec`].
#[derive(Debug, Clone)]
pub struct Laws {
    spec: TaskSpec,
    base: Vec<usize>,
    /// Indexed by the following symbol; the last slot is the end of the utterance.
    jitter: Vec<i64>,
    tokens: Vec<[usize; MAX_DURATION]>,
    /// Indexed by the preceding symbol; the last slot is the start of the utterance.
    onset_shift: Vec<usize>,
}

impl Laws {
    fn new(spec: &TaskSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.law_seed ^ 0x5eed_7a5c);
        let v = spec.input_vocab;
        let base = (0..v).map(|_| rng.gen_range(1..=4)).collect();
        let jitter = (0..=v).map(|_| rng.gen_range(-1..=1)).collect();
        let tokens = (0..v)
            .map(|_| std::array::from_fn(|_| rng.gen_range(0..spec.output_vocab)))
            .collect();
        let onset_shift = (0..=v).map(|_| rng.gen_range(0..2)).collect();
        Self {
            spec: spec.clone(),
            base,
            jitter,
            tokens,
            onset_shift,
        }
    }

    pub fn duration(&self, symbol: usize, next: Option<usize>) -> usize {
        match self.spec.durations {
            DurationLaw::Fixed(d) => d,
            DurationLaw::Contextual => {
                let j = self.jitter[next.unwrap_or(self.spec.input_vocab)];
                (self.base[symbol] as i64 + j).max(1) as usize
            }
        }
    }

    pub fn token(&self, symbol: usize, frame: usize, prev: Option<usize>) -> usize {
        match self.spec.emissions {
            EmissionLaw::Identity => symbol,
            EmissionLaw::Table { context } => {
                let tok = self.tokens[symbol][frame.min(MAX_DURATION - 1)];
                if context && frame == 0 {
                    let shift = self.onset_shift[prev.unwrap_or(self.spec.input_vocab)];
                    (tok + shift) % self.spec.output_vocab
                } else {
                    tok
                }
            }
        }
    }

    /// Realizes the outputs and durations for an input sequence.
    pub fn transduce(&self, x: &[usize]) -> SequencePair {
        let mut y = Vec::new();
        let mut durations = Vec::with_capacity(x.len());
        for (i, &s) in x.iter().enumerate() {
            let prev = i.checked_sub(1).map(|p| x[p]);
            let d = self.duration(s, x.get(i + 1).copied());
            y.extend((0..d).map(|k| self.token(s, k, prev)));
            durations.push(d);
        }
        SequencePair {
            x: x.to_vec(),
            y,
            durations,
            prompt_split: None,
        }
    }
}

/// Seeded corpus of `n_utts` utterances with input lengths drawn from `len_range`.
pub fn generate(
    spec: &TaskSpec,
    n_utts: usize,
    len_range: RangeInclusive<usize>,
) -> Result<Vec<SequencePair>, CorpusError> {
    if *len_range.start() == 0 || len_range.is_empty() {
        return Err(CorpusError::Spec(format!("bad length range {len_range:?}")));
    }
    let laws = spec.laws()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..n_utts)
        .map(|_| {
            let len = rng.gen_range(len_range.clone());
            let x: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.input_vocab)).collect();
            laws.transduce(&x)
        })
        .collect())
}

/// Concatenates consecutive groups of `k` pairs into single long pairs. A trailing
/// group shorter than `k` is dropped.
pub fn make_long_concat(corpus: &[SequencePair], k: usize) -> Vec<SequencePair> {
    if k <= 1 {
        return corpus.to_vec();
    }
    corpus
        .chunks_exact(k)
        .map(|group| {
            let mut out = SequencePair {
                x: Vec::new(),
                y: Vec::new(),
                durations: Vec::new(),
                prompt_split: None,
            };
            for pair in group {
                out.x.extend(&pair.x);
                out.y.extend(&pair.y);
                out.durations.extend(&pair.durations);
            }
            out
        })
        .collect()
}

fn join(ids: &[usize]) -> String {
    let mut s = String::new();
    for (i, v) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v}").expect("write to string");
    }
    s
}

/// One line per utterance: `x ids <TAB> y ids <TAB> durations [<TAB> prompt split]`.
pub fn to_text(corpus: &[SequencePair]) -> String {
    let mut out = String::new();
    for pair in corpus {
        out.push_str(&join(&pair.x));
        out.push('\t');
        out.push_str(&join(&pair.y));
        out.push('\t');
        out.push_str(&join(&pair.durations));
        if let Some(split) = pair.prompt_split {
            write!(out, "\t{split}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

fn parse_ids(field: &str, line: usize, what: &str) -> Result<Vec<usize>, CorpusError> {
    field
        .split_whitespace()
        .map(|tok| {
            tok.parse().map_err(|_| CorpusError::Parse {
                line,
                message: format!("bad {what} id {tok:?}"),
            })
        })
        .collect()
}

/// Parses [`to_text`] output and re-validates every record.
pub fn from_text(text: &str, input_vocab: usize, output_vocab: usize) -> Result<Vec<SequencePair>, CorpusError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(CorpusError::Parse {
                line,
                message: format!("expected 3 or 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let prompt_split = match fields.get(3) {
            Some(f) => Some(f.trim().parse().map_err(|_| CorpusError::Parse {
                line,
                message: format!("bad prompt split {f:?}"),
            })?),
            None => None,
        };
        let pair = SequencePair {
            x: parse_ids(fields[0], line, "input")?,
            y: parse_ids(fields[1], line, "output")?,
            durations: parse_ids(fields[2], line, "duration")?,
            prompt_split,
        };
        pair.validate(input_vocab, output_vocab)
            .map_err(|message| CorpusError::Parse { line, message })?;
        out.push(pair);
    }
    Ok(out)
}

pub fn save(path: &Path, corpus: &[SequencePair]) -> Result<(), CorpusError> {
    fs::write(path, to_text(corpus)).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path, input_vocab: usize, output_vocab: usize) -> Result<Vec<SequencePair>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_text(&text, input_vocab, output_vocab)
}
