//! Flat `key = value` files for model/trainer settings and task specs.

use transducer_core::corpus::{DurationLaw, EmissionLaw, TaskSpec};
use transducer_core::model::ModelConfig;
use transducer_core::trainer::TrainConfig;

use crate::CliError;

/// Non-empty, non-comment lines as `(line number, key, value)`.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("line {}: expected key = value", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("line {line}: bad value {value:?} for {key}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoint_every: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            checkpoint_every: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (line, key, value) in parse_pairs(text)? {
            let v = value.as_str();
            match key.as_str() {
                "n_layers" => cfg.model.n_layers = num(line, &key, v)?,
                "n_heads" => cfg.model.n_heads = num(line, &key, v)?,
                "d_model" => cfg.model.d_model = num(line, &key, v)?,
                "d_ff" => cfg.model.d_ff = num(line, &key, v)?,
                "input_vocab" => cfg.model.input_vocab = num(line, &key, v)?,
                "output_vocab" => cfg.model.output_vocab = num(line, &key, v)?,
                "max_len" => cfg.model.max_len = num(line, &key, v)?,
                "seed" => {
                    let seed = num(line, &key, v)?;
                    cfg.model.seed = seed;
                    cfg.train.seed = seed;
                }
                "lr" => cfg.train.lr = num(line, &key, v)?,
                "beta1" => cfg.train.beta1 = num(line, &key, v)?,
                "beta2" => cfg.train.beta2 = num(line, &key, v)?,
                "eps" => cfg.train.eps = num(line, &key, v)?,
                "warmup_steps" => cfg.train.warmup_steps = num(line, &key, v)?,
                "batch_size" => cfg.train.batch_size = num(line, &key, v)?,
                "clip_norm" => cfg.train.clip_norm = num(line, &key, v)?,
                "checkpoint_every" => cfg.checkpoint_every = Some(num(line, &key, v)?),
                _ => return Err(CliError::Usage(format!("line {line}: unknown key {key:?}"))),
            }
        }
        cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if cfg.train.batch_size == 0 {
            return Err(CliError::Usage("batch_size must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut out = format!(
            "n_layers = {}\nn_heads = {}\nd_model = {}\nd_ff = {}\ninput_vocab = {}\noutput_vocab = {}\n\
             max_len = {}\nseed = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nwarmup_steps = {}\n\
             batch_size = {}\nclip_norm = {}\n",
            m.n_layers,
            m.n_heads,
            m.d_model,
            m.d_ff,
            m.input_vocab,
            m.output_vocab,
            m.max_len,
            m.seed,
            t.lr,
            t.beta1,
            t.beta2,
            t.eps,
            t.warmup_steps,
            t.batch_size,
            t.clip_norm
        );
        if let Some(every) = self.checkpoint_every {
            out.push_str(&format!("checkpoint_every = {every}\n"));
        }
        out
    }
}

/// Task spec keys: `input_vocab`, `output_vocab`, `durations` (`contextual` or
/// `fixed N`), `emissions` (`table`, `table-plain` or `identity`) and `law_seed`.
pub fn parse_task_spec(text: &str) -> Result<TaskSpec, CliError> {
    let mut spec = TaskSpec::default();
    for (line, key, value) in parse_pairs(text)? {
        let v = value.as_str();
        match key.as_str() {
            "input_vocab" => spec.input_vocab = num(line, &key, v)?,
            "output_vocab" => spec.output_vocab = num(line, &key, v)?,
            "law_seed" => spec.law_seed = num(line, &key, v)?,
            "durations" => {
                spec.durations = match v.split_whitespace().collect::<Vec<_>>()[..] {
                    ["contextual"] => DurationLaw::Contextual,
                    ["fixed", d] => DurationLaw::Fixed(num(line, &key, d)?),
                    _ => return Err(CliError::Usage(format!("line {line}: bad durations {v:?}"))),
                }
            }
            "emissions" => {
                spec.emissions = match v {
                    "table" => EmissionLaw::Table { context: true },
                    "table-plain" => EmissionLaw::Table { context: false },
                    "identity" => EmissionLaw::Identity,
                    _ => return Err(CliError::Usage(format!("line {line}: bad emissions {v:?}"))),
                }
            }
            _ => return Err(CliError::Usage(format!("line {line}: unknown key {key:?}"))),
        }
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(spec)
}
