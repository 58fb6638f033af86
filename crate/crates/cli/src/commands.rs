use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use transducer_core::corpus::{self, SequencePair, TaskSpec};
use transducer_core::decoder::{self, DecodeOptions, PromptMode};
use transducer_core::exec::Exec;
use transducer_core::export;
use transducer_core::lattice;
use transducer_core::metrics::Tally;
use transducer_core::model::{self, ModelConfig, ModelParams};
use transducer_core::trainer::{self, LoopOptions, TrainerState};

use crate::config::{parse_task_spec, RunConfig};
use crate::{AlignArgs, Cli, CliError, Command, DecodeArgs, GenArgs, SweepArgs, TrainArgs};

pub fn dispatch(cli: &Cli) -> Result<String, CliError> {
    let ctx = Context {
        workdir: cli.workdir.clone(),
        exec: if cli.sequential { Exec::Sequential } else { Exec::default() },
    };
    match &cli.command {
        Command::Gen(a) => cmd_gen(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Decode(a) => cmd_decode(&ctx, a),
        Command::Align(a) => cmd_align(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
    }
}

pub struct Context {
    pub workdir: PathBuf,
    pub exec: Exec,
}

impl Context {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn read(&self, p: &Path) -> Result<String, CliError> {
        let path = self.path(p);
        fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))
    }

    fn write(&self, p: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.path(p);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))
    }

    fn load_params(&self, p: &Path) -> Result<ModelParams<f32>, CliError> {
        Ok(model::load_checkpoint(&self.path(p))?.params)
    }

    /// Loads a corpus and checks every id against the model's vocabularies.
    fn load_corpus_for(&self, p: &Path, config: &ModelConfig) -> Result<Vec<SequencePair>, CliError> {
        let pairs = corpus::load(&self.path(p), usize::MAX, usize::MAX)?;
        for (i, pair) in pairs.iter().enumerate() {
            pair.validate(config.input_vocab, config.output_vocab)
                .map_err(|e| CliError::Mismatch(format!("{} record {}: {e}", p.display(), i + 1)))?;
        }
        Ok(pairs)
    }
}

fn cmd_gen(ctx: &Context, a: &GenArgs) -> Result<String, CliError> {
    let spec = match &a.spec {
        Some(p) => parse_task_spec(&ctx.read(p)?)?,
        None => TaskSpec::default(),
    };
    let spec = TaskSpec { seed: a.seed, ..spec };
    if a.len_min == 0 || a.len_min > a.len_max {
        return Err(CliError::Usage(format!(
            "need 1 <= --len-min <= --len-max, got {}..{}",
            a.len_min, a.len_max
        )));
    }
    let mut pairs = corpus::generate(&spec, a.n, a.len_min..=a.len_max)?;
    if let Some(k) = a.concat {
        pairs = corpus::make_long_concat(&pairs, k);
    }
    corpus::save(&ctx.path(&a.out), &pairs)?;

    let inputs: usize = pairs.iter().map(|p| p.x.len()).sum();
    let outputs: usize = pairs.iter().map(|p| p.y.len()).sum();
    let per = |v: usize, n: usize| if n == 0 { 0.0 } else { v as f64 / n as f64 };
    Ok(format!(
        "utterances {}\nmean_inputs {:.3}\nmean_outputs {:.3}\nmean_duration {:.3}\n",
        pairs.len(),
        per(inputs, pairs.len()),
        per(outputs, pairs.len()),
        per(outputs, inputs)
    ))
}

fn cmd_train(ctx: &Context, a: &TrainArgs) -> Result<String, CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::parse(&ctx.read(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.train.exec = ctx.exec;
    let pairs = ctx.load_corpus_for(&a.corpus, &cfg.model)?;

    let state = match &a.resume {
        Some(p) => {
            let ckpt = model::load_checkpoint(&ctx.path(p))?;
            let found = ModelConfig {
                seed: cfg.model.seed,
                ..ckpt.params.config.clone()
            };
            if found != cfg.model {
                return Err(CliError::Mismatch(format!(
                    "{} was trained with {:?}, config asks for {:?}",
                    p.display(),
                    ckpt.params.config,
                    cfg.model
                )));
            }
            TrainerState::from_checkpoint(ckpt)?
        }
        None => TrainerState::new(ModelParams::init(&cfg.model)?),
    };
    ctx.write(&a.out_dir.join("config.txt"), cfg.to_text())?;

    let opts = LoopOptions {
        epochs: a.epochs,
        out_dir: Some(ctx.path(&a.out_dir)),
        checkpoint_every: cfg.checkpoint_every,
    };
    let started = Instant::now();
    let mut last_epoch = None;
    let (state, curve) = trainer::train_loop(state, &pairs, &cfg.train, &opts, |r| {
        if last_epoch != Some(r.epoch) {
            last_epoch = Some(r.epoch);
            eprintln!("epoch {} started at step {} ({:.1}s)", r.epoch + 1, r.step, started.elapsed().as_secs_f64());
        }
    })?;

    let mut out = format!("steps {}\n", state.opt.step);
    let first_epoch = curve.first().map_or(0, |r| r.epoch);
    for (i, mean) in trainer::epoch_means(&curve).iter().enumerate() {
        writeln!(out, "epoch {} mean_loss {mean:.6}", first_epoch + i + 1).expect("writing to a String");
    }
    writeln!(
        out,
        "checkpoint {}",
        trainer::checkpoint_path(&a.out_dir, state.opt.step).display()
    )
    .expect("writing to a String");
    Ok(out)
}

fn cmd_decode(ctx: &Context, a: &DecodeArgs) -> Result<String, CliError> {
    let params = ctx.load_params(&a.ckpt)?;
    let pairs = ctx.load_corpus_for(&a.corpus, &params.config)?;
    let mode = PromptMode::from(a.mode);
    if mode != PromptMode::Plain {
        if let Some(p) = pairs.iter().position(|p| p.x.len() < 2) {
            return Err(CliError::Usage(format!(
                "record {} is too short to split into prompt and target",
                p + 1
            )));
        }
    }
    let opts = DecodeOptions {
        sampling: a.sampling,
        seed: a.seed,
        window: a.window,
        max_steps_per_phoneme: a.max_steps,
    };
    opts.validate()?;
    let report = decoder::evaluate(&params, &pairs, mode, &opts, ctx.exec);

    let mut records = String::new();
    for item in &report.items {
        records.push_str(&item.record());
        records.push('\n');
    }
    ctx.write(&a.out, records)?;
    Ok(format!(
        "utterances {}\nter {:.6}\nduration_accuracy {:.6}\nfailures {}\nviolations {}\n",
        report.items.len(),
        report.token_error_rate(),
        report.duration_accuracy(),
        report.failures,
        report.violations
    ))
}

struct Aligned {
    post: lattice::PosteriorMap,
    path: lattice::AlignmentPath,
}

fn cmd_align(ctx: &Context, a: &AlignArgs) -> Result<String, CliError> {
    let params = ctx.load_params(&a.ckpt)?;
    let pairs = ctx.load_corpus_for(&a.corpus, &params.config)?;
    let results = ctx.exec.map(&pairs, |_, pair| -> Result<Aligned, CliError> {
        let _flush = transducer_core::fpu::FlushGuard::new();
        let lat = model::build_lattice(&params, &pair.x, &pair.y)?;
        Ok(Aligned {
            post: lattice::posterior_map(&lat, &pair.y)?,
            path: lattice::forced_align(&lat, &pair.y)?,
        })
    });

    let mut tally = Tally::default();
    let mut summary = String::from("index\tlog_total\tforced_durations\ttrue_durations\n");
    let ids = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ");
    for (i, (pair, result)) in pairs.iter().zip(results).enumerate() {
        let aligned = result?;
        let durations = aligned.path.durations();
        tally.add_boundaries(&pair.durations, &durations, 1);
        tally.add_durations(&pair.durations, &durations);
        let stem = a.out_dir.join(format!("{i:05}"));
        for (name, grid) in [
            ("alpha", &aligned.post.log_alpha),
            ("beta", &aligned.post.log_beta),
            ("gamma", &aligned.post.log_gamma),
        ] {
            ctx.write(&stem.with_extension(format!("{name}.pgm")), export::grid_pgm(grid))?;
            ctx.write(&stem.with_extension(format!("{name}.txt")), export::grid_text(grid))?;
        }
        ctx.write(&stem.with_extension("path.txt"), export::path_text(&aligned.path))?;
        writeln!(
            summary,
            "{i}\t{:e}\t{}\t{}",
            aligned.post.log_total,
            ids(&durations),
            ids(&pair.durations)
        )
        .expect("writing to a String");
    }
    ctx.write(&a.out_dir.join("alignments.tsv"), summary)?;
    Ok(format!(
        "utterances {}\nboundary_accuracy {:.6}\nduration_accuracy {:.6}\n",
        pairs.len(),
        tally.boundary_accuracy(),
        tally.duration_accuracy()
    ))
}

fn cmd_sweep(ctx: &Context, a: &SweepArgs) -> Result<String, CliError> {
    let params = ctx.load_params(&a.ckpt)?;
    let pairs = ctx.load_corpus_for(&a.long_corpus, &params.config)?;
    let opts = DecodeOptions {
        seed: a.seed,
        max_steps_per_phoneme: a.max_steps,
        ..Default::default()
    };
    opts.validate()?;
    let mut rows = Vec::new();
    for &n in &a.n_list.0 {
        let started = Instant::now();
        rows.extend(decoder::window_sweep(&params, &pairs, &[n], a.m, &opts, ctx.exec));
        let label = n.map_or("unbounded".to_string(), |n| n.to_string());
        eprintln!("n={label}: {:.2}s", started.elapsed().as_secs_f64());
    }
    let csv = decoder::sweep_csv(&rows);
    ctx.write(&a.out, &csv)?;
    Ok(csv)
}
