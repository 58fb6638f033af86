//! Acceptance criteria for the whole stack. Prints one PASS/FAIL line per criterion
//! and fails if any criterion fails.
//!
//! Oracles here are written independently of the library: exhaustive path
//! enumeration in linear probability space and central finite differences.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use transducer_core::corpus::{self, generate, make_long_concat, SequencePair, TaskSpec};
use transducer_core::decoder::{evaluate, DecodeOptions, EvalReport, PromptMode, Window};
use transducer_core::exec::Exec;
use transducer_core::lattice::{self, AlignmentPath, LogProbLattice, Step};
use transducer_core::metrics::Tally;
use transducer_core::model::{self, build_lattice, Checkpoint, ModelConfig, ModelParams};
use transducer_core::trainer::{self, epoch_means, LoopOptions, TrainConfig, TrainerState};

const EPOCHS: usize = 30;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const SHORT_LENGTHS: std::ops::RangeInclusive<usize> = 8..=24;

// ---------------------------------------------------------------------------
// oracles

fn random_lattice(rng: &mut impl Rng, t_len: usize, u_len: usize, vbar: usize) -> LogProbLattice {
    let mut entries = Array3::zeros((t_len, u_len + 1, vbar));
    for t in 0..t_len {
        for u in 0..=u_len {
            let logits: Vec<f64> = (0..vbar).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (k, l) in logits.iter().enumerate() {
                entries[[t, u, k]] = l - z.ln();
            }
        }
    }
    LogProbLattice::new(entries).unwrap()
}

fn random_targets(rng: &mut impl Rng, u_len: usize, vbar: usize) -> Vec<usize> {
    (0..u_len).map(|_| rng.gen_range(0..vbar - 1)).collect()
}

/// Every monotone path: `U` emits and `T-1` blanks in any order, then the final blank.
fn all_paths(t_len: usize, u_len: usize) -> Vec<Vec<bool>> {
    fn rec(emits: usize, blanks: usize, prefix: &mut Vec<bool>, out: &mut Vec<Vec<bool>>) {
        if emits == 0 && blanks == 0 {
            let mut p = prefix.clone();
            p.push(false);
            out.push(p);
            return;
        }
        if emits > 0 {
            prefix.push(true);
            rec(emits - 1, blanks, prefix, out);
            prefix.pop();
        }
        if blanks > 0 {
            prefix.push(false);
            rec(emits, blanks - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(u_len, t_len - 1, &mut Vec::new(), &mut out);
    out
}

/// Linear-space probability of a path (`true` = emit) and the nodes it visits.
fn path_prob(lat: &LogProbLattice, y: &[usize], path: &[bool]) -> (f64, Vec<(usize, usize)>) {
    let blank = lat.vbar() - 1;
    let (mut t, mut u, mut p) = (0, 0, 1.0);
    let mut nodes = Vec::new();
    for &emit in path {
        nodes.push((t, u));
        if emit {
            p *= lat.get(t, u, y[u]).exp();
            u += 1;
        } else {
            p *= lat.get(t, u, blank).exp();
            t += 1;
        }
    }
    (p, nodes)
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------------------
// criteria

fn c1_oracle_equivalence() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (t_len, u_len, vbar) = (rng.gen_range(1..=6), rng.gen_range(0..=6), rng.gen_range(2..=5));
        let lat = random_lattice(&mut rng, t_len, u_len, vbar);
        let y = random_targets(&mut rng, u_len, vbar);
        let brute: f64 = all_paths(t_len, u_len).iter().map(|p| path_prob(&lat, &y, p).0).sum();
        let got = lattice::total_log_prob(&lat, &y).map_err(|e| e.to_string())?.exp();
        worst = worst.max(rel_err(got, brute, 0.0));
    }
    let elapsed = start.elapsed();
    if worst < 1e-10 && elapsed < Duration::from_secs(10) {
        Ok(format!("max rel err {worst:.2e} over 200 lattices in {:.2}s", elapsed.as_secs_f64()))
    } else {
        Err(format!("max rel err {worst:.2e}, {:.2}s", elapsed.as_secs_f64()))
    }
}

fn c2_duality_and_conservation() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut duality, mut conservation, mut gamma_vs_oracle) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let (t_len, u_len, vbar) = (rng.gen_range(1..=6), rng.gen_range(0..=6), rng.gen_range(2..=5));
        let lat = random_lattice(&mut rng, t_len, u_len, vbar);
        let y = random_targets(&mut rng, u_len, vbar);
        let post = lattice::posterior_map(&lat, &y).map_err(|e| e.to_string())?;

        duality = duality
            .max((post.log_alpha_terminal() + lat.get(t_len - 1, u_len, lat.blank()) - post.log_beta[[0, 0]]).abs())
            .max((post.log_beta[[0, 0]] - post.log_total).abs());
        for t in 0..t_len {
            for u in 0..=u_len {
                let sum = post.log_alpha[[t, u]] + post.log_beta[[t, u]];
                duality = duality.max((sum - post.log_gamma[[t, u]]).abs());
            }
        }
        for k in 0..t_len + u_len {
            let diag: f64 = (0..t_len)
                .filter(|&t| k >= t && k - t <= u_len)
                .map(|t| post.log_gamma[[t, k - t]].exp())
                .sum();
            conservation = conservation.max(rel_err(diag, post.log_total.exp(), 0.0));
        }

        // posterior of each node against the mass of enumerated paths through it
        let mut through = ndarray::Array2::<f64>::zeros((t_len, u_len + 1));
        for path in all_paths(t_len, u_len) {
            let (p, nodes) = path_prob(&lat, &y, &path);
            for (t, u) in nodes {
                through[[t, u]] += p;
            }
        }
        for ((t, u), &mass) in through.indexed_iter() {
            if mass > 0.0 {
                gamma_vs_oracle = gamma_vs_oracle.max(rel_err(post.log_gamma[[t, u]].exp(), mass, 0.0));
            }
        }
    }
    let elapsed = start.elapsed();
    let worst = duality.max(conservation).max(gamma_vs_oracle);
    let detail = format!(
        "duality {duality:.2e}, anti-diagonal {conservation:.2e}, posterior vs enumeration {gamma_vs_oracle:.2e}, {:.2}s",
        elapsed.as_secs_f64()
    );
    if worst < 1e-6 && elapsed < Duration::from_secs(10) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c3_lattice_gradient() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst, mut worst_sum) = (0.0f64, 0.0f64);
    let h = 1e-5;
    for _ in 0..100 {
        let (t_len, u_len, vbar) = (rng.gen_range(1..=5), rng.gen_range(0..=5), rng.gen_range(2..=4));
        let lat = random_lattice(&mut rng, t_len, u_len, vbar);
        let y = random_targets(&mut rng, u_len, vbar);
        let (_, grad) = lattice::loss_and_grad(&lat, &y).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max((grad.sum() + (t_len + u_len) as f64).abs());
        let loss_at = |idx: (usize, usize, usize), delta: f64| {
            let mut e = lat.entries().clone();
            e[[idx.0, idx.1, idx.2]] += delta;
            -lattice::total_log_prob(&LogProbLattice::new(e).unwrap(), &y).unwrap()
        };
        for ((t, u, k), &g) in grad.indexed_iter() {
            let fd = (loss_at((t, u, k), h) - loss_at((t, u, k), -h)) / (2.0 * h);
            worst = worst.max(rel_err(g, fd, 1e-6));
        }
    }
    let detail = format!("max rel err {worst:.2e}, max |sum + (T+U)| {worst_sum:.2e}");
    if worst < 1e-4 && worst_sum < 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c4_model_gradient() -> Result<String, String> {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        input_vocab: 20,
        output_vocab: 24,
        max_len: 128,
        seed: 404,
    };
    let params = ModelParams::<f64>::init(&cfg).map_err(|e| e.to_string())?;
    let pair = &generate(&TaskSpec { seed: 404, ..Default::default() }, 1, 5..=5).unwrap()[0];
    let loss = |p: &ModelParams<f64>| {
        let lat = build_lattice(p, &pair.x, &pair.y).unwrap();
        -lattice::total_log_prob(&lat, &pair.y).unwrap()
    };
    let lat = build_lattice(&params, &pair.x, &pair.y).map_err(|e| e.to_string())?;
    let (_, grad_lattice) = lattice::loss_and_grad(&lat, &pair.y).map_err(|e| e.to_string())?;
    let grads = model::backward_pass(&params, &pair.x, &pair.y, &grad_lattice).map_err(|e| e.to_string())?;

    let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(4040);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let analytic = grads.tensors()[which].1.iter().nth(flat).copied().unwrap();
        let nudged = |delta: f64| {
            let mut p = params.clone();
            let mut tensors = p.tensors_mut();
            *tensors[which].1.iter_mut().nth(flat).unwrap() += delta;
            drop(tensors);
            loss(&p)
        };
        let fd = (nudged(h) - nudged(-h)) / (2.0 * h);
        worst = worst.max(rel_err(analytic, fd, 1e-6));
    }
    let detail = format!("20 parameters of {total}, max rel err {worst:.2e}");
    if worst < 1e-3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c5_viterbi() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (t_len, u_len, vbar) = (rng.gen_range(1..=5), rng.gen_range(0..=5), rng.gen_range(2..=5));
        let lat = random_lattice(&mut rng, t_len, u_len, vbar);
        let y = random_targets(&mut rng, u_len, vbar);
        let best = all_paths(t_len, u_len)
            .iter()
            .map(|p| path_prob(&lat, &y, p).0)
            .fold(0.0f64, f64::max);
        let path = lattice::forced_align(&lat, &y).map_err(|e| e.to_string())?;
        path.validate().map_err(|e| e.to_string())?;
        let got = path.log_prob(&lat, &y).map_err(|e| e.to_string())?.exp();
        worst = worst.max(rel_err(got, best, 0.0));
    }

    let mut planted = 0;
    for _ in 0..50 {
        let t_len = rng.gen_range(1..=12);
        let durations: Vec<usize> = (0..t_len).map(|_| rng.gen_range(0..=3)).collect();
        let truth = AlignmentPath::from_durations(&durations).unwrap();
        let u_len = truth.tokens();
        let vbar = 4;
        let y = random_targets(&mut rng, u_len, vbar);
        let mut on_path = std::collections::HashMap::new();
        for ((t, u), step) in truth.nodes().into_iter().zip(truth.steps()) {
            on_path.insert((t, u), *step);
        }
        let lat = LogProbLattice::from_fn(t_len, u_len, vbar, |t, u, k| {
            let emit_k = if u < u_len { y[u] } else { usize::MAX };
            let favored = match on_path.get(&(t, u)) {
                Some(Step::Emit) => emit_k,
                _ => vbar - 1,
            };
            if k == favored {
                0.99f64.ln()
            } else {
                (0.01f64 / (vbar - 1) as f64).ln()
            }
        })
        .unwrap();
        if lattice::forced_align(&lat, &y).map_err(|e| e.to_string())? == truth {
            planted += 1;
        }
    }
    let detail = format!("max rel err vs exhaustive max {worst:.2e}; planted staircases recovered {planted}/50");
    if worst < 1e-12 && planted == 50 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// trained-model criteria

struct Trained {
    params: ModelParams<f32>,
    curve: Vec<f64>,
    elapsed: Duration,
    plain: EvalReport,
    boundary_accuracy: f64,
}

struct Data {
    train: Vec<SequencePair>,
    heldout: Vec<SequencePair>,
    dev_long: Vec<SequencePair>,
    test_long: Vec<SequencePair>,
}

fn data() -> Data {
    let spec = TaskSpec::default();
    let train = generate(&TaskSpec { seed: 1, ..spec.clone() }, 2000, SHORT_LENGTHS).unwrap();
    let heldout = generate(&TaskSpec { seed: 2, ..spec.clone() }, 200, SHORT_LENGTHS).unwrap();
    let dev = generate(&TaskSpec { seed: 3, ..spec }, 100, SHORT_LENGTHS).unwrap();
    Data {
        dev_long: make_long_concat(&dev, 5),
        test_long: make_long_concat(&heldout, 5),
        train,
        heldout,
    }
}

fn train_model(data: &Data) -> Trained {
    let start = Instant::now();
    let init = ModelParams::init(&ModelConfig::default()).unwrap();
    let opts = LoopOptions {
        epochs: EPOCHS,
        ..Default::default()
    };
    let (state, curve) = trainer::train_loop(TrainerState::new(init), &data.train, &TrainConfig::default(), &opts, |_| {})
        .expect("training runs");
    let plain = evaluate(&state.params, &data.heldout, PromptMode::Plain, &DecodeOptions::default(), Exec::default());
    let mut tally = Tally::default();
    for pair in &data.heldout {
        let lat = build_lattice(&state.params, &pair.x, &pair.y).unwrap();
        let path = lattice::forced_align(&lat, &pair.y).unwrap();
        tally.add_boundaries(&pair.durations, &path.durations(), 1);
    }
    Trained {
        params: state.params,
        curve: epoch_means(&curve),
        elapsed: start.elapsed(),
        plain,
        boundary_accuracy: tally.boundary_accuracy(),
    }
}

fn c6_convergence(m: &Trained) -> Result<String, String> {
    let ter = m.plain.token_error_rate();
    let first = m.curve[0];
    let last = *m.curve.last().unwrap();
    let detail = format!(
        "{} epochs in {:.0}s, epoch loss {first:.2} -> {last:.2}, TER {:.2}%, boundary accuracy {:.2}%, duration accuracy {:.2}%",
        m.curve.len(),
        m.elapsed.as_secs_f64(),
        100.0 * ter,
        100.0 * m.boundary_accuracy,
        100.0 * m.plain.duration_accuracy()
    );
    let ok = m.curve.len() <= 30
        && m.elapsed <= TRAIN_BUDGET
        && ter <= 0.05
        && m.boundary_accuracy >= 0.90
        && last <= 0.2 * first;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Decodes {
    prompt: EvalReport,
    pseudo: EvalReport,
    window: Window,
    dev_sweep: Vec<(Window, f64)>,
    long_windowed: EvalReport,
    long_unwindowed: EvalReport,
}

fn run_decodes(m: &Trained, data: &Data) -> Decodes {
    let opts = DecodeOptions::default();
    let prompt = evaluate(&m.params, &data.heldout, PromptMode::Prompt, &opts, Exec::default());
    let pseudo = evaluate(&m.params, &data.heldout, PromptMode::PseudoPrompt, &opts, Exec::default());

    // window chosen on a separate long set
    let mut dev_sweep = Vec::new();
    for n in [2, 5, 10, 20] {
        for mm in [2, 5, 15] {
            let window = Window::new(n, mm);
            let o = DecodeOptions {
                window: Some(window),
                ..opts
            };
            let r = evaluate(&m.params, &data.dev_long, PromptMode::Plain, &o, Exec::default());
            dev_sweep.push((window, r.token_error_rate()));
        }
    }
    let window = dev_sweep
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|w| w.0)
        .unwrap();
    let long_windowed = evaluate(
        &m.params,
        &data.test_long,
        PromptMode::Plain,
        &DecodeOptions {
            window: Some(window),
            ..opts
        },
        Exec::default(),
    );
    let lifted = m.params.clone().with_max_len(usize::MAX);
    let long_unwindowed = evaluate(&lifted, &data.test_long, PromptMode::Plain, &opts, Exec::default());
    Decodes {
        prompt,
        pseudo,
        window,
        dev_sweep,
        long_windowed,
        long_unwindowed,
    }
}

fn c7_invariants(m: &Trained, d: &Decodes) -> Result<String, String> {
    let sets = [
        ("plain", &m.plain),
        ("prompt", &d.prompt),
        ("pseudo-prompt", &d.pseudo),
        ("long windowed", &d.long_windowed),
        ("long unwindowed", &d.long_unwindowed),
    ];
    let decodes: usize = sets.iter().map(|s| s.1.items.len()).sum();
    let violations: usize = sets.iter().map(|s| s.1.violations).sum();
    // the unwindowed long decode runs outside the trained length range on purpose;
    // budget aborts there are reported, not counted
    let aborted: usize = sets[..4].iter().map(|s| s.1.failures).sum();
    let detail = format!(
        "{decodes} decodes, {violations} invariant violations, {aborted} aborted (unwindowed long aborts: {})",
        d.long_unwindowed.failures
    );
    if violations == 0 && aborted == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c8_pseudo_prompt(d: &Decodes) -> Result<String, String> {
    let (real, pseudo) = (d.prompt.token_error_rate(), d.pseudo.token_error_rate());
    let detail = format!(
        "{} continuations: real transcription TER {:.2}%, pseudo TER {:.2}%",
        d.prompt.items.len(),
        100.0 * real,
        100.0 * pseudo
    );
    if (pseudo - real).abs() <= 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c9_long_windowing(m: &Trained, d: &Decodes, data: &Data) -> Result<String, String> {
    let short = m.plain.token_error_rate();
    let windowed = d.long_windowed.token_error_rate();
    let unwindowed = d.long_unwindowed.token_error_rate();
    let longest_train = data.train.iter().map(|p| p.x.len()).max().unwrap();
    let shortest_long = data.test_long.iter().map(|p| p.x.len()).min().unwrap();
    let sweep: Vec<String> = d
        .dev_sweep
        .iter()
        .map(|(w, ter)| format!("{},{}:{:.1}%", w.n.unwrap(), w.m.unwrap(), 100.0 * ter))
        .collect();
    let detail = format!(
        "{} long utterances (T >= {shortest_long} vs train T <= {longest_train}); window n={},m={}: TER {:.2}% vs short {:.2}%; unwindowed {:.2}%; dev sweep [{}]",
        data.test_long.len(),
        d.window.n.unwrap(),
        d.window.m.unwrap(),
        100.0 * windowed,
        100.0 * short,
        100.0 * unwindowed,
        sweep.join(" ")
    );
    if shortest_long > longest_train && windowed <= short + 0.05 && windowed <= unwindowed {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_sweep_cli(dir: &Path, ckpt: &Path, long: &Path, out: &str, sequential: bool) -> String {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_transducer"));
    cmd.arg("--workdir").arg(dir);
    if sequential {
        cmd.arg("--sequential");
    }
    let status = cmd
        .args(["sweep", "--ckpt"])
        .arg(ckpt)
        .arg("--long-corpus")
        .arg(long)
        .args(["--n-list", "0,2,5,10,20,unbounded", "--m", "15", "--out", out])
        .output()
        .expect("binary runs");
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    fs::read_to_string(dir.join(out)).unwrap()
}

fn c10_sweep_harness(m: &Trained, data: &Data) -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("trained.bin");
    let long = dir.path().join("long.txt");
    model::save_checkpoint(&ckpt, &Checkpoint::new(m.params.clone())).map_err(|e| e.to_string())?;
    corpus::save(&long, &data.test_long).map_err(|e| e.to_string())?;

    let first = run_sweep_cli(dir.path(), &ckpt, &long, "a.csv", false);
    let second = run_sweep_cli(dir.path(), &ckpt, &long, "b.csv", false);
    let sequential = run_sweep_cli(dir.path(), &ckpt, &long, "c.csv", true);
    let rows: Vec<&str> = first.lines().skip(1).collect();
    let work: Vec<u64> = rows.iter().map(|r| r.rsplit(',').next().unwrap().parse().unwrap()).collect();
    let monotone = work.windows(2).all(|w| w[0] <= w[1]);

    // reference curve recorded from a fixed checkpoint
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let golden = run_sweep_cli_m(dir.path(), &fixtures.join("identity.ckpt"), &fixtures.join("identity_long.txt"), "g.csv", 3);
    let golden_ok = golden == fs::read_to_string(fixtures.join("identity_sweep.csv")).map_err(|e| e.to_string())?;

    let curve: Vec<String> = rows
        .iter()
        .map(|r| {
            let f: Vec<&str> = r.split(',').collect();
            format!("{}:{}", f[0], f[1])
        })
        .collect();
    let detail = format!(
        "rows {}, repeat identical {}, sequential identical {}, cost monotone in n {}, golden match {}; curve [{}]",
        rows.len(),
        first == second,
        first == sequential,
        monotone,
        golden_ok,
        curve.join(" ")
    );
    if rows.len() == 6 && first == second && first == sequential && monotone && golden_ok && rows[5].starts_with("unbounded,") {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_sweep_cli_m(dir: &Path, ckpt: &Path, long: &Path, out: &str, m: usize) -> String {
    let status = Command::new(env!("CARGO_BIN_EXE_transducer"))
        .arg("--workdir")
        .arg(dir)
        .args(["sweep", "--ckpt"])
        .arg(ckpt)
        .arg("--long-corpus")
        .arg(long)
        .args(["--n-list", "0,2,5,10,20,unbounded", "--m", &m.to_string(), "--out", out])
        .output()
        .expect("binary runs");
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    fs::read_to_string(dir.join(out)).unwrap()
}

fn c11_determinism(m: &Trained, data: &Data) -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    let ckpt_path = dir.path().join("m.bin");
    model::save_checkpoint(&ckpt_path, &Checkpoint::new(m.params.clone())).map_err(|e| e.to_string())?;
    let loaded = model::load_checkpoint(&ckpt_path).map_err(|e| e.to_string())?;
    let again = dir.path().join("m2.bin");
    model::save_checkpoint(&again, &loaded).map_err(|e| e.to_string())?;
    let ckpt_ok = loaded.params == m.params && fs::read(&ckpt_path).unwrap() == fs::read(&again).unwrap();

    let corpus_path = dir.path().join("train.txt");
    corpus::save(&corpus_path, &data.train).map_err(|e| e.to_string())?;
    let back = corpus::load(&corpus_path, 20, 24).map_err(|e| e.to_string())?;
    let corpus_again = dir.path().join("train2.txt");
    corpus::save(&corpus_again, &back).map_err(|e| e.to_string())?;
    let corpus_ok = back == data.train && fs::read(&corpus_path).unwrap() == fs::read(&corpus_again).unwrap();

    let subset = &data.train[..96];
    let run = |exec: Exec, out_dir: Option<&Path>, epochs: usize, state: Option<TrainerState>| {
        let cfg = TrainConfig {
            seed: 11,
            exec,
            ..Default::default()
        };
        let state = state.unwrap_or_else(|| TrainerState::new(ModelParams::init(&ModelConfig::default()).unwrap()));
        let opts = LoopOptions {
            epochs,
            out_dir: out_dir.map(Path::to_path_buf),
            checkpoint_every: None,
        };
        trainer::train_loop(state, subset, &cfg, &opts, |_| {}).unwrap()
    };
    let (a, curve_a) = run(Exec::Parallel, None, 2, None);
    let (b, curve_b) = run(Exec::Parallel, None, 2, None);
    let (c, curve_c) = run(Exec::Sequential, None, 2, None);
    let resume_dir = dir.path().join("resume");
    let (_, first_half) = run(Exec::Parallel, Some(&resume_dir), 1, None);
    let mid = model::load_checkpoint(&trainer::checkpoint_path(&resume_dir, first_half.last().unwrap().step))
        .map_err(|e| e.to_string())?;
    let resumed = TrainerState::from_checkpoint(mid).map_err(|e| e.to_string())?;
    let (d, second_half) = run(Exec::Parallel, None, 2, Some(resumed));
    let trajectories_ok = curve_a == curve_b
        && a == b
        && curve_a == curve_c
        && a == c
        && d == a
        && [first_half, second_half].concat() == curve_a;

    let detail = format!(
        "checkpoint round trip {ckpt_ok}, corpus round trip {corpus_ok}, seeded trajectories (repeat, sequential, resumed) {trajectories_ok}"
    );
    if ckpt_ok && corpus_ok && trajectories_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------

fn record(results: &mut Vec<bool>, id: usize, name: &str, f: impl FnOnce() -> Result<String, String>) {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("[{tag}] criterion {id:>2} {name}: {detail}");
    results.push(outcome.is_ok());
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    record(&mut results, 1, "lattice oracle equivalence", c1_oracle_equivalence);
    record(&mut results, 2, "forward/backward duality and anti-diagonal conservation", c2_duality_and_conservation);
    record(&mut results, 3, "lattice gradient vs finite differences", c3_lattice_gradient);
    record(&mut results, 4, "full-model gradient check", c4_model_gradient);
    record(&mut results, 5, "forced alignment", c5_viterbi);

    let data = data();
    let trained = train_model(&data);
    record(&mut results, 6, "training convergence", || c6_convergence(&trained));
    let decodes = run_decodes(&trained, &data);
    record(&mut results, 7, "monotonic decoding invariants", || c7_invariants(&trained, &decodes));
    record(&mut results, 8, "pseudo-prompt parity", || c8_pseudo_prompt(&decodes));
    record(&mut results, 9, "long-sequence windowing", || c9_long_windowing(&trained, &decodes, &data));
    record(&mut results, 10, "window sweep harness", || c10_sweep_harness(&trained, &data));
    record(&mut results, 11, "determinism and round trips", || c11_determinism(&trained, &data));

    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
