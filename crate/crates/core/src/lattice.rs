//! Transducer lattice mathematics in log space.
//!
//! A lattice holds, for every node `(t, u)` of the `T x (U+1)` alignment grid,
//! a normalized log-distribution over the extended vocabulary `V + 1` where the
//! last index is the blank. A complete alignment path starts at `(0, 0)`, takes
//! `U` emit steps (advance `u`) and `T` blank steps (advance `t`), and always
//! terminates with the blank emitted at `(T-1, U)`.
//!
//! Everything here is a pure function of its inputs.

use ndarray::{Array2, Array3, ArrayView1};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("invalid lattice shape: {0}")]
    Shape(String),
    #[error("target length {targets} does not match lattice with U = {lattice_u}")]
    TargetLength { targets: usize, lattice_u: usize },
    #[error("target token {token} at position {pos} is outside [0, {vocab})")]
    TokenOutOfRange { pos: usize, token: usize, vocab: usize },
    #[error("non-finite lattice entry at ({t}, {u}, {k}): {value}")]
    NonFinite { t: usize, u: usize, k: usize, value: f64 },
    #[error("degenerate lattice: every alignment path has probability zero")]
    Degenerate,
    #[error("invalid alignment path: {0}")]
    InvalidPath(String),
}

pub type Result<T> = std::result::Result<T, LatticeError>;

/// `log(exp(a) + exp(b))`, exact for `-inf` operands.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Log-sum-exp over a slice; `-inf` for an empty or all-`-inf` input.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Emission lattice of next-token log-distributions, shape `T x (U+1) x (V+1)`.
///
/// Entries may be `-inf` (probability zero) but never NaN or `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbLattice {
    entries: Array3<f64>,
}

impl LogProbLattice {
    pub fn new(entries: Array3<f64>) -> Result<Self> {
        let (t, _u1, vbar) = entries.dim();
        if t == 0 {
            return Err(LatticeError::Shape("T must be at least 1".into()));
        }
        if vbar < 2 {
            return Err(LatticeError::Shape(format!(
                "extended vocabulary must hold at least one token and the blank, got {vbar}"
            )));
        }
        for ((t, u, k), &v) in entries.indexed_iter() {
            if v.is_nan() || v == f64::INFINITY {
                return Err(LatticeError::NonFinite { t, u, k, value: v });
            }
        }
        Ok(Self { entries })
    }

    pub fn from_fn(
        frames: usize,
        tokens: usize,
        vbar: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn((frames, tokens + 1, vbar), |(t, u, k)| {
            f(t, u, k)
        }))
    }

    /// Every row is the uniform distribution over `vbar` symbols.
    pub fn uniform(frames: usize, tokens: usize, vbar: usize) -> Result<Self> {
        let lp = -(vbar as f64).ln();
        Self::from_fn(frames, tokens, vbar, |_, _, _| lp)
    }

    /// Number of input positions `T`.
    pub fn frames(&self) -> usize {
        self.entries.dim().0
    }

    /// Number of output tokens `U`.
    pub fn tokens(&self) -> usize {
        self.entries.dim().1 - 1
    }

    pub fn vbar(&self) -> usize {
        self.entries.dim().2
    }

    pub fn blank(&self) -> usize {
        self.vbar() - 1
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize, k: usize) -> f64 {
        self.entries[[t, u, k]]
    }

    pub fn row(&self, t: usize, u: usize) -> ArrayView1<'_, f64> {
        self.entries.slice(ndarray::s![t, u, ..])
    }

    pub fn entries(&self) -> &Array3<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> Array3<f64> {
        self.entries
    }

    /// Largest deviation of any row's log-sum-exp from zero.
    pub fn max_normalization_error(&self) -> f64 {
        let (t_len, u_len, _) = self.entries.dim();
        let mut worst: f64 = 0.0;
        for t in 0..t_len {
            for u in 0..u_len {
                worst = worst.max(log_sum_exp(self.row(t, u).iter().copied()).abs());
            }
        }
        worst
    }

    fn check_targets(&self, targets: &[usize]) -> Result<()> {
        if targets.len() != self.tokens() {
            return Err(LatticeError::TargetLength {
                targets: targets.len(),
                lattice_u: self.tokens(),
            });
        }
        let vocab = self.blank();
        if let Some((pos, &token)) = targets.iter().enumerate().find(|(_, &y)| y >= vocab) {
            return Err(LatticeError::TokenOutOfRange { pos, token, vocab });
        }
        Ok(())
    }

    #[inline]
    fn blank_lp(&self, t: usize, u: usize) -> f64 {
        self.entries[[t, u, self.blank()]]
    }

    /// Log-probability of emitting `targets[u]` (the `(u+1)`-th token) from node `(t, u)`.
    #[inline]
    fn emit_lp(&self, t: usize, u: usize, targets: &[usize]) -> f64 {
        self.entries[[t, u, targets[u]]]
    }
}

/// One step of an alignment path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Step {
    /// Emit the next output token (advance `u`).
    Emit,
    /// Emit the blank (advance `t`).
    Blank,
}

/// A monotone path through the alignment grid of length `T + U`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AlignmentPath {
    frames: usize,
    tokens: usize,
    steps: Vec<Step>,
}

impl AlignmentPath {
    pub fn new(frames: usize, tokens: usize, steps: Vec<Step>) -> Result<Self> {
        let path = Self { frames, tokens, steps };
        path.validate()?;
        Ok(path)
    }

    /// Builds the path where input position `t` emits `durations[t]` tokens.
    pub fn from_durations(durations: &[usize]) -> Result<Self> {
        let tokens = durations.iter().sum();
        let mut steps = Vec::with_capacity(durations.len() + tokens);
        for &d in durations {
            steps.extend(std::iter::repeat(Step::Emit).take(d));
            steps.push(Step::Blank);
        }
        Self::new(durations.len(), tokens, steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(LatticeError::InvalidPath("T must be at least 1".into()));
        }
        if self.steps.len() != self.frames + self.tokens {
            return Err(LatticeError::InvalidPath(format!(
                "length {} != T + U = {}",
                self.steps.len(),
                self.frames + self.tokens
            )));
        }
        let blanks = self.steps.iter().filter(|s| **s == Step::Blank).count();
        if blanks != self.frames {
            return Err(LatticeError::InvalidPath(format!(
                "{blanks} blanks for T = {}",
                self.frames
            )));
        }
        if self.steps.last() != Some(&Step::Blank) {
            return Err(LatticeError::InvalidPath("path must end with a blank".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    /// Grid node at which each step is taken; the first is `(0, 0)`.
    pub fn nodes(&self) -> Vec<(usize, usize)> {
        let (mut t, mut u) = (0, 0);
        self.steps
            .iter()
            .map(|step| {
                let node = (t, u);
                match step {
                    Step::Emit => u += 1,
                    Step::Blank => t += 1,
                }
                node
            })
            .collect()
    }

    /// Tokens emitted while each input position was current.
    pub fn durations(&self) -> Vec<usize> {
        let mut out = vec![0; self.frames];
        let mut t = 0;
        for step in &self.steps {
            match step {
                Step::Emit => out[t] += 1,
                Step::Blank => t += 1,
            }
        }
        out
    }

    /// Sum of the step log-probabilities along this path.
    pub fn log_prob(&self, lat: &LogProbLattice, targets: &[usize]) -> Result<f64> {
        lat.check_targets(targets)?;
        if lat.frames() != self.frames || lat.tokens() != self.tokens {
            return Err(LatticeError::Shape(format!(
                "path is {}x{} but lattice is {}x{}",
                self.frames,
                self.tokens,
                lat.frames(),
                lat.tokens()
            )));
        }
        Ok(self
            .nodes()
            .into_iter()
            .zip(&self.steps)
            .map(|((t, u), step)| match step {
                Step::Emit => lat.emit_lp(t, u, targets),
                Step::Blank => lat.blank_lp(t, u),
            })
            .sum())
    }
}

/// Forward, backward and posterior grids of one lattice, all `T x (U+1)` in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMap {
    pub log_alpha: Array2<f64>,
    pub log_beta: Array2<f64>,
    pub log_gamma: Array2<f64>,
    pub log_total: f64,
}

impl PosteriorMap {
    /// `log alpha(T-1, U)` without the terminal blank factor.
    pub fn log_alpha_terminal(&self) -> f64 {
        let (t, u) = self.log_alpha.dim();
        self.log_alpha[[t - 1, u - 1]]
    }
}

/// Log forward variables: `alpha(t, u)` is the mass of all path prefixes reaching `(t, u)`.
pub fn forward_variables(lat: &LogProbLattice, targets: &[usize]) -> Result<Array2<f64>> {
    lat.check_targets(targets)?;
    let (t_len, u_len) = (lat.frames(), lat.tokens() + 1);
    let mut alpha = Array2::from_elem((t_len, u_len), f64::NEG_INFINITY);
    alpha[[0, 0]] = 0.0;
    for t in 0..t_len {
        for u in 0..u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 {
                acc = log_add(acc, alpha[[t - 1, u]] + lat.blank_lp(t - 1, u));
            }
            if u > 0 {
                acc = log_add(acc, alpha[[t, u - 1]] + lat.emit_lp(t, u - 1, targets));
            }
            alpha[[t, u]] = acc;
        }
    }
    Ok(alpha)
}

/// Log backward variables: `beta(t, u)` is the mass of all path suffixes from `(t, u)`,
/// including the terminal blank.
pub fn backward_variables(lat: &LogProbLattice, targets: &[usize]) -> Result<Array2<f64>> {
    lat.check_targets(targets)?;
    let (t_len, u_len) = (lat.frames(), lat.tokens() + 1);
    let mut beta = Array2::from_elem((t_len, u_len), f64::NEG_INFINITY);
    for t in (0..t_len).rev() {
        for u in (0..u_len).rev() {
            let mut acc = f64::NEG_INFINITY;
            if t + 1 < t_len {
                acc = log_add(acc, beta[[t + 1, u]] + lat.blank_lp(t, u));
            } else if u + 1 == u_len {
                acc = lat.blank_lp(t, u);
            }
            if u + 1 < u_len {
                acc = log_add(acc, beta[[t, u + 1]] + lat.emit_lp(t, u, targets));
            }
            beta[[t, u]] = acc;
        }
    }
    Ok(beta)
}

/// `log Pr(y|x)`, including the terminal blank at `(T-1, U)`.
pub fn total_log_prob(lat: &LogProbLattice, targets: &[usize]) -> Result<f64> {
    let alpha = forward_variables(lat, targets)?;
    let (t, u) = (lat.frames() - 1, lat.tokens());
    Ok(alpha[[t, u]] + lat.blank_lp(t, u))
}

/// Negative log-likelihood and its gradient with respect to every lattice entry.
pub fn loss_and_grad(lat: &LogProbLattice, targets: &[usize]) -> Result<(f64, Array3<f64>)> {
    if let Some(((t, u, k), &value)) = lat
        .entries
        .indexed_iter()
        .find(|(_, v)| !v.is_finite())
    {
        return Err(LatticeError::NonFinite { t, u, k, value });
    }
    let post = posterior_map(lat, targets)?;
    let log_total = post.log_total;
    if log_total == f64::NEG_INFINITY {
        return Err(LatticeError::Degenerate);
    }
    let (t_len, u_len) = (lat.frames(), lat.tokens() + 1);
    let blank = lat.blank();
    let mut grad = Array3::zeros(lat.entries.dim());
    for t in 0..t_len {
        for u in 0..u_len {
            let a = post.log_alpha[[t, u]];
            let next_blank = if t + 1 < t_len {
                post.log_beta[[t + 1, u]]
            } else if u + 1 == u_len {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            grad[[t, u, blank]] = -(a + lat.blank_lp(t, u) + next_blank - log_total).exp();
            if u + 1 < u_len {
                grad[[t, u, targets[u]]] =
                    -(a + lat.emit_lp(t, u, targets) + post.log_beta[[t, u + 1]] - log_total)
                        .exp();
            }
        }
    }
    Ok((-log_total, grad))
}

/// Forward, backward and posterior grids together with `log Pr(y|x)`.
pub fn posterior_map(lat: &LogProbLattice, targets: &[usize]) -> Result<PosteriorMap> {
    let log_alpha = forward_variables(lat, targets)?;
    let log_beta = backward_variables(lat, targets)?;
    let log_gamma = &log_alpha + &log_beta;
    let log_total = log_beta[[0, 0]];
    Ok(PosteriorMap {
        log_alpha,
        log_beta,
        log_gamma,
        log_total,
    })
}

/// Viterbi alignment: the single most probable complete path.
///
/// Ties between the blank and the emit predecessor resolve to the blank.
pub fn forced_align(lat: &LogProbLattice, targets: &[usize]) -> Result<AlignmentPath> {
    lat.check_targets(targets)?;
    let (t_len, u_len) = (lat.frames(), lat.tokens() + 1);
    let mut best = Array2::from_elem((t_len, u_len), f64::NEG_INFINITY);
    // true when the best predecessor of (t, u) is the blank from (t-1, u)
    let mut from_blank = Array2::from_elem((t_len, u_len), false);
    best[[0, 0]] = 0.0;
    for t in 0..t_len {
        for u in 0..u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let via_blank = if t > 0 {
                best[[t - 1, u]] + lat.blank_lp(t - 1, u)
            } else {
                f64::NEG_INFINITY
            };
            let via_emit = if u > 0 {
                best[[t, u - 1]] + lat.emit_lp(t, u - 1, targets)
            } else {
                f64::NEG_INFINITY
            };
            let blank_wins = t > 0 && (via_blank >= via_emit || u == 0);
            from_blank[[t, u]] = blank_wins;
            best[[t, u]] = if blank_wins { via_blank } else { via_emit };
        }
    }
    if best[[t_len - 1, u_len - 1]] + lat.blank_lp(t_len - 1, u_len - 1) == f64::NEG_INFINITY {
        return Err(LatticeError::Degenerate);
    }
    let mut steps = Vec::with_capacity(t_len + u_len - 1);
    steps.push(Step::Blank);
    let (mut t, mut u) = (t_len - 1, u_len - 1);
    while t > 0 || u > 0 {
        if from_blank[[t, u]] {
            steps.push(Step::Blank);
            t -= 1;
        } else {
            steps.push(Step::Emit);
            u -= 1;
        }
    }
    steps.reverse();
    AlignmentPath::new(t_len, u_len - 1, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lattice(rng: &mut ChaCha8Rng, frames: usize, tokens: usize, vbar: usize) -> LogProbLattice {
        let mut entries = Array3::zeros((frames, tokens + 1, vbar));
        for t in 0..frames {
            for u in 0..=tokens {
                let w: Vec<f64> = (0..vbar).map(|_| rng.gen_range(0.05..1.0)).collect();
                let z: f64 = w.iter().sum();
                for k in 0..vbar {
                    entries[[t, u, k]] = (w[k] / z).ln();
                }
            }
        }
        LogProbLattice::new(entries).unwrap()
    }

    fn random_targets(rng: &mut ChaCha8Rng, tokens: usize, vocab: usize) -> Vec<usize> {
        (0..tokens).map(|_| rng.gen_range(0..vocab)).collect()
    }

    /// Every complete path, enumerated by choosing emit positions among the first T+U-1 steps.
    fn all_paths(frames: usize, tokens: usize) -> Vec<AlignmentPath> {
        let n = frames + tokens - 1;
        let mut out = Vec::new();
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != tokens {
                continue;
            }
            let mut steps: Vec<Step> = (0..n)
                .map(|i| if mask >> i & 1 == 1 { Step::Emit } else { Step::Blank })
                .collect();
            steps.push(Step::Blank);
            out.push(AlignmentPath::new(frames, tokens, steps).unwrap());
        }
        out
    }

    fn path_prob(lat: &LogProbLattice, y: &[usize], path: &AlignmentPath) -> f64 {
        path.nodes()
            .into_iter()
            .zip(path.steps())
            .map(|((t, u), s)| match s {
                Step::Emit => lat.get(t, u, y[u]).exp(),
                Step::Blank => lat.get(t, u, lat.blank()).exp(),
            })
            .product()
    }

    #[test]
    fn single_node_forward_is_zero() {
        let lat = LogProbLattice::uniform(1, 0, 3).unwrap();
        let alpha = forward_variables(&lat, &[]).unwrap();
        assert_eq!(alpha[[0, 0]], 0.0);
    }

    #[test]
    fn two_by_two_uniform_forward() {
        let lat = LogProbLattice::uniform(2, 1, 3).unwrap();
        let alpha = forward_variables(&lat, &[0]).unwrap();
        assert!((alpha[[1, 1]].exp() - 2.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn backward_base_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lat = random_lattice(&mut rng, 1, 0, 4);
        let beta = backward_variables(&lat, &[]).unwrap();
        assert_eq!(beta[[0, 0]], lat.get(0, 0, 3));

        let lat = random_lattice(&mut rng, 1, 1, 4);
        let beta = backward_variables(&lat, &[2]).unwrap();
        assert!((beta[[0, 0]] - (lat.get(0, 0, 2) + lat.get(0, 1, 3))).abs() < 1e-14);
    }

    #[test]
    fn enumeration_matches_forward_and_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lat = random_lattice(&mut rng, 4, 3, 5);
        let y = random_targets(&mut rng, 3, 4);
        let brute: f64 = all_paths(4, 3).iter().map(|p| path_prob(&lat, &y, p)).sum();
        let alpha = forward_variables(&lat, &y).unwrap();
        let beta = backward_variables(&lat, &y).unwrap();
        assert!(((alpha[[3, 3]] + lat.get(3, 3, 4)).exp() - brute).abs() / brute < 1e-12);
        assert!((beta[[0, 0]].exp() - brute).abs() / brute < 1e-12);
        // alpha(T-1, U) alone is the prefix mass, short of the final blank
        let prefixes = brute / lat.get(3, 3, 4).exp();
        assert!((alpha[[3, 3]].exp() - prefixes).abs() / prefixes < 1e-12);
    }

    #[test]
    fn total_log_prob_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lat = random_lattice(&mut rng, 1, 0, 3);
        assert_eq!(total_log_prob(&lat, &[]).unwrap(), lat.get(0, 0, 2));

        let lat = random_lattice(&mut rng, 2, 2, 3);
        let y = [1, 0];
        let paths = all_paths(2, 2);
        assert_eq!(paths.len(), 3);
        let brute: f64 = paths.iter().map(|p| path_prob(&lat, &y, p)).sum();
        let total = total_log_prob(&lat, &y).unwrap();
        assert!((total.exp() - brute).abs() / brute < 1e-12);
        assert!(total.exp() > 0.0 && total.exp() <= 1.0);
    }

    #[test]
    fn trivial_gradient() {
        let lat = LogProbLattice::uniform(1, 0, 3).unwrap();
        let (loss, grad) = loss_and_grad(&lat, &[]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert_eq!(grad[[0, 0, 2]], -1.0);
        assert_eq!(grad[[0, 0, 0]], 0.0);
        assert_eq!(grad[[0, 0, 1]], 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lat = random_lattice(&mut rng, 3, 2, 4);
        let y = random_targets(&mut rng, 2, 3);
        let (_, grad) = loss_and_grad(&lat, &y).unwrap();
        let h = 1e-5;
        for ((t, u, k), &g) in grad.indexed_iter() {
            let mut plus = lat.entries().clone();
            plus[[t, u, k]] += h;
            let mut minus = lat.entries().clone();
            minus[[t, u, k]] -= h;
            let lp = -total_log_prob(&LogProbLattice::new(plus).unwrap(), &y).unwrap();
            let lm = -total_log_prob(&LogProbLattice::new(minus).unwrap(), &y).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            if k != y.get(u).copied().unwrap_or(usize::MAX) && k != 3 {
                assert_eq!(g, 0.0);
            }
            assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-6), "({t},{u},{k}) fd {fd} vs {g}");
        }
    }

    #[test]
    fn empty_target_is_single_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lat = random_lattice(&mut rng, 4, 0, 3);
        let expected: f64 = (0..4).map(|t| lat.get(t, 0, 2)).sum();
        let (loss, grad) = loss_and_grad(&lat, &[]).unwrap();
        assert!((loss + expected).abs() < 1e-12);
        assert!((grad.sum() + 4.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_conserved_on_anti_diagonals() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lat = random_lattice(&mut rng, 5, 4, 6);
        let y = random_targets(&mut rng, 4, 5);
        let post = posterior_map(&lat, &y).unwrap();
        assert!((post.log_gamma[[4, 4]] - post.log_total).abs() < 1e-10);
        assert_eq!(post.log_beta[[0, 0]], post.log_total);
        for k in 0..9 {
            let diag = log_sum_exp(
                (0..5)
                    .flat_map(|t| (0..5).map(move |u| (t, u)))
                    .filter(|(t, u)| t + u == k)
                    .map(|(t, u)| post.log_gamma[[t, u]]),
            );
            assert!((diag - post.log_total).abs() < 1e-10, "diagonal {k}");
        }
    }

    #[test]
    fn align_single_path() {
        let lat = LogProbLattice::uniform(1, 1, 3).unwrap();
        let path = forced_align(&lat, &[0]).unwrap();
        assert_eq!(path.steps(), &[Step::Emit, Step::Blank]);
    }

    #[test]
    fn align_recovers_planted_staircase() {
        let durations = [2, 1, 3, 1];
        let planted = AlignmentPath::from_durations(&durations).unwrap();
        let y = [0, 1, 0, 1, 1, 0, 1];
        let on_path: std::collections::HashSet<_> =
            planted.nodes().into_iter().zip(planted.steps().iter().copied()).collect();
        let lat = LogProbLattice::from_fn(4, 7, 3, |t, u, k| {
            let emit_here = on_path.contains(&((t, u), Step::Emit));
            let want_blank = !emit_here;
            let p = if (k == 2) == want_blank {
                0.99
            } else if k == 2 || (u < 7 && k == y[u]) {
                0.01
            } else {
                0.0
            };
            if p == 0.0 { f64::NEG_INFINITY } else { f64::ln(p) }
        })
        .unwrap();
        assert_eq!(forced_align(&lat, &y).unwrap(), planted);
    }

    #[test]
    fn align_is_exhaustive_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lat = random_lattice(&mut rng, 4, 4, 5);
        let y = random_targets(&mut rng, 4, 4);
        let best = all_paths(4, 4)
            .iter()
            .map(|p| path_prob(&lat, &y, p))
            .fold(0.0, f64::max);
        let path = forced_align(&lat, &y).unwrap();
        assert!((path.log_prob(&lat, &y).unwrap().exp() - best).abs() / best < 1e-12);
    }

    #[test]
    fn ties_prefer_blank() {
        // uniform lattice: every path has equal probability
        let lat = LogProbLattice::uniform(3, 2, 3).unwrap();
        let path = forced_align(&lat, &[0, 1]).unwrap();
        assert_eq!(path.durations(), vec![2, 0, 0]);
        assert_eq!(forced_align(&lat, &[0, 1]).unwrap(), path);
    }

    #[test]
    fn rejects_bad_targets() {
        let lat = LogProbLattice::uniform(2, 2, 3).unwrap();
        assert!(matches!(
            forward_variables(&lat, &[0]),
            Err(LatticeError::TargetLength { .. })
        ));
        assert!(matches!(
            total_log_prob(&lat, &[0, 2]),
            Err(LatticeError::TokenOutOfRange { pos: 1, token: 2, vocab: 2 })
        ));
        assert!(matches!(
            LogProbLattice::new(Array3::from_elem((1, 1, 3), f64::NAN)),
            Err(LatticeError::NonFinite { .. })
        ));
    }

    #[test]
    fn zero_probability_lattice_is_degenerate() {
        let lat = LogProbLattice::from_fn(2, 1, 2, |_, _, k| {
            if k == 1 { 0.0 } else { f64::NEG_INFINITY }
        })
        .unwrap();
        assert_eq!(total_log_prob(&lat, &[0]).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(loss_and_grad(&lat, &[0]), Err(LatticeError::NonFinite { .. })));
        assert!(matches!(forced_align(&lat, &[0]), Err(LatticeError::Degenerate)));
    }

    #[test]
    fn tiny_probabilities_stay_finite() {
        let lat = LogProbLattice::from_fn(6, 5, 4, |_, _, k| {
            if k == 0 { (1.0 - 3e-30f64).ln() } else { 1e-30f64.ln() }
        })
        .unwrap();
        let y = [1, 2, 1, 2, 0];
        let (loss, grad) = loss_and_grad(&lat, &y).unwrap();
        assert!(loss.is_finite());
        assert!(grad.iter().all(|g| g.is_finite()));
        assert!((grad.sum() + 11.0).abs() < 1e-6);
    }
}
