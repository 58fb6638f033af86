//! Token error rate and alignment scores against ground truth.

/// Edit distance with unit insert, delete and substitute costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Running sums for corpus-level scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub edits: usize,
    pub ref_tokens: usize,
    pub durations_matched: usize,
    pub phonemes: usize,
    pub boundaries_matched: usize,
    pub boundaries: usize,
}

impl Tally {
    pub fn add_tokens(&mut self, reference: &[usize], hypothesis: &[usize]) {
        self.edits += levenshtein(reference, hypothesis);
        self.ref_tokens += reference.len();
    }

    /// Exact per-input duration agreement; a length mismatch counts every input as wrong.
    pub fn add_durations(&mut self, reference: &[usize], hypothesis: &[usize]) {
        self.phonemes += reference.len();
        if reference.len() == hypothesis.len() {
            self.durations_matched += reference.iter().zip(hypothesis).filter(|(a, b)| a == b).count();
        }
    }

    /// Internal boundaries (`T - 1` per utterance) placed within `tolerance` output steps.
    pub fn add_boundaries(&mut self, reference: &[usize], hypothesis: &[usize], tolerance: usize) {
        let internal = reference.len().saturating_sub(1);
        self.boundaries += internal;
        if reference.len() != hypothesis.len() {
            return;
        }
        let (mut r, mut h) = (0usize, 0usize);
        for (a, b) in reference.iter().zip(hypothesis).take(internal) {
            r += a;
            h += b;
            if r.abs_diff(h) <= tolerance {
                self.boundaries_matched += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &Tally) {
        self.edits += other.edits;
        self.ref_tokens += other.ref_tokens;
        self.durations_matched += other.durations_matched;
        self.phonemes += other.phonemes;
        self.boundaries_matched += other.boundaries_matched;
        self.boundaries += other.boundaries;
    }

    /// Edits per reference token; 0 for an empty reference.
    pub fn token_error_rate(&self) -> f64 {
        ratio(self.edits, self.ref_tokens, 0.0)
    }

    pub fn duration_accuracy(&self) -> f64 {
        ratio(self.durations_matched, self.phonemes, 1.0)
    }

    pub fn boundary_accuracy(&self) -> f64 {
        ratio(self.boundaries_matched, self.boundaries, 1.0)
    }
}

fn ratio(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance() {
        assert_eq!(levenshtein::<u8>(&[], &[]), 0);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein(b"abc", b""), 3);
        assert_eq!(levenshtein(b"", b"ab"), 2);
        assert_eq!(levenshtein(b"flaw", b"lawn"), 2);
    }

    #[test]
    fn scores() {
        let mut t = Tally::default();
        t.add_tokens(&[1, 2, 3, 4], &[1, 2, 4]);
        assert_eq!(t.token_error_rate(), 0.25);

        t.add_durations(&[1, 2, 3], &[1, 3, 2]);
        assert!((t.duration_accuracy() - 1.0 / 3.0).abs() < 1e-12);

        // boundaries at 2,4,7 vs 3,4,9
        t.add_boundaries(&[2, 2, 3, 1], &[3, 1, 5, 0], 1);
        assert_eq!((t.boundaries_matched, t.boundaries), (2, 3));
        assert_eq!(Tally::default().boundary_accuracy(), 1.0);
    }
}
