//! Word error rate over gloss sequences.

use crate::error::{Error, Result};

/// Edit operation counts of a minimum-cost alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Alignment {
    pub deletions: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub matches: usize,
    pub ref_len: usize,
}

impl Alignment {
    pub fn errors(&self) -> usize {
        self.deletions + self.substitutions + self.insertions
    }
}

impl std::ops::AddAssign for Alignment {
    fn add_assign(&mut self, o: Self) {
        self.deletions += o.deletions;
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.matches += o.matches;
        self.ref_len += o.ref_len;
    }
}

/// Levenshtein alignment with unit costs. Among equal-cost choices the
/// backtrace prefers match, then substitution, deletion, insertion.
pub fn edit_alignment<T: PartialEq>(reference: &[T], hyp: &[T]) -> Alignment {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }

    let mut a = Alignment {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if same && cur == d[(i - 1) * w + j - 1] {
                a.matches += 1;
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && cur == d[(i - 1) * w + j - 1] + 1 {
                a.substitutions += 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cur == d[(i - 1) * w + j] + 1 {
            a.deletions += 1;
            i -= 1;
        } else {
            a.insertions += 1;
            j -= 1;
        }
    }
    a
}

/// `(deletions + substitutions + insertions) / len(reference)`.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("WER undefined for an empty reference"));
    }
    let a = edit_alignment(reference, hyp);
    Ok(a.errors() as f64 / a.ref_len as f64)
}

/// Corpus-level error accumulator: total errors over total reference glosses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorpusWer {
    pub totals: Alignment,
}

impl CorpusWer {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hyp: &[T]) -> Alignment {
        let a = edit_alignment(reference, hyp);
        self.totals += a;
        a
    }

    pub fn wer(&self) -> Result<f64> {
        if self.totals.ref_len == 0 {
            return Err(Error::invalid("WER undefined for an empty reference"));
        }
        Ok(self.totals.errors() as f64 / self.totals.ref_len as f64)
    }
}
