//! Word error rate by Levenshtein alignment.

use std::ops::AddAssign;

use crate::error::{Error, Result};

/// Edit operations of a minimal alignment plus the reference length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub subs: usize,
    pub ins: usize,
    pub dels: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.subs + self.ins + self.dels
    }

    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_len as f64
    }
}

impl AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.subs += o.subs;
        self.ins += o.ins;
        self.dels += o.dels;
        self.ref_len += o.ref_len;
    }
}

/// Minimal unit-cost alignment of `hyp` against `reference`.
pub fn edit_counts<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
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
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut c = EditCounts {
        ref_len: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && here == d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]) {
            c.subs += usize::from(reference[i - 1] != hyp[j - 1]);
            i -= 1;
            j -= 1;
        } else if i > 0 && here == d[(i - 1) * w + j] + 1 {
            c.dels += 1;
            i -= 1;
        } else {
            c.ins += 1;
            j -= 1;
        }
    }
    c
}

/// Edit distance over words divided by the reference length.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("word error rate needs a nonempty reference"));
    }
    Ok(edit_counts(reference, hyp).wer())
}

/// [`wer`] on whitespace-separated strings.
pub fn wer_str(reference: &str, hyp: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hyp.split_whitespace().collect();
    wer(&r, &h)
}
