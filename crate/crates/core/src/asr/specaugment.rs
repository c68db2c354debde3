use crate::error::{Error, Result};
use crate::tensor::{as_matrix, Tensor};

/// Number and maximum width of the zeroed bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecAugmentPolicy {
    pub freq_masks: usize,
    pub freq_width: usize,
    pub time_masks: usize,
    pub time_width: usize,
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        Self {
            freq_masks: 2,
            freq_width: 12,
            time_masks: 2,
            time_width: 10,
        }
    }
}

impl SpecAugmentPolicy {
    pub fn none() -> Self {
        Self {
            freq_masks: 0,
            freq_width: 0,
            time_masks: 0,
            time_width: 0,
        }
    }

    /// Caps the time width at the utterance length.
    pub fn clamped_to(self, frames: usize) -> Self {
        Self {
            time_width: self.time_width.min(frames),
            ..self
        }
    }
}

/// Zeroes random frequency bands and time spans of a T×D feature matrix.
/// Widths are drawn uniformly from `0..=max`, starts uniformly over the
/// valid range.
pub fn specaugment<R: rand::Rng + ?Sized>(features: &Tensor, policy: &SpecAugmentPolicy, rng: &mut R) -> Result<Tensor> {
    let (t, d) = as_matrix(features, "specaugment")?;
    if (policy.freq_masks > 0 && policy.freq_width > d) || (policy.time_masks > 0 && policy.time_width > t) {
        return Err(Error::invalid(format!(
            "mask widths F={} T={} exceed the {t}×{d} features",
            policy.freq_width, policy.time_width
        )));
    }
    let mut out = features.clone();
    let data = out.data_mut();
    for _ in 0..policy.freq_masks {
        let w = rng.gen_range(0..=policy.freq_width);
        let f0 = rng.gen_range(0..=d - w);
        for row in data.chunks_mut(d) {
            row[f0..f0 + w].fill(0.0);
        }
    }
    for _ in 0..policy.time_masks {
        let w = rng.gen_range(0..=policy.time_width);
        let t0 = rng.gen_range(0..=t - w);
        data[t0 * d..(t0 + w) * d].fill(0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn features() -> Tensor {
        let data = (0..40 * 192).map(|i| 1.0 + (i % 97) as f64).collect();
        Tensor::new(vec![40, 192], data).unwrap()
    }

    #[test]
    fn no_masks_is_identity() {
        let f = features();
        let out = specaugment(&f, &SpecAugmentPolicy::none(), &mut rng::substream(0, "sa")).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn masked_entries_zero_and_rest_untouched() {
        let f = features();
        let mut r = rng::substream(1, "sa");
        for _ in 0..50 {
            let out = specaugment(&f, &SpecAugmentPolicy::default(), &mut r).unwrap();
            let mut zeroed = 0;
            for (a, b) in out.data().iter().zip(f.data()) {
                assert!(*a == 0.0 || a == b);
                zeroed += usize::from(*a == 0.0);
            }
            // at most two bands of 12 columns and two spans of 10 rows
            assert!(zeroed <= 2 * 12 * 40 + 2 * 10 * 192);
        }
    }

    #[test]
    fn zeroed_cells_form_bands() {
        let f = features();
        let out = specaugment(&f, &SpecAugmentPolicy::default(), &mut rng::substream(8, "sa")).unwrap();
        let zero = |t: usize, c: usize| out.data()[t * 192 + c] == 0.0;
        let full_rows: Vec<bool> = (0..40).map(|t| (0..192).all(|c| zero(t, c))).collect();
        let full_cols: Vec<bool> = (0..192).map(|c| (0..40).all(|t| zero(t, c))).collect();
        for t in 0..40 {
            for c in 0..192 {
                if zero(t, c) {
                    assert!(full_rows[t] || full_cols[c]);
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let f = features();
        let p = SpecAugmentPolicy::default();
        let a = specaugment(&f, &p, &mut rng::substream(3, "sa")).unwrap();
        let b = specaugment(&f, &p, &mut rng::substream(3, "sa")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_widths_rejected() {
        let f = Tensor::zeros(&[5, 8]);
        let mut r = rng::substream(0, "sa");
        assert!(specaugment(&f, &SpecAugmentPolicy::default(), &mut r).is_err());
        let p = SpecAugmentPolicy::default().clamped_to(5);
        assert_eq!(p.time_width, 5);
        let f = Tensor::zeros(&[5, 192]);
        assert!(specaugment(&f, &p, &mut r).is_ok());
    }
}
