//! Progressive span masking: the mask width grows by stage while the
//! per-position center probability ramps up within each stage.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSchedule {
    pub p_init: f64,
    pub p_final: f64,
    pub width_init: usize,
    pub width_final: usize,
    pub width_step: usize,
    pub stage_steps: u64,
    /// Ramp rate; ln 100 ends each stage within 1% of `p_final`.
    pub ramp_rate: f64,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self {
            p_init: 0.15,
            p_final: 0.45,
            width_init: 1,
            width_final: 11,
            width_step: 2,
            stage_steps: 10_000,
            ramp_rate: 100f64.ln(),
        }
    }
}

impl MaskSchedule {
    pub fn validate(&self) -> Result<()> {
        let odd = |w: usize| w % 2 == 1;
        if !odd(self.width_init) || !odd(self.width_final) || self.width_step % 2 != 0 {
            return Err(Error::invalid("mask widths must stay odd"));
        }
        if self.width_final < self.width_init {
            return Err(Error::invalid("final mask width below initial width"));
        }
        if !(0.0..=1.0).contains(&self.p_init) || !(0.0..=1.0).contains(&self.p_final) {
            return Err(Error::invalid("mask probabilities must lie in [0, 1]"));
        }
        if self.stage_steps == 0 || self.ramp_rate.is_nan() || self.ramp_rate < 0.0 {
            return Err(Error::invalid("stage length and ramp rate must be positive"));
        }
        Ok(())
    }
}

/// A sampled mask over one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub width: usize,
    pub center_prob_bits: u64,
    pub centers: Vec<usize>,
    pub mask: Vec<bool>,
}

impl MaskPlan {
    pub fn center_prob(&self) -> f64 {
        f64::from_bits(self.center_prob_bits)
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// (width, center probability) in effect at `step`.
pub fn mask_params_at(sched: &MaskSchedule, step: u64) -> (usize, f64) {
    let stage = step / sched.stage_steps;
    let grown = (sched.width_step as u64).saturating_mul(stage);
    let width = (sched.width_init as u64).saturating_add(grown).min(sched.width_final as u64) as usize;
    let t = (step - stage * sched.stage_steps) as f64 / sched.stage_steps as f64;
    let prob = sched.p_init + (sched.p_final - sched.p_init) * (1.0 - (-sched.ramp_rate * t).exp());
    (width, prob)
}

/// Picks each position as a center with probability `prob` and masks the
/// `width`-long span centered on it, clipped to the sequence.
pub fn sample_mask<R: rand::Rng + ?Sized>(seq_len: usize, width: usize, prob: f64, rng: &mut R) -> Result<MaskPlan> {
    if seq_len == 0 {
        return Err(Error::invalid("cannot mask an empty sequence"));
    }
    if width % 2 == 0 {
        return Err(Error::invalid(format!("mask width must be odd, got {width}")));
    }
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::invalid(format!("center probability {prob} outside [0, 1]")));
    }
    let half = width / 2;
    let mut mask = vec![false; seq_len];
    let mut centers = Vec::new();
    for c in 0..seq_len {
        if rng.gen::<f64>() < prob {
            centers.push(c);
            let lo = c.saturating_sub(half);
            let hi = (c + half).min(seq_len - 1);
            mask[lo..=hi].iter_mut().for_each(|m| *m = true);
        }
    }
    Ok(MaskPlan {
        width,
        center_prob_bits: prob.to_bits(),
        centers,
        mask,
    })
}

/// Samples each segment independently so spans never cross a segment
/// boundary; the masks are concatenated in segment order.
pub fn sample_segmented_mask<R: rand::Rng + ?Sized>(
    segment_lens: &[usize],
    width: usize,
    prob: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    let mut out = MaskPlan {
        width,
        center_prob_bits: prob.to_bits(),
        centers: Vec::new(),
        mask: Vec::new(),
    };
    for &len in segment_lens {
        let offset = out.mask.len();
        let plan = sample_mask(len, width, prob, rng)?;
        out.centers.extend(plan.centers.iter().map(|c| c + offset));
        out.mask.extend(plan.mask);
    }
    Ok(out)
}

/// Probability that an interior position is masked: `1 − (1 − prob)^width`.
pub fn expected_coverage(prob: f64, width: usize) -> f64 {
    1.0 - (1.0 - prob).powi(width as i32)
}
