//! Progressive span masking: width and center probability by step.

use avfusion::masking::{expected_coverage, mask_params_at, sample_segmented_mask, MaskSchedule};
use avfusion::rng;

fn main() -> avfusion::Result<()> {
    let sched = MaskSchedule::default();
    for step in [0, 2_500, 5_000, 9_999, 10_000, 25_000, 49_999, 60_000] {
        let (w, p) = mask_params_at(&sched, step);
        println!("step {step:>6}: width {w:>2}  p {p:.4}  coverage {:.3}", expected_coverage(p, w));
    }

    // video segment of 8, audio segment of 24; spans never cross the seam
    let mut r = rng::substream(1, "demo");
    let plan = sample_segmented_mask(&[8, 24], 5, 0.3, &mut r)?;
    let marks: String = plan.mask.iter().enumerate().map(|(i, m)| {
        let c = if *m { '#' } else { '.' };
        if i == 8 { format!("|{c}") } else { c.to_string() }
    }).collect();
    println!("{marks}  ({} of 32 masked)", plan.masked_count());
    Ok(())
}
