//! Frequency and time masking of a feature matrix.

use avfusion::asr::{specaugment, SpecAugmentPolicy};
use avfusion::rng;
use avfusion::tensor::Tensor;

fn main() -> avfusion::Result<()> {
    let (t, d) = (24, 48);
    let x = Tensor::filled(&[t, d], 1.0);
    let policy = SpecAugmentPolicy { freq_width: 8, time_width: 4, ..SpecAugmentPolicy::default() };
    let y = specaugment(&x, &policy, &mut rng::substream(4, "demo"))?;
    for r in 0..t {
        let line: String = y.row(r).iter().map(|v| if *v == 0.0 { '.' } else { '#' }).collect();
        println!("{line}");
    }
    Ok(())
}
