//! Log-mel filterbank energies, 3-frame stacking and whitening.

use avfusion::features::{audio_patches, compute_lfbe, fit_whitener, stack_frames, whiten_clip, AudioWave, SAMPLE_RATE};

fn main() -> avfusion::Result<()> {
    // one second of a 440 Hz tone over a quieter 3 kHz tone
    let samples: Vec<f64> = (0..SAMPLE_RATE as usize)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            0.5 * (2.0 * std::f64::consts::PI * 440.0 * t).sin() + 0.1 * (2.0 * std::f64::consts::PI * 3000.0 * t).sin()
        })
        .collect();
    let wave = AudioWave::new(samples, SAMPLE_RATE)?;
    let lfbe = compute_lfbe(&wave)?;
    println!("{} frames x {} mel bins", lfbe.num_frames(), lfbe.frames.cols());

    let row = lfbe.frames.row(50);
    let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    println!("loudest bin in frame 50: {peak} ({:.2} log energy)", row[peak]);

    let stacked = stack_frames(&lfbe)?;
    println!("{} patches of dim {}", stacked.len(), stacked.patches.cols());
    let w = fit_whitener(&stacked.patches)?;
    let white = whiten_clip(&stacked, &w)?;
    let (lo, hi) = white.patches.data().iter().fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
    println!("whitened range [{lo:.2}, {hi:.2}]");
    assert_eq!(audio_patches(&wave, Some(&w))?, white);
    Ok(())
}
