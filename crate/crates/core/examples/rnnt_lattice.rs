//! Transducer loss on a tiny lattice, checked against explicit enumeration.

use avfusion::asr::TransducerLattice;

/// Sums the probability of every monotonic alignment.
fn enumerate(lat: &TransducerLattice, t: usize, u: usize, frames: usize, labels: usize) -> f64 {
    if t == frames - 1 && u == labels {
        return lat.blank(t, u).exp();
    }
    let mut p = 0.0;
    if t < frames - 1 {
        p += lat.blank(t, u).exp() * enumerate(lat, t + 1, u, frames, labels);
    }
    if u < labels {
        p += lat.emit(t, u).exp() * enumerate(lat, t, u + 1, frames, labels);
    }
    p
}

fn main() -> avfusion::Result<()> {
    let (frames, labels, outputs) = (4, vec![1, 0, 1], 3);
    let logits: Vec<f64> = (0..frames * (labels.len() + 1) * outputs).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect();
    let lat = TransducerLattice::from_logits(&logits, frames, &labels, outputs)?;
    println!("forward  -log p = {:.12}", lat.loss());
    println!("backward -log p = {:.12}", -lat.log_likelihood_backward());
    println!("enumerated      = {:.12}", -enumerate(&lat, 0, 0, frames, labels.len()).ln());
    let g = lat.grad_logits();
    println!("gradient rows sum to {:.2e}", g.chunks(outputs).map(|r| r.iter().sum::<f64>().abs()).fold(0.0, f64::max));
    Ok(())
}
