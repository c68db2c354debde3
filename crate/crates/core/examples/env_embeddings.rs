//! Frozen environment embeddings from an AV-BERT encoder.

use avfusion::avbert::{AvBert, AvBertConfig};
use avfusion::features::{audio_patches, fit_whitener, whiten_clip};
use avfusion::pipeline::corpus::generate_synthetic_corpus;

fn main() -> avfusion::Result<()> {
    let corpus = generate_synthetic_corpus(4, 2)?;
    let encoder = AvBert::new(AvBertConfig::toy(), 9)?;
    let before = encoder.params.fingerprint();
    for u in &corpus.utterances {
        let raw = audio_patches(&u.wave, None)?;
        let feats = whiten_clip(&raw, &fit_whitener(&raw.patches)?)?;
        let env = encoder.extract_env_embeddings(&feats)?;
        let (t, d) = (env.vectors.rows(), env.vectors.cols());
        let pooled: Vec<f64> = (0..4).map(|j| (0..t).map(|i| env.vectors.row(i)[j]).sum::<f64>() / t as f64).collect();
        println!("env {}: {t}x{d} states, frozen {}, pooled[..4] {pooled:+.3?}", u.env, env.frozen);
    }
    assert_eq!(before, encoder.params.fingerprint());
    println!("encoder hash unchanged: {before:016x}");
    Ok(())
}
