//! Builds the cross-attention fusion transducer and its self-attention
//! baseline, then overfits the fusion model on a few utterances.

use avfusion::asr::{build_models, edit_counts, ConformerConfig, EditCounts, Utterance};
use avfusion::avbert::{AvBert, AvBertConfig};
use avfusion::features::{audio_patches, fit_whitener, whiten_clip, PATCH_DIM};
use avfusion::pipeline::corpus::{generate_synthetic_corpus, labels_to_text};
use avfusion::tensor::{Adam, Tensor};

fn main() -> avfusion::Result<()> {
    let (fusion, baseline) = build_models(&ConformerConfig::toy(), 3)?;
    println!(
        "parameters: fusion {} / baseline {}",
        fusion.count_parameters(),
        baseline.count_parameters()
    );

    let corpus = generate_synthetic_corpus(6, 4)?;
    let raw = corpus
        .utterances
        .iter()
        .map(|u| audio_patches(&u.wave, None))
        .collect::<avfusion::Result<Vec<_>>>()?;
    let rows: Vec<f64> = raw.iter().flat_map(|p| p.patches.data().to_vec()).collect();
    let w = fit_whitener(&Tensor::new(vec![rows.len() / PATCH_DIM, PATCH_DIM], rows)?)?;
    let encoder = AvBert::new(AvBertConfig::toy(), 1)?;
    let utts = corpus
        .utterances
        .iter()
        .zip(&raw)
        .map(|(u, p)| {
            let features = whiten_clip(p, &w)?;
            let env = Some(encoder.extract_env_embeddings(&features)?);
            Ok(Utterance { features, labels: u.labels.clone(), env })
        })
        .collect::<avfusion::Result<Vec<_>>>()?;

    let mut model = fusion;
    let opt = Adam::default();
    for step in 1..=400 {
        let loss = model.train_step(&utts, &opt, None)?;
        if step % 50 == 0 {
            let mut c = EditCounts::default();
            for u in &utts {
                c += edit_counts(&u.labels, &model.greedy_decode(&u.features, u.env.as_ref())?);
            }
            println!("step {step:>3}  loss {loss:8.4}  wer {:.3}", c.wer());
            if c.errors() == 0 {
                break;
            }
        }
    }
    for u in &utts {
        let hyp = model.greedy_decode(&u.features, u.env.as_ref())?;
        println!("ref \"{}\"  hyp \"{}\"", labels_to_text(&u.labels), labels_to_text(&hyp));
    }
    Ok(())
}
