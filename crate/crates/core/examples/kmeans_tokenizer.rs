//! Trains audio and video codebooks and maps patches to unified token ids.

use avfusion::features::{audio_patches, extract_video_patches, fit_whitener, whiten_clip, PATCH_DIM, VIDEO_PATCH_DIM};
use avfusion::pipeline::corpus::generate_synthetic_corpus;
use avfusion::tensor::Tensor;
use avfusion::vq::{assign_tokens, train_kmeans, unified_vocab_size, Modality};

fn rows(parts: Vec<Tensor>, dim: usize) -> avfusion::Result<Tensor> {
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![data.len() / dim, dim], data)
}

fn main() -> avfusion::Result<()> {
    let corpus = generate_synthetic_corpus(12, 3)?;
    let raw = corpus
        .utterances
        .iter()
        .map(|u| audio_patches(&u.wave, None))
        .collect::<avfusion::Result<Vec<_>>>()?;
    let w = fit_whitener(&rows(raw.iter().map(|p| p.patches.clone()).collect(), PATCH_DIM)?)?;
    let audio = raw.iter().map(|p| whiten_clip(p, &w)).collect::<avfusion::Result<Vec<_>>>()?;
    let video = corpus
        .utterances
        .iter()
        .map(|u| extract_video_patches(&u.clip))
        .collect::<avfusion::Result<Vec<_>>>()?;

    let a = train_kmeans(&rows(audio.iter().map(|p| p.patches.clone()).collect(), PATCH_DIM)?, 16, 50, 1)?;
    println!("audio k-means: {} iterations, distortion trace {:?}", a.iterations, &a.distortion_trace);
    let v = train_kmeans(&rows(video.iter().map(|p| p.patches.clone()).collect(), VIDEO_PATCH_DIM)?, 8, 50, 2)?;
    let audio_cb = a.into_codebook(Modality::Audio, 0);
    let video_cb = v.into_codebook(Modality::Video, audio_cb.size());
    println!("unified vocabulary: {}", unified_vocab_size(&audio_cb, &video_cb)?);

    let u = &corpus.utterances[0];
    let seq = assign_tokens(&video_cb, &video[0].patches)?.concat(assign_tokens(&audio_cb, &audio[0].patches)?);
    println!("utterance 0 (env {}): {:?}", u.env, seq.segments);
    println!("  ids {:?}", seq.ids);
    Ok(())
}
