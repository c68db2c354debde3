use super::*;
use crate::gradcheck;
use rand::Rng as _;

fn micro() -> AvBertConfig {
    AvBertConfig {
        model_dim: 8,
        num_blocks: 1,
        heads: 2,
        ff_dim: 16,
        audio_vocab: 2,
        video_vocab: 4,
        audio_patch_dim: 5,
        video_patch_dim: 6,
        max_audio_positions: 8,
        max_video_steps: 4,
        max_video_spatial: 4,
        schedule: MaskSchedule::default(),
    }
}

fn random(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn batch(cfg: &AvBertConfig, audio_n: usize, grid: Option<(usize, usize, usize)>, seed: u64) -> MultimodalBatch {
    let mut r = rng::substream(seed, "avbert-batch");
    let video = grid.map(|g| VideoPatchSeq {
        patches: random(&[g.0 * g.1 * g.2, cfg.video_patch_dim], &mut r),
        grid: g,
    });
    let vlen = video.as_ref().map_or(0, VideoPatchSeq::len);
    let mut ids: Vec<usize> = (0..vlen).map(|_| cfg.audio_vocab + r.gen_range(0..cfg.video_vocab)).collect();
    ids.extend((0..audio_n).map(|_| r.gen_range(0..cfg.audio_vocab)));
    let audio = AudioPatchSeq {
        patches: random(&[audio_n, cfg.audio_patch_dim], &mut r),
        whitened: true,
    };
    let mut segments = vec![(Modality::Audio, audio_n)];
    if vlen > 0 {
        segments.insert(0, (Modality::Video, vlen));
    }
    MultimodalBatch::new(audio, video, TokenSeq { ids, segments }).unwrap()
}

fn plan(mask: Vec<bool>) -> MaskPlan {
    MaskPlan {
        width: 1,
        center_prob_bits: 0,
        centers: mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect(),
        mask,
    }
}

fn loss_of(model: &AvBert, b: &MultimodalBatch, p: &MaskPlan) -> f64 {
    let mut g = Graph::inference();
    let x = model.embed_multimodal(&mut g, b, Some(&p.mask), EmbedOptions::default()).unwrap();
    let h = model.encoder_forward(&mut g, x).unwrap();
    let l = model.mlm_loss(&mut g, h, &b.labels, p).unwrap();
    g.value(l).item()
}

#[test]
fn sequence_length_is_video_plus_audio() {
    let cfg = micro();
    let model = AvBert::new(cfg.clone(), 1).unwrap();
    let b = batch(&cfg, 5, Some((2, 2, 2)), 2);
    let mut g = Graph::inference();
    let x = model.embed_multimodal(&mut g, &b, None, EmbedOptions::default()).unwrap();
    assert_eq!(g.shape(x), &[13, 8]);
    let h = model.encoder_forward(&mut g, x).unwrap();
    assert_eq!(g.shape(h), &[13, 8]);
}

#[test]
fn modality_changes_the_embedding() {
    let cfg = AvBertConfig {
        video_patch_dim: 5,
        ..micro()
    };
    let model = AvBert::new(cfg.clone(), 1).unwrap();
    let mut r = rng::substream(0, "m");
    let patches = random(&[2, 5], &mut r);
    let b = MultimodalBatch {
        audio: AudioPatchSeq {
            patches: patches.clone(),
            whitened: true,
        },
        video: Some(VideoPatchSeq { patches, grid: (1, 1, 2) }),
        labels: TokenSeq::default(),
    };
    let mut g = Graph::inference();
    let x = model.embed_multimodal(&mut g, &b, None, EmbedOptions::default()).unwrap();
    let v = g.value(x);
    assert_ne!(v.row(0), v.row(2));
}

#[test]
fn position_changes_the_embedding() {
    let cfg = micro();
    let model = AvBert::new(cfg.clone(), 1).unwrap();
    let row: Vec<f64> = (0..5).map(|i| i as f64 * 0.1).collect();
    let audio = AudioPatchSeq {
        patches: Tensor::new(vec![4, 5], row.repeat(4)).unwrap(),
        whitened: true,
    };
    let b = MultimodalBatch {
        audio,
        video: None,
        labels: TokenSeq::default(),
    };
    let mut g = Graph::inference();
    let x = model.embed_multimodal(&mut g, &b, None, EmbedOptions::default()).unwrap();
    assert_ne!(g.value(x).row(0), g.value(x).row(3));
    let mut g = Graph::inference();
    let off = EmbedOptions {
        positional: false,
        modality: true,
    };
    let x = model.embed_multimodal(&mut g, &b, None, off).unwrap();
    assert_eq!(g.value(x).row(0), g.value(x).row(3));
}

#[test]
fn wrong_patch_dim_rejected() {
    let cfg = micro();
    let model = AvBert::new(cfg.clone(), 1).unwrap();
    let mut b = batch(&cfg, 3, None, 1);
    b.audio.patches = Tensor::zeros(&[3, 7]);
    let mut g = Graph::inference();
    assert!(model.embed_multimodal(&mut g, &b, None, EmbedOptions::default()).is_err());
}

#[test]
fn encoder_is_permutation_equivariant() {
    let model = AvBert::new(micro(), 4).unwrap();
    let mut r = rng::substream(5, "perm");
    let x = random(&[6, 8], &mut r);
    let perm = [3, 0, 5, 1, 4, 2];
    let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let run = |t: Tensor| {
        let mut g = Graph::inference();
        let v = g.constant(t);
        let h = model.encoder_forward(&mut g, v).unwrap();
        g.value(h).clone()
    };
    let (y, py) = (run(x), run(px));
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in py.row(k).iter().zip(y.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn embedding_without_positions_is_equivariant_too() {
    let cfg = micro();
    let model = AvBert::new(cfg.clone(), 4).unwrap();
    let b = batch(&cfg, 5, None, 9);
    let perm = [4, 2, 0, 3, 1];
    let mut pb = b.clone();
    pb.audio.patches = Tensor::from_rows(&perm.iter().map(|&i| b.audio.patches.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let off = EmbedOptions {
        positional: false,
        modality: false,
    };
    let run = |b: &MultimodalBatch| {
        let mut g = Graph::inference();
        let x = model.embed_multimodal(&mut g, b, None, off).unwrap();
        let h = model.encoder_forward(&mut g, x).unwrap();
        g.value(h).clone()
    };
    let (y, py) = (run(&b), run(&pb));
    for (k, &i) in perm.iter().enumerate() {
        for (a, c) in py.row(k).iter().zip(y.row(i)) {
            assert!((a - c).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = micro();
    let model = AvBert::new(cfg.clone(), 4).unwrap();
    let b = batch(&cfg, 5, Some((1, 2, 2)), 3);
    let mut g = Graph::inference();
    let x = model.embed_multimodal(&mut g, &b, None, EmbedOptions::default()).unwrap();
    let (_, weights) = model.encoder_forward_with_weights(&mut g, x).unwrap();
    for w in weights.iter().flatten() {
        let t = g.value(*w);
        assert_eq!(t.shape(), &[9, 9]);
        for i in 0..9 {
            assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn fresh_toy_model_loss_near_uniform() {
    let cfg = AvBertConfig {
        video_patch_dim: 48,
        ..AvBertConfig::toy()
    };
    let mut total = 0.0;
    let seeds = 8;
    for s in 0..seeds {
        let model = AvBert::new(cfg.clone(), 100 + s).unwrap();
        let b = batch(&cfg, 24, Some((2, 2, 2)), s);
        let p = model.draw_mask(&b, 60_000, &mut rng::substream(s, "m")).unwrap();
        total += loss_of(&model, &b, &p);
    }
    let mean = total / seeds as f64;
    let ln24 = 24f64.ln();
    assert!((mean - ln24).abs() < 0.15 * ln24, "mean initial loss {mean}");
}

#[test]
fn forced_correct_logits_give_tiny_loss() {
    let cfg = micro();
    let mut model = AvBert::new(cfg.clone(), 4).unwrap();
    let mut b = batch(&cfg, 3, Some((1, 1, 2)), 3);
    b.labels.ids = vec![3; 5];
    model.params.get_mut("head.w").unwrap().data_mut().fill(0.0);
    let bias = model.params.get_mut("head.b").unwrap().data_mut();
    bias.fill(0.0);
    bias[3] = 20.0;
    let p = plan(vec![true, false, true, true, false]);
    assert!(loss_of(&model, &b, &p) < 1e-3);
}

#[test]
fn zero_head_gives_uniform_loss() {
    let cfg = micro();
    let mut model = AvBert::new(cfg.clone(), 4).unwrap();
    model.params.get_mut("head.w").unwrap().data_mut().fill(0.0);
    let b = batch(&cfg, 3, Some((1, 1, 2)), 3);
    let p = plan(vec![true, false, false, true, false]);
    assert!((loss_of(&model, &b, &p) - 6f64.ln()).abs() < 1e-12);
}

#[test]
fn unmasked_labels_do_not_affect_loss() {
    let cfg = micro();
    let model = AvBert::new(cfg.clone(), 4).unwrap();
    let b = batch(&cfg, 3, Some((1, 1, 2)), 3);
    let p = plan(vec![true, false, false, true, false]);
    let base = loss_of(&model, &b, &p);
    let mut changed = b.clone();
    changed.labels.ids[1] = (changed.labels.ids[1] + 1) % 6;
    changed.labels.ids[4] = (changed.labels.ids[4] + 1) % 6;
    assert_eq!(loss_of(&model, &changed, &p).to_bits(), base.to_bits());
    let mut g = Graph::inference();
    let x = model.embed_multimodal(&mut g, &b, None, EmbedOptions::default()).unwrap();
    assert!(model.mlm_loss(&mut g, x, &b.labels, &plan(vec![false; 5])).is_err());
}

#[test]
fn micro_model_gradcheck() {
    let cfg = micro();
    let model = AvBert::new(cfg.clone(), 11).unwrap();
    let b = batch(&cfg, 2, Some((1, 1, 2)), 12);
    let p = plan(vec![true, false, false, true]);
    let report = gradcheck::check_params(&model.params, |g, params| {
        let m = AvBert {
            params: params.clone(),
            ..AvBert::new(cfg.clone(), 11)?
        };
        let x = m.embed_multimodal(g, &b, Some(&p.mask), EmbedOptions::default())?;
        let h = m.encoder_forward(g, x)?;
        m.mlm_loss(g, h, &b.labels, &p)
    })
    .unwrap();
    assert_eq!(report.checked, model.params.count());
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn short_training_reduces_loss() {
    let cfg = AvBertConfig {
        video_patch_dim: 48,
        ..AvBertConfig::toy()
    };
    let mut model = AvBert::new(cfg.clone(), 3).unwrap();
    let b = [batch(&cfg, 20, Some((2, 2, 1)), 5)];
    let opt = Adam {
        lr: 1e-3,
        ..Adam::default()
    };
    let losses: Vec<f64> = (0..100).map(|s| model.pretrain_step(&b, s, &opt, 7).unwrap().loss).collect();
    let head: f64 = losses[..10].iter().sum();
    let tail: f64 = losses[90..].iter().sum();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn training_is_deterministic() {
    let cfg = micro();
    let run = || {
        let mut model = AvBert::new(cfg.clone(), 3).unwrap();
        let b = [batch(&cfg, 6, Some((1, 2, 2)), 5), batch(&cfg, 4, None, 6)];
        (0..10)
            .map(|s| model.pretrain_step(&b, s, &Adam::default(), 9).unwrap().loss.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn mask_width_grows_at_stage_boundary() {
    let cfg = micro();
    let model = AvBert::new(cfg.clone(), 3).unwrap();
    let b = batch(&cfg, 8, Some((1, 2, 2)), 5);
    let mut r = rng::substream(1, "w");
    assert_eq!(model.draw_mask(&b, 9_999, &mut r).unwrap().width, 1);
    assert_eq!(model.draw_mask(&b, 10_000, &mut r).unwrap().width, 3);
}

#[test]
fn drawn_masks_are_never_empty_and_respect_the_seam() {
    let cfg = micro();
    let model = AvBert::new(cfg.clone(), 3).unwrap();
    let b = batch(&cfg, 3, Some((1, 1, 2)), 5);
    let mut r = rng::substream(2, "seam");
    for step in [0u64, 25_000, 55_000] {
        for _ in 0..200 {
            let p = model.draw_mask(&b, step, &mut r).unwrap();
            assert!(p.masked_count() > 0);
            let half = p.width / 2;
            for (i, m) in p.mask.iter().enumerate() {
                if *m {
                    assert!(p.centers.iter().any(|&c| (c < 2) == (i < 2) && c.abs_diff(i) <= half));
                }
            }
        }
    }
}

#[test]
fn env_embeddings_are_frozen_and_repeatable() {
    let cfg = micro();
    let model = AvBert::new(cfg.clone(), 3).unwrap();
    let b = batch(&cfg, 7, None, 5);
    let before = model.params.fingerprint();
    let e1 = model.extract_env_embeddings(&b.audio).unwrap();
    let e2 = model.extract_env_embeddings(&b.audio).unwrap();
    assert_eq!(e1.vectors.shape(), &[7, 8]);
    assert!(e1.frozen);
    let bits = |e: &EnvEmbeddings| e.vectors.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&e1), bits(&e2));
    assert_eq!(model.params.fingerprint(), before);
    let empty = AudioPatchSeq {
        patches: Tensor::zeros(&[0, 5]),
        whitened: true,
    };
    assert!(model.extract_env_embeddings(&empty).is_err());
}

#[test]
fn restored_parameters_must_match_layout() {
    let model = AvBert::new(micro(), 3).unwrap();
    let params = model.params.clone();
    let other = AvBert::new(micro(), 99).unwrap();
    let restored = other.with_params(params.clone()).unwrap();
    assert_eq!(restored.params.fingerprint(), model.params.fingerprint());
    let bigger = AvBert::new(AvBertConfig { ff_dim: 32, ..micro() }, 3).unwrap();
    assert!(bigger.with_params(params).is_err());
}

#[test]
fn config_presets() {
    let p = AvBertConfig::full();
    assert_eq!((p.model_dim, p.num_blocks, p.vocab()), (128, 6, 12288));
    let t = AvBertConfig::toy();
    assert_eq!((t.model_dim, t.num_blocks, t.vocab()), (32, 2, 24));
    assert!(AvBertConfig { heads: 3, ..t }.validate().is_err());
}
