//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use avfusion::asr::{
    build_models, rnnt_loss, wer, wer_str, ConformerConfig, FusionMode, TransducerLattice, Transducer, Utterance,
};
use avfusion::avbert::{AvBert, AvBertConfig, EmbedOptions, EnvEmbeddings, MultimodalBatch};
use avfusion::features::{AudioPatchSeq, VideoPatchSeq};
use avfusion::gradcheck::{check_inputs, check_params, Report};
use avfusion::masking::{mask_params_at, sample_mask, MaskPlan, MaskSchedule};
use avfusion::pipeline::checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint};
use avfusion::pipeline::config::RunConfig;
use avfusion::pipeline::corpus::generate_synthetic_corpus;
use avfusion::pipeline::stages::{run_asr_training, run_eval, run_pretraining, Logger};
use avfusion::rng;
use avfusion::tensor::{Activation, Graph, Tensor, Var};
use avfusion::vq::{assign_tokens, train_kmeans, Modality, TokenSeq};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar readout `sum(y * w)` with a fixed random `w`, so that every
/// output element carries a distinct weight.
fn readout(g: &mut Graph, y: Var, seed: u64) -> avfusion::Result<Var> {
    let w = random(g.shape(y), &mut rng::substream(seed, "readout"));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn corpus_config(root: &Path, n: usize, seed: u64) -> RunConfig {
    let data = root.join("data");
    generate_synthetic_corpus(n, seed).unwrap().write(&data).unwrap();
    let mut cfg = RunConfig::toy(&data);
    cfg.paths.work = root.join("work");
    cfg.paths.checkpoints = root.join("ckpt");
    cfg.eval_every = 0;
    cfg.checkpoint_every = 0;
    cfg
}

// 1 ---------------------------------------------------------------------

fn gradcheck_suite() -> Outcome {
    let start = Instant::now();
    let mut r = rng::substream(1, "acceptance-gradcheck");
    let mut worst = Report::default();
    let mut failures = Vec::new();
    let mut run = |name: &str, report: avfusion::Result<Report>| match report {
        Ok(rep) => {
            if rep.max_rel_err >= 1e-3 || rep.checked == 0 {
                failures.push(format!("{name} {:.2e}", rep.max_rel_err));
            }
            if rep.max_rel_err > worst.max_rel_err {
                worst.max_rel_err = rep.max_rel_err;
            }
            worst.checked += rep.checked;
        }
        Err(e) => failures.push(format!("{name}: {e}")),
    };

    let a = random(&[3, 4], &mut r);
    let b = random(&[3, 4], &mut r);
    let c = random(&[4, 5], &mut r);
    let row = random(&[4], &mut r);
    let wide = random(&[3, 6], &mut r);
    let long = random(&[7, 3], &mut r);
    let kern = random(&[3, 3], &mut r);
    let tbl = random(&[5, 4], &mut r);
    type Op = Box<dyn Fn(&mut Graph, &[Var]) -> avfusion::Result<Var>>;
    let ops: Vec<(&str, Vec<Tensor>, Op)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|g, v| g.add_row(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("matmul", vec![a.clone(), c.clone()], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("transpose", vec![a.clone()], Box::new(|g, v| g.transpose(v[0]))),
        ("softmax rows", vec![a.clone()], Box::new(|g, v| g.softmax(v[0], 1))),
        ("softmax cols", vec![a.clone()], Box::new(|g, v| g.softmax(v[0], 0))),
        (
            "layer_norm",
            vec![a.clone(), row.clone(), random(&[4], &mut r)],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "instance_norm",
            vec![a.clone(), random(&[3], &mut r), random(&[3], &mut r)],
            Box::new(|g, v| g.instance_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("tanh", vec![a.clone()], Box::new(|g, v| g.activation(v[0], Activation::Tanh))),
        ("sigmoid", vec![a.clone()], Box::new(|g, v| g.activation(v[0], Activation::Sigmoid))),
        ("relu", vec![a.clone()], Box::new(|g, v| g.activation(v[0], Activation::Relu))),
        ("gelu", vec![a.clone()], Box::new(|g, v| g.activation(v[0], Activation::Gelu))),
        ("swish", vec![a.clone()], Box::new(|g, v| g.activation(v[0], Activation::Swish))),
        ("glu", vec![wide.clone()], Box::new(|g, v| g.glu(v[0]))),
        ("slice_cols", vec![wide.clone()], Box::new(|g, v| g.slice_cols(v[0], 1, 3))),
        ("concat_cols", vec![a.clone(), wide.clone()], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
        ("slice_rows", vec![long.clone()], Box::new(|g, v| g.slice_rows(v[0], 2, 4))),
        ("concat_rows", vec![a.clone(), b.clone()], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
        ("gather_rows", vec![tbl.clone()], Box::new(|g, v| g.gather_rows(v[0], &[4, 0, 4, 2]))),
        (
            "mask_rows",
            vec![a.clone(), row.clone()],
            Box::new(|g, v| g.mask_rows(v[0], &[true, false, true], v[1])),
        ),
        ("unfold", vec![long.clone()], Box::new(|g, v| g.unfold(v[0], 3, 2))),
        ("depthwise_conv", vec![long.clone(), kern.clone()], Box::new(|g, v| g.depthwise_conv(v[0], v[1]))),
        ("outer_add_rows", vec![a.clone(), tbl.clone()], Box::new(|g, v| g.outer_add_rows(v[0], v[1]))),
        ("sum", vec![a.clone()], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![a.clone()], Box::new(|g, v| g.mean(v[0]))),
        (
            "cross_entropy",
            vec![tbl.clone()],
            Box::new(|g, v| g.cross_entropy(v[0], &[1, 3, 0, 2, 2], &[false, true, false, false, false])),
        ),
        (
            "attention",
            vec![random(&[3, 4], &mut r), random(&[5, 4], &mut r), random(&[5, 4], &mut r)],
            Box::new(|g, v| g.attention(v[0], v[1], v[2], 2)),
        ),
        ("rnnt_loss", vec![random(&[3 * 3, 4], &mut r)], Box::new(|g, v| rnnt_loss(g, v[0], 3, &[2, 0]))),
    ];
    let n_ops = ops.len();
    for (i, (name, inputs, op)) in ops.into_iter().enumerate() {
        run(name, check_inputs(&inputs, |g, v| {
            let y = op(g, v)?;
            if g.value(y).numel() == 1 {
                Ok(y)
            } else {
                readout(g, y, i as u64)
            }
        }));
    }

    // micro AV-BERT: width 8, one block, both modalities
    let cfg = AvBertConfig {
        model_dim: 8,
        num_blocks: 1,
        heads: 2,
        ff_dim: 16,
        audio_vocab: 3,
        video_vocab: 4,
        audio_patch_dim: 5,
        video_patch_dim: 6,
        max_audio_positions: 8,
        max_video_steps: 4,
        max_video_spatial: 4,
        schedule: MaskSchedule::default(),
    };
    let model = AvBert::new(cfg.clone(), 2).unwrap();
    let batch = MultimodalBatch::new(
        AudioPatchSeq {
            patches: random(&[3, 5], &mut r),
            whitened: true,
        },
        Some(VideoPatchSeq {
            patches: random(&[2, 6], &mut r),
            grid: (1, 1, 2),
        }),
        TokenSeq {
            ids: vec![4, 6, 0, 2, 1],
            segments: vec![(Modality::Video, 2), (Modality::Audio, 3)],
        },
    )
    .unwrap();
    let mask = vec![true, false, false, true, true];
    let plan = MaskPlan {
        width: 1,
        center_prob_bits: 0,
        centers: vec![0, 3, 4],
        mask: mask.clone(),
    };
    run("micro AV-BERT", check_params(&model.params, |g, p| {
        let m = AvBert::new(cfg.clone(), 2)?.with_params(p.clone())?;
        let x = m.embed_multimodal(g, &batch, Some(&mask), EmbedOptions::default())?;
        let h = m.encoder_forward(g, x)?;
        m.mlm_loss(g, h, &batch.labels, &plan)
    }));

    // micro conformer block with cross-attention fusion, then the full transducer loss
    let ccfg = ConformerConfig {
        input_dim: 4,
        model_dim: 8,
        num_blocks: 1,
        heads: 2,
        ff_dim: 16,
        conv_kernel: 3,
        subsample_kernel: 3,
        subsample_stride: 2,
        fusion_mode: FusionMode::CrossAttention,
        env_dim: 6,
        vocab: 3,
        pred_dim: 4,
        joint_dim: 5,
    };
    let tm = Transducer::new(ccfg.clone(), 3).unwrap();
    let x = random(&[4, 8], &mut r);
    let env = random(&[3, 8], &mut r);
    run("micro conformer block", check_params(&tm.params, |g, p| {
        let m = Transducer::new(ccfg.clone(), 3)?.with_params(p.clone())?;
        let (xv, ev) = (g.constant(x.clone()), g.constant(env.clone()));
        let y = m.conformer_block(g, 0, xv, Some(ev))?;
        readout(g, y, 99)
    }));
    run("micro conformer block inputs", check_inputs(&[x.clone(), env.clone()], |g, v| {
        let y = tm.conformer_block(g, 0, v[0], Some(v[1]))?;
        readout(g, y, 98)
    }));
    let utt = Utterance {
        features: AudioPatchSeq {
            patches: random(&[9, 4], &mut r),
            whitened: true,
        },
        labels: vec![2, 0, 1],
        env: Some(EnvEmbeddings {
            vectors: random(&[2, 6], &mut r),
            frozen: true,
        }),
    };
    run("micro transducer loss", check_params(&tm.params, |g, p| {
        let m = Transducer::new(ccfg.clone(), 3)?.with_params(p.clone())?;
        m.utterance_loss(g, &utt, None)
    }));

    let secs = start.elapsed().as_secs_f64();
    ensure(failures.is_empty(), format!("failed: {}", failures.join(", ")))?;
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "{n_ops} ops + micro AV-BERT + micro conformer, {} partials, max rel err {:.1e}, {secs:.1}s",
        worst.checked, worst.max_rel_err
    ))
}

// 2 ---------------------------------------------------------------------

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|v| v - z).collect()
}

/// Probability of every path of `frames` blanks and the labels in order,
/// ending with a blank on the last frame.
fn enumerate_alignments(lp: &[Vec<f64>], t: usize, u: usize, frames: usize, labels: &[usize]) -> f64 {
    let row = &lp[t * (labels.len() + 1) + u];
    let blank = row.len() - 1;
    if t == frames - 1 && u == labels.len() {
        return row[blank].exp();
    }
    let mut p = 0.0;
    if t + 1 < frames {
        p += row[blank].exp() * enumerate_alignments(lp, t + 1, u, frames, labels);
    }
    if u < labels.len() {
        p += row[labels[u]].exp() * enumerate_alignments(lp, t, u + 1, frames, labels);
    }
    p
}

fn rnnt_oracle() -> Outcome {
    let mut r = rng::substream(2, "acceptance-rnnt");
    let (mut draws, mut worst_loss, mut worst_dp) = (0, 0.0f64, 0.0f64);
    for frames in 1..=4 {
        for u in 0..=3 {
            for v in 1..=3 {
                for _ in 0..3 {
                    let labels: Vec<usize> = (0..u).map(|_| r.gen_range(0..v)).collect();
                    let rows = frames * (u + 1);
                    let logits = random(&[rows, v + 1], &mut r);
                    let logits = Tensor::new(
                        logits.shape().to_vec(),
                        logits.data().iter().map(|x| 3.0 * x).collect(),
                    )
                    .unwrap();
                    let lp: Vec<Vec<f64>> = (0..rows).map(|i| log_softmax(logits.row(i))).collect();
                    let expected = -enumerate_alignments(&lp, 0, 0, frames, &labels).ln();
                    let mut g = Graph::new();
                    let x = g.input(logits.clone());
                    let l = rnnt_loss(&mut g, x, frames, &labels).map_err(|e| e.to_string())?;
                    worst_loss = worst_loss.max((g.value(l).item() - expected).abs());
                    let lat = TransducerLattice::from_logits(logits.data(), frames, &labels, v + 1)
                        .map_err(|e| e.to_string())?;
                    worst_dp = worst_dp.max((lat.log_likelihood() - lat.log_likelihood_backward()).abs());
                    draws += 1;
                }
            }
        }
    }
    ensure(draws >= 100, format!("only {draws} draws"))?;
    ensure(worst_loss < 1e-8, format!("loss vs enumeration off by {worst_loss:.2e}"))?;
    ensure(worst_dp < 1e-8, format!("forward vs backward off by {worst_dp:.2e}"))?;
    Ok(format!(
        "{draws} draws over T<=4 U<=3 V<=3; max |loss - enum| {worst_loss:.1e}, max |alpha - beta| {worst_dp:.1e}"
    ))
}

// 3 ---------------------------------------------------------------------

fn kmeans_checks() -> Outcome {
    let mut r = rng::substream(3, "acceptance-kmeans");
    let pts = random(&[24, 5], &mut r);
    let km = train_kmeans(&pts, 24, 20, 1).map_err(|e| e.to_string())?;
    ensure(km.final_distortion() == 0.0, format!("k=N distortion {}", km.final_distortion()))?;

    let data = random(&[300, 6], &mut r);
    let cb = train_kmeans(&data, 12, 50, 2).map_err(|e| e.to_string())?.into_codebook(Modality::Audio, 0);
    let queries = random(&[50, 6], &mut r);
    let ids = assign_tokens(&cb, &queries).map_err(|e| e.to_string())?.ids;
    for (i, id) in ids.iter().enumerate() {
        let q = queries.row(i);
        let dist = |k: usize| cb.centers.row(k).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let best = (0..cb.size()).fold(0, |b, k| if dist(k) < dist(b) { k } else { b });
        ensure(*id == best, format!("query {i}: got {id}, exhaustive {best}"))?;
    }

    let mut runs = 0;
    for (seed, k, n) in [(4, 8, 200), (5, 16, 300), (6, 3, 50), (7, 32, 400), (8, 5, 5000)] {
        let mut rr = rng::substream(seed, "acceptance-kmeans-run");
        // clustered data so Lloyd needs several iterations
        let centers = random(&[k, 4], &mut rr);
        let rows: Vec<f64> = (0..n)
            .flat_map(|_| {
                let c = rr.gen_range(0..k);
                centers.row(c).iter().map(|v| v + 0.3 * rr.gen_range(-1.0..1.0)).collect::<Vec<_>>()
            })
            .collect();
        let km = train_kmeans(&Tensor::new(vec![n, 4], rows).unwrap(), k, 100, seed).map_err(|e| e.to_string())?;
        for w in km.distortion_trace.windows(2) {
            ensure(w[1] <= w[0], format!("distortion rose {} -> {} (seed {seed})", w[0], w[1]))?;
        }
        runs += 1;
    }
    Ok(format!("k=N distortion 0; 50/50 assignments exhaustive-optimal; {runs} traces non-increasing"))
}

// 4 ---------------------------------------------------------------------

fn mask_schedule_checks() -> Outcome {
    let s = MaskSchedule::default();
    ensure(mask_params_at(&s, 0) == (1, 0.15), format!("step 0 gives {:?}", mask_params_at(&s, 0)))?;
    let mut widths = std::collections::BTreeSet::new();
    let mut prev = mask_params_at(&s, 0).0;
    for step in 0..=80_000u64 {
        let w = mask_params_at(&s, step).0;
        widths.insert(w);
        ensure(w == prev || step % 10_000 == 0, format!("width changed at step {step}"))?;
        prev = w;
    }
    ensure(widths == [1, 3, 5, 7, 9, 11].into(), format!("widths {widths:?}"))?;
    for stage in 1..=6u64 {
        let p = mask_params_at(&s, stage * 10_000 - 1).1;
        ensure((p - 0.45).abs() <= 0.005, format!("stage {stage} ends at p={p}"))?;
    }
    let mut r = rng::substream(4, "acceptance-mask");
    let trials = 20_000;
    let mut worst = 0.0f64;
    for (p, w) in [(0.15, 1), (0.3, 5), (0.45, 11)] {
        let hits = (0..trials)
            .filter(|_| sample_mask(61, w, p, &mut r).unwrap().mask[30])
            .count();
        let q = 1.0 - (1.0f64 - p).powi(w as i32);
        let sigma = (q * (1.0 - q) / trials as f64).sqrt();
        let z = (hits as f64 / trials as f64 - q).abs() / sigma;
        worst = worst.max(z);
        ensure(z < 3.0, format!("(p={p}, w={w}) coverage {:.4} vs {q:.4}: {z:.2} sigma", hits as f64 / trials as f64))?;
    }
    Ok(format!("widths {{1..11}} switch only at multiples of 10000; coverage within {worst:.2} sigma"))
}

// 5 ---------------------------------------------------------------------

fn pretraining_overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = corpus_config(dir.path(), 8, 11);
    cfg.batch_size = 8;
    cfg.max_steps = 2000;
    cfg.eval_every = 100;
    cfg.patience = 0;
    cfg.log_every = 1000;
    ensure(cfg.avbert.model_dim == 32 && cfg.avbert.num_blocks == 2 && cfg.avbert.vocab() == 24, "not the toy model")?;
    let start = Instant::now();
    let report = run_pretraining(&cfg, &mut Logger::quiet()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let e = report.last_eval.ok_or("no evaluation ran")?;
    ensure(report.steps <= 2000, format!("{} steps", report.steps))?;
    ensure(e.accuracy() >= 0.95, format!("masked accuracy {:.4} after {} steps", e.accuracy(), report.steps))?;
    ensure(secs < 600.0, format!("took {secs:.0}s"))?;
    Ok(format!(
        "masked accuracy {:.4} ({}/{}) after {} steps on 8 batches, {secs:.0}s",
        e.accuracy(),
        e.correct,
        e.total,
        report.steps
    ))
}

// 6 ---------------------------------------------------------------------

fn asr_overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = corpus_config(dir.path(), 16, 12);
    cfg.max_steps = 200;
    let pre = run_pretraining(&cfg, &mut Logger::quiet()).map_err(|e| e.to_string())?;
    cfg.paths.avbert = Some(pre.checkpoint);
    cfg.conformer.fusion_mode = FusionMode::CrossAttention;
    ensure(cfg.conformer.model_dim == 64 && cfg.conformer.num_blocks == 2, "not the toy conformer")?;
    cfg.batch_size = 4;
    cfg.max_steps = 5000;
    cfg.eval_every = 50;
    cfg.patience = 0;
    cfg.stop_at_zero_wer = true;
    let start = Instant::now();
    let trained = run_asr_training(&cfg, &mut Logger::quiet()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let report = run_eval(&cfg, &trained.checkpoint, &mut Logger::quiet()).map_err(|e| e.to_string())?;
    ensure(report.counts.errors() == 0, format!("WER {:.4} after {} steps", report.wer, trained.steps))?;
    for (id, r, h) in &report.hypotheses {
        ensure(r == h, format!("{id}: \"{h}\" != \"{r}\""))?;
    }
    ensure(secs < 1200.0, format!("took {secs:.0}s"))?;
    Ok(format!(
        "WER 0 on 16 utterances ({} words) after {} steps, {secs:.0}s; all greedy transcripts exact",
        report.counts.ref_len, trained.steps
    ))
}

// 7 ---------------------------------------------------------------------

fn parameter_parity() -> Outcome {
    let mut details = Vec::new();
    let configs = [
        ConformerConfig::toy(),
        ConformerConfig {
            model_dim: 48,
            num_blocks: 3,
            heads: 3,
            ff_dim: 96,
            conv_kernel: 5,
            env_dim: 20,
            ..ConformerConfig::toy()
        },
        ConformerConfig {
            model_dim: 16,
            num_blocks: 1,
            heads: 2,
            ff_dim: 32,
            env_dim: 128,
            vocab: 30,
            ..ConformerConfig::toy()
        },
    ];
    for c in configs {
        let (f, b) = build_models(&c, 1).map_err(|e| e.to_string())?;
        ensure(
            f.count_parameters() == b.count_parameters(),
            format!("dim {}: {} vs {}", c.model_dim, f.count_parameters(), b.count_parameters()),
        )?;
        details.push(f.count_parameters().to_string());
    }
    Ok(format!("fusion == baseline for {}", details.join(", ")))
}

// 8 ---------------------------------------------------------------------

fn file_hash(p: &Path) -> u64 {
    let mut h = DefaultHasher::new();
    h.write(&std::fs::read(p).unwrap());
    h.finish()
}

fn freeze_contract() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = corpus_config(dir.path(), 6, 13);
    cfg.max_steps = 20;
    let pre = run_pretraining(&cfg, &mut Logger::quiet()).map_err(|e| e.to_string())?;
    let bytes_before = file_hash(&pre.checkpoint);
    let params_before = load_checkpoint(&pre.checkpoint).map_err(|e| e.to_string())?.params.fingerprint();
    cfg.paths.avbert = Some(pre.checkpoint.clone());
    cfg.max_steps = 100;
    cfg.batch_size = 2;
    let r = run_asr_training(&cfg, &mut Logger::quiet()).map_err(|e| e.to_string())?;
    ensure(r.steps == 100, format!("{} steps", r.steps))?;
    let (before, after) = r.encoder_hash.ok_or("no encoder in use")?;
    ensure(before == params_before && after == params_before, "in-memory encoder hash changed")?;
    ensure(file_hash(&pre.checkpoint) == bytes_before, "checkpoint bytes changed")?;
    Ok(format!("encoder hash {params_before:016x} unchanged over 100 steps"))
}

// 9 ---------------------------------------------------------------------

fn determinism() -> Outcome {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let run = |root: &Path| -> avfusion::Result<(Vec<f64>, Vec<String>, Vec<f64>, Vec<String>, std::path::PathBuf)> {
        let mut cfg = corpus_config(root, 6, 14);
        cfg.seed = 99;
        cfg.batch_size = 3;
        cfg.max_steps = 10;
        let mut pl = Logger::quiet();
        let pre = run_pretraining(&cfg, &mut pl)?;
        cfg.paths.avbert = Some(pre.checkpoint);
        let mut al = Logger::quiet();
        let asr = run_asr_training(&cfg, &mut al)?;
        Ok((pre.losses, pl.lines, asr.losses, al.lines, asr.checkpoint))
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = run(d1.path()).map_err(|e| e.to_string())?;
    let b = run(d2.path()).map_err(|e| e.to_string())?;
    ensure(a.0.len() == 10 && a.2.len() == 10, "expected 10 steps per stage")?;
    ensure(bits(&a.0) == bits(&b.0) && a.1 == b.1, "pretraining logs differ")?;
    ensure(bits(&a.2) == bits(&b.2), "ASR losses differ")?;
    let strip = |l: &[String]| l.iter().filter(|s| s.starts_with("step=")).cloned().collect::<Vec<_>>();
    ensure(strip(&a.3) == strip(&b.3), "ASR logs differ")?;

    let ck = load_checkpoint(&a.4).map_err(|e| e.to_string())?;
    let again = d1.path().join("again.ckpt");
    save_checkpoint(&ck, &again).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&a.4).unwrap() == std::fs::read(&again).unwrap(), "save/load/save bytes differ")?;
    ensure(encode_checkpoint(&load_checkpoint(&again).unwrap()) == std::fs::read(&again).unwrap(), "re-encode differs")?;
    // config snapshots hold each run's own paths; weights and optimizer state must agree
    let other = load_checkpoint(&b.4).map_err(|e| e.to_string())?;
    ensure(ck.params == other.params && ck.step == other.step, "checkpoints of the two runs differ")?;
    Ok("10-step logs of both stages bitwise identical; checkpoint round trip byte-exact".into())
}

// 10 --------------------------------------------------------------------

fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn wer_oracle() -> Outcome {
    let mut r = rng::substream(10, "acceptance-wer");
    for i in 0..200 {
        let a: Vec<u8> = (0..r.gen_range(1..12)).map(|_| r.gen_range(0..5)).collect();
        let b: Vec<u8> = (0..r.gen_range(0..12)).map(|_| r.gen_range(0..5)).collect();
        let expected = levenshtein(&a, &b) as f64 / a.len() as f64;
        let got = wer(&a, &b).map_err(|e| e.to_string())?;
        ensure(got == expected, format!("pair {i}: {got} vs {expected}"))?;
    }
    let reference = "should i buy from the princess starfrost set royale high";
    let hyp = "should i buy from the princess stare froset in we're all rawhide";
    let rw: Vec<&str> = reference.split_whitespace().collect();
    let hw: Vec<&str> = hyp.split_whitespace().collect();
    let vocab: Vec<&str> = rw.iter().chain(&hw).copied().collect();
    let id = |w: &&str| vocab.iter().position(|v| v == w).unwrap() as u8;
    let ids = |ws: &[&str]| ws.iter().map(id).collect::<Vec<_>>();
    let expected = levenshtein(&ids(&rw), &ids(&hw)) as f64 / rw.len() as f64;
    let got = wer_str(reference, hyp).map_err(|e| e.to_string())?;
    ensure(got == expected && (got - 0.6).abs() < 1e-12, format!("printed example: {got} vs {expected}"))?;
    Ok(format!("200 random pairs match; printed example WER {got}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradcheck suite", gradcheck_suite),
        ("RNN-T oracle equivalence", rnnt_oracle),
        ("k-means", kmeans_checks),
        ("mask schedule", mask_schedule_checks),
        ("pretraining overfit", pretraining_overfit),
        ("ASR overfit", asr_overfit),
        ("parameter parity", parameter_parity),
        ("freeze contract", freeze_contract),
        ("determinism", determinism),
        ("WER oracle", wer_oracle),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
