//! Stage runners: tokenize, pretrain, train-asr and eval.
//!
//! Artifacts under `paths.work`:
//!
//! ```text
//! whitener.bin              per-dimension mean and std of audio patches
//! codebooks/audio.cb        audio k-means centers
//! codebooks/video.cb        video k-means centers
//! tokens.tsv                `vocab <n>` then `<id> <TAB> video ids <TAB> audio ids`
//! env/<encoder hash>/*.env  cached environment embeddings
//! ```

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::Hasher;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::RunConfig;
use super::corpus::{labels_to_text, load_corpus, CorpusEntry};
use crate::asr::{edit_counts, Augmenter, EditCounts, FusionMode, Transducer, Utterance};
use crate::avbert::{AvBert, EnvEmbeddings, MlmEval, MultimodalBatch};
use crate::error::{Error, Result};
use crate::features::{
    audio_patches, extract_video_patches, fit_whitener, prepare_clip, truncate_frames, AudioPatchSeq,
    VideoClip, VideoPatchSeq, Whitener, PATCH_DIM, TUBELET_SIZE,
};
use crate::rng;
use crate::tensor::io::{read_block, write_block, DType};
use crate::tensor::Tensor;
use crate::vq::{assign_tokens, reservoir_sample, train_kmeans, unified_vocab_size, Codebook, Modality};

pub const WHITENER_FILE: &str = "whitener.bin";
pub const TOKENS_FILE: &str = "tokens.tsv";
pub const AVBERT_CHECKPOINT: &str = "avbert.ckpt";
pub const ASR_CHECKPOINT: &str = "asr.ckpt";
pub const HYPOTHESES_FILE: &str = "hypotheses.tsv";

/// Collects log lines, optionally echoing them to stdout and a file.
pub struct Logger {
    pub lines: Vec<String>,
    echo: bool,
    file: Option<BufWriter<fs::File>>,
}

impl Logger {
    pub fn quiet() -> Self {
        Self {
            lines: Vec::new(),
            echo: false,
            file: None,
        }
    }

    pub fn stdout() -> Self {
        Self {
            echo: true,
            ..Self::quiet()
        }
    }

    fn open(&mut self, path: Option<&Path>) -> Result<()> {
        if let Some(p) = path {
            ensure_parent(p)?;
            self.file = Some(BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?));
        }
        Ok(())
    }

    pub fn line(&mut self, s: String) {
        if self.echo {
            println!("{s}");
        }
        if let Some(f) = self.file.as_mut() {
            // a failing log file must not abort training
            let _ = writeln!(f, "{s}").and_then(|_| f.flush());
        }
        self.lines.push(s);
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(d) => fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        None => Ok(()),
    }
}

fn stream_seed(seed: u64, name: &str) -> u64 {
    rng::substream(seed, name).gen()
}

pub fn save_whitener(w: &Whitener, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let (mean, std) = w.to_tensors();
    let mut bytes = Vec::new();
    write_block(&mut bytes, &[("mean", &mean), ("std", &std)], DType::F64).expect("writing to memory");
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_whitener(path: &Path) -> Result<Whitener> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let block = read_block(&mut BufReader::new(f), path)?;
    match block.as_slice() {
        [(a, mean), (b, std)] if a == "mean" && b == "std" && mean.numel() == std.numel() => Ok(Whitener {
            mean: mean.data().to_vec(),
            std: std.data().to_vec(),
        }),
        _ => Err(Error::corrupt(path, "expected `mean` and `std` tensors")),
    }
}

fn stack_rows(parts: impl Iterator<Item = Tensor>, dim: usize) -> Result<Tensor> {
    let data: Vec<f64> = parts.flat_map(Tensor::into_data).collect();
    Tensor::new(vec![data.len() / dim, dim], data)
}

/// Tubelet patches of a clip. Clips whose sides are already multiples of
/// the tubelet size are used as is; others get the full-scale preprocessing.
pub fn clip_patches(clip: &VideoClip) -> Result<VideoPatchSeq> {
    let (_, h, w) = clip.dims();
    if h % TUBELET_SIZE == 0 && w % TUBELET_SIZE == 0 {
        extract_video_patches(&truncate_frames(clip)?)
    } else {
        extract_video_patches(&prepare_clip(clip)?)
    }
}

/// Whitened features and video patches of a loaded corpus.
pub struct Prepared {
    pub entries: Vec<CorpusEntry>,
    pub audio: Vec<AudioPatchSeq>,
    pub video: Vec<Option<VideoPatchSeq>>,
}

pub fn prepare(entries: Vec<CorpusEntry>, whitener: &Whitener) -> Result<Prepared> {
    let audio = entries
        .iter()
        .map(|e| audio_patches(&e.audio, Some(whitener)))
        .collect::<Result<_>>()?;
    let video = entries
        .iter()
        .map(|e| e.clip.as_ref().map(clip_patches).transpose())
        .collect::<Result<_>>()?;
    Ok(Prepared { entries, audio, video })
}

/// Loads the saved whitener, fitting and saving one on the training corpus
/// when none exists yet.
pub fn ensure_whitener(cfg: &RunConfig) -> Result<Whitener> {
    let path = cfg.paths.work.join(WHITENER_FILE);
    if path.exists() {
        return load_whitener(&path);
    }
    let entries = load_corpus(&cfg.paths.data)?;
    fit_and_save_whitener(cfg, &entries)
}

fn fit_and_save_whitener(cfg: &RunConfig, entries: &[CorpusEntry]) -> Result<Whitener> {
    let raw = entries.iter().map(|e| audio_patches(&e.audio, None).map(|p| p.patches));
    let rows = stack_rows(raw.collect::<Result<Vec<_>>>()?.into_iter(), PATCH_DIM)?;
    let rows = reservoir_sample(&rows, cfg.tokenize.max_vectors, stream_seed(cfg.seed, "whitener"))?;
    let w = fit_whitener(&rows)?;
    save_whitener(&w, &cfg.paths.work.join(WHITENER_FILE))?;
    Ok(w)
}

#[derive(Debug, Clone)]
pub struct TokenizeReport {
    pub audio_codebook: PathBuf,
    pub video_codebook: PathBuf,
    pub tokens: PathBuf,
    pub vocab: usize,
    pub utterances: usize,
}

pub fn codebook_paths(cfg: &RunConfig) -> (PathBuf, PathBuf) {
    let dir = cfg.paths.work.join("codebooks");
    (dir.join("audio.cb"), dir.join("video.cb"))
}

/// Fits the whitener, trains both codebooks and writes the token file.
pub fn run_tokenize(cfg: &RunConfig, log: &mut Logger) -> Result<TokenizeReport> {
    let entries = load_corpus(&cfg.paths.data)?;
    let whitener = fit_and_save_whitener(cfg, &entries)?;
    let data = prepare(entries, &whitener)?;
    if data.video.iter().any(Option::is_none) {
        return Err(Error::invalid("tokenizing needs a video clip for every utterance"));
    }
    let t = &cfg.tokenize;
    let mut train = |rows: Tensor, k: usize, modality: Modality| -> Result<Codebook> {
        let name = modality.to_string();
        let rows = reservoir_sample(&rows, t.max_vectors, stream_seed(cfg.seed, &format!("{name}-sample")))?;
        let km = train_kmeans(&rows, k, t.max_iters, stream_seed(cfg.seed, &format!("{name}-kmeans")))?;
        log.line(format!(
            "kmeans {name} k={k} vectors={} iterations={} distortion={}",
            rows.rows(),
            km.iterations,
            km.final_distortion()
        ));
        Ok(km.into_codebook(modality, 0))
    };
    let audio_rows = stack_rows(data.audio.iter().map(|a| a.patches.clone()), PATCH_DIM)?;
    let audio_cb = train(audio_rows, t.audio_k, Modality::Audio)?;
    let video_rows = data.video.iter().flatten().map(|v| v.patches.clone());
    let video_rows = stack_rows(video_rows, crate::features::VIDEO_PATCH_DIM)?;
    let mut video_cb = train(video_rows, t.video_k, Modality::Video)?;
    video_cb.vocab_offset = audio_cb.size();
    let vocab = unified_vocab_size(&audio_cb, &video_cb)?;

    let (ap, vp) = codebook_paths(cfg);
    fs::create_dir_all(ap.parent().expect("codebook dir")).map_err(|e| Error::io(&ap, e))?;
    audio_cb.save(&ap)?;
    video_cb.save(&vp)?;

    let mut text = format!("vocab {vocab}\n");
    for ((e, a), v) in data.entries.iter().zip(&data.audio).zip(&data.video) {
        let ids = |cb: &Codebook, x: &Tensor| -> Result<String> {
            let t = assign_tokens(cb, x)?;
            Ok(t.ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
        };
        let video = ids(&video_cb, &v.as_ref().expect("checked above").patches)?;
        text.push_str(&format!("{}\t{video}\t{}\n", e.id, ids(&audio_cb, &a.patches)?));
    }
    let tokens = cfg.paths.work.join(TOKENS_FILE);
    fs::write(&tokens, text).map_err(|e| Error::io(&tokens, e))?;
    log.line(format!("tokens utterances={} vocab={vocab}", data.entries.len()));
    Ok(TokenizeReport {
        audio_codebook: ap,
        video_codebook: vp,
        tokens,
        vocab,
        utterances: data.entries.len(),
    })
}

/// Reads `tokens.tsv` into (id, video ids, audio ids) rows plus the vocab size.
pub fn read_tokens(path: &Path) -> Result<(usize, Vec<(String, Vec<usize>, Vec<usize>)>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let vocab = lines
        .next()
        .and_then(|l| l.strip_prefix("vocab "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::corrupt(path, "missing `vocab <n>` header"))?;
    let ids = |s: &str| -> Result<Vec<usize>> {
        s.split_whitespace()
            .map(|v| v.parse().map_err(|_| Error::corrupt(path, format!("bad token `{v}`"))))
            .collect()
    };
    let rows = lines
        .map(|l| match l.split('\t').collect::<Vec<_>>().as_slice() {
            [id, v, a] => Ok((id.to_string(), ids(v)?, ids(a)?)),
            _ => Err(Error::corrupt(path, format!("bad token line `{l}`"))),
        })
        .collect::<Result<_>>()?;
    Ok((vocab, rows))
}

fn load_codebooks(cfg: &RunConfig) -> Result<(Codebook, Codebook)> {
    let (ap, vp) = codebook_paths(cfg);
    let (a, v) = (Codebook::load(&ap)?, Codebook::load(&vp)?);
    let vocab = unified_vocab_size(&a, &v)?;
    if a.size() != cfg.avbert.audio_vocab || v.size() != cfg.avbert.video_vocab {
        return Err(Error::Config(format!(
            "codebooks hold {}+{} tokens, model expects {}+{}",
            a.size(),
            v.size(),
            cfg.avbert.audio_vocab,
            cfg.avbert.video_vocab
        )));
    }
    debug_assert_eq!(vocab, cfg.avbert.vocab());
    Ok((a, v))
}

/// Pretraining examples: both modalities with video ids ahead of audio ids.
pub fn multimodal_batches(data: &Prepared, audio_cb: &Codebook, video_cb: &Codebook) -> Result<Vec<MultimodalBatch>> {
    data.audio
        .iter()
        .zip(&data.video)
        .map(|(a, v)| {
            let audio_ids = assign_tokens(audio_cb, &a.patches)?;
            let labels = match v {
                Some(v) => assign_tokens(video_cb, &v.patches)?.concat(audio_ids),
                None => audio_ids,
            };
            MultimodalBatch::new(a.clone(), v.clone(), labels)
        })
        .collect()
}

fn cyclic<T: Clone>(items: &[T], step: u64, size: usize) -> Vec<T> {
    let start = step as usize * size;
    (0..size).map(|k| items[(start + k) % items.len()].clone()).collect()
}

/// Masked-token accuracy over `batches` with masks from a fixed stream.
pub fn evaluate_mlm(model: &AvBert, batches: &[MultimodalBatch], step: u64, seed: u64) -> Result<MlmEval> {
    let mut total = MlmEval {
        loss: 0.0,
        correct: 0,
        total: 0,
    };
    for (i, b) in batches.iter().enumerate() {
        let mut r = rng::indexed(seed, "eval-mask", i as u64);
        let plan = model.draw_mask(b, step, &mut r)?;
        let e = model.evaluate(b, &plan)?;
        total.loss += e.loss * e.total as f64;
        total.correct += e.correct;
        total.total += e.total;
    }
    total.loss /= total.total.max(1) as f64;
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    /// Steps completed, counting any resumed ones.
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub last_eval: Option<MlmEval>,
    pub stopped_early: bool,
}

/// Trains AV-BERT from scratch or from `paths.resume`, tokenizing the
/// corpus first if no codebooks exist.
pub fn run_pretraining(cfg: &RunConfig, log: &mut Logger) -> Result<PretrainReport> {
    log.open(cfg.paths.log.as_deref())?;
    let (ap, vp) = codebook_paths(cfg);
    if !ap.exists() || !vp.exists() || !cfg.paths.work.join(WHITENER_FILE).exists() {
        run_tokenize(cfg, log)?;
    }
    let whitener = load_whitener(&cfg.paths.work.join(WHITENER_FILE))?;
    let (audio_cb, video_cb) = load_codebooks(cfg)?;
    let train = multimodal_batches(&prepare(load_corpus(&cfg.paths.data)?, &whitener)?, &audio_cb, &video_cb)?;
    let held_out = match &cfg.paths.eval_data {
        Some(dir) => multimodal_batches(&prepare(load_corpus(dir)?, &whitener)?, &audio_cb, &video_cb)?,
        None => train.clone(),
    };

    let (mut model, start) = match &cfg.paths.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            (ck.restore_avbert(cfg.avbert.clone())?, ck.step)
        }
        None => (AvBert::new(cfg.avbert.clone(), cfg.seed)?, 0),
    };
    let ckpt = cfg.paths.checkpoints.join(AVBERT_CHECKPOINT);
    let save = |m: &AvBert, step: u64| save_checkpoint(&Checkpoint::of_avbert(m, step, cfg.to_text()), &ckpt);

    let mut losses = Vec::new();
    let mut last_eval = None;
    let (mut best, mut stale) = (f64::INFINITY, 0);
    let mut stopped_early = false;
    let mut step = start;
    while step < cfg.max_steps {
        let batches = cyclic(&train, step, cfg.batch_size);
        let s = model.pretrain_step(&batches, step, &cfg.optimizer, cfg.seed)?;
        losses.push(s.loss);
        if step == start || (step + 1) % cfg.log_every == 0 {
            log.line(format!(
                "step={step} loss={} ppl={} mask_w={} mask_p={:.4}",
                s.loss, s.perplexity, s.mask_width, s.mask_prob
            ));
        }
        step += 1;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            save(&model, step)?;
        }
        if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            let e = evaluate_mlm(&model, &held_out, step, cfg.seed)?;
            log.line(format!(
                "eval step={step} loss={} ppl={} acc={:.4}",
                e.loss,
                e.loss.exp(),
                e.accuracy()
            ));
            last_eval = Some(e);
            if e.loss < best {
                (best, stale) = (e.loss, 0);
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    log.line(format!("stop step={step} no improvement for {stale} evals"));
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    save(&model, step)?;
    Ok(PretrainReport {
        losses,
        steps: step,
        checkpoint: ckpt,
        last_eval,
        stopped_early,
    })
}

fn feature_hash(x: &AudioPatchSeq) -> u64 {
    let mut h = DefaultHasher::new();
    x.patches.data().iter().for_each(|v| h.write_u64(v.to_bits()));
    h.finish()
}

/// Environment embeddings for every utterance, read from or written to the
/// cache directory keyed by the encoder's parameter hash.
pub fn env_embeddings(model: &AvBert, data: &Prepared, work: &Path) -> Result<Vec<EnvEmbeddings>> {
    let dir = work.join("env").join(format!("{:016x}", model.params.fingerprint()));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    data.entries
        .iter()
        .zip(&data.audio)
        .map(|(e, a)| {
            let path = dir.join(format!("{}-{:016x}.env", e.id, feature_hash(a)));
            if path.exists() {
                let f = fs::File::open(&path).map_err(|err| Error::io(&path, err))?;
                if let Some((_, t)) = read_block(&mut BufReader::new(f), &path)?.pop() {
                    return Ok(EnvEmbeddings {
                        vectors: t,
                        frozen: true,
                    });
                }
            }
            let env = model.extract_env_embeddings(a)?;
            let mut bytes = Vec::new();
            write_block(&mut bytes, &[("env", &env.vectors)], DType::F64).expect("writing to memory");
            fs::write(&path, bytes).map_err(|err| Error::io(&path, err))?;
            Ok(env)
        })
        .collect()
}

fn load_encoder(cfg: &RunConfig) -> Result<Option<AvBert>> {
    if cfg.conformer.fusion_mode != FusionMode::CrossAttention {
        return Ok(None);
    }
    let path = cfg
        .paths
        .avbert
        .as_ref()
        .ok_or_else(|| Error::Config("cross_attention mode needs `paths.avbert`".into()))?;
    Ok(Some(load_checkpoint(path)?.restore_avbert(cfg.avbert.clone())?))
}

/// Transducer examples for a corpus, with environment embeddings when an
/// encoder is given.
pub fn utterances(data: &Prepared, encoder: Option<&AvBert>, work: &Path) -> Result<Vec<Utterance>> {
    let envs = match encoder {
        Some(m) => env_embeddings(m, data, work)?.into_iter().map(Some).collect(),
        None => vec![None; data.audio.len()],
    };
    Ok(data
        .entries
        .iter()
        .zip(&data.audio)
        .zip(envs)
        .map(|((e, a), env)| Utterance {
            features: a.clone(),
            labels: e.labels.clone(),
            env,
        })
        .collect())
}

/// Greedy transcripts and their pooled edit counts.
pub fn decode_all(model: &Transducer, utts: &[Utterance]) -> Result<(Vec<Vec<usize>>, EditCounts)> {
    let mut counts = EditCounts::default();
    let mut hyps = Vec::with_capacity(utts.len());
    for u in utts {
        let h = model.greedy_decode(&u.features, u.env.as_ref())?;
        counts += edit_counts(&u.labels, &h);
        hyps.push(h);
    }
    Ok((hyps, counts))
}

#[derive(Debug, Clone)]
pub struct AsrReport {
    pub losses: Vec<f64>,
    pub steps: u64,
    pub checkpoint: PathBuf,
    /// Encoder parameter hash before and after training.
    pub encoder_hash: Option<(u64, u64)>,
    pub last_wer: Option<f64>,
}

/// Trains the transducer. In cross-attention mode the AV-BERT checkpoint
/// at `paths.avbert` supplies frozen environment embeddings.
pub fn run_asr_training(cfg: &RunConfig, log: &mut Logger) -> Result<AsrReport> {
    log.open(cfg.paths.log.as_deref())?;
    let encoder = load_encoder(cfg)?;
    let hash_before = encoder.as_ref().map(|m| m.params.fingerprint());
    let whitener = ensure_whitener(cfg)?;
    let train = utterances(&prepare(load_corpus(&cfg.paths.data)?, &whitener)?, encoder.as_ref(), &cfg.paths.work)?;
    let held_out = match &cfg.paths.eval_data {
        Some(dir) => utterances(&prepare(load_corpus(dir)?, &whitener)?, encoder.as_ref(), &cfg.paths.work)?,
        None => train.clone(),
    };

    let (mut model, start) = match &cfg.paths.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            (ck.restore_transducer(cfg.conformer.clone())?, ck.step)
        }
        None => (Transducer::new(cfg.conformer.clone(), cfg.seed)?, 0),
    };
    log.line(format!(
        "model mode={} params={}",
        cfg.conformer.fusion_mode,
        model.count_parameters()
    ));
    let ckpt = cfg.paths.checkpoints.join(ASR_CHECKPOINT);
    let save = |m: &Transducer, step: u64| save_checkpoint(&Checkpoint::of_transducer(m, step, cfg.to_text()), &ckpt);

    let mut losses = Vec::new();
    let mut last_wer = None;
    let (mut best, mut stale) = (f64::INFINITY, 0);
    let mut step = start;
    while step < cfg.max_steps {
        let batch = cyclic(&train, step, cfg.batch_size);
        let mut aug = cfg.augment.then(|| Augmenter {
            policy: cfg.specaugment,
            rng: rng::indexed(cfg.seed, "specaugment", step),
        });
        let loss = model.train_step(&batch, &cfg.optimizer, aug.as_mut())?;
        losses.push(loss);
        if step == start || (step + 1) % cfg.log_every == 0 {
            log.line(format!("step={step} loss={loss}"));
        }
        step += 1;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            save(&model, step)?;
        }
        if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            let (_, c) = decode_all(&model, &held_out)?;
            let wer = c.wer();
            log.line(format!("eval step={step} wer={wer:.4} errors={} words={}", c.errors(), c.ref_len));
            last_wer = Some(wer);
            if cfg.stop_at_zero_wer && c.errors() == 0 {
                log.line(format!("stop step={step} wer 0"));
                break;
            }
            if wer < best {
                (best, stale) = (wer, 0);
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    log.line(format!("stop step={step} no improvement for {stale} evals"));
                    break;
                }
            }
        }
    }
    save(&model, step)?;
    let encoder_hash = match (hash_before, &encoder) {
        (Some(before), Some(m)) => {
            let after = m.params.fingerprint();
            if after != before {
                return Err(Error::invalid("AV-BERT parameters changed during ASR training"));
            }
            Some((before, after))
        }
        _ => None,
    };
    Ok(AsrReport {
        losses,
        steps: step,
        checkpoint: ckpt,
        encoder_hash,
        last_wer,
    })
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub counts: EditCounts,
    pub wer: f64,
    /// (utterance id, reference, hypothesis) in manifest order.
    pub hypotheses: Vec<(String, String, String)>,
    pub hypotheses_file: PathBuf,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!(
            "wer {:.4} subs {} ins {} dels {} words {}",
            self.wer, self.counts.subs, self.counts.ins, self.counts.dels, self.counts.ref_len
        )
    }
}

/// Corpus-level WER: total edits over total reference words.
pub fn pooled_counts<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<EditCounts> {
    let mut c = EditCounts::default();
    for (r, h) in pairs {
        c += edit_counts(r, h);
    }
    if c.ref_len == 0 {
        return Err(Error::invalid("evaluation set has no reference words"));
    }
    Ok(c)
}

/// Greedy-decodes the eval corpus (`paths.eval_data`, else `paths.data`)
/// with the transducer in `checkpoint`.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, log: &mut Logger) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint)?.restore_transducer(cfg.conformer.clone())?;
    let encoder = load_encoder(cfg)?;
    let whitener = ensure_whitener(cfg)?;
    let dir = cfg.paths.eval_data.as_ref().unwrap_or(&cfg.paths.data);
    let data = prepare(load_corpus(dir)?, &whitener)?;
    let utts = utterances(&data, encoder.as_ref(), &cfg.paths.work)?;
    let (hyps, _) = decode_all(&model, &utts)?;
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = utts.iter().zip(&hyps).map(|(u, h)| (u.labels.clone(), h.clone())).collect();
    let counts = pooled_counts(&pairs)?;
    let hypotheses: Vec<(String, String, String)> = data
        .entries
        .iter()
        .zip(&hyps)
        .map(|(e, h)| (e.id.clone(), labels_to_text(&e.labels), labels_to_text(h)))
        .collect();
    let out = checkpoint.with_file_name(HYPOTHESES_FILE);
    let text: String = hypotheses.iter().map(|(i, r, h)| format!("{i}\t{r}\t{h}\n")).collect();
    fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
    let report = EvalReport {
        counts,
        wer: counts.wer(),
        hypotheses,
        hypotheses_file: out,
    };
    log.line(report.summary());
    Ok(report)
}

#[cfg(test)]
#[path = "stages_tests.rs"]
mod tests;
