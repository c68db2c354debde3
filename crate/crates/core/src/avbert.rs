//! Audio-visual masked prediction encoder.
//!
//! Raw patches of each modality go through a linear stem with instance
//! normalisation, receive modality and position embeddings, and are joined
//! into one sequence (video first, then audio). A stack of pre-norm
//! transformer blocks attends across everything, and one shared head scores
//! the unified codebook vocabulary at masked positions.


use crate::error::{Error, Result};
use crate::features::{AudioPatchSeq, VideoPatchSeq, PATCH_DIM, VIDEO_PATCH_DIM};
use crate::masking::{mask_params_at, sample_segmented_mask, MaskPlan, MaskSchedule};
use crate::nn::{FeedForward, Init, Linear, MultiHeadAttention, Norm};
use crate::rng;
use crate::tensor::{Activation, Adam, Graph, ParameterSet, Tensor, Var};
use crate::vq::{Modality, TokenSeq};

#[derive(Debug, Clone, PartialEq)]
pub struct AvBertConfig {
    pub model_dim: usize,
    pub num_blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub audio_vocab: usize,
    pub video_vocab: usize,
    pub audio_patch_dim: usize,
    pub video_patch_dim: usize,
    pub max_audio_positions: usize,
    pub max_video_steps: usize,
    pub max_video_spatial: usize,
    pub schedule: MaskSchedule,
}

impl AvBertConfig {
    /// Full-size model: dim 128, six blocks, 4096 + 8192 tokens.
    pub fn full() -> Self {
        Self {
            model_dim: 128,
            num_blocks: 6,
            heads: 4,
            ff_dim: 512,
            audio_vocab: crate::vq::FULL_AUDIO_CENTERS,
            video_vocab: crate::vq::FULL_VIDEO_CENTERS,
            audio_patch_dim: PATCH_DIM,
            video_patch_dim: VIDEO_PATCH_DIM,
            max_audio_positions: 2048,
            max_video_steps: 64,
            max_video_spatial: 256,
            schedule: MaskSchedule::default(),
        }
    }

    /// Desk-scale model: dim 32, two blocks, 8 + 16 tokens.
    pub fn toy() -> Self {
        Self {
            model_dim: 32,
            num_blocks: 2,
            heads: 4,
            ff_dim: 128,
            audio_vocab: 8,
            video_vocab: 16,
            max_audio_positions: 512,
            max_video_steps: 32,
            max_video_spatial: 16,
            ..Self::full()
        }
    }

    pub fn vocab(&self) -> usize {
        self.audio_vocab + self.video_vocab
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.audio_vocab == 0 || self.video_vocab == 0 {
            return Err(Error::invalid("vocabulary sizes must be positive"));
        }
        self.schedule.validate()
    }
}

/// One pretraining example: patches of both modalities plus their token ids
/// in sequence order (video ids first, then audio ids).
#[derive(Debug, Clone)]
pub struct MultimodalBatch {
    pub audio: AudioPatchSeq,
    pub video: Option<VideoPatchSeq>,
    pub labels: TokenSeq,
}

impl MultimodalBatch {
    pub fn new(audio: AudioPatchSeq, video: Option<VideoPatchSeq>, labels: TokenSeq) -> Result<Self> {
        let b = Self { audio, video, labels };
        if b.labels.len() != b.seq_len() {
            return Err(Error::shape(
                "multimodal_batch",
                format!("{} labels for {} patches", b.labels.len(), b.seq_len()),
            ));
        }
        Ok(b)
    }

    pub fn video_len(&self) -> usize {
        self.video.as_ref().map_or(0, VideoPatchSeq::len)
    }

    pub fn seq_len(&self) -> usize {
        self.video_len() + self.audio.len()
    }

    /// Lengths of the modality segments in sequence order.
    pub fn segments(&self) -> Vec<usize> {
        match self.video_len() {
            0 => vec![self.audio.len()],
            v => vec![v, self.audio.len()],
        }
    }
}

/// Final encoder states.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvEmbeddings {
    pub vectors: Tensor,
    pub frozen: bool,
}

/// Switches for the additive embeddings (the permutation tests turn them off).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedOptions {
    pub positional: bool,
    pub modality: bool,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            positional: true,
            modality: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainStats {
    pub loss: f64,
    pub perplexity: f64,
    pub mask_width: usize,
    pub mask_prob: f64,
    pub masked: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmEval {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

impl MlmEval {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

#[derive(Debug, Clone)]
struct Block {
    attn_norm: Norm,
    attn: MultiHeadAttention,
    ff_norm: Norm,
    ff: FeedForward,
}

struct Stem {
    proj: Linear,
    norm: Norm,
    mask: String,
}

pub struct AvBert {
    pub config: AvBertConfig,
    pub params: ParameterSet,
    audio_stem: Stem,
    video_stem: Stem,
    modality_table: String,
    audio_pos: String,
    video_time: String,
    video_space: String,
    blocks: Vec<Block>,
    final_norm: Norm,
    head: Linear,
}

impl AvBert {
    pub fn new(config: AvBertConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let d = config.model_dim;
        let mut init = Init::new(&mut params, seed);
        let mut stem = |name: &str, dim: usize| -> Result<Stem> {
            Ok(Stem {
                proj: init.linear(&format!("{name}.stem"), dim, d)?,
                norm: init.norm(&format!("{name}.stem_norm"), d)?,
                mask: init.embedding(&format!("{name}.mask"), 1, d)?,
            })
        };
        let audio_stem = stem("audio", config.audio_patch_dim)?;
        let video_stem = stem("video", config.video_patch_dim)?;
        let modality_table = init.embedding("embed.modality", 2, d)?;
        let audio_pos = init.embedding("embed.audio_pos", config.max_audio_positions, d)?;
        let video_time = init.embedding("embed.video_time", config.max_video_steps, d)?;
        let video_space = init.embedding("embed.video_space", config.max_video_spatial, d)?;
        let blocks = (0..config.num_blocks)
            .map(|i| {
                Ok(Block {
                    attn_norm: init.norm(&format!("block{i}.attn_norm"), d)?,
                    attn: init.attention(&format!("block{i}.attn"), d, config.heads)?,
                    ff_norm: init.norm(&format!("block{i}.ff_norm"), d)?,
                    ff: init.feed_forward(&format!("block{i}.ff"), d, config.ff_dim, Activation::Gelu)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = init.norm("final_norm", d)?;
        let head = init.linear("head", d, config.vocab())?;
        Ok(Self {
            config,
            params,
            audio_stem,
            video_stem,
            modality_table,
            audio_pos,
            video_time,
            video_space,
            blocks,
            final_norm,
            head,
        })
    }

    /// Swaps in restored parameters after checking names and shapes.
    pub fn with_params(mut self, params: ParameterSet) -> Result<Self> {
        let expected: Vec<(&str, &[usize])> = self.params.iter().map(|(n, p)| (n, p.tensor.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, p)| (n, p.tensor.shape())).collect();
        if expected != got {
            return Err(Error::shape("with_params", "parameter set does not match the encoder layout"));
        }
        self.params = params;
        Ok(self)
    }

    fn embed_segment(
        &self,
        g: &mut Graph,
        patches: &Tensor,
        modality: Modality,
        positions: &[(usize, usize)],
        mask: Option<&[bool]>,
        opts: EmbedOptions,
    ) -> Result<Var> {
        let (stem, dim) = match modality {
            Modality::Audio => (&self.audio_stem, self.config.audio_patch_dim),
            Modality::Video => (&self.video_stem, self.config.video_patch_dim),
        };
        if patches.cols() != dim {
            return Err(Error::shape(
                "embed_multimodal",
                format!("{modality} patch dim {} != {dim}", patches.cols()),
            ));
        }
        let x = g.constant(patches.clone());
        let h = stem.proj.forward(g, &self.params, x)?;
        let mut h = stem.norm.instance_over_time(g, &self.params, h)?;
        if let Some(m) = mask {
            if m.iter().any(|v| *v) {
                let fill = g.param(&self.params, &stem.mask)?;
                h = g.mask_rows(h, m, fill)?;
            }
        }
        let n = patches.rows();
        if opts.modality {
            let table = g.param(&self.params, &self.modality_table)?;
            let id = match modality {
                Modality::Audio => 0,
                Modality::Video => 1,
            };
            let e = g.gather_rows(table, &vec![id; n])?;
            h = g.add(h, e)?;
        }
        if opts.positional {
            match modality {
                Modality::Audio => {
                    let ids: Vec<usize> = positions.iter().map(|p| p.0).collect();
                    let table = g.param(&self.params, &self.audio_pos)?;
                    let e = g.gather_rows(table, &ids)?;
                    h = g.add(h, e)?;
                }
                Modality::Video => {
                    let (t_ids, s_ids): (Vec<usize>, Vec<usize>) = positions.iter().copied().unzip();
                    let t = g.param(&self.params, &self.video_time)?;
                    let s = g.param(&self.params, &self.video_space)?;
                    let et = g.gather_rows(t, &t_ids)?;
                    let es = g.gather_rows(s, &s_ids)?;
                    h = g.add(h, et)?;
                    h = g.add(h, es)?;
                }
            }
        }
        Ok(h)
    }

    fn audio_positions(&self, n: usize) -> Result<Vec<(usize, usize)>> {
        if n > self.config.max_audio_positions {
            return Err(Error::shape(
                "embed_multimodal",
                format!("{n} audio patches exceed {} positions", self.config.max_audio_positions),
            ));
        }
        Ok((0..n).map(|i| (i, 0)).collect())
    }

    /// Embeds the batch into an L×d sequence (video rows first). Rows flagged
    /// in `mask` have their projected content replaced by the modality's mask
    /// vector before the additive embeddings.
    pub fn embed_multimodal(&self, g: &mut Graph, batch: &MultimodalBatch, mask: Option<&[bool]>, opts: EmbedOptions) -> Result<Var> {
        if let Some(m) = mask {
            if m.len() != batch.seq_len() {
                return Err(Error::shape("embed_multimodal", "mask length differs from sequence length"));
            }
        }
        let vlen = batch.video_len();
        let mut parts = Vec::with_capacity(2);
        if let Some(v) = &batch.video {
            let pos: Vec<(usize, usize)> = (0..v.len()).map(|i| v.position(i)).collect();
            if pos.iter().any(|&(t, s)| t >= self.config.max_video_steps || s >= self.config.max_video_spatial) {
                return Err(Error::shape("embed_multimodal", "video grid exceeds the position tables"));
            }
            parts.push(self.embed_segment(g, &v.patches, Modality::Video, &pos, mask.map(|m| &m[..vlen]), opts)?);
        }
        let pos = self.audio_positions(batch.audio.len())?;
        parts.push(self.embed_segment(g, &batch.audio.patches, Modality::Audio, &pos, mask.map(|m| &m[vlen..]), opts)?);
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_rows(&parts)
        }
    }

    /// Transformer stack plus final layer norm; no attention masking.
    pub fn encoder_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.encoder_forward_with_weights(g, x)?.0)
    }

    /// Also returns every block's per-head attention weights.
    pub fn encoder_forward_with_weights(&self, g: &mut Graph, mut x: Var) -> Result<(Var, Vec<Vec<Var>>)> {
        let p = &self.params;
        let mut weights = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h = b.attn_norm.layer(g, p, x)?;
            let (a, w) = b.attn.forward_with_weights(g, p, h, h)?;
            x = g.add(x, a)?;
            let h = b.ff_norm.layer(g, p, x)?;
            let f = b.ff.forward(g, p, h)?;
            x = g.add(x, f)?;
            weights.push(w);
        }
        Ok((self.final_norm.layer(g, p, x)?, weights))
    }

    pub fn logits(&self, g: &mut Graph, h: Var) -> Result<Var> {
        self.head.forward(g, &self.params, h)
    }

    /// Mean cross-entropy of the shared head over masked positions only.
    pub fn mlm_loss(&self, g: &mut Graph, h: Var, labels: &TokenSeq, mask: &MaskPlan) -> Result<Var> {
        if !mask.mask.iter().any(|m| *m) {
            return Err(Error::invalid("mlm_loss needs at least one masked position"));
        }
        let logits = self.logits(g, h)?;
        let ignore: Vec<bool> = mask.mask.iter().map(|m| !m).collect();
        g.cross_entropy(logits, &labels.ids, &ignore)
    }

    /// Mask for `batch` under the schedule at `step`. Spans stay inside their
    /// modality segment; an empty draw is replaced by one random span.
    pub fn draw_mask<R: rand::Rng + ?Sized>(&self, batch: &MultimodalBatch, step: u64, rng: &mut R) -> Result<MaskPlan> {
        let (width, prob) = mask_params_at(&self.config.schedule, step);
        let segments = batch.segments();
        let mut plan = sample_segmented_mask(&segments, width, prob, rng)?;
        if plan.centers.is_empty() {
            let c = rng.gen_range(0..plan.mask.len());
            let mut start = 0;
            for len in segments {
                if c < start + len {
                    let half = width / 2;
                    let lo = c.saturating_sub(half).max(start);
                    let hi = (c + half).min(start + len - 1);
                    plan.mask[lo..=hi].iter_mut().for_each(|m| *m = true);
                    break;
                }
                start += len;
            }
            plan.centers.push(c);
        }
        Ok(plan)
    }

    /// One Adam step on the mean masked loss of `batches`. Masks come from a
    /// stream keyed by (`seed`, `step`).
    pub fn pretrain_step(&mut self, batches: &[MultimodalBatch], step: u64, opt: &Adam, seed: u64) -> Result<PretrainStats> {
        if batches.is_empty() {
            return Err(Error::invalid("pretrain_step needs at least one batch"));
        }
        let (mask_width, mask_prob) = mask_params_at(&self.config.schedule, step);
        let mut rng = rng::indexed(seed, "pretrain-mask", step);
        let scale = 1.0 / batches.len() as f64;
        let mut loss = 0.0;
        let mut masked = 0;
        self.params.zero_grad();
        for batch in batches {
            let plan = self.draw_mask(batch, step, &mut rng)?;
            masked += plan.masked_count();
            let mut g = Graph::new();
            let x = self.embed_multimodal(&mut g, batch, Some(&plan.mask), EmbedOptions::default())?;
            let h = self.encoder_forward(&mut g, x)?;
            let l = self.mlm_loss(&mut g, h, &batch.labels, &plan)?;
            loss += scale * g.value(l).item();
            let grads = g.backward(l)?;
            self.params.accumulate_scaled(&grads, scale)?;
        }
        self.params.adam_step(opt)?;
        Ok(PretrainStats {
            loss,
            perplexity: loss.exp(),
            mask_width,
            mask_prob,
            masked,
        })
    }

    /// Masked loss and argmax accuracy for a given mask, without gradients.
    pub fn evaluate(&self, batch: &MultimodalBatch, mask: &MaskPlan) -> Result<MlmEval> {
        let mut g = Graph::inference();
        let x = self.embed_multimodal(&mut g, batch, Some(&mask.mask), EmbedOptions::default())?;
        let h = self.encoder_forward(&mut g, x)?;
        let logits = self.logits(&mut g, h)?;
        let loss = self.mlm_loss(&mut g, h, &batch.labels, mask)?;
        let lg = g.value(logits);
        let mut correct = 0;
        let mut total = 0;
        for (i, m) in mask.mask.iter().enumerate() {
            if *m {
                total += 1;
                let row = lg.row(i);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                correct += usize::from(best == batch.labels.ids[i]);
            }
        }
        Ok(MlmEval {
            loss: g.value(loss).item(),
            correct,
            total,
        })
    }

    /// Encoder states for an audio-only sequence, computed without gradient
    /// tracking. Parameters are only read.
    pub fn extract_env_embeddings(&self, audio: &AudioPatchSeq) -> Result<EnvEmbeddings> {
        if audio.is_empty() {
            return Err(Error::invalid("cannot embed empty audio"));
        }
        let batch = MultimodalBatch {
            audio: audio.clone(),
            video: None,
            labels: TokenSeq::default(),
        };
        let mut g = Graph::inference();
        let x = self.embed_multimodal(&mut g, &batch, None, EmbedOptions::default())?;
        let h = self.encoder_forward(&mut g, x)?;
        Ok(EnvEmbeddings {
            vectors: g.value(h).clone(),
            frozen: true,
        })
    }
}

#[cfg(test)]
#[path = "avbert_tests.rs"]
mod tests;
