//! Conformer transducer with per-block fusion attention.

use std::fmt;
use std::str::FromStr;

use crate::avbert::EnvEmbeddings;
use crate::error::{Error, Result};
use crate::features::{AudioPatchSeq, PATCH_DIM};
use crate::nn::{FeedForward, Init, Linear, MultiHeadAttention, Norm};
use crate::tensor::{Activation, Adam, Graph, ParameterSet, Tensor, Var};

use super::rnnt::rnnt_loss;
use super::specaugment::{specaugment, SpecAugmentPolicy};

/// Most symbols emitted on one encoder frame during greedy search.
pub const MAX_SYMBOLS_PER_FRAME: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Queries from the encoder, keys and values from the environment sequence.
    CrossAttention,
    /// Same-shaped self-attention over the encoder states.
    SelfAttentionBaseline,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::CrossAttention => "cross_attention",
            FusionMode::SelfAttentionBaseline => "self_attention_baseline",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_attention" => Ok(FusionMode::CrossAttention),
            "self_attention_baseline" => Ok(FusionMode::SelfAttentionBaseline),
            other => Err(Error::invalid(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformerConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub num_blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub conv_kernel: usize,
    pub subsample_kernel: usize,
    pub subsample_stride: usize,
    pub fusion_mode: FusionMode,
    pub env_dim: usize,
    /// Output labels, blank excluded.
    pub vocab: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
}

impl ConformerConfig {
    /// Large preset: 24 blocks of width 1024.
    pub fn full() -> Self {
        Self {
            input_dim: PATCH_DIM,
            model_dim: 1024,
            num_blocks: 24,
            heads: 4,
            ff_dim: 4096,
            conv_kernel: 31,
            subsample_kernel: 3,
            subsample_stride: 2,
            fusion_mode: FusionMode::CrossAttention,
            env_dim: 128,
            vocab: 1024,
            pred_dim: 640,
            joint_dim: 640,
        }
    }

    /// Desk-scale preset: two blocks of width 64 over 8 symbols.
    pub fn toy() -> Self {
        Self {
            model_dim: 64,
            num_blocks: 2,
            ff_dim: 256,
            conv_kernel: 7,
            env_dim: 32,
            vocab: 8,
            pred_dim: 64,
            joint_dim: 64,
            ..Self::full()
        }
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::invalid("depthwise kernel width must be odd"));
        }
        if self.subsample_kernel == 0 || self.subsample_stride == 0 || self.vocab == 0 {
            return Err(Error::invalid("subsampling and vocabulary sizes must be positive"));
        }
        Ok(())
    }

    /// Encoder frames produced from `t` feature rows.
    pub fn subsampled_len(&self, t: usize) -> Option<usize> {
        (t >= self.subsample_kernel).then(|| (t - self.subsample_kernel) / self.subsample_stride + 1)
    }
}

/// SpecAugment policy together with the stream it draws from.
pub struct Augmenter {
    pub policy: SpecAugmentPolicy,
    pub rng: crate::rng::Rng,
}

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub features: AudioPatchSeq,
    pub labels: Vec<usize>,
    pub env: Option<EnvEmbeddings>,
}

#[derive(Debug, Clone)]
struct ConvModule {
    norm: Norm,
    pointwise_in: Linear,
    depthwise_w: String,
    depthwise_b: String,
    mid_norm: Norm,
    pointwise_out: Linear,
}

#[derive(Debug, Clone)]
struct ConformerBlock {
    ff1_norm: Norm,
    ff1: FeedForward,
    mhsa_norm: Norm,
    mhsa: MultiHeadAttention,
    fusion_norm: Norm,
    fusion: MultiHeadAttention,
    conv: ConvModule,
    ff2_norm: Norm,
    ff2: FeedForward,
    out_norm: Norm,
}

/// Encoder, prediction network and joint network sharing one parameter set.
pub struct Transducer {
    pub config: ConformerConfig,
    pub params: ParameterSet,
    subsample: Linear,
    env_adapter: Linear,
    blocks: Vec<ConformerBlock>,
    label_embed: String,
    rnn_in: Linear,
    rnn_rec: Linear,
    joint_enc: Linear,
    joint_pred: Linear,
    joint_out: Linear,
}

fn residual(g: &mut Graph, x: Var, y: Var, scale: f64) -> Result<Var> {
    let y = if scale == 1.0 { y } else { g.scale(y, scale)? };
    g.add(x, y)
}

impl Transducer {
    pub fn new(config: ConformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, p) = (config.model_dim, config.pred_dim);
        let mut params = ParameterSet::new();
        let mut init = Init::new(&mut params, seed);
        let subsample = init.linear("subsample", config.subsample_kernel * config.input_dim, d)?;
        let env_adapter = init.linear("env_adapter", config.env_dim, d)?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let n = |s: &str| format!("block{i}.{s}");
            let dw_bound = (1.0 / config.conv_kernel as f64).sqrt();
            blocks.push(ConformerBlock {
                ff1_norm: init.norm(&n("ff1_norm"), d)?,
                ff1: init.feed_forward(&n("ff1"), d, config.ff_dim, Activation::Swish)?,
                mhsa_norm: init.norm(&n("mhsa_norm"), d)?,
                mhsa: init.attention(&n("mhsa"), d, config.heads)?,
                fusion_norm: init.norm(&n("fusion_norm"), d)?,
                fusion: init.attention(&n("fusion"), d, config.heads)?,
                conv: ConvModule {
                    norm: init.norm(&n("conv_norm"), d)?,
                    pointwise_in: init.linear(&n("conv_in"), d, 2 * d)?,
                    depthwise_w: init.uniform(&n("conv_dw.w"), &[config.conv_kernel, d], dw_bound)?,
                    depthwise_b: init.constant(&n("conv_dw.b"), &[d], 0.0)?,
                    mid_norm: init.norm(&n("conv_mid_norm"), d)?,
                    pointwise_out: init.linear(&n("conv_out"), d, d)?,
                },
                ff2_norm: init.norm(&n("ff2_norm"), d)?,
                ff2: init.feed_forward(&n("ff2"), d, config.ff_dim, Activation::Swish)?,
                out_norm: init.norm(&n("out_norm"), d)?,
            });
        }
        // row `vocab` is the start symbol
        let label_embed = init.embedding("pred.embed", config.vocab + 1, p)?;
        let rnn_in = init.linear("pred.rnn_in", p, p)?;
        let rnn_rec = init.linear_no_bias("pred.rnn_rec", p, p)?;
        let joint_enc = init.linear("joint.enc", d, config.joint_dim)?;
        let joint_pred = init.linear_no_bias("joint.pred", p, config.joint_dim)?;
        let joint_out = init.linear("joint.out", config.joint_dim, config.vocab + 1)?;
        Ok(Self {
            config,
            params,
            subsample,
            env_adapter,
            blocks,
            label_embed,
            rnn_in,
            rnn_rec,
            joint_enc,
            joint_pred,
            joint_out,
        })
    }

    /// Swaps in restored parameters after checking names and shapes.
    pub fn with_params(mut self, params: ParameterSet) -> Result<Self> {
        let expected: Vec<(&str, &[usize])> = self.params.iter().map(|(n, p)| (n, p.tensor.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, p)| (n, p.tensor.shape())).collect();
        if expected != got {
            return Err(Error::shape("with_params", "parameter set does not match the transducer layout"));
        }
        self.params = params;
        Ok(self)
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    /// Kernel-3 stride-2 convolution over time (no padding) to model width.
    pub fn conv_subsample(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let t = g.shape(features)[0];
        if self.config.subsampled_len(t).is_none() {
            return Err(Error::shape(
                "conv_subsample",
                format!("{t} frames is shorter than the kernel {}", self.config.subsample_kernel),
            ));
        }
        let windows = g.unfold(features, self.config.subsample_kernel, self.config.subsample_stride)?;
        self.subsample.forward(g, &self.params, windows)
    }

    /// Projects environment vectors to model width.
    pub fn adapt_env(&self, g: &mut Graph, env: &EnvEmbeddings) -> Result<Var> {
        if env.vectors.cols() != self.config.env_dim {
            return Err(Error::shape(
                "adapt_env",
                format!("env dim {} != {}", env.vectors.cols(), self.config.env_dim),
            ));
        }
        let e = g.constant(env.vectors.clone());
        self.env_adapter.forward(g, &self.params, e)
    }

    /// Fusion sublayer output (before the residual): cross-attention into
    /// `env` or self-attention, depending on the mode.
    pub fn fusion_attention(&self, g: &mut Graph, block: usize, x: Var, env: Option<Var>) -> Result<Var> {
        let b = &self.blocks[block];
        let h = b.fusion_norm.layer(g, &self.params, x)?;
        let context = match self.config.fusion_mode {
            FusionMode::CrossAttention => env.ok_or_else(|| Error::invalid("cross-attention fusion needs environment embeddings"))?,
            FusionMode::SelfAttentionBaseline => h,
        };
        b.fusion.forward(g, &self.params, h, context)
    }

    fn conv_module(&self, g: &mut Graph, m: &ConvModule, x: Var) -> Result<Var> {
        let p = &self.params;
        let h = m.norm.layer(g, p, x)?;
        let h = m.pointwise_in.forward(g, p, h)?;
        let h = g.glu(h)?;
        let w = g.param(p, &m.depthwise_w)?;
        let h = g.depthwise_conv(h, w)?;
        let bias = g.param(p, &m.depthwise_b)?;
        let h = g.add_row(h, bias)?;
        let h = m.mid_norm.layer(g, p, h)?;
        let h = g.activation(h, Activation::Swish)?;
        m.pointwise_out.forward(g, p, h)
    }

    pub fn conformer_block(&self, g: &mut Graph, block: usize, x: Var, env: Option<Var>) -> Result<Var> {
        let b = &self.blocks[block];
        let p = &self.params;
        let h = b.ff1_norm.layer(g, p, x)?;
        let h = b.ff1.forward(g, p, h)?;
        let x = residual(g, x, h, 0.5)?;
        let h = b.mhsa_norm.layer(g, p, x)?;
        let h = b.mhsa.forward(g, p, h, h)?;
        let x = residual(g, x, h, 1.0)?;
        let h = self.fusion_attention(g, block, x, env)?;
        let x = residual(g, x, h, 1.0)?;
        let h = self.conv_module(g, &b.conv, x)?;
        let x = residual(g, x, h, 1.0)?;
        let h = b.ff2_norm.layer(g, p, x)?;
        let h = b.ff2.forward(g, p, h)?;
        let x = residual(g, x, h, 0.5)?;
        b.out_norm.layer(g, p, x)
    }

    /// Subsampling plus the block stack.
    pub fn encode(&self, g: &mut Graph, features: &Tensor, env: Option<&EnvEmbeddings>) -> Result<Var> {
        let env = match (self.config.fusion_mode, env) {
            (FusionMode::CrossAttention, None) => {
                return Err(Error::invalid("cross-attention fusion needs environment embeddings"))
            }
            (FusionMode::CrossAttention, Some(e)) => Some(self.adapt_env(g, e)?),
            (FusionMode::SelfAttentionBaseline, _) => None,
        };
        let f = g.constant(features.clone());
        let mut x = self.conv_subsample(g, f)?;
        for i in 0..self.blocks.len() {
            x = self.conformer_block(g, i, x, env)?;
        }
        Ok(x)
    }

    /// One recurrent step: `tanh(W_in·embed(label) + b + W_rec·h)`.
    pub fn predictor_step(&self, g: &mut Graph, label: usize, state: Option<Var>) -> Result<Var> {
        let table = g.param(&self.params, &self.label_embed)?;
        let e = g.gather_rows(table, &[label])?;
        let mut h = self.rnn_in.forward(g, &self.params, e)?;
        if let Some(s) = state {
            let r = self.rnn_rec.forward(g, &self.params, s)?;
            h = g.add(h, r)?;
        }
        g.tanh(h)
    }

    /// Prediction states after the start symbol and after each label: (U+1)×P.
    pub fn predictor(&self, g: &mut Graph, labels: &[usize]) -> Result<Var> {
        let mut states = Vec::with_capacity(labels.len() + 1);
        let mut h = self.predictor_step(g, self.config.blank(), None)?;
        states.push(h);
        for &l in labels {
            h = self.predictor_step(g, l, Some(h))?;
            states.push(h);
        }
        if states.len() == 1 {
            Ok(h)
        } else {
            g.concat_rows(&states)
        }
    }

    /// Joint logits for every (frame, prediction state) pair, row `t·(U+1) + u`.
    pub fn joint(&self, g: &mut Graph, enc: Var, pred: Var) -> Result<Var> {
        let a = self.joint_enc.forward(g, &self.params, enc)?;
        let b = self.joint_pred.forward(g, &self.params, pred)?;
        let s = g.outer_add_rows(a, b)?;
        let h = g.tanh(s)?;
        self.joint_out.forward(g, &self.params, h)
    }

    /// Transducer loss of one utterance, with optional feature augmentation.
    pub fn utterance_loss(&self, g: &mut Graph, utt: &Utterance, features: Option<&Tensor>) -> Result<Var> {
        if utt.labels.is_empty() {
            return Err(Error::invalid("training utterances need at least one label"));
        }
        if let Some(bad) = utt.labels.iter().find(|&&l| l >= self.config.vocab) {
            return Err(Error::invalid(format!("label {bad} outside the {}-symbol vocabulary", self.config.vocab)));
        }
        let enc = self.encode(g, features.unwrap_or(&utt.features.patches), utt.env.as_ref())?;
        let frames = g.shape(enc)[0];
        let pred = self.predictor(g, &utt.labels)?;
        let logits = self.joint(g, enc, pred)?;
        rnnt_loss(g, logits, frames, &utt.labels)
    }

    /// One Adam step on the mean loss of `utts`, augmenting each
    /// utterance's features first when an [`Augmenter`] is given.
    pub fn train_step(&mut self, utts: &[Utterance], opt: &Adam, mut augment: Option<&mut Augmenter>) -> Result<f64> {
        if utts.is_empty() {
            return Err(Error::invalid("train_step needs at least one utterance"));
        }
        let scale = 1.0 / utts.len() as f64;
        let mut loss = 0.0;
        self.params.zero_grad();
        for utt in utts {
            let feats = match augment.as_deref_mut() {
                Some(a) => {
                    let p = a.policy.clamped_to(utt.features.len());
                    Some(specaugment(&utt.features.patches, &p, &mut a.rng)?)
                }
                None => None,
            };
            let mut g = Graph::new();
            let l = self.utterance_loss(&mut g, utt, feats.as_ref())?;
            loss += scale * g.value(l).item();
            let grads = g.backward(l)?;
            self.params.accumulate_scaled(&grads, scale)?;
        }
        self.params.adam_step(opt)?;
        Ok(loss)
    }

    /// Loss without gradients.
    pub fn eval_loss(&self, utt: &Utterance) -> Result<f64> {
        let mut g = Graph::inference();
        let l = self.utterance_loss(&mut g, utt, None)?;
        Ok(g.value(l).item())
    }

    /// Standard greedy transducer search: on each frame emit argmax labels
    /// until blank wins, at most [`MAX_SYMBOLS_PER_FRAME`] per frame.
    pub fn greedy_decode(&self, features: &AudioPatchSeq, env: Option<&EnvEmbeddings>) -> Result<Vec<usize>> {
        let mut g = Graph::inference();
        let enc = self.encode(&mut g, &features.patches, env)?;
        let enc_proj = self.joint_enc.forward(&mut g, &self.params, enc)?;
        let frames = g.shape(enc)[0];
        let blank = self.config.blank();
        let mut out = Vec::new();
        let mut state = self.predictor_step(&mut g, blank, None)?;
        let mut pred_proj = self.joint_pred.forward(&mut g, &self.params, state)?;
        for t in 0..frames {
            let a = g.slice_rows(enc_proj, t, 1)?;
            for _ in 0..MAX_SYMBOLS_PER_FRAME {
                let s = g.add(a, pred_proj)?;
                let h = g.tanh(s)?;
                let logits = self.joint_out.forward(&mut g, &self.params, h)?;
                let row = g.value(logits).data();
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                if best == blank {
                    break;
                }
                out.push(best);
                state = self.predictor_step(&mut g, best, Some(state))?;
                pred_proj = self.joint_pred.forward(&mut g, &self.params, state)?;
            }
        }
        Ok(out)
    }
}

/// Fusion model and its parity baseline, initialised from the same seed so
/// every shared parameter starts identical.
pub fn build_models(config: &ConformerConfig, seed: u64) -> Result<(Transducer, Transducer)> {
    let fusion = Transducer::new(
        ConformerConfig {
            fusion_mode: FusionMode::CrossAttention,
            ..config.clone()
        },
        seed,
    )?;
    let baseline = Transducer::new(
        ConformerConfig {
            fusion_mode: FusionMode::SelfAttentionBaseline,
            ..config.clone()
        },
        seed,
    )?;
    Ok((fusion, baseline))
}

#[cfg(test)]
#[path = "model_tests.rs"]
mod tests;
