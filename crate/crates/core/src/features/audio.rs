use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LENGTH: usize = 400; // 25 ms
pub const FRAME_SHIFT: usize = 160; // 10 ms
pub const FFT_SIZE: usize = 512;
pub const NUM_MEL_BINS: usize = 64;
pub const MEL_HIGH_HZ: f64 = 8000.0;
pub const LOG_FLOOR: f64 = 1e-10;
pub const STACK: usize = 3;
pub const PATCH_DIM: usize = STACK * NUM_MEL_BINS;
pub const CLIP_BOUND: f64 = 1.2;
pub const STD_FLOOR: f64 = 1e-6;

/// Mono waveform at 16 kHz with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioWave {
    samples: Vec<f64>,
}

impl AudioWave {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::invalid(format!(
                "expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz (use AudioWave::resampled)"
            )));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::invalid(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(Self { samples })
    }

    /// Linearly interpolates `samples` from `sample_rate` to 16 kHz.
    pub fn resampled(samples: &[f64], sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate 0"));
        }
        if sample_rate == SAMPLE_RATE || samples.len() < 2 {
            return Self::new(samples.to_vec(), SAMPLE_RATE);
        }
        let ratio = sample_rate as f64 / SAMPLE_RATE as f64;
        let n_out = ((samples.len() as f64) / ratio).round() as usize;
        let last = samples.len() - 1;
        let out = (0..n_out)
            .map(|i| {
                let pos = i as f64 * ratio;
                let j = (pos.floor() as usize).min(last);
                let frac = pos - j as f64;
                let next = samples[(j + 1).min(last)];
                samples[j] * (1.0 - frac) + next * frac
            })
            .collect();
        Self::new(out, SAMPLE_RATE)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

/// Reads a mono PCM16 WAV file, resampling to 16 kHz when needed.
pub fn read_wav(path: &Path) -> Result<AudioWave> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::invalid(format!(
            "{}: expected mono 16-bit PCM",
            path.display()
        )));
    }
    let samples: Vec<f64> = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<_, _>>()?;
    AudioWave::resampled(&samples, spec.sample_rate)
}

pub fn write_wav(path: &Path, wave: &AudioWave) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for s in wave.samples() {
        w.write_sample((s * 32767.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the one-sided power spectrum.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// NUM_MEL_BINS × (FFT_SIZE/2 + 1)
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new()
    }
}

impl MelFilterbank {
    pub fn new() -> Self {
        let bins = FFT_SIZE / 2 + 1;
        let mel_max = hz_to_mel(MEL_HIGH_HZ);
        let edges: Vec<f64> = (0..NUM_MEL_BINS + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (NUM_MEL_BINS + 1) as f64))
            .collect();
        let mut weights = vec![0.0; NUM_MEL_BINS * bins];
        for m in 0..NUM_MEL_BINS {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * bins + k] = w;
            }
        }
        Self {
            weights,
            centers_hz: edges[1..=NUM_MEL_BINS].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        let bins = FFT_SIZE / 2 + 1;
        for (m, o) in out.iter_mut().enumerate().take(NUM_MEL_BINS) {
            *o = self.weights[m * bins..(m + 1) * bins]
                .iter()
                .zip(power)
                .map(|(w, p)| w * p)
                .sum();
        }
    }
}

/// T×64 log mel-filterbank energies (25 ms frames every 10 ms).
#[derive(Debug, Clone, PartialEq)]
pub struct LfbeFrames {
    pub frames: Tensor,
}

impl LfbeFrames {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

pub fn num_frames(num_samples: usize) -> usize {
    if num_samples < FRAME_LENGTH {
        0
    } else {
        (num_samples - FRAME_LENGTH) / FRAME_SHIFT + 1
    }
}

/// Periodic Hann window of the analysis frame length.
fn hann() -> Vec<f64> {
    (0..FRAME_LENGTH)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / FRAME_LENGTH as f64).cos())
        .collect()
}

/// Frame-level feature extractor with a cached FFT plan and filterbank.
pub struct LfbeExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    mel: MelFilterbank,
}

impl Default for LfbeExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl LfbeExtractor {
    pub fn new() -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(FFT_SIZE),
            window: hann(),
            mel: MelFilterbank::new(),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.mel
    }

    /// One-sided power spectrum |X_k|² of the windowed frame starting at `start`.
    pub fn power_spectrum(&self, samples: &[f64], start: usize) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for (i, b) in buf.iter_mut().take(FRAME_LENGTH).enumerate() {
            b.re = samples[start + i] * self.window[i];
        }
        self.fft.process(&mut buf);
        buf[..FFT_SIZE / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn compute(&self, wave: &AudioWave) -> Result<LfbeFrames> {
        let s = wave.samples();
        let t = num_frames(s.len());
        if t == 0 {
            return Err(Error::invalid(format!(
                "audio of {} samples is shorter than one {FRAME_LENGTH}-sample frame",
                s.len()
            )));
        }
        let mut data = vec![0.0; t * NUM_MEL_BINS];
        for (f, row) in data.chunks_mut(NUM_MEL_BINS).enumerate() {
            let power = self.power_spectrum(s, f * FRAME_SHIFT);
            self.mel.apply(&power, row);
            row.iter_mut().for_each(|e| *e = e.max(LOG_FLOOR).ln());
        }
        Ok(LfbeFrames {
            frames: Tensor::new(vec![t, NUM_MEL_BINS], data)?,
        })
    }
}

/// Log mel-filterbank energies of `wave`.
pub fn compute_lfbe(wave: &AudioWave) -> Result<LfbeFrames> {
    LfbeExtractor::new().compute(wave)
}

/// T'×192 patches of three stacked frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioPatchSeq {
    pub patches: Tensor,
    pub whitened: bool,
}

impl AudioPatchSeq {
    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Concatenates non-overlapping groups of 3 frames; a trailing partial group is dropped.
pub fn stack_frames(frames: &LfbeFrames) -> Result<AudioPatchSeq> {
    let t = frames.num_frames();
    if t < STACK {
        return Err(Error::invalid(format!("need at least {STACK} frames, got {t}")));
    }
    let n = t / STACK;
    let data = frames.frames.data()[..n * PATCH_DIM].to_vec();
    Ok(AudioPatchSeq {
        patches: Tensor::new(vec![n, PATCH_DIM], data)?,
        whitened: false,
    })
}

/// Per-dimension global mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_whitener(rows: &Tensor) -> Result<Whitener> {
    let (n, d) = crate::tensor::as_matrix(rows, "fit_whitener")?;
    if n < 2 {
        return Err(Error::invalid(format!("whitener needs at least 2 rows, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        mean.iter_mut().zip(rows.row(r)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in 0..n {
        for (j, v) in rows.row(r).iter().enumerate() {
            var[j] += (v - mean[j]).powi(2);
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(Whitener { mean, std })
}

impl Whitener {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(x - mean) / std`, without clipping.
    pub fn standardize(&self, rows: &Tensor) -> Result<Tensor> {
        let (_, d) = crate::tensor::as_matrix(rows, "whiten")?;
        if d != self.dim() {
            return Err(Error::shape("whiten", format!("patch dim {d}, whitener dim {}", self.dim())));
        }
        let data = rows
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::new(rows.shape().to_vec(), data)
    }

    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        let d = self.dim();
        (
            Tensor::new(vec![d], self.mean.clone()).expect("dims agree"),
            Tensor::new(vec![d], self.std.clone()).expect("dims agree"),
        )
    }
}

/// Whitens then clamps every value to [-1.2, 1.2].
pub fn whiten_clip(patches: &AudioPatchSeq, w: &Whitener) -> Result<AudioPatchSeq> {
    let mut z = w.standardize(&patches.patches)?;
    z.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(-CLIP_BOUND, CLIP_BOUND));
    Ok(AudioPatchSeq {
        patches: z,
        whitened: true,
    })
}

/// Full audio front end: LFBE, stacking, and (optionally) whitening.
pub fn audio_patches(wave: &AudioWave, whitener: Option<&Whitener>) -> Result<AudioPatchSeq> {
    let stacked = stack_frames(&compute_lfbe(wave)?)?;
    match whitener {
        Some(w) => whiten_clip(&stacked, w),
        None => Ok(stacked),
    }
}
