//! Deterministic synthetic audio-visual corpus.
//!
//! Each utterance spells 3 to 10 symbols from an 8-letter alphabet, one
//! 100 ms tone per symbol. An environment id picks an additive noise type
//! and the tint of a short video clip recorded alongside.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::features::{read_clip, read_wav, write_raw_tensor, write_wav, AudioWave, VideoClip, SAMPLE_RATE};
use crate::rng;
use crate::tensor::Tensor;

pub const SYMBOLS: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];
pub const SYMBOL_SECS: f64 = 0.1;
pub const GAP_SECS: f64 = 0.02;
pub const EDGE_SECS: f64 = 0.1;
pub const FADE_SECS: f64 = 0.01;
pub const TONE_AMPLITUDE: f64 = 0.3;
pub const NUM_ENVIRONMENTS: usize = 4;
pub const CLIP_FRAMES: usize = 3;
pub const CLIP_SIZE: usize = 32;
pub const CLIP_FPS: f64 = 6.0;
pub const MANIFEST: &str = "manifest.tsv";

/// Tone frequency of symbol `i`: 500, 700, ..., 1900 Hz.
pub fn symbol_freq(i: usize) -> f64 {
    500.0 + 200.0 * i as f64
}

pub fn symbol_id(s: &str) -> Option<usize> {
    SYMBOLS.iter().position(|v| *v == s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    None,
    White,
    Hum,
    Crackle,
}

impl Noise {
    pub fn for_env(env: usize) -> Noise {
        [Noise::None, Noise::White, Noise::Hum, Noise::Crackle][env % NUM_ENVIRONMENTS]
    }
}

const ENV_COLORS: [[f64; 3]; NUM_ENVIRONMENTS] = [[0.8, 0.2, 0.2], [0.2, 0.8, 0.2], [0.2, 0.2, 0.8], [0.8, 0.8, 0.2]];

#[derive(Debug, Clone)]
pub struct SyntheticUtterance {
    pub id: String,
    pub wave: AudioWave,
    pub labels: Vec<usize>,
    pub env: usize,
    pub clip: VideoClip,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub utterances: Vec<SyntheticUtterance>,
    pub seed: u64,
}

/// Renders `labels` as tones with short fades, separated by silent gaps.
pub fn render_tones(labels: &[usize]) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let edge = (EDGE_SECS * sr) as usize;
    let tone = (SYMBOL_SECS * sr) as usize;
    let gap = (GAP_SECS * sr) as usize;
    let fade = (FADE_SECS * sr) as usize;
    let mut out = vec![0.0; edge];
    for (k, &l) in labels.iter().enumerate() {
        if k > 0 {
            out.extend(std::iter::repeat(0.0).take(gap));
        }
        let f = symbol_freq(l);
        for i in 0..tone {
            let ramp = (i.min(tone - 1 - i) as f64 / fade as f64).min(1.0);
            out.push(TONE_AMPLITUDE * ramp * (2.0 * PI * f * i as f64 / sr).sin());
        }
    }
    out.extend(std::iter::repeat(0.0).take(edge));
    out
}

fn add_noise(samples: &mut [f64], noise: Noise, r: &mut rng::Rng) {
    let sr = SAMPLE_RATE as f64;
    match noise {
        Noise::None => {}
        Noise::White => samples.iter_mut().for_each(|s| *s += r.gen_range(-0.05..0.05)),
        Noise::Hum => {
            let phase = r.gen_range(0.0..2.0 * PI);
            for (i, s) in samples.iter_mut().enumerate() {
                let t = i as f64 / sr;
                *s += 0.08 * (2.0 * PI * 120.0 * t + phase).sin() + 0.04 * (2.0 * PI * 240.0 * t + phase).sin();
            }
        }
        Noise::Crackle => {
            for s in samples.iter_mut() {
                if r.gen::<f64>() < 0.003 {
                    *s += r.gen_range(-0.4..0.4);
                }
            }
        }
    }
    samples.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
}

/// Three frames tinted by the environment color, with slight pixel noise.
pub fn render_clip(env: usize, r: &mut rng::Rng) -> Result<VideoClip> {
    let color = ENV_COLORS[env % NUM_ENVIRONMENTS];
    let n = CLIP_FRAMES * CLIP_SIZE * CLIP_SIZE;
    let mut data = Vec::with_capacity(n * 3);
    for _ in 0..n {
        for c in color {
            data.push((c + r.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
        }
    }
    VideoClip::new(Tensor::new(vec![CLIP_FRAMES, CLIP_SIZE, CLIP_SIZE, 3], data)?, CLIP_FPS)
}

pub fn generate_synthetic_corpus(n: usize, seed: u64) -> Result<SyntheticCorpus> {
    if n == 0 {
        return Err(Error::invalid("corpus needs at least one utterance"));
    }
    let mut utterances = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::indexed(seed, "corpus", i as u64);
        let len = r.gen_range(3..=10);
        let labels: Vec<usize> = (0..len).map(|_| r.gen_range(0..SYMBOLS.len())).collect();
        let env = r.gen_range(0..NUM_ENVIRONMENTS);
        let mut samples = render_tones(&labels);
        add_noise(&mut samples, Noise::for_env(env), &mut r);
        utterances.push(SyntheticUtterance {
            id: format!("utt{i:04}"),
            wave: AudioWave::new(samples, SAMPLE_RATE)?,
            labels,
            env,
            clip: render_clip(env, &mut r)?,
        });
    }
    Ok(SyntheticCorpus { utterances, seed })
}

pub fn labels_to_text(labels: &[usize]) -> String {
    labels.iter().map(|&l| SYMBOLS[l]).collect::<Vec<_>>().join(" ")
}

pub fn text_to_labels(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| symbol_id(w).ok_or_else(|| Error::invalid(format!("unknown symbol `{w}`"))))
        .collect()
}

impl SyntheticCorpus {
    /// Writes `audio/<id>.wav`, `video/<id>.clip` and a manifest with
    /// columns `audio_path, labels, clip_path, env`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["audio", "video"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let mut manifest = String::new();
        for u in &self.utterances {
            let audio = format!("audio/{}.wav", u.id);
            let video = format!("video/{}.clip", u.id);
            write_wav(&dir.join(&audio), &u.wave)?;
            write_raw_tensor(&dir.join(&video), &u.clip.frames)?;
            manifest.push_str(&format!("{audio}\t{}\t{video}\t{}\n", labels_to_text(&u.labels), u.env));
        }
        let path = dir.join(MANIFEST);
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(manifest.as_bytes()))
            .map_err(|e| Error::io(&path, e))
    }
}

/// One manifest row loaded from disk.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub id: String,
    pub audio: AudioWave,
    pub labels: Vec<usize>,
    pub clip: Option<VideoClip>,
    pub env: Option<usize>,
}

fn entry_id(audio_path: &str) -> String {
    Path::new(audio_path)
        .file_stem()
        .map_or_else(|| audio_path.to_string(), |s| s.to_string_lossy().into_owned())
}

/// Reads a manifest (`audio_path<TAB>labels[<TAB>clip_path<TAB>env]`);
/// paths are relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<CorpusEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map_or_else(PathBuf::new, Path::to_path_buf);
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |d: &str| Error::corrupt(path, format!("line {}: {d}", n + 1));
        if cols.len() != 2 && cols.len() != 4 {
            return Err(bad("expected 2 or 4 tab-separated columns"));
        }
        let labels = text_to_labels(cols[1]).map_err(|e| bad(&e.to_string()))?;
        let (clip, env) = if cols.len() == 4 {
            let env = cols[3].parse().map_err(|_| bad("environment id is not an integer"))?;
            (Some(read_clip(&base.join(cols[2]), CLIP_FPS)?), Some(env))
        } else {
            (None, None)
        };
        out.push(CorpusEntry {
            id: entry_id(cols[0]),
            audio: read_wav(&base.join(cols[0]))?,
            labels,
            clip,
            env,
        });
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("{} lists no utterances", path.display())));
    }
    Ok(out)
}

pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusEntry>> {
    load_manifest(&dir.join(MANIFEST))
}
