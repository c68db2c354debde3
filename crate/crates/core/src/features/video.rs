use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::io::{decode, encode, read_line, DType};
use crate::tensor::Tensor;

pub const TUBELET_FRAMES: usize = 3;
pub const TUBELET_SIZE: usize = 16;
pub const CHANNELS: usize = 3;
pub const VIDEO_PATCH_DIM: usize = TUBELET_FRAMES * TUBELET_SIZE * TUBELET_SIZE * CHANNELS;
pub const TARGET_FPS: f64 = 6.0;
pub const TARGET_SIZE: usize = 256;

/// F×H×W×3 frames with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub frame_rate: f64,
}

impl VideoClip {
    pub fn new(frames: Tensor, frame_rate: f64) -> Result<Self> {
        match frames.shape() {
            [_, _, _, c] if *c == CHANNELS => {}
            s => return Err(Error::shape("video_clip", format!("expected F×H×W×3, got {s:?}"))),
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("video values must lie in [0, 1]"));
        }
        Ok(Self { frames, frame_rate })
    }

    /// (frames, height, width)
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2])
    }
}

/// Tubelet patches in (time, row, col) order.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPatchSeq {
    pub patches: Tensor,
    /// (time_steps, rows, cols)
    pub grid: (usize, usize, usize),
}

impl VideoPatchSeq {
    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (time index, spatial index) of patch `i`.
    pub fn position(&self, i: usize) -> (usize, usize) {
        let per_step = self.grid.1 * self.grid.2;
        (i / per_step, i % per_step)
    }
}

/// Nearest-frame frame-rate conversion.
pub fn resample_frame_rate(clip: &VideoClip, fps: f64) -> Result<VideoClip> {
    if fps <= 0.0 || clip.frame_rate <= 0.0 {
        return Err(Error::invalid("frame rates must be positive"));
    }
    let (f, h, w) = clip.dims();
    let n_out = ((f as f64) * fps / clip.frame_rate).floor().max(1.0) as usize;
    let frame_len = h * w * CHANNELS;
    let mut data = Vec::with_capacity(n_out * frame_len);
    for i in 0..n_out {
        let src = ((i as f64 * clip.frame_rate / fps).round() as usize).min(f - 1);
        data.extend_from_slice(&clip.frames.data()[src * frame_len..(src + 1) * frame_len]);
    }
    VideoClip::new(Tensor::new(vec![n_out, h, w, CHANNELS], data)?, fps)
}

/// Bilinearly resizes the short side to `size`, then takes the centered size×size crop.
pub fn center_crop_resize(clip: &VideoClip, size: usize) -> Result<VideoClip> {
    let (f, h, w) = clip.dims();
    if h == 0 || w == 0 || size == 0 {
        return Err(Error::invalid("empty frame"));
    }
    let scale = size as f64 / h.min(w) as f64;
    let (rh, rw) = (((h as f64) * scale).round() as usize, ((w as f64) * scale).round() as usize);
    let (top, left) = ((rh - size) / 2, (rw - size) / 2);
    let src = clip.frames.data();
    let at = |fi: usize, y: usize, x: usize, c: usize| src[((fi * h + y) * w + x) * CHANNELS + c];
    let mut out = Vec::with_capacity(f * size * size * CHANNELS);
    for fi in 0..f {
        for oy in 0..size {
            let sy = (((oy + top) as f64 + 0.5) / scale - 0.5).clamp(0.0, (h - 1) as f64);
            let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
            let y1 = (y0 + 1).min(h - 1);
            for ox in 0..size {
                let sx = (((ox + left) as f64 + 0.5) / scale - 0.5).clamp(0.0, (w - 1) as f64);
                let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
                let x1 = (x0 + 1).min(w - 1);
                for c in 0..CHANNELS {
                    let top_row = at(fi, y0, x0, c) * (1.0 - fx) + at(fi, y0, x1, c) * fx;
                    let bottom_row = at(fi, y1, x0, c) * (1.0 - fx) + at(fi, y1, x1, c) * fx;
                    out.push(top_row * (1.0 - fy) + bottom_row * fy);
                }
            }
        }
    }
    VideoClip::new(Tensor::new(vec![f, size, size, CHANNELS], out)?, clip.frame_rate)
}

/// Drops trailing frames so the frame count is a multiple of the tubelet depth.
pub fn truncate_frames(clip: &VideoClip) -> Result<VideoClip> {
    let (f, h, w) = clip.dims();
    let keep = f - f % TUBELET_FRAMES;
    if keep == 0 {
        return Err(Error::invalid(format!("clip of {f} frames is shorter than one tubelet")));
    }
    let data = clip.frames.data()[..keep * h * w * CHANNELS].to_vec();
    VideoClip::new(Tensor::new(vec![keep, h, w, CHANNELS], data)?, clip.frame_rate)
}

/// Full-scale preprocessing: 6 FPS, short side 256, 256×256 center crop, whole tubelets.
pub fn prepare_clip(clip: &VideoClip) -> Result<VideoClip> {
    let c = resample_frame_rate(clip, TARGET_FPS)?;
    let c = center_crop_resize(&c, TARGET_SIZE)?;
    truncate_frames(&c)
}

/// Splits a clip into non-overlapping 3×16×16 tubelets over all channels,
/// each flattened in (frame, y, x, channel) order.
pub fn extract_video_patches(clip: &VideoClip) -> Result<VideoPatchSeq> {
    let (f, h, w) = clip.dims();
    if f == 0 || f % TUBELET_FRAMES != 0 || h % TUBELET_SIZE != 0 || w % TUBELET_SIZE != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "extract_video_patches",
            format!("{f}×{h}×{w} is not divisible into 3×16×16 tubelets"),
        ));
    }
    let grid = (f / TUBELET_FRAMES, h / TUBELET_SIZE, w / TUBELET_SIZE);
    let n = grid.0 * grid.1 * grid.2;
    let src = clip.frames.data();
    let mut out = Vec::with_capacity(n * VIDEO_PATCH_DIM);
    for ts in 0..grid.0 {
        for r in 0..grid.1 {
            for c in 0..grid.2 {
                for df in 0..TUBELET_FRAMES {
                    let fi = ts * TUBELET_FRAMES + df;
                    for dy in 0..TUBELET_SIZE {
                        let y = r * TUBELET_SIZE + dy;
                        let start = ((fi * h + y) * w + c * TUBELET_SIZE) * CHANNELS;
                        out.extend_from_slice(&src[start..start + TUBELET_SIZE * CHANNELS]);
                    }
                }
            }
        }
    }
    Ok(VideoPatchSeq {
        patches: Tensor::new(vec![n, VIDEO_PATCH_DIM], out)?,
        grid,
    })
}

/// Writes a raw tensor file: header `ndim d0 ... dn`, then little-endian f32 values.
pub fn write_raw_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = t.shape().len().to_string();
    for d in t.shape() {
        header.push(' ');
        header.push_str(&d.to_string());
    }
    header.push('\n');
    let mut payload = Vec::with_capacity(t.numel() * 4);
    encode(t.data(), DType::F32, &mut payload);
    w.write_all(header.as_bytes())
        .and_then(|_| w.write_all(&payload))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_raw_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_line(&mut r, path)?;
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(|v| v.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::corrupt(path, format!("bad header `{header}`")))?;
    let (&ndim, dims) = nums
        .split_first()
        .ok_or_else(|| Error::corrupt(path, "empty header"))?;
    if dims.len() != ndim {
        return Err(Error::corrupt(path, format!("header declares {ndim} dims, lists {}", dims.len())));
    }
    let n: usize = dims.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::corrupt(path, "truncated payload"))?;
    Tensor::new(dims.to_vec(), decode(&payload, DType::F32))
}

pub fn read_clip(path: &Path, frame_rate: f64) -> Result<VideoClip> {
    VideoClip::new(read_raw_tensor(path)?, frame_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(f: usize, h: usize, w: usize) -> VideoClip {
        let n = f * h * w * 3;
        let data = (0..n).map(|i| i as f64 / n as f64).collect();
        VideoClip::new(Tensor::new(vec![f, h, w, 3], data).unwrap(), 6.0).unwrap()
    }

    #[test]
    fn full_size_clip_patch_count() {
        let p = extract_video_patches(&clip(6, 256, 256)).unwrap();
        assert_eq!(p.patches.shape(), &[512, 2304]);
        assert_eq!(p.grid, (2, 16, 16));
        assert_eq!(p.position(300), (1, 44));
    }

    #[test]
    fn single_tubelet_is_the_flattened_clip() {
        let c = clip(3, 16, 16);
        let p = extract_video_patches(&c).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.patches.data(), c.frames.data());
    }

    #[test]
    fn indivisible_frames_rejected() {
        assert!(extract_video_patches(&clip(4, 256, 256)).is_err());
        assert!(extract_video_patches(&clip(3, 20, 16)).is_err());
    }

    #[test]
    fn patches_partition_the_clip() {
        let c = clip(6, 32, 48);
        let p = extract_video_patches(&c).unwrap();
        let mut seen: Vec<f64> = p.patches.data().to_vec();
        seen.sort_by(f64::total_cmp);
        let mut orig = c.frames.data().to_vec();
        orig.sort_by(f64::total_cmp);
        // values are all distinct, so equal multisets means each appears once
        assert_eq!(seen, orig);
    }

    #[test]
    fn preprocessing_reaches_256_square() {
        let raw = VideoClip::new(Tensor::filled(&[25, 48, 64, 3], 0.5), 25.0).unwrap();
        let c = prepare_clip(&raw).unwrap();
        let (f, h, w) = c.dims();
        assert_eq!((h, w), (256, 256));
        assert_eq!(f % 3, 0);
        assert_eq!(f, 6);
        assert!(c.frames.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn raw_tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.raw");
        let c = clip(3, 16, 16);
        write_raw_tensor(&path, &c.frames).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"4 3 16 16 3\n"));
        let back = read_raw_tensor(&path).unwrap();
        assert_eq!(back.shape(), c.frames.shape());
        for (a, b) in back.data().iter().zip(c.frames.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
