//! Splits a clip into 3x16x16 tubelets.

use avfusion::features::{extract_video_patches, prepare_clip, VideoClip, VIDEO_PATCH_DIM};
use avfusion::tensor::Tensor;

fn main() -> avfusion::Result<()> {
    // 12 frames at 24 FPS, 48x64, a horizontal gradient
    let (f, h, w) = (12, 48, 64);
    let data = (0..f * h * w * 3).map(|i| ((i / 3) % w) as f64 / w as f64).collect();
    let clip = VideoClip::new(Tensor::new(vec![f, h, w, 3], data)?, 24.0)?;

    let direct = extract_video_patches(&clip)?;
    println!("direct: grid {:?}, {} patches of dim {}", direct.grid, direct.len(), VIDEO_PATCH_DIM);
    for i in [0, 1, direct.len() - 1] {
        println!("  patch {i} at (step, spatial) {:?}", direct.position(i));
    }

    // resample to 6 FPS, resize and crop to 256x256, whole tubelets
    let prepared = prepare_clip(&clip)?;
    let full = extract_video_patches(&prepared)?;
    println!("prepared {:?} -> grid {:?}", prepared.dims(), full.grid);
    Ok(())
}
