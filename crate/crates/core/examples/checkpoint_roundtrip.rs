//! Saves and restores a transducer with its optimizer state.

use avfusion::asr::{ConformerConfig, Transducer};
use avfusion::pipeline::checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};

fn main() -> avfusion::Result<()> {
    let model = Transducer::new(ConformerConfig::toy(), 8)?;
    let path = std::env::temp_dir().join("avfusion-demo.ckpt");
    let ck = Checkpoint::of_transducer(&model, 42, "run.seed = 8\n");
    save_checkpoint(&ck, &path)?;

    let back = load_checkpoint(&path)?;
    println!("{} checkpoint at step {}, {} tensors", back.kind, back.step, back.params.len());
    let restored = back.restore_transducer(ConformerConfig::toy())?;
    println!(
        "hash {:016x} -> {:016x}, bytes identical: {}",
        model.params.fingerprint(),
        restored.params.fingerprint(),
        encode_checkpoint(&back) == std::fs::read(&path).unwrap_or_default()
    );

    let wrong = ConformerConfig { model_dim: 32, ..ConformerConfig::toy() };
    match back.restore_transducer(wrong) {
        Err(e) => println!("mismatched config: {e}"),
        Ok(_) => unreachable!("layouts differ"),
    }
    Ok(())
}
