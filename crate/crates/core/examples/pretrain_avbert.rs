//! Pretrains a toy AV-BERT on a handful of utterances and reports masked
//! token accuracy.
//!
//! cargo run --release --example pretrain_avbert -- 600

use avfusion::pipeline::config::RunConfig;
use avfusion::pipeline::corpus::generate_synthetic_corpus;
use avfusion::pipeline::stages::{run_pretraining, Logger};

fn main() -> avfusion::Result<()> {
    let steps = std::env::args().nth(1).map_or(300, |s| s.parse().expect("step count"));
    let dir = std::env::temp_dir().join("avfusion-pretrain-demo");
    generate_synthetic_corpus(8, 11)?.write(&dir.join("data"))?;

    let mut cfg = RunConfig::toy(dir.join("data"));
    cfg.paths.work = dir.join("work");
    cfg.paths.checkpoints = dir.join("ckpt");
    cfg.max_steps = steps;
    cfg.log_every = 50;
    cfg.eval_every = 100;
    let report = run_pretraining(&cfg, &mut Logger::stdout())?;
    if let Some(e) = report.last_eval {
        println!("masked accuracy {:.3} over {} positions", e.accuracy(), e.total);
    }
    Ok(())
}
