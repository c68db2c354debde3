//! Corpus, tokenizer, pretraining, fusion ASR training and evaluation in one
//! working directory.
//!
//! cargo run --release --example end_to_end -- /tmp/avfusion-run

use std::path::PathBuf;

use avfusion::pipeline::config::{load_config, RunConfig, Stage};
use avfusion::pipeline::corpus::generate_synthetic_corpus;
use avfusion::pipeline::stages::{run_asr_training, run_eval, run_pretraining, run_tokenize, Logger};

fn main() -> avfusion::Result<()> {
    let root = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("avfusion-run"), PathBuf::from);
    generate_synthetic_corpus(16, 1)?.write(&root.join("data"))?;

    let mut cfg = RunConfig::toy("data");
    cfg.paths.work = "work".into();
    cfg.paths.checkpoints = "checkpoints".into();
    cfg.max_steps = 600;
    cfg.log_every = 100;
    cfg.eval_every = 200;
    cfg.write(&root.join("pretrain.cfg"))?;
    let cfg = load_config(&root.join("pretrain.cfg"))?;

    let mut log = Logger::stdout();
    run_tokenize(&cfg, &mut log)?;
    let pre = run_pretraining(&cfg, &mut log)?;

    let asr = RunConfig {
        stage: Stage::TrainAsr,
        max_steps: 1500,
        batch_size: 4,
        eval_every: 100,
        stop_at_zero_wer: true,
        paths: avfusion::pipeline::config::Paths { avbert: Some(pre.checkpoint), ..cfg.paths.clone() },
        ..cfg
    };
    asr.validate()?;
    let trained = run_asr_training(&asr, &mut log)?;
    let report = run_eval(&asr, &trained.checkpoint, &mut log)?;
    for (id, r, h) in report.hypotheses.iter().take(4) {
        println!("{id}: \"{r}\" -> \"{h}\"");
    }
    Ok(())
}
