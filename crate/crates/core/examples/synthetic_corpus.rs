//! Generates the tone corpus and writes it to a directory.
//!
//! cargo run --release --example synthetic_corpus -- /tmp/tones 32

use avfusion::pipeline::corpus::{generate_synthetic_corpus, labels_to_text, load_corpus, symbol_freq, SYMBOLS};

fn main() -> avfusion::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| std::env::temp_dir().join("avfusion-tones").display().to_string());
    let n = args.next().map_or(16, |s| s.parse().expect("utterance count"));

    for (i, s) in SYMBOLS.iter().enumerate() {
        println!("symbol {s}: {} Hz", symbol_freq(i));
    }
    let corpus = generate_synthetic_corpus(n, 7)?;
    corpus.write(out.as_ref())?;
    for e in load_corpus(out.as_ref())?.iter().take(5) {
        println!(
            "{}  {:.2}s  env={}  \"{}\"",
            e.id,
            e.audio.duration_secs(),
            e.env.unwrap_or(0),
            labels_to_text(&e.labels)
        );
    }
    println!("wrote {n} utterances to {out}");
    Ok(())
}
