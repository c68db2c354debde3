//! Word error rate with the substitution / insertion / deletion breakdown.

use avfusion::asr::{edit_counts, wer_str, EditCounts};

fn main() -> avfusion::Result<()> {
    let pairs = [
        ("the cat sat on the mat", "the cat sat on mat"),
        ("turn the lights off", "turn the light off please"),
        ("should i buy from the princess starfrost set royale high", "should i buy from the princess stare froset in we're all rawhide"),
    ];
    let mut pooled = EditCounts::default();
    for (r, h) in pairs {
        let rw: Vec<&str> = r.split_whitespace().collect();
        let hw: Vec<&str> = h.split_whitespace().collect();
        let c = edit_counts(&rw, &hw);
        pooled += c;
        println!("{:.3}  S{} I{} D{}  \"{h}\"", wer_str(r, h)?, c.subs, c.ins, c.dels);
    }
    println!("pooled {:.3} ({} errors / {} words)", pooled.wer(), pooled.errors(), pooled.ref_len);
    Ok(())
}
