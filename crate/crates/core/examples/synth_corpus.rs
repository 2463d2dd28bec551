//! Generate the restaurant and hotel synthetic corpora, print their label
//! statistics and write them to disk.
//!
//! cargo run --release --example synth_corpus -- [OUT_DIR]

use std::path::PathBuf;

use temprank::corpus::{frequency_buckets, generate_synthetic, split_stats, SynthConfig};

fn main() -> temprank::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("temprank_synth"));
    for (name, config) in [("restaurant", SynthConfig::restaurant(7)), ("hotel", SynthConfig::hotel(7))] {
        let corpus = generate_synthetic(&config)?;
        let dir = out.join(name);
        corpus.save(&dir)?;
        println!("{name} -> {}", dir.display());
        for split in [&corpus.train, &corpus.dev, &corpus.test] {
            let s = split_stats(split, &corpus.schema);
            println!("  {:?}: {} sentences, {} labels, {:?}", split.name, s.examples, s.labels, s.per_polarity);
        }
        println!("  sample: {}", corpus.train.examples[0].text);
        for (cat, bucket) in frequency_buckets(&corpus.train, &corpus.schema).buckets {
            println!("  bucket {cat}: {bucket}");
        }
    }
    Ok(())
}
