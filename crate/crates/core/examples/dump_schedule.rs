//! Parses a network description and prints where each layer runs relative
//! to the decoder loop, with and without loop-invariant hoisting.
//!
//! cargo run --release --example dump_schedule -- [config.json]

use recgraph::config::parse_network_config;
use recgraph::graph::{compile_with, CompileOptions, ExecMode, ModelDims};

fn main() -> recgraph::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/attention_wmt.json").to_string());
    let cfg = parse_network_config(&std::fs::read_to_string(&path)?)?;
    let dims = ModelDims { src_vocab: 100, trg_vocab: 100 };
    for mode in [ExecMode::Train, ExecMode::Decode] {
        for hoist in [true, false] {
            let g = compile_with(&cfg, mode, dims, CompileOptions { hoist })?;
            println!("{}", g.dump_schedule());
        }
    }
    Ok(())
}
