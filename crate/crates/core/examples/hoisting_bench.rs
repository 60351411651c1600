//! Times a training epoch and a beam decoding pass with loop-invariant
//! hoisting on and off.
//!
//! cargo run --release --example hoisting_bench -- [hidden] [sentences]

use recgraph::bench::{bench_config, format_bench, run_bench, BenchOptions};

fn main() -> recgraph::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let opts = BenchOptions {
        hidden: args.first().copied().unwrap_or(64),
        sentences: args.get(1).copied().unwrap_or(300),
        ..Default::default()
    };
    let rows = run_bench(&bench_config(opts.hidden)?, &opts, &[true, false])?;
    print!("{}", format_bench(&rows));
    println!("epoch time ratio (on/off): {:.3}", rows[0].train_epoch_secs / rows[1].train_epoch_secs);
    Ok(())
}
