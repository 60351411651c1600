//! Trains the attention model on the toy reverse task and reports held-out
//! BLEU after every epoch.
//!
//! cargo run --release --example toy_reverse -- [hidden] [epochs] [word_budget]

use recgraph::experiment::{run_toy, RunLimits, ToySetup};
use recgraph::presets::AttentionModel;
use recgraph::train::TrainOptions;

fn main() -> recgraph::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let hidden = args.first().copied().unwrap_or(64);
    let epochs = args.get(1).copied().unwrap_or(15);
    let budget = args.get(2).copied().unwrap_or(200);

    let setup = ToySetup::reverse();
    let data = setup.generate()?;
    let cfg = AttentionModel::small(hidden, 2).config()?;
    let opts = TrainOptions { word_budget: budget, dropout: false, ..Default::default() };
    let limits = RunLimits { max_epochs: epochs, beam: 12, stop_at: Some(99.0) };
    let out = run_toy(cfg, &setup, &data, opts, limits, |e| {
        println!(
            "epoch {:2}  train {:.4}  cv {:.4}  lr {:.2e}  bleu {:6.2}  {:.1}s",
            e.report.epoch, e.report.train_loss, e.report.cv_loss, e.report.lr, e.bleu, e.report.seconds
        );
    })?;
    println!("first epoch with BLEU >= 99: {:?}", out.first_reaching(99.0));
    Ok(())
}
