//! Layer-wise pretraining of a 4-layer encoder on the reversal task: each
//! epoch adds one bidirectional layer pair and keeps every trained weight.
//!
//! cargo run --release --example pretraining

use recgraph::experiment::{run_toy, RunLimits, ToySetup};
use recgraph::presets::AttentionModel;
use recgraph::train::{encoder_pairs, TrainOptions, Trainer};

fn main() -> recgraph::Result<()> {
    let setup = ToySetup::reverse();
    let data = setup.generate()?;
    let cfg = AttentionModel::small(64, 4).config()?;
    let opts = TrainOptions { word_budget: 200, dropout: false, pretrain: Some((2, 1)), ..Default::default() };

    let trainer = Trainer::new(cfg.clone(), setup.dims(), opts.clone())?;
    for stage in 0..trainer.stages() {
        let pairs = encoder_pairs(&trainer.stage_config(stage)?)?;
        println!("stage {stage}: {} encoder layer pairs, top {:?}", pairs.len(), pairs.last().unwrap());
    }

    let limits = RunLimits { max_epochs: 5, beam: 4, stop_at: None };
    run_toy(cfg, &setup, &data, opts, limits, |e| {
        println!(
            "epoch {}  depth {:?}  full {}  train {:.4}  cv {:.4}  bleu {:.2}",
            e.report.epoch, e.report.encoder_depth, e.full_depth, e.report.train_loss, e.report.cv_loss, e.bleu
        );
    })?;
    Ok(())
}
