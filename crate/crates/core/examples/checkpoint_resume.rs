//! Trains one epoch, writes a checkpoint, reloads it and trains a second
//! epoch; the result matches two uninterrupted epochs bit for bit.

use recgraph::data::{generate_toy_task, ToyKind};
use recgraph::graph::ModelDims;
use recgraph::presets::AttentionModel;
use recgraph::train::{load_checkpoint, save_checkpoint, TrainOptions, Trainer};

fn main() -> recgraph::Result<()> {
    let train = generate_toy_task(ToyKind::Copy, 12, 1, 8, 500, 1)?;
    let cv = generate_toy_task(ToyKind::Copy, 12, 1, 8, 50, 2)?;
    let dims = ModelDims { src_vocab: 12, trg_vocab: 12 };
    let cfg = AttentionModel::small(16, 1).config()?;
    let opts = TrainOptions { word_budget: 200, ..Default::default() };

    let mut t = Trainer::new(cfg.clone(), dims, opts.clone())?;
    let mut straight = t.init_state()?;
    t.run_epoch(&mut straight, &train, &cv)?;
    let dir = std::env::temp_dir().join(format!("recgraph-ckpt-{}", std::process::id()));
    let manifest = t.graph(straight.stage)?.param_manifest.clone();
    save_checkpoint(&dir, &straight, &t.stage_config(straight.stage)?, &manifest, dims)?;
    t.run_epoch(&mut straight, &train, &cv)?;

    let ck = load_checkpoint(&dir)?;
    println!("loaded {} parameters after {} updates from {}", ck.state.params.len(), ck.state.updates, dir.display());
    let mut resumed = ck.state;
    Trainer::new(cfg, dims, opts)?.run_epoch(&mut resumed, &train, &cv)?;
    println!("resumed == uninterrupted: {}", resumed.params == straight.params);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
