//! Compares tape gradients of a small attention model against central
//! finite differences in 64-bit arithmetic.

use recgraph::autodiff::{finite_diff_check, ParamStore};
use recgraph::graph::{compile, execute_training_graph, ExecMode, ExecOptions, LossKind, ModelDims, SeqBatch};
use recgraph::presets::AttentionModel;
use recgraph::rng::RngKey;

fn main() -> recgraph::Result<()> {
    let dims = ModelDims { src_vocab: 10, trg_vocab: 10 };
    let cfg = AttentionModel { label_smoothing: 0.1, ..AttentionModel::small(6, 1) }.config()?;
    let g = compile(&cfg, ExecMode::Train, dims)?;
    let params = ParamStore::<f64>::initialize(&g.param_manifest, RngKey::new(1, "init"));
    let batch = SeqBatch::new(&[vec![4, 5, 6], vec![7, 8]], &[vec![6, 5, 4, 0], vec![8, 7, 0]], 3)?;
    let opts = ExecOptions { dropout: false, key: RngKey::new(1, "batch"), loss: LossKind::SmoothedCe, label_smoothing: None };
    let worst = finite_diff_check(
        |p, tape| {
            let out = execute_training_graph(&g, &batch, p, &opts)?;
            *tape = out.tape;
            Ok(out.loss)
        },
        &params,
        1e-5,
    )?;
    let n: usize = g.param_manifest.iter().map(|s| s.numel()).sum();
    println!("{n} parameters, worst relative error {worst:.2e}");
    Ok(())
}
