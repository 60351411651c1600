//! Trains a small copy model for a few epochs, then prints the beam n-best lists for
//! a few sources at several beam sizes.

use recgraph::beam::{beam_search, BeamConfig};
use recgraph::data::{generate_toy_task, toy_vocab, ToyKind, EOS, PAD};
use recgraph::graph::ModelDims;
use recgraph::presets::AttentionModel;
use recgraph::train::{TrainOptions, Trainer};

fn main() -> recgraph::Result<()> {
    let vocab = 10;
    let train = generate_toy_task(ToyKind::Copy, vocab, 1, 6, 4000, 1)?;
    let cv = generate_toy_task(ToyKind::Copy, vocab, 1, 6, 50, 2)?;
    let dims = ModelDims { src_vocab: vocab, trg_vocab: vocab };
    let opts = TrainOptions { word_budget: 200, dropout: false, ..Default::default() };
    let mut t = Trainer::new(AttentionModel::small(32, 1).config()?, dims, opts)?;
    let mut state = t.init_state()?;
    for _ in 0..4 {
        let r = t.run_epoch(&mut state, &train, &cv)?;
        println!("epoch {} cv loss {:.4}", r.epoch, r.cv_loss);
    }
    let decode = t.decode_graph(&state)?;
    let words = toy_vocab(vocab);
    let sources = vec![vec![4, 5, 6], vec![9, 8, 7, 6, 5]];
    for beam in [1, 3, 6] {
        let nbest = beam_search(&decode, &state.params, &sources, EOS, PAD, &BeamConfig::with_beam(beam))?;
        for (src, hyps) in sources.iter().zip(&nbest.sentences) {
            println!("beam {beam}  source '{}'", words.decode(src));
            for h in hyps.iter().take(3) {
                println!("    {:8.4}  {}", h.score, words.decode(&h.tokens));
            }
        }
    }
    Ok(())
}
