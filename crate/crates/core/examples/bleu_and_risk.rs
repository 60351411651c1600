//! Corpus BLEU, smoothed sentence BLEU and the expected-risk loss with its
//! gradient on hand-sized inputs.

use recgraph::bleu::{corpus_bleu, expected_risk_loss, sentence_bleu_smoothed, NGramStats, RiskSentence};

fn main() -> recgraph::Result<()> {
    let cand: Vec<&str> = "a b c d".split(' ').collect();
    let refr: Vec<&str> = "a b c d e".split(' ').collect();
    let s = NGramStats::new(&cand, &refr);
    println!("matches {:?} of {:?}, brevity penalty {:.4}", s.matched, s.total, s.brevity_penalty());
    println!("corpus BLEU {:.4}", corpus_bleu(std::slice::from_ref(&cand), std::slice::from_ref(&refr))?);
    println!("smoothed sentence BLEU of 'a b' vs 'a c': {:.4}", sentence_bleu_smoothed(&["a", "b"], &["a", "c"]));

    let reference = vec![4, 5, 6, 7];
    let sentence = RiskSentence {
        hyps: vec![reference.clone(), vec![4, 5, 6], vec![9, 9]],
        scores: vec![-1.0, -1.5, -0.5],
        reference,
    };
    let (loss, grads) = expected_risk_loss(&[sentence])?;
    println!("expected risk {loss:.4}, d loss / d score {:?}", grads[0].iter().map(|g| format!("{g:.4}")).collect::<Vec<_>>());
    Ok(())
}
