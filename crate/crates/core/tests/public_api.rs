//! End-to-end use of the library through its public surface only.

use mnmt_core::corpus::{build_training_mixture, generate_synthetic_family, CorpusSizes, SyntheticFamilySpec};
use mnmt_core::decoding::{translate_corpus, DecodeConfig};
use mnmt_core::model::{
    load_checkpoint, save_checkpoint, train_step, Batch, Example, ModelState, Optimizer, TransformerConfig,
};
use mnmt_core::numerics::{AdamConfig, LrSchedule};
use mnmt_core::tagging::{apply_strategy, tag_token};
use mnmt_core::tokenizer::train_subwords;
use mnmt_core::LtStrategy;
use proptest::prelude::*;

fn family() -> mnmt_core::corpus::SyntheticFamily {
    generate_synthetic_family(&SyntheticFamilySpec {
        base_vocab_size: 50,
        num_languages: 3,
        corpus_sizes: CorpusSizes { train: 40, dev: 4, test: 6, mono: 100 },
        sentence_length_range: (3, 5),
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn overfit_save_reload_translate() {
    let fam = family();
    let tags: Vec<String> = fam.languages().iter().map(tag_token).collect();
    let text = fam.train.iter().flat_map(|c| c.pairs.iter().flat_map(|p| [p.src_text.as_str(), p.tgt_text.as_str()]));
    let tok = train_subwords(text, 50, 500, &tags).unwrap();

    let strategy = LtStrategy::TDec;
    let examples: Vec<Example> = build_training_mixture(&fam.train, fam.pivot(), 3)
        .unwrap()
        .iter()
        .take(32)
        .map(|p| {
            let t = apply_strategy(p, strategy);
            Example { src: tok.encode(&p.src_text, &t.src_prefix), tgt: tok.encode(&p.tgt_text, &t.tgt_prefix) }
        })
        .collect();
    let batch = Batch::from_examples(&examples.iter().collect::<Vec<_>>()).unwrap();

    let mut cfg = TransformerConfig::desk(tok.vocab_size());
    (cfg.d_model, cfg.ffn_dim, cfg.dropout) = (32, 64, 0.0);
    let mut state = ModelState::<f32>::init(cfg, 11).unwrap();
    let mut opt = Optimizer::new(&state, AdamConfig::default(), LrSchedule::Constant { lr: 3e-3 }).unwrap();
    let first = train_step(&mut state, &batch, &mut opt, 0.0, 0).unwrap();
    let mut last = first;
    for step in 1..60 {
        last = train_step(&mut state, &batch, &mut opt, 0.0, step).unwrap();
    }
    assert!(last < 0.5 * first, "loss {first} -> {last}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let back: ModelState<f32> = load_checkpoint(&path).unwrap();
    let (a, _) = state.forward(&batch, false).unwrap();
    let (b, _) = back.forward(&batch, false).unwrap();
    assert_eq!(a.data(), b.data());

    let langs = fam.languages();
    let srcs = fam.test.column(&langs[1]).unwrap();
    let out = translate_corpus(&back, &tok, strategy, &langs[1], &langs[2], &srcs, &DecodeConfig::default()).unwrap();
    assert_eq!(out.len(), srcs.len());
    assert!(out.iter().all(|t| !t.text.contains("__")));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn every_strategy_keeps_texts_and_places_tags(seed in 0u64..1000) {
        let fam = family();
        for p in build_training_mixture(&fam.train, fam.pivot(), seed).unwrap().iter().take(20) {
            for s in LtStrategy::ALL {
                let t = apply_strategy(p, s);
                prop_assert!(t.src_rendered().ends_with(&p.src_text));
                prop_assert!(t.tgt_rendered().ends_with(&p.tgt_text));
                let tlt = tag_token(&p.tgt_lang);
                let tag_sides = (t.src_prefix.contains(&tlt), t.tgt_prefix.contains(&tlt));
                prop_assert_eq!(tag_sides, (!s.target_tag_on_decoder(), s.target_tag_on_decoder()));
            }
        }
    }
}
