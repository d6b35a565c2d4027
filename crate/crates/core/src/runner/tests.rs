use super::*;
use crate::analysis::ReduceMethod;
use crate::corpus::{CorpusSizes, SyntheticFamilySpec};

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.output_dir = dir.to_path_buf();
    cfg.data = DataConfig::Synthetic {
        family: SyntheticFamilySpec {
            base_vocab_size: 50,
            num_languages: 4,
            corpus_sizes: CorpusSizes { train: 120, dev: 10, test: 8, mono: 110 },
            sentence_length_range: (3, 6),
            ..Default::default()
        },
    };
    cfg.tokenizer = TokenizerConfig { num_merges: 100, vocab_cap: 600 };
    cfg.model = ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        d_model: 16,
        ffn_dim: 32,
        heads: 2,
        dropout: 0.1,
        max_positions: 32,
        share_embeddings: true,
    };
    cfg.training.steps = 4;
    cfg.training.token_budget = 300;
    cfg.training.log_every = 2;
    cfg.training.dev_every = 2;
    cfg.analysis.sentences = 6;
    cfg.analysis.methods = vec![ReduceMethod::Pca];
    cfg
}

fn quiet() -> impl FnMut(&str) {
    |_: &str| {}
}

#[test]
fn presets_roundtrip_through_toml() {
    for cfg in [ExperimentConfig::desk(), ExperimentConfig::paper_scale()] {
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }
    let p = ExperimentConfig::paper_scale();
    assert_eq!((p.tokenizer.num_merges, p.tokenizer.vocab_cap), (40_000, 40_000));
    assert_eq!((p.training.steps, p.training.token_budget), (100_000, 30_000));
    assert_eq!((p.model.enc_layers, p.model.dec_layers, p.decoding.beam), (5, 5, 4));
}

#[test]
fn shipped_config_files_match_presets() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(ExperimentConfig::load(&dir.join("desk.toml")).unwrap(), ExperimentConfig::desk());
    assert_eq!(ExperimentConfig::load(&dir.join("paper-scale.toml")).unwrap(), ExperimentConfig::paper_scale());
}

#[test]
fn validation_reports_every_problem() {
    let mut cfg = ExperimentConfig::desk();
    cfg.strategies.clear();
    cfg.training.steps = 0;
    cfg.model.heads = 3;
    let msg = cfg.validate().unwrap_err().to_string();
    for needle in ["strategies", "training.steps", "model"] {
        assert!(msg.contains(needle), "{msg}");
    }
    let err = ExperimentConfig::from_toml(&(ExperimentConfig::desk().to_toml() + "bogus = 1\n")).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn tagged_lines_split_into_tags_and_text() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let family = stages::load_data(&cfg.data).unwrap();
    let tok = stages::train_tokenizer(&family, &cfg.tokenizer).unwrap();
    stages::tag_corpora(&family, LtStrategy::SEncTDec, 1, dir.path()).unwrap();
    let ex = stages::read_tagged(&tok, dir.path(), "train").unwrap();
    assert_eq!(ex.len(), 2 * 3 * 120);
    assert!(ex.iter().all(|e| tok.vocab().is_tag(e.src[0]) && !tok.vocab().is_tag(e.src[1])));
    assert!(ex.iter().all(|e| tok.vocab().is_tag(e.tgt[0])));
}

#[test]
fn seed_streams_differ() {
    let a: Vec<u64> = (0..4).map(|s| stages::derive_seed(7, s, 0)).collect();
    let mut b = a.clone();
    b.dedup();
    assert_eq!(a.len(), b.len());
    assert_ne!(stages::derive_seed(7, 1, 0), stages::derive_seed(8, 1, 0));
}

#[test]
fn run_is_complete_resumable_and_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let cfg = tiny(a.path());
    let first = run(&cfg, &mut quiet()).unwrap();
    for s in LtStrategy::ALL {
        assert!(a.path().join(checkpoint_path(s)).exists());
        assert!(a.path().join(report_path(s)).exists());
        assert!(a.path().join(format!("analysis/{}/curves.tsv", s.slug())).exists());
    }
    assert!(a.path().join(TOKENIZER_FILE).exists());
    assert!(first.outcomes.iter().all(|(_, o)| *o == StageOutcome::Ran));
    for (p, h) in &first.manifest.artifacts {
        assert_eq!(&sha256_file(&a.path().join(p)).unwrap(), h, "{p}");
    }

    let again = run(&cfg, &mut quiet()).unwrap();
    assert!(again.outcomes.iter().all(|(_, o)| *o == StageOutcome::Skipped));
    assert_eq!(again.manifest.content_hash(), first.manifest.content_hash());

    fs::remove_file(a.path().join(report_path(LtStrategy::TDec))).unwrap();
    let partial = run(&cfg, &mut quiet()).unwrap();
    let ran: Vec<&str> =
        partial.outcomes.iter().filter(|(_, o)| *o == StageOutcome::Ran).map(|(n, _)| n.as_str()).collect();
    assert_eq!(ran, ["eval:T-DEC"]);
    assert_eq!(partial.manifest.content_hash(), first.manifest.content_hash());

    let b = tempfile::tempdir().unwrap();
    let mut cfg_b = cfg.clone();
    cfg_b.output_dir = b.path().to_path_buf();
    let second = run(&cfg_b, &mut quiet()).unwrap();
    assert_eq!(second.manifest.content_hash(), first.manifest.content_hash());

    let m = RunManifest::load(a.path()).unwrap();
    let runs = vec![(a.path().to_path_buf(), m.clone()), (a.path().to_path_buf(), m.clone())];
    let table = compare_strategies(&runs).unwrap();
    assert_eq!(table.rows.len(), 8);
    for i in 0..4 {
        let (x, y) = (&table.rows[i], &table.rows[i + 4]);
        assert_eq!(
            (x.strategy, x.supervised_bleu, x.zero_shot_bleu, x.off_target_pct),
            (y.strategy, y.supervised_bleu, y.zero_shot_bleu, y.off_target_pct)
        );
    }
    assert!(table.render().lines().next().unwrap().contains("Supervised   Zero-Shot  Off-Target"));
    assert!(compare_strategies(&runs[..1]).is_err());

    let mut missing = m.clone();
    missing.artifacts.remove(&report_path(LtStrategy::SEncTEnc));
    let t = compare_strategies(&[(a.path().to_path_buf(), m.clone()), (a.path().to_path_buf(), missing)]).unwrap();
    assert_eq!(t.rows.len(), 7);
    assert_eq!(t.notes.len(), 1);
    assert!(t.notes[0].contains("S-ENC-T-ENC"));

    let mut other = m.clone();
    other.data_hash = Some("different".into());
    let err = compare_strategies(&[(a.path().to_path_buf(), m), (a.path().to_path_buf(), other)]).unwrap_err();
    assert!(matches!(err, RunError::DataMismatch { .. }));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn failed_stage_is_recorded_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.strategies = vec![LtStrategy::TEnc];
    cfg.model.max_positions = 3;
    let err = run(&cfg, &mut quiet()).err().expect("nothing fits in three positions");
    assert!(matches!(&err, RunError::Stage { stage, .. } if stage == "train:T-ENC"));
    assert_eq!(err.exit_code(), 2);
    let m = RunManifest::load(dir.path()).unwrap();
    assert!(matches!(m.stage("train:T-ENC").unwrap().status, StageStatus::Failed { .. }));
    assert_eq!(m.stage("tokenizer").unwrap().status, StageStatus::Done);

    cfg.model.max_positions = 32;
    let ok = run(&cfg, &mut quiet()).unwrap();
    assert_eq!(ok.outcomes[0], ("data".to_string(), StageOutcome::Skipped));
    assert_eq!(ok.manifest.stage("train:T-ENC").unwrap().status, StageStatus::Done);
}
