use super::*;
use crate::corpus::{generate_synthetic_family, CorpusSizes, SyntheticFamily, SyntheticFamilySpec};
use crate::model::TransformerConfig;
use crate::tokenizer::train_subwords;

fn setup() -> (SyntheticFamily, Tokenizer, ModelState<f32>) {
    let spec = SyntheticFamilySpec {
        base_vocab_size: 50,
        num_languages: 4,
        corpus_sizes: CorpusSizes { train: 60, dev: 5, test: 12, mono: 10 },
        ..Default::default()
    };
    let fam = generate_synthetic_family(&spec).unwrap();
    let tags: Vec<String> = fam.languages().iter().map(tag_token).collect();
    let text: Vec<&str> = fam
        .train
        .iter()
        .flat_map(|c| c.pairs.iter().flat_map(|p| [p.src_text.as_str(), p.tgt_text.as_str()]))
        .collect();
    let tok = train_subwords(text, 200, 1000, &tags).unwrap();
    let mut cfg = TransformerConfig::desk(tok.vocab_size());
    cfg.d_model = 16;
    cfg.ffn_dim = 32;
    cfg.dropout = 0.0;
    let m = ModelState::init(cfg, 3).unwrap();
    (fam, tok, m)
}

fn lc(s: &str) -> LangCode {
    LangCode::new(s).unwrap()
}

#[test]
fn pooling_single_position_and_permutation() {
    let (_, tok, _) = setup();
    let t = Tensor::<f32>::from_fn(&[1, 3, 2], |i| i as f32);
    let one = pool(&t, &[9, PAD, PAD], &tok, PoolScope::AllTokens);
    assert_eq!(one, vec![vec![0.0, 1.0]]);
    let t2 = Tensor::<f32>::new(vec![1, 3, 2], vec![4.0, 5.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
    let a = pool(&t, &[9, 9, 9], &tok, PoolScope::AllTokens);
    let b = pool(&t2, &[9, 9, 9], &tok, PoolScope::AllTokens);
    assert_eq!(a, b);
    let tag = tok.vocab().tag_ids().next().unwrap();
    let ex = pool(&t, &[tag, 9, PAD], &tok, PoolScope::ExcludeTags);
    assert_eq!(ex, vec![vec![2.0, 3.0]]);
}

#[test]
fn batched_pooling_matches_single_sentences() {
    let (fam, tok, m) = setup();
    let (src, tgt) = (lc("l1"), fam.pivot().clone());
    let srcs = fam.test.column(&src).unwrap();
    let refs = fam.test.column(&tgt).unwrap();
    let all = mean_pooled_states(&m, &tok, LtStrategy::SEncTDec, &src, &tgt, &srcs, Some(&refs), PoolScope::AllTokens)
        .unwrap();
    assert_eq!(all.all_layers().len(), 4);
    for i in [0, 5, 11] {
        let one = mean_pooled_states(
            &m,
            &tok,
            LtStrategy::SEncTDec,
            &src,
            &tgt,
            &srcs[i..i + 1],
            Some(&refs[i..i + 1]),
            PoolScope::AllTokens,
        )
        .unwrap();
        for (la, lb) in all.all_layers().iter().zip(one.all_layers()) {
            for (x, y) in la[i].iter().zip(&lb[0]) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn identical_languages_have_unit_similarity() {
    let rows = vec![vec![1.0, 2.0, -1.0], vec![0.5, 0.0, 3.0]];
    let g = vec![&rows, &rows];
    let v = pairwise_layer_similarity(&[g.clone(), g.clone(), g]).unwrap();
    assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-12));
    assert!(pairwise_layer_similarity(&[vec![&rows]]).is_err());
    assert!((cosine(&[1.0, 0.0], &[0.0, 2.0])).abs() < 1e-12);
}

#[test]
fn similarity_ignores_language_order() {
    let a = vec![vec![1.0, 0.2], vec![0.1, 1.0]];
    let b = vec![vec![0.3, 0.9], vec![1.0, 1.0]];
    let c = vec![vec![-1.0, 0.5], vec![0.4, -0.2]];
    let x = pairwise_layer_similarity(&[vec![&a], vec![&b], vec![&c]]).unwrap();
    let y = pairwise_layer_similarity(&[vec![&c], vec![&a], vec![&b]]).unwrap();
    assert!((x[0] - y[0]).abs() < 1e-12);
}

#[test]
fn curves_cover_every_layer() {
    let (fam, tok, m) = setup();
    for setting in [Setting::ManyToOne, Setting::OneToMany] {
        let c =
            layerwise_similarity(&m, &tok, LtStrategy::TEnc, &fam.test, setting, fam.pivot(), 8, PoolScope::AllTokens)
                .unwrap();
        assert_eq!(c.values.len(), 4);
        assert!(c.values.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    assert!(layerwise_similarity(
        &m,
        &tok,
        LtStrategy::TEnc,
        &fam.test,
        Setting::ManyToOne,
        &lc("zz"),
        8,
        PoolScope::AllTokens
    )
    .is_err());
}

#[test]
fn reduce_requires_balanced_populated_languages() {
    let (fam, tok, m) = setup();
    let v = encoder_vectors(&m, &tok, LtStrategy::TEnc, &fam.test, fam.pivot(), 10, PoolScope::AllTokens).unwrap();
    assert_eq!(v.len(), 3);
    let set = reduce_2d(&v, ReduceMethod::Pca, 0).unwrap();
    assert!(set.points.values().all(|p| p.len() == 10));
    assert_eq!(set, reduce_2d(&v, ReduceMethod::Pca, 0).unwrap());
    let mut few = v.clone();
    few.values_mut().next().unwrap().truncate(4);
    assert!(matches!(reduce_2d(&few, ReduceMethod::Pca, 0), Err(AnalysisError::Degenerate(_))));
    let mut uneven = v;
    uneven.values_mut().next().unwrap().truncate(7);
    assert!(reduce_2d(&uneven, ReduceMethod::Pca, 0).is_err());
}

#[test]
fn tlt_attention_locates_the_tag() {
    let (fam, tok, m) = setup();
    let (src, tgt) = (lc("l1"), lc("l2"));
    let sentence = fam.test.column(&src).unwrap()[0];
    let cfg = DecodeConfig::default();
    let t = extract_tlt_attention(&m, &tok, LtStrategy::TEnc, sentence, &src, &tgt, &cfg, None).unwrap();
    assert_eq!((t.source, t.tlt_column_index, t.layer), (AttentionSource::Cross, 0, 1));
    assert_eq!(t.key_labels[0], "__l2__");
    let t = extract_tlt_attention(&m, &tok, LtStrategy::SEncTEnc, sentence, &src, &tgt, &cfg, None).unwrap();
    assert_eq!(&t.key_labels[..2], &["__l1__".to_string(), "__l2__".to_string()]);
    assert_eq!(t.tlt_column_index, 1);
    for strategy in [LtStrategy::TDec, LtStrategy::SEncTDec] {
        let t = extract_tlt_attention(&m, &tok, strategy, sentence, &src, &tgt, &cfg, None).unwrap();
        assert_eq!(t.source, AttentionSource::DecoderSelf);
        assert_eq!(&t.query_labels[..2], &["<s>".to_string(), "__l2__".to_string()]);
        assert_eq!(t.tlt_column_index, 1);
        for (i, row) in t.matrix.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(row[i + 1..].iter().all(|&w| w == 0.0));
        }
    }
}

#[test]
fn exports_roundtrip_byte_identically() {
    let (fam, tok, m) = setup();
    let curve = layerwise_similarity(
        &m,
        &tok,
        LtStrategy::TDec,
        &fam.test,
        Setting::OneToMany,
        fam.pivot(),
        6,
        PoolScope::AllTokens,
    )
    .unwrap();
    let mut other = curve.clone();
    other.setting = Setting::ManyToOne;
    let v = encoder_vectors(&m, &tok, LtStrategy::TDec, &fam.test, fam.pivot(), 6, PoolScope::AllTokens).unwrap();
    let points = reduce_2d(&v, ReduceMethod::Pca, 7).unwrap();
    let trace = extract_tlt_attention(
        &m,
        &tok,
        LtStrategy::TDec,
        fam.test.rows[0][1].as_str(),
        &fam.test.languages[1],
        fam.pivot(),
        &DecodeConfig::default(),
        None,
    )
    .unwrap();

    let curves = vec![curve, other];
    assert_eq!(parse_curves(&write_curves(&curves)).unwrap(), curves);
    let text = write_points(&points);
    assert_eq!(text.lines().count(), 1 + 3 * 6);
    assert_eq!(parse_points(&text).unwrap(), points);

    let dir = tempfile::tempdir().unwrap();
    let outputs = AnalysisOutputs { curves, points: vec![points], traces: vec![trace.clone()] };
    let files = export_analysis(&outputs, dir.path()).unwrap();
    let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    export_analysis(&outputs, dir.path()).unwrap();
    let second: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert_eq!(first, second);
    let back = read_trace(&std::fs::read_to_string(dir.path().join("trace.0.json")).unwrap()).unwrap();
    assert_eq!(back, trace);
    assert!(parse_curves("bad header\n").is_err());
}
