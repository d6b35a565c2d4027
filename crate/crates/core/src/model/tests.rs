use super::*;
use crate::numerics::{finite_difference_check, AdamConfig, GradCheckOptions, LrSchedule};
use crate::tokenizer::UNK;

fn tiny(vocab: usize) -> TransformerConfig {
    TransformerConfig {
        enc_layers: 1,
        dec_layers: 1,
        d_model: 8,
        ffn_dim: 16,
        heads: 2,
        dropout: 0.0,
        max_positions: 32,
        vocab_size: vocab,
        share_embeddings: true,
    }
}

fn small_batch() -> Batch {
    let a = Example { src: vec![5, 6, 7], tgt: vec![8, 9] };
    let b = Example { src: vec![10], tgt: vec![11, 12, 13, 5] };
    Batch::from_examples(&[&a, &b]).unwrap()
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn parameter_count_matches_hand_count() {
    // d=8, f=16, V=20, one layer each side.
    // embed 160; enc: 2 ln (32) + attn 4*(64+8)=288 + ffn 8*16+16+16*8+8=280 -> 600, final ln 16
    // dec: 3 ln (48) + 2 attn (576) + ffn 280 -> 904, final ln 16
    let cfg = tiny(20);
    let expected = 160 + 600 + 16 + 904 + 16;
    assert_eq!(cfg.parameter_count(), expected);
    let m = ModelState::<f32>::init(cfg, 0).unwrap();
    assert_eq!(m.parameter_count(), expected);
    let mut unshared = tiny(20);
    unshared.share_embeddings = false;
    assert_eq!(ModelState::<f32>::init(unshared, 0).unwrap().parameter_count(), expected + 320);
}

#[test]
fn init_is_seeded() {
    let a = ModelState::<f32>::init(tiny(20), 7).unwrap();
    let b = ModelState::<f32>::init(tiny(20), 7).unwrap();
    let c = ModelState::<f32>::init(tiny(20), 8).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
    // Head 0 and head 1 query columns differ.
    let wq = &a.params()[a.param_names().iter().position(|n| n == "enc.0.self.wq").unwrap()];
    let col = |h: usize| (0..8).map(|r| wq.data()[r * 8 + h * 4]).collect::<Vec<_>>();
    assert_ne!(col(0), col(1));
}

#[test]
fn invalid_configs_rejected() {
    let mut c = tiny(20);
    c.heads = 3;
    assert!(ModelState::<f32>::init(c, 0).is_err());
    let mut c = tiny(20);
    c.enc_layers = 0;
    assert!(ModelState::<f32>::init(c, 0).is_err());
}

#[test]
fn logits_shape_and_determinism() {
    let m = ModelState::<f32>::init(tiny(20), 1).unwrap();
    let b = small_batch();
    let (l1, t) = m.forward(&b, true).unwrap();
    let (l2, _) = m.forward(&b, false).unwrap();
    assert_eq!(l1.shape(), &[2, b.tgt_len, 20]);
    assert_eq!(l1, l2);
    let t = t.unwrap();
    assert_eq!(t.enc_layer_outputs.len(), 1);
    assert_eq!(t.dec_cross_attn[0].shape(), &[2, 2, b.tgt_len, b.src_len]);
}

#[test]
fn overlong_and_out_of_vocab_inputs_rejected() {
    let m = ModelState::<f32>::init(tiny(20), 1).unwrap();
    let long = Example { src: vec![5; 40], tgt: vec![6] };
    assert!(matches!(m.forward(&Batch::from_examples(&[&long]).unwrap(), false), Err(ModelError::TooLong { .. })));
    let bad = Example { src: vec![25], tgt: vec![6] };
    assert!(matches!(m.forward(&Batch::from_examples(&[&bad]).unwrap(), false), Err(ModelError::BadToken { .. })));
}

#[test]
fn attention_rows_normalized_and_masks_exact() {
    let m = ModelState::<f32>::init(tiny(20), 2).unwrap();
    let b = small_batch();
    let (_, t) = m.forward(&b, true).unwrap();
    let t = t.unwrap();
    let src_pad = b.src_padding();
    for (maps, k_pad, causal) in [
        (&t.enc_self_attn, &src_pad, false),
        (&t.dec_cross_attn, &src_pad, false),
        (&t.dec_self_attn, &b.tgt_padding(), true),
    ] {
        for a in maps.iter() {
            let [bs, h, q, k] = a.shape().try_into().unwrap();
            for bi in 0..bs {
                for hi in 0..h {
                    for i in 0..q {
                        let row = &a.data()[((bi * h + hi) * q + i) * k..][..k];
                        let s: f32 = row.iter().sum();
                        assert!((s - 1.0).abs() < 1e-5);
                        for (j, &w) in row.iter().enumerate() {
                            if k_pad[bi * k + j] || (causal && j > i) {
                                assert_eq!(w, 0.0);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn decoder_is_causal() {
    let m = ModelState::<f32>::init(tiny(20), 3).unwrap();
    let b = small_batch();
    let (base, _) = m.forward(&b, false).unwrap();
    let t = b.tgt_len;
    for pos in 1..t {
        let mut p = b.clone();
        // Perturb every target input at positions >= pos in row 1 (no padding there).
        for j in pos..t {
            p.tgt_in_ids[t + j] = 15 + (j as u32 % 4);
        }
        let (out, _) = m.forward(&p, false).unwrap();
        for j in 0..pos {
            let a = &base.data()[(t + j) * 20..][..20];
            let c = &out.data()[(t + j) * 20..][..20];
            assert_eq!(a, c, "position {j} changed after perturbing {pos}..");
        }
    }
}

#[test]
fn extra_padding_leaves_real_logits_unchanged() {
    let m = ModelState::<f32>::init(tiny(20), 4).unwrap();
    let b = small_batch();
    let (base, _) = m.forward(&b, false).unwrap();
    let padded = b.padded(3, 2);
    let (out, _) = m.forward(&padded, false).unwrap();
    for r in 0..b.size {
        for j in 0..b.tgt_len {
            if b.tgt_in_ids[r * b.tgt_len + j] == PAD {
                continue;
            }
            let a = &base.data()[(r * b.tgt_len + j) * 20..][..20];
            let c = &out.data()[(r * padded.tgt_len + j) * 20..][..20];
            assert!(max_diff(a, c) <= 1e-5);
        }
    }
}

#[test]
fn pad_embeddings_receive_no_gradient() {
    let mut cfg = tiny(20);
    cfg.share_embeddings = false;
    let m = ModelState::<f64>::init(cfg, 5).unwrap();
    let b = small_batch();
    assert!(b.src_ids.contains(&PAD) && b.tgt_in_ids.contains(&PAD));
    let (_, grads) = m.loss_and_grads(&b, 0.1, None).unwrap();
    for name in ["src_embed", "tgt_embed"] {
        let i = m.param_names().iter().position(|n| n == name).unwrap();
        assert!(grads[i].row(PAD as usize).iter().all(|&g| g == 0.0), "{name}");
        assert!(grads[i].row(5).iter().any(|&g| g != 0.0));
    }
}

#[test]
fn initial_loss_near_log_vocab() {
    let v = 300;
    let mut cfg = tiny(v);
    cfg.d_model = 16;
    let m = ModelState::<f32>::init(cfg, 6).unwrap();
    let b = small_batch();
    let loss = m.loss_at(m.params(), &b, 0.0, None).unwrap();
    let lnv = (v as f64).ln();
    assert!((loss - lnv).abs() < 0.15 * lnv, "loss {loss} vs ln V {lnv}");
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let b = small_batch();
    let m64 = ModelState::<f64>::init(tiny(20), 9).unwrap();
    let (_, g) = m64.loss_and_grads(&b, 0.1, None).unwrap();
    let r = finite_difference_check(
        m64.params(),
        &g,
        |p| m64.loss_at(p, &b, 0.1, None).unwrap(),
        &GradCheckOptions::for_dtype::<f64>(),
    );
    assert!(r.max_rel_error < 1e-4, "{r:?}");

    let m32 = m64.cast::<f32>();
    let (_, g) = m32.loss_and_grads(&b, 0.1, None).unwrap();
    let r = finite_difference_check(
        m32.params(),
        &g,
        |p| m32.loss_at(p, &b, 0.1, None).unwrap(),
        &GradCheckOptions::for_dtype::<f32>(),
    );
    assert!(r.max_rel_error < 1e-2, "{r:?}");
}

#[test]
fn dropout_seeded_loss_is_reproducible() {
    let mut cfg = tiny(20);
    cfg.dropout = 0.3;
    let m = ModelState::<f32>::init(cfg, 1).unwrap();
    let b = small_batch();
    let a = m.loss_at(m.params(), &b, 0.1, Some(4)).unwrap();
    assert_eq!(a, m.loss_at(m.params(), &b, 0.1, Some(4)).unwrap());
    assert_ne!(a, m.loss_at(m.params(), &b, 0.1, Some(5)).unwrap());
    assert_ne!(a, m.loss_at(m.params(), &b, 0.1, None).unwrap());
}

fn overfit_set() -> Vec<Example> {
    (0..32u32)
        .map(|i| Example {
            src: vec![4 + i % 16, 4 + (i * 7) % 16, 4 + (i / 2) % 16],
            tgt: vec![20 + (i * 3) % 16, 20 + i % 16],
        })
        .collect()
}

#[test]
fn overfitting_small_set_lowers_loss_steadily() {
    let mut cfg = tiny(40);
    cfg.d_model = 32;
    cfg.ffn_dim = 64;
    let mut m = ModelState::<f32>::init(cfg, 11).unwrap();
    let set = overfit_set();
    let refs: Vec<&Example> = set.iter().collect();
    let batch = Batch::from_examples(&refs).unwrap();
    let mut opt = Optimizer::new(&m, AdamConfig::default(), LrSchedule::Constant { lr: 3e-3 }).unwrap();
    let losses: Vec<f64> = (0..200).map(|s| train_step(&mut m, &batch, &mut opt, 0.0, s).unwrap()).collect();
    let windows: Vec<f64> = losses.chunks(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "window means {windows:?}");
    }
    assert!(losses[199] < 0.1 * losses[0], "{} -> {}", losses[0], losses[199]);
    assert_eq!(opt.step(), 200);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut cfg = tiny(40);
        cfg.dropout = 0.1;
        let mut m = ModelState::<f32>::init(cfg, 3).unwrap();
        let set = overfit_set();
        let refs: Vec<&Example> = set.iter().collect();
        let batch = Batch::from_examples(&refs).unwrap();
        let mut opt = Optimizer::new(&m, AdamConfig::default(), LrSchedule::default()).unwrap();
        let losses: Vec<f64> = (0..5).map(|s| train_step(&mut m, &batch, &mut opt, 0.1, s).unwrap()).collect();
        (losses, m.checksum())
    };
    assert_eq!(run(), run());
}

#[test]
fn incremental_logprobs_match_full_forward() {
    let m = ModelState::<f32>::init(tiny(20), 12).unwrap();
    let src = source_sequence(&[5, 6, 7]);
    let mem = m.encode(&src).unwrap();
    let prefixes = vec![vec![BOS, 8, 9], vec![BOS, 10, UNK]];
    let lp = m.next_token_logprobs(&mem, &prefixes).unwrap();
    for (p, row) in prefixes.iter().zip(&lp) {
        let b = Batch::from_sequences(&[(src.clone(), p.clone())]).unwrap();
        let (logits, _) = m.forward(&b, false).unwrap();
        let last = log_softmax(&logits.data()[(p.len() - 1) * 20..][..20]);
        for (a, c) in row.iter().zip(&last) {
            assert!((a - c).abs() < 1e-5);
        }
        let total: f64 = row.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
    assert!(m.next_token_logprobs(&mem, &[vec![BOS], vec![BOS, 8]]).is_err());
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = ModelState::<f32>::init(tiny(20), 13).unwrap();
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.checksum(), m.checksum());
    let b = small_batch();
    assert_eq!(m.forward(&b, false).unwrap().0, back.forward(&b, false).unwrap().0);
    let first = std::fs::read(&path).unwrap();
    save_checkpoint(&back, &path).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());
    assert!(first.starts_with(CHECKPOINT_MAGIC));
    assert!(load_checkpoint::<f64>(&path).is_err());
}

#[test]
fn checkpoint_into_different_depth_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut two = tiny(20);
    two.enc_layers = 2;
    two.dec_layers = 2;
    save_checkpoint(&ModelState::<f32>::init(two, 1).unwrap(), &path).unwrap();
    let mut five = tiny(20);
    five.enc_layers = 5;
    five.dec_layers = 5;
    let mut target = ModelState::<f32>::init(five, 1).unwrap();
    let err = load_checkpoint_into(&mut target, &path).unwrap_err();
    assert!(matches!(err, ModelError::ConfigMismatch(_)), "{err}");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(ModelError::BadCheckpoint(_))));
}
