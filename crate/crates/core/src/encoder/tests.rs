use super::*;
use crate::tensor::{grad_check, GRAD_CHECK_STEP};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 24,
        max_len: 16,
        dropout_rate: 0.0,
        seed: 99,
    }
}

fn make_input(ids: &[usize], real_len: usize) -> EncodedInput {
    let n = ids.len();
    EncodedInput {
        token_ids: ids.to_vec(),
        segment_ids: (0..n).map(|i| if i < n / 2 { 0 } else { 1 }).collect(),
        attention_mask: (0..n).map(|i| u8::from(i < real_len)).collect(),
        roles: (0..n)
            .map(|i| if i < real_len { Role::Context } else { Role::Pad })
            .collect(),
    }
}

#[test]
fn trace_has_n_plus_one_layers_of_right_shape() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let input = make_input(&[0, 1, 2, 3, 4, 5], 6);
    let trace = model.forward_with_trace(&input).unwrap();
    assert_eq!(trace.layers.len(), model.config.n_layers + 1);
    for layer in &trace.layers {
        assert_eq!(layer.shape(), &[6, model.config.d_model]);
        assert!(layer.all_finite());
    }
}

#[test]
fn layer_zero_is_embedding_sum() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let input = make_input(&[3, 7, 1], 3);
    let trace = model.forward_with_trace(&input).unwrap();
    for pos in 0..3 {
        let row = trace.layers[0].row(pos);
        let tid = input.token_ids[pos];
        let sid = input.segment_ids[pos] as usize;
        for i in 0..model.config.d_model {
            let want = model.tok_emb.at(tid, i) + model.pos_emb.at(pos, i) + model.seg_emb.at(sid, i);
            assert!((row[i] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn attention_rows_renormalize_over_unmasked() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let input = make_input(&[0, 1, 2, 3, 4, 5, 6, 7], 5);
    let cache = forward_with_cache(&model, &input, None).unwrap();
    for block in &cache.blocks {
        for att in &block.att {
            for r in 0..8 {
                let row = att.row(r);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
                for (c, &w) in row.iter().enumerate() {
                    if c >= 5 {
                        assert_eq!(w, 0.0, "masked column must carry no weight");
                    }
                }
            }
        }
    }
}

#[test]
fn forward_is_deterministic_with_dropout_zero() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let input = make_input(&[0, 1, 2, 3], 4);
    let a = model.forward_with_trace(&input).unwrap();
    let b = model.forward_with_trace(&input).unwrap();
    for (x, y) in a.layers.iter().zip(&b.layers) {
        assert_eq!(x.data(), y.data(), "bit-identical traces expected");
    }
}

#[test]
fn removing_pad_leaves_real_rows_unchanged() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let padded = make_input(&[0, 1, 2, 3, 9, 9, 9], 4);
    let bare = make_input(&[0, 1, 2, 3], 4);
    let tp = model.forward_with_trace(&padded).unwrap();
    let tb = model.forward_with_trace(&bare).unwrap();
    for (lp, lb) in tp.layers.iter().zip(&tb.layers) {
        for r in 0..4 {
            for (a, b) in lp.row(r).iter().zip(lb.row(r)) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn over_length_and_unknown_token_are_rejected() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let long = make_input(&vec![1; 17], 17);
    assert!(matches!(
        model.forward_with_trace(&long),
        Err(EncoderError::OverLength { len: 17, max_len: 16 })
    ));
    let bad = make_input(&[1, 99], 2);
    assert!(matches!(
        model.forward_with_trace(&bad),
        Err(EncoderError::UnknownToken { id: 99, .. })
    ));
}

#[test]
fn span_distributions_sum_to_one_over_non_pad() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let input = make_input(&[0, 1, 2, 3, 4, 5], 4);
    let trace = model.forward_with_trace(&input).unwrap();
    let pred = span_head(&model, &trace);
    let s: f64 = pred.start_probs.iter().sum();
    let e: f64 = pred.end_probs.iter().sum();
    assert!((s - 1.0).abs() < 1e-9);
    assert!((e - 1.0).abs() < 1e-9);
    assert!(pred.start_probs[4..].iter().all(|&p| p == 0.0));
    assert!(pred.span.0 <= pred.span.1);
}

#[test]
fn select_span_takes_one_hot_pair() {
    let mut start = vec![0.01; 10];
    let mut end = vec![0.01; 10];
    start[3] = 0.9;
    end[6] = 0.9;
    assert_eq!(select_span(&start, &end, 10, SPAN_CAP), (3, 6));
}

#[test]
fn select_span_falls_back_to_constrained_argmax() {
    // Unconstrained argmax pair would be s=7, e=2 (invalid order).
    let mut start = vec![0.001; 10];
    let mut end = vec![0.001; 10];
    start[7] = 0.8;
    end[2] = 0.8;
    start[1] = 0.15;
    end[4] = 0.15;
    let picked = select_span(&start, &end, 10, SPAN_CAP);

    // Brute force over all valid pairs is the oracle.
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for s in 0..10 {
        for e in s..10.min(s + SPAN_CAP + 1) {
            if start[s] * end[e] > best_score {
                best_score = start[s] * end[e];
                best = (s, e);
            }
        }
    }
    assert_eq!(picked, best);
    assert!(picked.0 <= picked.1);
    assert_ne!(picked, (7, 2));
}

#[test]
fn select_span_honors_cap() {
    let mut start = vec![0.001; 24];
    let mut end = vec![0.001; 24];
    start[0] = 0.9;
    end[20] = 0.9; // distance 20 > cap, must not be chosen together
    let (s, e) = select_span(&start, &end, 24, SPAN_CAP);
    assert!(e - s <= SPAN_CAP);
}

#[test]
fn seqclass_is_a_distribution_and_uniform_for_zero_weights() {
    let mut model = Model::new(tiny_config(), 5).unwrap();
    let input = make_input(&[0, 1, 2], 3);
    let trace = model.forward_with_trace(&input).unwrap();
    let probs = seqclass_head(&model, &trace);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    model.class_head.w = crate::tensor::Tensor::zeros(vec![16, 5]);
    model.class_head.b = crate::tensor::Tensor::zeros(vec![5]);
    let probs = seqclass_head(&model, &trace);
    for &p in &probs {
        assert!((p - 0.2).abs() < 1e-12);
    }
}

#[test]
fn seqclass_argmax_invariant_under_logit_shift() {
    let mut model = Model::new(tiny_config(), 5).unwrap();
    let input = make_input(&[0, 1, 2], 3);
    let trace = model.forward_with_trace(&input).unwrap();
    let before = seqclass_head(&model, &trace);
    let argmax = |p: &[f64]| {
        p.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    };
    let a0 = argmax(&before);
    for v in model.class_head.b.data_mut() {
        *v += 3.7;
    }
    let after = seqclass_head(&model, &trace);
    assert_eq!(a0, argmax(&after));
}

fn class_loss(model: &Model, input: &EncodedInput, gold: usize) -> f64 {
    let cache = forward_with_cache(model, input, None).unwrap();
    let mut dw = crate::tensor::Tensor::zeros(vec![model.config.d_model, model.n_classes()]);
    let mut db = crate::tensor::Tensor::zeros(vec![model.n_classes()]);
    let (loss, _) = class_loss_backward_public(model, &cache, gold, &mut dw, &mut db);
    loss
}

fn class_loss_backward_public(
    model: &Model,
    cache: &ForwardCache,
    gold: usize,
    dw: &mut crate::tensor::Tensor,
    db: &mut crate::tensor::Tensor,
) -> (f64, crate::tensor::Tensor) {
    super::heads::class_loss_backward(model, cache, gold, dw, db).unwrap()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    // Two-layer encoder, six-token input, classification loss.
    let model = Model::new(tiny_config(), 4).unwrap();
    let input = make_input(&[2, 9, 4, 11, 7, 1], 6);
    let gold = 1;

    let cache = forward_with_cache(&model, &input, None).unwrap();
    let mut grads = ModelGrads::zeros_like(&model);
    let (_, d_final) =
        class_loss_backward_public(&model, &cache, gold, &mut grads.class_head_w, &mut grads.class_head_b);
    backward(&model, &cache, &d_final, &mut grads);

    let base = model.clone();
    let loss_fn = move |flat: &[f64]| {
        let mut m = base.clone();
        m.set_flat_params(flat);
        class_loss(&m, &input, gold)
    };
    let err = grad_check(loss_fn, &model.flat_params(), &grads.flat(), GRAD_CHECK_STEP);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn span_gradients_match_finite_differences() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let input = make_input(&[2, 9, 4, 11, 7, 1], 6);
    let gold = (1, 3);

    let cache = forward_with_cache(&model, &input, None).unwrap();
    let mut grads = ModelGrads::zeros_like(&model);
    let (_, d_final) =
        heads::span_loss_backward(&model, &cache, gold, &mut grads.span_head_w, &mut grads.span_head_b)
            .unwrap();
    backward(&model, &cache, &d_final, &mut grads);

    let base = model.clone();
    let loss_fn = move |flat: &[f64]| {
        let mut m = base.clone();
        m.set_flat_params(flat);
        let cache = forward_with_cache(&m, &input, None).unwrap();
        let mut dw = crate::tensor::Tensor::zeros(vec![16, 2]);
        let mut db = crate::tensor::Tensor::zeros(vec![2]);
        heads::span_loss_backward(&m, &cache, gold, &mut dw, &mut db)
            .unwrap()
            .0
    };
    let err = grad_check(loss_fn, &model.flat_params(), &grads.flat(), GRAD_CHECK_STEP);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn zero_upstream_gradient_yields_zero_parameter_gradients() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let input = make_input(&[0, 1, 2, 3], 4);
    let cache = forward_with_cache(&model, &input, None).unwrap();
    let mut grads = ModelGrads::zeros_like(&model);
    let d_final = crate::tensor::Tensor::zeros(vec![4, 16]);
    backward(&model, &cache, &d_final, &mut grads);
    assert!(grads.flat().iter().all(|&g| g == 0.0));
}

#[test]
fn absent_tokens_receive_zero_embedding_gradient() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let input = make_input(&[2, 5, 2], 3);
    let cache = forward_with_cache(&model, &input, None).unwrap();
    let mut grads = ModelGrads::zeros_like(&model);
    let d_final = crate::tensor::Tensor::filled(vec![3, 16], 0.3);
    backward(&model, &cache, &d_final, &mut grads);
    for tid in 0..model.config.vocab_size {
        let row = grads.tok_emb.row(tid);
        let touched = input.token_ids.contains(&tid);
        let nonzero = row.iter().any(|&g| g != 0.0);
        assert_eq!(touched, nonzero, "token {tid}");
    }
}

#[test]
fn config_validation_rejects_bad_values() {
    let mut cfg = tiny_config();
    cfg.n_heads = 3; // 16 % 3 != 0
    assert!(Model::new(cfg, 4).is_err());
    let mut cfg = tiny_config();
    cfg.dropout_rate = 1.0;
    assert!(Model::new(cfg, 4).is_err());
}

#[test]
fn param_enumeration_is_stable_and_complete() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names[0], "tok_emb");
    assert!(names.contains(&"block0.wq".to_string()));
    assert!(names.contains(&"block1.ln2_bias".to_string()));
    assert_eq!(names.last().unwrap(), "class_head.b");
    assert_eq!(model.flat_params().len(), model.n_params());
}
