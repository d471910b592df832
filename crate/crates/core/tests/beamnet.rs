//! Behavioral tests of the model: shape ladders, attention degeneracies,
//! fusion identities, classifier properties, and the composed-model gradient
//! check at f64.

use beamcast::beamnet::{
    classify, cnn_forward, collect_param_grads, cross_attention_fuse, forward, predict_topk,
    transformer_forward, Forward, Mode, ModelConfig, ModelParams, StructTokenMode, TapeParams,
};
use beamcast::numcore::{compare_gradients, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::reference()
        .scaled(1, 32)
        .unwrap()
        .with_image_size(16)
        .with_num_beams(4);
    cfg.num_heads = 2;
    cfg.dropout = 0.0;
    cfg
}

fn random_image<F: beamcast::numcore::Real>(size: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let data = (0..3 * size * size)
        .map(|_| F::from_f64(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor::from_vec(vec![3, size, size], data).unwrap()
}

fn random_struct<F: beamcast::numcore::Real>(rng: &mut ChaCha8Rng) -> Tensor<F> {
    let data = (0..8).map(|_| F::from_f64(rng.gen_range(0.0..1.0))).collect();
    Tensor::from_vec(vec![1, 8], data).unwrap()
}

fn shape_of<'a>(trace: &'a [(String, Vec<usize>)], name: &str) -> &'a [usize] {
    &trace.iter().find(|(n, _)| n == name).unwrap().1
}

#[test]
fn desk_scale_shape_ladder() {
    // Eighth-width at 64x64: channels [8,16,32,64], final map [64,4,4].
    let cfg = ModelConfig::reference()
        .scaled(1, 8)
        .unwrap()
        .with_image_size(64);
    let params = ModelParams::<f32>::init(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image::<f32>(64, &mut rng);
    let mut fwd = Forward::eval();
    let ids = TapeParams::lease(&mut fwd.tape, &params);
    let img_id = fwd.tape.leaf(&img);
    let emb = cnn_forward(&mut fwd, &cfg, &params, &ids, img_id).unwrap();
    assert_eq!(fwd.tape.shape(emb), &[1, 64]);
    let t = &fwd.trace.shapes;
    assert_eq!(shape_of(t, "conv1"), &[8, 64, 64]);
    assert_eq!(shape_of(t, "pool1"), &[8, 32, 32]);
    assert_eq!(shape_of(t, "pool2"), &[16, 16, 16]);
    assert_eq!(shape_of(t, "pool3"), &[32, 8, 8]);
    assert_eq!(shape_of(t, "pool4"), &[64, 4, 4]);
}

#[test]
fn zero_input_gives_zero_embedding() {
    // Zero image, zero biases, fresh batchnorm in eval mode (running stats
    // 0/1) is an exact zero path through relu, pool, and the FC bridge.
    let cfg = tiny_config();
    let params = ModelParams::<f32>::init(&cfg, 3);
    let img = Tensor::<f32>::zeros(vec![3, 16, 16]);
    let mut fwd = Forward::eval();
    let ids = TapeParams::lease(&mut fwd.tape, &params);
    let img_id = fwd.tape.leaf(&img);
    let emb = cnn_forward(&mut fwd, &cfg, &params, &ids, img_id).unwrap();
    assert!(fwd.tape.value(emb).iter().all(|&v| v == 0.0));
}

#[test]
fn wrong_image_size_is_rejected() {
    let cfg = tiny_config();
    let params = ModelParams::<f32>::init(&cfg, 3);
    let img = Tensor::<f32>::zeros(vec![3, 32, 32]);
    let mut fwd = Forward::eval();
    let ids = TapeParams::lease(&mut fwd.tape, &params);
    let img_id = fwd.tape.leaf(&img);
    assert!(cnn_forward(&mut fwd, &cfg, &params, &ids, img_id).is_err());
}

#[test]
fn wrong_struct_length_is_rejected() {
    let cfg = tiny_config();
    let params = ModelParams::<f32>::init(&cfg, 3);
    let mut fwd = Forward::eval();
    let ids = TapeParams::lease(&mut fwd.tape, &params);
    let bad = fwd.tape.leaf(&Tensor::<f32>::zeros(vec![1, 5]));
    assert!(transformer_forward(&mut fwd, &cfg, &ids, bad).is_err());
}

#[test]
fn single_token_attention_weights_are_exactly_one() {
    let cfg = tiny_config();
    let params = ModelParams::<f32>::init(&cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sv = random_struct::<f32>(&mut rng);
    let mut fwd = Forward::eval();
    let ids = TapeParams::lease(&mut fwd.tape, &params);
    let sv_id = fwd.tape.leaf(&sv);
    let out = transformer_forward(&mut fwd, &cfg, &ids, sv_id).unwrap();
    assert_eq!(fwd.tape.shape(out), &[1, cfg.embed_dim]);
    // 2 layers x 2 heads, each prob tensor is [1,1] and exactly 1.0.
    assert_eq!(fwd.trace.attn_probs.len(), 4);
    for &p in &fwd.trace.attn_probs {
        assert_eq!(fwd.tape.shape(p), &[1, 1]);
        assert_eq!(fwd.tape.value(p), &[1.0]);
    }
}

#[test]
fn per_feature_attention_rows_sum_to_one() {
    let mut cfg = tiny_config();
    cfg.struct_token_mode = StructTokenMode::PerFeature;
    let params = ModelParams::<f32>::init(&cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sv = random_struct::<f32>(&mut rng);
    let mut fwd = Forward::eval();
    let ids = TapeParams::lease(&mut fwd.tape, &params);
    let sv_id = fwd.tape.leaf(&sv);
    let out = transformer_forward(&mut fwd, &cfg, &ids, sv_id).unwrap();
    assert_eq!(fwd.tape.shape(out), &[1, cfg.embed_dim]);
    for &p in &fwd.trace.attn_probs {
        assert_eq!(fwd.tape.shape(p), &[8, 8]);
        for row in fwd.tape.value(p).chunks_exact(8) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn cross_attention_output_is_image_independent_with_single_token() {
    // With one query and one key the attention weight is identically 1, so
    // O = (F_struct W_V) W_O regardless of the image embedding.
    let cfg = tiny_config();
    let params = ModelParams::<f32>::init(&cfg, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sv = random_struct::<f32>(&mut rng);
    let run = |img_seed: u64| -> (Vec<f32>, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(img_seed);
        let f_img = Tensor::from_vec(
            vec![1, cfg.embed_dim],
            (0..cfg.embed_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let mut fwd = Forward::eval();
        let ids = TapeParams::lease(&mut fwd.tape, &params);
        let img_id = fwd.tape.leaf(&f_img);
        let sv_id = fwd.tape.leaf(&sv);
        let f_struct = transformer_forward(&mut fwd, &cfg, &ids, sv_id).unwrap();
        let fused = cross_attention_fuse(&mut fwd, &cfg, &ids, img_id, f_struct).unwrap();
        assert_eq!(fwd.tape.shape(fused), &[1, 2 * cfg.embed_dim]);
        let o = fwd.trace.cross_attn_out.unwrap();
        (fwd.tape.value(o).to_vec(), fwd.tape.value(fused).to_vec())
    };
    let (o1, fused1) = run(100);
    let (o2, fused2) = run(101);
    assert_eq!(o1, o2, "cross-attention O must not depend on the image");
    assert_ne!(fused1, fused2, "the fused vector still carries the image");
}

#[test]
fn zero_output_projection_reduces_to_layernormed_image() {
    let cfg = tiny_config();
    let mut params = ModelParams::<f32>::init(&cfg, 10);
    params.cross.wo = Tensor::zeros(vec![cfg.embed_dim, cfg.embed_dim]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f_img = Tensor::from_vec(
        vec![1, cfg.embed_dim],
        (0..cfg.embed_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )
    .unwrap();
    let sv = random_struct::<f32>(&mut rng);
    let mut fwd = Forward::eval();
    let ids = TapeParams::lease(&mut fwd.tape, &params);
    let img_id = fwd.tape.leaf(&f_img);
    let sv_id = fwd.tape.leaf(&sv);
    let f_struct = transformer_forward(&mut fwd, &cfg, &ids, sv_id).unwrap();
    cross_attention_fuse(&mut fwd, &cfg, &ids, img_id, f_struct).unwrap();
    let refined = fwd.trace.img_refined.unwrap();
    // Reference layernorm of f_img with the same gamma/beta.
    let expect = {
        let mut t2 = beamcast::numcore::Tape::<f32>::new();
        let x = t2.leaf(&f_img);
        let g = t2.leaf(&params.cross_ln_gamma);
        let b = t2.leaf(&params.cross_ln_beta);
        let y = t2.layernorm(x, g, b, beamcast::beamnet::NORM_EPS as f32).unwrap();
        t2.value(y).to_vec()
    };
    assert_eq!(fwd.tape.value(refined), &expect[..]);
}

#[test]
fn eval_classify_is_deterministic_and_shift_invariant() {
    let cfg = tiny_config();
    let params = ModelParams::<f32>::init(&cfg, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let fused = Tensor::from_vec(
        vec![1, 2 * cfg.embed_dim],
        (0..2 * cfg.embed_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )
    .unwrap();
    let run = || {
        let mut fwd = Forward::eval();
        let ids = TapeParams::lease(&mut fwd.tape, &params);
        let f = fwd.tape.leaf(&fused);
        let logits = classify(&mut fwd, &cfg, &ids, f).unwrap();
        fwd.tape.value(logits).to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "dropout must be off in eval mode");
    assert_eq!(a.len(), cfg.num_beams);
    // Argmax invariance under uniform translation.
    let shifted: Vec<f32> = a.iter().map(|v| v + 3.5).collect();
    assert_eq!(predict_topk(&a, 1), predict_topk(&shifted, 1));
}

#[test]
fn topk_prefix_and_permutation_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let logits: Vec<f32> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let top1 = predict_topk(&logits, 1);
        let top3 = predict_topk(&logits, 3);
        let top5 = predict_topk(&logits, 5);
        assert!(top3.starts_with(&top1));
        assert!(top5.starts_with(&top3));
        let mut all = predict_topk(&logits, 16);
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }
    // Ties break toward the lower index.
    assert_eq!(predict_topk(&[1.0f32, 2.0, 2.0, 0.0], 2), vec![1, 2]);
    assert_eq!(predict_topk(&[5.0f32, 5.0, 5.0, 5.0], 4), vec![0, 1, 2, 3]);
}

#[test]
fn every_parameter_receives_gradient() {
    // Structural exception: a softmax over a single key is constantly 1, so
    // the query/key projections of any length-1 attention receive exactly
    // zero gradient. That covers cross.wq/wk always (one image token, one
    // struct token) and the encoder wq/wk in one-token mode. The test pins
    // both sides: zeros exactly where the degeneracy forces them, nonzero
    // everywhere else.
    for mode in [StructTokenMode::OneToken, StructTokenMode::PerFeature] {
        let mut cfg = tiny_config();
        cfg.struct_token_mode = mode;
        let params = ModelParams::<f32>::init(&cfg, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let img = random_image::<f32>(16, &mut rng);
        let sv = random_struct::<f32>(&mut rng);
        let drop_rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Forward::from_parts(beamcast::numcore::Tape::new(), Mode::Train, drop_rng);
        let ids = TapeParams::lease(&mut fwd.tape, &params);
        let img_id = fwd.tape.leaf(&img);
        let sv_id = fwd.tape.leaf(&sv);
        let logits = forward(&mut fwd, &cfg, &params, &ids, img_id, sv_id).unwrap();
        let loss = fwd.tape.cross_entropy(logits, &[1]).unwrap();
        fwd.tape.backward(loss).unwrap();
        let grads = collect_param_grads(&fwd.tape, &ids);
        let names: Vec<String> = params.trainable().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(grads.len(), names.len());
        let degenerate = |name: &str| -> bool {
            let single_token_attn = name == "cross.wq" || name == "cross.wk";
            let enc_qk = name.starts_with("enc") && (name.ends_with(".wq") || name.ends_with(".wk"));
            single_token_attn || (mode == StructTokenMode::OneToken && enc_qk)
        };
        for (name, g) in names.iter().zip(&grads) {
            if degenerate(name) {
                assert!(
                    g.iter().all(|&v| v == 0.0),
                    "[{mode:?}] `{name}` should be gradient-free under length-1 attention"
                );
            } else {
                assert!(
                    g.iter().any(|&v| v != 0.0),
                    "[{mode:?}] parameter `{name}` received no gradient"
                );
            }
        }
    }
}

#[test]
fn lease_order_matches_trainable_order() {
    let cfg = tiny_config();
    let params = ModelParams::<f32>::init(&cfg, 17);
    let mut tape = beamcast::numcore::Tape::<f32>::new();
    let ids = TapeParams::lease(&mut tape, &params);
    let id_list = ids.trainable_ids();
    let trainable = params.trainable();
    assert_eq!(id_list.len(), trainable.len());
    for (&id, (name, t)) in id_list.iter().zip(&trainable) {
        assert_eq!(tape.shape(id), t.shape(), "shape mismatch at `{name}`");
        assert_eq!(tape.value(id), t.data(), "value mismatch at `{name}`");
    }
    // The inverse mapping round-trips.
    let rebuilt = TapeParams::from_trainable_ids(&cfg, &id_list).unwrap();
    assert_eq!(rebuilt.trainable_ids(), id_list);
}

#[test]
fn composed_model_passes_f64_gradient_check() {
    // Finite differences over every trainable element at the tiny config,
    // train-mode batchnorm, dropout 0. Tolerance 1e-4.
    let cfg = tiny_config();
    let params64 = ModelParams::<f32>::init(&cfg, 18).cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let img = random_image::<f64>(16, &mut rng);
    let sv = random_struct::<f64>(&mut rng);
    let label = 2usize;

    let loss_of = |p: &ModelParams<f64>| -> f64 {
        let drop_rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Forward::from_parts(beamcast::numcore::Tape::new(), Mode::Train, drop_rng);
        let ids = TapeParams::lease(&mut fwd.tape, p);
        let img_id = fwd.tape.leaf(&img);
        let sv_id = fwd.tape.leaf(&sv);
        let logits = forward(&mut fwd, &cfg, p, &ids, img_id, sv_id).unwrap();
        let loss = fwd.tape.cross_entropy(logits, &[label]).unwrap();
        fwd.tape.value(loss)[0]
    };

    // Analytic gradients.
    let analytic: Vec<Vec<f64>> = {
        let drop_rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Forward::from_parts(beamcast::numcore::Tape::new(), Mode::Train, drop_rng);
        let ids = TapeParams::lease(&mut fwd.tape, &params64);
        let img_id = fwd.tape.leaf(&img);
        let sv_id = fwd.tape.leaf(&sv);
        let logits = forward(&mut fwd, &cfg, &params64, &ids, img_id, sv_id).unwrap();
        let loss = fwd.tape.cross_entropy(logits, &[label]).unwrap();
        fwd.tape.backward(loss).unwrap();
        collect_param_grads(&fwd.tape, &ids)
    };

    let h = 1e-5;
    let names: Vec<String> = params64.trainable().iter().map(|(n, _)| n.clone()).collect();
    let mut worst = (0.0f64, String::new());
    let mut probe = params64.clone();
    for t_idx in 0..names.len() {
        let numel = probe.trainable()[t_idx].1.numel();
        let mut numeric = vec![0.0; numel];
        for j in 0..numel {
            let orig = probe.trainable()[t_idx].1.data()[j];
            probe.trainable_mut()[t_idx].1.data_mut()[j] = orig + h;
            let plus = loss_of(&probe);
            probe.trainable_mut()[t_idx].1.data_mut()[j] = orig - h;
            let minus = loss_of(&probe);
            probe.trainable_mut()[t_idx].1.data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * h);
        }
        let (rel, _) = compare_gradients(&analytic[t_idx], &numeric);
        if rel > worst.0 {
            worst = (rel, names[t_idx].clone());
        }
    }
    assert!(
        worst.0 < 1e-4,
        "max rel err {:.3e} at `{}` exceeds 1e-4",
        worst.0,
        worst.1
    );
}
