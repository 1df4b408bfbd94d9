use neuralizer::model::*;
use neuralizer::tensor::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor<F: Float>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::c(rng.random_range(-1.0..1.0)))
}

fn tiny(c: usize) -> ModelConfig {
    ModelConfig {
        channels: c,
        image_size: 8,
        ..ModelConfig::default()
    }
}

fn zero_all<F: Float>(store: &mut ParamStore<F>) {
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = F::zero());
    }
}

#[test]
fn embed_shapes() {
    let cfg = ModelConfig::default();
    let m = Neuralizer::<f32>::new(&cfg, 1).unwrap();
    let tape = Tape::new();
    let p = m.params().bind(&tape, false);
    let x = tape.constant(Tensor::zeros(vec![2, 3, 32, 32]));
    let ctx = tape.constant(Tensor::zeros(vec![4, 2, 4, 32, 32]));
    let (rx, rc) = m.embed_on(&p, &x, &ctx).unwrap();
    assert_eq!(rx.shape(), vec![2, 16, 32, 32]);
    assert_eq!(rc.shape(), vec![4, 2, 16, 32, 32]);
}

#[test]
fn identical_members_embed_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = Neuralizer::<f32>::new(&tiny(4), 2).unwrap();
    let pair: Tensor<f32> = rand_tensor(vec![1, 4, 8, 8], &mut rng);
    let ctx = Tensor::stack(&[pair.clone(), pair.clone(), pair]).unwrap();
    let tape = Tape::new();
    let p = m.params().bind(&tape, false);
    let x = tape.constant(Tensor::zeros(vec![1, 3, 8, 8]));
    let (_, rc) = m.embed_on(&p, &x, &tape.constant(ctx)).unwrap();
    let members = rc.value().unstack();
    assert_eq!(members.len(), 3);
    assert_eq!(members[0], members[1]);
    assert_eq!(members[0], members[2]);
}

#[test]
fn zero_embedding_gives_bias() {
    let mut m = Neuralizer::<f32>::new(&tiny(4), 0).unwrap();
    zero_all(m.params_mut());
    let tape = Tape::new();
    let p = m.params().bind(&tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = tape.constant(rand_tensor(vec![1, 3, 8, 8], &mut rng));
    let ctx = tape.constant(rand_tensor(vec![1, 1, 4, 8, 8], &mut rng));
    let (rx, _) = m.embed_on(&p, &x, &ctx).unwrap();
    assert!(rx.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn residual_unit_with_zero_weights_is_gelu() {
    let mut m = Neuralizer::<f64>::new(&tiny(4), 0).unwrap();
    zero_all(m.params_mut());
    let (unit, _) = m.head();
    let tape = Tape::new();
    let p = m.params().bind(&tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = tape.constant(rand_tensor(vec![1, 4, 8, 8], &mut rng));
    let y = unit.apply(&p, &x).unwrap();
    assert_eq!(y.shape(), vec![1, 4, 8, 8]);
    let want = x.gelu();
    assert_eq!(*y.value(), *want.value());
}

#[test]
fn block_without_interaction_is_two_residual_paths() {
    let mut m = Neuralizer::<f64>::new(&tiny(3), 4).unwrap();
    let block = m.blocks()[0];
    for id in [
        block.k_x.kernel,
        block.k_x.bias,
        block.k_c.kernel,
        block.k_c.bias,
    ] {
        m.params_mut()
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::new();
    let p = m.params().bind(&tape, false);
    let rx = tape.constant(rand_tensor(vec![2, 3, 8, 8], &mut rng));
    let rc = tape.constant(rand_tensor(vec![6, 3, 8, 8], &mut rng));
    let (ox, oc) = block.apply(&p, &rx, &rc, 3).unwrap();
    assert_eq!(*ox.value(), *block.res_x.apply(&p, &rx).unwrap().value());
    assert_eq!(*oc.value(), *block.res_c.apply(&p, &rc).unwrap().value());
}

/// Context members of a flat `[N*B, ...]` stream, reordered by `perm`.
fn permute_members(t: &Tensor<f32>, n: usize, perm: &[usize]) -> Tensor<f32> {
    let s = t.shape();
    let len = t.numel() / n;
    let mut data = Vec::with_capacity(t.numel());
    for &i in perm {
        data.extend_from_slice(&t.data()[i * len..(i + 1) * len]);
    }
    Tensor::new(s.to_vec(), data).unwrap()
}

#[test]
fn block_is_permutation_equivariant_and_duplication_invariant() {
    let m = Neuralizer::<f32>::new(&tiny(4), 9).unwrap();
    let block = m.blocks()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rx: Tensor<f32> = rand_tensor(vec![2, 4, 8, 8], &mut rng);
    let rc: Tensor<f32> = rand_tensor(vec![3 * 2, 4, 8, 8], &mut rng);
    let run = |rc: &Tensor<f32>, n: usize| {
        let tape = Tape::new();
        let p = m.params().bind(&tape, false);
        let (ox, oc) = block
            .apply(
                &p,
                &tape.constant(rx.clone()),
                &tape.constant(rc.clone()),
                n,
            )
            .unwrap();
        ((*ox.value()).clone(), (*oc.value()).clone())
    };
    let (ox, oc) = run(&rc, 3);
    let perm = [2, 0, 1];
    let (px, pc) = run(&permute_members(&rc, 3, &perm), 3);
    assert!(px.max_abs_diff(&ox) <= 1e-5);
    assert!(pc.max_abs_diff(&permute_members(&oc, 3, &perm)) <= 1e-5);

    let doubled = Tensor::new(vec![12, 4, 8, 8], [rc.data(), rc.data()].concat()).unwrap();
    let (dx, _) = run(&doubled, 6);
    assert!(dx.max_abs_diff(&ox) <= 1e-5);
}

#[test]
fn forward_accepts_any_context_size() {
    let cfg = ModelConfig::default();
    let m = Neuralizer::<f32>::new(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Tensor<f32> = rand_tensor(vec![2, 3, 32, 32], &mut rng);
    for n in [1, 2, 8] {
        let ctx = rand_tensor(vec![n, 2, 4, 32, 32], &mut rng);
        assert_eq!(m.predict(&x, &ctx).unwrap().shape(), &[2, 1, 32, 32]);
    }
}

#[test]
fn forward_rejects_bad_geometry() {
    let m = Neuralizer::<f32>::new(&ModelConfig::default(), 0).unwrap();
    let x = Tensor::zeros(vec![1, 3, 20, 20]);
    let ctx = Tensor::zeros(vec![1, 1, 4, 20, 20]);
    assert!(matches!(
        m.predict(&x, &ctx),
        Err(TensorError::Invalid { .. })
    ));
    let x = Tensor::zeros(vec![1, 3, 32, 32]);
    let empty = Tensor::zeros(vec![0, 1, 4, 32, 32]);
    assert!(m.predict(&x, &empty).is_err());
    let wrong_batch = Tensor::zeros(vec![2, 2, 4, 32, 32]);
    assert!(matches!(
        m.predict(&x, &wrong_batch),
        Err(TensorError::Shape { .. })
    ));
}

#[test]
fn block_gradients_match_central_differences() {
    let m = Neuralizer::<f64>::new(&tiny(2), 0).unwrap();
    let block = m.blocks()[0];
    let params = m.params().tensors().to_vec();
    let np = params.len();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rx = rand_tensor(vec![1, 2, 4, 4], &mut rng);
        let rc = rand_tensor(vec![2, 2, 4, 4], &mut rng);
        let wx: Tensor<f64> = rand_tensor(vec![1, 2, 4, 4], &mut rng);
        let wc: Tensor<f64> = rand_tensor(vec![2, 2, 4, 4], &mut rng);
        let mut inputs = params.clone();
        inputs.push(rx);
        inputs.push(rc);
        let report = grad_check(
            |tape, v| {
                let (ox, oc) = block.apply(&v[..np], &v[np], &v[np + 1], 2)?;
                let a = ox.mul(&tape.constant(wx.clone()))?.sum();
                let b = oc.mul(&tape.constant(wc.clone()))?.sum();
                a.add(&b)
            },
            &inputs,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn full_model_gradients_match_central_differences() {
    let m = Neuralizer::<f64>::new(&tiny(2), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(vec![1, 3, 8, 8], &mut rng);
    let ctx = rand_tensor(vec![2, 1, 4, 8, 8], &mut rng);
    let target = Tensor::from_fn(vec![1, 1, 8, 8], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    let report = grad_check(
        |tape, v| {
            let y = m.forward_on(v, &tape.constant(x.clone()), &tape.constant(ctx.clone()))?;
            y.soft_dice_loss(&target, 1.0)
        },
        m.params().tensors(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
    assert_eq!(report.coordinates, m.params().numel());
}

#[test]
fn baseline_shape_determinism_and_gradients() {
    let b = BaselineUNet::<f32>::new(&ModelConfig::default(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Tensor<f32> = rand_tensor(vec![1, 3, 32, 32], &mut rng);
    let y1 = b.predict(&x).unwrap();
    assert_eq!(y1.shape(), &[1, 1, 32, 32]);
    assert_eq!(y1, b.predict(&x).unwrap());

    let tiny_b = BaselineUNet::<f64>::new(&tiny(2), 2).unwrap();
    let x = rand_tensor(vec![2, 3, 8, 8], &mut rng);
    let target = rand_tensor(vec![2, 1, 8, 8], &mut rng);
    let report = grad_check(
        |tape, v| {
            tiny_b
                .forward_on(v, &tape.constant(x.clone()))?
                .weighted_mse_loss(&target, 0.05)
        },
        tiny_b.params().tensors(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn init_is_seeded_and_he_scaled() {
    let cfg = ModelConfig::default();
    let a = Neuralizer::<f32>::new(&cfg, 5).unwrap();
    let b = Neuralizer::<f32>::new(&cfg, 5).unwrap();
    let c = Neuralizer::<f32>::new(&cfg, 6).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());

    let k = a.params().by_name("block0.res_x.conv1.k").unwrap();
    assert_eq!(k.shape(), &[16, 16, 3, 3]);
    let n = k.numel() as f64;
    let mean = k.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = k
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let want = 2.0 / 144.0;
    assert!((var / want - 1.0).abs() < 0.3, "variance {var} vs {want}");
    assert!(a
        .params()
        .by_name("block0.res_x.conv1.b")
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn toy_count_matches_closed_form() {
    // c = 1 by hand: each 3x3 conv has 9 + 1 parameters, each 2c->c 1x1 conv 2 + 1.
    for n in [1u64, 2, 5] {
        let cfg = ModelConfig {
            channels: 1,
            image_size: 8,
            ..ModelConfig::default()
        };
        let cost = neuralizer_cost(&cfg, n as usize);
        let params = (3 + 1) + (4 + 1) + 7 * (4 * 10 + 2 * 3) + (2 * 10 + 2);
        assert_eq!(cost.params, params);
        // Pixels per block at scales [0,1,2,3,2,1,0] of an 8x8 image.
        let block_px = 64 + 16 + 4 + 1 + 4 + 16 + 64;
        let macs = 64 * (3 + 4 * n) + block_px * (18 + 18 * n + 4 * n) + 64 * (18 + 1);
        assert_eq!(cost.macs, macs);
    }
}

#[test]
fn analytic_cost_matches_constructed_network() {
    let cfg = ModelConfig {
        channels: 4,
        image_size: 16,
        ..ModelConfig::default()
    };
    let m = Neuralizer::<f32>::new(&cfg, 0).unwrap();
    for n in [1, 3] {
        let cost = neuralizer_cost(&cfg, n);
        assert_eq!(cost.params as usize, m.params().numel());
        let tape = Tape::new();
        let p = m.params().bind(&tape, false);
        let x = tape.constant(Tensor::zeros(vec![2, 3, 16, 16]));
        let ctx = tape.constant(Tensor::zeros(vec![n, 2, 4, 16, 16]));
        m.forward_on(&p, &x, &ctx).unwrap();
        assert_eq!(tape.conv_macs(), 2 * cost.macs);
    }
    let b = BaselineUNet::<f32>::new(&cfg, 0).unwrap();
    let cost = baseline_cost(&cfg);
    assert_eq!(cost.params as usize, b.params().numel());
    let tape = Tape::new();
    let p = b.params().bind(&tape, false);
    b.forward_on(&p, &tape.constant(Tensor::zeros(vec![1, 3, 16, 16])))
        .unwrap();
    assert_eq!(tape.conv_macs(), cost.macs);
}

#[test]
fn paper_dimensions() {
    let cfg = ModelConfig::paper();
    let (p1, f1) = count_params_flops(&cfg, 1);
    let (p32, f32_) = count_params_flops(&cfg, 32);
    assert_eq!(p1, p32);
    assert!((p1 as f64 / 1.27e6 - 1.0).abs() <= 0.25, "{p1}");
    assert!((f1 / 39.1e9 - 1.0).abs() <= 0.35, "{f1}");
    assert!((12.0..=33.0).contains(&(f32_ / f1)));
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    assert!(ModelConfig {
        channels: 1,
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        image_size: 36,
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        ctx_pair_channels: 3,
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert_eq!(
        ModelConfig::default().block_scales(),
        vec![0, 1, 2, 3, 2, 1, 0]
    );
    let parsed: ModelConfig = serde_json::from_str(r#"{"channels": 8}"#).unwrap();
    assert_eq!(parsed.channels, 8);
    assert!(serde_json::from_str::<ModelConfig>(r#"{"chanels": 8}"#).is_err());
}
