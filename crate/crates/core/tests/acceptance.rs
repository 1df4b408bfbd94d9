//! Acceptance criteria 1-9. One line per criterion goes straight to stdout so it
//! shows up without `--nocapture`.
//!
//! Criteria 7 and 8 train desk-scale models; finished runs are cached under the
//! cargo target directory, keyed by a hash of the full run setup.

use std::collections::HashSet;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use neuralizer::augment::ops::{
    intensity_mapping, mask_contour, mask_dilate, mask_invert, sobel_filter,
};
use neuralizer::augment::{apply_tree, apply_tree_traced, Aug, AugTree};
use neuralizer::datagen::fft::{fft2, fft2_real, Direction};
use neuralizer::datagen::{
    sample_task_kind, Batch, ContextMode, Holdout, Sampler, SamplerConfig, TaskKind, TaskWeights,
};
use neuralizer::evaluate::{
    eval_curves, eval_episodes, holdout_compare, infer_bootstrap, EvalConfig, EvalTask, Evaluated,
    Jitter, MetricKind,
};
use neuralizer::losses::{dice_coefficient, psnr, soft_dice_loss, weighted_mse_loss};
use neuralizer::model::{neuralizer_cost, Model, ModelConfig, ModelKind};
use neuralizer::rng;
use neuralizer::tensor::{grad_check, read_ntf_from, write_ntf_to, Tape, Tensor, TensorError, Var};
use neuralizer::train::{
    encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, RunSetup,
    Trainer,
};
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn uniform(shape: Vec<usize>, r: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn binary(shape: Vec<usize>, r: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if r.random_bool(0.4) { 1.0 } else { 0.0 })
}

// ---------------------------------------------------------------------------
// 1. Gradient checks

type OpFn = fn(&mut rand_chacha::ChaCha8Rng) -> Result<f64, TensorError>;

/// Reduce a non-scalar output with fixed random weights.
fn weighted_sum<'t>(
    tape: &'t Tape<f64>,
    y: Var<'t, f64>,
    w: &Tensor<f64>,
) -> Result<Var<'t, f64>, TensorError> {
    Ok(y.mul(&tape.constant(w.clone()))?.sum())
}

fn check_unary(
    r: &mut rand_chacha::ChaCha8Rng,
    shape: Vec<usize>,
    out_shape: Vec<usize>,
    f: impl for<'t> Fn(&Var<'t, f64>) -> Result<Var<'t, f64>, TensorError>,
) -> Result<f64, TensorError> {
    let x = uniform(shape, r);
    let w = uniform(out_shape, r);
    Ok(grad_check(|tape, v| weighted_sum(tape, f(&v[0])?, &w), &[x])?.max_rel_err)
}

fn check_binary(
    r: &mut rand_chacha::ChaCha8Rng,
    shape: Vec<usize>,
    other: Vec<usize>,
    out_shape: Vec<usize>,
    f: impl for<'t> Fn(&Var<'t, f64>, &Var<'t, f64>) -> Result<Var<'t, f64>, TensorError>,
) -> Result<f64, TensorError> {
    let (a, b) = (uniform(shape, r), uniform(other, r));
    let w = uniform(out_shape, r);
    Ok(grad_check(|tape, v| weighted_sum(tape, f(&v[0], &v[1])?, &w), &[a, b])?.max_rel_err)
}

const OPS: &[(&str, OpFn)] = &[
    ("conv2d", |r| {
        let x = uniform(vec![2, 2, 5, 4], r);
        let k = uniform(vec![3, 2, 3, 3], r);
        let b = uniform(vec![3], r);
        let w = uniform(vec![2, 3, 5, 4], r);
        Ok(grad_check(
            |tape, v| weighted_sum(tape, v[0].conv2d(&v[1], &v[2], 1)?, &w),
            &[x, k, b],
        )?
        .max_rel_err)
    }),
    ("conv2d_1x1", |r| {
        let x = uniform(vec![1, 3, 4, 4], r);
        let k = uniform(vec![2, 3, 1, 1], r);
        let b = uniform(vec![2], r);
        let w = uniform(vec![1, 2, 4, 4], r);
        Ok(grad_check(
            |tape, v| weighted_sum(tape, v[0].conv2d(&v[1], &v[2], 0)?, &w),
            &[x, k, b],
        )?
        .max_rel_err)
    }),
    ("gelu", |r| {
        check_unary(r, vec![3, 7], vec![3, 7], |x| Ok(x.gelu()))
    }),
    ("add", |r| {
        check_binary(r, vec![2, 5], vec![2, 5], vec![2, 5], |a, b| a.add(b))
    }),
    ("sub", |r| {
        check_binary(r, vec![2, 5], vec![2, 5], vec![2, 5], |a, b| a.sub(b))
    }),
    ("mul", |r| {
        check_binary(r, vec![2, 5], vec![2, 5], vec![2, 5], |a, b| a.mul(b))
    }),
    ("scale", |r| {
        let s = r.random_range(-2.0..2.0);
        check_unary(r, vec![4, 3], vec![4, 3], move |x| Ok(x.scale(s)))
    }),
    ("concat_channels", |r| {
        check_binary(
            r,
            vec![2, 1, 3, 3],
            vec![2, 2, 3, 3],
            vec![2, 3, 3, 3],
            |a, b| a.concat_channels(b),
        )
    }),
    ("slice_channels", |r| {
        check_unary(r, vec![2, 4, 3, 3], vec![2, 2, 3, 3], |x| {
            x.slice_channels(1, 2)
        })
    }),
    ("down2", |r| {
        check_unary(r, vec![2, 2, 4, 6], vec![2, 2, 2, 3], |x| x.down2())
    }),
    ("up2", |r| {
        check_unary(r, vec![2, 2, 2, 3], vec![2, 2, 4, 6], |x| x.up2())
    }),
    ("mean_over_set", |r| {
        check_unary(r, vec![3, 2, 2, 2], vec![2, 2, 2], |x| x.mean_over_set())
    }),
    ("repeat_set", |r| {
        check_unary(r, vec![2, 3], vec![4, 2, 3], |x| x.repeat_set(4))
    }),
    ("reshape", |r| {
        check_unary(r, vec![2, 6], vec![3, 4], |x| x.reshape(vec![3, 4]))
    }),
    ("sum", |r| {
        let x = uniform(vec![3, 4], r);
        Ok(grad_check(|_, v| Ok(v[0].sum()), &[x])?.max_rel_err)
    }),
    ("soft_dice_loss", |r| {
        let z = uniform(vec![2, 1, 4, 4], r).map(|v| 3.0 * v);
        let t = binary(vec![2, 1, 4, 4], r);
        Ok(grad_check(|_, v| soft_dice_loss(&v[0], &t, 1.0), &[z])?.max_rel_err)
    }),
    ("weighted_mse_loss", |r| {
        let y = uniform(vec![2, 1, 4, 4], r);
        let t = uniform(vec![2, 1, 4, 4], r);
        Ok(grad_check(|_, v| weighted_mse_loss(&v[0], &t, 0.05), &[y])?.max_rel_err)
    }),
];

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        channels: 2,
        image_size: 8,
        ..ModelConfig::default()
    }
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut worst = (0.0f64, "");
    for &(name, f) in OPS {
        for seed in 0..20 {
            let mut r = rng::stream(seed, 1);
            let err = f(&mut r).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            ensure!(err < 1e-4, "{name} seed {seed}: rel. err {err:.3e}");
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    for seed in 0..20u64 {
        let mut r = rng::stream(seed, 2);
        let kind = if seed % 2 == 0 {
            ModelKind::Neuralizer
        } else {
            ModelKind::Baseline
        };
        let m = Model::<f64>::new(kind, &tiny_model_config(), seed).map_err(|e| e.to_string())?;
        let x = uniform(vec![1, 3, 8, 8], &mut r);
        let ctx = uniform(vec![1 + seed as usize % 3, 1, 4, 8, 8], &mut r);
        let dice = seed % 4 < 2;
        let target = if dice {
            binary(vec![1, 1, 8, 8], &mut r)
        } else {
            uniform(vec![1, 1, 8, 8], &mut r)
        };
        let rep = grad_check(
            |tape, v| {
                let y = m.forward_on(v, &tape.constant(x.clone()), &tape.constant(ctx.clone()))?;
                if dice {
                    soft_dice_loss(&y, &target, 1.0)
                } else {
                    weighted_mse_loss(&y, &target, 0.05)
                }
            },
            m.params().tensors(),
        )
        .map_err(|e| format!("model seed {seed}: {e}"))?;
        ensure!(
            rep.max_rel_err < 1e-4,
            "{kind:?} model seed {seed}: rel. err {:.3e}",
            rep.max_rel_err
        );
        if rep.max_rel_err > worst.0 {
            worst = (rep.max_rel_err, "model");
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.0}s");
    Ok(format!(
        "{} ops + tiny models x 20 seeds, worst rel. err {:.2e} ({}), {secs:.0}s",
        OPS.len(),
        worst.0,
        worst.1
    ))
}

// ---------------------------------------------------------------------------
// 2. Architecture invariants

fn set_members(ctx: &Tensor<f32>) -> Vec<Tensor<f32>> {
    ctx.unstack()
}

fn criterion_2() -> Outcome {
    let cfg = ModelConfig::default();
    let s = cfg.image_size;
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let m = Model::<f32>::new(ModelKind::Neuralizer, &cfg, seed).map_err(|e| e.to_string())?;
        let mut r = rng::stream(seed, 3);
        let x = Tensor::from_fn(vec![2, 3, s, s], |_| r.random::<f32>());
        for n in [1usize, 2, 3, 8] {
            let ctx = Tensor::from_fn(vec![n, 2, 4, s, s], |_| r.random::<f32>());
            let y = m.predict(&x, &ctx).map_err(|e| format!("N={n}: {e}"))?;
            ensure!(y.shape() == [2, 1, s, s], "N={n}: shape {:?}", y.shape());

            let mut members = set_members(&ctx);
            members.reverse();
            if n > 2 {
                members.swap(0, 1);
            }
            let permuted = Tensor::stack(&members).unwrap();
            let d = y.max_abs_diff(&m.predict(&x, &permuted).unwrap());
            ensure!(
                d <= 1e-5,
                "seed {seed} N={n}: permutation moved output by {d:.2e}"
            );
            worst = worst.max(d);

            let mut doubled = set_members(&ctx);
            doubled.extend(set_members(&ctx));
            let doubled = Tensor::stack(&doubled).unwrap();
            let d = y.max_abs_diff(&m.predict(&x, &doubled).unwrap());
            ensure!(
                d <= 1e-5,
                "seed {seed} N={n}: duplication moved output by {d:.2e}"
            );
            worst = worst.max(d);
        }
    }
    Ok(format!(
        "10 seeds, N in {{1,2,3,8}}, worst max-abs change {worst:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// 3. Parameter and FLOP accounting

fn criterion_3() -> Outcome {
    let cfg = ModelConfig::paper();
    ensure!(
        cfg.channels == 64 && cfg.stages == 4 && cfg.image_size == 192,
        "paper config is {cfg:?}"
    );
    let c1 = neuralizer_cost(&cfg, 1);
    let c32 = neuralizer_cost(&cfg, 32);
    let params = c1.params as f64;
    let gflops = c1.flops() / 1e9;
    let ratio = c32.flops() / c1.flops();
    ensure!((params / 1.27e6 - 1.0).abs() <= 0.25, "params {params}");
    ensure!((gflops / 39.1 - 1.0).abs() <= 0.35, "gflops {gflops:.2}");
    ensure!((12.0..=33.0).contains(&ratio), "FLOP ratio {ratio:.2}");
    ensure!(c32.params == c1.params, "params depend on N");
    Ok(format!(
        "params {params} ({:+.1}%), {gflops:.2} GFLOPs ({:+.1}%), N=32/N=1 ratio {ratio:.2}",
        100.0 * (params / 1.27e6 - 1.0),
        100.0 * (gflops / 39.1 - 1.0)
    ))
}

// ---------------------------------------------------------------------------
// 4. Loss and metric oracles

fn oracle_soft_dice(z: &[f64], t: &[f64], batch: usize, eps: f64) -> f64 {
    let per = z.len() / batch;
    let mut total = 0.0;
    for b in 0..batch {
        let (mut i, mut p_sum, mut t_sum) = (0.0, 0.0, 0.0);
        for k in b * per..(b + 1) * per {
            let p = 1.0 / (1.0 + (-z[k]).exp());
            i += p * t[k];
            p_sum += p;
            t_sum += t[k];
        }
        total += 1.0 - (2.0 * i + eps) / (p_sum + t_sum + eps);
    }
    total / batch as f64
}

fn oracle_dice(a: &[f64], b: &[f64]) -> f64 {
    let mut inter = 0usize;
    let mut total = 0usize;
    for k in 0..a.len() {
        if a[k] == 1.0 && b[k] == 1.0 {
            inter += 1;
        }
        total += (a[k] == 1.0) as usize + (b[k] == 1.0) as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn oracle_psnr(p: &[f64], t: &[f64]) -> f64 {
    let mut se = 0.0;
    for k in 0..p.len() {
        let d = p[k].clamp(0.0, 1.0) - t[k].clamp(0.0, 1.0);
        se += d * d;
    }
    let mse = se / p.len() as f64;
    if mse < 1e-12 {
        99.0
    } else {
        -10.0 * mse.log10()
    }
}

fn criterion_4() -> Outcome {
    // Per-pixel factor of the weighted MSE at the published sigma^2.
    let one = Tape::new();
    let y = one.constant(Tensor::new(vec![1, 1], vec![0.1]).unwrap());
    let v: f64 = weighted_mse_loss(&y, &Tensor::zeros(vec![1, 1]), 0.05)
        .unwrap()
        .value()
        .item();
    ensure!((v - 0.1).abs() < 1e-12, "0.1^2 / (2 * 0.05) gave {v}");

    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut r = rng::stream(case, 4);
        let batch = r.random_range(1..=3);
        let h = r.random_range(1..=5);
        let shape = vec![batch, 1, h, r.random_range(1..=5)];
        let n: usize = shape.iter().product();
        let z = uniform(shape.clone(), &mut r).map(|v| 4.0 * v);
        let t = binary(shape.clone(), &mut r);
        let p = binary(shape.clone(), &mut r);
        let eps = [1.0, 1e-6][case as usize % 2];
        let sigma2 = [0.05, 0.3][case as usize % 2];
        let tape = Tape::new();
        let zv = tape.constant(z.clone());

        let got = soft_dice_loss(&zv, &t, eps).unwrap().value().item();
        let d1 = (got - oracle_soft_dice(z.data(), t.data(), batch, eps)).abs();

        let yt = uniform(shape.clone(), &mut r);
        let got = weighted_mse_loss(&zv, &yt, sigma2).unwrap().value().item();
        let mut s = 0.0;
        for k in 0..n {
            s += (z.data()[k] - yt.data()[k]).powi(2);
        }
        let want = s / (2.0 * sigma2) / batch as f64;
        let d2 = (got - want).abs() / want.abs().max(1.0);

        let d3 = (dice_coefficient(&p, &t).unwrap() - oracle_dice(p.data(), t.data())).abs();

        let img = Tensor::from_fn(shape.clone(), |_| r.random_range(-0.2..1.2));
        let tgt = Tensor::from_fn(shape, |_| r.random_range(0.0..1.0));
        let d4 = (psnr(&img, &tgt).unwrap() - oracle_psnr(img.data(), tgt.data())).abs();
        for (d, what) in [
            (d1, "soft dice"),
            (d2, "weighted mse"),
            (d3, "dice"),
            (d4, "psnr"),
        ] {
            ensure!(d <= 1e-9, "case {case}: {what} off by {d:.3e}");
            worst = worst.max(d);
        }
    }
    Ok(format!("100 random cases, worst deviation {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 5. Augmentation algebra

fn random_mask(seed: u64, n: usize) -> Tensor<f32> {
    let mut r = rng::stream(seed, 5);
    let density = r.random_range(0.05..0.5);
    Tensor::from_fn(
        vec![n, n],
        |_| if r.random_bool(density) { 1.0 } else { 0.0 },
    )
}

fn criterion_5() -> Outcome {
    for seed in 0..50 {
        let m = random_mask(seed, 14);
        let inv = mask_invert(&m).unwrap();
        ensure!(
            mask_invert(&inv).unwrap() == m,
            "seed {seed}: invert is not an involution"
        );
        let d1 = mask_dilate(&m, 1).unwrap();
        let d2 = mask_dilate(&m, 2).unwrap();
        let c = mask_contour(&m).unwrap();
        for i in 0..m.numel() {
            ensure!(
                d1.data()[i] >= m.data()[i],
                "seed {seed}: dilation lost pixel {i}"
            );
            ensure!(
                d2.data()[i] >= c.data()[i],
                "seed {seed}: contour pixel {i} outside the 2-dilation"
            );
        }
        let v = (seed as f32) / 50.0;
        ensure!(
            sobel_filter(&Tensor::full(vec![9, 11], v))
                .unwrap()
                .data()
                .iter()
                .all(|&g| g == 0.0),
            "sobel of constant {v} is not zero"
        );
        // Equal inputs map to equal outputs.
        let mut r = rng::stream(seed, 6);
        let levels: Vec<f32> = (0..5).map(|_| r.random()).collect();
        let x = Tensor::from_fn(vec![6, 6], |i| levels[i % 5]);
        let y = intensity_mapping(&x, 8, &mut rng::stream(seed, 7)).unwrap();
        for i in 0..36 {
            for j in 0..36 {
                if x.data()[i] == x.data()[j] {
                    ensure!(
                        y.data()[i] == y.data()[j],
                        "seed {seed}: mapping not a function"
                    );
                }
            }
        }
    }

    let cfg = SamplerConfig::default();
    let sampler = Sampler::new(Arc::new(cfg.train_pool().unwrap()), cfg).unwrap();
    let mut r = rng::stream(5, 8);
    let tree = AugTree::default();
    for &kind in &TaskKind::ALL {
        let ep = sampler.build_episode(kind, 3, &mut r).unwrap();
        for seed in 0..3 {
            let a = apply_tree(&ep, &tree, seed).unwrap();
            ensure!(
                a == apply_tree(&ep, &tree, seed).unwrap(),
                "{kind}: tree not deterministic for seed {seed}"
            );
        }
    }

    let ep = sampler
        .build_episode(TaskKind::Segmentation, 1, &mut r)
        .unwrap();
    let branches = [
        Aug::MaskInvert,
        Aug::MaskContour,
        Aug::MaskDilate { radius: 1 },
    ];
    let one_of = AugTree::one_of(
        1.0,
        branches
            .iter()
            .map(|a| AugTree::leaf(1.0, a.clone()))
            .collect(),
    );
    let mut counts = [0usize; 3];
    for seed in 0..1000 {
        let (_, trace) = apply_tree_traced(&ep, &one_of, seed).unwrap();
        ensure!(trace.len() == 1, "OneOf applied {} branches", trace.len());
        let i = branches.iter().position(|b| *b == trace[0]).unwrap();
        counts[i] += 1;
    }
    let expect = 1000.0 / 3.0;
    for (b, &c) in branches.iter().zip(&counts) {
        ensure!(
            (c as f64 - expect).abs() <= 0.1 * expect,
            "OneOf branch {b:?} drawn {c}/1000"
        );
    }
    Ok(format!(
        "50 masks per property, OneOf counts {counts:?}/1000"
    ))
}

// ---------------------------------------------------------------------------
// 6. Sampler statistics

fn criterion_6() -> Outcome {
    // Published weights for the eight task kinds.
    let published = [
        (TaskKind::Segmentation, 2.0),
        (TaskKind::ModalityTransfer, 2.0),
        (TaskKind::SuperResolution, 1.0),
        (TaskKind::SkullStripping, 0.5),
        (TaskKind::MotionRecon, 0.5),
        (TaskKind::DenoiseBias, 0.5),
        (TaskKind::UndersampledRecon, 1.0),
        (TaskKind::Inpainting, 1.0),
    ];
    let total: f64 = published.iter().map(|p| p.1).sum();
    let mut r = rng::stream(6, 0);
    let draws = 100_000;
    let mut counts = [0usize; 8];
    for _ in 0..draws {
        let k = sample_task_kind(&TaskWeights::default(), &Holdout::default(), &mut r).unwrap();
        counts[k.index()] += 1;
    }
    let mut worst = 0.0f64;
    for (kind, w) in published {
        let f = counts[kind.index()] as f64 / draws as f64;
        let d = (f - w / total).abs();
        ensure!(
            d <= 0.01,
            "{kind}: frequency {f:.4}, weight share {:.4}",
            w / total
        );
        worst = worst.max(d);
    }

    let cfg = SamplerConfig::default();
    let sampler = Sampler::new(Arc::new(cfg.train_pool().unwrap()), cfg.clone()).unwrap();
    let mut modes = [0usize; 3];
    let episodes = 3000;
    for _ in 0..episodes {
        let kind = sampler.sample_kind(&mut r).unwrap();
        let n = sampler.sample_context_size(&mut r);
        let ep = sampler.build_episode(kind, n, &mut r).unwrap();
        let q = ep.query.subject_id;
        ensure!(
            ep.context.iter().all(|p| p.subject_id != q),
            "{kind}: input subject {q} appears in its own context"
        );
        let same = ep
            .context
            .iter()
            .filter(|p| p.dataset_id == ep.query.dataset_id)
            .count();
        match ep.info.mixing {
            ContextMode::SameAsInput => ensure!(same == n, "SameAsInput with foreign context"),
            ContextMode::ExcludeInput => ensure!(same == 0, "ExcludeInput with same-site context"),
            ContextMode::Random => {}
        }
        modes[ContextMode::ALL
            .iter()
            .position(|m| *m == ep.info.mixing)
            .unwrap()] += 1;
    }
    for (m, &c) in ContextMode::ALL.iter().zip(&modes) {
        let f = c as f64 / episodes as f64;
        ensure!((f - 1.0 / 3.0).abs() <= 0.03, "{m:?}: share {f:.3}");
    }

    let hold: Holdout = "task:inpainting,modality:2,class:4".parse().unwrap();
    let held_cfg = SamplerConfig {
        holdout: hold.clone(),
        ..cfg.clone()
    };
    let held = Sampler::new(Arc::new(held_cfg.train_pool().unwrap()), held_cfg).unwrap();
    let mut violations = 0;
    for _ in 0..1000 {
        let kind = held.sample_kind(&mut r).unwrap();
        let ep = held
            .build_episode(kind, held.sample_context_size(&mut r), &mut r)
            .unwrap();
        let bad = ep.kind == TaskKind::Inpainting
            || ep.info.classes.contains(&4)
            || ep.info.target_modality == Some(2)
            || ep.pairs().any(|p| p.modalities.contains(&2));
        violations += bad as usize;
    }
    ensure!(violations == 0, "{violations} held-out episodes sampled");
    Ok(format!(
        "task shares within {:.2} pp, mixing {modes:?}/3000, 0 subject reuse, 0 holdout leaks",
        100.0 * worst
    ))
}

// ---------------------------------------------------------------------------
// 7, 8. Desk-scale training

/// The reference seed and the frozen desk hyperparameters.
const REFERENCE_SEED: u64 = 0;
const DESK_LR: f64 = 1e-3;
/// Checked against a calibration run of the reference setup, then frozen.
const SEEN_DICE_N4: f64 = 0.75;
const HOLDOUT_MARGIN: f64 = 0.10;

fn desk_setup(holdout: &str) -> RunSetup {
    let mut s = RunSetup::default();
    s.seed = REFERENCE_SEED;
    s.train.adam.lr = DESK_LR;
    if !holdout.is_empty() {
        s.sampler.holdout = holdout.parse().unwrap();
    }
    s
}

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

/// Best-validation checkpoint of `setup` and the wall time its training took.
/// Trained once, then cached with the time in a sidecar file.
fn trained(setup: RunSetup) -> Result<(Checkpoint, f64), String> {
    let json = serde_json::to_string(&setup).unwrap();
    let mut h = std::collections::hash_map::DefaultHasher::new();
    json.hash(&mut h);
    let path = cache_dir().join(format!("{:016x}.nlz", h.finish()));
    let secs_path = path.with_extension("secs");
    if let (Ok(ck), Ok(secs)) = (load_checkpoint(&path), std::fs::read_to_string(&secs_path)) {
        if let (true, Ok(secs)) = (ck.meta.setup == setup, secs.trim().parse()) {
            return Ok((ck, secs));
        }
    }
    std::fs::create_dir_all(cache_dir()).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let mut trainer = Trainer::new(setup).map_err(|e| e.to_string())?;
    let out = trainer.run(|_, _| Ok(())).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    report(&format!(
        "    trained {} steps in {secs:.0}s, best val {:.4}",
        out.last.meta.step,
        out.best.meta.best_val.unwrap_or(f64::NAN)
    ));
    save_checkpoint(&out.best, &path).map_err(|e| e.to_string())?;
    std::fs::write(&secs_path, format!("{secs}")).map_err(|e| e.to_string())?;
    Ok((out.best, secs))
}

fn desk_eval(tasks: Vec<EvalTask>) -> EvalConfig {
    EvalConfig {
        sizes: vec![1, 2, 4, 8],
        episodes_per_cell: 50,
        tasks,
        ..EvalConfig::default()
    }
}

fn criterion_7() -> Outcome {
    let (ck, secs) = trained(desk_setup(""))?;
    let sampler = &ck.meta.setup.sampler;
    let seg = EvalTask::new(TaskKind::Segmentation);
    let den = EvalTask::new(TaskKind::DenoiseBias);
    let models = [Evaluated::neuralizer("desk", &ck).map_err(|e| e.to_string())?];
    let cfg = desk_eval(vec![seg.clone(), den.clone()]);
    let rep = eval_curves(&models, sampler, &cfg).map_err(|e| e.to_string())?;
    let dice = |n| rep.find("desk", &seg.label(), n).unwrap().mean;
    let curve: Vec<String> = [1, 2, 4, 8]
        .iter()
        .map(|&n| format!("{:.3}", dice(n)))
        .collect();

    let eps = eval_episodes(sampler, &den, 8, cfg.episodes_per_cell, cfg.seed)
        .map_err(|e| e.to_string())?;
    let input_psnr = eps
        .iter()
        .map(|e| psnr(&e.query.input.unstack()[0], &e.query.target.unstack()[0]).unwrap())
        .sum::<f64>()
        / eps.len() as f64;
    let pred_psnr: Vec<f64> = [1, 2, 4, 8]
        .iter()
        .map(|&n| rep.find("desk", &den.label(), n).unwrap().mean)
        .collect();

    let boot = bootstrap_gain(&ck)?;
    let detail = format!(
        "seg Dice N=1,2,4,8 [{}]; denoise PSNR {:.2}..{:.2} dB vs input {input_psnr:.2} dB; \
         bootstrap B=8 {:.3} vs B=1 {:.3}; training {secs:.0}s",
        curve.join(", "),
        pred_psnr.iter().cloned().fold(f64::INFINITY, f64::min),
        pred_psnr.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        boot.1,
        boot.0,
    );
    ensure!(secs < 7200.0, "(training exceeded 2 h) {detail}");
    ensure!(dice(8) >= dice(1), "(a) Dice at N=8 below N=1: {detail}");
    ensure!(
        dice(4) >= SEEN_DICE_N4,
        "(b) Dice at N=4 is {:.3} < {SEEN_DICE_N4}: {detail}",
        dice(4)
    );
    ensure!(
        pred_psnr.iter().all(|&p| p > input_psnr),
        "(c) denoising does not beat the input: {detail}"
    );
    ensure!(boot.1 >= boot.0 - 0.01, "bootstrapping hurts: {detail}");
    Ok(detail)
}

/// Mean Dice over 20 segmentation episodes at N=4 with B=1 and B=8.
fn bootstrap_gain(ck: &Checkpoint) -> Result<(f64, f64), String> {
    let task = EvalTask::new(TaskKind::Segmentation);
    let eps =
        eval_episodes(&ck.meta.setup.sampler, &task, 4, 20, 777).map_err(|e| e.to_string())?;
    let mut means = [0.0; 2];
    for (slot, b) in [1usize, 8].into_iter().enumerate() {
        for (i, e) in eps.iter().enumerate() {
            let batch = Batch::<f32>::from_episodes(std::slice::from_ref(e)).unwrap();
            let mut r = rng::stream(rng::derive(99, &[i as u64]), 0);
            let p = infer_bootstrap(
                &ck.model,
                &batch.x,
                &batch.ctx,
                batch.loss,
                b,
                &Jitter::default(),
                &mut r,
            )
            .map_err(|e| e.to_string())?;
            means[slot] += MetricKind::Dice
                .score(&p.output().unstack()[0], &batch.y.unstack()[0])
                .unwrap();
        }
        means[slot] /= eps.len() as f64;
    }
    Ok((means[0], means[1]))
}

fn criterion_8() -> Outcome {
    let (seen, _) = trained(desk_setup(""))?;
    let (unseen, secs) = trained(desk_setup("class:4"))?;
    let task = EvalTask::new(TaskKind::Segmentation).with_classes(vec![4]);
    let cmp = holdout_compare(
        &seen,
        &unseen,
        &task,
        &seen.meta.setup.sampler,
        &desk_eval(vec![]),
    )
    .map_err(|e| e.to_string())?;
    let cells: Vec<String> = cmp
        .gaps
        .iter()
        .map(|&(n, g)| {
            let s = cmp.report.find("seen", &task.label(), n).unwrap().mean;
            let u = cmp.report.find("unseen", &task.label(), n).unwrap().mean;
            format!("N={n}: seen {s:.3} unseen {u:.3} gap {g:+.3}")
        })
        .collect();
    let detail = format!("{}; holdout training {secs:.0}s", cells.join("; "));
    let worst = cmp
        .gaps
        .iter()
        .map(|g| g.1)
        .fold(f64::NEG_INFINITY, f64::max);
    ensure!(
        worst <= HOLDOUT_MARGIN,
        "largest gap {worst:.3} exceeds {HOLDOUT_MARGIN}: {detail}"
    );
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 9. Persistence

fn criterion_9() -> Outcome {
    let cfg = ModelConfig::default();
    let mut setup = RunSetup::default();
    setup.train.steps_max = 2;
    setup.train.val_episodes = 4;
    let mut t = Trainer::new(setup).map_err(|e| e.to_string())?;
    let mut ck = t.run(|_, _| Ok(())).map_err(|e| e.to_string())?.last;
    ck.model = Model::new(ModelKind::Neuralizer, &cfg, 21).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.nlz");
    save_checkpoint(&ck, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let s = cfg.image_size;
    let mut r = rng::stream(9, 0);
    let x = Tensor::from_fn(vec![2, 3, s, s], |_| r.random::<f32>());
    let ctx = Tensor::from_fn(vec![3, 2, 4, s, s], |_| r.random::<f32>());
    let a = ck.model.predict(&x, &ctx).unwrap();
    let b = back.model.predict(&x, &ctx).unwrap();
    ensure!(
        a.data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()),
        "reloaded forward pass differs"
    );

    let bytes = encode_checkpoint(&ck).unwrap();
    let mut rejected = 0;
    for cut in [0, 5, 64, bytes.len() / 3, bytes.len() - 2] {
        ensure!(
            read_checkpoint(&bytes[..cut]).is_err(),
            "truncation at {cut} accepted"
        );
        rejected += 1;
    }
    for pos in [0, 4, 20, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x11;
        ensure!(
            read_checkpoint(&bad[..]).is_err(),
            "flipped byte {pos} accepted"
        );
        rejected += 1;
    }
    let mut ntf = Vec::new();
    write_ntf_to(&a, &mut ntf).unwrap();
    ensure!(read_ntf_from(&ntf[..]).is_ok(), "valid NTF1 rejected");
    for cut in [3, 7, ntf.len() - 1] {
        let e = read_ntf_from(&ntf[..cut]);
        ensure!(
            matches!(e, Err(TensorError::Format(_))),
            "truncated NTF1 at {cut}: {:?}",
            e.map(|_| ())
        );
        rejected += 1;
    }

    let mut worst = 0.0f64;
    for seed in 0..10 {
        let (h, w) = (16, 32);
        let mut r = rng::stream(seed, 9);
        let img: Vec<f32> = (0..h * w).map(|_| r.random()).collect();
        let spec = fft2_real(&img, h, w).unwrap();
        let mut back = spec.clone();
        fft2(&mut back, h, w, Direction::Inverse).unwrap();
        for (a, b) in img.iter().zip(&back) {
            worst = worst.max((*a as f64 - b.re).abs()).max(b.im.abs());
        }
        let e_x: f64 = img.iter().map(|&v| (v as f64).powi(2)).sum();
        let e_f: f64 = spec.iter().map(|c| c.norm_sqr()).sum::<f64>() / (h * w) as f64;
        ensure!(
            (e_x - e_f).abs() <= 1e-6 * e_x,
            "Parseval off: {e_x} vs {e_f}"
        );
    }
    ensure!(worst <= 1e-6, "FFT round trip error {worst:.2e}");
    Ok(format!(
        "bit-identical reload, {rejected} damaged files rejected, FFT round trip {worst:.1e}"
    ))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("autodiff", criterion_1),
        ("architecture invariants", criterion_2),
        ("param/FLOP accounting", criterion_3),
        ("loss/metric oracles", criterion_4),
        ("augmentation algebra", criterion_5),
        ("sampler statistics", criterion_6),
        ("desk training trend", criterion_7),
        ("holdout generalization", criterion_8),
        ("persistence", criterion_9),
    ];
    let only: Option<HashSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            report(&format!("criterion {id} ({name}): SKIP"));
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => report(&format!("criterion {id} ({name}): PASS  {detail}")),
            Err(why) => {
                report(&format!("criterion {id} ({name}): FAIL  {why}"));
                failed.push(id);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
