use neuralizer::datagen::{Batch, Holdout, SamplerConfig, TaskKind, TaskPins};
use neuralizer::evaluate::pgm::{episode_montage, read_pgm, Image};
use neuralizer::evaluate::*;
use neuralizer::losses::LossKind;
use neuralizer::model::{ModelConfig, ModelKind};
use neuralizer::rng;
use neuralizer::tensor::Tensor;
use neuralizer::train::{BaselineSpec, Checkpoint, RunSetup, Trainer};
use neuralizer::Error;

fn tiny_setup(seed: u64) -> RunSetup {
    let mut s = RunSetup::default();
    s.model = ModelConfig {
        channels: 8,
        image_size: 16,
        ..ModelConfig::default()
    };
    s.sampler.phantom.image_size = 16;
    s.sampler.train_subjects = 48;
    s.sampler.val_subjects = 24;
    s.sampler.test_subjects = 48;
    s.sampler.context_max = 4;
    s.train.batch_size = 2;
    s.train.val_interval = 2;
    s.train.val_episodes = 4;
    s.seed = seed;
    s
}

fn checkpoint(setup: RunSetup) -> Checkpoint {
    let mut t = Trainer::new(setup).unwrap();
    t.set_steps_max(2);
    t.run(|_, _| Ok(())).unwrap().last
}

fn tiny_eval(tasks: Vec<EvalTask>) -> EvalConfig {
    EvalConfig {
        sizes: vec![1, 2, 4],
        episodes_per_cell: 20,
        tasks,
        ..EvalConfig::default()
    }
}

fn batch(cfg: &SamplerConfig, kind: TaskKind, n: usize) -> Batch<f32> {
    let eps = eval_episodes(cfg, &EvalTask::new(kind), n, 3, 1).unwrap();
    Batch::from_episodes(&eps).unwrap()
}

#[test]
fn infer_matches_forward_pass() {
    let ck = checkpoint(tiny_setup(1));
    let cfg = &ck.meta.setup.sampler;
    let b = batch(cfg, TaskKind::DenoiseBias, 3);
    let raw = ck.model.predict(&b.x, &b.ctx).unwrap();
    let p = infer(&ck.model, &b.x, &b.ctx, LossKind::Mse).unwrap();
    assert_eq!(p.soft, raw);
    assert!(p.mask.is_none());
    assert_eq!(p.output(), &raw);

    let b = batch(cfg, TaskKind::Segmentation, 2);
    let p = infer(&ck.model, &b.x, &b.ctx, LossKind::Dice).unwrap();
    let mask = p.mask.as_ref().unwrap();
    assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(p.soft.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let again = infer(&ck.model, &b.x, &b.ctx, LossKind::Dice).unwrap();
    assert_eq!(again.soft, p.soft);
}

#[test]
fn context_sizes_one_to_eight_are_accepted() {
    let ck = checkpoint(tiny_setup(1));
    for n in [1, 8] {
        let b = batch(&ck.meta.setup.sampler, TaskKind::Inpainting, n);
        let p = infer(&ck.model, &b.x, &b.ctx, LossKind::Mse).unwrap();
        assert_eq!(p.soft.shape(), &[3, 1, 16, 16]);
    }
    let b = batch(&ck.meta.setup.sampler, TaskKind::Inpainting, 1);
    let empty = Tensor::zeros(vec![0, 3, 4, 16, 16]);
    assert!(infer(&ck.model, &b.x, &empty, LossKind::Mse).is_err());
    let mut r = rng::stream(0, 0);
    assert!(infer_bootstrap(
        &ck.model,
        &b.x,
        &empty,
        LossKind::Mse,
        2,
        &Jitter::default(),
        &mut r
    )
    .is_err());
}

#[test]
fn bootstrap_identity_equals_single_pass() {
    let ck = checkpoint(tiny_setup(2));
    for (kind, loss) in [
        (TaskKind::Segmentation, LossKind::Dice),
        (TaskKind::DenoiseBias, LossKind::Mse),
    ] {
        let b = batch(&ck.meta.setup.sampler, kind, 4);
        let plain = infer(&ck.model, &b.x, &b.ctx, loss).unwrap();
        let boot = bootstrap_average(&ck.model, &b.x, &b.ctx, loss, &[Replicate::identity(4, 16)])
            .unwrap();
        for (a, c) in plain.soft.data().iter().zip(boot.soft.data()) {
            assert!((a - c).abs() <= 1e-6);
        }
    }
}

#[test]
fn reordering_context_changes_nothing() {
    let ck = checkpoint(tiny_setup(3));
    let b = batch(&ck.meta.setup.sampler, TaskKind::DenoiseBias, 4);
    let id = Replicate::identity(4, 16);
    let mut rev = id.clone();
    rev.indices.reverse();
    let a = bootstrap_average(&ck.model, &b.x, &b.ctx, LossKind::Mse, &[id]).unwrap();
    let r = bootstrap_average(&ck.model, &b.x, &b.ctx, LossKind::Mse, &[rev]).unwrap();
    for (x, y) in a.soft.data().iter().zip(r.soft.data()) {
        assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
    }
}

#[test]
fn bootstrap_is_seeded_and_needs_replicates() {
    let ck = checkpoint(tiny_setup(4));
    let b = batch(&ck.meta.setup.sampler, TaskKind::Segmentation, 4);
    let j = Jitter::default();
    let run = |seed| {
        let mut r = rng::stream(seed, 0);
        infer_bootstrap(&ck.model, &b.x, &b.ctx, LossKind::Dice, 3, &j, &mut r).unwrap()
    };
    assert_eq!(run(7).soft, run(7).soft);
    assert_ne!(run(7).soft, run(8).soft);
    let mut r = rng::stream(0, 0);
    assert!(infer_bootstrap(&ck.model, &b.x, &b.ctx, LossKind::Dice, 0, &j, &mut r).is_err());
    assert!(bootstrap_average(&ck.model, &b.x, &b.ctx, LossKind::Dice, &[]).is_err());
    let bad = Replicate::identity(6, 16);
    assert!(bootstrap_average(&ck.model, &b.x, &b.ctx, LossKind::Dice, &[bad]).is_err());
}

#[test]
fn task_labels_and_metrics() {
    assert_eq!(
        EvalTask::new(TaskKind::Segmentation).label(),
        "segmentation"
    );
    let t = EvalTask::new(TaskKind::Segmentation).with_classes(vec![4]);
    assert_eq!(t.label(), "segmentation[classes=4]");
    assert_eq!(t.metric(), MetricKind::Dice);
    assert_eq!(
        EvalTask::new(TaskKind::Inpainting).metric(),
        MetricKind::Psnr
    );
    assert_eq!(mean_std(&[1.0, 2.0, 3.0]), (2.0, 1.0));
    let cfg = EvalConfig {
        episodes_per_cell: 19,
        ..EvalConfig::default()
    };
    assert!(cfg.validate().is_err());
    assert!(EvalConfig::default().validate().is_ok());
}

#[test]
fn curves_are_complete_and_reproducible() {
    let ck = checkpoint(tiny_setup(5));
    let models = [Evaluated::neuralizer("nz", &ck).unwrap()];
    let tasks = vec![
        EvalTask::new(TaskKind::Segmentation),
        EvalTask::new(TaskKind::DenoiseBias),
    ];
    let cfg = tiny_eval(tasks);
    let sampler = &ck.meta.setup.sampler;
    let a = eval_curves(&models, sampler, &cfg).unwrap();
    assert_eq!(a.rows.len(), 2 * 3);
    assert!(a
        .rows
        .iter()
        .all(|r| r.n_episodes == 20 && r.scores.len() == 20));
    assert!(a.rows.iter().all(|r| !r.holdout));
    let csv = a.to_csv();
    assert!(csv.starts_with("model,task,holdout,n,metric,mean,std,n_episodes\n"));
    assert_eq!(csv.lines().count(), 7);
    let b = eval_curves(&models, sampler, &cfg).unwrap();
    assert_eq!(csv, b.to_csv());
    let par = eval_curves(
        &[
            Evaluated::neuralizer("a", &ck).unwrap(),
            Evaluated::neuralizer("b", &ck).unwrap(),
        ],
        sampler,
        &EvalConfig {
            workers: 2,
            ..cfg.clone()
        },
    )
    .unwrap();
    let seg = a.find("nz", "segmentation", 2).unwrap();
    assert_eq!(par.find("b", "segmentation", 2).unwrap().mean, seg.mean);
    assert!((0.0..=1.0).contains(&seg.mean));
}

#[test]
fn curves_reject_mismatched_image_size() {
    let ck = checkpoint(tiny_setup(5));
    let models = [Evaluated::neuralizer("nz", &ck).unwrap()];
    let mut sampler = ck.meta.setup.sampler.clone();
    sampler.phantom.image_size = 32;
    let cfg = tiny_eval(vec![EvalTask::new(TaskKind::DenoiseBias)]);
    assert!(matches!(
        eval_curves(&models, &sampler, &cfg),
        Err(Error::Config(_))
    ));
}

#[test]
fn baselines_are_scored_by_training_size() {
    let mut setups = Vec::new();
    for n in [1, 2] {
        let mut s = tiny_setup(6);
        s.baseline = Some(BaselineSpec {
            task: TaskKind::Segmentation,
            n_subjects: n,
            pins: TaskPins {
                classes: Some(vec![3]),
                ..TaskPins::default()
            },
        });
        setups.push(checkpoint(s));
    }
    let task = EvalTask::new(TaskKind::Segmentation).with_classes(vec![3]);
    let base = Evaluated::baselines("base", &setups).unwrap();
    assert!(Evaluated::neuralizer("x", &setups[0]).is_err());
    let sampler = &setups[0].meta.setup.sampler;
    let cfg = EvalConfig {
        sizes: vec![1, 2],
        ..tiny_eval(vec![task.clone()])
    };
    let rep = eval_curves(std::slice::from_ref(&base), sampler, &cfg).unwrap();
    assert_eq!(rep.rows.len(), 2);
    assert!(rep.find("base", &task.label(), 2).is_some());
    let missing = tiny_eval(vec![task]);
    assert!(matches!(
        eval_curves(&[base], sampler, &missing),
        Err(Error::Config(_))
    ));
}

#[test]
fn holdout_comparison_rules() {
    let seen = checkpoint(tiny_setup(7));
    let mut s = tiny_setup(7);
    s.sampler.holdout = "class:4".parse::<Holdout>().unwrap();
    let unseen = checkpoint(s);
    let task = EvalTask::new(TaskKind::Segmentation).with_classes(vec![4]);
    let cfg = tiny_eval(vec![]);
    let sampler = &seen.meta.setup.sampler;

    let same = holdout_compare(&seen, &seen, &task, sampler, &cfg).unwrap();
    assert_eq!(same.gaps.len(), 3);
    assert!(same.gaps.iter().all(|&(_, g)| g == 0.0));

    let cmp = holdout_compare(&seen, &unseen, &task, sampler, &cfg).unwrap();
    assert_eq!(cmp.report.rows.len(), 6);
    let flags: Vec<bool> = cmp.report.rows.iter().map(|r| r.holdout).collect();
    assert_eq!(flags, [false, false, false, true, true, true]);

    // Swapped roles: the seen model must not have the task held out.
    assert!(matches!(
        holdout_compare(&unseen, &seen, &task, sampler, &cfg),
        Err(Error::Config(_))
    ));
    let other = EvalTask::new(TaskKind::Segmentation).with_classes(vec![3]);
    assert!(matches!(
        holdout_compare(&seen, &unseen, &other, sampler, &cfg),
        Err(Error::Config(_))
    ));
}

#[test]
fn evaluation_ignores_training_holdout_for_episodes() {
    let mut cfg = tiny_setup(8).sampler;
    cfg.holdout = "task:inpainting".parse().unwrap();
    let eps = eval_episodes(&cfg, &EvalTask::new(TaskKind::Inpainting), 4, 5, 3).unwrap();
    assert_eq!(eps.len(), 5);
    assert!(eps
        .iter()
        .all(|e| e.kind == TaskKind::Inpainting && e.context_size() == 4));
    let again = eval_episodes(&cfg, &EvalTask::new(TaskKind::Inpainting), 4, 5, 3).unwrap();
    assert_eq!(eps, again);
}

#[test]
fn pgm_round_trip_and_montage() {
    let mut img = Image::new(3, 5);
    img.data
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v = i as f32 / 14.0);
    let back = read_pgm(&img.to_pgm()).unwrap();
    assert_eq!((back.h, back.w), (3, 5));
    for (a, b) in img.data.iter().zip(&back.data) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
    assert!(read_pgm(b"P6\n1 1\n255\n\0").is_err());
    assert!(read_pgm(b"P5\n2 2\n255\n\0").is_err());

    let cfg = tiny_setup(9).sampler;
    let ep = &eval_episodes(&cfg, &EvalTask::new(TaskKind::DenoiseBias), 2, 1, 0).unwrap()[0];
    let m = episode_montage(ep, None).unwrap();
    assert_eq!(m.h, 3 * 16 + 2 * 2);
    assert_eq!(m.w, 5 * 16 + 4 * 2);
    let pred = Tensor::zeros(vec![1, 16, 16]);
    assert!(episode_montage(ep, Some(&pred)).is_ok());
    assert_eq!(ModelKind::Neuralizer, ModelKind::Neuralizer);
}
