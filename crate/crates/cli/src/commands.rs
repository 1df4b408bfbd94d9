use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use neuralizer::augment::apply_tree;
use neuralizer::datagen::{Batch, Sampler, TaskKind, TaskPins};
use neuralizer::evaluate::pgm::{episode_montage, Image};
use neuralizer::evaluate::{
    eval_curves, eval_episodes, holdout_compare, infer, infer_bootstrap, EvalReport, Evaluated,
    Jitter,
};
use neuralizer::model::{baseline_cost, neuralizer_cost, ModelConfig, ModelKind};
use neuralizer::rng;
use neuralizer::tensor::{read_ntf, write_ntf, Tensor};
use neuralizer::train::{load_checkpoint, save_checkpoint, BaselineSpec, Checkpoint, Trainer};

use crate::config::RunConfig;
use crate::{CliError, EvalArgs, InferArgs, ParamsArgs, PreviewArgs, TrainArgs};

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

fn history_csv(ck: &Checkpoint) -> String {
    let mut s = String::from("step,train_loss,val_loss\n");
    for r in &ck.meta.history {
        s += &format!("{},{:.6},{:.6}\n", r.step, r.train_loss, r.val_loss);
    }
    s
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(h) = &a.holdout {
        cfg.sampler.holdout = h.parse()?;
    }
    if let Some(w) = a.workers {
        cfg.train.workers = w;
    }
    if let Some(s) = a.steps {
        cfg.train.steps_max = s;
    }
    if let Some(d) = a.run_dir {
        cfg.paths.run_dir = d;
    }
    let pins = TaskPins {
        classes: a.pins.classes,
        modalities: a.pins.modalities,
        target_modality: a.pins.target_modality,
        ..TaskPins::default()
    };
    match a.baseline.as_deref() {
        Some([task, n]) => {
            let n_subjects = n
                .parse()
                .map_err(|_| CliError::Usage(format!("baseline size {n:?} is not a count")))?;
            cfg.baseline = Some(BaselineSpec {
                task: task.parse()?,
                n_subjects,
                pins,
            });
        }
        Some(_) => return usage("--baseline takes TASK and N"),
        None if pins != TaskPins::default() => {
            return usage("--classes, --modalities and --target-modality apply to --baseline only")
        }
        None => {}
    }
    let setup = cfg.setup();
    setup.validate()?;
    let dir = cfg.paths.run_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let mut trainer = if a.resume {
        let last = load_checkpoint(dir.join("last.nlz"))?;
        let mut recorded = last.meta.setup.clone();
        recorded.train.steps_max = setup.train.steps_max;
        recorded.train.workers = setup.train.workers;
        if recorded != setup {
            return usage(format!(
                "{} was trained with a different configuration",
                dir.join("last.nlz").display()
            ));
        }
        let best = load_checkpoint(dir.join("best.nlz")).ok();
        let mut t = Trainer::resume(last, best)?;
        t.set_steps_max(setup.train.steps_max);
        t
    } else {
        Trainer::new(setup)?
    };
    std::fs::write(dir.join("config.json"), cfg.to_json())?;
    let t0 = Instant::now();
    let outcome = trainer.run(|ck, improved| {
        let row = ck.meta.history.last().expect("validation row");
        eprintln!(
            "step {:6}  train {:10.4}  val {:10.4}{}  {:6.0}s",
            row.step,
            row.train_loss,
            row.val_loss,
            if improved { "  best" } else { "" },
            t0.elapsed().as_secs_f64()
        );
        save_checkpoint(ck, dir.join("last.nlz"))?;
        if improved {
            save_checkpoint(ck, dir.join("best.nlz"))?;
        }
        std::fs::write(dir.join("history.csv"), history_csv(ck))?;
        Ok(())
    })?;
    // Runs that end without a validation still leave a loadable checkpoint.
    save_checkpoint(&outcome.last, dir.join("last.nlz"))?;
    if !dir.join("best.nlz").exists() {
        save_checkpoint(&outcome.best, dir.join("best.nlz"))?;
    }
    std::fs::write(dir.join("history.csv"), history_csv(&outcome.last))?;
    let m = &outcome.last.meta;
    println!("run directory: {}", dir.display());
    println!("steps: {}", m.step);
    println!(
        "best validation loss: {}",
        m.best_val.map_or("n/a".into(), |v| format!("{v:.6}"))
    );
    println!("stopped early: {}", outcome.stopped_early);
    if !m.setup.sampler.holdout.is_empty() {
        println!("holdout: {}", m.setup.sampler.holdout);
    }
    let counts: Vec<String> = TaskKind::ALL
        .iter()
        .map(|k| format!("{k}={}", m.task_counts.get(k).copied().unwrap_or(0)))
        .collect();
    println!("episodes per task: {}", counts.join(" "));
    Ok(())
}

fn model_id(path: &Path) -> String {
    path.display().to_string().replace(',', "_")
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(b) = a.bootstrap {
        cfg.eval.bootstrap = b;
    }
    if let Some(w) = a.workers {
        cfg.eval.workers = w;
    }
    if let Some(d) = a.out_dir {
        cfg.paths.eval_dir = d;
    }
    cfg.eval.validate()?;
    let want = cfg.sampler.phantom.image_size;
    let mut neuralizers = Vec::new();
    let mut baselines: BTreeMap<String, Vec<Checkpoint>> = BTreeMap::new();
    for p in &a.checkpoints {
        let ck = load_checkpoint(p)?;
        let size = ck.meta.model.image_size;
        if size != want {
            return usage(format!(
                "{} expects {size}x{size} images, the config evaluates {want}x{want}",
                p.display()
            ));
        }
        match &ck.meta.setup.baseline {
            None => neuralizers.push((model_id(p), ck)),
            Some(b) => {
                let task = neuralizer::evaluate::EvalTask {
                    kind: b.task,
                    pins: b.pins.clone(),
                };
                baselines.entry(task.label()).or_default().push(ck);
            }
        }
    }
    let dir = cfg.paths.eval_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let report = if a.compare {
        if neuralizers.len() != 2 || !baselines.is_empty() {
            return usage(
                "--compare takes exactly two Neuralizer checkpoints: seen, then held-out",
            );
        }
        let mut report = EvalReport::default();
        let mut gaps = String::from("task,n,gap\n");
        for task in &cfg.eval.tasks {
            let c = holdout_compare(
                &neuralizers[0].1,
                &neuralizers[1].1,
                task,
                &cfg.sampler,
                &cfg.eval,
            )?;
            for mut row in c.report.rows {
                row.model = if row.model == "seen" {
                    neuralizers[0].0.clone()
                } else {
                    neuralizers[1].0.clone()
                };
                report.rows.push(row);
            }
            for (n, g) in c.gaps {
                gaps += &format!("{},{n},{g:.6}\n", task.label());
            }
        }
        std::fs::write(dir.join("gaps.csv"), &gaps)?;
        print!("{gaps}");
        report
    } else {
        let mut models = Vec::new();
        for (id, ck) in &neuralizers {
            models.push(Evaluated::neuralizer(id.clone(), ck)?);
        }
        for (label, cks) in &baselines {
            models.push(Evaluated::baselines(format!("baseline:{label}"), cks)?);
        }
        eval_curves(&models, &cfg.sampler, &cfg.eval)?
    };
    let csv = report.to_csv();
    std::fs::write(dir.join("report.csv"), &csv)?;
    print!("{csv}");
    if cfg.eval.dump_episodes > 0 {
        if let Some((_, ck)) = neuralizers.first() {
            dump_montages(ck, &cfg, &dir)?;
        }
    }
    Ok(())
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

fn dump_montages(ck: &Checkpoint, cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let n = cfg.eval.sizes.iter().copied().max().unwrap_or(1);
    for task in &cfg.eval.tasks {
        let eps = eval_episodes(&cfg.sampler, task, n, cfg.eval.dump_episodes, cfg.eval.seed)?;
        for (i, ep) in eps.iter().enumerate() {
            let b = Batch::<f32>::from_episodes(std::slice::from_ref(ep))?;
            let p = infer(&ck.model, &b.x, &b.ctx, b.loss)?;
            let pred = p.output().unstack().remove(0);
            let name = format!("montage_{}_{i}.pgm", sanitize(&task.label()));
            episode_montage(ep, Some(&pred))?.write_pgm(dir.join(name))?;
        }
    }
    Ok(())
}

pub fn infer_cmd(a: InferArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    if a.context.is_empty() && ck.meta.kind == ModelKind::Neuralizer {
        return usage("the context set is empty: pass at least one --context file");
    }
    let s = ck.meta.model.image_size;
    let x = read_ntf(&a.input)?.to_precision::<f32>();
    if x.shape() != [3, s, s] && x.shape() != [1, 3, s, s] {
        return usage(format!(
            "input {} has shape {:?}, expected [3, {s}, {s}]",
            a.input.display(),
            x.shape()
        ));
    }
    let x = x.reshape(vec![1, 3, s, s])?;
    let mut pairs = Vec::with_capacity(a.context.len());
    for p in &a.context {
        let t = read_ntf(p)?.to_precision::<f32>();
        if t.shape() != [4, s, s] {
            return usage(format!(
                "context {} has shape {:?}, expected [4, {s}, {s}]",
                p.display(),
                t.shape()
            ));
        }
        pairs.push(t);
    }
    let n = pairs.len();
    let ctx = if pairs.is_empty() {
        Tensor::zeros(vec![0, 1, 4, s, s])
    } else {
        Tensor::stack(&pairs)?.reshape(vec![n, 1, 4, s, s])?
    };
    let loss = a.task.loss_kind();
    let pred = if a.bootstrap == 0 {
        infer(&ck.model, &x, &ctx, loss)?
    } else {
        let jitter = Jitter {
            max_rotation_deg: a.jitter_deg,
            max_shift: a.jitter_px,
        };
        let mut r = rng::stream(a.seed, 0);
        infer_bootstrap(&ck.model, &x, &ctx, loss, a.bootstrap, &jitter, &mut r)?
    };
    let out = pred.output().clone().reshape(vec![1, s, s])?;
    write_ntf(&out, &a.out)?;
    Image::from_tensor(&out)?.write_pgm(a.out.with_extension("pgm"))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn preview(a: PreviewArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    cfg.sampler.validate()?;
    cfg.augment_tree.validate()?;
    if a.context_size == 0 {
        return usage("--context-size must be at least 1");
    }
    let sampler = Sampler::new(
        std::sync::Arc::new(cfg.sampler.test_pool()?),
        cfg.sampler.clone(),
    )?;
    std::fs::create_dir_all(&a.out_dir)?;
    let kinds = a.task.map_or(TaskKind::ALL.to_vec(), |k| vec![k]);
    for kind in kinds {
        let seed = rng::derive(a.seed, &[kind.index() as u64]);
        let ep = sampler.build_episode(kind, a.context_size, &mut rng::stream(seed, 0))?;
        let mut written: Vec<PathBuf> = vec![a.out_dir.join(format!("{kind}.pgm"))];
        episode_montage(&ep, None)?.write_pgm(&written[0])?;
        for v in 0..a.variants {
            let aug = apply_tree(&ep, &cfg.augment_tree, rng::derive(seed, &[1 + v as u64]))?;
            let path = a.out_dir.join(format!("{kind}_aug{v}.pgm"));
            episode_montage(&aug, None)?.write_pgm(&path)?;
            written.push(path);
        }
        println!("{kind}: {} montages", written.len());
    }
    Ok(())
}

pub fn params(a: ParamsArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let model = if a.paper {
        ModelConfig::paper()
    } else {
        cfg.model.clone()
    };
    model
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if a.context_size == 0 {
        return usage("--context-size must be at least 1");
    }
    let n = a.context_size;
    println!(
        "channels {}  stages {}  image {}x{}  context {n}",
        model.channels, model.stages, model.image_size, model.image_size
    );
    println!("{:<12}{:>14}{:>16}", "model", "params", "gflops");
    let rows = [
        ("neuralizer", neuralizer_cost(&model, n)),
        ("baseline", baseline_cost(&model)),
    ];
    for (name, c) in rows {
        println!("{name:<12}{:>14}{:>16.3}", c.params, c.flops() / 1e9);
    }
    Ok(())
}
