//! Context-size curves for trained checkpoints on a few reference tasks.
//!
//! `cargo run --release --example desk_eval -- <ckpt.nlz>...`

use neuralizer::datagen::TaskKind;
use neuralizer::evaluate::{eval_curves, eval_episodes, mean_std, EvalConfig, EvalTask, Evaluated};
use neuralizer::losses::psnr;
use neuralizer::train::load_checkpoint;

fn main() -> neuralizer::Result<()> {
    let paths: Vec<String> = std::env::args().skip(1).collect();
    let mut models = Vec::new();
    let mut sampler = None;
    for p in &paths {
        let ck = load_checkpoint(p)?;
        sampler.get_or_insert(ck.meta.setup.sampler.clone());
        models.push(Evaluated::neuralizer(p.clone(), &ck)?);
    }
    let sampler = sampler.expect("at least one checkpoint");
    let cfg = EvalConfig {
        tasks: vec![
            EvalTask::new(TaskKind::Segmentation),
            EvalTask::new(TaskKind::Segmentation).with_classes(vec![4]),
            EvalTask::new(TaskKind::DenoiseBias),
            EvalTask::new(TaskKind::SkullStripping),
            EvalTask::new(TaskKind::Inpainting),
        ],
        ..EvalConfig::default()
    };
    let report = eval_curves(&models, &sampler, &cfg)?;
    print!("{}", report.to_csv());
    let eps = eval_episodes(&sampler, &cfg.tasks[2], 8, cfg.episodes_per_cell, cfg.seed)?;
    let input: Vec<f64> = eps
        .iter()
        .map(|e| psnr(&e.query.input.unstack()[0], &e.query.target.unstack()[0]).unwrap())
        .collect();
    println!("denoise input psnr {:?}", mean_std(&input));
    Ok(())
}
