//! Train the desk configuration and keep its checkpoints.
//!
//! `cargo run --release --example desk_run -- <out_dir> [seed] [lr] [steps] [holdout] [sigma2]`

use std::path::PathBuf;
use std::time::Instant;

use neuralizer::train::{save_checkpoint, RunSetup, Trainer};

fn main() -> neuralizer::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map(String::as_str).unwrap_or("desk_run"));
    let mut setup = RunSetup::default();
    if let Some(s) = args.get(1) {
        setup.seed = s.parse().expect("seed");
    }
    if let Some(lr) = args.get(2) {
        setup.train.adam.lr = lr.parse().expect("lr");
    }
    if let Some(n) = args.get(3) {
        setup.train.steps_max = n.parse().expect("steps");
    }
    if let Some(h) = args.get(4) {
        if h != "-" {
            setup.sampler.holdout = h.parse()?;
        }
    }
    if let Some(s2) = args.get(5) {
        setup.train.loss.sigma2 = s2.parse().expect("sigma2");
    }
    std::fs::create_dir_all(&out)?;
    let t0 = Instant::now();
    let mut trainer = Trainer::new(setup)?;
    let outcome = trainer.run(|ck, improved| {
        let row = ck.meta.history.last().expect("row");
        println!(
            "step {:5}  train {:.4}  val {:.4}{}  {:.0}s",
            row.step,
            row.train_loss,
            row.val_loss,
            if improved { " *" } else { "" },
            t0.elapsed().as_secs_f64()
        );
        save_checkpoint(ck, out.join("last.nlz"))?;
        if improved {
            save_checkpoint(ck, out.join("best.nlz"))?;
        }
        Ok(())
    })?;
    println!("done, stopped early: {}", outcome.stopped_early);
    Ok(())
}
