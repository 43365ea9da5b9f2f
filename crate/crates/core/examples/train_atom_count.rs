//! Trains the molecule-aware generator on atom counting with the desk
//! preset, logging loss, checkpointing and auditing the frozen groups.
//! `cargo run --release --example train_atom_count -- 1500`

use mora::checkpoint;
use mora::config::RunConfig;
use mora::data::{synth_dataset, SynthTask};
use mora::train::{train, AdaptationKind, TrainOptions};

fn main() -> anyhow::Result<()> {
    let mut config = RunConfig::default();
    config.training.steps = std::env::args().nth(1).map_or(Ok(1500), |s| s.parse())?;
    let data = synth_dataset(SynthTask::AtomCount, 2000, config.seed);
    let dir = tempfile::tempdir()?;
    let (ckpt, log) = (dir.path().join("atom_count.ckpt"), dir.path().join("loss.csv"));
    let out = train(
        &config,
        &data,
        AdaptationKind::Dynamic,
        TrainOptions {
            checkpoint: Some(ckpt.clone()),
            log: Some(log.clone()),
            on_step: Some(Box::new(|s| {
                if s.step % 250 == 0 {
                    println!("step {:>5}  lr {:.2e}  loss {:.4}", s.step, s.lr, s.loss);
                }
            })),
        },
    )?;
    println!("final loss (last 5%): {:.4}", out.final_loss(out.log.len() / 20).unwrap_or(f64::NAN));
    println!("frozen groups intact: {}, generator changed: {}", out.audit.frozen_intact(), out.audit.adaptation_changed());
    let (reloaded, _) = checkpoint::load(&ckpt)?;
    println!("checkpoint round-trips: {}", reloaded == out.model);
    println!("loss log rows: {}", std::fs::read_to_string(&log)?.lines().count() - 1);
    Ok(())
}
