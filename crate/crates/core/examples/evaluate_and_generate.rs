//! Trains briefly on a mix of tasks, then reports every metric on a
//! held-out set and decodes answers for a few molecules.
//! `cargo run --release --example evaluate_and_generate`

use mora::config::RunConfig;
use mora::data::{synth_dataset, SynthTask, ATOM_COUNT_INSTRUCTION};
use mora::eval::evaluate;
use mora::train::{train, AdaptationKind, TrainOptions};

fn main() -> anyhow::Result<()> {
    let mut config = RunConfig::default();
    config.training.steps = 1500;
    let mut train_set = Vec::new();
    let mut held_out = Vec::new();
    for task in SynthTask::ALL {
        train_set.extend(synth_dataset(task, 400, 1));
        held_out.extend(synth_dataset(task, 20, 2));
    }
    let out = train(&config, &train_set, AdaptationKind::Dynamic, TrainOptions::default())?;
    let (report, predictions) = evaluate(&out.model, &held_out)?;
    println!("{}", report.to_text());
    for p in predictions.iter().step_by(20) {
        println!("{p:?}");
    }
    for smiles in ["CCO", "C1CCCCC1", "CC(C)C(=O)N"] {
        let answer = out.model.generate(Some(smiles), ATOM_COUNT_INSTRUCTION)?;
        println!("{smiles}: {answer}");
    }
    Ok(())
}
