//! Draws a few examples of every synthetic task and writes a mixed JSONL
//! file. `cargo run --example synthetic_tasks -- out.jsonl`

use mora::data::{load_dataset, synth_dataset, write_dataset, SynthTask};

fn main() -> anyhow::Result<()> {
    let mut all = Vec::new();
    for (i, task) in SynthTask::ALL.into_iter().enumerate() {
        let data = synth_dataset(task, 3, i as u64);
        println!("{task}");
        for ex in &data {
            println!("  smiles {:<24} {:?} -> {:?}", ex.smiles.as_deref().unwrap_or("-"), ex.instruction, ex.answer);
        }
        all.extend(data);
    }
    let dir = tempfile::tempdir()?;
    let path = std::env::args().nth(1).map_or_else(|| dir.path().join("mixed.jsonl"), Into::into);
    write_dataset(&path, &all)?;
    assert_eq!(load_dataset(&path)?, all);
    println!("wrote {} examples to {}", all.len(), path.display());
    Ok(())
}
