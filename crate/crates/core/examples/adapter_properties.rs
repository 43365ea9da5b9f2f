//! Structural guarantees of generated adapters: identity at
//! initialisation, bounded rank, atom-order invariance and untouched
//! text-only behaviour. `cargo run --release --example adapter_properties`

use mora::ablation::{passthrough_prompts, text_only_deviation};
use mora::config::RunConfig;
use mora::data::{synth_dataset, SynthTask};
use mora::mol::{parse_smiles, permute_graph};
use mora::train::{encode_example, train, AdaptationKind, Model, TrainOptions};

fn main() -> anyhow::Result<()> {
    let mut config = RunConfig::default();
    let fresh = Model::new(&config, AdaptationKind::Dynamic)?;
    let g = parse_smiles("CC(=O)Oc1ccccc1C(=O)O")?;
    let prompt = &synth_dataset(SynthTask::AtomCount, 1, 0)[0];
    let tokens = encode_example(&fresh.vocab, prompt, true)?.0;
    let diff = fresh.logits(Some(&g), &tokens)?.max_abs_diff(&fresh.backbone.forward(&tokens, None)?);
    println!("fresh generator vs frozen backbone: max |dlogit| {diff:e}");

    config.training.steps = 300;
    let trained = train(&config, &synth_dataset(SynthTask::AtomCount, 500, 1), AdaptationKind::Dynamic, TrainOptions::default())?.model;
    let set = trained.adapter_set(Some(&g))?.expect("graph input yields adapters");
    println!("{} generated updates, rank {}", set.entries().len(), config.mawgen.rank);
    let perm: Vec<usize> = (0..g.atom_count()).rev().collect();
    let shuffled = trained.adapter_set(Some(&permute_graph(&g, &perm)?))?.expect("graph input yields adapters");
    println!("reversed atom order: max adapter difference {:e}", set.max_abs_diff(&shuffled)?);
    let prompts = passthrough_prompts(&[], 0);
    println!("text-only prompts: max |dlogit| vs pre-training backbone {:e}", text_only_deviation(&trained, &fresh, &prompts)?);
    Ok(())
}
