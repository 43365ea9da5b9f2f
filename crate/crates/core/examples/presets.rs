//! Shows the desk and paper presets, applies a config override and
//! counts trainable parameters. `cargo run --example presets`

use mora::config::{Preset, RunConfig};
use mora::train::{AdaptationKind, Model};

fn main() -> anyhow::Result<()> {
    for preset in [Preset::Desk, Preset::Paper] {
        let c = RunConfig::preset(preset);
        println!("# {preset}");
        for (k, v) in c.entries() {
            println!("{k} = {v}");
        }
        println!();
    }
    let c = RunConfig::default().parse_onto("# a deeper generator\nmawgen.blocks = 4\ntraining.lr = 5e-4\n")?;
    let model = Model::new(&c, AdaptationKind::Dynamic)?;
    let n = model.adaptation.params().param_count();
    println!("desk with 4 blocks: {n} trainable parameters");
    match RunConfig::default().parse_onto("mawgen.width = 3") {
        Err(e) => println!("unknown key rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
