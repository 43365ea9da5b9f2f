//! Parse SMILES, print the graph, canonical-ish re-serialisation and
//! fingerprint similarities. `cargo run --example parse_and_fingerprint -- CCO CCN`

use mora::metrics::{fingerprint, tanimoto};
use mora::mol::{parse_smiles, to_smiles};

fn main() -> anyhow::Result<()> {
    let mut inputs: Vec<String> = std::env::args().skip(1).collect();
    if inputs.is_empty() {
        inputs = ["CCO", "CCN", "c1ccccc1O", "CC(=O)[O-]", "C1CC"].map(String::from).to_vec();
    }
    let mut parsed = Vec::new();
    for s in &inputs {
        match parse_smiles(s) {
            Ok(g) => {
                println!("{s}: {} atoms, {} bonds, written back as {}", g.atom_count(), g.bond_count(), to_smiles(&g)?);
                print!("{}", g.adjacency_listing());
                parsed.push((s, fingerprint(&g, 2, 256)));
            }
            Err(e) => println!("{s}: rejected ({e})"),
        }
    }
    println!("\npairwise Tanimoto (radius 2, 256 bits)");
    for (i, (a, fa)) in parsed.iter().enumerate() {
        for (b, fb) in &parsed[i + 1..] {
            println!("  {a:>12} {b:>12} {:.3}", tanimoto(fa, fb)?);
        }
    }
    Ok(())
}
