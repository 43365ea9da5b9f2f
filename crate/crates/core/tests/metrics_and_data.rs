//! Metric oracles, dataset ingestion and the synthetic generators.

use mora::data::{load_dataset, parse_dataset, synth_dataset, to_jsonl, write_dataset, SynthTask, TrainingExample};
use mora::metrics::{bleu, fingerprint, mae, stable_hash, tanimoto, Fingerprint};
use mora::mol::parse_smiles;
use mora::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[test]
fn bleu_brevity_penalty_by_hand() {
    // unigrams 2/2, bigrams (1+1)/(1+1), tri/four-grams (0+1)/(0+1): only the penalty remains
    let v = bleu(&words("the cat"), &words("the cat sat"), 4);
    assert!((v - (1.0f64 - 3.0 / 2.0).exp()).abs() < 1e-15);
    assert_eq!(bleu(&words("a b c d"), &words("a b c d"), 4), 1.0);
    assert_eq!(bleu(&words("dog"), &words("the cat sat"), 4), 0.0);
}

#[test]
fn bleu_partial_overlap_by_hand() {
    // pred "a b c x", ref "a b c d": p1 = 3/4, p2 = (2+1)/(3+1), p3 = (1+1)/(2+1), p4 = (0+1)/(1+1)
    let v = bleu(&words("a b c x"), &words("a b c d"), 4);
    let want = (0.75f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
    assert!((v - want).abs() < 1e-15, "{v} vs {want}");
}

#[test]
fn mae_against_a_summation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let mut total = 0.0;
        for i in 0..n {
            total += if p[i] > g[i] { p[i] - g[i] } else { g[i] - p[i] };
        }
        assert!((mae(&p, &g).unwrap() - total / n as f64).abs() <= 1e-12);
    }
    assert!(matches!(mae(&[1.0, 2.0], &[1.0]), Err(Error::Contract(_))));
}

fn env_r0(element: &str, degree: usize) -> u64 {
    stable_hash(format!("{element}|{degree}|0|0").as_bytes())
}

fn env_r1(own: u64, mut neighbours: Vec<(u8, u64)>) -> u64 {
    neighbours.sort_unstable();
    let mut bytes = own.to_le_bytes().to_vec();
    for (order, id) in neighbours {
        bytes.push(order);
        bytes.extend_from_slice(&id.to_le_bytes());
    }
    stable_hash(&bytes)
}

fn bits(ids: &[u64], len: usize) -> Fingerprint {
    let mut fp = Fingerprint::new(len);
    for id in ids {
        fp.set((id % len as u64) as usize);
    }
    fp
}

#[test]
fn radius_one_fingerprints_of_ethanol_and_ethylamine_by_enumeration() {
    // X–C–C with X = O or N: terminal carbon, middle carbon, heteroatom
    let c1 = env_r0("C", 1);
    let c2 = env_r0("C", 2);
    let enumerate = |x: &str| -> Vec<u64> {
        let h = env_r0(x, 1);
        vec![
            c1,
            c2,
            h,
            env_r1(c1, vec![(1, c2)]),
            env_r1(c2, vec![(1, c1), (1, h)]),
            env_r1(h, vec![(1, c2)]),
        ]
    };
    let (ea, eb) = (enumerate("O"), enumerate("N"));
    let fa = fingerprint(&parse_smiles("CCO").unwrap(), 1, 256);
    let fb = fingerprint(&parse_smiles("CCN").unwrap(), 1, 256);
    assert_eq!(fa, bits(&ea, 256));
    assert_eq!(fb, bits(&eb, 256));
    let want = {
        let (a, b) = (bits(&ea, 256), bits(&eb, 256));
        let inter = (0..256).filter(|&i| a.get(i) && b.get(i)).count();
        let union = (0..256).filter(|&i| a.get(i) || b.get(i)).count();
        inter as f64 / union as f64
    };
    assert_eq!(tanimoto(&fa, &fb).unwrap(), want);
    // three shared environments out of nine distinct ones, barring bit collisions
    assert!((want - 1.0 / 3.0).abs() < 0.15);
    assert_eq!(tanimoto(&fa, &fa).unwrap(), 1.0);
}

#[test]
fn truncated_ring_names_line_and_byte() {
    let text = "{\"smiles\":\"CCO\",\"instruction\":\"Atom count?\",\"answer\":\"3\",\"task_tag\":\"atom_count\"}\n\
                {\"smiles\":\"C1CC\",\"instruction\":\"Atom count?\",\"answer\":\"3\",\"task_tag\":\"atom_count\"}\n";
    let err = parse_dataset(text, "d.jsonl").unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dataset { line: 2, .. }), "{msg}");
    assert!(msg.starts_with("d.jsonl:2:") && msg.contains("byte"), "{msg}");
}

#[test]
fn malformed_json_and_null_smiles() {
    assert!(matches!(parse_dataset("{not json}\n", "x"), Err(Error::Dataset { line: 1, .. })));
    let ok = parse_dataset(
        "\n{\"smiles\":null,\"instruction\":\"1+1=\",\"answer\":\"2\",\"task_tag\":\"text_only\"}\n",
        "x",
    )
    .unwrap();
    assert_eq!(ok[0].smiles, None);
}

#[test]
fn jsonl_round_trip_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let mut data = Vec::new();
    for (i, t) in SynthTask::ALL.into_iter().enumerate() {
        data.extend(synth_dataset(t, 15, i as u64));
    }
    write_dataset(&path, &data).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), data);
    assert_eq!(to_jsonl(&data).unwrap().lines().count(), data.len());
    assert!(load_dataset(dir.path().join("missing.jsonl")).is_err());
}

#[test]
fn synthetic_examples_by_hand() {
    let ex = |smiles: &str, task: SynthTask| -> String {
        let g = parse_smiles(smiles).unwrap();
        match task {
            SynthTask::AtomCount => g.atom_count().to_string(),
            SynthTask::BondCount => g.bond_count().to_string(),
            _ => unreachable!(),
        }
    };
    assert_eq!(ex("CCO", SynthTask::AtomCount), "3");
    assert_eq!(ex("C1CC1", SynthTask::BondCount), "3");
    for task in [SynthTask::AtomCount, SynthTask::BondCount] {
        let data = synth_dataset(task, 200, 7);
        let first = &data[0].instruction;
        assert!(data.iter().all(|e| &e.instruction == first), "{task} instructions vary");
        let counts: std::collections::BTreeSet<usize> =
            data.iter().map(|e| e.graph().unwrap().unwrap().atom_count()).collect();
        assert_eq!(counts, (1..=9).collect());
    }
    let text: Vec<TrainingExample> = synth_dataset(SynthTask::TextOnly, 20, 1);
    assert!(text.iter().all(|e| e.smiles.is_none()));
    assert_eq!(synth_dataset(SynthTask::GraphCopy, 30, 5), synth_dataset(SynthTask::GraphCopy, 30, 5));
}
