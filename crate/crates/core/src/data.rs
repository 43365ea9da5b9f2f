//! Training examples, JSONL ingestion and the synthetic task generators.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mol::{parse_smiles, to_smiles, Atom, Bond, MolecularGraph};

/// One `(instruction, graph, answer)` record. `smiles` is `None` for
/// text-only examples, which run through the frozen backbone unchanged.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub smiles: Option<String>,
    pub instruction: String,
    pub answer: String,
    pub task_tag: String,
}

impl TrainingExample {
    pub fn graph(&self) -> Result<Option<MolecularGraph>> {
        self.smiles.as_deref().map(parse_smiles).transpose().map_err(Error::from)
    }

    fn validate(&self) -> Result<()> {
        if self.answer.is_empty() {
            return Err(Error::Contract("empty answer".into()));
        }
        self.graph().map(|_| ())
    }
}

/// Reads one JSON object per line. Blank lines are skipped; every error
/// carries its 1-based line number.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<TrainingExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string())
}

/// [`load_dataset`] over in-memory text; `origin` names the source in errors.
pub fn parse_dataset(text: &str, origin: &str) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| Error::Dataset {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let ex: TrainingExample = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        ex.validate().map_err(|e| fail(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[TrainingExample]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(examples)?.as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn to_jsonl(examples: &[TrainingExample]) -> Result<String> {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(ex)?);
        s.push('\n');
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SynthTask {
    AtomCount,
    BondCount,
    ElementPresence,
    GraphCopy,
    TextOnly,
}

impl SynthTask {
    pub const ALL: [SynthTask; 5] = [
        SynthTask::AtomCount,
        SynthTask::BondCount,
        SynthTask::ElementPresence,
        SynthTask::GraphCopy,
        SynthTask::TextOnly,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            SynthTask::AtomCount => "atom_count",
            SynthTask::BondCount => "bond_count",
            SynthTask::ElementPresence => "element_presence",
            SynthTask::GraphCopy => "graph_copy",
            SynthTask::TextOnly => "text_only",
        }
    }

    /// Whether answers are integers, so MAE applies.
    pub fn numeric(self) -> bool {
        matches!(self, SynthTask::AtomCount | SynthTask::BondCount)
    }
}

impl FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Shared by every atom-count example, so only the graph carries the answer.
pub const ATOM_COUNT_INSTRUCTION: &str = "Atom count?";
pub const BOND_COUNT_INSTRUCTION: &str = "Bond count?";
pub const GRAPH_COPY_INSTRUCTION: &str = "SMILES?";

const ELEMENTS: [(&str, u8, u32); 7] = [
    // symbol, valence, sampling weight
    ("C", 4, 8),
    ("N", 3, 3),
    ("O", 2, 3),
    ("S", 2, 1),
    ("F", 1, 1),
    ("Cl", 1, 1),
    ("Br", 1, 1),
];

fn pick_element<R: Rng + ?Sized>(rng: &mut R, min_valence: u8) -> (&'static str, u8) {
    let pool: Vec<_> = ELEMENTS.iter().filter(|e| e.1 >= min_valence).collect();
    let total: u32 = pool.iter().map(|e| e.2).sum();
    let mut x = rng.random_range(0..total);
    for e in &pool {
        if x < e.2 {
            return (e.0, e.1);
        }
        x -= e.2;
    }
    unreachable!("weights cover the range")
}

/// Random connected molecule with `n` heavy atoms respecting simple
/// valences: a random tree, then with probability `ring_p` one extra bond
/// closing a ring of at least three atoms, then occasional double bonds.
pub fn random_molecule<R: Rng + ?Sized>(n: usize, ring_p: f64, rng: &mut R) -> MolecularGraph {
    assert!(n >= 1, "a molecule needs at least one atom");
    loop {
        if let Some(g) = try_molecule(n, ring_p, rng) {
            return g;
        }
    }
}

fn try_molecule<R: Rng + ?Sized>(n: usize, ring_p: f64, rng: &mut R) -> Option<MolecularGraph> {
    let mut elems = Vec::with_capacity(n);
    let mut free = Vec::with_capacity(n);
    let mut bonds: Vec<Bond> = Vec::new();
    let (e, v) = pick_element(rng, if n > 1 { 2 } else { 1 });
    elems.push(e);
    free.push(v);
    for k in 1..n {
        let open: Vec<usize> = (0..k).filter(|&i| free[i] > 0).collect();
        let &p = open.choose(rng)?;
        // keep the tree growable while atoms remain
        let remaining = n - k - 1;
        let need = if remaining > 0 && open.len() == 1 && free[p] == 1 { 2 } else { 1 };
        let (e, v) = pick_element(rng, need);
        elems.push(e);
        free.push(v - 1);
        free[p] -= 1;
        bonds.push(Bond { i: p, j: k, order: 1 });
    }
    if n >= 3 && rng.random_bool(ring_p) {
        let adjacent = |a: usize, b: usize| bonds.iter().any(|x| (x.i == a && x.j == b) || (x.i == b && x.j == a));
        let cands: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| free[a] > 0 && free[b] > 0 && !adjacent(a, b))
            .collect();
        if let Some(&(a, b)) = cands.choose(rng) {
            free[a] -= 1;
            free[b] -= 1;
            bonds.push(Bond { i: a, j: b, order: 1 });
        }
    }
    for b in &mut bonds {
        if free[b.i] > 0 && free[b.j] > 0 && rng.random_bool(0.15) {
            free[b.i] -= 1;
            free[b.j] -= 1;
            b.order = 2;
        }
    }
    let atoms = elems
        .iter()
        .map(|e| Atom {
            element: e.to_string(),
            charge: 0,
            ring: false,
        })
        .collect();
    let g = MolecularGraph::from_parts(atoms, bonds).ok()?;
    // re-parse so ring flags and atom order match what ingestion will see
    parse_smiles(&to_smiles(&g).ok()?).ok()
}

const TEXT_WORDS: [&str; 12] = [
    "cat", "dog", "sun", "map", "red", "sky", "ink", "owl", "box", "jam", "fog", "bee",
];

fn text_only_example<R: Rng + ?Sized>(rng: &mut R) -> TrainingExample {
    let (instruction, answer) = match rng.random_range(0..3) {
        0 => {
            let a = rng.random_range(0..10);
            let b = rng.random_range(0..10);
            (format!("{a}+{b}="), (a + b).to_string())
        }
        1 => {
            let w = TEXT_WORDS.choose(rng).expect("non-empty");
            (format!("Reverse {w}"), w.chars().rev().collect())
        }
        _ => {
            let w = TEXT_WORDS.choose(rng).expect("non-empty");
            (format!("Upper {w}"), w.to_uppercase())
        }
    };
    TrainingExample {
        smiles: None,
        instruction,
        answer,
        task_tag: SynthTask::TextOnly.tag().into(),
    }
}

/// Probability of one ring-closing bond in a synthetic molecule.
pub const RING_P: f64 = 0.3;

/// `n` examples of `task`, fully determined by `seed`. Molecules have
/// 1–9 heavy atoms, uniformly distributed.
pub fn synth_dataset(task: SynthTask, n: usize, seed: u64) -> Vec<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synth_example(task, &mut rng)).collect()
}

pub fn synth_example<R: Rng + ?Sized>(task: SynthTask, rng: &mut R) -> TrainingExample {
    if task == SynthTask::TextOnly {
        return text_only_example(rng);
    }
    let atoms = rng.random_range(1..=9);
    // Atom-count molecules are acyclic: a ring whose atoms all look alike
    // is invisible to a 1-WL encoder read through mean-like attention.
    let ring_p = if task == SynthTask::AtomCount { 0.0 } else { RING_P };
    let g = random_molecule(atoms, ring_p, rng);
    let smiles = to_smiles(&g).expect("generated molecules are connected");
    let (instruction, answer) = match task {
        SynthTask::AtomCount => (ATOM_COUNT_INSTRUCTION.to_string(), g.atom_count().to_string()),
        SynthTask::BondCount => (BOND_COUNT_INSTRUCTION.to_string(), g.bond_count().to_string()),
        SynthTask::ElementPresence => {
            let (e, _) = pick_element(rng, 1);
            let present = g.atoms().iter().any(|a| a.element == e);
            (format!("Contains {e}?"), if present { "yes" } else { "no" }.to_string())
        }
        SynthTask::GraphCopy => (GRAPH_COPY_INSTRUCTION.to_string(), smiles.clone()),
        SynthTask::TextOnly => unreachable!("handled above"),
    };
    TrainingExample {
        smiles: Some(smiles),
        instruction,
        answer,
        task_tag: task.tag().into(),
    }
}
