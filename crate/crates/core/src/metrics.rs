//! Answer-quality metrics: exact match, edit distance, BLEU, MAE and a
//! circular-environment fingerprint with Tanimoto similarity.

use std::collections::HashMap;
use std::hash::Hash;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mol::{parse_smiles, MolecularGraph};

/// 1 when the two strings agree after trimming surrounding whitespace.
/// No SMILES canonicalisation: `CCO` and `OCC` differ.
pub fn exact_match(pred: &str, gold: &str) -> u8 {
    u8::from(pred.trim() == gold.trim())
}

/// Unit-cost insert/delete/substitute distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence-level BLEU against one reference: geometric mean of clipped
/// n-gram precisions for n = 1..=max_n times the brevity penalty.
/// Precisions for n > 1 use add-one smoothing, `(matches + 1) / (total + 1)`;
/// unigram precision is unsmoothed, so disjoint token sets score 0.
pub fn bleu<T: Eq + Hash>(pred: &[T], reference: &[T], max_n: usize) -> f64 {
    if pred.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let p = ngram_counts(pred, n);
        let r = ngram_counts(reference, n);
        let total: usize = p.values().sum();
        let matched: usize = p.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        let precision = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        if precision == 0.0 {
            return 0.0;
        }
        log_sum += precision.ln();
    }
    let (c, r) = (pred.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / max_n as f64).exp()
}

/// Character-level BLEU-4 of two strings.
pub fn char_bleu(pred: &str, reference: &str) -> f64 {
    let p: Vec<char> = pred.trim().chars().collect();
    let r: Vec<char> = reference.trim().chars().collect();
    bleu(&p, &r, 4)
}

pub fn mae(preds: &[f64], golds: &[f64]) -> Result<f64> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(Error::Contract(format!(
            "MAE needs equal non-zero lengths, got {} and {}",
            preds.len(),
            golds.len()
        )));
    }
    Ok(preds.iter().zip(golds).map(|(p, g)| (p - g).abs()).sum::<f64>() / preds.len() as f64)
}

/// Fixed-length bit set.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    bits: Vec<bool>,
}

impl Fingerprint {
    pub fn new(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn set(&mut self, i: usize) {
        self.bits[i] = true;
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// First eight bytes of SHA-256, little-endian.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Radius-0 identifier of every atom: element, degree, charge, ring flag.
pub fn initial_identifiers(g: &MolecularGraph) -> Vec<u64> {
    let deg = g.degrees();
    g.atoms()
        .iter()
        .zip(deg)
        .map(|(a, d)| stable_hash(format!("{}|{}|{}|{}", a.element, d, a.charge, u8::from(a.ring)).as_bytes()))
        .collect()
}

/// One refinement round: each atom's new identifier hashes its old one
/// with the sorted (bond order, neighbour identifier) pairs.
pub fn refine_identifiers(g: &MolecularGraph, ids: &[u64]) -> Vec<u64> {
    let mut env: Vec<Vec<(u8, u64)>> = vec![Vec::new(); g.atom_count()];
    for b in g.bonds() {
        env[b.i].push((b.order, ids[b.j]));
        env[b.j].push((b.order, ids[b.i]));
    }
    env.into_iter()
        .zip(ids)
        .map(|(mut e, &own)| {
            e.sort_unstable();
            let mut bytes = own.to_le_bytes().to_vec();
            for (o, id) in e {
                bytes.push(o);
                bytes.extend_from_slice(&id.to_le_bytes());
            }
            stable_hash(&bytes)
        })
        .collect()
}

/// Morgan-style fingerprint: every atom identifier at radius 0..=radius
/// sets bit `id mod len`.
pub fn fingerprint(g: &MolecularGraph, radius: usize, len: usize) -> Fingerprint {
    let mut fp = Fingerprint::new(len);
    if len == 0 {
        return fp;
    }
    let mut ids = initial_identifiers(g);
    for round in 0..=radius {
        if round > 0 {
            ids = refine_identifiers(g, &ids);
        }
        for &id in &ids {
            fp.set((id % len as u64) as usize);
        }
    }
    fp
}

/// |A ∩ B| / |A ∪ B|, defined as 1 when both are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("fingerprint lengths {} and {}", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(*x && *y);
        union += usize::from(*x || *y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of strings that parse as SMILES; 0 for an empty list.
pub fn parseable_rate<S: AsRef<str>>(items: &[S]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let ok = items.iter().filter(|s| parse_smiles(s.as_ref().trim()).is_ok()).count();
    ok as f64 / items.len() as f64
}
