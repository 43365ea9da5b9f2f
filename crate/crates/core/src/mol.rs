//! SMILES-subset parsing into undirected molecular graphs, plus the per-atom
//! feature layout consumed by the graph encoder.
//!
//! Supported grammar: organic-subset atoms (`B C N O P S F Cl Br I`),
//! aromatic lowercase atoms (`b c n o p s`), bracket atoms with optional
//! isotope, hydrogen count and charge (`[NH4+]`, `[O-]`, `[13CH3]`),
//! branches, single-digit and `%nn` ring closures, and the bond symbols
//! `-`, `=`, `#` and `:`. Stereo markers (`/ \ @`) are rejected. Aromatic
//! atoms get the ring flag; aromatic bonds become single bonds. Hydrogens
//! stay implicit.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Atom {
    pub element: String,
    pub charge: i32,
    pub ring: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MolecularGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SMILES parse error at byte {}: {}", self.offset, self.message)
    }
}

fn perr(offset: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        offset,
        message: message.into(),
    }
}

impl MolecularGraph {
    /// Builds a graph from explicit atoms and bonds, checking the structural
    /// invariants (no self loops, no duplicate pairs, endpoints in range).
    pub fn from_parts(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<Self> {
        let n = atoms.len();
        let mut seen = std::collections::HashSet::new();
        for b in &bonds {
            if b.i >= n || b.j >= n {
                return Err(Error::Contract(format!("bond {}-{} out of range for {n} atoms", b.i, b.j)));
            }
            if b.i == b.j {
                return Err(Error::Contract(format!("self loop on atom {}", b.i)));
            }
            if !(1..=3).contains(&b.order) {
                return Err(Error::Contract(format!("bond order {}", b.order)));
            }
            if !seen.insert((b.i.min(b.j), b.i.max(b.j))) {
                return Err(Error::Contract(format!("duplicate bond {}-{}", b.i, b.j)));
            }
        }
        Ok(Self { atoms, bonds })
    }

    /// Carbon chain `0-1-2-...` of `n` atoms, handy for locality tests.
    pub fn path(elements: &[&str]) -> Self {
        let atoms = elements
            .iter()
            .map(|e| Atom {
                element: e.to_string(),
                charge: 0,
                ring: false,
            })
            .collect();
        let bonds = (1..elements.len())
            .map(|k| Bond {
                i: k - 1,
                j: k,
                order: 1,
            })
            .collect();
        Self { atoms, bonds }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for b in &self.bonds {
            adj[b.i].push(b.j);
            adj[b.j].push(b.i);
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.atoms.len()];
        for b in &self.bonds {
            deg[b.i] += 1;
            deg[b.j] += 1;
        }
        deg
    }

    /// Sorted list of elements, a permutation-invariant summary.
    pub fn element_multiset(&self) -> Vec<String> {
        let mut v: Vec<_> = self.atoms.iter().map(|a| a.element.clone()).collect();
        v.sort();
        v
    }

    pub fn degree_multiset(&self) -> Vec<usize> {
        let mut d = self.degrees();
        d.sort_unstable();
        d
    }

    /// SHA-256 over the atom and bond lists in their stored order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.atoms {
            h.update(a.element.as_bytes());
            h.update(a.charge.to_le_bytes());
            h.update([a.ring as u8, b';']);
        }
        for b in &self.bonds {
            h.update((b.i as u64).to_le_bytes());
            h.update((b.j as u64).to_le_bytes());
            h.update([b.order]);
        }
        hex::encode(h.finalize())
    }

    /// Human-readable adjacency listing.
    pub fn adjacency_listing(&self) -> String {
        let adj = self.neighbors();
        let mut out = String::new();
        for (i, a) in self.atoms.iter().enumerate() {
            let charge = match a.charge {
                0 => String::new(),
                c if c > 0 => format!("+{c}"),
                c => c.to_string(),
            };
            let ring = if a.ring { " ring" } else { "" };
            let mut nb = adj[i].clone();
            nb.sort_unstable();
            let nb: Vec<String> = nb.iter().map(usize::to_string).collect();
            out.push_str(&format!("{i}: {}{charge}{ring} -> [{}]\n", a.element, nb.join(", ")));
        }
        for b in &self.bonds {
            out.push_str(&format!("bond {}-{} order {}\n", b.i, b.j, b.order));
        }
        out
    }

    fn mark_rings(&mut self) {
        // an atom is on a cycle iff one of its edges is not a bridge
        let n = self.atoms.len();
        let adj: Vec<Vec<(usize, usize)>> = {
            let mut adj = vec![Vec::new(); n];
            for (e, b) in self.bonds.iter().enumerate() {
                adj[b.i].push((b.j, e));
                adj[b.j].push((b.i, e));
            }
            adj
        };
        let mut disc = vec![usize::MAX; n];
        let mut low = vec![0; n];
        let mut bridge = vec![false; self.bonds.len()];
        let mut timer = 0;
        for root in 0..n {
            if disc[root] != usize::MAX {
                continue;
            }
            // iterative DFS: (node, parent edge, next neighbour index)
            let mut stack = vec![(root, usize::MAX, 0usize)];
            disc[root] = timer;
            low[root] = timer;
            timer += 1;
            while let Some(&mut (v, pe, ref mut next)) = stack.last_mut() {
                if *next < adj[v].len() {
                    let (u, e) = adj[v][*next];
                    *next += 1;
                    if e == pe {
                        continue;
                    }
                    if disc[u] == usize::MAX {
                        disc[u] = timer;
                        low[u] = timer;
                        timer += 1;
                        stack.push((u, e, 0));
                    } else {
                        low[v] = low[v].min(disc[u]);
                    }
                } else {
                    stack.pop();
                    if let Some(&(p, _, _)) = stack.last() {
                        low[p] = low[p].min(low[v]);
                        if low[v] > disc[p] {
                            bridge[pe] = true;
                        }
                    }
                }
            }
        }
        for (e, b) in self.bonds.iter().enumerate() {
            if !bridge[e] {
                self.atoms[b.i].ring = true;
                self.atoms[b.j].ring = true;
            }
        }
    }
}

const ORGANIC: &[&str] = &["Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I"];
const AROMATIC: &[u8] = b"bcnops";

/// Elements known to the bracket-atom parser. Anything here that is not in
/// [`FEATURE_ELEMENTS`] parses fine but has no feature encoding.
const BRACKET_ELEMENTS: &[&str] = &[
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Fe", "Co", "Ni", "Cu", "Zn", "Se", "Br", "Kr", "Sn", "I", "Xe", "Pt", "Au", "Hg", "Pb",
];

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    rings: BTreeMap<u32, (usize, Option<u8>, usize)>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn add_bond(&mut self, i: usize, j: usize, order: u8, at: usize) -> Result<(), ParseError> {
        if i == j {
            return Err(perr(at, "ring closure bonds an atom to itself"));
        }
        if self
            .bonds
            .iter()
            .any(|b| (b.i == i && b.j == j) || (b.i == j && b.j == i))
        {
            return Err(perr(at, format!("duplicate bond between atoms {i} and {j}")));
        }
        self.bonds.push(Bond { i, j, order });
        Ok(())
    }

    fn bond_symbol(c: u8) -> Option<u8> {
        match c {
            b'-' | b':' => Some(1),
            b'=' => Some(2),
            b'#' => Some(3),
            _ => None,
        }
    }

    fn parse(mut self) -> Result<MolecularGraph, ParseError> {
        if self.src.is_empty() {
            return Err(perr(0, "empty SMILES"));
        }
        let mut prev: Option<usize> = None;
        let mut pending: Option<(u8, usize)> = None;
        let mut branches: Vec<(usize, usize)> = Vec::new();
        while let Some(c) = self.peek() {
            let at = self.pos;
            match c {
                b'(' => {
                    let p = prev.ok_or_else(|| perr(at, "branch without a preceding atom"))?;
                    if pending.is_some() {
                        return Err(perr(at, "bond symbol before branch"));
                    }
                    if self.src.get(at + 1) == Some(&b')') {
                        return Err(perr(at, "empty branch"));
                    }
                    branches.push((p, at));
                    self.pos += 1;
                }
                b')' => {
                    let (p, _) = branches.pop().ok_or_else(|| perr(at, "unmatched ')'"))?;
                    if let Some((_, bat)) = pending {
                        return Err(perr(bat, "dangling bond symbol"));
                    }
                    prev = Some(p);
                    self.pos += 1;
                }
                b'/' | b'\\' | b'@' => return Err(perr(at, "stereochemistry is not supported")),
                b'.' => return Err(perr(at, "disconnected components are not supported")),
                c if Self::bond_symbol(c).is_some() => {
                    if pending.is_some() {
                        return Err(perr(at, "two consecutive bond symbols"));
                    }
                    if prev.is_none() {
                        return Err(perr(at, "bond symbol without a preceding atom"));
                    }
                    pending = Some((Self::bond_symbol(c).unwrap(), at));
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let p = prev.ok_or_else(|| perr(at, "ring closure without a preceding atom"))?;
                    let label = self.ring_label()?;
                    let bond = pending.take().map(|(o, _)| o);
                    match self.rings.remove(&label) {
                        Some((other, obond, _)) => {
                            let order = match (obond, bond) {
                                (Some(a), Some(b)) if a != b => {
                                    return Err(perr(at, "conflicting ring-closure bond orders"))
                                }
                                (a, b) => a.or(b).unwrap_or(1),
                            };
                            self.add_bond(other, p, order, at)?;
                        }
                        None => {
                            self.rings.insert(label, (p, bond, at));
                        }
                    }
                }
                _ => {
                    let idx = self.atom()?;
                    if let Some(p) = prev {
                        let order = pending.take().map_or(1, |(o, _)| o);
                        self.add_bond(p, idx, order, at)?;
                    }
                    prev = Some(idx);
                }
            }
        }
        if let Some((_, bat)) = pending {
            return Err(perr(bat, "dangling bond symbol"));
        }
        if let Some(&(_, at)) = branches.last() {
            return Err(perr(at, "unmatched '('"));
        }
        if let Some((label, &(_, _, at))) = self.rings.iter().next() {
            return Err(perr(at, format!("unmatched ring closure {label}")));
        }
        let mut g = MolecularGraph {
            atoms: self.atoms,
            bonds: self.bonds,
        };
        g.mark_rings();
        Ok(g)
    }

    fn ring_label(&mut self) -> Result<u32, ParseError> {
        let at = self.pos;
        if self.peek() == Some(b'%') {
            let d = self.src.get(at + 1..at + 3).filter(|d| d.iter().all(u8::is_ascii_digit));
            let d = d.ok_or_else(|| perr(at, "'%' must be followed by two digits"))?;
            self.pos += 3;
            Ok(u32::from(d[0] - b'0') * 10 + u32::from(d[1] - b'0'))
        } else {
            let d = self.src[at] - b'0';
            self.pos += 1;
            Ok(u32::from(d))
        }
    }

    fn push_atom(&mut self, element: &str, charge: i32, aromatic: bool) -> usize {
        self.atoms.push(Atom {
            element: element.to_string(),
            charge,
            ring: aromatic,
        });
        self.atoms.len() - 1
    }

    fn atom(&mut self) -> Result<usize, ParseError> {
        let at = self.pos;
        let c = self.src[at];
        if c == b'[' {
            return self.bracket_atom();
        }
        for sym in ORGANIC {
            if self.src[at..].starts_with(sym.as_bytes()) {
                self.pos += sym.len();
                return Ok(self.push_atom(sym, 0, false));
            }
        }
        if AROMATIC.contains(&c) {
            self.pos += 1;
            let upper = (c as char).to_ascii_uppercase().to_string();
            return Ok(self.push_atom(&upper, 0, true));
        }
        Err(perr(at, format!("unknown symbol {:?}", self.symbol_at(at))))
    }

    fn symbol_at(&self, at: usize) -> String {
        String::from_utf8_lossy(&self.src[at..(at + 1).min(self.src.len())]).into_owned()
    }

    fn bracket_atom(&mut self) -> Result<usize, ParseError> {
        let open = self.pos;
        self.pos += 1;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        let at = self.pos;
        let rest = &self.src[at..];
        let (element, aromatic, len) = if let Some(&c) = rest.first().filter(|c| c.is_ascii_lowercase()) {
            if rest.starts_with(b"se") {
                ("Se".to_string(), true, 2)
            } else if AROMATIC.contains(&c) {
                ((c as char).to_ascii_uppercase().to_string(), true, 1)
            } else {
                return Err(perr(at, format!("unknown symbol {:?}", self.symbol_at(at))));
            }
        } else {
            let two = rest
                .get(..2)
                .and_then(|s| std::str::from_utf8(s).ok())
                .filter(|s| BRACKET_ELEMENTS.contains(s));
            let one = rest
                .get(..1)
                .and_then(|s| std::str::from_utf8(s).ok())
                .filter(|s| BRACKET_ELEMENTS.contains(s));
            match (two, one) {
                (Some(s), _) => (s.to_string(), false, 2),
                (None, Some(s)) => (s.to_string(), false, 1),
                _ => return Err(perr(at, "missing or unknown element in bracket atom")),
            }
        };
        self.pos += len;
        if self.peek() == Some(b'@') {
            return Err(perr(self.pos, "stereochemistry is not supported"));
        }
        if self.peek() == Some(b'H') {
            self.pos += 1;
            if matches!(self.peek(), Some(b'0'..=b'9')) {
                self.pos += 1;
            }
        }
        let mut charge = 0i32;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let s = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(d @ b'0'..=b'9') = self.peek() {
                self.pos += 1;
                charge = s * i32::from(d - b'0');
            } else {
                charge = s;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    charge += s;
                }
            }
        }
        match self.peek() {
            Some(b']') => self.pos += 1,
            Some(_) => return Err(perr(self.pos, format!("unexpected {:?} in bracket atom", self.symbol_at(self.pos)))),
            None => return Err(perr(open, "unterminated bracket atom")),
        }
        Ok(self.push_atom(&element, charge, aromatic))
    }
}

pub fn parse_smiles(s: &str) -> Result<MolecularGraph, ParseError> {
    parse_smiles_bytes(s.as_bytes())
}

/// Parses raw bytes. Never panics; non-ASCII input yields a located error.
pub fn parse_smiles_bytes(src: &[u8]) -> Result<MolecularGraph, ParseError> {
    Parser {
        src,
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        rings: BTreeMap::new(),
    }
    .parse()
}

/// Element vocabulary of the feature layout, in column order.
pub const FEATURE_ELEMENTS: [&str; 10] = ["C", "N", "O", "S", "P", "F", "Cl", "Br", "I", "H"];
pub const MAX_DEGREE: usize = 6;
/// Columns: 10 element one-hot, 7 degree one-hot (0..=6), formal charge, ring flag.
pub const ATOM_FEATURE_DIM: usize = FEATURE_ELEMENTS.len() + MAX_DEGREE + 1 + 2;

/// Per-atom feature matrix, one row per atom.
pub fn atom_features(g: &MolecularGraph) -> Result<Tensor> {
    let deg = g.degrees();
    let mut data = vec![0.0; g.atom_count() * ATOM_FEATURE_DIM];
    for (i, a) in g.atoms().iter().enumerate() {
        let row = &mut data[i * ATOM_FEATURE_DIM..(i + 1) * ATOM_FEATURE_DIM];
        let e = FEATURE_ELEMENTS
            .iter()
            .position(|&s| s == a.element)
            .ok_or_else(|| Error::UnsupportedAtom(a.element.clone()))?;
        row[e] = 1.0;
        if deg[i] > MAX_DEGREE {
            return Err(Error::Contract(format!("atom {i} has degree {} > {MAX_DEGREE}", deg[i])));
        }
        row[FEATURE_ELEMENTS.len() + deg[i]] = 1.0;
        row[ATOM_FEATURE_DIM - 2] = f64::from(a.charge);
        row[ATOM_FEATURE_DIM - 1] = if a.ring { 1.0 } else { 0.0 };
    }
    Tensor::new(&[g.atom_count(), ATOM_FEATURE_DIM], data)
}

/// Relabels nodes: old node `i` becomes node `perm[i]`.
pub fn permute_graph(g: &MolecularGraph, perm: &[usize]) -> Result<MolecularGraph> {
    let n = g.atom_count();
    check_permutation(perm, n)?;
    let mut atoms = vec![None; n];
    for (i, a) in g.atoms.iter().enumerate() {
        atoms[perm[i]] = Some(a.clone());
    }
    let bonds = g
        .bonds
        .iter()
        .map(|b| Bond {
            i: perm[b.i],
            j: perm[b.j],
            order: b.order,
        })
        .collect();
    Ok(MolecularGraph {
        atoms: atoms.into_iter().map(|a| a.expect("bijection fills every slot")).collect(),
        bonds,
    })
}

pub fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Contract(format!("permutation of length {} for {n} nodes", perm.len())));
    }
    let mut hit = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut hit[p], true) {
            return Err(Error::Contract(format!("{perm:?} is not a bijection on 0..{n}")));
        }
    }
    Ok(())
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Row `perm[i]` of the result is row `i` of `t`.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let (r, c) = t.dims2()?;
    check_permutation(perm, r)?;
    let mut out = vec![0.0; r * c];
    for (i, &p) in perm.iter().enumerate() {
        out[p * c..(p + 1) * c].copy_from_slice(t.row(i));
    }
    Tensor::new(&[r, c], out)
}

/// Writes a connected graph as SMILES (explicit bond symbols for orders 2
/// and 3, ring closures labelled with the lowest free digit). Aromaticity
/// is not preserved: every atom is written in upper case.
pub fn to_smiles(g: &MolecularGraph) -> Result<String> {
    let n = g.atom_count();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let mut adj: Vec<Vec<(usize, u8)>> = vec![Vec::new(); n];
    for b in g.bonds() {
        adj[b.i].push((b.j, b.order));
        adj[b.j].push((b.i, b.order));
    }
    for a in &mut adj {
        a.sort_unstable();
    }
    // first pass: DFS tree from atom 0, everything else is a ring closure
    let mut parent = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    let mut children: Vec<Vec<(usize, u8)>> = vec![Vec::new(); n];
    let mut closures: Vec<(usize, usize, u8)> = Vec::new();
    let mut stack = vec![0usize];
    let mut order = Vec::with_capacity(n);
    while let Some(v) = stack.pop() {
        if seen[v] {
            continue;
        }
        seen[v] = true;
        order.push(v);
        if parent[v] != usize::MAX {
            let o = adj[v].iter().find(|&&(u, _)| u == parent[v]).map_or(1, |&(_, o)| o);
            children[parent[v]].push((v, o));
        }
        for &(u, _) in adj[v].iter().rev() {
            if !seen[u] {
                parent[u] = v;
                stack.push(u);
            }
        }
    }
    if order.len() != n {
        return Err(Error::Contract("cannot write a disconnected graph as SMILES".into()));
    }
    let rank: Vec<usize> = {
        let mut r = vec![0; n];
        for (i, &v) in order.iter().enumerate() {
            r[v] = i;
        }
        r
    };
    for b in g.bonds() {
        if parent[b.i] != b.j && parent[b.j] != b.i {
            let (a, c) = if rank[b.i] < rank[b.j] { (b.i, b.j) } else { (b.j, b.i) };
            closures.push((a, c, b.order));
        }
    }
    closures.sort_unstable_by_key(|&(a, c, _)| (rank[a], rank[c]));

    fn bond_char(order: u8) -> &'static str {
        match order {
            2 => "=",
            3 => "#",
            _ => "",
        }
    }
    fn label(d: usize) -> String {
        if d < 10 {
            d.to_string()
        } else {
            format!("%{d:02}")
        }
    }

    let mut out = String::new();
    // digit 0 is never used as a label
    let mut in_use = vec![true];
    let mut open: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    enum Step {
        Enter(usize, u8),
        Text(&'static str),
    }
    let mut work = vec![Step::Enter(0, 1)];
    while let Some(step) = work.pop() {
        let (v, o) = match step {
            Step::Text(s) => {
                out.push_str(s);
                continue;
            }
            Step::Enter(v, o) => (v, o),
        };
        if v != 0 {
            out.push_str(bond_char(o));
        }
        let a = &g.atoms()[v];
        if a.charge == 0 && ORGANIC.contains(&a.element.as_str()) {
            out.push_str(&a.element);
        } else {
            let charge = match a.charge {
                0 => String::new(),
                1 => "+".into(),
                -1 => "-".into(),
                c if c > 0 => format!("+{c}"),
                c => c.to_string(),
            };
            out.push_str(&format!("[{}{charge}]", a.element));
        }
        // close rings whose far end is v first, then open new ones
        for &(s, t, _) in closures.iter().filter(|c| c.1 == v) {
            let d = open.remove(&(s, t)).expect("opened before closing");
            out.push_str(&label(d));
            in_use[d] = false;
        }
        for &(s, t, bo) in closures.iter().filter(|c| c.0 == v) {
            let d = in_use.iter().position(|u| !u).unwrap_or_else(|| {
                in_use.push(false);
                in_use.len() - 1
            });
            in_use[d] = true;
            open.insert((s, t), d);
            out.push_str(bond_char(bo));
            out.push_str(&label(d));
        }
        let kids = &children[v];
        if let Some((&last, rest)) = kids.split_last() {
            work.push(Step::Enter(last.0, last.1));
            for &(c, co) in rest.iter().rev() {
                work.push(Step::Text(")"));
                work.push(Step::Enter(c, co));
                work.push(Step::Text("("));
            }
        }
    }
    Ok(out)
}
