//! Low-rank updates and the per-instance adapter sets built from them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Injection target kinds as named in target strings like `"qkvof"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Query,
    Key,
    Value,
    Output,
    Ffn,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Query,
        Component::Key,
        Component::Value,
        Component::Output,
        Component::Ffn,
    ];

    pub fn letter(self) -> char {
        match self {
            Component::Query => 'q',
            Component::Key => 'k',
            Component::Value => 'v',
            Component::Output => 'o',
            Component::Ffn => 'f',
        }
    }

    /// Concrete linear maps this component covers. `f` is both FFN matrices.
    pub fn sites(self) -> &'static [Site] {
        match self {
            Component::Query => &[Site::Query],
            Component::Key => &[Site::Key],
            Component::Value => &[Site::Value],
            Component::Output => &[Site::Output],
            Component::Ffn => &[Site::FfnUp, Site::FfnDown],
        }
    }
}

/// A single linear map inside a backbone block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    Query,
    Key,
    Value,
    Output,
    FfnUp,
    FfnDown,
}

impl Site {
    pub fn component(self) -> Component {
        match self {
            Site::Query => Component::Query,
            Site::Key => Component::Key,
            Site::Value => Component::Value,
            Site::Output => Component::Output,
            Site::FfnUp | Site::FfnDown => Component::Ffn,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::Query => "q",
            Site::Key => "k",
            Site::Value => "v",
            Site::Output => "o",
            Site::FfnUp => "f_up",
            Site::FfnDown => "f_down",
        }
    }
}

/// Ordered, duplicate-free set of injection components.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TargetSet(Vec<Component>);

impl TargetSet {
    pub fn new(mut components: Vec<Component>) -> Result<Self> {
        components.sort();
        components.dedup();
        if components.is_empty() {
            return Err(Error::Config("empty injection target set".into()));
        }
        Ok(Self(components))
    }

    pub fn all() -> Self {
        Self(Component::ALL.to_vec())
    }

    pub fn components(&self) -> &[Component] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, c: Component) -> bool {
        self.0.contains(&c)
    }

    pub fn position(&self, c: Component) -> Option<usize> {
        self.0.iter().position(|&x| x == c)
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        self.0.iter().flat_map(|c| c.sites().iter().copied())
    }
}

impl FromStr for TargetSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for ch in s.trim().chars() {
            let c = Component::ALL
                .into_iter()
                .find(|c| c.letter() == ch)
                .ok_or_else(|| Error::Config(format!("unknown injection target {ch:?} in {s:?}")))?;
            if out.contains(&c) {
                return Err(Error::Config(format!("repeated injection target {ch:?} in {s:?}")));
            }
            out.push(c);
        }
        Self::new(out)
    }
}

impl fmt::Display for TargetSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.0 {
            write!(f, "{}", c.letter())?;
        }
        Ok(())
    }
}

/// Backbone location of one update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AdapterKey {
    pub layer: usize,
    pub site: Site,
}

/// `scale · delta_a · delta_b`, kept factored.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankUpdate {
    pub delta_a: Tensor,
    pub delta_b: Tensor,
    pub scale: f64,
}

impl LowRankUpdate {
    pub fn new(delta_a: Tensor, delta_b: Tensor, scale: f64) -> Result<Self> {
        let (_, r) = delta_a.dims2()?;
        let (r2, _) = delta_b.dims2()?;
        if r != r2 {
            return Err(Error::shape("low_rank_update", delta_a.shape(), delta_b.shape()));
        }
        Ok(Self {
            delta_a,
            delta_b,
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.delta_a.shape()[1]
    }

    pub fn d_in(&self) -> usize {
        self.delta_a.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.delta_b.shape()[1]
    }

    /// Dense `scale · delta_a · delta_b`.
    pub fn materialize(&self) -> Tensor {
        self.delta_a
            .matmul(&self.delta_b)
            .expect("factor shapes checked at construction")
            .scaled(self.scale)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundUpdate {
        BoundUpdate {
            delta_a: tape.leaf(&self.delta_a),
            delta_b: tape.leaf(&self.delta_b),
            scale: self.scale,
        }
    }
}

/// A [`LowRankUpdate`] whose factors live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundUpdate {
    pub delta_a: Var,
    pub delta_b: Var,
    pub scale: f64,
}

impl BoundUpdate {
    pub fn to_update(&self, tape: &Tape) -> LowRankUpdate {
        LowRankUpdate {
            delta_a: tape.tensor(self.delta_a),
            delta_b: tape.tensor(self.delta_b),
            scale: self.scale,
        }
    }
}

pub type BoundAdapters = BTreeMap<AdapterKey, BoundUpdate>;

/// The full per-instance overlay: one update per targeted (layer, site).
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    entries: BTreeMap<AdapterKey, LowRankUpdate>,
    provenance: String,
}

impl AdapterSet {
    pub fn new(entries: BTreeMap<AdapterKey, LowRankUpdate>, provenance: impl Into<String>) -> Self {
        Self {
            entries,
            provenance: provenance.into(),
        }
    }

    pub fn from_bound(tape: &Tape, bound: &BoundAdapters, provenance: impl Into<String>) -> Self {
        let entries = bound.iter().map(|(k, u)| (*k, u.to_update(tape))).collect();
        Self::new(entries, provenance)
    }

    /// Same keys and shapes, every `delta_a` zero.
    pub fn zeroed(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, u)| {
                let mut z = u.clone();
                z.delta_a = Tensor::zeros(u.delta_a.shape());
                (*k, z)
            })
            .collect();
        Self::new(entries, self.provenance.clone())
    }

    pub fn entries(&self) -> &BTreeMap<AdapterKey, LowRankUpdate> {
        &self.entries
    }

    pub fn get(&self, key: &AdapterKey) -> Option<&LowRankUpdate> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAdapters {
        self.entries.iter().map(|(k, u)| (*k, u.bind(tape))).collect()
    }

    /// Largest absolute entry-wise difference between the factor tensors of
    /// two sets with identical keys.
    pub fn max_abs_diff(&self, other: &AdapterSet) -> Result<f64> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Topology("adapter sets have different keys".into()));
        }
        let mut worst = 0.0f64;
        for (k, u) in &self.entries {
            let v = other
                .entries
                .get(k)
                .ok_or_else(|| Error::Topology(format!("missing key {k:?}")))?;
            if u.delta_a.shape() != v.delta_a.shape() || u.delta_b.shape() != v.delta_b.shape() {
                return Err(Error::Topology(format!("shape mismatch at {k:?}")));
            }
            worst = worst
                .max(u.delta_a.max_abs_diff(&v.delta_a))
                .max(u.delta_b.max_abs_diff(&v.delta_b));
            if u.scale != v.scale {
                worst = worst.max((u.scale - v.scale).abs());
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_strings() {
        let t: TargetSet = "qkvof".parse().unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t.sites().count(), 6);
        assert_eq!(t.to_string(), "qkvof");
        let t: TargetSet = "vq".parse().unwrap();
        assert_eq!(t.to_string(), "qv");
        assert!("qx".parse::<TargetSet>().is_err());
        assert!("qq".parse::<TargetSet>().is_err());
        assert!("".parse::<TargetSet>().is_err());
    }

    #[test]
    fn materialized_shape() {
        let u = LowRankUpdate::new(Tensor::filled(&[6, 2], 1.0), Tensor::filled(&[2, 5], 0.5), 2.0).unwrap();
        let m = u.materialize();
        assert_eq!(m.shape(), &[6, 5]);
        assert!(m.data().iter().all(|&x| x == 2.0));
        assert!(LowRankUpdate::new(Tensor::zeros(&[6, 2]), Tensor::zeros(&[3, 5]), 1.0).is_err());
    }
}
