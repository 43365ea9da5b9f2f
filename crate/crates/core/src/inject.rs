//! Transient weight injection: `x · (W + scale · ΔA · ΔB)` evaluated in
//! factored form, without ever writing to `W`.

use crate::adapter::{AdapterSet, BoundUpdate, LowRankUpdate};
use crate::backbone::BackboneParams;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{gemm, Tensor};

/// A frozen base weight with an optional low-rank update, both on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EffectiveLinear<'u> {
    pub base: Var,
    pub update: Option<&'u BoundUpdate>,
}

impl EffectiveLinear<'_> {
    /// `x·W + scale·((x·ΔA)·ΔB)`, or `x·W` without an update.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let base = tape.matmul(x, self.base)?;
        let Some(u) = self.update else {
            return Ok(base);
        };
        check_update_shapes(tape.shape(self.base), tape.shape(u.delta_a), tape.shape(u.delta_b))?;
        let down = tape.matmul(x, u.delta_a)?;
        let up = tape.matmul(down, u.delta_b)?;
        let up = tape.scale(up, u.scale);
        tape.add(base, up)
    }
}

fn check_update_shapes(base: &[usize], a: &[usize], b: &[usize]) -> Result<()> {
    let ok = base.len() == 2
        && a.len() == 2
        && b.len() == 2
        && a[0] == base[0]
        && b[1] == base[1]
        && a[1] == b[0];
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "update factors {a:?}·{b:?} do not fit base weight {base:?}"
        )))
    }
}

/// Concrete-tensor form of [`EffectiveLinear::apply`].
pub fn effective_apply(x: &Tensor, base: &Tensor, update: Option<&LowRankUpdate>) -> Result<Tensor> {
    let out = x.matmul(base)?;
    let Some(u) = update else { return Ok(out) };
    check_update_shapes(base.shape(), u.delta_a.shape(), u.delta_b.shape())?;
    let down = x.matmul(&u.delta_a)?;
    let (t, _) = x.dims2()?;
    let (r, d_out) = u.delta_b.dims2()?;
    let mut up = vec![0.0; t * d_out];
    gemm(t, r, d_out, down.data(), false, u.delta_b.data(), false, &mut up, false);
    let data = out
        .data()
        .iter()
        .zip(&up)
        .map(|(b, v)| b + u.scale * v)
        .collect();
    Tensor::new(&[t, d_out], data)
}

/// A forward-capable view of a frozen backbone with one adapter set
/// overlaid. Holds only shared borrows, so the backbone cannot change.
#[derive(Clone, Copy, Debug)]
pub struct Overlay<'a> {
    backbone: &'a BackboneParams,
    adapters: &'a AdapterSet,
}

/// Checks that every adapter key names a layer and site the backbone has,
/// with matching factor shapes, and returns the overlaid view.
pub fn overlay<'a>(backbone: &'a BackboneParams, adapters: &'a AdapterSet) -> Result<Overlay<'a>> {
    for (key, u) in adapters.entries() {
        if key.layer >= backbone.layers.len() {
            return Err(Error::Topology(format!(
                "adapter targets layer {} but the backbone has {} layers",
                key.layer,
                backbone.layers.len()
            )));
        }
        let w = backbone.layers[key.layer].site_weight(key.site);
        check_update_shapes(w.shape(), u.delta_a.shape(), u.delta_b.shape())
            .map_err(|e| Error::Topology(format!("{key:?}: {e}")))?;
    }
    Ok(Overlay { backbone, adapters })
}

impl<'a> Overlay<'a> {
    pub fn adapters(&self) -> &'a AdapterSet {
        self.adapters
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        self.backbone.forward(tokens, Some(self.adapters))
    }

    pub fn greedy_decode(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        self.backbone.greedy_decode(prompt, Some(self.adapters), max_new)
    }
}
