//! Named parameter groups: traversal, freezing and content hashing.

use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// A collection of named tensors with a stable traversal order.
pub trait ParamGroup {
    /// Calls `f` for every tensor, in a fixed order, with its dotted name.
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor));

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor));

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut(&mut |_, t| t.set_requires_grad(trainable));
    }

    fn clear_grads(&mut self) {
        self.visit_mut(&mut |_, t| t.clear_grad());
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// SHA-256 over names, shapes and little-endian values.
    fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |name, t| {
            h.update(name.as_bytes());
            h.update([0]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        });
        hex::encode(h.finalize())
    }
}

/// Visits a tensor under `prefix.name`.
pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
