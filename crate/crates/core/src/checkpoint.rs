//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `MORACKPT`, a little-endian `u64` header length,
//! a JSON header (config, vocabulary, group hashes, optimizer settings and a
//! tensor table of names, shapes and byte offsets), then every tensor as
//! little-endian `f64`s. Saving a loaded checkpoint reproduces the file byte
//! for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Vocabulary;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::tensor::Tensor;
use crate::train::{AdamHyper, AdaptationKind, Model, OptimizerState};

pub const MAGIC: &[u8; 8] = b"MORACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    adaptation: String,
    config: Vec<(String, String)>,
    vocab: String,
    groups: Vec<GroupHash>,
    optimizer: OptimizerHeader,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct GroupHash {
    name: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Owned tensors in file order: (group, name, tensor).
fn collect(model: &Model, opt: &OptimizerState) -> Vec<(String, String, Tensor)> {
    let mut out = Vec::new();
    model
        .backbone
        .visit(&mut |n, t| out.push(("backbone".to_string(), n, t.clone())));
    model
        .encoder
        .visit(&mut |n, t| out.push(("encoder".to_string(), n, t.clone())));
    let group = model.adaptation.group_name();
    let mut names = Vec::new();
    model.adaptation.params().visit(&mut |n, t| {
        names.push((n.clone(), t.shape().to_vec()));
        out.push((group.to_string(), n, t.clone()));
    });
    for (moment, bufs) in [("m", &opt.m), ("v", &opt.v)] {
        for ((name, shape), buf) in names.iter().zip(bufs) {
            let t = Tensor::new(shape, buf.clone()).expect("moments shaped like their parameters");
            out.push(("optimizer".to_string(), format!("optimizer.{moment}.{name}"), t));
        }
    }
    out
}

pub fn to_bytes(model: &Model, opt: &OptimizerState) -> Result<Vec<u8>> {
    let tensors = collect(model, opt);
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for (group, name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            group: group.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let hashes = model.group_hashes();
    let h = &opt.hyper;
    let header = Header {
        format_version: FORMAT_VERSION,
        adaptation: model.adaptation.kind().to_string(),
        config: model
            .config
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        vocab: model.vocab.chars(),
        groups: vec![
            GroupHash {
                name: "backbone".into(),
                sha256: hashes.backbone,
            },
            GroupHash {
                name: "encoder".into(),
                sha256: hashes.encoder,
            },
            GroupHash {
                name: model.adaptation.group_name().into(),
                sha256: hashes.adaptation,
            },
        ],
        optimizer: OptimizerHeader {
            step: opt.step,
            lr: h.lr,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
        },
        tensors: entries,
    };
    let json = serde_json::to_vec_pretty(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in &tensors {
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, OptimizerState)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
    let body = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    let data = &bytes[body..];

    let text: String = header.config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let config = RunConfig::default().parse_onto(&text)?;
    let kind: AdaptationKind = header.adaptation.parse()?;
    let mut model = Model::new(&config, kind)?;
    let vocab = Vocabulary::from_chars(&header.vocab)?;
    if vocab.size() != model.backbone.config.vocab_size {
        return Err(bad("vocabulary size does not match the backbone"));
    }
    model.vocab = vocab;

    let mut table: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for e in &header.tensors {
        if table.insert(e.name.as_str(), e).is_some() {
            return Err(bad(format!("duplicate tensor {}", e.name)));
        }
    }
    let read = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let e = table.get(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if e.shape != shape {
            return Err(bad(format!("tensor {name} has shape {:?}, expected {shape:?}", e.shape)));
        }
        let n: usize = shape.iter().product();
        let start = e.offset as usize;
        let raw = start
            .checked_add(8 * n)
            .and_then(|end| data.get(start..end))
            .ok_or_else(|| bad(format!("tensor {name} runs past the end of the file")))?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect())
    };
    let mut err = None;
    let mut fill = |name: String, t: &mut Tensor| {
        if err.is_some() {
            return;
        }
        match read(&name, t.shape()) {
            Ok(v) => t.data_mut().copy_from_slice(&v),
            Err(e) => err = Some(e),
        }
    };
    model.backbone.visit_mut(&mut fill);
    model.encoder.visit_mut(&mut fill);
    model.adaptation.params_mut().visit_mut(&mut fill);
    if let Some(e) = err {
        return Err(e);
    }

    let o = &header.optimizer;
    let hyper = AdamHyper {
        lr: o.lr,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
        weight_decay: o.weight_decay,
    };
    let mut opt = OptimizerState::new(hyper, model.adaptation.params());
    opt.step = o.step;
    let mut names = Vec::new();
    model
        .adaptation
        .params()
        .visit(&mut |n, t| names.push((n, t.shape().to_vec())));
    for (i, (name, shape)) in names.iter().enumerate() {
        opt.m[i] = read(&format!("optimizer.m.{name}"), shape)?;
        opt.v[i] = read(&format!("optimizer.v.{name}"), shape)?;
    }
    let expected = names.len() * 3 + model.backbone.named().len() + model.encoder.named().len();
    if header.tensors.len() != expected {
        return Err(bad(format!(
            "{} tensors in file, model has {expected}",
            header.tensors.len()
        )));
    }

    let hashes = model.group_hashes();
    for g in &header.groups {
        let actual = match g.name.as_str() {
            "backbone" => &hashes.backbone,
            "encoder" => &hashes.encoder,
            n if n == model.adaptation.group_name() => &hashes.adaptation,
            other => return Err(bad(format!("unknown group {other}"))),
        };
        if *actual != g.sha256 {
            return Err(bad(format!("content hash mismatch for group {}", g.name)));
        }
    }
    Ok((model, opt))
}

pub fn save(path: impl AsRef<Path>, model: &Model, opt: &OptimizerState) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model, opt)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, OptimizerState)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
