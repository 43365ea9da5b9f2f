#![allow(dead_code)]

use mora::config::RunConfig;
use mora::data::TrainingExample;
use mora::train::{loss_and_grads, Model};
use mora::{ParamGroup, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;

/// Small but complete configuration: every site targeted, two layers.
pub fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.backbone.layers = 2;
    c.backbone.d_model = 16;
    c.backbone.heads = 2;
    c.backbone.d_ff = 32;
    c.backbone.max_len = 48;
    c.encoder.layers = 2;
    c.encoder.d_model = 16;
    c.mawgen.blocks = 1;
    c.mawgen.heads = 2;
    c.mawgen.d_model = 16;
    c.mawgen.d_ff = 32;
    c.mawgen.rank = 2;
    c.mawgen.alpha = 2.0;
    c.eval.max_new_tokens = 6;
    c
}

/// d_llm = 8, r = 2, one backbone layer, one generator block.
pub fn miniature_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.backbone.layers = 1;
    c.backbone.d_model = 8;
    c.backbone.heads = 2;
    c.backbone.d_ff = 16;
    c.backbone.max_len = 32;
    c.encoder.layers = 2;
    c.encoder.d_model = 8;
    c.mawgen.blocks = 1;
    c.mawgen.heads = 2;
    c.mawgen.d_model = 8;
    c.mawgen.d_ff = 16;
    c.mawgen.rank = 2;
    c.mawgen.alpha = 2.0;
    c
}

/// Overwrites every tensor of a group with N(0, std²) draws, so that
/// zero-initialised parts (heads, static factors) carry signal.
pub fn randomize(group: &mut dyn ParamGroup, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    group.visit_mut(&mut |_, t| {
        let fresh = Tensor::randn(t.shape(), std, &mut rng);
        t.data_mut().copy_from_slice(fresh.data());
    });
}

pub fn example(smiles: Option<&str>, instruction: &str, answer: &str) -> TrainingExample {
    TrainingExample {
        smiles: smiles.map(str::to_string),
        instruction: instruction.into(),
        answer: answer.into(),
        task_tag: "check".into(),
    }
}

/// Per-leaf relative error `‖fd − analytic‖ / max(‖fd‖, ‖analytic‖)`
/// between central differences and the tape gradient of the batch loss.
pub fn finite_difference_check(model: &Model, batch: &[TrainingExample]) -> Vec<(String, f64, f64)> {
    let indexed: Vec<(usize, &TrainingExample)> = batch.iter().enumerate().collect();
    let (_, analytic) = loss_and_grads(model, &indexed).expect("loss");
    let mut names = Vec::new();
    model.adaptation.params().visit(&mut |n, t| names.push((n, t.len())));
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (leaf, (name, len)) in names.iter().enumerate() {
        let mut fd = vec![0.0; *len];
        for (j, slot) in fd.iter_mut().enumerate() {
            let set = |m: &mut Model, value: Option<f64>| -> f64 {
                let mut k = 0;
                let mut old = 0.0;
                m.adaptation.params_mut().visit_mut(&mut |_, t| {
                    if k == leaf {
                        old = t.data()[j];
                        if let Some(v) = value {
                            t.data_mut()[j] = v;
                        }
                    }
                    k += 1;
                });
                old
            };
            let orig = set(&mut probe, None);
            set(&mut probe, Some(orig + FD_STEP));
            let plus = loss_and_grads(&probe, &indexed).expect("loss").0;
            set(&mut probe, Some(orig - FD_STEP));
            let minus = loss_and_grads(&probe, &indexed).expect("loss").0;
            set(&mut probe, Some(orig));
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        let a = &analytic[leaf];
        let diff = fd.iter().zip(a).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = norm(&fd).max(norm(a));
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        out.push((name.clone(), rel, norm(a)));
    }
    out
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
