//! Tape gradients against central finite differences.

mod common;

use common::{example, finite_difference_check, miniature_config, randomize, FD_STEP};
use mora::nn::multi_head_attention;
use mora::train::{AdaptationKind, Model};
use mora::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Builds `f` on fresh tapes, reduces its output to a scalar through fixed
/// random weights, and compares every input gradient with differences.
fn check_op(shapes: &[&[usize]], seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng).trainable()).collect();
    let weights_seed = seed ^ 0x5eed;
    let eval = |inputs: &[Tensor], backward: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        let w = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(weights_seed));
        let w = tape.leaf(&w);
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        let value = tape.scalar(loss);
        if !backward {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        let grads = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
        (value, grads)
    };
    let (_, analytic) = eval(&inputs, true);
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            let a = analytic[i][j];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(err < 1e-6, "input {i} entry {j}: fd {fd} vs analytic {a}");
        }
    }
}

#[test]
fn matmul_and_transpose() {
    check_op(&[&[3, 4], &[4, 2]], 1, |t, v| t.matmul(v[0], v[1]).unwrap());
    check_op(&[&[3, 4]], 2, |t, v| t.transpose(v[0]).unwrap());
}

#[test]
fn elementwise_ops() {
    check_op(&[&[2, 3], &[2, 3]], 3, |t, v| t.add(v[0], v[1]).unwrap());
    check_op(&[&[2, 3], &[2, 3]], 4, |t, v| t.sub(v[0], v[1]).unwrap());
    check_op(&[&[2, 3], &[2, 3]], 5, |t, v| t.mul(v[0], v[1]).unwrap());
    check_op(&[&[2, 3], &[3]], 6, |t, v| t.add_row(v[0], v[1]).unwrap());
    check_op(&[&[2, 3], &[1]], 7, |t, v| t.scale_by(v[0], v[1]).unwrap());
    check_op(&[&[2, 3]], 8, |t, v| t.scale(v[0], -1.7));
    check_op(&[&[2, 3]], 9, |t, v| t.reshape(v[0], &[3, 2]).unwrap());
}

#[test]
fn activations() {
    check_op(&[&[3, 5]], 10, |t, v| t.gelu(v[0]));
    // relu away from its kink: shift inputs by a constant far from zero
    check_op(&[&[3, 5]], 11, |t, v| {
        let c = t.constant(&[3, 5], vec![0.3; 15]).unwrap();
        let x = t.mul(v[0], v[0]).unwrap();
        let x = t.add(x, c).unwrap();
        t.relu(x)
    });
}

#[test]
fn softmax_mask_and_norm() {
    check_op(&[&[3, 4]], 12, |t, v| t.softmax_rows(v[0]).unwrap());
    check_op(&[&[4, 4]], 13, |t, v| {
        let m = t.causal_mask(v[0]).unwrap();
        t.softmax_rows(m).unwrap()
    });
    check_op(&[&[3, 6], &[6], &[6]], 14, |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap());
}

#[test]
fn gathers_slices_and_concats() {
    check_op(&[&[5, 3]], 15, |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap());
    let nbrs = vec![vec![1], vec![0, 2], vec![1], vec![]];
    check_op(&[&[4, 3]], 16, move |t, v| t.neighbor_sum(v[0], &nbrs).unwrap());
    check_op(&[&[2, 3], &[2, 2]], 17, |t, v| t.concat_cols(&[v[0], v[1]]).unwrap());
    check_op(&[&[2, 3], &[1, 3]], 18, |t, v| t.concat_rows(&[v[0], v[1]]).unwrap());
    check_op(&[&[3, 5]], 19, |t, v| t.slice_cols(v[0], 1, 3).unwrap());
    check_op(&[&[5, 2]], 20, |t, v| t.slice_rows(v[0], 2, 2).unwrap());
}

#[test]
fn reductions_and_cross_entropy() {
    check_op(&[&[2, 3]], 21, |t, v| t.sum(v[0]));
    check_op(&[&[2, 3]], 22, |t, v| t.mean(v[0]));
    check_op(&[&[4, 5]], 23, |t, v| t.cross_entropy(v[0], &[1, usize::MAX, 4, 0], usize::MAX).unwrap());
}

#[test]
fn attention_both_masks() {
    for causal in [false, true] {
        check_op(&[&[3, 4], &[3, 4], &[3, 4]], 24 + u64::from(causal), move |t, v| {
            multi_head_attention(t, v[0], v[1], v[2], 2, causal).unwrap()
        });
    }
    // cross-attention shape: 2 queries over 5 memory rows
    check_op(&[&[2, 4], &[5, 4], &[5, 4]], 26, |t, v| multi_head_attention(t, v[0], v[1], v[2], 2, false).unwrap());
}

fn assert_all_leaves(model: &Model, batch: &[mora::data::TrainingExample]) {
    let report = finite_difference_check(model, batch);
    assert!(!report.is_empty());
    for (name, rel, norm) in &report {
        assert!(*norm > 0.0, "{name} has an identically zero gradient");
        assert!(*rel < 1e-4, "{name}: relative error {rel:e}");
    }
}

#[test]
fn generator_end_to_end_per_layer_assignment() {
    let mut c = miniature_config();
    c.backbone.layers = 2;
    c.mawgen.assignment = mora::mawgen::Assignment::PerLayer;
    c.mawgen.targets = "qvf".parse().unwrap();
    let mut model = Model::new(&c, AdaptationKind::Dynamic).unwrap();
    randomize(model.adaptation.params_mut(), 3, 0.3);
    assert_all_leaves(&model, &[example(Some("CC(=O)N"), "Go?", "ab")]);
}

#[test]
fn static_adapter_end_to_end() {
    let mut model = Model::new(&miniature_config(), AdaptationKind::Static).unwrap();
    randomize(model.adaptation.params_mut(), 4, 0.3);
    let batch = [example(Some("CCO"), "Atom count?", "3"), example(None, "1+2=", "3")];
    assert_all_leaves(&model, &batch);
}

#[test]
fn text_only_examples_give_the_generator_no_gradient() {
    let mut model = Model::new(&miniature_config(), AdaptationKind::Dynamic).unwrap();
    randomize(model.adaptation.params_mut(), 5, 0.3);
    let ex = example(None, "Reverse abc", "cba");
    let (_, grads) = mora::train::loss_and_grads(&model, &[(0, &ex)]).unwrap();
    assert!(grads.iter().flatten().all(|&g| g == 0.0));
}
