//! Finite-difference cases shared by the gradient tests and the acceptance run.

use declab::blocks::{self, AttnMask, Init};
use declab::data::{frame_source, frame_target};
use declab::model::{build_model, Model, ModelConfig, Padded};
use declab::tensor::{Mask, ParamId, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grad_check;

pub const TOL: f64 = 1e-4;

type Loss = Box<dyn Fn(&mut Tape, &ParamStore) -> Var>;

fn store_with(shapes: &[(&str, Vec<usize>)], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        let n = shape.iter().product();
        let vals = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        store.add(*name, Tensor::new(shape.clone(), vals).unwrap()).unwrap();
    }
    store
}

pub fn all_entries(store: &ParamStore) -> Vec<(usize, usize)> {
    store
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, p))| (0..p.tensor.len()).map(move |ei| (pi, ei)))
        .collect()
}

fn id(store: &ParamStore, name: &str) -> ParamId {
    store.id_of(name).unwrap()
}

/// `sum(x * R)` for a fixed pseudo-random `R`, so every output entry matters.
fn weighted_sum(tape: &mut Tape, x: Var) -> Var {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let r: Vec<f64> = (0..n).map(|i| ((i * 7919 % 23) as f64 - 11.0) / 7.0).collect();
    let r = tape.constant(shape, r).unwrap();
    let y = tape.mul(x, r).unwrap();
    tape.sum(y).unwrap()
}

fn primitive_cases() -> Vec<(&'static str, ParamStore, Loss)> {
    let mut cases: Vec<(&'static str, ParamStore, Loss)> = Vec::new();

    let s = store_with(&[("a", vec![2, 3, 4]), ("b", vec![4, 5]), ("c", vec![2, 5, 4])], 1);
    cases.push((
        "matmul",
        s,
        Box::new(|t, s| {
            let a = t.param(s, id(s, "a"));
            let b = t.param(s, id(s, "b"));
            let c = t.param(s, id(s, "c"));
            let ab = t.matmul(a, b).unwrap();
            let ac = t.matmul_ext(a, c, true).unwrap();
            let y = t.mul(ab, ac).unwrap();
            weighted_sum(t, y)
        }),
    ));

    let s = store_with(&[("x", vec![3, 4]), ("y", vec![3, 4]), ("b", vec![4])], 2);
    cases.push((
        "add/mul/scale",
        s,
        Box::new(|t, s| {
            let x = t.param(s, id(s, "x"));
            let y = t.param(s, id(s, "y"));
            let b = t.param(s, id(s, "b"));
            let z = t.add(x, b).unwrap();
            let z = t.mul(z, y).unwrap();
            let z = t.scale(z, -1.7).unwrap();
            weighted_sum(t, z)
        }),
    ));

    let mut s = store_with(&[("x", vec![5, 6])], 3);
    for v in s.iter_mut().next().unwrap().tensor.values_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    cases.push((
        "relu",
        s,
        Box::new(|t, s| {
            let x = t.param(s, id(s, "x"));
            let r = t.relu(x).unwrap();
            weighted_sum(t, r)
        }),
    ));

    let s = store_with(&[("x", vec![2, 3, 4])], 4);
    cases.push((
        "masked softmax",
        s,
        Box::new(|t, s| {
            let mask = Mask::from_fn(vec![2, 3, 4], |ix| ix[2] <= ix[1] + ix[0]);
            let x = t.param(s, id(s, "x"));
            let x = t.scale(x, 3.0).unwrap();
            let p = t.softmax(x, Some(&mask)).unwrap();
            weighted_sum(t, p)
        }),
    ));

    let s = store_with(&[("x", vec![4, 6]), ("g", vec![6]), ("b", vec![6])], 5);
    cases.push((
        "layer_norm",
        s,
        Box::new(|t, s| {
            let x = t.param(s, id(s, "x"));
            let g = t.param(s, id(s, "g"));
            let b = t.param(s, id(s, "b"));
            let y = t.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
            weighted_sum(t, y)
        }),
    ));

    let s = store_with(&[("e", vec![5, 3])], 6);
    cases.push((
        "embedding",
        s,
        Box::new(|t, s| {
            let e = t.param(s, id(s, "e"));
            let y = t.embedding(e, &[1, 4, 1, 0, 1, 3], &[2, 3]).unwrap();
            weighted_sum(t, y)
        }),
    ));

    let s = store_with(&[("x", vec![2, 3, 4])], 7);
    cases.push((
        "reshape/permute",
        s,
        Box::new(|t, s| {
            let x = t.param(s, id(s, "x"));
            let y = t.reshape(x, vec![2, 3, 2, 2]).unwrap();
            let y = t.permute(y, &[0, 2, 1, 3]).unwrap();
            let y = t.reshape(y, vec![4, 6]).unwrap();
            weighted_sum(t, y)
        }),
    ));

    let s = store_with(&[("z", vec![4, 5])], 8);
    cases.push((
        "cross_entropy",
        s,
        Box::new(|t, s| {
            let z = t.param(s, id(s, "z"));
            t.cross_entropy(z, &[3, 0, 1, 4], 0, 0.1).unwrap().0
        }),
    ));

    let mut init = Init::new();
    let attn = init.attention("a", 4, 2).unwrap();
    let mut s = Init::materialize(init.specs(), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let q: Vec<f64> = (0..24).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
    let kv: Vec<f64> = (0..40).map(|i| ((i * 13 % 17) as f64 - 8.0) / 6.0).collect();
    s.add("q", Tensor::new(vec![2, 3, 4], q).unwrap()).unwrap();
    s.add("kv", Tensor::new(vec![2, 5, 4], kv).unwrap()).unwrap();
    cases.push((
        "multi-head attention",
        s,
        Box::new(move |t, s| {
            let mask = AttnMask::key_padding(&[5, 2], 3, 5);
            let q = t.param(s, id(s, "q"));
            let kv = t.param(s, id(s, "kv"));
            let (o, w) = blocks::multi_head_attention(t, s, &attn, q, kv, kv, Some(&mask), 0.0).unwrap();
            let a = weighted_sum(t, o);
            let b = weighted_sum(t, w);
            t.add(a, b).unwrap()
        }),
    ));
    cases
}

/// Worst relative error of every primitive case, checked on all entries.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    primitive_cases()
        .into_iter()
        .map(|(name, mut store, loss)| {
            let entries = all_entries(&store);
            (name, grad_check(&mut store, |s| s, &entries, &*loss))
        })
        .collect()
}

fn batch(model: &Model) -> (Padded, Padded, Padded) {
    let v = model.config.src_vocab;
    let srcs = [vec![4, 5, 6], vec![v - 1]];
    let tgts = [vec![5, 4], vec![4, 6, 5, 4]];
    let src: Vec<_> = srcs.iter().map(|s| frame_source(s)).collect();
    let (ti, to): (Vec<_>, Vec<_>) = tgts.iter().map(|t| frame_target(t)).unzip();
    (Padded::new(&src).unwrap(), Padded::new(&ti).unwrap(), Padded::new(&to).unwrap())
}

fn model_loss(tape: &mut Tape, m: &Model) -> Var {
    let (src, ti, to) = batch(m);
    m.forward_loss(tape, &src, &ti, &to, 0.1).unwrap().0
}

/// Checks a model's label-smoothed batch loss; `per_param` samples that many
/// entries of each tensor, `None` checks all of them.
pub fn model_error(config: &ModelConfig, seed: u64, per_param: Option<usize>) -> f64 {
    let mut model = build_model(config, seed).unwrap();
    let entries = match per_param {
        None => all_entries(&model.store),
        Some(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
            let mut e = Vec::new();
            for (pi, (_, prm)) in model.store.iter().enumerate() {
                for _ in 0..k {
                    e.push((pi, rng.gen_range(0..prm.tensor.len())));
                }
            }
            e
        }
    };
    grad_check(&mut model, |m| &mut m.store, &entries, &model_loss)
}

/// The two-layer Toy model, dropout off, four sampled entries per tensor.
pub fn toy_two_layer_error() -> f64 {
    let mut config = ModelConfig::toy(12, 12).with_dropout(0.0);
    config.n_enc_layers = 2;
    config.n_dec_layers = 2;
    model_error(&config, 12, Some(4))
}
