#![allow(dead_code)]

use std::collections::BTreeMap;

use fedcil::acgan::{AcganConfig, AcganModel, Bound, Group};
use fedcil::autodiff::{Tape, Var};
use fedcil::rng::{rng_from_seed, SimRng};
use fedcil::{Result, Tensor};

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error. Central differences at
/// `h = 1e-6` carry about 1e-10 of cancellation noise, so gradients that
/// vanish on both sides are compared to an absolute 1e-8 instead.
pub const FD_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Worst relative error between the tape gradient of `f` and central
/// differences, over every element of every input.
pub fn check_fn<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).unwrap().item()
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Same as [`check_fn`] for an objective over the parameters of `model`
/// in `group`.
pub fn check_model<F>(model: &AcganModel, group: Group, f: F) -> f64
where
    F: for<'t> Fn(&AcganModel, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let b = model.bind(&tape, group);
    let loss = f(model, &b).unwrap();
    let grads = b.grads(&tape.backward(loss).unwrap());
    let eval = |m: &AcganModel| -> f64 {
        let tape = Tape::new();
        let b = m.bind(&tape, group);
        f(m, &b).unwrap().item()
    };
    let mut m = model.clone();
    let mut worst: f64 = 0.0;
    for (name, g) in &grads {
        for j in 0..g.len() {
            let orig = m.params()[name].data()[j];
            m.params_mut().get_mut(name).unwrap().data_mut()[j] = orig + FD_STEP;
            let up = eval(&m);
            m.params_mut().get_mut(name).unwrap().data_mut()[j] = orig - FD_STEP;
            let down = eval(&m);
            m.params_mut().get_mut(name).unwrap().data_mut()[j] = orig;
            worst = worst.max(rel_err(g.data()[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

pub fn toy_config() -> AcganConfig {
    AcganConfig {
        data_dim: 3,
        noise_dim: 2,
        gen_hidden: 5,
        trunk_hidden: 5,
        feature_dim: 4,
        leak: 0.2,
    }
}

pub fn toy_model(classes: &[usize], seed: u64) -> AcganModel {
    AcganModel::new(toy_config(), classes, &mut rng_from_seed(seed)).unwrap()
}

pub fn randn(shape: &[usize], rng: &mut SimRng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Anchor parameters displaced from `model` by Gaussian noise.
pub fn shifted_anchor(model: &AcganModel, rng: &mut SimRng) -> BTreeMap<String, Tensor> {
    model
        .params()
        .iter()
        .map(|(k, v)| {
            let noise = Tensor::randn(v.shape(), 0.1, rng);
            let data = v.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            (k.clone(), Tensor::new(v.shape().to_vec(), data).unwrap())
        })
        .collect()
}

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_row_bias",
    "matmul",
    "matmul_bt",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "softmax",
    "concat_rows",
    "concat_cols",
    "sum",
    "mean",
    "gather_rows",
    "select_cols",
    "cross_entropy",
    "kl_divergence",
    "binary_cross_entropy",
];

/// Gradient check of one tape operation on a random instance; the result is
/// contracted against fixed random weights so every output element matters.
pub fn check_op(op: &str, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let (r, c, k) = (2 + (seed % 3) as usize, 2 + (seed % 4) as usize, 3);
    let a = randn(&[r, c], &mut rng);
    let b = randn(&[r, c], &mut rng);
    let w_rc = randn(&[r, c], &mut rng);
    match op {
        "add" => check_fn(&[a, b], |t, v| dot(t, v[0].add(v[1])?, &w_rc)),
        "sub" => check_fn(&[a, b], |t, v| dot(t, v[0].sub(v[1])?, &w_rc)),
        "mul" => check_fn(&[a, b], |t, v| dot(t, v[0].mul(v[1])?, &w_rc)),
        "scale" => check_fn(&[a], |t, v| dot(t, v[0].scale(-1.7), &w_rc)),
        "add_row_bias" => {
            let bias = randn(&[c], &mut rng);
            check_fn(&[a, bias], |t, v| dot(t, v[0].add_row_bias(v[1])?, &w_rc))
        }
        "matmul" => {
            let m = randn(&[c, k], &mut rng);
            let w = randn(&[r, k], &mut rng);
            check_fn(&[a, m], |t, v| dot(t, v[0].matmul(v[1])?, &w))
        }
        "matmul_bt" => {
            let m = randn(&[k, c], &mut rng);
            let w = randn(&[r, k], &mut rng);
            check_fn(&[a, m], |t, v| dot(t, v[0].matmul_bt(v[1])?, &w))
        }
        "leaky_relu" => {
            let a = away_from_zero(a);
            check_fn(&[a], |t, v| dot(t, v[0].leaky_relu(0.2), &w_rc))
        }
        "tanh" => check_fn(&[a], |t, v| dot(t, v[0].tanh(), &w_rc)),
        "sigmoid" => check_fn(&[a], |t, v| dot(t, v[0].sigmoid(), &w_rc)),
        "softmax" => check_fn(&[a], |t, v| dot(t, v[0].softmax()?, &w_rc)),
        "concat_rows" => {
            let w = randn(&[2 * r, c], &mut rng);
            check_fn(&[a, b], |t, v| dot(t, Var::concat_rows(&[v[0], v[1]])?, &w))
        }
        "concat_cols" => {
            let m = randn(&[r, k], &mut rng);
            let w = randn(&[r, c + k], &mut rng);
            check_fn(&[a, m], |t, v| dot(t, v[0].concat_cols(v[1])?, &w))
        }
        "sum" => check_fn(&[a], |t, v| {
            let s = v[0].mul(v[0])?.sum();
            s.mul(t.constant(Tensor::scalar(0.3)))
        }),
        "mean" => check_fn(&[a], |_, v| Ok(v[0].mul(v[0])?.mean())),
        "gather_rows" => {
            let idx = vec![r - 1, 0, r - 1];
            let w = randn(&[3, c], &mut rng);
            check_fn(&[a], move |t, v| dot(t, v[0].gather_rows(&idx)?, &w))
        }
        "select_cols" => {
            let idx = vec![c - 1, 0];
            let w = randn(&[r, 2], &mut rng);
            check_fn(&[a], move |t, v| dot(t, v[0].select_cols(&idx)?, &w))
        }
        "cross_entropy" => {
            let target = soft_targets(r, c, &mut rng);
            check_fn(&[a], move |t, v| v[0].softmax()?.cross_entropy(t.constant(target.clone())))
        }
        "kl_divergence" => check_fn(&[a, b], |_, v| v[0].softmax()?.kl_divergence(v[1].softmax()?)),
        "binary_cross_entropy" => {
            let target = soft_targets(r, c, &mut rng);
            check_fn(&[a], move |t, v| {
                v[0].sigmoid().binary_cross_entropy(t.constant(target.clone()))
            })
        }
        other => panic!("no gradient check for {other}"),
    }
}

fn dot<'t>(t: &'t Tape, v: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    Ok(v.mul(t.constant(w.clone()))?.sum())
}

fn away_from_zero(a: Tensor) -> Tensor {
    let data = a
        .data()
        .iter()
        .map(|&x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x })
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// Rows of positive weights summing to one.
fn soft_targets(r: usize, c: usize, rng: &mut SimRng) -> Tensor {
    use rand::Rng;
    let mut data = Vec::with_capacity(r * c);
    for _ in 0..r {
        let row: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![r, c], data).unwrap()
}

pub const OBJECTIVES: &[&str] = &[
    "acgan_discriminator",
    "acgan_generator",
    "fedcil_client",
    "fedprox_classifier",
    "fedprox_generator",
    "lwf2t_distillation",
];

/// Gradient check of a complete training objective on a toy model.
pub fn check_objective(name: &str, seed: u64) -> f64 {
    use fedcil::acgan::proximal_term;
    use fedcil::trainers::{classifier_objective, Consistency, Teacher, KD_TEMPERATURE};

    let mut rng = rng_from_seed(seed.wrapping_mul(7919) + 1);
    let classes = [0, 1, 2];
    let model = toy_model(&classes, seed);
    let dim = model.config().data_dim;
    let noise = model.config().noise_dim;
    let n = 4;
    let real_x = Tensor::randn(&[n, dim], 0.5, &mut rng);
    let real_labels = [0, 2, 1, 2];
    let fake_labels = [1, 0, 0, 2];
    let z = randn(&[n, noise], &mut rng);
    let real_y = model.one_hot(&real_labels).unwrap();
    let fake_y = model.one_hot(&fake_labels).unwrap();
    let inputs = [&real_x, &real_y, &z, &fake_y];
    match name {
        "acgan_discriminator" => check_model(&model, Group::Discriminator, |m, b| dis(m, b, inputs)),
        "acgan_generator" => check_model(&model, Group::Generator, |m, b| {
            let t = b.get("cls.w").tape();
            m.generator_objective(b, t.constant(z.clone()), t.constant(fake_y.clone()))?
                .total()
        }),
        "fedcil_client" => {
            let consistency = Consistency {
                weights: [1.0, 0.7, 1.3],
                c1: Some((
                    Tensor::randn(&[n, dim], 0.5, &mut rng),
                    Tensor::randn(&[n, dim], 0.5, &mut rng),
                )),
                c2: Some((real_x.clone(), Tensor::randn(&[n, dim], 0.5, &mut rng))),
                c3: Some((Tensor::randn(&[n, dim], 0.5, &mut rng), vec![2, 1, 0, 0])),
            };
            let anchor = shifted_anchor(&model, &mut rng);
            check_model(&model, Group::Discriminator, |m, b| {
                let mut total = dis(m, b, inputs)?;
                for term in consistency.weighted_terms(m, b)?.into_iter().flatten() {
                    total = total.add(term)?;
                }
                total.add(proximal_term(b, &anchor, 0.05)?.unwrap())
            })
        }
        "fedprox_classifier" => {
            let anchor = shifted_anchor(&model, &mut rng);
            check_model(&model, Group::Classifier, |m, b| {
                Ok(classifier_objective(m, b, &real_x, &real_labels, &[], 1.0, Some((&anchor, 0.3)))?.total)
            })
        }
        "fedprox_generator" => {
            let anchor = shifted_anchor(&model, &mut rng);
            check_model(&model, Group::Generator, |m, b| {
                let t = b.get("cls.w").tape();
                let g = m
                    .generator_objective(b, t.constant(z.clone()), t.constant(fake_y.clone()))?
                    .total()?;
                g.add(proximal_term(b, &anchor, 0.3)?.unwrap())
            })
        }
        "lwf2t_distillation" => {
            let previous = toy_model(&[0, 2], seed + 1000);
            let global = toy_model(&[0, 1, 2], seed + 2000);
            let teachers = [
                Teacher::new(&previous, &model, &real_x, KD_TEMPERATURE).unwrap(),
                Teacher::new(&global, &model, &real_x, KD_TEMPERATURE).unwrap(),
            ];
            check_model(&model, Group::Classifier, |m, b| {
                Ok(classifier_objective(m, b, &real_x, &real_labels, &teachers, KD_TEMPERATURE, None)?.total)
            })
        }
        other => panic!("no objective {other}"),
    }
}

fn dis<'t>(m: &AcganModel, b: &Bound<'t>, [x, y, z, fy]: [&Tensor; 4]) -> Result<Var<'t>> {
    let t = b.get("cls.w").tape();
    m.discriminator_objective(
        b,
        t.constant(x.clone()),
        t.constant(y.clone()),
        t.constant(z.clone()),
        t.constant(fy.clone()),
    )?
    .total()
}
