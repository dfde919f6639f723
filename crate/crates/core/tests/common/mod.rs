#![allow(dead_code)]

use maskselect::data::{Image8, Sample};
use maskselect::model::ModelParams;
use maskselect::rng::{derive_seed, mix64};
use maskselect::train::sample_gradients;
use maskselect::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors. Central differences on a loss of
/// size `L` carry roundoff near `ε·L/h ≈ 1e-10`, so gradients below this
/// floor are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Uniform values in `[lo, hi)` from a counter-based stream.
pub fn uniform(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let u = (mix64(derive_seed(seed, i as u64)) >> 11) as f64 / (1u64 << 53) as f64;
            lo + (hi - lo) * u
        })
        .collect()
}

pub fn random_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(seed, n, lo, hi)).unwrap()
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Largest relative error between tape gradients and central differences of
/// the scalar loss built by `build` from leaves holding `inputs`.
pub fn max_rel_error(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = eval(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for i in 0..input.numel() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] = input.data()[i] + FD_STEP;
            let (t, _, l) = eval(&xs);
            let up = t.value(l).item();
            xs[k].data_mut()[i] = input.data()[i] - FD_STEP;
            let (t, _, l) = eval(&xs);
            let down = t.value(l).item();
            worst = worst.max(rel_error(analytic.data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Same check for `ℓ_total` of a whole model, over every parameter tensor.
pub fn model_max_rel_error(params: &ModelParams, sample: &Sample, lambda: f64) -> f64 {
    let (_, grads) = sample_gradients(params, sample, lambda).unwrap();
    let loss_at = |p: &ModelParams| sample_gradients(p, sample, lambda).unwrap().0.total;
    let mut worst = 0.0f64;
    for (t, g) in grads.iter().enumerate() {
        for i in 0..g.numel() {
            let mut p = params.clone();
            let base = p.tensors()[t].data()[i];
            p.tensors_mut()[t].data_mut()[i] = base + FD_STEP;
            let up = loss_at(&p);
            p.tensors_mut()[t].data_mut()[i] = base - FD_STEP;
            let down = loss_at(&p);
            worst = worst.max(rel_error(g.data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

pub fn random_image(seed: u64, height: usize, width: usize) -> Image8 {
    let data = uniform(seed, height * width * 3, 0.0, 256.0)
        .into_iter()
        .map(|v| v as u8)
        .collect();
    Image8::new(width, height, 3, data).unwrap()
}

pub fn random_sample(seed: u64, height: usize, width: usize, label: usize) -> Sample {
    Sample::new(
        format!("r{seed}"),
        label,
        random_image(seed, height, width),
        None,
    )
}

/// Scalar loss `Σ out ⊙ R` with a fixed random `R`, so every output element
/// carries a distinct adjoint.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let r = tape.leaf(random_tensor(seed, &shape, -1.0, 1.0));
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod)
}

/// Away from the kink of `|x|` and `relu(x)`.
fn off_zero(seed: u64, shape: &[usize]) -> Tensor {
    random_tensor(seed, shape, 0.1, 1.0).map(|v| {
        if ((v * 1e4) as u64).is_multiple_of(2) {
            v
        } else {
            -v
        }
    })
}

/// Relative gradient error of every differentiable primitive, by name.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let a = random_tensor(1, &[3, 4], -2.0, 2.0);
    let b = random_tensor(2, &[3, 4], -2.0, 2.0);
    let x = random_tensor(3, &[2, 6, 6], -1.0, 1.0);
    let mut out = vec![
        (
            "add",
            max_rel_error(&[a.clone(), b.clone()], |t, v| {
                let o = t.add(v[0], v[1]).unwrap();
                weighted_sum(t, o, 10)
            }),
        ),
        (
            "mul",
            max_rel_error(&[a.clone(), b.clone()], |t, v| {
                let o = t.mul(v[0], v[1]).unwrap();
                weighted_sum(t, o, 11)
            }),
        ),
        (
            "scale",
            max_rel_error(std::slice::from_ref(&a), |t, v| {
                let o = t.scale(v[0], -0.37);
                weighted_sum(t, o, 12)
            }),
        ),
        (
            "sum",
            max_rel_error(std::slice::from_ref(&a), |t, v| t.sum(v[0])),
        ),
        (
            "square",
            max_rel_error(std::slice::from_ref(&a), |t, v| {
                let o = t.square(v[0]);
                weighted_sum(t, o, 13)
            }),
        ),
        (
            "abs",
            max_rel_error(&[off_zero(4, &[3, 4])], |t, v| {
                let o = t.abs(v[0]);
                weighted_sum(t, o, 14)
            }),
        ),
        (
            "relu",
            max_rel_error(&[off_zero(5, &[3, 4])], |t, v| {
                let o = t.relu(v[0]);
                weighted_sum(t, o, 15)
            }),
        ),
        (
            "sigmoid",
            max_rel_error(&[random_tensor(6, &[3, 4], -6.0, 6.0)], |t, v| {
                let o = t.sigmoid(v[0]);
                weighted_sum(t, o, 16)
            }),
        ),
        (
            "gap",
            max_rel_error(std::slice::from_ref(&x), |t, v| {
                let o = t.gap(v[0]).unwrap();
                weighted_sum(t, o, 17)
            }),
        ),
        (
            "apply_mask",
            max_rel_error(&[x.clone(), random_tensor(7, &[6, 6], 0.0, 1.0)], |t, v| {
                let o = t.apply_mask(v[0], v[1]).unwrap();
                weighted_sum(t, o, 18)
            }),
        ),
        (
            "linear",
            max_rel_error(
                &[
                    random_tensor(8, &[5], -1.0, 1.0),
                    random_tensor(9, &[3, 5], -1.0, 1.0),
                    random_tensor(19, &[3], -1.0, 1.0),
                ],
                |t, v| {
                    let o = t.linear(v[0], v[1], v[2]).unwrap();
                    weighted_sum(t, o, 20)
                },
            ),
        ),
        (
            "softmax_cross_entropy",
            max_rel_error(&[random_tensor(21, &[4], -3.0, 3.0)], |t, v| {
                t.softmax_cross_entropy(v[0], 2).unwrap()
            }),
        ),
        (
            "select",
            max_rel_error(std::slice::from_ref(&a), |t, v| t.select(v[0], 7).unwrap()),
        ),
    ];
    for (name, stride, padding) in [
        ("conv2d s2 p1", 2, 1),
        ("conv2d s1 p0", 1, 0),
        ("conv2d s1 p1", 1, 1),
    ] {
        let inputs = [
            x.clone(),
            random_tensor(22, &[3, 2, 3, 3], -0.5, 0.5),
            random_tensor(23, &[3], -0.5, 0.5),
        ];
        out.push((
            name,
            max_rel_error(&inputs, |t, v| {
                let o = t.conv2d(v[0], v[1], v[2], stride, padding).unwrap();
                weighted_sum(t, o, 24)
            }),
        ));
    }
    out
}

/// Logits through the masked head with an exact all-ones mask on the tape.
pub fn logits_with_unit_mask(params: &ModelParams, image: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone());
    let (e, _) = maskselect::model::encode_on(&mut tape, params, x).unwrap();
    let (rows, cols) = (tape.value(e).shape()[1], tape.value(e).shape()[2]);
    let ones = tape.leaf(Tensor::filled(&[rows, cols], 1.0));
    let s = tape.apply_mask(e, ones).unwrap();
    let p = tape.gap(s).unwrap();
    let w = tape.leaf(params.head_weights.clone());
    let b = tape.leaf(params.head_bias.clone());
    let l = tape.linear(p, w, b).unwrap();
    tape.value(l).clone()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
