//! Central finite-difference oracle, independent of the tape's backward pass.

use b2t2::numerics::{Graph, ParamStore, Tape, Tensor, Var};
use b2t2::Result;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor so that near-zero gradients are compared absolutely.
pub const FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// `(f(x + h) - f(x - h)) / 2h` for a scalar function of a flat vector.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += STEP;
    minus[i] -= STEP;
    (f(&plus) - f(&minus)) / (2.0 * STEP)
}

/// Reduces any output to a scalar with fixed pseudo-random weights, so every
/// output element contributes a distinct direction.
fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.3 + ((i * 37 + 11) % 17) as f64 / 10.0).collect()
}

fn scalarize(tape: &mut Tape, out: Var) -> Result<Var> {
    let n = tape.value(out).numel();
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::new(shape, weights(n))?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Builds `op` over fresh leaves holding `inputs` and returns the scalarized value.
fn evaluate<F>(op: &F, inputs: &[Tensor], grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if grad {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = op(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out)?;
    Ok((tape, vars, loss))
}

/// Largest relative error between backward and central differences over
/// every element of every input.
pub fn max_error<F>(op: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, loss) = evaluate(&op, inputs, true)?;
    tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).expect("input gradient").to_vec();
        let mut f = |x: &[f64]| {
            let mut shifted = inputs.to_vec();
            shifted[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
            let (tape, _, loss) = evaluate(&op, &shifted, false).unwrap();
            tape.data(loss)[0]
        };
        for (i, &a) in analytic.iter().enumerate() {
            let n = central_difference(&mut f, input.data(), i);
            worst = worst.max(relative_error(a, n));
        }
    }
    Ok(worst)
}

/// Adds uniform noise to every trainable parameter so gradients are not
/// dominated by the small initialization scale.
pub fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        for v in store.get_mut(&name).unwrap().data_mut() {
            *v += rng.random_range(-0.4..0.4);
        }
    }
}

/// Compares backward gradients of `loss` with central differences on a
/// sample of coordinates from every trainable parameter.
pub fn check_model<F>(store: &ParamStore, loss: F, rng: &mut ChaCha8Rng) -> f64
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = loss(&mut g).unwrap();
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (name, p) in store.iter().filter(|(_, p)| p.trainable) {
        let analytic = grads.get(name).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
        let mut picks: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i] != 0.0).collect();
        picks.shuffle(rng);
        picks.truncate(6);
        picks.extend((0..2).map(|_| rng.random_range(0..analytic.len())));
        let base = p.tensor.data().to_vec();
        let mut f = |x: &[f64]| {
            let mut shifted = store.clone();
            shifted.get_mut(name).unwrap().data_mut().copy_from_slice(x);
            let mut g = Graph::inference(&shifted);
            let out = loss(&mut g).unwrap();
            g.tape.data(out)[0]
        };
        for i in picks {
            let n = central_difference(&mut f, &base, i);
            worst = worst.max(relative_error(analytic[i], n));
        }
    }
    worst
}
