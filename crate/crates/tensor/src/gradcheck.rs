//! Central finite-difference gradient checking.
//!
//! The checker only ever reads forward values, so it is independent of the
//! backward rules it verifies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Reduction, Var};
use crate::tensor::{Mask, Tensor};

/// Builds a scalar from leaves registered in the same order as the inputs.
pub type LossFn = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// Norm-wise relative error `‖a − n‖ / (‖a‖ + ‖n‖)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    if na + nn < 1e-300 {
        0.0
    } else {
        diff / (na + nn)
    }
}

fn evaluate(
    inputs: &[Tensor<f64>],
    train: bool,
    seed: u64,
    f: &LossFn,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new(train, seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    let per_input = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    Ok((value, per_input))
}

fn value_only(inputs: &[Tensor<f64>], train: bool, seed: u64, f: &LossFn) -> Result<f64> {
    let mut g = Graph::new(train, seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Relative error of the analytic gradient against central differences with
/// step `eps`, one entry per input. Every evaluation uses a fresh graph with
/// the same `seed`, so dropout masks are identical across perturbations.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    train: bool,
    seed: u64,
    eps: f64,
    f: &LossFn,
) -> Result<Vec<f64>> {
    let (_, analytic) = evaluate(inputs, train, seed, f)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] = input.data()[j] + eps;
            let up = value_only(&probe, train, seed, f)?;
            probe[i].data_mut()[j] = input.data()[j] - eps;
            let down = value_only(&probe, train, seed, f)?;
            *slot = (up - down) / (2.0 * eps);
        }
        errors.push(relative_error(&analytic[i], &numeric));
    }
    Ok(errors)
}

/// One op under test: its inputs and a loss that exercises it.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub train: bool,
    pub loss: LossFn,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts `y` against a fixed random tensor so every output element gets a
/// distinct upstream gradient.
fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = random(&mut rng, g.shape(y));
    let rv = g.input(r);
    let prod = g.mul(y, rv)?;
    Ok(g.sum(prod))
}

/// The full differentiable op suite on small random inputs.
pub fn op_suite(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let mut case = |name, inputs, train, loss: LossFn| {
        cases.push(OpCase {
            name,
            inputs,
            train,
            loss,
        })
    };

    case(
        "matmul",
        vec![random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2])],
        false,
        Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 1)
        }),
    );
    case(
        "matmul_bt",
        vec![random(&mut rng, &[3, 4]), random(&mut rng, &[5, 4])],
        false,
        Box::new(|g, v| {
            let y = g.matmul_bt(v[0], v[1])?;
            project(g, y, 2)
        }),
    );
    case(
        "add",
        vec![random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3])],
        false,
        Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 3)
        }),
    );
    case(
        "mul",
        vec![random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3])],
        false,
        Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 4)
        }),
    );
    case(
        "add_bias",
        vec![random(&mut rng, &[3, 4]), random(&mut rng, &[4])],
        false,
        Box::new(|g, v| {
            let y = g.add_bias(v[0], v[1])?;
            project(g, y, 5)
        }),
    );
    case(
        "scale",
        vec![random(&mut rng, &[2, 3])],
        false,
        Box::new(|g, v| {
            let y = g.scale(v[0], 0.37);
            project(g, y, 6)
        }),
    );
    case(
        "masked_softmax",
        vec![random(&mut rng, &[4, 5])],
        false,
        Box::new(|g, v| {
            let mask = Mask::from_fn(4, 5, |r, c| c <= r || (r + c) % 3 == 0);
            let y = g.masked_softmax(v[0], &mask)?;
            project(g, y, 7)
        }),
    );
    case(
        "layer_norm",
        vec![
            random(&mut rng, &[3, 6]),
            random(&mut rng, &[6]),
            random(&mut rng, &[6]),
        ],
        false,
        Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 8)
        }),
    );
    case(
        "gather",
        vec![random(&mut rng, &[5, 3])],
        false,
        Box::new(|g, v| {
            let y = g.gather(v[0], &[4, 0, 4, 2])?;
            project(g, y, 9)
        }),
    );
    case(
        "dropout",
        vec![random(&mut rng, &[4, 4])],
        true,
        Box::new(|g, v| {
            let y = g.dropout(v[0], 0.3)?;
            project(g, y, 10)
        }),
    );
    case(
        "gelu",
        vec![random(&mut rng, &[3, 4])],
        false,
        Box::new(|g, v| {
            let x = g.scale(v[0], 3.0);
            let y = g.gelu(x);
            project(g, y, 11)
        }),
    );
    case(
        "concat_cols",
        vec![random(&mut rng, &[3, 2]), random(&mut rng, &[3, 3])],
        false,
        Box::new(|g, v| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            project(g, y, 12)
        }),
    );
    case(
        "slice_cols",
        vec![random(&mut rng, &[3, 5])],
        false,
        Box::new(|g, v| {
            let y = g.slice_cols(v[0], 1, 3)?;
            project(g, y, 13)
        }),
    );
    case(
        "concat_rows",
        vec![random(&mut rng, &[2, 3]), random(&mut rng, &[1, 3])],
        false,
        Box::new(|g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            project(g, y, 14)
        }),
    );
    case(
        "slice_rows",
        vec![random(&mut rng, &[4, 3])],
        false,
        Box::new(|g, v| {
            let y = g.slice_rows(v[0], 1, 2)?;
            project(g, y, 15)
        }),
    );
    case(
        "sum",
        vec![random(&mut rng, &[2, 3])],
        false,
        Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        }),
    );
    case(
        "cross_entropy",
        vec![random(&mut rng, &[4, 5])],
        false,
        Box::new(|g, v| {
            g.cross_entropy(
                v[0],
                &[1, 9, 4, 0],
                9,
                &[0.5, 1.0, 0.25, 1.0],
                Reduction::WeightedMean,
            )
        }),
    );
    cases
}
