//! Random small ReLU verification instances shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zonoverify_core::network::{Activation, Layer, Network};
use zonoverify_core::setlib::{HPolytope, Interval};
use zonoverify_core::VerificationTask;

pub const S: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub struct Instance {
    pub net: Network,
    pub task: VerificationTask,
}

pub fn worked_net() -> Network {
    Network::new(vec![
        Layer::Linear {
            weights: DMatrix::from_row_slice(2, 2, &[S, -S, S, S]),
            bias: DVector::from_vec(vec![1.0, 0.0]),
        },
        Layer::Activation { func: Activation::Relu, width: 2 },
    ])
    .unwrap()
}

pub fn worked_box() -> Interval {
    Interval::new(DVector::from_element(2, -S), DVector::from_element(2, S)).unwrap()
}

/// Unsafe set `y₀ ≥ t`.
pub fn y0_at_least(t: f64) -> HPolytope {
    HPolytope::new(DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]), DVector::from_element(1, -t)).unwrap()
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..=scale))
}

/// 2–3 linear layers with ReLU between them, 2–3 inputs, hidden widths ≤ 8 and at most 12
/// ReLU neurons in total.
pub fn random_relu_net(rng: &mut ChaCha8Rng) -> Network {
    let n0 = rng.random_range(2..=3);
    let hidden: Vec<usize> = if rng.random_bool(0.5) {
        vec![rng.random_range(2..=8)]
    } else {
        let w1 = rng.random_range(2..=6);
        vec![w1, rng.random_range(2..=(12 - w1).min(6))]
    };
    let nk = rng.random_range(1..=3);
    let mut dims = vec![n0];
    dims.extend(&hidden);
    dims.push(nk);
    let mut layers = Vec::new();
    for k in 0..dims.len() - 1 {
        let (rows, cols) = (dims[k + 1], dims[k]);
        let weights = uniform_matrix(rng, rows, cols, 1.0);
        let bias = DVector::from_fn(rows, |_, _| rng.random_range(-0.5..=0.5));
        layers.push(Layer::Linear { weights, bias });
        if k + 2 < dims.len() {
            layers.push(Layer::Activation { func: Activation::Relu, width: rows });
        }
    }
    Network::new(layers).unwrap()
}

pub fn random_box(rng: &mut ChaCha8Rng, n: usize) -> Interval {
    let c = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
    let r = DVector::from_fn(n, |_, _| rng.random_range(0.05..=1.0));
    Interval::new(&c - &r, &c + &r).unwrap()
}

pub fn sample_in(rng: &mut ChaCha8Rng, bx: &Interval) -> DVector<f64> {
    DVector::from_fn(bx.dim(), |i, _| rng.random_range(bx.lower[i]..=bx.upper[i]))
}

/// Unsafe halfspace `a·y ≤ b` with `b` placed relative to sampled values of `a·f(x)`:
/// `offset` is in units of their spread, measured from the sampled minimum. Negative
/// offsets sit below every sample.
pub fn halfspace_near_image(rng: &mut ChaCha8Rng, net: &Network, bx: &Interval, offset: f64) -> HPolytope {
    let nk = net.output_dim();
    let a = DVector::from_fn(nk, |_, _| rng.random_range(-1.0..=1.0));
    let vals: Vec<f64> = (0..256)
        .map(|_| a.dot(&net.forward(&sample_in(rng, bx)).unwrap()))
        .collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let b = lo + offset * (hi - lo).max(1e-6);
    HPolytope::new(DMatrix::from_row_slice(1, nk, a.as_slice()), DVector::from_element(1, b)).unwrap()
}

/// Unsafe halfspace `a·y ≤ b` holding roughly fraction `share` of sampled outputs.
pub fn halfspace_at_quantile(rng: &mut ChaCha8Rng, net: &Network, bx: &Interval, share: f64) -> HPolytope {
    let nk = net.output_dim();
    let a = DVector::from_fn(nk, |_, _| rng.random_range(-1.0..=1.0));
    let mut vals: Vec<f64> = (0..1024)
        .map(|_| a.dot(&net.forward(&sample_in(rng, bx)).unwrap()))
        .collect();
    vals.sort_by(f64::total_cmp);
    let b = vals[((vals.len() as f64 * share) as usize).min(vals.len() - 1)];
    HPolytope::new(DMatrix::from_row_slice(1, nk, a.as_slice()), DVector::from_element(1, b)).unwrap()
}

/// Soundness-fuzz instance `seed`: the threshold lands anywhere from clearly unreachable to
/// well inside the image.
pub fn fuzz_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = random_relu_net(&mut rng);
    let bx = random_box(&mut rng, net.input_dim());
    let offset = rng.random_range(-0.3..=0.3);
    let unsafe_set = halfspace_near_image(&mut rng, &net, &bx, offset);
    Instance { net, task: VerificationTask::new(bx, vec![unsafe_set]).unwrap() }
}

/// Instance whose unsafe set holds a sizeable share of the input box.
pub fn reachable_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
    let net = random_relu_net(&mut rng);
    let bx = random_box(&mut rng, net.input_dim());
    let share = rng.random_range(0.1..=0.5);
    let unsafe_set = halfspace_at_quantile(&mut rng, &net, &bx, share);
    Instance { net, task: VerificationTask::new(bx, vec![unsafe_set]).unwrap() }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
