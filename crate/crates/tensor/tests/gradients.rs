//! Analytic backward passes against central finite differences.

use crowdgaze_tensor::gradcheck::{check_layer, GradCheckReport};
use crowdgaze_tensor::{BatchNorm, Conv2d, Layer, LeakyMaxBlock, Linear, MaxPool2, Mode, Relu, ReluTn, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;
const PROBES: usize = 20;
const ELEMENTS: usize = 5;

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn run(name: &str, mut make: impl FnMut(&mut ChaCha8Rng) -> (Layer<f64>, Tensor<f64>, Mode)) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    let mut total = GradCheckReport::default();
    for _ in 0..PROBES {
        let (mut layer, x, mode) = make(&mut rng);
        let r = check_layer(&mut layer, &x, mode, ELEMENTS, H, &mut rng).unwrap();
        total.max_rel_error = total.max_rel_error.max(r.max_rel_error);
        total.checked += r.checked;
        total.redrawn += r.redrawn;
    }
    assert!(total.checked >= PROBES * ELEMENTS, "{name}: only {} entries checked", total.checked);
    assert!(
        total.max_rel_error < TOL,
        "{name}: max relative error {:.3e} over {} entries",
        total.max_rel_error,
        total.checked
    );
}

#[test]
fn conv_gradients() {
    run("conv", |rng| {
        let k = [1, 3, 5, 7][rng.gen_range(0..4)];
        let stride = rng.gen_range(1..=2);
        let conv = Conv2d::new(2, 3, k, stride, rng).unwrap();
        let mut conv = conv;
        conv.bias.value = random_input(rng, &[3]);
        (Layer::Conv(conv), random_input(rng, &[2, 2, 6, 5]), Mode::Train)
    });
}

#[test]
fn batchnorm_gradients_both_modes() {
    run("batchnorm", |rng| {
        let mut bn = BatchNorm::new(3);
        bn.gamma.value = random_input(rng, &[3]);
        bn.beta.value = random_input(rng, &[3]);
        bn.running_mean = random_input(rng, &[3]);
        bn.running_var = Tensor::from_fn(&[3], |_| rng.gen_range(0.5..2.0));
        let mode = if rng.gen_bool(0.5) { Mode::Train } else { Mode::Eval };
        (Layer::BatchNorm(bn), random_input(rng, &[3, 3, 2, 3]), mode)
    });
}

#[test]
fn relu_tn_gradients() {
    run("relu_tn", |rng| {
        (Layer::ReluTn(ReluTn::new(true)), random_input(rng, &[2, 3, 4, 4]), Mode::Train)
    });
}

#[test]
fn relu_gradients() {
    run("relu", |rng| {
        (Layer::Relu(Relu::new()), random_input(rng, &[2, 2, 3, 3]), Mode::Train)
    });
}

#[test]
fn maxpool_gradients() {
    run("maxpool", |rng| {
        (Layer::MaxPool(MaxPool2::new()), random_input(rng, &[2, 2, 5, 5]), Mode::Train)
    });
}

#[test]
fn fully_connected_gradients() {
    run("fully_connected", |rng| {
        let mut fc = Linear::new(18, 4, rng);
        fc.bias.value = random_input(rng, &[4]);
        (Layer::FullyConnected(fc), random_input(rng, &[3, 2, 3, 3]), Mode::Train)
    });
}

#[test]
fn leaky_max_block_gradients() {
    run("leaky_max_block", |rng| {
        let (inp, out, stride) = if rng.gen_bool(0.5) { (2, 3, 2) } else { (3, 3, 1) };
        let block = LeakyMaxBlock::new(inp, out, stride, rng).unwrap();
        let mode = if rng.gen_bool(0.5) { Mode::Train } else { Mode::Eval };
        (Layer::LeakyMaxBlock(block), random_input(rng, &[2, inp, 6, 6]), mode)
    });
}
