use crowdgaze_tensor::layers::leaky_max;
use crowdgaze_tensor::{
    centralize_weights, BatchNorm, Conv2d, Layer, LeakyMaxBlock, Linear, MaxPool2, Mode, ReluTn, Sequential, Tensor, WeightFile,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model(seed: u64) -> Sequential<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bn = BatchNorm::new(4);
    bn.running_mean = Tensor::from_fn(&[4], |i| i as f32 * 0.1);
    Sequential::new(vec![
        Layer::Conv(Conv2d::new(1, 4, 3, 2, &mut rng).unwrap()),
        Layer::BatchNorm(bn),
        Layer::ReluTn(ReluTn::new(true)),
        Layer::LeakyMaxBlock(LeakyMaxBlock::new(4, 4, 2, &mut rng).unwrap()),
        Layer::MaxPool(MaxPool2::new()),
        Layer::FullyConnected(Linear::new(16, 3, &mut rng)),
    ])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn relu_tn_output_is_standardised(values in prop::collection::vec(-5.0f64..5.0, 2..64)) {
        let n = values.len();
        let x = Tensor::new(vec![1, n], values.clone()).unwrap();
        let y = Layer::ReluTn(ReluTn::new(true)).infer(&x).unwrap();
        let positive: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
        let spread = positive.iter().cloned().fold(f64::MIN, f64::max) - positive.iter().cloned().fold(f64::MAX, f64::min);
        // Only meaningful when the post-ReLU activation is not constant.
        prop_assume!(spread > 1e-2);
        let mean = y.data().iter().sum::<f64>() / n as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-5);
        prop_assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn leaky_max_with_zero_lambda_is_elementwise_max(f in -10.0f64..10.0, s in -10.0f64..10.0) {
        prop_assert_eq!(leaky_max(f, s, 0.0), f.max(s));
    }

    #[test]
    fn centralized_filters_have_zero_mean(values in prop::collection::vec(-1.0f32..1.0, 8 * 27)) {
        let t = Tensor::new(vec![8, 3, 3, 3], values).unwrap();
        let c = centralize_weights(&t);
        for f in c.data().chunks(27) {
            let m: f32 = f.iter().sum::<f32>() / 27.0;
            prop_assert!(m.abs() < 1e-7);
        }
    }

    #[test]
    fn weight_file_round_trip_is_bit_exact(seed in any::<u64>()) {
        let model = small_model(seed);
        let bytes = model.to_weight_file().encode();
        let mut fresh = small_model(seed.wrapping_add(1));
        fresh.load_weight_file(&WeightFile::decode(&bytes).unwrap()).unwrap();
        let a = model.to_weight_file();
        let b = fresh.to_weight_file();
        prop_assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            let bits_a: Vec<u32> = ra.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = rb.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
    }
}

#[test]
fn leaky_max_block_zero_lambda_identity_skip_is_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut block = LeakyMaxBlock::<f64>::new(2, 2, 1, &mut rng).unwrap();
    assert!(block.skip.is_none());
    block.lambda = 0.0;
    let x = Tensor::from_fn(&[1, 2, 4, 4], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0);
    let mut f = x.clone();
    for l in &block.path {
        f = l.infer(&f).unwrap();
    }
    let y = Layer::LeakyMaxBlock(block).infer(&x).unwrap();
    for ((yv, fv), xv) in y.data().iter().zip(f.data()).zip(x.data()) {
        assert_eq!(*yv, fv.max(*xv));
    }
}

#[test]
fn forward_is_deterministic() {
    let model = small_model(9);
    let x = Tensor::from_fn(&[2, 1, 16, 16], |i| (i as f32 * 0.37).sin());
    let a = model.infer(&x).unwrap();
    let b = model.infer(&x).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn inference_is_per_sample_independent() {
    let model = small_model(5);
    let x = Tensor::from_fn(&[3, 1, 16, 16], |i| (i as f32 * 0.11).cos());
    let full = model.infer(&x).unwrap();
    let single = model
        .infer(&Tensor::new(vec![1, 1, 16, 16], x.sample(1).to_vec()).unwrap())
        .unwrap();
    assert_eq!(full.sample(1), single.data());
}

#[test]
fn non_finite_input_is_rejected() {
    let model = small_model(1);
    let mut x = Tensor::<f32>::zeros(&[1, 1, 16, 16]);
    x.data_mut()[3] = f32::INFINITY;
    assert!(model.infer(&x).is_err());
    let mut m = model.clone();
    assert!(m.forward(&x, Mode::Train).is_err());
}

#[test]
fn backward_without_forward_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut conv = Layer::Conv(Conv2d::<f32>::new(1, 1, 3, 1, &mut rng).unwrap());
    assert!(conv.backward(&Tensor::zeros(&[1, 1, 4, 4])).is_err());
}

#[test]
fn corrupted_model_file_is_refused() {
    let model = small_model(2);
    let mut bytes = model.to_weight_file().encode();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(WeightFile::decode(&bytes).is_err());
}
