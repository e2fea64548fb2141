//! Architecture conformance and oracle-equivalence checks.
//!
//! The oracles here are written independently of the library kernels: a
//! quadruple-loop convolution, a per-pixel confusion counter and a scalar
//! Adam reference.

use mssp_core::eval::{evaluate, PmaDenominator};
use mssp_core::layers::{conv2d_forward, Mode};
use mssp_core::model::{
    backward, forward, init_params, learnable_param_count, random_batch, ModelConfig, ModelParams,
    ParamGrads,
};
use mssp_core::optim::{adam_step, AdamState};
use mssp_core::plane::Plane;
use mssp_core::rng::substream;
use mssp_core::tensor::Tensor;
use rand::Rng;

/// Every named activation of a 32x32x3 forward pass has exactly the
/// documented extent.
#[test]
fn layer_dims_match_the_architecture_table() {
    let expected: Vec<(&str, Vec<usize>)> = vec![
        ("Input", vec![32, 32, 3]),
        ("Conv-3.1", vec![32, 32, 32]),
        ("Conv-3.2", vec![32, 32, 64]),
        ("Conv-3.3", vec![32, 32, 128]),
        ("MP-2", vec![16, 16, 128]),
        ("SP-2", vec![8, 8, 128]),
        ("Conv-1.1", vec![8, 8, 32]),
        ("DeConv.1", vec![16, 16, 32]),
        ("SP-4", vec![4, 4, 128]),
        ("Conv-1.2", vec![4, 4, 32]),
        ("DeConv.2", vec![16, 16, 32]),
        ("SP-8", vec![2, 2, 128]),
        ("Conv-1.3", vec![2, 2, 32]),
        ("DeConv.3", vec![16, 16, 32]),
        ("SP-16", vec![1, 1, 128]),
        ("Conv-1.4", vec![1, 1, 32]),
        ("DeConv.4", vec![16, 16, 32]),
        ("Contact", vec![16, 16, 256]),
        ("Conv-3.4", vec![16, 16, 64]),
        ("Conv-1.5", vec![16, 16, 2]),
        ("DeConv.5", vec![32, 32, 2]),
    ];

    let mut params: ModelParams<f32> = init_params(1);
    let (batch, _) = random_batch::<f32>(1, 2);
    let (logits, trace) = forward(&mut params, &ModelConfig::default(), &batch, Mode::Train).unwrap();
    assert_eq!(logits.dims(), &[1, 32, 32, 2]);

    let rows = trace.layer_dims();
    assert_eq!(rows.len(), expected.len());
    for ((got_name, got_dims), (want_name, want_dims)) in rows.iter().zip(&expected) {
        assert_eq!(got_name, want_name);
        assert_eq!(got_dims, want_dims, "dims of {want_name}");
    }
}

/// The roster's learnable scalar count is frozen; any topology drift that
/// changes it fails here.
#[test]
fn learnable_parameter_count_is_frozen() {
    assert_eq!(learnable_param_count(), 605_722);
}

/// Direct quadruple-loop convolution over a zero-padded window, summing in
/// kernel-row, kernel-col, input-channel order.
#[allow(clippy::needless_range_loop)]
fn conv_oracle(
    input: &Tensor<f32>,
    weights: &Tensor<f32>,
    bias: &Tensor<f32>,
    stride: usize,
    padding: usize,
) -> Tensor<f32> {
    let [h, w, cin] = [input.dims()[0], input.dims()[1], input.dims()[2]];
    let [k, _, _, cout] = [
        weights.dims()[0],
        weights.dims()[1],
        weights.dims()[2],
        weights.dims()[3],
    ];
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = Tensor::zeros(&[oh, ow, cout]);
    for ho in 0..oh {
        for wo in 0..ow {
            for o in 0..cout {
                let mut acc = bias.data()[o];
                for dh in 0..k {
                    for dw in 0..k {
                        for ci in 0..cin {
                            let hi = (ho * stride + dh) as isize - padding as isize;
                            let wi = (wo * stride + dw) as isize - padding as isize;
                            if hi < 0 || hi >= h as isize || wi < 0 || wi >= w as isize {
                                continue;
                            }
                            acc += input.at(&[hi as usize, wi as usize, ci])
                                * weights.at(&[dh, dw, ci, o]);
                        }
                    }
                }
                out.set(&[ho, wo, o], acc);
            }
        }
    }
    out
}

/// conv2d_forward agrees bit-for-bit with the quadruple-loop oracle on all
/// small shapes with random weights.
#[test]
fn conv2d_matches_quadruple_loop_oracle_bit_level() {
    let mut rng = substream(7, "conv-oracle");
    let mut cases = 0;
    for h in 1..=8usize {
        for w in [1usize, 3, 5, 8] {
            for cin in 1..=4usize {
                for &k in &[1usize, 3] {
                    if h + 2 * ((k - 1) / 2) < k || w + 2 * ((k - 1) / 2) < k {
                        continue;
                    }
                    let cout = rng.random_range(1..=4);
                    let padding = (k - 1) / 2;
                    let mut input = Tensor::<f32>::zeros(&[h, w, cin]);
                    for v in input.data_mut() {
                        *v = rng.random_range(-1.0f32..1.0);
                    }
                    let mut weights = Tensor::<f32>::zeros(&[k, k, cin, cout]);
                    for v in weights.data_mut() {
                        *v = rng.random_range(-1.0f32..1.0);
                    }
                    let mut bias = Tensor::<f32>::zeros(&[cout]);
                    for v in bias.data_mut() {
                        *v = rng.random_range(-0.5f32..0.5);
                    }
                    let fast = conv2d_forward(&input, &weights, &bias, 1, padding).unwrap();
                    let slow = conv_oracle(&input, &weights, &bias, 1, padding);
                    assert_eq!(fast.dims(), slow.dims());
                    for (i, (a, b)) in fast.data().iter().zip(slow.data()).enumerate() {
                        assert!(
                            a.to_bits() == b.to_bits(),
                            "h={h} w={w} cin={cin} k={k} cout={cout} idx={i}: {a} vs {b}"
                        );
                    }
                    cases += 1;
                }
            }
        }
    }
    assert!(cases > 100, "only {cases} oracle cases exercised");
}

/// evaluate agrees with a brute-force per-pixel confusion count on random
/// binary map pairs.
#[test]
fn evaluate_matches_brute_force_confusion_counts() {
    let mut rng = substream(11, "eval-oracle");
    for case in 0..120 {
        let h = rng.random_range(2..=64);
        let w = rng.random_range(2..=64);
        let p_ref = rng.random_range(0.05..0.95);
        let p_pred = rng.random_range(0.05..0.95);
        let mut reference = Plane::zeros(h, w);
        let mut prediction = Plane::zeros(h, w);
        for i in 0..h * w {
            reference.data_mut()[i] = if rng.random_range(0.0..1.0) < p_ref { 1.0 } else { 0.0 };
            prediction.data_mut()[i] = if rng.random_range(0.0..1.0) < p_pred { 1.0 } else { 0.0 };
        }
        let report = evaluate(&prediction, &reference, None).unwrap();

        let (mut tp, mut tn, mut fa, mut ma) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..h * w {
            match (reference.data()[i] as u8, prediction.data()[i] as u8) {
                (1, 1) => tp += 1,
                (0, 0) => tn += 1,
                (0, 1) => fa += 1,
                (1, 0) => ma += 1,
                _ => unreachable!(),
            }
        }
        assert_eq!((report.tp, report.tn, report.fa, report.ma), (tp, tn, fa, ma), "case {case}");

        let total = (tp + tn + fa + ma) as f64;
        let acc = (tp + tn) as f64 / total;
        assert!((report.accuracy - acc).abs() < 1e-12);
        if tn + fa > 0 {
            assert!((report.pfa - fa as f64 / (tn + fa) as f64).abs() < 1e-12);
        }
        if tp + ma > 0 {
            assert!((report.pma - ma as f64 / (tp + ma) as f64).abs() < 1e-12);
        }
        let p_e = ((tp + fa) as f64 * (tp + ma) as f64 + (tn + ma) as f64 * (tn + fa) as f64)
            / (total * total);
        if (1.0 - p_e).abs() > 1e-12 {
            assert!((report.kappa - (acc - p_e) / (1.0 - p_e)).abs() < 1e-12);
        }
        let _ = PmaDenominator::Changed;
    }
}

/// Scalar f64 Adam reference, written straight from the update equations.
struct ScalarAdam {
    m: f64,
    v: f64,
    t: u32,
}

impl ScalarAdam {
    fn step(&mut self, theta: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let m_hat = self.m / (1.0 - b1.powi(self.t as i32));
        let v_hat = self.v / (1.0 - b2.powi(self.t as i32));
        theta - lr * m_hat / (v_hat.sqrt() + eps)
    }
}

/// The optimizer matches the scalar reference elementwise within 1e-7 over
/// several steps with fresh random gradients.
#[test]
fn adam_matches_scalar_reference() {
    let mut rng = substream(13, "adam-oracle");
    let mut params: ModelParams<f64> = init_params(17);
    let mut state = AdamState::<f64>::new(0.005);

    // scalar references for a probe set of coordinates
    let probe_name = "conv3_2.bias";
    let n = params.get(probe_name).unwrap().len();
    let mut refs: Vec<(f64, ScalarAdam)> = params.get(probe_name).unwrap().data()
        .iter()
        .map(|&p| (p, ScalarAdam { m: 0.0, v: 0.0, t: 0 }))
        .collect();

    for _ in 0..5 {
        let mut grads = ParamGrads::<f64>::zeros();
        let mut g = Tensor::<f64>::zeros(&[n]);
        for v in g.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        grads.accumulate(probe_name, &g).unwrap();
        adam_step(&mut params, &grads, &mut state).unwrap();

        for (i, (theta, scalar)) in refs.iter_mut().enumerate() {
            *theta = scalar.step(*theta, g.data()[i], 0.005, 0.9, 0.999, 1e-8);
            let got = params.get(probe_name).unwrap().data()[i];
            assert!(
                (got - *theta).abs() < 1e-7,
                "coordinate {i}: {got} vs reference {theta}"
            );
        }
    }
}

/// One tiny-lr step on a random batch decreases that batch's loss for at
/// least 19 of 20 seeds.
#[test]
fn adam_descends_on_a_random_batch() {
    let cfg = ModelConfig::default();
    let mut failures = 0;
    for seed in 0..20u64 {
        let mut params: ModelParams<f32> = init_params(seed);
        let (batch, labels) = random_batch::<f32>(4, seed + 100);
        let (logits, trace) = forward(&mut params, &cfg, &batch, Mode::Train).unwrap();
        let (loss_before, d_logits) =
            mssp_core::layers::softmax_xent(&logits, &labels).unwrap();
        let grads = backward(&params, &trace, &d_logits).unwrap();
        let mut state = AdamState::<f32>::new(1e-6);
        adam_step(&mut params, &grads, &mut state).unwrap();
        let (logits, _) = forward(&mut params, &cfg, &batch, Mode::Train).unwrap();
        let (loss_after, _) = mssp_core::layers::softmax_xent(&logits, &labels).unwrap();
        if loss_after >= loss_before {
            failures += 1;
        }
    }
    assert!(failures <= 1, "{failures} of 20 seeds failed to descend");
}
