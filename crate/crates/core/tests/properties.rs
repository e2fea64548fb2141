//! Property tests for the structural invariants: extent formulas, exact
//! inverse pairs, sampling uniqueness, and difference-image symmetries.

use mssp_core::di::{generate_di, log_ratio_map};
use mssp_core::layers::*;
use mssp_core::plane::Plane;
use mssp_core::sampling::{boundary_band, sample_patches, SampleSpec};
use mssp_core::scene::ScenePair;
use mssp_core::tensor::Tensor;
use proptest::prelude::*;

fn arb_tensor(h: usize, w: usize, c: usize) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(-10.0f32..10.0, h * w * c)
        .prop_map(move |data| Tensor::from_vec(&[h, w, c], data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_extents_follow_the_closed_form(
        h in 1usize..12,
        w in 1usize..12,
        cin in 1usize..5,
        cout in 1usize..5,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
    ) {
        let padding = (k - 1) / 2;
        let input = Tensor::<f32>::zeros(&[h, w, cin]);
        let weights = Tensor::<f32>::zeros(&[k, k, cin, cout]);
        let bias = Tensor::<f32>::zeros(&[cout]);
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        let out = conv2d_forward(&input, &weights, &bias, stride, padding);
        if span_h >= k && span_w >= k && (span_h - k) % stride == 0 && (span_w - k) % stride == 0 {
            let out = out.unwrap();
            prop_assert_eq!(
                out.dims(),
                &[(span_h - k) / stride + 1, (span_w - k) / stride + 1, cout]
            );
        } else {
            prop_assert!(out.is_err());
        }
    }

    #[test]
    fn pool_extents_and_shape_round_trips(
        oh in 1usize..6,
        ow in 1usize..6,
        c in 1usize..6,
        k in 1usize..4,
    ) {
        let (h, w) = (oh * k, ow * k);
        let data = (0..h * w * c).map(|i| ((i * 37) % 101) as f32 * 0.1).collect();
        let input = Tensor::<f32>::from_vec(&[h, w, c], data).unwrap();

        let (mp, cache) = maxpool_forward(&input, k, k).unwrap();
        prop_assert_eq!(mp.dims(), &[oh, ow, c]);
        let back = maxpool_backward(&cache, &mp).unwrap();
        prop_assert_eq!(back.dims(), input.dims());

        let ap = avgpool_forward(&input, k).unwrap();
        prop_assert_eq!(ap.dims(), &[oh, ow, c]);
        let back = avgpool_backward(&ap, k).unwrap();
        prop_assert_eq!(back.dims(), input.dims());
    }

    #[test]
    fn deconv_extent_is_input_times_stride(
        h in 1usize..5,
        w in 1usize..5,
        cin in 1usize..4,
        cout in 1usize..4,
        k in 1usize..5,
    ) {
        let input = Tensor::<f32>::zeros(&[h, w, cin]);
        let weights = Tensor::<f32>::zeros(&[k, k, cin, cout]);
        let bias = Tensor::<f32>::zeros(&[cout]);
        let out = deconv2d_forward(&input, &weights, &bias, k).unwrap();
        prop_assert_eq!(out.dims(), &[h * k, w * k, cout]);
    }

    #[test]
    fn concat_then_split_returns_the_originals(
        a in arb_tensor(3, 4, 2),
        b in arb_tensor(3, 4, 5),
        c in arb_tensor(3, 4, 1),
    ) {
        let cat = concat_channels(&[&a, &b, &c]).unwrap();
        prop_assert_eq!(cat.dims(), &[3, 4, 8]);
        let parts = split_channels(&cat, &[2, 5, 1]).unwrap();
        prop_assert_eq!(&parts[0], &a);
        prop_assert_eq!(&parts[1], &b);
        prop_assert_eq!(&parts[2], &c);
    }

    #[test]
    fn di_is_symmetric_and_jointly_scale_invariant(
        seed in 0u64..1000,
        scale in 0.25f32..8.0,
    ) {
        use rand::Rng;
        let mut rng = mssp_core::rng::substream(seed, "di-prop");
        let (h, w) = (12usize, 9usize);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let data = (0..h * w).map(|_| rng.random_range(0.1f32..5.0)).collect();
            Plane::from_vec(h, w, data).unwrap()
        };
        let im1 = mk(&mut rng);
        let im2 = mk(&mut rng);

        let ab = generate_di(&im1, &im2, 3, 1e-6).unwrap();
        let ba = generate_di(&im2, &im1, 3, 1e-6).unwrap();
        prop_assert_eq!(&ab, &ba);

        let scaled = |p: &Plane| {
            Plane::from_vec(h, w, p.data().iter().map(|&v| v * scale).collect()).unwrap()
        };
        let scaled_di = generate_di(&scaled(&im1), &scaled(&im2), 3, 1e-6).unwrap();
        for (x, y) in ab.data().iter().zip(scaled_di.data()) {
            prop_assert!((x - y).abs() < 1e-3, "{} vs {}", x, y);
        }
    }

    #[test]
    fn boundary_band_grows_monotonically(seed in 0u64..500) {
        use rand::Rng;
        let mut rng = mssp_core::rng::substream(seed, "band-prop");
        let (h, w) = (24usize, 24usize);
        let mut reference = Plane::zeros(h, w);
        for _ in 0..rng.random_range(1..4) {
            let r0 = rng.random_range(0..h - 4);
            let c0 = rng.random_range(0..w - 4);
            let rh = rng.random_range(2..=6).min(h - r0);
            let cw = rng.random_range(2..=6).min(w - c0);
            for r in r0..r0 + rh {
                for c in c0..c0 + cw {
                    reference.set(r, c, 1.0);
                }
            }
        }
        for band in 2usize..5 {
            let narrow = boundary_band(&reference, band - 1).unwrap();
            let wide = boundary_band(&reference, band).unwrap();
            for i in 0..narrow.len() {
                prop_assert!(wide.data()[i] >= narrow.data()[i]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn sampling_never_repeats_a_center_and_labels_match(
        seed in 0u64..100,
        fraction in 0.01f64..0.3,
        share in 0.0f64..1.0,
    ) {
        use rand::Rng;
        let mut rng = mssp_core::rng::substream(seed, "sample-prop");
        let (h, w) = (48usize, 40usize);
        let mut im1 = Plane::zeros(h, w);
        let mut im2 = Plane::zeros(h, w);
        let mut reference = Plane::zeros(h, w);
        for i in 0..h * w {
            im1.data_mut()[i] = rng.random_range(0.5f32..2.0);
            im2.data_mut()[i] = rng.random_range(0.5f32..2.0);
        }
        for r in 10..24 {
            for c in 8..30 {
                reference.set(r, c, 1.0);
                im2.set(r, c, im2.get(r, c) * 4.0);
            }
        }
        let mut scene = ScenePair::new("prop", im1, im2, Some(reference)).unwrap();
        scene.prepare(3, 1e-6).unwrap();

        let spec = SampleSpec { fraction, boundary_share: share, boundary_band: 2, seed };
        let result = sample_patches(&scene, &spec).unwrap();
        prop_assert_eq!(result.centers.len(), (fraction * (h * w) as f64).floor() as usize);

        let mut seen = vec![false; h * w];
        for &(r, c) in &result.centers {
            prop_assert!(!seen[r * w + c], "duplicate center ({}, {})", r, c);
            seen[r * w + c] = true;
        }

        // labels are bit-exact reference crops
        let reference = scene.reference.as_ref().unwrap();
        for (i, &(r, c)) in result.centers.iter().enumerate().take(5) {
            for dr in 0..32 {
                for dc in 0..32 {
                    let expected = reference.get_replicated(
                        r as isize - 16 + dr as isize,
                        c as isize - 16 + dc as isize,
                    );
                    prop_assert_eq!(result.batch.labels.at(&[i, dr, dc]), expected);
                }
            }
        }
    }
}
