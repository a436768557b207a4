use mcae_core::capsule::{
    decoder_forward, encoder_forward, mask_select, reinsert_masked, self_route_local, self_route_local_with_coupling,
    CapsuleMap, DecoderParams, MaskTokenSpec, SelfRoutingParams,
};
use mcae_core::masking::{sample_mask, MaskPlan};
use mcae_core::numerics::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(rng: &mut ChaCha8Rng, grid: (usize, usize), k: usize, d: usize, scale: f64) -> CapsuleMap<f64> {
    let l = grid.0 * grid.1;
    let acts: Vec<f64> = (0..l * k).map(|_| rng.gen_range(0.0..=1.0)).collect();
    CapsuleMap::new(Tensor::randn(&[l, k, d], scale, rng), Tensor::new(vec![l, k], acts).unwrap(), grid).unwrap()
}

fn wide_layer(rng: &mut ChaCha8Rng, k: usize, d: usize, m: usize, d_out: usize) -> SelfRoutingParams<f64> {
    SelfRoutingParams {
        w_route: Tensor::randn(&[k, d, m], 1.0, rng),
        b_route: Tensor::randn(&[k, m], 1.0, rng),
        w_pose: Tensor::randn(&[k, m, d, d_out], 1.0, rng),
        b_pose: Tensor::randn(&[k, m, d_out], 1.0, rng),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn coupling_lies_on_the_simplex(seed in any::<u64>(), k in 1usize..5, m in 1usize..6, d in 1usize..4, scale in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let caps = random_map(&mut rng, (2, 2), k, d, scale);
        let (out, coupling) = self_route_local_with_coupling(&caps, &wide_layer(&mut rng, k, d, m, 2)).unwrap();
        for row in coupling.gamma.data().chunks(m) {
            prop_assert!(row.iter().all(|g| (0.0..=1.0).contains(g)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!(out.activations().data().iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn encoder_is_independent_per_location(seed in any::<u64>(), depth in 1usize..4, loc in 0usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let caps = random_map(&mut rng, (3, 3), 3, 2, 1.0);
        let layers: Vec<_> = (0..depth).map(|_| wide_layer(&mut rng, 3, 2, 3, 2)).collect();
        let whole = encoder_forward(&caps, &layers).unwrap();
        let single = encoder_forward(&caps.location(loc).unwrap(), &layers).unwrap();
        prop_assert_eq!(whole.location(loc).unwrap(), single);
    }

    #[test]
    fn single_location_decoder_is_self_routing(seed in any::<u64>(), k in 1usize..4, m in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let caps = random_map(&mut rng, (1, 1), k, 2, 1.0);
        let layer = wide_layer(&mut rng, k, 2, m, 3);
        let dec = DecoderParams {
            w_route: layer.w_route.clone(),
            b_route: layer.b_route.clone().reshape(&[k * m]).unwrap(),
            w_pose: layer.w_pose.clone(),
            b_pose: layer.b_pose.clone().reshape(&[k * m, 3]).unwrap(),
        };
        // the decoder shares one bias across inputs, so replicate it per input type
        let shared = SelfRoutingParams {
            b_route: Tensor::new(vec![k, m], dec.b_route.data()[..m].repeat(k)).unwrap(),
            b_pose: Tensor::new(vec![k, m, 3], dec.b_pose.data()[..m * 3].repeat(k)).unwrap(),
            ..layer
        };
        let dec = DecoderParams {
            b_route: Tensor::new(vec![m], dec.b_route.data()[..m].to_vec()).unwrap(),
            b_pose: Tensor::new(vec![m, 3], dec.b_pose.data()[..m * 3].to_vec()).unwrap(),
            ..dec
        };
        prop_assert_eq!(decoder_forward(&caps, &dec).unwrap(), self_route_local(&caps, &shared).unwrap());
    }

    #[test]
    fn reinsertion_round_trip_is_exact(seed in any::<u64>(), ratio in 0.0f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let caps = random_map(&mut rng, (4, 4), 2, 3, 1.0);
        let plan = sample_mask(16, ratio, seed).unwrap();
        let vis = mask_select(&caps, &plan).unwrap();
        prop_assert_eq!(vis.len(), 16 - plan.num_masked());
        let full = reinsert_masked(&vis, &plan, &MaskTokenSpec::default(), (4, 4), &mut rng).unwrap();
        for l in plan.visible() {
            prop_assert_eq!(full.location(l).unwrap(), caps.location(l).unwrap());
        }
    }

    #[test]
    fn masked_content_cannot_leak(seed in any::<u64>(), fill in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_map(&mut rng, (3, 3), 2, 2, 1.0);
        let plan = sample_mask(9, 0.5, seed ^ 1).unwrap();
        // overwrite the masked locations with unrelated content
        let other = random_map(&mut rng, (3, 3), 2, 2, 5.0);
        let mut poses = a.poses().data().to_vec();
        let mut acts = a.activations().data().to_vec();
        for &l in plan.masked() {
            poses[l * 4..(l + 1) * 4].copy_from_slice(&other.poses().data()[l * 4..(l + 1) * 4]);
            acts[l * 2..(l + 1) * 2].copy_from_slice(&other.activations().data()[l * 2..(l + 1) * 2]);
        }
        let b = CapsuleMap::new(Tensor::new(vec![9, 2, 2], poses).unwrap(), Tensor::new(vec![9, 2], acts).unwrap(), (3, 3)).unwrap();

        let layers = vec![wide_layer(&mut rng, 2, 2, 2, 2)];
        let enc_a = encoder_forward(&mask_select(&a, &plan).unwrap(), &layers).unwrap();
        let enc_b = encoder_forward(&mask_select(&b, &plan).unwrap(), &layers).unwrap();
        prop_assert_eq!(&enc_a, &enc_b);

        let spec = MaskTokenSpec { activation_fill: fill, ..MaskTokenSpec::default() };
        let dec = DecoderParams::init(9, 2, 2, 2, 2, &mut rng);
        let full_a = reinsert_masked(&enc_a, &plan, &spec, (3, 3), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let full_b = reinsert_masked(&enc_b, &plan, &spec, (3, 3), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        prop_assert_eq!(decoder_forward(&full_a, &dec).unwrap(), decoder_forward(&full_b, &dec).unwrap());
    }
}

#[test]
fn zero_fill_slots_never_vote() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let caps = random_map(&mut rng, (2, 2), 2, 2, 1.0);
    let plan = MaskPlan::new(4, vec![1, 2]).unwrap();
    let vis = mask_select(&caps, &plan).unwrap();
    let dec = DecoderParams::init(4, 2, 2, 2, 2, &mut rng);
    let spec = MaskTokenSpec::default();
    let x = reinsert_masked(&vis, &plan, &spec, (2, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let y = reinsert_masked(&vis, &plan, &spec, (2, 2), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_ne!(x, y);
    assert_eq!(decoder_forward(&x, &dec).unwrap().activations(), decoder_forward(&y, &dec).unwrap().activations());
    let (px, py) = (decoder_forward(&x, &dec).unwrap(), decoder_forward(&y, &dec).unwrap());
    for (a, b) in px.poses().data().iter().zip(py.poses().data()) {
        assert!((a - b).abs() < 1e-12);
    }
}
