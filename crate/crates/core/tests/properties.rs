use std::sync::OnceLock;

use hesplit_core::attack::{reconstruct_activation, LeakedGradients};
use hesplit_core::ckks::{keygen, CkksContext, CkksParams, KeySet};
use hesplit_core::data::{synth_ecg, BatchIterator, Profile};
use hesplit_core::nn::tensor::matmul;
use hesplit_core::nn::Tensor;
use hesplit_core::split::Packing;
use hesplit_core::wire::{decode_frame, decode_tensor, encode_frame, encode_tensor, MsgType, WireMessage};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn toy() -> &'static (CkksContext, KeySet) {
    static CTX: OnceLock<(CkksContext, KeySet)> = OnceLock::new();
    CTX.get_or_init(|| {
        let ctx = CkksContext::new(CkksParams::toy()).unwrap();
        let keys = keygen(&ctx, 3);
        (ctx, keys)
    })
}

fn slots_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 128)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ckks_add_and_rotate_are_homomorphic(a in slots_vec(), b in slots_vec(), step in 0usize..7, seed: u64) {
        let (ctx, keys) = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let ca = ctx.encrypt_symmetric(&keys.secret, &ctx.encode(&a, 0, ctx.scale()).unwrap(), &mut rng).unwrap();
        let cb = ctx.encrypt(&keys.public, &ctx.encode(&b, 0, ctx.scale()).unwrap(), &mut rng).unwrap();
        let sum = ctx.decrypt(&keys.secret, &ctx.add(&ca, &cb).unwrap()).unwrap();
        let want: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        prop_assert!(max_abs(&sum, &want) < 1e-2);
        let r = 1usize << step;
        let rot = ctx.decrypt(&keys.secret, &ctx.rotate(&ca, r, &keys.rotation).unwrap()).unwrap();
        let want: Vec<f64> = (0..128).map(|j| a[(j + r) % 128]).collect();
        prop_assert!(max_abs(&rot, &want) < 1e-2);
    }

    #[test]
    fn ckks_mul_plain_rescale_stays_at_level_one(a in slots_vec(), b in prop::collection::vec(-1.0f64..1.0, 128), seed: u64) {
        let (ctx, keys) = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let ca = ctx.encrypt_symmetric(&keys.secret, &ctx.encode(&a, 0, ctx.scale()).unwrap(), &mut rng).unwrap();
        let pb = ctx.encode(&b, 0, ctx.scale()).unwrap();
        let prod = ctx.mul_plain_rescale(&ca, &pb).unwrap();
        prop_assert_eq!(prod.level(), 1);
        let got = ctx.decrypt(&keys.secret, &prod).unwrap();
        let want: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        prop_assert!(max_abs(&got, &want) < 1e-2);
    }

    #[test]
    fn frames_roundtrip(payload in prop::collection::vec(any::<u8>(), 0..512), ty in 1u8..=14) {
        let msg = WireMessage::new(MsgType::from_u8(ty).unwrap(), payload);
        let bytes = encode_frame(&msg, 1 << 20).unwrap();
        prop_assert_eq!(decode_frame(&bytes, 1 << 20).unwrap(), msg);
    }

    #[test]
    fn truncated_frames_never_decode(payload in prop::collection::vec(any::<u8>(), 1..64), cut in 1usize..64) {
        let bytes = encode_frame(&WireMessage::new(MsgType::GradAl, payload), 1 << 20).unwrap();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(decode_frame(&bytes[..bytes.len() - cut], 1 << 20).is_err());
    }

    #[test]
    fn tensors_roundtrip(rows in 1usize..6, cols in 1usize..9, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rand::Rng::random_range(&mut rng, -1e3..1e3)).collect();
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        prop_assert_eq!(decode_tensor(&encode_tensor(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn weight_packing_roundtrips(batch in 1usize..17, classes in 1usize..6, features in 1usize..40) {
        prop_assume!(batch.next_power_of_two() * classes <= 256);
        let p = Packing::new(batch, classes, features, 256).unwrap();
        let w = Tensor::new(vec![classes, features], (0..classes * features).map(|i| i as f64 * 0.5).collect()).unwrap();
        let groups: Vec<Vec<f64>> = (0..p.groups()).map(|g| p.weight_slots(&w, g)).collect();
        prop_assert_eq!(p.read_weights(&groups).unwrap(), w);
        // groups never overlap and cover every feature once
        let covered: usize = (0..p.groups()).map(|g| p.group_features(g).len()).sum();
        prop_assert_eq!(covered, features);
    }

    #[test]
    fn batches_visit_each_sample_at_most_once(n in 1usize..9, epoch in 0usize..4, seed: u64) {
        let ds = synth_ecg(37, Profile::Mitbih, 1);
        let mut seen = vec![0u8; ds.len()];
        let it = BatchIterator::new(&ds, n, seed, epoch, true).unwrap();
        let count = it.count_batches();
        let mut batches = 0;
        for b in it {
            prop_assert_eq!(b.indices.len(), n);
            for i in b.indices { seen[i] += 1; }
            batches += 1;
        }
        prop_assert_eq!(batches, count);
        prop_assert_eq!(batches, 37 / n);
        prop_assert!(seen.iter().all(|&c| c <= 1));
    }

    #[test]
    fn inversion_recovers_activations(seed: u64, f in 1usize..20) {
        // diagonally dominant, hence well conditioned
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut r = || rand::Rng::random_range(&mut rng, -1.0..1.0);
        let a = Tensor::new(vec![5, 5], (0..25).map(|i| if i % 6 == 0 { 4.0 + r() } else { r() }).collect()).unwrap();
        let x = Tensor::new(vec![5, f], (0..5 * f).map(|_| r()).collect()).unwrap();
        let grad_w = matmul(&a, &x).unwrap();
        let got = reconstruct_activation(&LeakedGradients { grad_al: a.transpose2().unwrap(), grad_w }).unwrap();
        prop_assert!(got.max_abs_diff(&x).unwrap() < 1e-9);
    }
}
