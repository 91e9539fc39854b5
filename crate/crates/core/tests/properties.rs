mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{rand_masks, rand_tensor, shifted_video};
use storyboard_core::attention::{attention_weights, chunk_plan, KeyBlock};
use storyboard_core::metrics::{dynamic_degree_with, set_consistency, yt_slice, BlockMatching, MaskedMeanPool};
use storyboard_core::query_control::{FeatureCache, KeyframeIndex};
use storyboard_core::refinement::{build_correspondence, inject_refinement, AnchorFeatures};
use storyboard_core::subject_mask::{estimate_x0_with_alpha, otsu_threshold, SubjectMaskSet};
use storyboard_core::tensor::{cosine_sim, matmul, softmax_rows};
use storyboard_core::{Parallelism, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(a: &Tensor, b: &Tensor, tol: f32) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_identity_and_associativity(seed: u64, m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6) {
        let mut r = rng(seed);
        let a = rand_tensor(&[m, k], &mut r);
        let b = rand_tensor(&[k, n], &mut r);
        let c = rand_tensor(&[n, p], &mut r);
        let eye = Tensor::from_fn(&[k, k], |i| if i / k == i % k { 1.0 } else { 0.0 });
        prop_assert_eq!(matmul(&a, &eye).unwrap(), a.clone());
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(close(&left, &right, 1e-5));
    }

    #[test]
    fn softmax_rows_are_shift_invariant(seed: u64, rows in 1usize..5, cols in 1usize..9, shift in -20.0f32..20.0) {
        let x = rand_tensor(&[rows, cols], &mut rng(seed));
        let shifted = Tensor::from_fn(x.shape(), |i| x.data()[i] + shift);
        let a = softmax_rows(&x).unwrap();
        prop_assert!(close(&a, &softmax_rows(&shifted).unwrap(), 1e-5));
        for r in 0..rows {
            let s: f32 = a.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn cosine_is_scale_invariant_and_symmetric(seed: u64, d in 1usize..12, scale in 0.01f32..100.0) {
        let mut r = rng(seed);
        let a = rand_tensor(&[d], &mut r);
        let b = rand_tensor(&[d], &mut r);
        let scaled: Vec<f32> = a.data().iter().map(|v| v * scale).collect();
        let base = cosine_sim(a.data(), b.data()).unwrap();
        prop_assert!((base - cosine_sim(&scaled, b.data()).unwrap()).abs() < 1e-6);
        prop_assert_eq!(base, cosine_sim(b.data(), a.data()).unwrap());
        prop_assert!(cosine_sim(&vec![0.0; d], b.data()).is_err());
    }

    #[test]
    fn masked_keys_get_zero_weight_and_rows_sum_to_one(seed: u64, p in 1usize..10, d in 1usize..6, blocks in 1usize..4) {
        let mut r = rng(seed);
        let q = rand_tensor(&[p, d], &mut r);
        let keys: Vec<Tensor> = (0..blocks).map(|_| rand_tensor(&[p, d], &mut r)).collect();
        let masks = rand_masks(blocks, 1, p, &mut r);
        let kb: Vec<KeyBlock<'_>> = keys
            .iter()
            .enumerate()
            .map(|(b, k)| KeyBlock {
                keys: k.data(),
                values: k.data(),
                allowed: if b == 0 { None } else { Some(masks.mask(b, 0)) },
            })
            .collect();
        let rows = attention_weights(q.data(), d, &kb).unwrap();
        prop_assert_eq!(rows.len(), p);
        for row in rows {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for b in 1..blocks {
                for j in 0..p {
                    if !masks.mask(b, 0)[j] {
                        prop_assert_eq!(row[b * p + j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn otsu_mask_survives_dyadic_affine_maps(levels in prop::collection::vec(0u16..256, 2..300), a_exp in -2i32..4, b in -64i32..64) {
        prop_assume!(levels.iter().any(|&v| v != levels[0]));
        let scores: Vec<f32> = levels.iter().map(|&v| v as f32 / 256.0).collect();
        let (a, b) = (2f32.powi(a_exp), b as f32 / 16.0);
        let mapped: Vec<f32> = scores.iter().map(|v| a * v + b).collect();
        let t0 = otsu_threshold(&scores).unwrap().threshold;
        let t1 = otsu_threshold(&mapped).unwrap().threshold;
        for (x, y) in scores.iter().zip(&mapped) {
            prop_assert_eq!(*x > t0, *y > t1);
        }
    }

    #[test]
    fn x0_estimate_is_linear(seed: u64, alpha_bar in 0.01f64..1.0) {
        let mut r = rng(seed);
        let (x1, x2) = (rand_tensor(&[3, 4], &mut r), rand_tensor(&[3, 4], &mut r));
        let (e1, e2) = (rand_tensor(&[3, 4], &mut r), rand_tensor(&[3, 4], &mut r));
        let add = |a: &Tensor, b: &Tensor| Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]);
        let whole = estimate_x0_with_alpha(&add(&x1, &x2), &add(&e1, &e2), alpha_bar).unwrap();
        let parts = add(
            &estimate_x0_with_alpha(&x1, &e1, alpha_bar).unwrap(),
            &estimate_x0_with_alpha(&x2, &e2, alpha_bar).unwrap(),
        );
        prop_assert!(close(&whole, &parts, 1e-4));
    }

    #[test]
    fn refinement_leaves_background_untouched(seed: u64, f in 1usize..4, p in 1usize..10, d in 1usize..6, blend in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let a0 = rand_tensor(&[f, p, d], &mut r);
        let a1 = rand_tensor(&[f, p, d], &mut r);
        let target = rand_tensor(&[p, d], &mut r);
        let mask = rand_masks(1, 1, p, &mut r);
        let anchors = [AnchorFeatures { shot: 0, feats: &a0 }, AnchorFeatures { shot: 1, feats: &a1 }];
        let map = build_correspondence((2, 0), &target, &anchors).unwrap();
        let out = inject_refinement(&target, &anchors, &map, mask.mask(0, 0), blend).unwrap();
        for i in 0..p {
            if !mask.mask(0, 0)[i] {
                prop_assert_eq!(&out.data()[i * d..(i + 1) * d], &target.data()[i * d..(i + 1) * d]);
            }
        }
        let zero = inject_refinement(&target, &anchors, &map, mask.mask(0, 0), 0.0).unwrap();
        prop_assert_eq!(zero, target);
    }

    #[test]
    fn set_consistency_ignores_shot_order(seed: u64, s in 2usize..5, f in 1usize..4, p in 1usize..8) {
        let mut r = rng(seed);
        let frames = rand_tensor(&[s, f, p, 3], &mut r);
        let masks = rand_masks(s, f, p, &mut r);
        let order: Vec<usize> = (0..s).rev().collect();
        let permuted = Tensor::stack(&order.iter().map(|&i| frames.sub(&[i])).collect::<Vec<_>>()).unwrap();
        let mut pm = Vec::new();
        for &i in &order {
            for fr in 0..f {
                pm.extend_from_slice(masks.mask(i, fr));
            }
        }
        let pmasks = SubjectMaskSet::from_masks(s, f, p, pm).unwrap();
        let a = set_consistency(&frames, &masks, &MaskedMeanPool, Parallelism::Sequential).unwrap();
        let b = set_consistency(&permuted, &pmasks, &MaskedMeanPool, Parallelism::Sequential).unwrap();
        prop_assert_eq!(a.pair_count, b.pair_count);
        prop_assert!((a.set_consistency.mean - b.set_consistency.mean).abs() < 1e-12);
    }

    #[test]
    fn yt_slice_is_pure_indexing(seed: u64, f in 1usize..6, h in 1usize..8, w in 1usize..8, col in 0usize..8) {
        let video = rand_tensor(&[f, h, w], &mut rng(seed));
        let res = yt_slice(&video, Some(col));
        if col >= w {
            prop_assert!(res.is_err());
        } else {
            let (slice, c) = res.unwrap();
            prop_assert_eq!(c, col);
            prop_assert_eq!(slice.shape(), &[h, f][..]);
            for y in 0..h {
                for fr in 0..f {
                    prop_assert_eq!(slice.data()[y * f + fr], video.data()[fr * h * w + y * w + col]);
                }
            }
        }
    }

    #[test]
    fn chunk_plan_partitions_in_order(items in 0usize..50, sub in 1usize..12) {
        let plan = chunk_plan(items, sub).unwrap();
        let flat: Vec<usize> = plan.iter().flat_map(|r| r.clone()).collect();
        prop_assert_eq!(flat, (0..items).collect::<Vec<_>>());
        prop_assert!(plan.iter().all(|r| r.len() <= sub && !r.is_empty()));
    }

    #[test]
    fn keyframe_brackets_enclose_the_frame(frames in 2usize..30, spacing in 1usize..8) {
        let kf = KeyframeIndex::new(frames, spacing).unwrap();
        prop_assert_eq!(kf.keyframes().first(), Some(&0));
        prop_assert_eq!(kf.keyframes().last(), Some(&(frames - 1)));
        for f in 0..frames {
            let (a, b) = kf.bracket(f).unwrap();
            prop_assert!(a <= f && f <= b);
            prop_assert!(kf.keyframes().contains(&a) && kf.keyframes().contains(&b));
        }
    }

    #[test]
    fn tensor_bytes_round_trip(seed: u64, dims in prop::collection::vec(1usize..5, 1..4)) {
        let t = rand_tensor(&dims, &mut rng(seed));
        let back = Tensor::read_from(&t.to_bytes()[..]).unwrap();
        prop_assert_eq!(back, t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dynamic_degree_grows_with_shift(seed: u64, a in 0usize..5, b in 0usize..5) {
        let (lo, hi) = (a.min(b), a.max(b));
        let mut r1 = rng(seed);
        let mut r2 = rng(seed);
        let bm = BlockMatching::default();
        let s_lo = dynamic_degree_with(&shifted_video(4, 32, 32, lo, &mut r1), 1.0, bm).unwrap().score;
        let s_hi = dynamic_degree_with(&shifted_video(4, 32, 32, hi, &mut r2), 1.0, bm).unwrap().score;
        prop_assert!(s_lo <= s_hi);
    }
}

#[test]
fn single_frame_has_no_bracket() {
    let kf = KeyframeIndex::new(1, 4).unwrap();
    assert_eq!(kf.keyframes(), &[0]);
    assert!(kf.bracket(0).is_err());
}

#[test]
fn cache_entries_are_write_once() {
    let mut cache = FeatureCache::new("fp");
    cache.insert(900, 1, Tensor::zeros(&[1, 1, 2, 2])).unwrap();
    assert!(cache.insert(900, 1, Tensor::zeros(&[1, 1, 2, 2])).is_err());
    assert_eq!(cache.get(900, 1).unwrap(), &Tensor::zeros(&[1, 1, 2, 2]));
    assert!(cache.get(900, 0).is_err());
    cache.insert(900, 0, Tensor::zeros(&[1])).unwrap();
    assert_eq!(cache.len(), 2);
}
