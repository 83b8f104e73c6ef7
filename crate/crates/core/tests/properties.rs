use std::collections::HashSet;

use peswap_core::layout::{crop_tokens, make_layout, restructure_positions};
use peswap_core::numkit::rng::RandomStream;
use peswap_core::numkit::Tensor;
use peswap_core::raster::Rect;
use peswap_core::rope::{
    apply_rope, build_grid_positions, rope_tables, transplant, PositionGrid, RegionMap, TokenRect,
};
use peswap_core::sampler::{make_schedule, PeMode};
use peswap_core::toyworld::encoder::prototype;
use peswap_core::toyworld::eval::composite_score;
use proptest::prelude::*;

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

fn rotated(v: &Tensor, at: (f64, f64)) -> Tensor {
    let grid = PositionGrid::from_coords(vec![at]).unwrap();
    apply_rope(v, &rope_tables(&grid, v.cols(), 10_000.0).unwrap()).unwrap()
}

proptest! {
    #[test]
    fn logits_depend_on_offset_only(seed in 0u64..10_000, m in -40.0f64..40.0, n in -40.0f64..40.0, shift in -40.0f64..40.0) {
        let mut r = RandomStream::new(seed, 0);
        let q = r.gaussian_tensor(&[1, 16], 1.0);
        let k = r.gaussian_tensor(&[1, 16], 1.0);
        let a = dot(rotated(&q, (0.0, m)).row(0), rotated(&k, (0.0, n)).row(0));
        let b = dot(rotated(&q, (0.0, m + shift)).row(0), rotated(&k, (0.0, n + shift)).row(0));
        prop_assert!((a - b).abs() <= 1e-5 * norm(q.row(0)) * norm(k.row(0)));
    }

    #[test]
    fn rotation_is_an_isometry(seed in 0u64..10_000, y in -50.0f64..50.0, x in -50.0f64..50.0) {
        let v = RandomStream::new(seed, 1).gaussian_tensor(&[1, 32], 1.0);
        let w = rotated(&v, (y, x));
        prop_assert!((norm(v.row(0)) - norm(w.row(0))).abs() <= 1e-5 * norm(v.row(0)).max(1.0));
    }

    #[test]
    fn transplant_is_idempotent(sy in 0usize..4, sx in 0usize..4, ty in 0usize..4, tx in 0usize..4, h in 1usize..5, w in 1usize..5) {
        let grid = build_grid_positions(8, 8, (0.0, 0.0)).unwrap();
        let map = RegionMap::new(TokenRect::new(sy, sx, h, w), TokenRect::new(ty, tx, h, w)).unwrap();
        let once = transplant(&grid, &map).unwrap();
        prop_assert_eq!(transplant(&once, &map).unwrap(), once.clone());
        for (dy, dx) in (0..h).flat_map(|a| (0..w).map(move |b| (a, b))) {
            let src = (sy + dy) * 8 + sx + dx;
            let dst = (ty + dy) * 8 + tx + dx;
            prop_assert_eq!(once.coords()[src], grid.coords()[dst]);
        }
    }

    #[test]
    fn restructuring_is_a_faithful_injection(ey in 0usize..4, ex in 0usize..4, eh in 1usize..5, ew in 1usize..5) {
        prop_assume!(ey + eh <= 8 && ex + ew <= 8);
        let layout = make_layout((32, 32), (16, 16), Rect::new(ey * 4, ex * 4, eh * 4, ew * 4), 4).unwrap();
        let n = layout.token_count();
        let ids = Tensor::from_fn(&[n, 1], |i| i as f32);
        let (compact, map) = crop_tokens(&ids, &layout).unwrap();
        prop_assert_eq!(compact.rows(), layout.compact_len());
        prop_assert_eq!(layout.compact_len(), 128);
        let seen: HashSet<usize> = map.compact_to_grid.iter().copied().collect();
        prop_assert_eq!(seen.len(), map.compact_to_grid.len());
        let positions = layout.positions();
        let compact_pos = restructure_positions(&positions, &map).unwrap();
        for (i, &g) in map.compact_to_grid.iter().enumerate() {
            prop_assert_eq!(compact.row(i)[0] as usize, g);
            prop_assert_eq!(compact_pos.coords()[i], positions.coords()[g]);
        }
        let back = map.scatter(&compact, &Tensor::full(&[n, 1], -1.0)).unwrap();
        for g in 0..n {
            let want = if seen.contains(&g) { g as f32 } else { -1.0 };
            prop_assert_eq!(back.row(g)[0], want);
        }
    }

    #[test]
    fn gate_is_active_exactly_before_tau(n in 1usize..80, frac in 0.0f64..=1.0) {
        let tau = (n as f64 * frac).floor() as usize;
        let s = make_schedule(n, tau, 3).unwrap();
        for step in 0..n {
            let want = if step < tau { PeMode::Transplanted } else { PeMode::Native };
            prop_assert_eq!(s.gate(step), want);
        }
        prop_assert_eq!(s.timesteps.len(), n);
        prop_assert_eq!(s.timesteps[0], 1.0);
        prop_assert!(s.timesteps.windows(2).all(|w| w[0] > w[1]));
        prop_assert_eq!(s.t_next(n - 1), 0.0);
    }

    #[test]
    fn composite_is_the_exact_mean(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
        prop_assert_eq!(composite_score(a, b), (a + b) / 2.0);
    }

    #[test]
    fn prototype_ignores_reference_order(seed in 0u64..10_000, k in 1usize..6) {
        let mut r = RandomStream::new(seed, 2);
        let feats: Vec<Vec<f32>> = (0..k).map(|_| r.gaussian_tensor(&[8], 1.0).into_data()).collect();
        let mut rev = feats.clone();
        rev.reverse();
        let (a, b) = (prototype(&feats), prototype(&rev));
        prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6));
    }

    #[test]
    fn gaussian_streams_are_reproducible(seed in any::<u64>(), stream in any::<u64>()) {
        let a = RandomStream::new(seed, stream).gaussian_tensor(&[64], 1.0);
        let b = RandomStream::new(seed, stream).gaussian_tensor(&[64], 1.0);
        prop_assert!(a.bit_eq(&b));
        prop_assert!(a.is_finite());
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..10_000, scale in 0.1f32..500.0) {
        let x = RandomStream::new(seed, 3).gaussian_tensor(&[4, 7], scale);
        let s = x.softmax_rows();
        for i in 0..4 {
            let row = s.row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }
}
