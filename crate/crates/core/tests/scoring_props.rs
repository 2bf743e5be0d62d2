//! Score fusion, normalized layer and region pooling against direct evaluation.

use cropvit::scoring::{
    apply_objectness, combine_scores, normalized_layer, region_embed, region_embed_with, vlm_scores, CategoryScores,
    RegionBox, ScoreConfig,
};
use cropvit::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BASE: usize = 0;
const NOVEL: usize = 1;
const BACKGROUND: usize = 2;

fn cfg(alpha: f64, beta: f64) -> ScoreConfig {
    ScoreConfig { alpha, beta, background_id: Some(BACKGROUND), ..ScoreConfig::default().with_split([BASE], [NOVEL]) }
}

#[test]
fn combine_examples() {
    let c = ScoreConfig::default().with_split([BASE], [NOVEL]);
    let s = combine_scores(0.8, 0.5, &c, BASE).unwrap();
    assert!((s - 0.5894).abs() < 1e-4);
    assert!((s - 0.8f64.powf(0.35) * 0.5f64.powf(0.65)).abs() < 1e-6);

    let one = cfg(1.0, 0.3);
    for (z, p) in [(0.9, 0.2), (0.0, 0.7), (0.3, 0.0), (1.0, 1.0)] {
        assert_eq!(combine_scores(z, p, &one, BASE).unwrap(), p);
    }
    for &p in &[0.0, 0.1, 0.37, 0.5, 0.999, 1.0] {
        for (a, b) in [(0.65, 0.3), (0.0, 1.0), (0.2, 0.8)] {
            let c = cfg(a, b);
            assert_eq!(combine_scores(p, p, &c, BASE).unwrap(), p);
            assert_eq!(combine_scores(p, p, &c, NOVEL).unwrap(), p);
        }
    }
    assert_eq!(combine_scores(0.9, 0.25, &cfg(0.65, 0.3), BACKGROUND).unwrap(), 0.25);
    assert!(matches!(combine_scores(0.5, 0.5, &cfg(0.65, 0.3), 7), Err(Error::Input(_))));
    assert!(combine_scores(1.5, 0.5, &cfg(0.65, 0.3), BASE).is_err());
}

#[test]
fn transfer_mode_base_branch_is_the_vlm_score() {
    let c = ScoreConfig::transfer().with_split([BASE], [NOVEL]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let (z, p) = (rng.gen::<f64>(), rng.gen::<f64>());
        assert_eq!(combine_scores(z, p, &c, BASE).unwrap(), z);
    }
    assert_eq!(combine_scores(0.4, 0.0, &c, BASE).unwrap(), 0.4);
}

#[test]
fn combine_is_monotone_on_a_grid() {
    let c = cfg(0.65, 0.3);
    let axis: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
    for id in [BASE, NOVEL] {
        for i in 0..50 {
            for j in 0..50 {
                let s = combine_scores(axis[i], axis[j], &c, id).unwrap();
                assert!((0.0..=1.0).contains(&s));
                if i + 1 < 50 {
                    assert!(combine_scores(axis[i + 1], axis[j], &c, id).unwrap() >= s);
                }
                if j + 1 < 50 {
                    assert!(combine_scores(axis[i], axis[j + 1], &c, id).unwrap() >= s);
                }
            }
        }
    }
}

#[test]
fn objectness_examples() {
    assert!((apply_objectness(0.6, 0.5, 3.0) - 0.075).abs() < 1e-15);
    assert_eq!(apply_objectness(0.6, 1.0, 3.0), 0.6);
    assert_eq!(apply_objectness(0.6, 0.2, 0.0), 0.6);
    assert_eq!(apply_objectness(0.6, 0.0, 0.0), 0.6);
}

#[test]
fn neutral_objectness_keeps_the_ranking() {
    let c = cfg(0.65, 0.3);
    let ids = [BASE, NOVEL, BACKGROUND];
    let (z, p) = ([0.7, 0.2, 0.1], [0.3, 0.6, 0.1]);
    let flat = CategoryScores::compute(&ids, &z, &p, 1.0, &ScoreConfig { delta: 0.0, ..c.clone() }).unwrap();
    let sharp = CategoryScores::compute(&ids, &z, &p, 1.0, &ScoreConfig { delta: 50.0, ..c }).unwrap();
    assert_eq!(flat.final_scores, sharp.final_scores);
    assert_eq!(flat.top_category(Some(BACKGROUND)), sharp.top_category(Some(BACKGROUND)));
}

#[test]
fn normalized_layer_examples() {
    let w = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
    assert_eq!(normalized_layer(&[3.0, 4.0], &w, &[0.0], 20.0).unwrap(), vec![20.0]);
    let w = Tensor::matrix(1, 2, vec![-4.0, 3.0]).unwrap();
    assert!((normalized_layer(&[3.0, 4.0], &w, &[1.0], 20.0).unwrap()[0] - 1.0).abs() < 1e-14);
    let w = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
    let got = normalized_layer(&[1.0, 0.0], &w, &[1.0], 20.0).unwrap()[0];
    assert!((got - (20.0 / 2f64.sqrt() + 1.0)).abs() < 1e-12);
    assert!((got - 15.1421).abs() < 1e-4);
}

#[test]
fn vlm_examples() {
    let text = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let z = vlm_scores(&[1.0, 0.0, 0.0], &text, 0.01).unwrap();
    assert!(z[0] > 1.0 - 1e-15 && z[0] <= 1.0);
    assert!(z[1] < 1e-40 && z[2] < 1e-40);

    let same = Tensor::from_rows(&vec![vec![0.6, 0.8]; 5]).unwrap();
    for v in vlm_scores(&[1.0, 0.0], &same, 0.07).unwrap() {
        assert!((v - 0.2).abs() < 1e-15);
    }

    // rows with cosines 0.9, 0.1, -0.5 against e1
    let rows: Vec<Vec<f64>> = [0.9f64, 0.1, -0.5].iter().map(|&c| vec![c, (1.0 - c * c).sqrt()]).collect();
    let z = vlm_scores(&[1.0, 0.0], &Tensor::from_rows(&rows).unwrap(), 0.2).unwrap();
    let e: Vec<f64> = [4.5f64, 0.5, -2.5].iter().map(|v| v.exp()).collect();
    let total: f64 = e.iter().sum();
    for (got, want) in z.iter().zip(e.iter().map(|v| v / total)) {
        assert!((got - want).abs() < 1e-12);
    }
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> Tensor {
    Tensor::new(vec![h, w, d], (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Bilinear read of cell-centred samples at normalized `(x, y)`, clamped at the border.
fn sample(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (h, w, d) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let fy = (y * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let fx = (x * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let at = |r: usize, c: usize, k: usize| map.data()[(r * w + c) * d + k];
    (0..d)
        .map(|k| {
            (1.0 - ty) * ((1.0 - tx) * at(y0, x0, k) + tx * at(y0, x1, k))
                + ty * ((1.0 - tx) * at(y1, x0, k) + tx * at(y1, x1, k))
        })
        .collect()
}

fn dense_embed(map: &Tensor, b: &RegionBox, s: usize) -> Vec<f64> {
    let d = map.shape()[2];
    let mut acc = vec![0.0; d];
    for i in 0..s {
        for j in 0..s {
            let y = b.y1 + (i as f64 + 0.5) / s as f64 * (b.y2 - b.y1);
            let x = b.x1 + (j as f64 + 0.5) / s as f64 * (b.x2 - b.x1);
            for (a, v) in acc.iter_mut().zip(sample(map, x, y)) {
                *a += v;
            }
        }
    }
    let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    acc.into_iter().map(|v| v / n).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|v| v * v).sum::<f64>().sqrt() * b.iter().map(|v| v * v).sum::<f64>().sqrt())
}

#[test]
fn region_embed_tracks_dense_sampling() {
    let b = RegionBox::new(0.25, 0.25, 0.75, 0.75);
    let mut cosines = Vec::new();
    for seed in 0..20 {
        let map = random_map(&mut ChaCha8Rng::seed_from_u64(seed), 6, 6, 4);
        let got = region_embed(&map, &b).unwrap();
        // the reference sampler reproduces the pooled value at the default lattice
        let same = dense_embed(&map, &b, 2);
        assert!(got.iter().zip(&same).all(|(a, b)| (a - b).abs() < 1e-12));
        cosines.push(cos(&got, &dense_embed(&map, &b, 64)));
    }
    // A 2x2 lattice over white noise lands below 0.95 on roughly one map in
    // eight, so the bound is held on the average.
    let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
    assert!(mean >= 0.95, "mean cosine {mean}: {cosines:?}");
}

#[test]
fn region_embed_examples() {
    let map = Tensor::new(vec![4, 4, 3], [1.0, -2.0, 2.0].repeat(16)).unwrap();
    let e = region_embed(&map, &RegionBox::FULL).unwrap();
    for (got, want) in e.iter().zip([1.0 / 3.0, -2.0 / 3.0, 2.0 / 3.0]) {
        assert!((got - want).abs() < 1e-15);
    }

    let map = random_map(&mut ChaCha8Rng::seed_from_u64(9), 4, 4, 3);
    let cell = RegionBox::new(0.25, 0.5, 0.5, 0.75);
    let got = region_embed_with(&map, &cell, 1).unwrap();
    let want: Vec<f64> = map.data()[(2 * 4 + 1) * 3..(2 * 4 + 2) * 3].to_vec();
    let n = want.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w / n).abs() < 1e-15);
    }

    assert!(matches!(region_embed(&map, &RegionBox::new(0.5, 0.2, 0.5, 0.9)), Err(Error::Input(_))));
    assert!(matches!(region_embed(&map, &RegionBox::new(1.2, 0.2, 1.5, 0.9)), Err(Error::Input(_))));
}

proptest! {
    #[test]
    fn combine_stays_in_unit_interval(z in 0.0f64..=1.0, p in 0.0f64..=1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let c = cfg(a, b);
        for id in [BASE, NOVEL, BACKGROUND] {
            let s = combine_scores(z, p, &c, id).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn objectness_never_raises_a_score(s in 0.0f64..=1.0, o in 0.0f64..=1.0, delta in 0.0f64..10.0) {
        prop_assert!(apply_objectness(s, o, 3.0) <= s);
        prop_assert!(apply_objectness(s, o, delta) <= s);
    }

    #[test]
    fn normalized_layer_ignores_scale(
        d in 1usize..6,
        c in 1usize..5,
        seed in any::<u64>(),
        kx in 0.01f64..100.0,
        kw in 0.01f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..2.0) * if rng.gen() { 1.0 } else { -1.0 }).collect();
        let w = Tensor::new(vec![c, d], (0..c * d).map(|_| rng.gen_range(0.1..2.0)).collect()).unwrap();
        let b: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = normalized_layer(&x, &w, &b, 20.0).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * kx).collect();
        let by_x = normalized_layer(&xs, &w, &b, 20.0).unwrap();
        let by_w = normalized_layer(&x, &w.map(|v| v * kw), &b, 20.0).unwrap();
        for ((a, p), q) in base.iter().zip(&by_x).zip(&by_w) {
            prop_assert!((a - p).abs() < 1e-10 && (a - q).abs() < 1e-10);
        }
    }
}
