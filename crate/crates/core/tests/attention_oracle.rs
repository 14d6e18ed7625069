//! Leap attention checked against joint attention with an explicit pair mask,
//! written here with plain loops and no library helpers beyond `Tensor`.

use laps_core::attention::{attention_forward, AttentionMode, HeadWeights, MultiHeadWeights};
use laps_core::tensor::seeded_normal;
use laps_core::{Seed, Tensor};

/// Pair id of every frame for a gap of `step` frames.
fn oracle_pairs(frames: usize, step: usize) -> Vec<usize> {
    let mut group = vec![usize::MAX; frames];
    let mut next = 0;
    for t in 0..frames {
        if group[t] == usize::MAX {
            group[t] = next;
            group[t + step] = next;
            next += 1;
        }
    }
    group
}

/// Joint attention over all `T·N` tokens where token `i` may see token `j`
/// only when `allowed(frame_i, frame_j)`.
fn masked_joint(
    x: &Tensor,
    w: &MultiHeadWeights,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Tensor {
    let (t, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let z = w.head_dim();
    let tokens = t * n;
    let mut out = vec![0.0; tokens * d];
    let xd = x.data();
    for (h, head) in w.heads().iter().enumerate() {
        let proj = |mat: &Tensor| -> Vec<Vec<f64>> {
            (0..tokens)
                .map(|tok| {
                    (0..z)
                        .map(|o| {
                            (0..z)
                                .map(|i| xd[tok * d + h * z + i] * mat.data()[i * z + o])
                                .sum()
                        })
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (proj(&head.w_q), proj(&head.w_k), proj(&head.w_v));
        for i in 0..tokens {
            let scores: Vec<Option<f64>> = (0..tokens)
                .map(|j| {
                    allowed(i / n, j / n)
                        .then(|| (0..z).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (z as f64).sqrt())
                })
                .collect();
            let max = scores
                .iter()
                .flatten()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores
                .iter()
                .map(|s| s.map_or(0.0, |s| (s - max).exp()))
                .collect();
            let total: f64 = weights.iter().sum();
            for c in 0..z {
                out[i * d + h * z + c] =
                    (0..tokens).map(|j| weights[j] * v[j][c]).sum::<f64>() / total;
            }
        }
    }
    Tensor::new(vec![t, n, d], out).unwrap()
}

fn setup(t: usize, n: usize, z: usize, m: usize, seed: u64) -> (Tensor, MultiHeadWeights) {
    let x = seeded_normal(&[t, n, z * m], Seed(seed), 1.0).unwrap();
    let w = MultiHeadWeights::random(m, z, Seed(seed + 1000), 0.7).unwrap();
    (x, w)
}

#[test]
fn leap_matches_pair_masked_joint() {
    let mut cases = 0;
    for (frames, levels) in [(4usize, 1..=2u32), (8, 1..=3)] {
        for level in levels {
            for seed in 0..4 {
                let (n, z, m) = (2 + seed as usize % 2, 2, 2);
                let (x, w) = setup(frames, n, z, m, seed * 31 + level as u64);
                let group = oracle_pairs(frames, frames >> level);
                let oracle = masked_joint(&x, &w, &|a, b| group[a] == group[b]);
                let leap = attention_forward(&x, &w, AttentionMode::Leap(level)).unwrap();
                assert!(
                    leap.max_abs_diff(&oracle).unwrap() <= 1e-9,
                    "T={frames} R={level} seed={seed}"
                );
                cases += 1;
            }
        }
    }
    assert_eq!(cases, 20);
}

#[test]
fn spatial_and_joint_match_masked_oracle() {
    for seed in 0..5 {
        let (x, w) = setup(4, 3, 3, 2, seed);
        let spatial = attention_forward(&x, &w, AttentionMode::Spatial2D).unwrap();
        let joint = attention_forward(&x, &w, AttentionMode::Joint3D).unwrap();
        assert!(
            spatial
                .max_abs_diff(&masked_joint(&x, &w, &|a, b| a == b))
                .unwrap()
                <= 1e-9
        );
        assert!(
            joint
                .max_abs_diff(&masked_joint(&x, &w, &|_, _| true))
                .unwrap()
                <= 1e-9
        );
    }
}

#[test]
fn two_frame_leap_equals_joint() {
    let mut cases = 0;
    for n in 1..=5 {
        for z in 1..=2 {
            for m in 1..=5 {
                let (x, w) = setup(2, n, z, m, (n * 100 + z * 10 + m) as u64);
                let leap = attention_forward(&x, &w, AttentionMode::Leap(1)).unwrap();
                let joint = attention_forward(&x, &w, AttentionMode::Joint3D).unwrap();
                assert!(leap.max_abs_diff(&joint).unwrap() <= 1e-9);
                cases += 1;
            }
        }
    }
    assert_eq!(cases, 50);
}

#[test]
fn outputs_stay_in_group_value_hull() {
    // With identity value projections the per-head value rows are the input
    // slices themselves, so hull bounds come straight from `x`.
    for (mode, frames) in [
        (AttentionMode::Spatial2D, 4),
        (AttentionMode::Joint3D, 4),
        (AttentionMode::Leap(1), 8),
        (AttentionMode::Leap(3), 8),
    ] {
        let (n, z, m) = (3, 2, 2);
        let x = seeded_normal(&[frames, n, z * m], Seed(frames as u64), 1.0).unwrap();
        let random = MultiHeadWeights::random(m, z, Seed(9), 1.0).unwrap();
        let heads = random
            .heads()
            .iter()
            .map(|h| HeadWeights::new(h.w_q.clone(), h.w_k.clone(), Tensor::eye(z)).unwrap())
            .collect();
        let w = MultiHeadWeights::new(heads).unwrap();
        let y = attention_forward(&x, &w, mode).unwrap();
        let group = match mode {
            AttentionMode::Spatial2D => (0..frames).collect(),
            AttentionMode::Joint3D => vec![0; frames],
            AttentionMode::Leap(level) => oracle_pairs(frames, frames >> level),
        };
        for f in 0..frames {
            for tok in 0..n {
                for ch in 0..z * m {
                    let members = (0..frames).filter(|&g| group[g] == group[f]);
                    let vals: Vec<f64> = members
                        .flat_map(|g| (0..n).map(move |k| (g, k)))
                        .map(|(g, k)| x.at(&[g, k, ch]))
                        .collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let v = y.at(&[f, tok, ch]);
                    assert!(
                        v >= lo - 1e-9 && v <= hi + 1e-9,
                        "{mode:?} frame {f} ch {ch}"
                    );
                }
            }
        }
    }
}

#[test]
fn zeroed_head_zeroes_only_its_channels() {
    let (x, w) = setup(4, 2, 3, 3, 5);
    for i in 0..3 {
        let mut wz = w.clone();
        wz.heads_mut()[i] = HeadWeights::zeros(3);
        let base = attention_forward(&x, &w, AttentionMode::Leap(1)).unwrap();
        let y = attention_forward(&x, &wz, AttentionMode::Leap(1)).unwrap();
        for (k, (a, b)) in base.data().iter().zip(y.data()).enumerate() {
            let ch = k % 9;
            if ch / 3 == i {
                assert_eq!(*b, 0.0);
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
