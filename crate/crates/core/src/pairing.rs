//! Temporal frame pairing for leap attention.
//!
//! A clip of `T` frames is split into two sorted index lists `A` and `B` with
//! `B[j] - A[j] = S` for every `j`. Frames `A[j]` and `B[j]` then attend to each
//! other as one group of `2N` tokens. The skip step follows the pyramid level
//! `R` as `S = T / 2^R`, and encoders cycle through the levels by depth.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{concat_frames, gather_frames, split_tokens, Tensor};

/// Pyramid levels cycled across encoder depth.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct PyramidCycle {
    /// Levels, each at least 1.
    pub levels: Vec<u32>,
}

impl Default for PyramidCycle {
    fn default() -> Self {
        Self {
            levels: vec![1, 2, 3],
        }
    }
}

impl PyramidCycle {
    /// Checks the cycle is non-empty and that every level is usable with
    /// `frames` frames.
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("pyramid cycle is empty".into()));
        }
        for &level in &self.levels {
            pyramid_step(frames, level)?;
        }
        Ok(())
    }
}

/// Skip step `S = T / 2^R`.
pub fn pyramid_step(frames: usize, level: u32) -> Result<usize> {
    if frames == 0 || frames % 2 != 0 {
        return Err(Error::Config(format!(
            "clip length must be even and positive, got {frames}"
        )));
    }
    if level == 0 || level >= usize::BITS {
        return Err(Error::Config(format!(
            "pyramid level must be >= 1, got {level}"
        )));
    }
    let divisor = 1usize << level;
    if frames % divisor != 0 {
        return Err(Error::Config(format!(
            "pyramid level {level} needs {divisor} | T, got T = {frames}"
        )));
    }
    Ok(frames / divisor)
}

/// Pyramid level used by encoder `layer` (0-based).
pub fn level_for_layer(layer: usize, cycle: &PyramidCycle) -> u32 {
    cycle.levels[layer % cycle.levels.len()]
}

/// Index lists and frame permutations pairing frame `A[j]` with `B[j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingPlan {
    frames: usize,
    step: usize,
    list_a: Vec<usize>,
    list_b: Vec<usize>,
    forward_perm: Vec<usize>,
    inverse_perm: Vec<usize>,
}

impl PairingPlan {
    /// Clip length `T`.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Skip step `S`.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Sorted first members of each pair.
    pub fn list_a(&self) -> &[usize] {
        &self.list_a
    }

    /// Sorted second members of each pair.
    pub fn list_b(&self) -> &[usize] {
        &self.list_b
    }

    /// Source frame for each position of the grouped layout
    /// `[A[0], B[0], A[1], B[1], ..]`.
    pub fn forward_perm(&self) -> &[usize] {
        &self.forward_perm
    }

    /// Grouped position holding each chronological frame.
    pub fn inverse_perm(&self) -> &[usize] {
        &self.inverse_perm
    }

    /// `(A[j], B[j])` pairs in order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.list_a.iter().copied().zip(self.list_b.iter().copied())
    }

    /// Index of the pair containing `frame`.
    pub fn group_of(&self, frame: usize) -> usize {
        self.inverse_perm[frame] / 2
    }
}

/// Greedy pairing: scan `t = 0..T`, and for every unclaimed `t` claim both
/// `t` (into `A`) and `t + S` (into `B`); then sort both lists.
pub fn build_pairing(frames: usize, step: usize) -> Result<PairingPlan> {
    if frames == 0 || frames % 2 != 0 {
        return Err(Error::Config(format!(
            "clip length must be even and positive, got {frames}"
        )));
    }
    if step == 0 {
        return Err(Error::Config("skip step must be >= 1".into()));
    }
    let infeasible = Error::PairingInfeasible { frames, step };
    let mut claimed = vec![false; frames];
    let mut list_a = Vec::with_capacity(frames / 2);
    let mut list_b = Vec::with_capacity(frames / 2);
    for t in 0..frames {
        if claimed[t] {
            continue;
        }
        let partner = t + step;
        if partner >= frames || claimed[partner] {
            return Err(infeasible);
        }
        claimed[t] = true;
        claimed[partner] = true;
        list_a.push(t);
        list_b.push(partner);
    }
    list_a.sort_unstable();
    list_b.sort_unstable();

    let mut forward_perm = Vec::with_capacity(frames);
    for (&a, &b) in list_a.iter().zip(&list_b) {
        forward_perm.push(a);
        forward_perm.push(b);
    }
    let mut inverse_perm = vec![0; frames];
    for (pos, &frame) in forward_perm.iter().enumerate() {
        inverse_perm[frame] = pos;
    }
    Ok(PairingPlan {
        frames,
        step,
        list_a,
        list_b,
        forward_perm,
        inverse_perm,
    })
}

/// Plan for pyramid level `level` on a clip of `frames` frames.
pub fn plan_for_level(frames: usize, level: u32) -> Result<PairingPlan> {
    build_pairing(frames, pyramid_step(frames, level)?)
}

/// Groups `[T, N, c]` into `[T/2, 2N, c]`: slice `j` holds frame `A[j]`'s
/// tokens followed by frame `B[j]`'s.
pub fn apply_plan(x: &Tensor, plan: &PairingPlan) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[0] != plan.frames {
        return Err(shape_err("apply_plan", x.shape(), &[plan.frames]));
    }
    let a = gather_frames(x, &plan.list_a)?;
    let b = gather_frames(x, &plan.list_b)?;
    concat_frames(&a, &b)
}

/// Inverse of [`apply_plan`]: `[T/2, 2N, c]` back to chronological `[T, N, c]`.
pub fn restore_plan(y: &Tensor, plan: &PairingPlan) -> Result<Tensor> {
    let shape = y.shape();
    if y.rank() != 3 || shape[0] * 2 != plan.frames || shape[1] % 2 != 0 {
        return Err(shape_err("restore_plan", shape, &[plan.frames / 2]));
    }
    let tokens = shape[1] / 2;
    // Row-major [T/2, 2N, c] is the grouped frame order [A0, B0, A1, B1, ..].
    let grouped = y.reshape(&[plan.frames, tokens, shape[2]])?;
    gather_frames(&grouped, &plan.inverse_perm)
}

/// Splits a grouped tensor back into its `A` and `B` halves.
pub fn split_pairs(y: &Tensor) -> Result<(Tensor, Tensor)> {
    split_tokens(y, y.shape()[1] / 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_steps() {
        assert_eq!(pyramid_step(8, 1).unwrap(), 4);
        assert_eq!(pyramid_step(8, 2).unwrap(), 2);
        assert_eq!(pyramid_step(8, 3).unwrap(), 1);
        assert!(pyramid_step(8, 4).is_err());
        assert!(pyramid_step(8, 0).is_err());
        assert!(pyramid_step(7, 1).is_err());
        assert!(pyramid_step(12, 3).is_err());
    }

    #[test]
    fn worked_example_pairs() {
        let plan = build_pairing(8, 4).unwrap();
        assert_eq!(plan.list_a(), &[0, 1, 2, 3]);
        assert_eq!(plan.list_b(), &[4, 5, 6, 7]);
        let pairs: Vec<_> = plan.pairs().collect();
        assert_eq!(pairs, vec![(0, 4), (1, 5), (2, 6), (3, 7)]);
    }

    #[test]
    fn small_and_interleaved_plans() {
        let plan = build_pairing(2, 1).unwrap();
        assert_eq!((plan.list_a(), plan.list_b()), (&[0][..], &[1][..]));

        let plan = build_pairing(8, 2).unwrap();
        assert_eq!(plan.list_a(), &[0, 1, 4, 5]);
        assert_eq!(plan.list_b(), &[2, 3, 6, 7]);
        assert_eq!(plan.forward_perm(), &[0, 2, 1, 3, 4, 6, 5, 7]);
    }

    #[test]
    fn infeasible_and_odd_rejected() {
        assert_eq!(
            build_pairing(6, 2),
            Err(Error::PairingInfeasible { frames: 6, step: 2 })
        );
        assert!(matches!(
            build_pairing(8, 5),
            Err(Error::PairingInfeasible { .. })
        ));
        assert!(matches!(build_pairing(5, 1), Err(Error::Config(_))));
        assert!(matches!(build_pairing(4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn layer_levels_cycle() {
        let cycle = PyramidCycle::default();
        assert_eq!(level_for_layer(0, &cycle), 1);
        assert_eq!(level_for_layer(3, &cycle), 1);
        assert_eq!(level_for_layer(5, &cycle), 3);
        let single = PyramidCycle { levels: vec![2] };
        assert_eq!(level_for_layer(7, &single), 2);
        assert!(cycle.validate(8).is_ok());
        assert!(cycle.validate(4).is_err());
    }

    #[test]
    fn apply_plan_groups_frames() {
        let x = Tensor::from_fn(&[8, 2, 1], |i| (i / 2) as f64);
        let y = apply_plan(&x, &build_pairing(8, 4).unwrap()).unwrap();
        assert_eq!(y.shape(), &[4, 4, 1]);
        for (j, (a, b)) in [(0, 4), (1, 5), (2, 6), (3, 7)].into_iter().enumerate() {
            let a = a as f64;
            let b = b as f64;
            assert_eq!(&y.data()[j * 4..j * 4 + 4], &[a, a, b, b]);
        }
        let two = Tensor::from_fn(&[2, 3, 2], |i| i as f64);
        let y = apply_plan(&two, &build_pairing(2, 1).unwrap()).unwrap();
        assert_eq!(y.data(), two.data());
        assert_eq!(y.shape(), &[1, 6, 2]);
    }

    #[test]
    fn restore_plan_sends_tokens_home() {
        let plan = build_pairing(8, 2).unwrap();
        // Grouped slice 1 is pair (1, 3).
        let mut y = Tensor::zeros(&[4, 2, 1]);
        y.data_mut()[2] = 10.0;
        y.data_mut()[3] = 30.0;
        let x = restore_plan(&y, &plan).unwrap();
        assert_eq!(x.at(&[1, 0, 0]), 10.0);
        assert_eq!(x.at(&[3, 0, 0]), 30.0);
        assert_eq!(x.sum(), 40.0);

        let plan = build_pairing(8, 4).unwrap();
        let y = Tensor::from_fn(&[4, 2, 1], |i| i as f64);
        let x = restore_plan(&y, &plan).unwrap();
        assert_eq!(x.at(&[4, 0, 0]), 1.0);
        assert_eq!(
            restore_plan(&apply_plan(&x, &plan).unwrap(), &plan).unwrap(),
            x
        );
    }

    #[test]
    fn extent_mismatch() {
        let plan = build_pairing(4, 2).unwrap();
        assert!(apply_plan(&Tensor::zeros(&[6, 1, 1]), &plan).is_err());
        assert!(restore_plan(&Tensor::zeros(&[3, 2, 1]), &plan).is_err());
    }
}
