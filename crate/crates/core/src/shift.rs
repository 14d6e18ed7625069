//! Temporal channel shifts with zero padding at clip boundaries.
//!
//! Within a block of `w` channels, the first `a = floor(w·f)` channels take
//! their values from the previous frame, the next `b = a` channels from the
//! following frame, and the rest are copied. Plain shift uses one block of
//! all `D` channels; periodic shift repeats the split inside every head.

use alloc::format;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Block layout for the shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ShiftMode {
    /// Split each head's `z` channels.
    Periodic,
    /// Split all `D` channels once.
    Plain,
}

/// Shift configuration. `fraction` is `numerator / denominator`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftSpec {
    /// Block layout.
    pub mode: ShiftMode,
    /// Fraction numerator.
    pub numerator: u32,
    /// Fraction denominator.
    pub denominator: u32,
    /// Number of heads `m`.
    pub heads: usize,
    /// Channels per head `z`.
    pub head_dim: usize,
}

impl ShiftSpec {
    /// Spec with the default 1/8 fraction.
    pub fn new(mode: ShiftMode, heads: usize, head_dim: usize) -> Self {
        Self {
            mode,
            numerator: 1,
            denominator: 8,
            heads,
            head_dim,
        }
    }

    /// Same spec with a different fraction.
    pub fn with_fraction(mut self, numerator: u32, denominator: u32) -> Self {
        self.numerator = numerator;
        self.denominator = denominator;
        self
    }

    /// Checks `0 ≤ fraction ≤ 1/2` and a non-empty layout.
    pub fn validate(&self) -> Result<()> {
        if self.denominator == 0 || 2 * self.numerator > self.denominator {
            return Err(Error::Config(format!(
                "shift fraction {}/{} must lie in [0, 1/2]",
                self.numerator, self.denominator
            )));
        }
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "shift needs heads >= 1 and head_dim >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Total channel count `D = m·z`.
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// `(block width, shifted channels per direction)`.
    pub fn block(&self) -> (usize, usize) {
        let width = match self.mode {
            ShiftMode::Periodic => self.head_dim,
            ShiftMode::Plain => self.model_dim(),
        };
        let shifted = width * self.numerator as usize / self.denominator as usize;
        (width, shifted)
    }

    /// True when rounding leaves no channel to shift.
    pub fn is_noop(&self) -> bool {
        self.block().1 == 0
    }
}

/// Direction pair applied to the two shifted groups of each block.
#[derive(Clone, Copy)]
enum Pass {
    Forward,
    Adjoint,
}

fn shift_blocks(x: &Tensor, spec: &ShiftSpec, pass: Pass) -> Result<Tensor> {
    spec.validate()?;
    if x.rank() != 3 || x.shape()[2] != spec.model_dim() {
        return Err(shape_err("shift", x.shape(), &[spec.model_dim()]));
    }
    let (frames, tokens, dim) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (width, shifted) = spec.block();
    let mut out = x.clone();
    if shifted == 0 {
        return Ok(out);
    }
    // Forward: group one reads t-1, group two reads t+1. The adjoint swaps them.
    let (first_src, second_src): (isize, isize) = match pass {
        Pass::Forward => (-1, 1),
        Pass::Adjoint => (1, -1),
    };
    let src = x.data();
    let dst = out.data_mut();
    let frame_len = tokens * dim;
    for t in 0..frames {
        for (group, offset) in [(0usize, first_src), (1, second_src)] {
            let from = t as isize + offset;
            let inside = from >= 0 && (from as usize) < frames;
            for n in 0..tokens {
                for block in (0..dim).step_by(width) {
                    let c0 = block + group * shifted;
                    let d = t * frame_len + n * dim + c0;
                    if inside {
                        let s = from as usize * frame_len + n * dim + c0;
                        dst[d..d + shifted].copy_from_slice(&src[s..s + shifted]);
                    } else {
                        dst[d..d + shifted].fill(0.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-head temporal shift of a `[T, N, m·z]` tensor.
pub fn periodic_shift(x: &Tensor, spec: &ShiftSpec) -> Result<Tensor> {
    shift_blocks(
        x,
        &ShiftSpec {
            mode: ShiftMode::Periodic,
            ..*spec
        },
        Pass::Forward,
    )
}

/// Whole-channel temporal shift of a `[T, N, D]` tensor.
pub fn plain_shift(x: &Tensor, spec: &ShiftSpec) -> Result<Tensor> {
    shift_blocks(
        x,
        &ShiftSpec {
            mode: ShiftMode::Plain,
            ..*spec
        },
        Pass::Forward,
    )
}

/// Shift selected by `spec.mode`.
pub fn apply_shift(x: &Tensor, spec: &ShiftSpec) -> Result<Tensor> {
    shift_blocks(x, spec, Pass::Forward)
}

/// Gradient of [`apply_shift`]: the opposite-direction shift of `upstream`.
pub fn shift_backward(upstream: &Tensor, spec: &ShiftSpec) -> Result<Tensor> {
    shift_blocks(upstream, spec, Pass::Adjoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_normal, Seed};

    fn ramp(frames: usize, dim: usize) -> Tensor {
        Tensor::from_fn(&[frames, 1, dim], |i| (i / dim) as f64)
    }

    fn channel(x: &Tensor, c: usize) -> alloc::vec::Vec<f64> {
        (0..x.shape()[0]).map(|t| x.at(&[t, 0, c])).collect()
    }

    #[test]
    fn ramp_table_periodic() {
        let x = ramp(5, 16);
        let spec = ShiftSpec::new(ShiftMode::Periodic, 2, 8);
        let y = periodic_shift(&x, &spec).unwrap();
        for head in 0..2 {
            let base = head * 8;
            assert_eq!(channel(&y, base), [0.0, 0.0, 1.0, 2.0, 3.0]);
            assert_eq!(channel(&y, base + 1), [1.0, 2.0, 3.0, 4.0, 0.0]);
            for c in 2..8 {
                assert_eq!(channel(&y, base + c), channel(&x, base + c));
            }
        }
    }

    #[test]
    fn ramp_table_plain() {
        let x = ramp(4, 8);
        let y = plain_shift(&x, &ShiftSpec::new(ShiftMode::Plain, 1, 8)).unwrap();
        assert_eq!(channel(&y, 0), [0.0, 0.0, 1.0, 2.0]);
        assert_eq!(channel(&y, 1), [1.0, 2.0, 3.0, 0.0]);
        for c in 2..8 {
            assert_eq!(channel(&y, c), channel(&x, c));
        }
    }

    #[test]
    fn single_frame_zeroes_shifted_groups() {
        let x = seeded_normal(&[1, 3, 16], Seed(1), 1.0).unwrap();
        let y = periodic_shift(&x, &ShiftSpec::new(ShiftMode::Periodic, 2, 8)).unwrap();
        for row in y.data().chunks(8).zip(x.data().chunks(8)) {
            assert_eq!(&row.0[..2], &[0.0, 0.0]);
            assert_eq!(&row.0[2..], &row.1[2..]);
        }
    }

    #[test]
    fn single_head_periodic_is_plain() {
        let x = seeded_normal(&[5, 2, 16], Seed(2), 1.0).unwrap();
        let spec = ShiftSpec::new(ShiftMode::Periodic, 1, 16).with_fraction(1, 4);
        assert_eq!(
            periodic_shift(&x, &spec).unwrap(),
            plain_shift(&x, &spec).unwrap()
        );
    }

    #[test]
    fn zero_fraction_and_tiny_heads_are_identity() {
        let x = seeded_normal(&[3, 2, 8], Seed(3), 1.0).unwrap();
        let spec = ShiftSpec::new(ShiftMode::Plain, 1, 8).with_fraction(0, 1);
        assert_eq!(plain_shift(&x, &spec).unwrap(), x);
        let tiny = ShiftSpec::new(ShiftMode::Periodic, 2, 4);
        assert!(tiny.is_noop());
        assert_eq!(periodic_shift(&x, &tiny).unwrap(), x);
    }

    #[test]
    fn opposite_shifts_do_not_invert() {
        let x = Tensor::from_fn(&[3, 1, 8], |i| 1.0 + i as f64);
        let spec = ShiftSpec::new(ShiftMode::Plain, 1, 8);
        let forward = plain_shift(&x, &spec).unwrap();
        let back = shift_backward(&forward, &spec).unwrap();
        for t in 0..3 {
            for c in 2..8 {
                assert_eq!(back.at(&[t, 0, c]), x.at(&[t, 0, c]));
            }
        }
        assert_ne!(back, x);
        // Channel 0 at the last frame was dropped by the first shift.
        assert_eq!(back.at(&[2, 0, 0]), 0.0);
        assert_eq!(back.at(&[1, 0, 0]), x.at(&[1, 0, 0]));
    }

    #[test]
    fn backward_is_adjoint() {
        let spec = ShiftSpec::new(ShiftMode::Periodic, 2, 8);
        let x = seeded_normal(&[4, 3, 16], Seed(4), 1.0).unwrap();
        let g = seeded_normal(&[4, 3, 16], Seed(5), 1.0).unwrap();
        let lhs: f64 = apply_shift(&x, &spec)
            .unwrap()
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = shift_backward(&g, &spec)
            .unwrap()
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_specs() {
        let x = Tensor::zeros(&[2, 1, 8]);
        let spec = ShiftSpec::new(ShiftMode::Periodic, 3, 2);
        assert!(periodic_shift(&x, &spec).is_err());
        let wide = ShiftSpec::new(ShiftMode::Plain, 1, 8).with_fraction(3, 4);
        assert!(plain_shift(&x, &wide).is_err());
    }
}
