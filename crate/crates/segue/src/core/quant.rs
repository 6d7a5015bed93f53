//! Quantization to the discrete pixel grid.
//!
//! Perturbed images only exist on disk as 8-bit files, so every budget
//! claim has to survive rounding to the storage grid. The policy is
//! explicit rather than implicit in the PNG writer: the same grid is used
//! for in-memory measurement and on-disk encoding.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

/// Uniform quantizer over `[0,1]` with `levels` steps (256 for 8-bit
/// storage) and round-half-up rounding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizationPolicy {
    pub levels: u32,
}

impl Default for QuantizationPolicy {
    fn default() -> Self {
        QuantizationPolicy { levels: 256 }
    }
}

impl QuantizationPolicy {
    pub fn new(levels: u32) -> Self {
        assert!(levels >= 2, "quantizer needs at least two levels");
        QuantizationPolicy { levels }
    }

    /// Map a value to its integer level, clamping into `[0, levels-1]`.
    /// `round` in Rust rounds half away from zero; inputs are clamped
    /// non-negative first so this is round-half-up on the valid range.
    pub fn level_of(&self, v: f64) -> u32 {
        let max = (self.levels - 1) as f64;
        (v.clamp(0.0, 1.0) * max).round() as u32
    }

    /// Quantize one value: snap to the nearest representable level.
    pub fn quantize_value(&self, v: f64) -> f64 {
        let max = (self.levels - 1) as f64;
        self.level_of(v) as f64 / max
    }

    /// Quantize a whole tensor.
    pub fn quantize(&self, x: &Array4<f64>) -> Array4<f64> {
        x.mapv(|v| self.quantize_value(v))
    }

    /// Level -> value, the decoder used when reading 8-bit files.
    pub fn value_of(&self, level: u32) -> f64 {
        debug_assert!(level < self.levels);
        level as f64 / (self.levels - 1) as f64
    }

    /// Width of one quantization step.
    pub fn step(&self) -> f64 {
        1.0 / (self.levels - 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Frozen oracle for 8-bit: value 0.5 maps to level round(127.5) = 128,
    /// i.e. 128/255; 8/255 must round-trip exactly to its own level.
    #[test]
    fn known_levels_for_8bit() {
        let q = QuantizationPolicy::default();
        assert_eq!(q.level_of(0.0), 0);
        assert_eq!(q.level_of(1.0), 255);
        assert_eq!(q.level_of(0.5), 128, "round-half-up at the midpoint");
        assert_eq!(q.level_of(8.0 / 255.0), 8);
        assert!((q.quantize_value(0.5) - 128.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn quantization_is_idempotent() {
        let q = QuantizationPolicy::default();
        for i in 0..1000 {
            let v = i as f64 / 999.0;
            let once = q.quantize_value(v);
            let twice = q.quantize_value(once);
            assert_eq!(once, twice, "quantize(quantize(x)) != quantize(x) at {v}");
        }
    }

    #[test]
    fn quantization_clamps_out_of_range() {
        let q = QuantizationPolicy::default();
        assert_eq!(q.quantize_value(-0.2), 0.0);
        assert_eq!(q.quantize_value(1.7), 1.0);
    }

    #[test]
    fn quantization_error_is_at_most_half_step() {
        let q = QuantizationPolicy::default();
        for i in 0..10_000 {
            let v = i as f64 / 9_999.0;
            let err = (q.quantize_value(v) - v).abs();
            assert!(err <= q.step() / 2.0 + 1e-12, "error {err} at {v}");
        }
    }
}
