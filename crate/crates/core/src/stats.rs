//! Sample statistics over replicate values.
//!
//! Values are always reduced in replicate order with compensated summation,
//! so the result does not depend on how replicates were scheduled.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (divisor `n − 1`); 0 for a single value.
    pub std: f64,
    /// `std / √count`.
    pub stderr: f64,
}

impl Summary {
    /// Two-pass mean and variance. An empty slice gives NaN moments.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                count: 0,
                mean: f64::NAN,
                std: f64::NAN,
                stderr: f64::NAN,
            };
        }
        let mean = kahan_sum(values.iter().copied()) / n as f64;
        let std = if n > 1 {
            (kahan_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            count: n,
            mean,
            std,
            stderr: std / (n as f64).sqrt(),
        }
    }

    /// z-score of `target` against this mean.
    pub fn z(&self, target: f64) -> f64 {
        let diff = self.mean - target;
        if self.stderr > 0.0 {
            diff / self.stderr
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(diff)
        }
    }
}

/// Neumaier-compensated sum.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in it {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}
