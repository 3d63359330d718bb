use std::f64::consts::TAU;

use rand_distr::{Distribution, Normal};

use super::{Dataset, Matrix};
use crate::error::{Error, Result};

/// Inner and outer radius of every generated arm.
pub const SPIRAL_RADIUS: (f64, f64) = (0.2, 2.0);

/// Two interleaved spiral arms, one per class.
pub fn generate_spirals(n_per_class: usize, noise_std: f64, turns: f64, seed: u64) -> Result<Dataset> {
    generate_spiral_arms(2, n_per_class, noise_std, turns, seed)
}

/// `arms` interleaved spirals in the plane, arm `c` labelled class `c`.
///
/// Points sit at evenly spaced positions `t = i / (n - 1)` along each arm, at
/// radius `0.2 + 1.8 t` and angle `2 pi (turns t + c / arms)`. Gaussian noise is
/// added to the radius only, so the seed changes the noise realization and
/// nothing else.
pub fn generate_spiral_arms(
    arms: usize,
    n_per_class: usize,
    noise_std: f64,
    turns: f64,
    seed: u64,
) -> Result<Dataset> {
    if arms < 2 || n_per_class == 0 {
        return Err(Error::invalid(
            "generate_spirals",
            "need at least two arms and one point per arm",
        ));
    }
    if noise_std < 0.0 || !noise_std.is_finite() {
        return Err(Error::invalid("generate_spirals", "noise std must be non-negative"));
    }
    let mut rng = crate::rng(seed);
    let noise = Normal::new(0.0, noise_std).expect("non-negative std");
    let (r0, r1) = SPIRAL_RADIUS;
    let mut xs = Vec::with_capacity(arms * n_per_class * 2);
    let mut classes = Vec::with_capacity(arms * n_per_class);
    for c in 0..arms {
        for i in 0..n_per_class {
            let t = if n_per_class == 1 {
                0.0
            } else {
                i as f64 / (n_per_class - 1) as f64
            };
            let angle = TAU * (turns * t + c as f64 / arms as f64);
            let radius = r0 + (r1 - r0) * t + noise.sample(&mut rng);
            xs.push(radius * angle.cos());
            xs.push(radius * angle.sin());
            classes.push(c);
        }
    }
    Dataset::from_classes(Matrix::new(classes.len(), 2, xs)?, &classes, arms)
}
