//! Two-component univariate Gaussian-mixture EM for extracting myelinated
//! WM from the PDw−T1w difference image in the early-infancy workflow.

use crate::error::{Error, Result};
use crate::volume::{BrainMask, LabelVolume, ScalarVolume, Tissue};
use serde::{Deserialize, Serialize};

/// Std floor preventing component collapse.
pub const S_FLOOR: f64 = 1e-4;

/// Two-component univariate Gaussian mixture, canonically ordered m1 <= m2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gmm2 {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub stds: [f64; 2],
    /// Log-likelihood after each EM iteration.
    pub log_likelihood: Vec<f64>,
}

impl Gmm2 {
    pub fn new(weights: [f64; 2], means: [f64; 2], stds: [f64; 2]) -> Result<Gmm2> {
        let g = Gmm2 { weights, means, stds, log_likelihood: Vec::new() };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weights[0] > 0.0 && self.weights[1] > 0.0) {
            return Err(Error::Validation("component weights must be positive".into()));
        }
        if (self.weights[0] + self.weights[1] - 1.0).abs() > 1e-9 {
            return Err(Error::Validation("weights must sum to 1".into()));
        }
        if self.stds.iter().any(|&s| s < S_FLOOR) {
            return Err(Error::Validation("stds must be >= the floor".into()));
        }
        if self.means.iter().chain(self.stds.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("parameters must be finite".into()));
        }
        Ok(())
    }

    fn canonicalize(&mut self) {
        if self.means[0] > self.means[1] {
            self.weights.swap(0, 1);
            self.means.swap(0, 1);
            self.stds.swap(0, 1);
        }
    }

    fn density(&self, k: usize, v: f64) -> f64 {
        let z = (v - self.means[k]) / self.stds[k];
        (-(z * z) / 2.0).exp() / (self.stds[k] * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// Posterior probability of the higher-mean component.
    pub fn posterior_high(&self, v: f64) -> f64 {
        let p1 = self.weights[0] * self.density(0, v);
        let p2 = self.weights[1] * self.density(1, v);
        if p1 + p2 == 0.0 {
            // both tails underflow; decide by distance in stds
            let z1 = ((v - self.means[0]) / self.stds[0]).abs();
            let z2 = ((v - self.means[1]) / self.stds[1]).abs();
            return if z2 < z1 { 1.0 } else { 0.0 };
        }
        p2 / (p1 + p2)
    }
}

/// Voxelwise PDw − T1w inside the mask, zero outside.
pub fn difference_image(pdw: &ScalarVolume, t1w: &ScalarVolume, mask: &BrainMask) -> Result<ScalarVolume> {
    if pdw.dims != t1w.dims || pdw.dims != mask.dims {
        return Err(Error::Dimension("difference operands differ in dims".into()));
    }
    let data = pdw
        .data
        .iter()
        .zip(t1w.data.iter())
        .zip(mask.data.iter())
        .map(|((&p, &t), &m)| if m { p - t } else { 0.0 })
        .collect();
    ScalarVolume::new(pdw.dims, pdw.voxel_size, data)
}

/// Deterministic initialization: split at the median and moment-match the
/// two halves.
pub fn median_split_init(values: &[f64]) -> Result<Gmm2> {
    if values.len() < 10 {
        return Err(Error::Validation("need >= 10 samples".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    let (lo, hi) = sorted.split_at(mid);
    let moments = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
        (m, var.sqrt().max(S_FLOOR))
    };
    let (m1, s1) = moments(lo);
    let (m2, s2) = moments(hi);
    let w1 = lo.len() as f64 / values.len() as f64;
    Gmm2::new([w1, 1.0 - w1], [m1, m2], [s1, s2])
}

/// Fit by expectation-maximization; stops when the log-likelihood gain
/// drops below `tol` or after `max_iters` iterations.
pub fn gmm2_em(values: &[f64], init: &Gmm2, tol: f64, max_iters: usize) -> Result<Gmm2> {
    init.validate()?;
    if values.len() < 10 {
        return Err(Error::Validation("need >= 10 samples".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Validation("tol must be > 0".into()));
    }
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return Err(Error::Degenerate("all samples identical".into()));
    }
    let n = values.len() as f64;
    let mut g = Gmm2 { log_likelihood: Vec::new(), ..init.clone() };
    for _ in 0..max_iters {
        // E-step: responsibilities of component 2, plus the log-likelihood
        // of the current parameters
        let mut ll = 0.0;
        let mut r2: Vec<f64> = Vec::with_capacity(values.len());
        for &v in values {
            let p1 = g.weights[0] * g.density(0, v);
            let p2 = g.weights[1] * g.density(1, v);
            let tot = (p1 + p2).max(f64::MIN_POSITIVE);
            ll += tot.ln();
            r2.push(p2 / tot);
        }
        // M-step: weighted moment updates
        let n2: f64 = r2.iter().sum();
        let n1 = n - n2;
        if n1 > 0.0 && n2 > 0.0 {
            let m1 = values.iter().zip(&r2).map(|(&v, &r)| v * (1.0 - r)).sum::<f64>() / n1;
            let m2 = values.iter().zip(&r2).map(|(&v, &r)| v * r).sum::<f64>() / n2;
            let v1 = values.iter().zip(&r2).map(|(&v, &r)| (1.0 - r) * (v - m1) * (v - m1)).sum::<f64>() / n1;
            let v2 = values.iter().zip(&r2).map(|(&v, &r)| r * (v - m2) * (v - m2)).sum::<f64>() / n2;
            g.weights = [n1 / n, n2 / n];
            g.means = [m1, m2];
            g.stds = [v1.sqrt().max(S_FLOOR), v2.sqrt().max(S_FLOOR)];
        }
        let done = matches!(g.log_likelihood.last(), Some(&prev) if ll - prev < tol);
        g.log_likelihood.push(ll);
        if done {
            break;
        }
    }
    g.canonicalize();
    g.validate()?;
    Ok(g)
}

/// Threshold the difference image by the fitted mixture: a voxel is MWM iff
/// the posterior of the higher-mean component strictly exceeds 1/2.
pub fn classify_myelin(diff: &ScalarVolume, mask: &BrainMask, model: &Gmm2) -> Result<LabelVolume> {
    model.validate()?;
    if diff.dims != mask.dims {
        return Err(Error::Dimension("difference and mask dims differ".into()));
    }
    let data = diff
        .data
        .iter()
        .zip(mask.data.iter())
        .map(|(&v, &m)| {
            if m && model.posterior_high(v as f64) > 0.5 {
                Tissue::Mwm.code()
            } else {
                Tissue::Bg.code()
            }
        })
        .collect();
    LabelVolume::new(diff.dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn difference_basics() {
        let dims = (4, 3, 2);
        let mut mask = BrainMask::all(dims);
        mask.data[0] = false;
        let t1w = ScalarVolume::new(dims, (1.0, 1.0, 1.0), vec![0.2; 24]).unwrap();
        let pdw = ScalarVolume::new(dims, (1.0, 1.0, 1.0), vec![0.5; 24]).unwrap();
        let d = difference_image(&pdw, &t1w, &mask).unwrap();
        assert_eq!(d.data[0], 0.0, "outside the mask");
        for &v in &d.data[1..] {
            assert!((v - 0.3).abs() < 1e-6);
        }
        let same = difference_image(&t1w, &t1w, &mask).unwrap();
        assert!(same.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn difference_linearity() {
        let dims = (3, 3, 1);
        let mask = BrainMask::all(dims);
        let a = ScalarVolume::new(dims, (1.0, 1.0, 1.0), (0..9).map(|i| i as f32 * 0.1).collect()).unwrap();
        let b = ScalarVolume::new(dims, (1.0, 1.0, 1.0), (0..9).map(|i| i as f32 * 0.05).collect()).unwrap();
        let mut a_shift = a.clone();
        for v in a_shift.data.iter_mut() {
            *v += 0.25;
        }
        let d = difference_image(&a, &b, &mask).unwrap();
        let ds = difference_image(&a_shift, &b, &mask).unwrap();
        for i in 0..9 {
            assert!((ds.data[i] - d.data[i] - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn difference_dims_mismatch() {
        let a = ScalarVolume::zeros((2, 2, 2), (1.0, 1.0, 1.0));
        let b = ScalarVolume::zeros((2, 2, 3), (1.0, 1.0, 1.0));
        assert!(matches!(
            difference_image(&a, &b, &BrainMask::all((2, 2, 2))),
            Err(Error::Dimension(_))
        ));
    }

    fn sample_mixture(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = Normal::new(0.2, 0.05).unwrap();
        let hi = Normal::new(0.8, 0.05).unwrap();
        (0..n)
            .map(|i| if i % 2 == 0 { lo.sample(&mut rng) } else { hi.sample(&mut rng) })
            .collect()
    }

    #[test]
    fn em_recovers_known_parameters() {
        let values = sample_mixture(10_000, 1);
        let init = median_split_init(&values).unwrap();
        let g = gmm2_em(&values, &init, 1e-8, 200).unwrap();
        assert!((g.means[0] - 0.2).abs() < 0.01, "m1 = {}", g.means[0]);
        assert!((g.means[1] - 0.8).abs() < 0.01, "m2 = {}", g.means[1]);
        assert!((g.weights[0] - 0.5).abs() < 0.02);
        assert!((g.weights[1] - 0.5).abs() < 0.02);
    }

    #[test]
    fn em_log_likelihood_monotone() {
        for seed in 0..5 {
            let values = sample_mixture(2_000, seed);
            let init = median_split_init(&values).unwrap();
            let g = gmm2_em(&values, &init, 1e-10, 100).unwrap();
            for w in g.log_likelihood.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "log-likelihood decreased: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn em_fixed_point_on_two_deltas() {
        // symmetric two-delta dataset with the optimum as init
        let mut values = vec![0.0; 50];
        values.extend(vec![1.0; 50]);
        let init = Gmm2::new([0.5, 0.5], [0.0, 1.0], [S_FLOOR, S_FLOOR]).unwrap();
        let g = gmm2_em(&values, &init, 1e-9, 200).unwrap();
        assert!(g.log_likelihood.len() <= 2, "took {} iterations", g.log_likelihood.len());
        assert!((g.means[0] - 0.0).abs() < 1e-9);
        assert!((g.means[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn em_identical_values_degenerate() {
        let values = vec![0.4; 100];
        let init = Gmm2::new([0.5, 0.5], [0.3, 0.5], [0.1, 0.1]).unwrap();
        assert!(matches!(gmm2_em(&values, &init, 1e-6, 50), Err(Error::Degenerate(_))));
    }

    #[test]
    fn em_canonical_order_regardless_of_init() {
        let values = sample_mixture(2_000, 7);
        let init = Gmm2::new([0.5, 0.5], [0.9, 0.1], [0.1, 0.1]).unwrap();
        let g = gmm2_em(&values, &init, 1e-8, 200).unwrap();
        assert!(g.means[0] <= g.means[1]);
    }

    #[test]
    fn classify_myelin_planted_region() {
        let dims = (20, 20, 20);
        let mask = BrainMask::all(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lo = Normal::new(0.1, 0.05).unwrap();
        let hi = Normal::new(0.7, 0.05).unwrap();
        let mut data = vec![0.0f32; 8000];
        let mut planted = vec![false; 8000];
        for z in 0..20 {
            for y in 0..20 {
                for x in 0..20 {
                    let i = x + 20 * (y + 20 * z);
                    let inside = (5..12).contains(&x) && (5..12).contains(&y) && (5..12).contains(&z);
                    planted[i] = inside;
                    data[i] = if inside { hi.sample(&mut rng) } else { lo.sample(&mut rng) } as f32;
                }
            }
        }
        let diff = ScalarVolume::new(dims, (1.0, 1.0, 1.0), data).unwrap();
        let values: Vec<f64> = diff.data.iter().map(|&v| v as f64).collect();
        let g = gmm2_em(&values, &median_split_init(&values).unwrap(), 1e-8, 200).unwrap();
        let labels = classify_myelin(&diff, &mask, &g).unwrap();
        let mut inter = 0usize;
        let mut nl = 0usize;
        let mut np = 0usize;
        for i in 0..8000 {
            let l = labels.data[i] == Tissue::Mwm.code();
            nl += l as usize;
            np += planted[i] as usize;
            inter += (l && planted[i]) as usize;
        }
        let d = 2.0 * inter as f64 / (nl + np) as f64;
        assert!(d >= 0.9, "planted-region dice {d}");
    }

    #[test]
    fn classify_myelin_threshold_monotone() {
        let g = Gmm2::new([0.6, 0.4], [0.2, 0.8], [0.1, 0.1]).unwrap();
        // equal stds: the posterior is monotone in the value
        let mut prev = 0.0;
        for i in 0..200 {
            let v = i as f64 * 0.01 - 0.5;
            let p = g.posterior_high(v);
            assert!(p >= prev - 1e-12, "posterior not monotone at {v}");
            prev = p;
        }
    }

    #[test]
    fn classify_myelin_vanishing_component() {
        let g = Gmm2::new([1.0 - 1e-9, 1e-9], [0.2, 0.8], [0.1, 0.1]).unwrap();
        let dims = (4, 4, 4);
        let data: Vec<f32> = (0..64).map(|i| 0.1 + (i as f32) * 0.01).collect();
        let diff = ScalarVolume::new(dims, (1.0, 1.0, 1.0), data).unwrap();
        let labels = classify_myelin(&diff, &BrainMask::all(dims), &g).unwrap();
        // values stay within a few stds of the low mean: no MWM assigned
        assert_eq!(labels.count(Tissue::Mwm), 0);
    }
}
