//! SSIM/MSSIM quality scoring of classifications against a reference
//! modality via class-mean painting, plus Dice overlap against ground truth.

use crate::error::{Error, Result};
use crate::mixture::Gmm2;
use crate::volume::{BrainMask, Channel, Cnr, LabelVolume, MultiChannelVolume, ScalarVolume, Tissue};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Age profile selecting the reference modality per tissue class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgeProfile {
    Older,
    Infant,
    Early,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsimParams {
    #[serde(default = "default_window_size")]
    pub window_size: usize,
    #[serde(default = "default_window_std")]
    pub window_std: f64,
    #[serde(default = "default_k1")]
    pub k1: f64,
    #[serde(default = "default_k2")]
    pub k2: f64,
    /// In-mask range of the reference when `None` (computed per volume).
    #[serde(default)]
    pub dynamic_range: Option<f64>,
}

fn default_window_size() -> usize {
    11
}
fn default_window_std() -> f64 {
    1.5
}
fn default_k1() -> f64 {
    0.01
}
fn default_k2() -> f64 {
    0.03
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window_size: default_window_size(),
            window_std: default_window_std(),
            k1: default_k1(),
            k2: default_k2(),
            dynamic_range: None,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(Error::Validation("window size must be odd".into()));
        }
        if !(self.window_std > 0.0) {
            return Err(Error::Validation("window std must be > 0".into()));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::Validation("k1 and k2 must be > 0".into()));
        }
        if let Some(l) = self.dynamic_range {
            if !(l > 0.0) {
                return Err(Error::Validation("dynamic range must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Normalized Gaussian window weights, row-major.
    pub fn window_weights(&self) -> Vec<f64> {
        let n = self.window_size;
        let r = (n / 2) as isize;
        let mut w = Vec::with_capacity(n * n);
        for dy in -r..=r {
            for dx in -r..=r {
                w.push((-((dx * dx + dy * dy) as f64) / (2.0 * self.window_std * self.window_std)).exp());
            }
        }
        let sum: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= sum;
        }
        w
    }
}

/// Full pipeline quality summary, serialized into the report JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityReport {
    pub mssim_before: f64,
    pub mssim_after: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<BTreeMap<String, f64>>,
    pub class_volumes: BTreeMap<String, usize>,
    pub cnr_map: BTreeMap<usize, Option<Cnr>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub myelin_model: Option<Gmm2>,
    pub events: Vec<String>,
}

/// Paint each voxel with the in-mask mean reference intensity of its class;
/// zero outside the mask.
pub fn render_classified(
    labels: &LabelVolume,
    reference: &ScalarVolume,
    mask: &BrainMask,
) -> Result<ScalarVolume> {
    if labels.dims != reference.dims || labels.dims != mask.dims {
        return Err(Error::Dimension("labels, reference and mask dims differ".into()));
    }
    let mut sums = [0.0f64; 5];
    let mut counts = [0usize; 5];
    for i in 0..labels.data.len() {
        if mask.data[i] {
            let c = labels.data[i] as usize;
            sums[c] += reference.data[i] as f64;
            counts[c] += 1;
        }
    }
    let means: Vec<f32> = (0..5)
        .map(|c| if counts[c] > 0 { (sums[c] / counts[c] as f64) as f32 } else { 0.0 })
        .collect();
    let data = labels
        .data
        .iter()
        .zip(mask.data.iter())
        .map(|(&c, &m)| if m { means[c as usize] } else { 0.0 })
        .collect();
    ScalarVolume::new(labels.dims, reference.voxel_size, data)
}

fn in_mask_range(reference: &ScalarVolume, mask: &BrainMask) -> Result<f64> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for (v, &m) in reference.data.iter().zip(mask.data.iter()) {
        if m {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if lo > hi {
        return Err(Error::Degenerate("empty mask".into()));
    }
    Ok((hi - lo) as f64)
}

/// Per-pixel SSIM of one axial slice; out-of-mask centers are NaN.
///
/// Windows are clipped at image borders with renormalized weights.
pub fn ssim_map(
    reference: &ScalarVolume,
    test: &ScalarVolume,
    mask: &BrainMask,
    z: usize,
    p: &SsimParams,
) -> Result<Vec<f64>> {
    p.validate()?;
    if reference.dims != test.dims || reference.dims != mask.dims {
        return Err(Error::Dimension("ssim operands differ in dims".into()));
    }
    let l = match p.dynamic_range {
        Some(l) => l,
        None => in_mask_range(reference, mask)?,
    };
    if !(l > 0.0) {
        return Err(Error::Validation("dynamic range must be > 0".into()));
    }
    let c1 = (p.k1 * l) * (p.k1 * l);
    let c2 = (p.k2 * l) * (p.k2 * l);
    let (nx, ny, _) = reference.dims;
    let n = p.window_size;
    let r = (n / 2) as isize;
    let weights = p.window_weights();
    let mut out = vec![f64::NAN; nx * ny];
    for cy in 0..ny {
        for cx in 0..nx {
            if !mask.inside(cx, cy, z) {
                continue;
            }
            let mut wsum = 0.0;
            let mut mx = 0.0;
            let mut my = 0.0;
            for dy in -r..=r {
                let yy = cy as isize + dy;
                if yy < 0 || yy >= ny as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = cx as isize + dx;
                    if xx < 0 || xx >= nx as isize {
                        continue;
                    }
                    let w = weights[((dy + r) * n as isize + (dx + r)) as usize];
                    wsum += w;
                    mx += w * reference.get(xx as usize, yy as usize, z) as f64;
                    my += w * test.get(xx as usize, yy as usize, z) as f64;
                }
            }
            mx /= wsum;
            my /= wsum;
            let mut vx = 0.0;
            let mut vy = 0.0;
            let mut cov = 0.0;
            for dy in -r..=r {
                let yy = cy as isize + dy;
                if yy < 0 || yy >= ny as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = cx as isize + dx;
                    if xx < 0 || xx >= nx as isize {
                        continue;
                    }
                    let w = weights[((dy + r) * n as isize + (dx + r)) as usize] / wsum;
                    let ex = reference.get(xx as usize, yy as usize, z) as f64 - mx;
                    let ey = test.get(xx as usize, yy as usize, z) as f64 - my;
                    vx += w * ex * ex;
                    vy += w * ey * ey;
                    cov += w * ex * ey;
                }
            }
            out[cx + nx * cy] = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(out)
}

/// Mean SSIM over all slices' in-mask window centers.
pub fn mssim(
    reference: &ScalarVolume,
    test: &ScalarVolume,
    mask: &BrainMask,
    p: &SsimParams,
) -> Result<f64> {
    if mask.count() == 0 {
        return Err(Error::Degenerate("empty mask".into()));
    }
    let mut p = p.clone();
    if p.dynamic_range.is_none() {
        p.dynamic_range = Some(in_mask_range(reference, mask)?);
    }
    let (_, _, nz) = reference.dims;
    let mut sum = 0.0;
    let mut count = 0usize;
    for z in 0..nz {
        for v in ssim_map(reference, test, mask, z, &p)? {
            if !v.is_nan() {
                sum += v;
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// Dice overlap of one class between two labelings; 1.0 when both empty.
pub fn dice(a: &LabelVolume, b: &LabelVolume, class: Tissue) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Dimension("labelings differ in dims".into()));
    }
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for i in 0..a.data.len() {
        let ia = a.data[i] == class.code();
        let ib = b.data[i] == class.code();
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter as f64 / (na + nb) as f64)
    }
}

/// The reference modality used to score a tissue class under an age profile.
pub fn reference_for_class(
    class: Tissue,
    profile: AgeProfile,
    volume: &MultiChannelVolume,
) -> Result<ScalarVolume> {
    let channel = |ch: Channel| {
        volume
            .channel(ch)
            .cloned()
            .ok_or_else(|| Error::Config(format!("profile requires the {ch:?} channel")))
    };
    match (profile, class) {
        (_, Tissue::Bg) => Err(Error::Validation("background has no reference".into())),
        (AgeProfile::Older, _) => channel(Channel::T1w),
        (AgeProfile::Infant, Tissue::Csf) => channel(Channel::T1w),
        (AgeProfile::Infant, _) => channel(Channel::T2w),
        (AgeProfile::Early, Tissue::Csf) => channel(Channel::T1w),
        (AgeProfile::Early, Tissue::Mwm) => {
            crate::mixture::difference_image(&channel(Channel::Pdw)?, &channel(Channel::T1w)?, &volume.mask)
        }
        (AgeProfile::Early, _) => channel(Channel::T2w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, ClassIntensity, PhantomSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(dims: (usize, usize, usize), data: Vec<f32>) -> ScalarVolume {
        ScalarVolume::new(dims, (1.0, 1.0, 1.0), data).unwrap()
    }

    #[test]
    fn render_single_class_constant() {
        let dims = (4, 4, 1);
        let labels = LabelVolume::filled(dims, Tissue::Gm);
        let reference = vol(dims, (0..16).map(|i| i as f32).collect());
        let mut mask = BrainMask::all(dims);
        mask.data[0] = false;
        let painted = render_classified(&labels, &reference, &mask).unwrap();
        let mean = (1..16).sum::<i32>() as f32 / 15.0;
        assert_eq!(painted.data[0], 0.0);
        for &v in &painted.data[1..] {
            assert!((v - mean).abs() < 1e-5);
        }
    }

    fn noiseless_phantom() -> (crate::volume::MultiChannelVolume, LabelVolume) {
        let mut spec = PhantomSpec::default_64();
        spec.bias_amplitude = 0.0;
        spec.tissue_stds = ClassIntensity { csf: [0.0; 3], gm: [0.0; 3], wm: [0.0; 3] };
        spec.wm_streaks.count = 0;
        generate_phantom(&spec).unwrap()
    }

    #[test]
    fn render_noiseless_phantom_reproduces_reference() {
        let (v, gt) = noiseless_phantom();
        let t1w = v.t1w.as_ref().unwrap();
        let painted = render_classified(&gt, t1w, &v.mask).unwrap();
        for i in 0..painted.data.len() {
            assert_eq!(painted.data[i], if v.mask.data[i] { t1w.data[i] } else { 0.0 });
        }
    }

    #[test]
    fn render_variance_never_exceeds_reference() {
        let spec = PhantomSpec::default_64();
        let (v, gt) = generate_phantom(&spec).unwrap();
        let t1w = v.t1w.as_ref().unwrap();
        let painted = render_classified(&gt, t1w, &v.mask).unwrap();
        let var = |s: &ScalarVolume| {
            let vals: Vec<f64> = s
                .data
                .iter()
                .zip(v.mask.data.iter())
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x as f64)
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64
        };
        assert!(var(&painted) <= var(t1w) + 1e-12);
    }

    #[test]
    fn render_is_idempotent() {
        let spec = PhantomSpec::default_64();
        let (v, gt) = generate_phantom(&spec).unwrap();
        let painted = render_classified(&gt, v.t1w.as_ref().unwrap(), &v.mask).unwrap();
        let again = render_classified(&gt, &painted, &v.mask).unwrap();
        assert_eq!(painted, again);
    }

    #[test]
    fn ssim_identity_is_one() {
        let dims = (16, 16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = vol(dims, (0..256).map(|_| rng.gen::<f32>()).collect());
        let mask = BrainMask::all(dims);
        let map = ssim_map(&a, &a, &mask, 0, &SsimParams::default()).unwrap();
        for v in map {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let m = mssim(&a, &a, &mask, &SsimParams::default()).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_luminance_only_closed_form() {
        let dims = (16, 16, 1);
        let a = vol(dims, vec![0.4; 256]);
        let b = vol(dims, vec![0.6; 256]);
        let mask = BrainMask::all(dims);
        let p = SsimParams { dynamic_range: Some(1.0), ..Default::default() };
        let map = ssim_map(&a, &b, &mask, 0, &p).unwrap();
        let (mx, my) = (0.4f64, 0.6f64);
        let c1 = (0.01f64).powi(2);
        let want = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        for v in map {
            assert!((v - want).abs() < 1e-6, "{v} vs {want}");
            assert!(v < 1.0);
        }
    }

    /// Direct scalar recomputation of one window's SSIM.
    fn ssim_window_oracle(
        a: &ScalarVolume,
        b: &ScalarVolume,
        cx: usize,
        cy: usize,
        l: f64,
    ) -> f64 {
        let (nx, ny, _) = a.dims;
        let mut pts = Vec::new();
        for dy in -5i32..=5 {
            for dx in -5i32..=5 {
                let (x, y) = (cx as i32 + dx, cy as i32 + dy);
                if x < 0 || y < 0 || x >= nx as i32 || y >= ny as i32 {
                    continue;
                }
                let w = (-((dx * dx + dy * dy) as f64) / (2.0 * 1.5 * 1.5)).exp();
                pts.push((w, a.get(x as usize, y as usize, 0) as f64, b.get(x as usize, y as usize, 0) as f64));
            }
        }
        let wsum: f64 = pts.iter().map(|p| p.0).sum();
        let mx: f64 = pts.iter().map(|p| p.0 * p.1).sum::<f64>() / wsum;
        let my: f64 = pts.iter().map(|p| p.0 * p.2).sum::<f64>() / wsum;
        let vx: f64 = pts.iter().map(|p| p.0 * (p.1 - mx) * (p.1 - mx)).sum::<f64>() / wsum;
        let vy: f64 = pts.iter().map(|p| p.0 * (p.2 - my) * (p.2 - my)).sum::<f64>() / wsum;
        let cov: f64 = pts.iter().map(|p| p.0 * (p.1 - mx) * (p.2 - my)).sum::<f64>() / wsum;
        let c1 = (0.01 * l) * (0.01 * l);
        let c2 = (0.03 * l) * (0.03 * l);
        ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    }

    #[test]
    fn ssim_matches_per_window_oracle() {
        let dims = (16, 16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = vol(dims, (0..256).map(|_| rng.gen::<f32>()).collect());
        let b = vol(dims, (0..256).map(|_| rng.gen::<f32>()).collect());
        let mask = BrainMask::all(dims);
        let p = SsimParams { dynamic_range: Some(1.0), ..Default::default() };
        let map = ssim_map(&a, &b, &mask, 0, &p).unwrap();
        for cy in 0..16 {
            for cx in 0..16 {
                let want = ssim_window_oracle(&a, &b, cx, cy, 1.0);
                let got = map[cx + 16 * cy];
                assert!((got - want).abs() < 1e-9, "({cx},{cy}): {got} vs {want}");
                assert!((-1.0..=1.0).contains(&got));
            }
        }
    }

    #[test]
    fn mssim_symmetry() {
        let dims = (16, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = vol(dims, (0..512).map(|_| rng.gen::<f32>()).collect());
        let b = vol(dims, (0..512).map(|_| rng.gen::<f32>()).collect());
        let mask = BrainMask::all(dims);
        let p = SsimParams { dynamic_range: Some(1.0), ..Default::default() };
        let ab = mssim(&a, &b, &mask, &p).unwrap();
        let ba = mssim(&b, &a, &mask, &p).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn mssim_empty_mask_degenerate() {
        let dims = (8, 8, 1);
        let a = vol(dims, vec![0.5; 64]);
        let mask = BrainMask { dims, data: vec![false; 64] };
        assert!(matches!(mssim(&a, &a, &mask, &SsimParams::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ssim_rejects_bad_dynamic_range() {
        let dims = (8, 8, 1);
        let a = vol(dims, vec![0.5; 64]);
        let mask = BrainMask::all(dims);
        let p = SsimParams { dynamic_range: Some(0.0), ..Default::default() };
        assert!(matches!(ssim_map(&a, &a, &mask, 0, &p), Err(Error::Validation(_))));
        // constant reference without an explicit range degenerates too
        assert!(ssim_map(&a, &a, &mask, 0, &SsimParams::default()).is_err());
    }

    #[test]
    fn dice_closed_forms() {
        let dims = (4, 1, 1);
        let a = LabelVolume::new(dims, vec![2, 2, 0, 0]).unwrap();
        assert_eq!(dice(&a, &a, Tissue::Gm).unwrap(), 1.0);
        let b = LabelVolume::new(dims, vec![0, 0, 2, 2]).unwrap();
        assert_eq!(dice(&a, &b, Tissue::Gm).unwrap(), 0.0);
        let c = LabelVolume::new(dims, vec![0, 2, 2, 0]).unwrap();
        assert_eq!(dice(&a, &c, Tissue::Gm).unwrap(), 0.5);
        assert_eq!(dice(&a, &b, Tissue::Mwm).unwrap(), 1.0, "both empty");
        assert_eq!(dice(&a, &c, Tissue::Gm).unwrap(), dice(&c, &a, Tissue::Gm).unwrap());
    }

    #[test]
    fn reference_choices_per_profile() {
        let spec = PhantomSpec::default_64();
        let (v, _) = generate_phantom(&spec).unwrap();
        for class in [Tissue::Csf, Tissue::Gm, Tissue::Wm, Tissue::Mwm] {
            let r = reference_for_class(class, AgeProfile::Older, &v).unwrap();
            assert_eq!(&r, v.t1w.as_ref().unwrap());
        }
        let r = reference_for_class(Tissue::Gm, AgeProfile::Infant, &v).unwrap();
        assert_eq!(&r, v.t2w.as_ref().unwrap());
        let r = reference_for_class(Tissue::Csf, AgeProfile::Infant, &v).unwrap();
        assert_eq!(&r, v.t1w.as_ref().unwrap());
        let r = reference_for_class(Tissue::Mwm, AgeProfile::Early, &v).unwrap();
        let d = crate::mixture::difference_image(
            v.pdw.as_ref().unwrap(),
            v.t1w.as_ref().unwrap(),
            &v.mask,
        )
        .unwrap();
        assert_eq!(r, d);
    }

    #[test]
    fn reference_missing_channel_is_config_error() {
        let spec = PhantomSpec::default_64();
        let (v, _) = generate_phantom(&spec).unwrap();
        let t1w_only = crate::volume::MultiChannelVolume::new(
            v.t1w.clone(),
            None,
            None,
            v.mask.clone(),
        )
        .unwrap();
        assert!(matches!(
            reference_for_class(Tissue::Gm, AgeProfile::Infant, &t1w_only),
            Err(Error::Config(_))
        ));
    }
}
