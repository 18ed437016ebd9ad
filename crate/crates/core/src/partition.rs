//! Optimal brain partitioning by binary space partitioning.
//!
//! Regions are split with axis-aligned planes chosen to maximize the gain in
//! mutual information between intensity-histogram bins and region identity;
//! leaves are expanded by overlap margins on internal faces for stitching.

use crate::error::{Error, Result};
use crate::volume::{Box3, BrainMask, Cnr, LabelVolume, ScalarVolume, Tissue};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionParams {
    pub bin_count: usize,
    pub max_regions: usize,
    pub min_gain_bits: f64,
    pub min_extent_voxels: usize,
    pub margin: usize,
}

impl Default for PartitionParams {
    fn default() -> Self {
        PartitionParams {
            bin_count: 64,
            max_regions: 48,
            min_gain_bits: 1e-3,
            min_extent_voxels: 8,
            margin: 2,
        }
    }
}

impl PartitionParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_extent_voxels <= 2 * self.margin {
            return Err(Error::Validation("min_extent must exceed 2*margin".into()));
        }
        if self.max_regions < 1 {
            return Err(Error::Validation("max_regions must be >= 1".into()));
        }
        if self.bin_count < 2 {
            return Err(Error::Validation("bin_count must be >= 2".into()));
        }
        Ok(())
    }
}

/// Equal-width histogram of in-mask T1w intensities with a per-voxel bin map.
pub struct HistogramModel {
    pub bin_count: usize,
    pub bin_edges: Vec<f64>,
    pub global_probs: Vec<f64>,
    pub dims: (usize, usize, usize),
    pub mask_total: usize,
    bin_idx: Vec<u16>,
    in_mask: Vec<bool>,
}

impl HistogramModel {
    /// In-mask voxel count and per-bin counts over a box.
    pub fn box_counts(&self, bx: &Box3) -> (Vec<u64>, u64) {
        let mut counts = vec![0u64; self.bin_count];
        let mut total = 0u64;
        let nx = self.dims.0;
        let ny = self.dims.1;
        for z in bx.z0..=bx.z1 {
            for y in bx.y0..=bx.y1 {
                let base = nx * (y + ny * z);
                for x in bx.x0..=bx.x1 {
                    let i = base + x;
                    if self.in_mask[i] {
                        counts[self.bin_idx[i] as usize] += 1;
                        total += 1;
                    }
                }
            }
        }
        (counts, total)
    }
}

/// Build the equal-width in-mask histogram over [min, max]; the maximum value
/// is assigned to the last bin.
pub fn build_histogram(t1w: &ScalarVolume, mask: &BrainMask, bins: usize) -> Result<HistogramModel> {
    if bins < 2 {
        return Err(Error::Validation("bins must be >= 2".into()));
    }
    if t1w.dims != mask.dims {
        return Err(Error::Dimension("volume and mask dims differ".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut total = 0usize;
    for (v, &m) in t1w.data.iter().zip(mask.data.iter()) {
        if m {
            lo = lo.min(*v as f64);
            hi = hi.max(*v as f64);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Validation("mask is empty".into()));
    }
    if hi <= lo {
        return Err(Error::Degenerate("constant image".into()));
    }
    let width = (hi - lo) / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|b| lo + width * b as f64).collect();
    let mut bin_idx = vec![0u16; t1w.data.len()];
    let mut counts = vec![0u64; bins];
    for (i, (v, &m)) in t1w.data.iter().zip(mask.data.iter()).enumerate() {
        if m {
            let mut b = (((*v as f64) - lo) / width) as usize;
            if b >= bins {
                b = bins - 1;
            }
            bin_idx[i] = b as u16;
            counts[b] += 1;
        }
    }
    let global_probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(HistogramModel {
        bin_count: bins,
        bin_edges,
        global_probs,
        dims: t1w.dims,
        mask_total: total,
        bin_idx,
        in_mask: mask.data.clone(),
    })
}

/// Mutual information I(R;B) in bits for a disjoint region cover of the mask.
pub fn region_mi(model: &HistogramModel, regions: &[Box3]) -> Result<f64> {
    let mut covered = 0u64;
    for (i, a) in regions.iter().enumerate() {
        for b in regions.iter().skip(i + 1) {
            if let Some(ov) = a.intersect(b) {
                let (_, n) = model.box_counts(&ov);
                if n > 0 {
                    return Err(Error::Validation("overlapping regions".into()));
                }
            }
        }
    }
    let mut mi = 0.0;
    for r in regions {
        let (counts, total) = model.box_counts(r);
        covered += total;
        if total == 0 {
            continue;
        }
        let p_r = total as f64 / model.mask_total as f64;
        for (b, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let p_b_r = c as f64 / total as f64;
            let p_b = model.global_probs[b];
            mi += p_r * p_b_r * (p_b_r / p_b).log2();
        }
    }
    if covered != model.mask_total as u64 {
        return Err(Error::Validation("regions do not cover the mask".into()));
    }
    Ok(mi)
}

fn entropy_bits(counts: &[u64], total: u64) -> f64 {
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.log2();
        }
    }
    h
}

/// Gain of a cut from child bin counts: parent probability times the
/// Jensen-Shannon divergence of the child distributions. Equals the direct
/// MI difference of the refined partition.
fn gain_from_counts(model: &HistogramModel, left: &[u64], nl: u64, right: &[u64], nr: u64) -> f64 {
    let n = nl + nr;
    let parent: Vec<u64> = left.iter().zip(right.iter()).map(|(&a, &b)| a + b).collect();
    let h_parent = entropy_bits(&parent, n);
    let pi_l = nl as f64 / n as f64;
    let pi_r = nr as f64 / n as f64;
    let js = h_parent - pi_l * entropy_bits(left, nl) - pi_r * entropy_bits(right, nr);
    let p_region = n as f64 / model.mask_total as f64;
    (p_region * js).max(0.0)
}

fn split_boxes(region: &Box3, axis: Axis, plane: usize) -> (Box3, Box3) {
    let mut a = *region;
    let mut b = *region;
    match axis {
        Axis::X => {
            a.x1 = plane;
            b.x0 = plane + 1;
        }
        Axis::Y => {
            a.y1 = plane;
            b.y0 = plane + 1;
        }
        Axis::Z => {
            a.z1 = plane;
            b.z0 = plane + 1;
        }
    }
    (a, b)
}

/// MI gain of one explicit cut. `plane` is the last slab index of the lower
/// child along `axis`.
pub fn split_gain(model: &HistogramModel, region: &Box3, axis: Axis, plane: usize) -> Result<f64> {
    let (a, b) = split_boxes(region, axis, plane);
    let (ca, na) = model.box_counts(&a);
    let (cb, nb) = model.box_counts(&b);
    if na == 0 || nb == 0 {
        return Err(Error::Degenerate("empty child region".into()));
    }
    Ok(gain_from_counts(model, &ca, na, &cb, nb))
}

/// Exhaustively evaluate all admissible planes on all three axes and return
/// the best (axis, plane, gain). Ties break by axis order x<y<z, then the
/// lower plane index. Returns None when no admissible cut reaches
/// `min_gain_bits`.
pub fn best_split(
    model: &HistogramModel,
    region: &Box3,
    params: &PartitionParams,
) -> Option<(Axis, usize, f64)> {
    let min_ext = params.min_extent_voxels;
    let mut best: Option<(Axis, usize, f64)> = None;
    for axis in Axis::ALL {
        let (lo, hi) = match axis {
            Axis::X => (region.x0, region.x1),
            Axis::Y => (region.y0, region.y1),
            Axis::Z => (region.z0, region.z1),
        };
        let extent = hi - lo + 1;
        if extent < 2 * min_ext {
            continue;
        }
        // per-slab histograms along this axis, then a prefix sweep over planes
        let slabs: Vec<(Vec<u64>, u64)> = (lo..=hi)
            .map(|p| {
                let mut slab = *region;
                match axis {
                    Axis::X => {
                        slab.x0 = p;
                        slab.x1 = p;
                    }
                    Axis::Y => {
                        slab.y0 = p;
                        slab.y1 = p;
                    }
                    Axis::Z => {
                        slab.z0 = p;
                        slab.z1 = p;
                    }
                }
                model.box_counts(&slab)
            })
            .collect();
        let mut left = vec![0u64; model.bin_count];
        let mut nl = 0u64;
        let total: u64 = slabs.iter().map(|(_, n)| n).sum();
        let all: Vec<u64> = {
            let mut acc = vec![0u64; model.bin_count];
            for (c, _) in &slabs {
                for (a, &v) in acc.iter_mut().zip(c.iter()) {
                    *a += v;
                }
            }
            acc
        };
        for plane in lo..=hi - 1 {
            let (slab_counts, slab_n) = &slabs[plane - lo];
            for (l, &v) in left.iter_mut().zip(slab_counts.iter()) {
                *l += v;
            }
            nl += slab_n;
            // child extents must respect min_extent
            if plane + 1 < lo + min_ext || hi - plane < min_ext {
                continue;
            }
            let nr = total - nl;
            if nl == 0 || nr == 0 {
                continue;
            }
            let right: Vec<u64> = all.iter().zip(left.iter()).map(|(&a, &l)| a - l).collect();
            let gain = gain_from_counts(model, &left, nl, &right, nr);
            let better = match best {
                None => true,
                Some((_, _, g)) => gain > g,
            };
            if better {
                best = Some((axis, plane, gain));
            }
        }
    }
    match best {
        Some((_, _, g)) if g >= params.min_gain_bits => best,
        _ => None,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitNode {
    pub region: Box3,
    pub axis: Axis,
    pub plane: usize,
    pub gain_bits: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Subdomain {
    pub id: usize,
    pub core_box: Box3,
    pub overlap_box: Box3,
    pub mean_intensity: Option<f64>,
    pub cnr: Option<Cnr>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionTree {
    pub dims: (usize, usize, usize),
    pub margin: usize,
    pub nodes: Vec<SplitNode>,
    pub leaves: Vec<Subdomain>,
    pub total_mi_bits: f64,
}

fn expand_with_margin(core: &Box3, dims: (usize, usize, usize), margin: usize) -> Box3 {
    Box3 {
        x0: core.x0.saturating_sub(if core.x0 > 0 { margin } else { 0 }),
        y0: core.y0.saturating_sub(if core.y0 > 0 { margin } else { 0 }),
        z0: core.z0.saturating_sub(if core.z0 > 0 { margin } else { 0 }),
        x1: if core.x1 + 1 < dims.0 { (core.x1 + margin).min(dims.0 - 1) } else { core.x1 },
        y1: if core.y1 + 1 < dims.1 { (core.y1 + margin).min(dims.1 - 1) } else { core.y1 },
        z1: if core.z1 + 1 < dims.2 { (core.z1 + margin).min(dims.2 - 1) } else { core.z1 },
    }
}

/// Greedy best-first binary space partitioning of the full volume box.
pub fn partition_volume(
    t1w: &ScalarVolume,
    mask: &BrainMask,
    params: &PartitionParams,
) -> Result<PartitionTree> {
    params.validate()?;
    let model = build_histogram(t1w, mask, params.bin_count)?;
    let root = Box3::full(t1w.dims);

    struct LeafState {
        region: Box3,
        best: Option<(Axis, usize, f64)>,
    }
    let mut leaves = vec![LeafState { region: root, best: best_split(&model, &root, params) }];
    let mut nodes = Vec::new();
    let mut total_mi = 0.0;

    while leaves.len() < params.max_regions {
        // leaf with the largest attainable gain; ties break by creation order
        let mut pick: Option<(usize, f64)> = None;
        for (i, leaf) in leaves.iter().enumerate() {
            if let Some((_, _, g)) = leaf.best {
                if pick.map_or(true, |(_, pg)| g > pg) {
                    pick = Some((i, g));
                }
            }
        }
        let Some((i, _)) = pick else { break };
        let (axis, plane, gain) = leaves[i].best.unwrap();
        let region = leaves[i].region;
        let (a, b) = split_boxes(&region, axis, plane);
        nodes.push(SplitNode { region, axis, plane, gain_bits: gain });
        total_mi += gain;
        leaves[i] = LeafState { region: a, best: best_split(&model, &a, params) };
        leaves.push(LeafState { region: b, best: best_split(&model, &b, params) });
    }

    let mut boxes: Vec<Box3> = leaves.into_iter().map(|l| l.region).collect();
    boxes.sort_by_key(|b| (b.z0, b.y0, b.x0));
    let dims = t1w.dims;
    let subdomains = boxes
        .into_iter()
        .enumerate()
        .map(|(id, core)| {
            let overlap = expand_with_margin(&core, dims, params.margin);
            let mut sum = 0.0;
            let mut n = 0usize;
            for (x, y, z) in core.iter() {
                if mask.inside(x, y, z) {
                    sum += t1w.get(x, y, z) as f64;
                    n += 1;
                }
            }
            let mean = if n > 0 { Some(sum / n as f64) } else { None };
            Subdomain { id, core_box: core, overlap_box: overlap, mean_intensity: mean, cnr: None }
        })
        .collect();

    Ok(PartitionTree { dims, margin: params.margin, nodes, leaves: subdomains, total_mi_bits: total_mi })
}

/// In-mask T1w mean and GM/WM contrast-to-noise ratio over a subdomain core.
///
/// The CNR is absent when either class has fewer than 10 voxels and flagged
/// infinite when both class variances vanish with distinct means.
pub fn subdomain_stats(
    t1w: &ScalarVolume,
    labels: &LabelVolume,
    sub: &Subdomain,
) -> Result<(f64, Option<Cnr>)> {
    let core = &sub.core_box;
    if !core.within(t1w.dims) {
        return Err(Error::Dimension("subdomain out of bounds".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut gm = Vec::new();
    let mut wm = Vec::new();
    for (x, y, z) in core.iter() {
        let t = labels.get(x, y, z);
        if t == Tissue::Bg {
            continue;
        }
        let v = t1w.get(x, y, z) as f64;
        sum += v;
        n += 1;
        match t {
            Tissue::Gm => gm.push(v),
            Tissue::Wm => wm.push(v),
            _ => {}
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("no in-mask voxels in subdomain".into()));
    }
    let mean = sum / n as f64;
    if gm.len() < 10 || wm.len() < 10 {
        return Ok((mean, None));
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
        (m, var)
    };
    let (m_gm, v_gm) = stats(&gm);
    let (m_wm, v_wm) = stats(&wm);
    let pooled = ((v_gm + v_wm) / 2.0).sqrt();
    let cnr = if pooled == 0.0 {
        if m_gm == m_wm {
            return Ok((mean, None));
        }
        Cnr::Infinite
    } else {
        Cnr::Finite((m_wm - m_gm).abs() / pooled)
    };
    Ok((mean, Some(cnr)))
}
