//! Fusing overlapping subdomain labelings into a seamless brain labeling.
//!
//! Each pairwise overlap strip is resolved per axial slice by a MAP estimate
//! under a symmetric disagreement energy with a Potts smoothness prior,
//! optimized by seeded simulated annealing; slices are assembled
//! progressively from the upper-left rectangle.

use crate::error::{Error, Result};
use crate::kfda::splitmix;
use crate::partition::{PartitionTree, Subdomain};
use crate::volume::{BrainMask, LabelVolume, Tissue};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Strip orientation: horizontal strips separate sources above/below and
/// clamp rows; vertical strips separate left/right and clamp columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// Two observed labelings of one joint overlap region.
///
/// Grids are row-major `rows x cols`. `clamp_a`/`clamp_b` are the outermost
/// line indices (rows for horizontal, columns for vertical) fixed to the
/// respective source, adjacent to that source's exclusive territory.
#[derive(Debug, Clone)]
pub struct OverlapObservation {
    pub rows: usize,
    pub cols: usize,
    pub obs_a: Vec<u8>,
    pub obs_b: Vec<u8>,
    pub orientation: Orientation,
    pub clamp_a: Option<usize>,
    pub clamp_b: Option<usize>,
}

impl OverlapObservation {
    pub fn validate(&self) -> Result<()> {
        let n = self.rows * self.cols;
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Dimension("empty overlap region".into()));
        }
        if self.obs_a.len() != n || self.obs_b.len() != n {
            return Err(Error::Dimension("observation length does not match shape".into()));
        }
        for &c in self.obs_a.iter().chain(self.obs_b.iter()) {
            if Tissue::from_code(c).is_none() {
                return Err(Error::Validation(format!("invalid label code {c}")));
            }
        }
        let span = match self.orientation {
            Orientation::Horizontal => self.rows,
            Orientation::Vertical => self.cols,
        };
        for clamp in [self.clamp_a, self.clamp_b] {
            if let Some(i) = clamp {
                if i >= span {
                    return Err(Error::Validation("clamp line outside the strip".into()));
                }
            }
        }
        if self.clamp_a.is_some() && self.clamp_a == self.clamp_b {
            return Err(Error::Validation("clamp lines coincide".into()));
        }
        Ok(())
    }

    fn on_clamped_line(&self, r: usize, c: usize) -> bool {
        let line = match self.orientation {
            Orientation::Horizontal => r,
            Orientation::Vertical => c,
        };
        self.clamp_a == Some(line) || self.clamp_b == Some(line)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnergyParams {
    #[serde(default = "default_w")]
    pub w: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_w() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    0.7
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams { w: default_w(), beta: default_beta() }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0) {
            return Err(Error::Validation("data weight w must be > 0".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Validation("beta must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AnnealSchedule {
    #[serde(default = "default_t0")]
    pub t0: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: usize,
    #[serde(default = "default_stall_sweeps")]
    pub stall_sweeps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_t0() -> f64 {
    2.0
}
fn default_c() -> f64 {
    0.95
}
fn default_max_sweeps() -> usize {
    200
}
fn default_stall_sweeps() -> usize {
    3
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            t0: default_t0(),
            c: default_c(),
            max_sweeps: default_max_sweeps(),
            stall_sweeps: default_stall_sweeps(),
            seed: 0,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0) {
            return Err(Error::Validation("t0 must be > 0".into()));
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return Err(Error::Validation("cooling factor must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> AnnealSchedule {
        AnnealSchedule { seed, ..*self }
    }
}

/// Disagreement-plus-Potts energy of a candidate configuration.
pub fn energy(config: &[u8], obs: &OverlapObservation, p: &EnergyParams) -> Result<f64> {
    obs.validate()?;
    p.validate()?;
    if config.len() != obs.obs_a.len() {
        return Err(Error::Dimension("config shape does not match observation".into()));
    }
    let (rows, cols) = (obs.rows, obs.cols);
    let mut e = 0.0;
    for i in 0..config.len() {
        e += p.w * ((config[i] != obs.obs_a[i]) as u8 + (config[i] != obs.obs_b[i]) as u8) as f64;
    }
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols && config[i] != config[i + 1] {
                e += p.beta;
            }
            if r + 1 < rows && config[i] != config[i + cols] {
                e += p.beta;
            }
        }
    }
    Ok(e)
}

/// Labels present in the observations, ordered by first appearance.
/// Out-of-palette labels are dominated and never proposed, which keeps the
/// optimizer equivariant under class relabelings.
fn palette(obs: &OverlapObservation) -> Vec<u8> {
    let mut pal = Vec::new();
    for &c in obs.obs_a.iter().chain(obs.obs_b.iter()) {
        if !pal.contains(&c) {
            pal.push(c);
        }
    }
    pal
}

fn initial_config(obs: &OverlapObservation) -> Vec<u8> {
    let mut config = obs.obs_a.clone();
    if let Some(line) = obs.clamp_b {
        match obs.orientation {
            Orientation::Horizontal => {
                for c in 0..obs.cols {
                    config[line * obs.cols + c] = obs.obs_b[line * obs.cols + c];
                }
            }
            Orientation::Vertical => {
                for r in 0..obs.rows {
                    config[r * obs.cols + line] = obs.obs_b[r * obs.cols + line];
                }
            }
        }
    }
    config
}

/// MAP estimate of the overlap labeling by raster-order Metropolis sweeps
/// with a geometric cooling schedule; returns the best configuration visited.
pub fn sa_map_estimate(
    obs: &OverlapObservation,
    p: &EnergyParams,
    sched: &AnnealSchedule,
) -> Result<Vec<u8>> {
    obs.validate()?;
    p.validate()?;
    sched.validate()?;
    let (rows, cols) = (obs.rows, obs.cols);
    let mut config = initial_config(obs);
    let pal = palette(obs);
    let free: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|&(r, c)| !obs.on_clamped_line(r, c))
        .collect();
    if pal.len() < 2 || free.is_empty() {
        return Ok(config);
    }

    let delta_e = |config: &[u8], r: usize, c: usize, new: u8| -> f64 {
        let i = r * cols + c;
        let old = config[i];
        let d = p.w
            * ((new != obs.obs_a[i]) as i8 - (old != obs.obs_a[i]) as i8
                + (new != obs.obs_b[i]) as i8
                - (old != obs.obs_b[i]) as i8) as f64;
        let mut pot = 0i8;
        if r > 0 {
            let n = config[i - cols];
            pot += (new != n) as i8 - (old != n) as i8;
        }
        if r + 1 < rows {
            let n = config[i + cols];
            pot += (new != n) as i8 - (old != n) as i8;
        }
        if c > 0 {
            let n = config[i - 1];
            pot += (new != n) as i8 - (old != n) as i8;
        }
        if c + 1 < cols {
            let n = config[i + 1];
            pot += (new != n) as i8 - (old != n) as i8;
        }
        d + p.beta * pot as f64
    };

    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut cur_e = energy(&config, obs, p)?;
    let mut best = config.clone();
    let mut best_e = cur_e;
    let mut stalled = 0usize;
    for sweep in 0..sched.max_sweeps {
        let t = sched.t0 * sched.c.powi(sweep as i32);
        let mut accepted = false;
        for &(r, c) in &free {
            let i = r * cols + c;
            let old = config[i];
            // uniform proposal among the other palette labels
            let mut k = rng.gen_range(0..pal.len() - 1);
            if pal[k] == old {
                k = pal.len() - 1;
            }
            let new = pal[k];
            let d = delta_e(&config, r, c, new);
            let take = if d <= 0.0 { true } else { rng.gen::<f64>() < (-d / t).exp() };
            if take {
                config[i] = new;
                cur_e += d;
                accepted = true;
                if cur_e < best_e {
                    best_e = cur_e;
                    best.copy_from_slice(&config);
                }
            }
        }
        stalled = if accepted { 0 } else { stalled + 1 };
        if stalled >= sched.stall_sweeps {
            break;
        }
    }
    Ok(best)
}

/// A subdomain rectangle restricted to one axial slice.
struct SliceRect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    labels: Vec<u8>, // row-major (y, x) within the rect
}

impl SliceRect {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[(y - self.y0) * (self.x1 - self.x0 + 1) + (x - self.x0)]
    }
}

fn slice_rect(sub: &Subdomain, labels: &LabelVolume, z: usize) -> SliceRect {
    let bx = &sub.overlap_box;
    let (ex, ey, _) = bx.extent();
    let lz = z - bx.z0;
    let mut out = Vec::with_capacity(ex * ey);
    for ly in 0..ey {
        for lx in 0..ex {
            out.push(labels.data[lx + ex * (ly + ey * lz)]);
        }
    }
    SliceRect { x0: bx.x0, y0: bx.y0, x1: bx.x1, y1: bx.y1, labels: out }
}

/// Decompose the already-covered part of `rect` into maximal rectangles by
/// merging identical covered runs across consecutive rows.
fn covered_rectangles(rect: &SliceRect, set: &[bool], nx: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut open: Vec<(usize, usize, usize)> = Vec::new(); // (x0, x1, y_start)
    let mut done = Vec::new();
    for y in rect.y0..=rect.y1 + 1 {
        let mut runs = Vec::new();
        if y <= rect.y1 {
            let mut x = rect.x0;
            while x <= rect.x1 {
                if set[x + nx * y] {
                    let start = x;
                    while x <= rect.x1 && set[x + nx * y] {
                        x += 1;
                    }
                    runs.push((start, x - 1));
                } else {
                    x += 1;
                }
            }
        }
        let mut next_open = Vec::new();
        for &(x0, x1, ys) in &open {
            if runs.contains(&(x0, x1)) {
                next_open.push((x0, x1, ys));
            } else {
                done.push((x0, ys, x1, y - 1));
            }
        }
        for &(x0, x1) in &runs {
            if !open.iter().any(|&(a, b, _)| (a, b) == (x0, x1)) {
                next_open.push((x0, x1, y));
            }
        }
        open = next_open;
    }
    done.sort_unstable_by_key(|&(x0, y0, _, _)| (y0, x0));
    done
}

/// Fuse the classified rectangles intersecting axial slice `z` into one
/// `nx * ny` label grid (x-fastest), progressing in (min_y, min_x) order.
pub fn stitch_slice(
    subimages: &[(Subdomain, LabelVolume)],
    z: usize,
    slice_dims: (usize, usize),
    p: &EnergyParams,
    sched: &AnnealSchedule,
) -> Result<Vec<u8>> {
    p.validate()?;
    sched.validate()?;
    let (nx, ny) = slice_dims;
    let mut rects: Vec<SliceRect> = subimages
        .iter()
        .filter(|(s, _)| s.overlap_box.z0 <= z && z <= s.overlap_box.z1)
        .map(|(s, l)| slice_rect(s, l, z))
        .collect();
    if rects.is_empty() {
        return Err(Error::Validation(format!("no subdomain covers slice {z}")));
    }
    rects.sort_by_key(|r| (r.y0, r.x0));

    let mut canvas = vec![Tissue::Bg.code(); nx * ny];
    let mut set = vec![false; nx * ny];
    let mut strip_counter = 0u64;
    for rect in &rects {
        let covered = covered_rectangles(rect, &set, nx);
        for &(sx0, sy0, sx1, sy1) in &covered {
            let (rows, cols) = (sy1 - sy0 + 1, sx1 - sx0 + 1);
            let orientation = if rows <= cols { Orientation::Horizontal } else { Orientation::Vertical };
            let mut obs_a = Vec::with_capacity(rows * cols);
            let mut obs_b = Vec::with_capacity(rows * cols);
            for y in sy0..=sy1 {
                for x in sx0..=sx1 {
                    obs_a.push(canvas[x + nx * y]);
                    obs_b.push(rect.get(x, y));
                }
            }
            // a side line is clamped when the territory just beyond it
            // belongs exclusively to one source
            let side_owner = |coords: &mut dyn Iterator<Item = (isize, isize)>| -> Option<bool> {
                let mut a = false;
                let mut b = false;
                for (x, y) in coords {
                    if x < 0 || y < 0 || x as usize >= nx || y as usize >= ny {
                        continue;
                    }
                    let (x, y) = (x as usize, y as usize);
                    let in_rect = rect.contains(x, y);
                    if set[x + nx * y] && !in_rect {
                        a = true;
                    }
                    if in_rect && !set[x + nx * y] {
                        b = true;
                    }
                }
                if a {
                    Some(true)
                } else if b {
                    Some(false)
                } else {
                    None
                }
            };
            let (first_side, last_side) = match orientation {
                Orientation::Horizontal => (
                    side_owner(&mut (sx0..=sx1).map(|x| (x as isize, sy0 as isize - 1))),
                    side_owner(&mut (sx0..=sx1).map(|x| (x as isize, sy1 as isize + 1))),
                ),
                Orientation::Vertical => (
                    side_owner(&mut (sy0..=sy1).map(|y| (sx0 as isize - 1, y as isize))),
                    side_owner(&mut (sy0..=sy1).map(|y| (sx1 as isize + 1, y as isize))),
                ),
            };
            let span = match orientation {
                Orientation::Horizontal => rows,
                Orientation::Vertical => cols,
            };
            let mut clamp_a = None;
            let mut clamp_b = None;
            for (side, line) in [(first_side, 0), (last_side, span - 1)] {
                match side {
                    Some(true) if clamp_a.is_none() => clamp_a = Some(line),
                    Some(false) if clamp_b.is_none() => clamp_b = Some(line),
                    _ => {}
                }
            }
            if clamp_a == clamp_b {
                clamp_b = None;
            }
            let obs = OverlapObservation { rows, cols, obs_a, obs_b, orientation, clamp_a, clamp_b };
            let fused = sa_map_estimate(&obs, p, &sched.with_seed(splitmix(sched.seed, strip_counter)))?;
            strip_counter += 1;
            for y in sy0..=sy1 {
                for x in sx0..=sx1 {
                    canvas[x + nx * y] = fused[(y - sy0) * cols + (x - sx0)];
                }
            }
        }
        // exclusive territory of the incoming rectangle
        for y in rect.y0..=rect.y1 {
            for x in rect.x0..=rect.x1 {
                if !set[x + nx * y] {
                    canvas[x + nx * y] = rect.get(x, y);
                }
            }
        }
        for y in rect.y0..=rect.y1 {
            for x in rect.x0..=rect.x1 {
                set[x + nx * y] = true;
            }
        }
    }
    if set.iter().any(|&s| !s) {
        return Err(Error::Validation(format!("subdomains do not cover slice {z}")));
    }
    Ok(canvas)
}

/// Stitch every axial slice independently (per-slice seed derived from the
/// schedule seed) and restore label-volume invariants: BG outside the mask,
/// and any in-mask BG replaced by the first covering subdomain's label.
pub fn assemble_volume(
    classified: &[(Subdomain, LabelVolume)],
    tree: &PartitionTree,
    mask: &BrainMask,
    p: &EnergyParams,
    sched: &AnnealSchedule,
) -> Result<LabelVolume> {
    if classified.len() != tree.leaves.len() {
        return Err(Error::Validation("one labeling per tree leaf required".into()));
    }
    for (sub, labels) in classified {
        if labels.dims != sub.overlap_box.extent() {
            return Err(Error::Dimension(format!(
                "subdomain {} labeling does not match its overlap box",
                sub.id
            )));
        }
    }
    let (nx, ny, nz) = tree.dims;
    if mask.dims != tree.dims {
        return Err(Error::Dimension("mask dims do not match partition".into()));
    }
    let slices: Vec<Vec<u8>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            stitch_slice(classified, z, (nx, ny), p, &sched.with_seed(splitmix(sched.seed, z as u64)))
        })
        .collect::<Result<_>>()?;

    let mut data = Vec::with_capacity(nx * ny * nz);
    for s in &slices {
        data.extend_from_slice(s);
    }
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !mask.inside(x, y, z) {
                    data[i] = Tissue::Bg.code();
                } else if data[i] == Tissue::Bg.code() {
                    for (sub, labels) in classified {
                        let bx = &sub.overlap_box;
                        if bx.contains(x, y, z) {
                            let (ex, ey, _) = bx.extent();
                            let v = labels.data[(x - bx.x0) + ex * ((y - bx.y0) + ey * (z - bx.z0))];
                            if v != Tissue::Bg.code() {
                                data[i] = v;
                                break;
                            }
                        }
                    }
                }
            }
        }
    }
    LabelVolume::new(tree.dims, data)
}
