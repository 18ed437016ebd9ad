//! Synthetic multi-channel brain phantoms with ground-truth labels.
//!
//! Nested ellipsoids (CSF shell, GM ribbon, WM core) with controllable
//! per-class means/noise, a smooth multiplicative intensity drift and
//! optional low-intensity WM streak cylinders.

use crate::error::{Error, Result};
use crate::volume::{BrainMask, Channel, Cnr, LabelVolume, MultiChannelVolume, ScalarVolume, Tissue};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Per-class intensity parameters, ordered [T1w, T2w, PDw].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassIntensity {
    pub csf: [f64; 3],
    pub gm: [f64; 3],
    pub wm: [f64; 3],
}

impl ClassIntensity {
    pub fn get(&self, t: Tissue, channel: Channel) -> f64 {
        let row = match t {
            Tissue::Csf => &self.csf,
            Tissue::Gm => &self.gm,
            Tissue::Wm => &self.wm,
            _ => panic!("phantom has no {t:?} class"),
        };
        row[match channel {
            Channel::T1w => 0,
            Channel::T2w => 1,
            Channel::Pdw => 2,
        }]
    }
}

/// Ellipsoid semi-axes in voxels, outermost (CSF shell) to innermost (WM core).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PhantomGeometry {
    pub csf_radii: [f64; 3],
    pub gm_radii: [f64; 3],
    pub wm_radii: [f64; 3],
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WmStreaks {
    pub count: usize,
    pub radius: f64,
    /// Multiplier applied to the T1w WM mean inside a streak.
    pub intensity_factor: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub seed: u64,
    pub tissue_means: ClassIntensity,
    pub tissue_stds: ClassIntensity,
    /// Peak multiplicative drift fraction, in [0, 0.5].
    pub bias_amplitude: f64,
    pub wm_streaks: WmStreaks,
    pub geometry: PhantomGeometry,
}

impl PhantomSpec {
    /// 64-cube phantom with GM/WM T1w contrast-to-noise ratio 2.
    pub fn default_64() -> PhantomSpec {
        PhantomSpec {
            dims: (64, 64, 64),
            seed: 42,
            tissue_means: ClassIntensity {
                csf: [0.12, 0.90, 0.80],
                gm: [0.50, 0.60, 0.65],
                wm: [0.70, 0.35, 0.55],
            },
            tissue_stds: ClassIntensity {
                csf: [0.10, 0.10, 0.10],
                gm: [0.10, 0.10, 0.10],
                wm: [0.10, 0.10, 0.10],
            },
            bias_amplitude: 0.10,
            wm_streaks: WmStreaks { count: 3, radius: 2.0, intensity_factor: 0.85 },
            geometry: PhantomGeometry {
                csf_radii: [30.0, 28.0, 26.0],
                gm_radii: [26.0, 24.0, 22.0],
                wm_radii: [18.0, 16.0, 14.0],
            },
        }
    }

    /// Same phantom with all noise stds scaled so the GM/WM T1w CNR is `cnr`.
    pub fn with_t1w_cnr(mut self, cnr: f64) -> PhantomSpec {
        let contrast = (self.tissue_means.gm[0] - self.tissue_means.wm[0]).abs();
        let std = contrast / cnr;
        self.tissue_stds = ClassIntensity { csf: [std; 3], gm: [std; 3], wm: [std; 3] };
        self
    }

    fn validate(&self) -> Result<()> {
        let m = &self.tissue_means;
        for row in [m.csf, m.gm, m.wm] {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation("tissue means must lie in [0,1]".into()));
            }
        }
        let s = &self.tissue_stds;
        for row in [s.csf, s.gm, s.wm] {
            if row.iter().any(|v| *v < 0.0) {
                return Err(Error::Validation("tissue stds must be >= 0".into()));
            }
        }
        if !(0.0..1.0).contains(&self.bias_amplitude) || self.bias_amplitude > 0.5 {
            return Err(Error::Validation("bias_amplitude must lie in [0, 0.5]".into()));
        }
        let g = &self.geometry;
        for ax in 0..3 {
            if !(g.csf_radii[ax] > g.gm_radii[ax] && g.gm_radii[ax] > g.wm_radii[ax] && g.wm_radii[ax] > 0.0) {
                return Err(Error::Validation("radii must be nested: CSF > GM > WM > 0".into()));
            }
        }
        let dims = [self.dims.0 as f64, self.dims.1 as f64, self.dims.2 as f64];
        for ax in 0..3 {
            if 2.0 * g.csf_radii[ax] + 1.0 > dims[ax] {
                return Err(Error::Dimension("dims too small to contain geometry".into()));
            }
        }
        Ok(())
    }
}

fn inside_ellipsoid(x: f64, y: f64, z: f64, c: (f64, f64, f64), r: &[f64; 3]) -> bool {
    let dx = (x - c.0) / r[0];
    let dy = (y - c.1) / r[1];
    let dz = (z - c.2) / r[2];
    dx * dx + dy * dy + dz * dz <= 1.0
}

/// Generate the phantom volumes and their ground-truth labels.
///
/// The output is a pure function of the spec: generation walks voxels in a
/// fixed raster order with a seeded generator.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(MultiChannelVolume, LabelVolume)> {
    spec.validate()?;
    let dims = spec.dims;
    let (nx, ny, nz) = dims;
    let center = ((nx - 1) as f64 / 2.0, (ny - 1) as f64 / 2.0, (nz - 1) as f64 / 2.0);
    let g = &spec.geometry;

    let mut labels = LabelVolume::filled(dims, Tissue::Bg);
    let mut mask_data = vec![false; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (fx, fy, fz) = (x as f64, y as f64, z as f64);
                let t = if inside_ellipsoid(fx, fy, fz, center, &g.wm_radii) {
                    Tissue::Wm
                } else if inside_ellipsoid(fx, fy, fz, center, &g.gm_radii) {
                    Tissue::Gm
                } else if inside_ellipsoid(fx, fy, fz, center, &g.csf_radii) {
                    Tissue::Csf
                } else {
                    Tissue::Bg
                };
                if t != Tissue::Bg {
                    labels.set(x, y, z, t);
                    mask_data[x + nx * (y + ny * z)] = true;
                }
            }
        }
    }
    let mask = BrainMask::new(dims, mask_data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // streak cylinders run along z at random (x,y) positions within the WM extent
    let streaks: Vec<(f64, f64)> = (0..spec.wm_streaks.count)
        .map(|_| {
            let sx = center.0 + (rng.gen::<f64>() * 2.0 - 1.0) * g.wm_radii[0];
            let sy = center.1 + (rng.gen::<f64>() * 2.0 - 1.0) * g.wm_radii[1];
            (sx, sy)
        })
        .collect();
    let in_streak = |x: usize, y: usize| -> bool {
        let r2 = spec.wm_streaks.radius * spec.wm_streaks.radius;
        streaks.iter().any(|&(sx, sy)| {
            let dx = x as f64 - sx;
            let dy = y as f64 - sy;
            dx * dx + dy * dy <= r2
        })
    };

    let mut vols = Vec::new();
    for channel in Channel::ALL {
        let mut vol = ScalarVolume::zeros(dims, (1.0, 1.0, 1.0));
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if !mask.inside(x, y, z) {
                        continue;
                    }
                    let t = labels.get(x, y, z);
                    let mut mean = spec.tissue_means.get(t, channel);
                    if channel == Channel::T1w && t == Tissue::Wm && in_streak(x, y) {
                        mean *= spec.wm_streaks.intensity_factor;
                    }
                    // separable low-order drift, peak deviation = bias_amplitude
                    let xn = 2.0 * x as f64 / (nx - 1) as f64 - 1.0;
                    let bias = 1.0 + spec.bias_amplitude * xn;
                    let std = spec.tissue_stds.get(t, channel);
                    let noise: f64 = if std > 0.0 {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        n * std
                    } else {
                        0.0
                    };
                    vol.set(x, y, z, ((mean * bias + noise).clamp(0.0, 1.0)) as f32);
                }
            }
        }
        vols.push(vol);
    }
    let mut it = vols.into_iter();
    let mc = MultiChannelVolume::new(it.next(), it.next(), it.next(), mask)?;
    Ok((mc, labels))
}

pub fn phantom_cnr(spec: &PhantomSpec, channel: Channel) -> Result<Cnr> {
    let mu_gm = spec.tissue_means.get(Tissue::Gm, channel);
    let mu_wm = spec.tissue_means.get(Tissue::Wm, channel);
    let s_gm = spec.tissue_stds.get(Tissue::Gm, channel);
    let s_wm = spec.tissue_stds.get(Tissue::Wm, channel);
    let pooled = ((s_gm * s_gm + s_wm * s_wm) / 2.0).sqrt();
    if pooled == 0.0 {
        if mu_gm == mu_wm {
            return Err(Error::Degenerate("zero noise and equal GM/WM means".into()));
        }
        return Ok(Cnr::Infinite);
    }
    Ok(Cnr::Finite((mu_wm - mu_gm).abs() / pooled))
}

/// Synthesize a flawed initialization from ground truth: relabel the outer
/// `erode_csf_radius` shells of the CSF as GM and swap a seeded random
/// fraction of GM/WM voxels.
pub fn degrade_labels(
    gt: &LabelVolume,
    mask: &BrainMask,
    erode_csf_radius: usize,
    swap_fraction: f64,
    seed: u64,
) -> LabelVolume {
    let mut out = gt.clone();
    let (nx, ny, nz) = gt.dims;
    for _ in 0..erode_csf_radius {
        let cur = out.clone();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if cur.get(x, y, z) != Tissue::Csf {
                        continue;
                    }
                    let mut boundary = false;
                    let neighbors: [(i64, i64, i64); 6] =
                        [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
                    for (dx, dy, dz) in neighbors {
                        let (px, py, pz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if px < 0 || py < 0 || pz < 0 || px >= nx as i64 || py >= ny as i64 || pz >= nz as i64 {
                            boundary = true;
                            break;
                        }
                        let n = cur.get(px as usize, py as usize, pz as usize);
                        if n != Tissue::Csf && n != Tissue::Bg {
                            boundary = true;
                            break;
                        }
                    }
                    if boundary {
                        out.set(x, y, z, Tissue::Gm);
                    }
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.inside(x, y, z) {
                    continue;
                }
                let t = out.get(x, y, z);
                if (t == Tissue::Gm || t == Tissue::Wm) && rng.gen::<f64>() < swap_fraction {
                    out.set(x, y, z, if t == Tissue::Gm { Tissue::Wm } else { Tissue::Gm });
                }
            }
        }
    }
    out
}
