//! Volume data model: scalar/multi-channel intensity grids, brain masks,
//! tissue label volumes and axis-aligned boxes.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Tissue label codes. The numeric codes are part of the on-disk format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tissue {
    Bg = 0,
    Csf = 1,
    Gm = 2,
    Wm = 3,
    Mwm = 4,
}

impl Tissue {
    pub const ALL: [Tissue; 5] = [Tissue::Bg, Tissue::Csf, Tissue::Gm, Tissue::Wm, Tissue::Mwm];

    pub fn from_code(code: u8) -> Option<Tissue> {
        match code {
            0 => Some(Tissue::Bg),
            1 => Some(Tissue::Csf),
            2 => Some(Tissue::Gm),
            3 => Some(Tissue::Wm),
            4 => Some(Tissue::Mwm),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Bg => "BG",
            Tissue::Csf => "CSF",
            Tissue::Gm => "GM",
            Tissue::Wm => "WM",
            Tissue::Mwm => "MWM",
        }
    }
}

/// Imaging channel identifiers, in their fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    T1w,
    T2w,
    Pdw,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::T1w, Channel::T2w, Channel::Pdw];
}


/// Contrast-to-noise ratio between GM and WM; infinite when the pooled
/// noise std is zero but the means differ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum Cnr {
    Finite(f64),
    Infinite,
}

/// Inclusive axis-aligned voxel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Box3 {
    pub x0: usize,
    pub y0: usize,
    pub z0: usize,
    pub x1: usize,
    pub y1: usize,
    pub z1: usize,
}

impl Box3 {
    pub fn new(x0: usize, y0: usize, z0: usize, x1: usize, y1: usize, z1: usize) -> Box3 {
        Box3 { x0, y0, z0, x1, y1, z1 }
    }

    pub fn full(dims: (usize, usize, usize)) -> Box3 {
        Box3::new(0, 0, 0, dims.0 - 1, dims.1 - 1, dims.2 - 1)
    }

    pub fn extent(&self) -> (usize, usize, usize) {
        (self.x1 - self.x0 + 1, self.y1 - self.y0 + 1, self.z1 - self.z0 + 1)
    }

    pub fn volume(&self) -> usize {
        let (ex, ey, ez) = self.extent();
        ex * ey * ez
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1 && z >= self.z0 && z <= self.z1
    }

    pub fn within(&self, dims: (usize, usize, usize)) -> bool {
        self.x0 <= self.x1
            && self.y0 <= self.y1
            && self.z0 <= self.z1
            && self.x1 < dims.0
            && self.y1 < dims.1
            && self.z1 < dims.2
    }

    pub fn intersect(&self, other: &Box3) -> Option<Box3> {
        let b = Box3 {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            z0: self.z0.max(other.z0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            z1: self.z1.min(other.z1),
        };
        if b.x0 <= b.x1 && b.y0 <= b.y1 && b.z0 <= b.z1 {
            Some(b)
        } else {
            None
        }
    }

    /// Iterate voxel coordinates in raster (x fastest) order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let b = *self;
        (b.z0..=b.z1).flat_map(move |z| {
            (b.y0..=b.y1).flat_map(move |y| (b.x0..=b.x1).map(move |x| (x, y, z)))
        })
    }
}

/// A 3D scalar intensity grid with voxel-size metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub dims: (usize, usize, usize),
    pub voxel_size: (f32, f32, f32),
    pub data: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(dims: (usize, usize, usize), voxel_size: (f32, f32, f32), data: Vec<f32>) -> Result<ScalarVolume> {
        if dims.0 < 1 || dims.1 < 1 || dims.2 < 1 {
            return Err(Error::Dimension("all dims must be >= 1".into()));
        }
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Dimension(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite intensity".into()));
        }
        Ok(ScalarVolume { dims, voxel_size, data })
    }

    pub fn zeros(dims: (usize, usize, usize), voxel_size: (f32, f32, f32)) -> ScalarVolume {
        ScalarVolume { dims, voxel_size, data: vec![0.0; dims.0 * dims.1 * dims.2] }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Per-voxel inside/outside brain flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrainMask {
    pub dims: (usize, usize, usize),
    pub data: Vec<bool>,
}

impl BrainMask {
    pub fn new(dims: (usize, usize, usize), data: Vec<bool>) -> Result<BrainMask> {
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Dimension("mask length does not match dims".into()));
        }
        if !data.iter().any(|&b| b) {
            return Err(Error::Validation("mask has no interior voxel".into()));
        }
        Ok(BrainMask { dims, data })
    }

    pub fn all(dims: (usize, usize, usize)) -> BrainMask {
        BrainMask { dims, data: vec![true; dims.0 * dims.1 * dims.2] }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn inside(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn from_scalar(vol: &ScalarVolume) -> BrainMask {
        BrainMask { dims: vol.dims, data: vol.data.iter().map(|&v| v > 0.5).collect() }
    }
}

/// Per-voxel tissue codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: (usize, usize, usize),
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: (usize, usize, usize), data: Vec<u8>) -> Result<LabelVolume> {
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Dimension("label length does not match dims".into()));
        }
        if let Some(bad) = data.iter().find(|&&c| Tissue::from_code(c).is_none()) {
            return Err(Error::Validation(format!("invalid label code {bad}")));
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn filled(dims: (usize, usize, usize), label: Tissue) -> LabelVolume {
        LabelVolume { dims, data: vec![label.code(); dims.0 * dims.1 * dims.2] }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> Tissue {
        Tissue::from_code(self.data[self.index(x, y, z)]).expect("validated code")
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, t: Tissue) {
        let i = self.index(x, y, z);
        self.data[i] = t.code();
    }

    /// Voxel count per class, indexed by tissue code. Sums to nx*ny*nz.
    pub fn class_counts(&self) -> [usize; 5] {
        let mut counts = [0usize; 5];
        for &c in &self.data {
            counts[c as usize] += 1;
        }
        counts
    }

    pub fn count(&self, t: Tissue) -> usize {
        self.data.iter().filter(|&&c| c == t.code()).count()
    }
}

/// Per-voxel multi-channel intensity, normalized to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityVector {
    comps: [f64; 3],
    len: usize,
}

impl IntensityVector {
    pub fn new(comps: &[f64]) -> IntensityVector {
        assert!(comps.len() >= 1 && comps.len() <= 3);
        let mut c = [0.0; 3];
        c[..comps.len()].copy_from_slice(comps);
        IntensityVector { comps: c, len: comps.len() }
    }

    #[inline]
    pub fn components(&self) -> &[f64] {
        &self.comps[..self.len]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn dot(&self, other: &IntensityVector) -> f64 {
        self.comps[0] * other.comps[0] + self.comps[1] * other.comps[1] + self.comps[2] * other.comps[2]
    }

    #[inline]
    pub fn dist_sq(&self, other: &IntensityVector) -> f64 {
        let d0 = self.comps[0] - other.comps[0];
        let d1 = self.comps[1] - other.comps[1];
        let d2 = self.comps[2] - other.comps[2];
        d0 * d0 + d1 * d1 + d2 * d2
    }
}

/// Ordered multi-channel volume plus brain mask. All grids share dims.
#[derive(Debug, Clone)]
pub struct MultiChannelVolume {
    pub t1w: Option<ScalarVolume>,
    pub t2w: Option<ScalarVolume>,
    pub pdw: Option<ScalarVolume>,
    pub mask: BrainMask,
}

impl MultiChannelVolume {
    pub fn new(
        t1w: Option<ScalarVolume>,
        t2w: Option<ScalarVolume>,
        pdw: Option<ScalarVolume>,
        mask: BrainMask,
    ) -> Result<MultiChannelVolume> {
        let vol = MultiChannelVolume { t1w, t2w, pdw, mask };
        if vol.channels().is_empty() {
            return Err(Error::Validation("at least one channel required".into()));
        }
        let dims = vol.mask.dims;
        for (_, ch) in vol.channel_volumes() {
            if ch.dims != dims {
                return Err(Error::Dimension("channel dims do not match mask".into()));
            }
        }
        Ok(vol)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.mask.dims
    }

    pub fn channel(&self, c: Channel) -> Option<&ScalarVolume> {
        match c {
            Channel::T1w => self.t1w.as_ref(),
            Channel::T2w => self.t2w.as_ref(),
            Channel::Pdw => self.pdw.as_ref(),
        }
    }

    /// Present channels in fixed order.
    pub fn channels(&self) -> Vec<Channel> {
        Channel::ALL.iter().copied().filter(|&c| self.channel(c).is_some()).collect()
    }

    pub fn channel_volumes(&self) -> Vec<(Channel, &ScalarVolume)> {
        Channel::ALL
            .iter()
            .copied()
            .filter_map(|c| self.channel(c).map(|v| (c, v)))
            .collect()
    }

    /// Intensity vector at a voxel, over the given channel subset.
    pub fn intensity_at(&self, channels: &[Channel], x: usize, y: usize, z: usize) -> IntensityVector {
        let mut comps = [0.0f64; 3];
        let mut n = 0;
        for &c in channels {
            if let Some(v) = self.channel(c) {
                comps[n] = v.get(x, y, z) as f64;
                n += 1;
            }
        }
        IntensityVector::new(&comps[..n])
    }
}

/// Crop a multi-channel volume (and its mask) to `bx`.
pub fn extract_subvolume(vol: &MultiChannelVolume, bx: &Box3) -> Result<MultiChannelVolume> {
    let dims = vol.dims();
    if !bx.within(dims) {
        return Err(Error::Dimension(format!("box {bx:?} out of bounds for dims {dims:?}")));
    }
    let (ex, ey, ez) = bx.extent();
    let crop = |src: &ScalarVolume| -> ScalarVolume {
        let mut data = Vec::with_capacity(ex * ey * ez);
        for (x, y, z) in bx.iter() {
            data.push(src.get(x, y, z));
        }
        ScalarVolume { dims: (ex, ey, ez), voxel_size: src.voxel_size, data }
    };
    let mut mdata = Vec::with_capacity(ex * ey * ez);
    for (x, y, z) in bx.iter() {
        mdata.push(vol.mask.inside(x, y, z));
    }
    Ok(MultiChannelVolume {
        t1w: vol.t1w.as_ref().map(&crop),
        t2w: vol.t2w.as_ref().map(&crop),
        pdw: vol.pdw.as_ref().map(&crop),
        mask: BrainMask { dims: (ex, ey, ez), data: mdata },
    })
}

/// Nearest-rank percentile of in-mask intensities, p in [0, 100].
fn percentile(sorted: &[f32], p: f64) -> f32 {
    let idx = (p / 100.0 * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Map each channel so the in-mask 1st/99th percentiles land on 0/1,
/// clamp to [0, 1] and zero everything outside the mask.
pub fn normalize_channels(vol: &MultiChannelVolume) -> Result<MultiChannelVolume> {
    let mask = &vol.mask;
    let normalize_one = |src: &ScalarVolume| -> Result<ScalarVolume> {
        let mut vals: Vec<f32> = src
            .data
            .iter()
            .zip(mask.data.iter())
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = percentile(&vals, 1.0);
        let hi = percentile(&vals, 99.0);
        if hi <= lo {
            return Err(Error::Degenerate("constant channel: zero in-mask range".into()));
        }
        let scale = 1.0 / (hi - lo) as f64;
        let data = src
            .data
            .iter()
            .zip(mask.data.iter())
            .map(|(&v, &m)| {
                if m {
                    (((v - lo) as f64 * scale).clamp(0.0, 1.0)) as f32
                } else {
                    0.0
                }
            })
            .collect();
        Ok(ScalarVolume { dims: src.dims, voxel_size: src.voxel_size, data })
    };
    Ok(MultiChannelVolume {
        t1w: vol.t1w.as_ref().map(&normalize_one).transpose()?,
        t2w: vol.t2w.as_ref().map(&normalize_one).transpose()?,
        pdw: vol.pdw.as_ref().map(&normalize_one).transpose()?,
        mask: mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_channel(dims: (usize, usize, usize), data: Vec<f32>) -> MultiChannelVolume {
        let vol = ScalarVolume::new(dims, (1.0, 1.0, 1.0), data).unwrap();
        MultiChannelVolume::new(Some(vol), None, None, BrainMask::all(dims)).unwrap()
    }

    #[test]
    fn extract_full_volume_is_identity() {
        let dims = (4, 3, 2);
        let data: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let vol = single_channel(dims, data.clone());
        let out = extract_subvolume(&vol, &Box3::full(dims)).unwrap();
        assert_eq!(out.t1w.unwrap().data, data);
        assert_eq!(out.mask.count(), 24);
    }

    #[test]
    fn extract_single_voxel() {
        let dims = (3, 3, 3);
        let data: Vec<f32> = (0..27).map(|i| i as f32).collect();
        let vol = single_channel(dims, data);
        let out = extract_subvolume(&vol, &Box3::new(0, 0, 0, 0, 0, 0)).unwrap();
        assert_eq!(out.t1w.unwrap().data, vec![0.0]);
    }

    #[test]
    fn extract_offset_matches_source() {
        let dims = (4, 4, 4);
        let data: Vec<f32> = (0..64).map(|i| i as f32).collect();
        let vol = single_channel(dims, data);
        let bx = Box3::new(1, 2, 3, 2, 3, 3);
        let out = extract_subvolume(&vol, &bx).unwrap();
        let t1 = out.t1w.unwrap();
        let src = vol.t1w.unwrap();
        for (i, (x, y, z)) in bx.iter().enumerate() {
            assert_eq!(t1.data[i], src.get(x, y, z));
        }
    }

    #[test]
    fn extract_out_of_bounds_rejected() {
        let vol = single_channel((3, 3, 3), vec![0.0; 27]);
        let err = extract_subvolume(&vol, &Box3::new(0, 0, 0, 3, 2, 2));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn extract_composes() {
        let dims = (6, 6, 6);
        let data: Vec<f32> = (0..216).map(|i| (i * 7 % 31) as f32).collect();
        let vol = single_channel(dims, data);
        let outer = Box3::new(1, 1, 1, 4, 4, 4);
        let inner_rel = Box3::new(1, 0, 2, 3, 2, 3);
        let composed = Box3::new(2, 1, 3, 4, 3, 4);
        let two_step = extract_subvolume(&extract_subvolume(&vol, &outer).unwrap(), &inner_rel).unwrap();
        let one_step = extract_subvolume(&vol, &composed).unwrap();
        assert_eq!(two_step.t1w.unwrap().data, one_step.t1w.unwrap().data);
    }

    #[test]
    fn normalize_two_value_channel() {
        let dims = (4, 4, 4);
        let data: Vec<f32> = (0..64).map(|i| if i < 32 { 10.0 } else { 20.0 }).collect();
        let vol = single_channel(dims, data);
        let out = normalize_channels(&vol).unwrap();
        for &v in &out.t1w.unwrap().data {
            assert!(v == 0.0 || v == 1.0);
        }
    }

    #[test]
    fn normalize_preserves_order_and_range() {
        let dims = (4, 4, 4);
        let data: Vec<f32> = (0..64).map(|i| (i as f32).sin() * 50.0 + 100.0).collect();
        let vol = single_channel(dims, data.clone());
        let out = normalize_channels(&vol).unwrap();
        let nd = out.t1w.unwrap().data;
        for &v in &nd {
            assert!((0.0..=1.0).contains(&v));
        }
        for i in 0..64 {
            for j in 0..64 {
                if data[i] < data[j] {
                    assert!(nd[i] <= nd[j]);
                }
            }
        }
    }

    #[test]
    fn normalize_constant_channel_rejected() {
        let vol = single_channel((3, 3, 3), vec![5.0; 27]);
        assert!(matches!(normalize_channels(&vol), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalize_is_idempotent() {
        let dims = (8, 8, 8);
        let data: Vec<f32> = (0..512).map(|i| ((i * 37 % 101) as f32) * 0.7 - 12.0).collect();
        let vol = single_channel(dims, data);
        let once = normalize_channels(&vol).unwrap();
        let twice = normalize_channels(&once).unwrap();
        let a = once.t1w.unwrap();
        let b = twice.t1w.unwrap();
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn label_class_counts_sum_to_volume() {
        let mut lv = LabelVolume::filled((3, 3, 3), Tissue::Bg);
        lv.set(0, 0, 0, Tissue::Csf);
        lv.set(1, 1, 1, Tissue::Wm);
        let counts = lv.class_counts();
        assert_eq!(counts.iter().sum::<usize>(), 27);
        assert_eq!(counts[Tissue::Csf.code() as usize], 1);
        assert_eq!(counts[Tissue::Wm.code() as usize], 1);
    }

    #[test]
    fn invalid_label_code_rejected() {
        assert!(LabelVolume::new((1, 1, 2), vec![0, 7]).is_err());
    }

    #[test]
    fn scalar_volume_rejects_nan() {
        assert!(ScalarVolume::new((1, 1, 2), (1.0, 1.0, 1.0), vec![0.0, f32::NAN]).is_err());
    }
}
