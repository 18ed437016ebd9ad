//! End-to-end orchestration: load → normalize → (MWM pre-extraction) →
//! partition → per-subdomain KFDA → stitch → quality report.

use crate::error::{Error, Result};
use crate::kfda::{classify_subdomain, splitmix, subdomain_seed, KfdaParams};
use crate::mixture::{classify_myelin, difference_image, gmm2_em, median_split_init, Gmm2};
use crate::partition::{partition_volume, subdomain_stats, PartitionParams, PartitionTree, Subdomain};
use crate::quality::{mssim, render_classified, AgeProfile, QualityReport, SsimParams};
use crate::stitch::{assemble_volume, AnnealSchedule, EnergyParams};
use crate::volume::{
    normalize_channels, BrainMask, Channel, LabelVolume, MultiChannelVolume, ScalarVolume, Tissue,
};
use crate::{nifti, quality};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchParams {
    #[serde(default)]
    pub energy: EnergyParams,
    #[serde(default)]
    pub schedule: AnnealSchedule,
}

impl Default for StitchParams {
    fn default() -> Self {
        StitchParams { energy: EnergyParams::default(), schedule: AnnealSchedule::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub t1w: PathBuf,
    #[serde(default)]
    pub t2w: Option<PathBuf>,
    #[serde(default)]
    pub pdw: Option<PathBuf>,
    pub mask: PathBuf,
    pub init_labels: PathBuf,
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    #[serde(default = "default_profile")]
    pub age_profile: AgeProfile,
    #[serde(default)]
    pub partition: PartitionParams,
    #[serde(default)]
    pub kfda: KfdaParams,
    #[serde(default)]
    pub stitch: StitchParams,
    #[serde(default)]
    pub ssim: SsimParams,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_refine_iters")]
    pub max_refine_iters: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub write_ssim_map: bool,
}

fn default_profile() -> AgeProfile {
    AgeProfile::Older
}
fn default_refine_iters() -> usize {
    1
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.max_refine_iters) {
            return Err(Error::Config("max_refine_iters must be in 1..=5".into()));
        }
        self.partition.validate()?;
        self.stitch.energy.validate()?;
        self.stitch.schedule.validate()?;
        self.ssim.validate()?;
        let mut paths = vec![&self.t1w, &self.mask, &self.init_labels];
        paths.extend(self.t2w.iter());
        paths.extend(self.pdw.iter());
        paths.extend(self.ground_truth.iter());
        for p in paths {
            if !p.exists() {
                return Err(Error::Config(format!("input file not found: {}", p.display())));
            }
        }
        Ok(())
    }
}

pub struct PipelineOutput {
    pub labels: LabelVolume,
    pub tree: PartitionTree,
    pub report: QualityReport,
}

fn load_inputs(cfg: &PipelineConfig) -> Result<(MultiChannelVolume, LabelVolume, Option<LabelVolume>)> {
    let t1w = nifti::load_volume(&cfg.t1w)?;
    let t2w = cfg.t2w.as_deref().map(nifti::load_volume).transpose()?;
    let pdw = cfg.pdw.as_deref().map(nifti::load_volume).transpose()?;
    let mask = BrainMask::from_scalar(&nifti::load_volume(&cfg.mask)?);
    let volume = MultiChannelVolume::new(Some(t1w), t2w, pdw, mask)?;
    let init = nifti::load_labels(&cfg.init_labels)?;
    if init.dims != volume.mask.dims {
        return Err(Error::Dimension("initial labels do not match the volumes".into()));
    }
    let gt = cfg.ground_truth.as_deref().map(nifti::load_labels).transpose()?;
    if let Some(g) = &gt {
        if g.dims != volume.mask.dims {
            return Err(Error::Dimension("ground truth does not match the volumes".into()));
        }
    }
    Ok((volume, init, gt))
}

/// MSSIM reference modality for whole-volume scoring: T1w for older brains,
/// T2w (higher GM/WM contrast) when available for the younger profiles.
fn mssim_reference(volume: &MultiChannelVolume, profile: AgeProfile) -> ScalarVolume {
    let pick = match profile {
        AgeProfile::Older => Channel::T1w,
        AgeProfile::Infant | AgeProfile::Early => Channel::T2w,
    };
    volume
        .channel(pick)
        .or_else(|| volume.channel(Channel::T1w))
        .expect("t1w channel is mandatory")
        .clone()
}

fn classify_all(
    volume: &MultiChannelVolume,
    tree: &PartitionTree,
    init: &LabelVolume,
    kfda: &KfdaParams,
    seed: u64,
    events: &mut Vec<String>,
) -> Result<Vec<(Subdomain, LabelVolume)>> {
    let results: Vec<(Subdomain, LabelVolume, Vec<String>)> = tree
        .leaves
        .par_iter()
        .map(|sub| {
            let out = classify_subdomain(volume, sub, init, kfda, subdomain_seed(seed, sub.id))?;
            Ok((sub.clone(), out.labels, out.events))
        })
        .collect::<Result<_>>()?;
    let mut classified = Vec::with_capacity(results.len());
    for (sub, labels, ev) in results {
        events.extend(ev);
        classified.push((sub, labels));
    }
    Ok(classified)
}

/// Run the full classification pipeline and write `labels.nii`,
/// `partition.json` and `report.json` into the output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let (volume, mut init, gt) = load_inputs(cfg)?;
    let volume = normalize_channels(&volume)?;
    let mut events = Vec::new();

    // early-infancy profile: EM-extract myelinated WM first and mask it
    let mut myelin_model: Option<Gmm2> = None;
    if cfg.age_profile == AgeProfile::Early {
        let pdw = volume
            .channel(Channel::Pdw)
            .ok_or_else(|| Error::Config("early profile requires the PDw channel".into()))?;
        let t1w = volume.channel(Channel::T1w).expect("t1w channel is mandatory");
        let diff = difference_image(pdw, t1w, &volume.mask)?;
        let values: Vec<f64> = diff
            .data
            .iter()
            .zip(volume.mask.data.iter())
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v as f64)
            .collect();
        let model = gmm2_em(&values, &median_split_init(&values)?, 1e-8, 200)?;
        let myelin = classify_myelin(&diff, &volume.mask, &model)?;
        let n: usize = myelin.count(Tissue::Mwm);
        for (dst, src) in init.data.iter_mut().zip(myelin.data.iter()) {
            if *src == Tissue::Mwm.code() {
                *dst = Tissue::Mwm.code();
            }
        }
        events.push(format!("myelinated WM pre-extraction marked {n} voxels"));
        myelin_model = Some(model);
    }

    let t1w = volume.channel(Channel::T1w).expect("t1w channel is mandatory");
    let mut tree = partition_volume(t1w, &volume.mask, &cfg.partition)?;
    for sub in tree.leaves.iter_mut() {
        let (mean, cnr) = subdomain_stats(t1w, &init, sub)?;
        sub.mean_intensity = Some(mean);
        sub.cnr = cnr;
    }

    let reference = mssim_reference(&volume, cfg.age_profile);
    let score = |labels: &LabelVolume| -> Result<f64> {
        let painted = render_classified(labels, &reference, &volume.mask)?;
        mssim(&reference, &painted, &volume.mask, &cfg.ssim)
    };
    let mssim_before = score(&init)?;

    let run_once = |init: &LabelVolume, round: u64, events: &mut Vec<String>| -> Result<LabelVolume> {
        let classified =
            classify_all(&volume, &tree, init, &cfg.kfda, splitmix(cfg.seed, round), events)?;
        let sched = cfg.stitch.schedule.with_seed(splitmix(cfg.seed, round ^ 0xA5A5));
        assemble_volume(&classified, &tree, &volume.mask, &cfg.stitch.energy, &sched)
    };

    let mut best_labels = run_once(&init, 0, &mut events)?;
    let mut best_mssim = score(&best_labels)?;
    for round in 1..cfg.max_refine_iters as u64 {
        let candidate = run_once(&best_labels, round, &mut events)?;
        let m = score(&candidate)?;
        if m > best_mssim + 1e-4 {
            events.push(format!("refinement round {round}: MSSIM improved to {m:.6}"));
            best_labels = candidate;
            best_mssim = m;
        } else {
            events.push(format!(
                "refinement round {round}: MSSIM {m:.6} did not improve on {best_mssim:.6}; reverted"
            ));
            break;
        }
    }

    let dice_scores = gt
        .as_ref()
        .map(|g| -> Result<BTreeMap<String, f64>> {
            let mut m = BTreeMap::new();
            for t in [Tissue::Csf, Tissue::Gm, Tissue::Wm, Tissue::Mwm] {
                m.insert(t.name().to_string(), quality::dice(&best_labels, g, t)?);
            }
            Ok(m)
        })
        .transpose()?;

    let counts = best_labels.class_counts();
    let class_volumes: BTreeMap<String, usize> = Tissue::ALL
        .iter()
        .map(|t| (t.name().to_string(), counts[t.code() as usize]))
        .collect();
    let cnr_map = tree.leaves.iter().map(|s| (s.id, s.cnr)).collect();

    let report = QualityReport {
        mssim_before,
        mssim_after: best_mssim,
        dice: dice_scores,
        class_volumes,
        cnr_map,
        myelin_model,
        events,
    };

    std::fs::create_dir_all(&cfg.output_dir)?;
    nifti::save_labels(&best_labels, &cfg.output_dir.join("labels.nii"))?;
    std::fs::write(
        cfg.output_dir.join("partition.json"),
        serde_json::to_string_pretty(&tree)?,
    )?;
    std::fs::write(
        cfg.output_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    if cfg.write_ssim_map {
        let painted = render_classified(&best_labels, &reference, &volume.mask)?;
        let map = ssim_volume(&reference, &painted, &volume.mask, &cfg.ssim)?;
        nifti::save_volume(&map, &cfg.output_dir.join("ssim_map.nii"))?;
    }

    Ok(PipelineOutput { labels: best_labels, tree, report })
}

/// Stack the per-slice SSIM maps into a volume; excluded centers become 0.
pub fn ssim_volume(
    reference: &ScalarVolume,
    test: &ScalarVolume,
    mask: &BrainMask,
    p: &SsimParams,
) -> Result<ScalarVolume> {
    let mut p = p.clone();
    if p.dynamic_range.is_none() {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for (v, &m) in reference.data.iter().zip(mask.data.iter()) {
            if m {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        p.dynamic_range = Some((hi - lo) as f64);
    }
    let (nx, ny, nz) = reference.dims;
    let mut data = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for v in quality::ssim_map(reference, test, mask, z, &p)? {
            data.push(if v.is_nan() { 0.0 } else { v as f32 });
        }
    }
    ScalarVolume::new(reference.dims, reference.voxel_size, data)
}
