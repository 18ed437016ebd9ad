//! Command-line interface for the brain-tissue classification toolkit.

use clap::{Parser, Subcommand};
use kfdaseg::error::Result;
use kfdaseg::partition::{partition_volume, PartitionParams, PartitionTree};
use kfdaseg::phantom::{degrade_labels, generate_phantom, PhantomSpec};
use kfdaseg::pipeline::{run_pipeline, PipelineConfig, StitchParams};
use kfdaseg::quality::{self, SsimParams};
use kfdaseg::stitch::assemble_volume;
use kfdaseg::volume::{BrainMask, Box3, LabelVolume, ScalarVolume, Tissue};
use kfdaseg::nifti;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "kfdaseg", version, about = "Local KFDA brain-tissue classification")]
struct Cli {
    /// Worker threads for subdomain classification and slice stitching
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print progress information
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-channel phantom with known ground truth
    Phantom {
        /// Output directory for t1w/t2w/pdw/mask/phantom_gt volumes
        #[arg(long)]
        out_dir: PathBuf,
        /// T1w GM/WM contrast-to-noise ratio
        #[arg(long, default_value_t = 2.0)]
        cnr: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Also write init_labels.nii: relabel this many CSF shells as GM
        #[arg(long, default_value_t = 0)]
        degrade_erode: usize,
        /// Also write init_labels.nii: swap this fraction of GM/WM voxels
        #[arg(long, default_value_t = 0.0)]
        degrade_swap: f64,
    },
    /// Partition a masked volume and write the tree as JSON
    Partition {
        #[arg(long)]
        t1w: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with partition parameters (defaults when omitted)
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Classify and stitch without the quality report
    Classify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-stitch a labeling along the subdomains of a partition tree
    Stitch {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mean structural similarity between two volumes
    Ssim {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Per-class Dice overlap between two labelings
    Dice {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Run the full classification pipeline from a JSON config
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_mask(path: &PathBuf) -> Result<BrainMask> {
    Ok(BrainMask::from_scalar(&nifti::load_volume(path)?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { out_dir, cnr, seed, degrade_erode, degrade_swap } => {
            let mut spec = PhantomSpec::default_64().with_t1w_cnr(cnr);
            spec.seed = seed;
            let (vol, gt) = generate_phantom(&spec)?;
            std::fs::create_dir_all(&out_dir)?;
            nifti::save_volume(vol.t1w.as_ref().unwrap(), &out_dir.join("t1w.nii"))?;
            nifti::save_volume(vol.t2w.as_ref().unwrap(), &out_dir.join("t2w.nii"))?;
            nifti::save_volume(vol.pdw.as_ref().unwrap(), &out_dir.join("pdw.nii"))?;
            let mask_vol = ScalarVolume::new(
                spec.dims,
                (1.0, 1.0, 1.0),
                vol.mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )?;
            nifti::save_volume(&mask_vol, &out_dir.join("mask.nii"))?;
            nifti::save_labels(&gt, &out_dir.join("phantom_gt.nii"))?;
            if degrade_erode > 0 || degrade_swap > 0.0 {
                let init = degrade_labels(&gt, &vol.mask, degrade_erode, degrade_swap, seed ^ 1);
                nifti::save_labels(&init, &out_dir.join("init_labels.nii"))?;
            }
            if cli.verbose {
                eprintln!("phantom written to {}", out_dir.display());
            }
        }
        Command::Partition { t1w, mask, out, params } => {
            let vol = nifti::load_volume(&t1w)?;
            let mask = load_mask(&mask)?;
            let params: PartitionParams = match params {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => PartitionParams::default(),
            };
            let tree = partition_volume(&vol, &mask, &params)?;
            std::fs::write(&out, serde_json::to_string_pretty(&tree)?)?;
            if cli.verbose {
                eprintln!(
                    "{} subdomains, total MI {:.4} bits",
                    tree.leaves.len(),
                    tree.total_mi_bits
                );
            }
        }
        Command::Classify { config, seed } => {
            let mut cfg = PipelineConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = run_pipeline(&cfg)?;
            if cli.verbose {
                eprintln!("labels written; MSSIM {:.6}", out.report.mssim_after);
            }
        }
        Command::Stitch { labels, partition, mask, out, seed } => {
            let labels = nifti::load_labels(&labels)?;
            let tree: PartitionTree = serde_json::from_str(&std::fs::read_to_string(partition)?)?;
            let mask = load_mask(&mask)?;
            let classified: Vec<_> = tree
                .leaves
                .iter()
                .map(|s| (s.clone(), crop_labels(&labels, &s.overlap_box)))
                .collect();
            let stitch = StitchParams::default();
            let stitched = assemble_volume(
                &classified,
                &tree,
                &mask,
                &stitch.energy,
                &stitch.schedule.with_seed(seed),
            )?;
            nifti::save_labels(&stitched, &out)?;
        }
        Command::Ssim { reference, test, mask } => {
            let r = nifti::load_volume(&reference)?;
            let t = nifti::load_volume(&test)?;
            let mask = load_mask(&mask)?;
            let m = quality::mssim(&r, &t, &mask, &SsimParams::default())?;
            println!("{m}");
        }
        Command::Dice { a, b } => {
            let a = nifti::load_labels(&a)?;
            let b = nifti::load_labels(&b)?;
            for t in [Tissue::Csf, Tissue::Gm, Tissue::Wm, Tissue::Mwm] {
                println!("{} {}", t.name(), quality::dice(&a, &b, t)?);
            }
        }
        Command::Pipeline { config, seed } => {
            let mut cfg = PipelineConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = run_pipeline(&cfg)?;
            if cli.verbose {
                eprintln!(
                    "MSSIM {:.6} -> {:.6}; outputs in {}",
                    out.report.mssim_before,
                    out.report.mssim_after,
                    cfg.output_dir.display()
                );
            }
        }
    }
    Ok(())
}

fn crop_labels(labels: &LabelVolume, bx: &Box3) -> LabelVolume {
    let (ex, ey, ez) = bx.extent();
    let mut data = Vec::with_capacity(ex * ey * ez);
    for (x, y, z) in bx.iter() {
        data.push(labels.get(x, y, z).code());
    }
    LabelVolume::new((ex, ey, ez), data).expect("crop within bounds")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("warning: thread pool already initialized");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
