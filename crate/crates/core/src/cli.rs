//! Command-line front end. [`run`] maps arguments to an exit code:
//! 0 success, 1 usage error, 2 data error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::atlas::{
    build_atlas, build_synthetic_atlas, load_bundle, load_prior_dir, precompute_prior_warps, save_bundle,
};
use crate::error::{Error, Result};
use crate::eval::{dice, loocv, structure_dice};
use crate::fusion::{FusionMode, FusionParams};
use crate::image::Grid;
use crate::nifti::{self, Datatype};
use crate::pipeline::{segment, write_outputs, InputContrast, SegmentationRequest};
use crate::qc::render_qc;
use crate::registration::RegistrationParams;

pub const ATLAS_ENV: &str = "NUCLEISEG_ATLAS";

pub const SYNOPSIS: &str = "\
usage:
  nucleiseg segment --input F --contrast t1|wmn --atlas DIR --out DIR [--fusion jlf|majority] [--threads N] [--debug]
  nucleiseg loocv --atlas DIR --out DIR
  nucleiseg dice --auto F --truth F [--label K]
  nucleiseg atlas-build --priors DIR --out DIR [--iterations K]
  nucleiseg atlas-synth --n K --grid X,Y,Z --seed S --out DIR
  nucleiseg qc --input F --labels F --template F --out PNG
--atlas defaults to $NUCLEISEG_ATLAS; run `nucleiseg <command> --help` for parameter flags.
";

#[derive(Debug, Parser)]
#[command(name = "nucleiseg", version, about = "Deep grey nuclei segmentation from T1 or WMn MRI")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: Option<u32>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment one volume with an atlas bundle.
    Segment(SegmentArgs),
    /// Leave-one-out cross-validation over an atlas bundle.
    Loocv(LoocvArgs),
    /// Dice overlap between two label maps.
    Dice(DiceArgs),
    /// Build a bundle from labelled priors.
    AtlasBuild(AtlasBuildArgs),
    /// Write a seeded synthetic bundle.
    AtlasSynth(AtlasSynthArgs),
    /// Regenerate a QC montage.
    Qc(QcArgs),
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_parser = parse_contrast)]
    pub contrast: InputContrast,
    #[arg(long, env = ATLAS_ENV)]
    pub atlas: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write intermediate volumes under OUT/debug.
    #[arg(long)]
    pub debug: bool,
    #[command(flatten)]
    pub fusion: FusionArgs,
    #[command(flatten)]
    pub registration: RegistrationArgs,
}

#[derive(Debug, Args)]
pub struct LoocvArgs {
    #[arg(long, env = ATLAS_ENV)]
    pub atlas: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub fusion: FusionArgs,
    #[command(flatten)]
    pub registration: RegistrationArgs,
}

#[derive(Debug, Args)]
pub struct DiceArgs {
    #[arg(long)]
    pub auto: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Single label index; otherwise one line per structure.
    #[arg(long)]
    pub label: Option<u16>,
}

#[derive(Debug, Args)]
pub struct AtlasBuildArgs {
    /// Directory of `<id>/image.nii.gz`, `<id>/labels_left.nii.gz`,
    /// `<id>/labels_right.nii.gz`, optional `dictionary.txt`.
    #[arg(long)]
    pub priors: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Template refinement iterations.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
    pub iterations: u32,
    #[command(flatten)]
    pub registration: RegistrationArgs,
}

#[derive(Debug, Args)]
pub struct AtlasSynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub n: u32,
    #[arg(long, value_parser = parse_grid)]
    pub grid: [usize; 3],
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Isotropic voxel size in mm.
    #[arg(long, default_value_t = 1.0)]
    pub spacing: f64,
    /// Skip the prior→template warp precomputation.
    #[arg(long)]
    pub no_precompute: bool,
    #[command(flatten)]
    pub registration: RegistrationArgs,
}

#[derive(Debug, Args)]
pub struct QcArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FusionArgs {
    #[arg(long, value_parser = parse_fusion, default_value = "jlf")]
    pub fusion: FusionMode,
    #[arg(long)]
    pub patch_radius: Option<usize>,
    #[arg(long)]
    pub search_radius: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RegistrationArgs {
    #[arg(long)]
    pub levels: Option<usize>,
    /// Comma list, coarsest level first.
    #[arg(long, value_delimiter = ',')]
    pub affine_iterations: Option<Vec<usize>>,
    /// Comma list, coarsest level first.
    #[arg(long, value_delimiter = ',')]
    pub demons_iterations: Option<Vec<usize>>,
    #[arg(long)]
    pub demons_step: Option<f64>,
    #[arg(long)]
    pub fluid_sigma: Option<f64>,
    #[arg(long)]
    pub diffusion_sigma: Option<f64>,
}

fn parse_contrast(s: &str) -> std::result::Result<InputContrast, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_fusion(s: &str) -> std::result::Result<FusionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_grid(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| format!("not a size: {t:?}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x, y, z] if x > 0 && y > 0 && z > 0 => Ok([x, y, z]),
        _ => Err("expected three positive sizes X,Y,Z".into()),
    }
}

impl FusionArgs {
    pub fn params(&self) -> Result<FusionParams> {
        let d = FusionParams::default();
        let p = FusionParams {
            patch_radius: self.patch_radius.unwrap_or(d.patch_radius),
            search_radius: self.search_radius.unwrap_or(d.search_radius),
            beta: self.beta.unwrap_or(d.beta),
            alpha: self.alpha.unwrap_or(d.alpha),
            mode: self.fusion,
        };
        p.validate()?;
        Ok(p)
    }
}

impl RegistrationArgs {
    /// Changing `--levels` without iteration lists repeats the last default
    /// entry for the extra levels (or drops the coarsest ones).
    pub fn params(&self) -> Result<RegistrationParams> {
        let mut p = RegistrationParams::default();
        if let Some(l) = self.levels {
            let resize = |v: &[usize]| -> Vec<usize> {
                let last = *v.last().expect("default lists are non-empty");
                let mut out: Vec<usize> = v.iter().rev().take(l).rev().copied().collect();
                while out.len() < l {
                    out.insert(0, last);
                }
                out
            };
            p.affine_iterations = resize(&p.affine_iterations);
            p.demons_iterations = resize(&p.demons_iterations);
            p.levels = l;
        }
        if let Some(v) = &self.affine_iterations {
            p.affine_iterations = v.clone();
        }
        if let Some(v) = &self.demons_iterations {
            p.demons_iterations = v.clone();
        }
        if let Some(v) = self.demons_step {
            p.demons_step = v;
        }
        if let Some(v) = self.fluid_sigma {
            p.fluid_sigma_mm = v;
        }
        if let Some(v) = self.diffusion_sigma {
            p.diffusion_sigma_mm = v;
        }
        p.validate()?;
        Ok(p)
    }
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::IoAt {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| Error::IoAt {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Parse `args` (program name first) and execute. Summary lines go to
/// `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}\n{SYNOPSIS}", e.render());
                    1
                }
            };
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n as usize).build() {
            Ok(pool) => pool.install(|| execute(&cli.command)),
            Err(e) => Err(Failure::Usage(format!("cannot start {n} threads: {e}"))),
        },
        None => execute(&cli.command),
    };
    match result {
        Ok(lines) => {
            for l in lines {
                let _ = writeln!(out, "{l}");
            }
            0
        }
        Err(Failure::Usage(msg)) => {
            let _ = write!(err, "error: {msg}\n\n{SYNOPSIS}");
            1
        }
        Err(Failure::Data(e)) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

/// Run one command and return its stdout lines.
fn execute(command: &Command) -> std::result::Result<Vec<String>, Failure> {
    let mut lines = Vec::new();
    let mut say = |line: String| lines.push(line);
    match command {
        Command::Segment(a) => {
            let fusion = a.fusion.params().map_err(usage)?;
            let registration = a.registration.params().map_err(usage)?;
            let input = nifti::load_volume(&a.input)?;
            let atlas = load_bundle(&a.atlas)?;
            let req = SegmentationRequest {
                fusion,
                registration,
                debug: a.debug,
                ..SegmentationRequest::new(&input, a.contrast, &atlas)
            };
            let r = segment(&req)?;
            let files = write_outputs(&r, &a.out)?;
            say(format!(
                "segment status=ok contrast={} fusion={} files={} out={}",
                a.contrast,
                req.fusion.mode,
                files.len(),
                a.out.display()
            ));
        }
        Command::Loocv(a) => {
            let fusion = a.fusion.params().map_err(usage)?;
            let registration = a.registration.params().map_err(usage)?;
            let atlas = load_bundle(&a.atlas)?;
            let report = loocv(&atlas, &registration, &fusion)?;
            write_file(&a.out.join("loocv.tsv"), report.to_tsv().as_bytes())?;
            write_file(&a.out.join("loocv.txt"), report.to_table().as_bytes())?;
            let worst = report.structures.iter().map(|s| s.mean).fold(f64::INFINITY, f64::min);
            say(format!(
                "loocv status=ok folds={} structures={} min_mean_dice={:.6} out={}",
                atlas.priors.len(),
                report.structures.len(),
                worst,
                a.out.display()
            ));
        }
        Command::Dice(a) => {
            let auto = nifti::load_labels(&a.auto)?;
            let truth = nifti::load_labels(&a.truth)?;
            match a.label {
                Some(l) => say(format!("{:.6}", dice(&auto, &truth, l)?)),
                None => {
                    for (i, name) in truth.dictionary().iter() {
                        if let Some(d) = structure_dice(&auto, &truth, i)? {
                            say(format!("{i}-{name} {d:.6}"));
                        }
                    }
                }
            }
        }
        Command::AtlasBuild(a) => {
            let registration = a.registration.params().map_err(usage)?;
            let (priors, dictionary) = load_prior_dir(&a.priors)?;
            let bundle = build_atlas(priors, dictionary, a.iterations as usize, &registration)?;
            save_bundle(&bundle, &a.out)?;
            say(format!(
                "atlas-build status=ok priors={} iterations={} out={}",
                bundle.priors.len(),
                a.iterations,
                a.out.display()
            ));
        }
        Command::AtlasSynth(a) => {
            let registration = a.registration.params().map_err(usage)?;
            if !(a.spacing > 0.0 && a.spacing.is_finite()) {
                return Err(Failure::Usage(format!("--spacing must be > 0, got {}", a.spacing)));
            }
            let grid = Grid::axis_aligned(a.grid, [a.spacing; 3], [0.0; 3])?;
            let syn = build_synthetic_atlas(a.n as usize, &grid, a.seed)?;
            let bundle = if a.no_precompute {
                syn.bundle
            } else {
                precompute_prior_warps(&syn.bundle, &registration)?
            };
            save_bundle(&bundle, &a.out)?;
            for (p, t1) in bundle.priors.iter().zip(&syn.t1) {
                let path = a.out.join("t1").join(format!("{}.nii.gz", p.id));
                write_file(&path, &nifti::write_nifti(t1, Datatype::F64, true)?)?;
            }
            say(format!(
                "atlas-synth status=ok priors={} grid={}x{}x{} seed={} precomputed={} out={}",
                bundle.priors.len(),
                a.grid[0],
                a.grid[1],
                a.grid[2],
                a.seed,
                bundle.is_precomputed(),
                a.out.display()
            ));
        }
        Command::Qc(a) => {
            let input = nifti::load_volume(&a.input)?;
            let labels = nifti::load_labels(&a.labels)?;
            let template = nifti::load_volume(&a.template)?;
            let png = render_qc(&input, &labels, &template)?;
            write_file(&a.out, &png)?;
            say(format!("qc status=ok bytes={} out={}", png.len(), a.out.display()));
        }
    }
    Ok(lines)
}
