//! The `keysig` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 input error, 3 internal invariant
//! violation.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::curation::ImageMeta;
use crate::descriptor::{describe, Signature};
use crate::detector::detect;
use crate::error::{Error, Result};
use crate::formats::{read_decisions, read_metadata, read_relations, read_signature, write_signature, MetadataRow};
use crate::knn::KdIndex;
use crate::pairwise::score_dataset;
use crate::plot::render_svg;
use crate::report::ReportDocument;
use crate::review::{serve, ReviewState};
use crate::volume::synth::CohortSpec;
use crate::volume::{is_volume_path, load_volume, normalize, write_nifti, DType};

#[derive(Parser, Debug)]
#[command(name = "keysig", version, about = "Keypoint signatures and subject-ID curation for 3D image cohorts")]
struct Cli {
    /// Pipeline configuration (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for commands that generate data.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Detect keypoints and write one .ksig per volume.
    Detect(DetectArgs),
    /// Match all signatures and write a scored report.
    Score(ScoreArgs),
    /// Flag outlier pairs (optionally applying curator decisions).
    Curate(CurateArgs),
    /// Render the per-class distance distributions as SVG.
    Plot(PlotArgs),
    /// Run the local review service.
    Serve(ServeArgs),
    /// Write a synthetic cohort with injected subject-ID errors.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// Volume files or directories of volumes.
    #[arg(long = "in", num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Metadata CSV; supplies subject ids, and volume paths when --in is absent.
    #[arg(long)]
    metadata: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Directory of .ksig files.
    #[arg(long)]
    sigs: PathBuf,
    #[arg(long)]
    metadata: PathBuf,
    /// Optional twin/sibling relations CSV.
    #[arg(long)]
    relations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CurateArgs {
    #[arg(long)]
    report: PathBuf,
    /// Decision log (JSON lines) to apply before flagging.
    #[arg(long)]
    decisions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    decisions: PathBuf,
    /// Metadata CSV whose path column locates the volumes for slice views.
    #[arg(long)]
    volumes: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8787")]
    bind: String,
    /// Static UI bundle served at /.
    #[arg(long)]
    ui: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    subjects: usize,
    #[arg(long, default_value_t = 2)]
    images_per_subject: usize,
    /// Edge length of the cubic volumes.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    id_errors: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cli.threads {
            if n == 0 {
                return Err(Error::Config("--threads must be at least 1".into()));
            }
            b = b.num_threads(n);
        }
        b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?
    };
    pool.install(|| match cli.command {
        Command::Detect(a) => cmd_detect(&a, &config),
        Command::Score(a) => cmd_score(&a, &config),
        Command::Curate(a) => cmd_curate(&a, &config),
        Command::Plot(a) => cmd_plot(&a),
        Command::Serve(a) => cmd_serve(a, cli.threads),
        Command::Synth(a) => cmd_synth(&a, cli.seed),
    })
}

fn list_volumes(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_volume_path(p))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn cmd_detect(a: &DetectArgs, config: &PipelineConfig) -> Result<()> {
    let meta = a.metadata.as_deref().map(read_metadata).transpose()?;
    // (path, forced image id)
    let jobs: Vec<(PathBuf, Option<String>)> = if a.inputs.is_empty() {
        let rows = meta
            .as_ref()
            .ok_or_else(|| Error::Config("detect needs --in or --metadata".into()))?;
        rows.iter()
            .map(|r| {
                r.path
                    .as_ref()
                    .map(|p| (PathBuf::from(p), Some(r.image_id.clone())))
                    .ok_or_else(|| Error::Config(format!("metadata row {:?} has no path", r.image_id)))
            })
            .collect::<Result<_>>()?
    } else {
        list_volumes(&a.inputs)?.into_iter().map(|p| (p, None)).collect()
    };
    if jobs.is_empty() {
        return Err(Error::Config("no input volumes found".into()));
    }
    let subjects: HashMap<String, String> = meta
        .iter()
        .flatten()
        .map(|r| (r.image_id.clone(), r.subject_id.clone()))
        .collect();
    create_dir(&a.out)?;
    let results: Vec<(PathBuf, Result<(String, usize, f64)>)> = jobs
        .par_iter()
        .map(|(path, id)| {
            let t = Instant::now();
            let run = || -> Result<(String, usize, f64)> {
                let mut vol = load_volume(path)?;
                if let Some(id) = id {
                    vol.set_id(id.clone());
                }
                let norm = normalize(&vol);
                let raw = detect(&norm, &config.detector);
                let mut sig = describe(&norm, &raw);
                sig.subject_id = subjects.get(&sig.image_id).cloned().unwrap_or_default();
                write_signature(&a.out.join(format!("{}.ksig", sig.image_id)), &sig)?;
                let n = sig.len();
                Ok((sig.image_id, n, t.elapsed().as_secs_f64()))
            };
            (path.clone(), run())
        })
        .collect();
    let mut failed = Vec::new();
    for (path, r) in results {
        match r {
            Ok((id, n, secs)) => {
                println!("{id}\t{n} keypoints\t{secs:.2}s");
                if n == 0 {
                    log::warn!("{id}: no keypoints detected (constant or featureless volume)");
                    eprintln!("warning: {id}: no keypoints detected");
                }
            }
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                failed.push(e);
            }
        }
    }
    match failed.len() {
        0 => Ok(()),
        1 => Err(failed.pop().unwrap()),
        n => Err(Error::Corrupt(format!("{n} input volumes could not be processed"))),
    }
}

fn read_signature_dir(dir: &Path) -> Result<Vec<Signature>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ksig"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_signature(p)).collect()
}

fn cmd_score(a: &ScoreArgs, config: &PipelineConfig) -> Result<()> {
    let t = Instant::now();
    let mut sigs = read_signature_dir(&a.sigs)?;
    if sigs.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 signatures in {}, found {}",
            a.sigs.display(),
            sigs.len()
        )));
    }
    sigs.sort_by(|x, y| x.image_id.cmp(&y.image_id));
    if let Some(w) = sigs.windows(2).find(|w| w[0].image_id == w[1].image_id) {
        return Err(Error::Consistency(format!("two signatures share image id {:?}", w[0].image_id)));
    }
    let meta = read_metadata(&a.metadata)?;
    let by_id: HashMap<&str, &MetadataRow> = meta.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut images = Vec::with_capacity(sigs.len());
    for s in &mut sigs {
        let row = by_id.get(s.image_id.as_str()).ok_or_else(|| {
            Error::Consistency(format!("image {:?} has a signature but no metadata row", s.image_id))
        })?;
        s.subject_id = row.subject_id.clone();
        images.push(ImageMeta {
            image_id: s.image_id.clone(),
            subject_id: row.subject_id.clone(),
            database: row.database.clone(),
            keypoints: s.len() as u32,
        });
    }
    let relations = a.relations.as_deref().map(read_relations).transpose()?.unwrap_or_default();
    let index = KdIndex::from_signatures(&sigs, config.index.clone());
    let scores = score_dataset(&sigs, &index, &config.matching)?;
    let report = ReportDocument::scored(images, relations, &scores, config.clone())?;
    report.write(&a.out)?;
    println!(
        "{} images, {} pairs with evidence, {} total pairs, {:.2}s",
        report.images.len(),
        report.pairs.len(),
        report.total_pairs,
        t.elapsed().as_secs_f64()
    );
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_curate(a: &CurateArgs, config: &PipelineConfig) -> Result<()> {
    let report = ReportDocument::read(&a.report)?;
    let decisions = match &a.decisions {
        Some(p) => {
            if !p.exists() {
                return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
            report.resolve_decisions(&read_decisions(p)?)?
        }
        None => Vec::new(),
    };
    let curated = report.curated(&config.flags, &decisions)?;
    curated.write(&a.out)?;
    println!(
        "report v{}: {} flags, {} decisions applied, {} labels changed",
        curated.version,
        curated.flags.len(),
        curated.decisions_applied,
        curated.audit.len()
    );
    for f in &curated.flags {
        println!(
            "{}\t{}\t{}\td={:.4}\tz={:.2}\t{:?}",
            curated.images[f.pair.a as usize].image_id,
            curated.images[f.pair.b as usize].image_id,
            f.label,
            f.distance,
            f.severity,
            f.suggested
        );
    }
    Ok(())
}

fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let report = ReportDocument::read(&a.report)?;
    if report.stats.is_empty() {
        return Err(Error::Consistency("report has no class statistics".into()));
    }
    std::fs::write(&a.out, render_svg(&report)).map_err(|e| Error::io(&a.out, e))
}

fn cmd_serve(a: ServeArgs, threads: Option<usize>) -> Result<()> {
    let volumes = match &a.volumes {
        Some(p) => Some(
            read_metadata(p)?
                .into_iter()
                .filter_map(|r| r.path.map(|path| (r.image_id, PathBuf::from(path))))
                .collect::<HashMap<_, _>>(),
        ),
        None => None,
    };
    let state = Arc::new(ReviewState::open(&a.report, a.decisions.clone(), volumes)?);
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        rt.worker_threads(n);
    }
    let rt = rt
        .enable_all()
        .build()
        .map_err(|e| Error::Config(format!("runtime: {e}")))?;
    rt.block_on(serve(&a.bind, state, a.ui))
}

fn cmd_synth(a: &SynthArgs, seed: u64) -> Result<()> {
    if a.size < 16 || a.subjects == 0 || a.images_per_subject == 0 {
        return Err(Error::Config("synth needs size >= 16 and at least one subject and image".into()));
    }
    let spec = CohortSpec {
        subjects: a.subjects,
        images_per_subject: a.images_per_subject,
        dims: [a.size; 3],
        noise_sigma: a.noise,
        id_errors: a.id_errors,
        seed,
    };
    create_dir(&a.out)?;
    let cohort = spec.generate();
    let mut meta = String::from("image_id,subject_id,database,path\n");
    let mut truth = String::from("image_id,true_subject_id,labeled_subject_id\n");
    for img in &cohort {
        let id = img.volume.id();
        let file = format!("{id}.nii.gz");
        write_nifti(&img.volume, DType::Float32, &a.out.join(&file))?;
        meta.push_str(&format!("{id},{},{},{file}\n", img.labeled_subject, img.database));
        truth.push_str(&format!("{id},{},{}\n", img.true_subject, img.labeled_subject));
    }
    for (name, text) in [("metadata.csv", meta), ("truth.csv", truth)] {
        let p = a.out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    println!("{} volumes written to {}", cohort.len(), a.out.display());
    Ok(())
}
