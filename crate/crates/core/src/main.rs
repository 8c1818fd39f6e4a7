use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use pgga::data::io::write_samples;
use pgga::data::{generate_dataset, held_out};
use pgga::eval::theta_path;
use pgga::pose::io::{read_heatmap, write_pgm};
use pgga::pose::{coarse_mask, downsample_mask, extract_keypoints, fine_masks, MaskParams, Part};
use pgga::suite::{run_suite, SuiteOptions, DEFAULT_SUITE_SEED};
use pgga::train::{eval_split, evaluate, load_for_eval, RunConfig, Trainer};
use pgga::PggaError;

const EXIT_ERROR: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "pgga", version, about = "Pose-guided graph attention re-identification on synthetic pedestrians")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rank held-out renders against the training renders.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset_seed: Option<u64>,
        /// Report path; defaults to the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the coarse, downsampled coarse and 13 fine masks as PGM.
    DumpMasks {
        /// HMAP heatmap file (a `.ppm` path picks the `.hmap` beside it).
        #[arg(long)]
        sample: PathBuf,
        #[arg(long, default_value_t = 2)]
        omega: usize,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Finite-difference check of every network component.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SUITE_SEED)]
        seed: u64,
        /// Perturb one analytic gradient; the check must then fail.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Write a dataset as PPM images, HMAP heatmaps and an index CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write this many held-out renders per identity to `<out>/held_out`.
        #[arg(long, default_value_t = 0)]
        held_out: usize,
    },
}

fn fail(e: PggaError) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        PggaError::NonFinite(_) => ExitCode::from(EXIT_NUMERIC),
        _ => ExitCode::from(EXIT_ERROR),
    }
}

fn train(config: &Path, resume: Option<&Path>) -> pgga::Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut t = match resume {
        Some(ckpt) => Trainer::resume(cfg, ckpt)?,
        None => Trainer::new(cfg)?,
    };
    let total = t.cfg.epochs;
    t.run(|s| {
        println!(
            "epoch {}/{total}  l_id {:.6}  l_tri {:.6}  total {:.6}",
            s.epoch, s.l_id, s.l_tri, s.total
        )
    })?;
    println!("checkpoint: {}", t.cfg.checkpoint.display());
    Ok(())
}

fn eval(ckpt: &Path, dataset_seed: Option<u64>, out: Option<&Path>) -> pgga::Result<()> {
    let (cfg, model, calibrated) = load_for_eval(ckpt, dataset_seed)?;
    if calibrated {
        eprintln!("note: checkpoint lacks batch-norm statistics; calibrated on the training renders");
    }
    let (queries, gallery) = eval_split(&cfg)?;
    let report = evaluate(&model, &cfg.masks, &queries, &gallery)?;
    let path = out.map_or(cfg.report.clone(), Path::to_path_buf);
    report.write(&path)?;
    print!("{}", report.to_csv());
    if report.skipped > 0 {
        println!("queries without a valid match: {}", report.skipped);
    }
    println!("report: {}  theta: {}", path.display(), theta_path(&path).display());
    Ok(())
}

fn dump_masks(sample: &Path, mp: MaskParams, out: &Path) -> pgga::Result<usize> {
    mp.validate()?;
    let hmap = if sample.extension().is_some_and(|e| e == "ppm") {
        sample.with_extension("hmap")
    } else {
        sample.to_path_buf()
    };
    let kps = extract_keypoints(&read_heatmap(&hmap)?);
    fs::create_dir_all(out)?;
    let coarse = coarse_mask(&kps, &mp);
    write_pgm(&out.join("coarse.pgm"), &coarse.grid, &mp)?;
    let mut written = 1;
    match downsample_mask(&coarse) {
        Ok(ds) => {
            write_pgm(&out.join("coarse_ds.pgm"), &ds, &mp)?;
            written += 1;
        }
        Err(e) => eprintln!("skipping downsampled mask: {e}"),
    }
    for (part, m) in Part::ALL.iter().zip(fine_masks(&kps, &mp)) {
        write_pgm(&out.join(format!("fine_{:02}_{}.pgm", part.index(), part.name())), &m.grid, &mp)?;
        written += 1;
    }
    Ok(written)
}

fn gradcheck(seed: u64, corrupt: bool) -> pgga::Result<bool> {
    let reports = run_suite(&SuiteOptions {
        seed,
        corrupt_gradient: corrupt,
    })?;
    let mut ok = true;
    for r in &reports {
        println!(
            "{:<26} {:>9.3e}  ({} coords)  {}",
            r.name,
            r.report.max_rel_error,
            r.report.checked,
            if r.passes() { "ok" } else { "FAIL" }
        );
        ok &= r.passes();
    }
    println!("{} components checked", reports.len());
    Ok(ok)
}

fn generate(config: &Path, out: &Path, extra: usize) -> pgga::Result<()> {
    let cfg = RunConfig::load(config)?;
    let data = cfg.dataset();
    let samples = generate_dataset(&data)?;
    write_samples(out, &samples)?;
    println!("{} samples in {}", samples.len(), out.display());
    if extra > 0 {
        let h = held_out(&data, extra)?;
        write_samples(&out.join("held_out"), &h)?;
        println!("{} held-out samples in {}", h.len(), out.join("held_out").display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_ERROR),
            };
        }
    };
    let result = match cli.cmd {
        Cmd::Train { config, resume } => train(&config, resume.as_deref()),
        Cmd::Eval { ckpt, dataset_seed, out } => eval(&ckpt, dataset_seed, out.as_deref()),
        Cmd::DumpMasks {
            sample,
            omega,
            alpha,
            beta,
            out,
        } => dump_masks(&sample, MaskParams { omega, alpha, beta }, &out).map(|n| println!("{n} mask files in {}", out.display())),
        Cmd::Gradcheck { seed, corrupt_gradient } => match gradcheck(seed, corrupt_gradient) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_GRADCHECK),
            Err(e) => Err(e),
        },
        Cmd::Generate { config, out, held_out } => generate(&config, &out, held_out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
