//! `vct` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use vct_core::trial::{Population, SampleType};

use crate::config::RunConfig;
use crate::consistency::{self, Mode};
use crate::error::{self, Result, VctError};
use crate::manifest::LoadedManifest;
use crate::pipeline;
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "vct", version, about = "Virtual clinical trials on CT body-composition phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Phantom cohorts.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Measure body composition and height for every manifest subject.
    Measure(MeasureArgs),
    /// Biased-split trials.
    #[command(subcommand)]
    Trial(TrialCommand),
    /// Dice and organ volume/centroid agreement between two manifests.
    Consistency(ConsistencyArgs),
}

#[derive(Debug, Subcommand)]
pub enum PhantomCommand {
    /// Generate a seeded phantom cohort with a manifest.
    Gen(GenArgs),
}

#[derive(Debug, Subcommand)]
pub enum TrialCommand {
    /// Split, fit the predictor, synthesize and evaluate.
    Run(TrialArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Isotropic voxel size in mm.
    #[arg(long)]
    pub spacing: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct MeasureArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrialArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ConsistencyArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, value_enum, default_value = "paired")]
    pub mode: Mode,
    #[command(flatten)]
    pub common: Common,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    error::write(path, &bytes)
}

fn phantom_gen(args: &GenArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(n) = args.n {
        cfg.cohort.n = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if let Some(s) = args.spacing {
        cfg.cohort.spacing_mm = [s; 3];
    }
    cfg.validate()?;
    if cfg.cohort.n == 0 {
        return Err(VctError::config("--n must be at least 1"));
    }
    let seed = cfg.require_seed()?;
    let m = pipeline::with_threads(cfg.threads, || pipeline::write_cohort(&args.common.out, &cfg.cohort, seed))??;
    println!("{} phantoms written to {}", m.subjects.len(), args.common.out.display());
    Ok(())
}

fn measure(args: &MeasureArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let m = LoadedManifest::load(&args.manifest)?;
    if m.manifest.subjects.is_empty() {
        return Err(VctError::config("manifest has no subjects"));
    }
    let out = &args.common.out;
    error::create_dir(out)?;
    let results = pipeline::with_threads(cfg.threads, || pipeline::measure_manifest(&m, &cfg.density))?;
    let mut ok = Vec::new();
    let mut failed = 0;
    for (s, r) in m.manifest.subjects.iter().zip(&results) {
        match r {
            Ok(report) => {
                write_json(&out.join(format!("{}.json", s.id)), report)?;
                ok.push((s.id.as_str(), report));
            }
            Err(e) => {
                failed += 1;
                log::error!("{}: {e}", s.id);
                eprintln!("{}: {e}", s.id);
            }
        }
    }
    report::write_csv(&out.join("cohort.csv"), &report::COHORT_COLUMNS, &report::cohort_rows(ok))?;
    println!("{} of {} subjects measured", results.len() - failed, results.len());
    if failed > 0 {
        return Err(VctError::Partial {
            failed,
            total: results.len(),
        });
    }
    Ok(())
}

fn trial_run(args: &TrialArgs) -> Result<()> {
    let Some(cfg_path) = &args.common.config else {
        return Err(VctError::config("trial run needs --config"));
    };
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    let dir = cfg_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let outcome = pipeline::with_threads(cfg.threads, || pipeline::run_trial_pipeline(&cfg, &dir))??;
    let out = &args.common.out;
    error::create_dir(out)?;
    let r = &outcome.report;
    write_json(&out.join("report.json"), r)?;
    write_json(
        &out.join("split.json"),
        &serde_json::json!({
            "seeds": outcome.seeds,
            "boundary": outcome.boundary,
            "boundary_fitted": outcome.boundary_fitted,
            "split": outcome.split,
        }),
    )?;
    report::write_csv(&out.join("z_scores.csv"), &report::Z_SCORE_COLUMNS, &report::z_score_rows(r))?;
    if let Some(block) = &r.attribution {
        let (h, rows) = report::bias_corr_table(block);
        report::write_csv(&out.join("bias_corr.csv"), &h.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
        let (h, rows) = report::feat_import_table(block);
        report::write_csv(&out.join("feat_import.csv"), &h.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    }
    error::write(&out.join("subjects.csv"), &report::records_to_csv(&outcome.subjects))?;

    println!("train Pearson r = {:.3}", outcome.split.train_pearson);
    for pop in [Population::Id, Population::Ood] {
        if let Some(row) = r.row(pop, SampleType::Real) {
            println!("{}: {}", pop.label(), row.verdict.label());
        }
    }
    for row in &r.rows {
        println!(
            "  {:<3} {:<22} n={:<4} MAE {:.3} [{:.3}, {:.3}]{}",
            row.population.label(),
            row.sample_type.label(),
            row.n,
            row.mae,
            row.mae_ci.lo,
            row.mae_ci.hi,
            row.p_value.map(|p| format!("  p={p:.3}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn consistency_cmd(args: &ConsistencyArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let a = LoadedManifest::load(&args.a)?;
    let b = LoadedManifest::load(&args.b)?;
    let table = pipeline::with_threads(cfg.threads, || consistency::compare(&a, &b, args.mode))??;
    error::create_dir(&args.common.out)?;
    report::write_csv(
        &args.common.out.join("consistency.csv"),
        &report::CONSISTENCY_COLUMNS,
        &report::consistency_rows(&table),
    )?;
    write_json(&args.common.out.join("consistency.json"), &table)?;
    println!("{} classes compared", table.per_class.len());
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom(PhantomCommand::Gen(a)) => phantom_gen(a),
        Command::Measure(a) => measure(a),
        Command::Trial(TrialCommand::Run(a)) => trial_run(a),
        Command::Consistency(a) => consistency_cmd(a),
    }
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
