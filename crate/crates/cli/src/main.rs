use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mrvlad::config::RunConfig;
use mrvlad::dataset::{generate_synthetic, load_manifest, Split};
use mrvlad::io::{load_checkpoint, load_pca, save_pca, DescriptorSet};
use mrvlad::model::{gradient_check, GradCheckMode};
use mrvlad::pipeline::{evaluate_sets, extract_records, run_ablation, run_training, Splits};
use mrvlad::postproc::fit_pca;
use mrvlad::pyramid::{self, sigma_ladder, PyramidMode};
use mrvlad::vlad::{NormState, Variant};
use mrvlad::Image;

#[derive(Parser)]
#[command(
    name = "mrvlad",
    version,
    about = "Multi-resolution VLAD place recognition"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "MRVLAD_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset tools.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Write every pyramid level of an image as PNG.
    PyramidDump(PyramidDumpArgs),
    /// Train a model and write checkpoints and the training log.
    Train(TrainArgs),
    /// Compute one descriptor per manifest record.
    Extract(ExtractArgs),
    /// Fit or apply PCA whitening.
    Pca {
        #[command(subcommand)]
        command: PcaCommand,
    },
    /// Database index tools.
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Recall@N of query descriptors against database descriptors.
    Eval(EvalArgs),
    /// Train and evaluate every run of an ablation grid.
    Ablate(AblateArgs),
    /// Print the effective blur of each Gaussian pyramid level.
    SigmaTable(SigmaTableArgs),
    /// Compare analytic and finite-difference gradients on toy instances.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run everything sequentially so outputs are reproducible bit for bit.
    #[arg(long)]
    deterministic: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.deterministic |= self.deterministic;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Render the synthetic place world to PNGs plus a manifest.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Subsample,
    Gaussian,
}

#[derive(Args)]
struct PyramidDumpArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Subsample factors, overriding the config (e.g. 1,2,4).
    #[arg(long, value_delimiter = ',')]
    factors: Option<Vec<u32>>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// BR, BR_MLR or BR_SPC; the config's variant when omitted.
    #[arg(long)]
    variant: Option<Variant>,
    /// Test-time pyramid factors, overriding the config.
    #[arg(long, value_delimiter = ',')]
    factors: Option<Vec<u32>>,
    /// Only records of this split (e.g. test_db).
    #[arg(long)]
    split: Option<Split>,
    /// PCA model to apply after extraction.
    #[arg(long)]
    pca: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PcaCommand {
    /// Fit PCA whitening on a descriptor file.
    Fit {
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        out_dim: usize,
        #[arg(long, default_value_t = mrvlad::postproc::DEFAULT_EPS)]
        eps: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project and renormalize a descriptor file.
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Validate database descriptors and store them as a searchable index.
    Build {
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest giving the positions of database and query ids.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 25.0)]
    radius: f64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 5, 20])]
    ns: Vec<usize>,
    /// Directory for report.json, report.txt and report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct SigmaTableArgs {
    /// Per-level factors F; accepts numbers or sqrt(x).
    #[arg(long = "factor", value_delimiter = ',', default_values_t = vec!["sqrt(2)".to_string(), "2".to_string()])]
    factors: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 6)]
    levels: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradMode {
    Full,
    Vocab,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, value_enum, default_value_t = GradMode::Full)]
    mode: GradMode,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Dataset {
            command: DatasetCommand::Gen { cfg, out },
        } => {
            let mut cfg = cfg.load()?;
            cfg.dataset.seed = cfg.seed;
            let manifest = generate_synthetic(&cfg.dataset, &out)?;
            let ds = load_manifest(&manifest)?;
            for (split, n) in ds.counts() {
                println!("{:<9} {n}", split.name());
            }
            println!("manifest: {}", manifest.display());
        }
        Command::PyramidDump(a) => pyramid_dump(a)?,
        Command::Train(a) => {
            let mut cfg = a.cfg.load()?;
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            let ds = load_manifest(&a.manifest)?;
            let splits = Splits::load(&ds)?;
            let run = run_training(&cfg, &splits, Some(&a.out))?;
            match run.outcome.best_epoch {
                Some(e) => println!("best validation epoch: {e}"),
                None => println!("no validation split; best.mrck is the final model"),
            }
            println!("checkpoints written to {}", a.out.display());
        }
        Command::Extract(a) => return extract(a),
        Command::Pca { command } => pca(command)?,
        Command::Index {
            command: IndexCommand::Build { descriptors, out },
        } => {
            let set = DescriptorSet::load(&descriptors)?;
            let index = mrvlad::retrieval::DescriptorIndex::build(&set.rows(), &set.ids)?;
            let off_unit = set
                .rows()
                .iter()
                .filter(|r| {
                    (r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt() - 1.0).abs() > 1e-4
                })
                .count();
            if off_unit > 0 {
                log::warn!("{off_unit} rows are not unit-norm");
            }
            set.save(&out)?;
            println!(
                "index: {} rows of dimension {} -> {}",
                index.len(),
                index.dim(),
                out.display()
            );
        }
        Command::Eval(a) => eval(a)?,
        Command::Ablate(a) => {
            let mut cfg = a.cfg.load()?;
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            let ds = load_manifest(&a.manifest)?;
            let splits = Splits::load(&ds)?;
            let report = run_ablation(&cfg, &splits, Some(&a.out))?;
            fs::write(
                a.out.join("ablation.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            fs::write(a.out.join("ablation.csv"), report.to_csv())?;
            let table = report.to_table();
            fs::write(a.out.join("ablation.txt"), &table)?;
            print!("{table}");
            if report.failed() > 0 {
                eprintln!("{} ablation rows failed", report.failed());
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::SigmaTable(a) => sigma_table(a)?,
        Command::Gradcheck(a) => {
            let mode = match a.mode {
                GradMode::Full => GradCheckMode::Full,
                GradMode::Vocab => GradCheckMode::VocabOnly,
            };
            let mut worst = 0.0f64;
            for seed in 0..a.seeds {
                let r = gradient_check(seed, mode)?;
                println!(
                    "seed {seed:>3}: {} parameters, loss {:.6}, max relative error {:.3e}",
                    r.params_checked, r.loss, r.max_rel_error
                );
                worst = worst.max(r.max_rel_error);
            }
            println!("worst: {worst:.3e} (tolerance {:.1e})", a.tolerance);
            if !(worst < a.tolerance) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn pyramid_dump(a: PyramidDumpArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let mut pcfg = cfg.pyramid.clone();
    if let Some(f) = a.factors {
        pcfg.factors = f;
    }
    if let Some(m) = a.mode {
        pcfg.mode = match m {
            ModeArg::Subsample => PyramidMode::Subsample,
            ModeArg::Gaussian => PyramidMode::Gaussian,
        };
    }
    let img = Image::load(&a.image)?;
    let pyr = pyramid::build(&img, &pcfg)?;
    fs::create_dir_all(&a.out)?;
    let mut levels = Vec::new();
    for (i, l) in pyr.levels.iter().enumerate() {
        let name = format!("level_{i}.png");
        l.image.save_png(&a.out.join(&name))?;
        println!(
            "level {i}: factor {:.4} {}x{} sigma_eff {}",
            l.factor,
            l.image.width(),
            l.image.height(),
            l.sigma_eff.map_or("-".to_string(), |s| format!("{s:.6}"))
        );
        levels.push(serde_json::json!({
            "file": name,
            "factor": l.factor,
            "width": l.image.width(),
            "height": l.image.height(),
            "sigma_eff": l.sigma_eff,
        }));
    }
    fs::write(
        a.out.join("levels.json"),
        serde_json::to_string_pretty(&levels)?,
    )?;
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<ExitCode> {
    let cfg = a.cfg.load()?;
    let mut pcfg = cfg.pyramid.clone();
    if let Some(f) = a.factors {
        pcfg.factors = f;
    }
    pcfg.validate()?;
    let variant = a.variant.unwrap_or(cfg.eval.variant);
    let model = load_checkpoint(&a.checkpoint)?;
    let pca = a.pca.as_deref().map(load_pca).transpose()?;
    let ds = load_manifest(&a.manifest)?;
    let records: Vec<_> = ds
        .records
        .iter()
        .filter(|r| a.split.is_none_or(|s| r.split == s))
        .collect();
    let (set, failures) = extract_records(
        &model,
        &ds,
        &records,
        variant,
        &pcfg,
        pca.as_ref(),
        cfg.deterministic,
    )?;
    set.save(&a.out)?;
    println!(
        "{} descriptors of dimension {} ({variant}) -> {}",
        set.len(),
        set.dim,
        a.out.display()
    );
    if failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for (id, e) in &failures {
        eprintln!("record {id}: {e}");
    }
    eprintln!("{} of {} records failed", failures.len(), records.len());
    Ok(ExitCode::FAILURE)
}

fn pca(cmd: PcaCommand) -> Result<()> {
    match cmd {
        PcaCommand::Fit {
            descriptors,
            out_dim,
            eps,
            out,
        } => {
            let set = DescriptorSet::load(&descriptors)?;
            let rows: Vec<Vec<f64>> = set
                .rows()
                .iter()
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect();
            let model = fit_pca(&rows, out_dim, eps)?;
            save_pca(&model, &out)?;
            println!(
                "PCA {} -> {} fitted on {} descriptors; leading eigenvalue {:.4e}",
                model.in_dim,
                model.out_dim,
                rows.len(),
                model.eigenvalues[0]
            );
        }
        PcaCommand::Apply {
            model,
            descriptors,
            out,
        } => {
            let pca = load_pca(&model)?;
            let set = DescriptorSet::load(&descriptors)?;
            let mut res = DescriptorSet::new(set.variant, NormState::FullyNormalized, pca.out_dim);
            for (i, id) in set.ids.iter().enumerate() {
                let x: Vec<f64> = set.row(i).iter().map(|&v| v as f64).collect();
                let y = pca.apply(&x).with_context(|| format!("descriptor {id}"))?;
                res.push(*id, &y.iter().map(|&v| v as f32).collect::<Vec<_>>())?;
            }
            res.save(&out)?;
            println!("{} descriptors -> dimension {}", res.len(), res.dim);
        }
    }
    Ok(())
}

fn positions(manifest: &Path, set: &DescriptorSet) -> Result<Vec<(f64, f64)>> {
    let ds = load_manifest(manifest)?;
    let by_id: HashMap<u64, (f64, f64)> = ds.records.iter().map(|r| (r.id, r.position())).collect();
    set.ids
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .with_context(|| format!("id {id} is not in the manifest"))
        })
        .collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let db = DescriptorSet::load(&a.db)?;
    let q = DescriptorSet::load(&a.queries)?;
    if db.variant != q.variant {
        bail!("database is {} but queries are {}", db.variant, q.variant);
    }
    let report = evaluate_sets(
        &db,
        &positions(&a.manifest, &db)?,
        &q,
        &positions(&a.manifest, &q)?,
        a.radius,
        &a.ns,
    )?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir)?;
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        fs::write(dir.join("report.txt"), &table)?;
        fs::write(dir.join("report.csv"), report.to_csv())?;
    }
    Ok(())
}

/// Parses `1.5`, `sqrt(2)` or `2*sqrt(2)`.
fn parse_factor(s: &str) -> Result<f64> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once('*') {
        return Ok(parse_factor(a)? * parse_factor(b)?);
    }
    if let Some(inner) = s.strip_prefix("sqrt(").and_then(|r| r.strip_suffix(')')) {
        return Ok(parse_factor(inner)?.sqrt());
    }
    s.parse::<f64>()
        .with_context(|| format!("not a number: {s:?}"))
}

fn sigma_table(a: SigmaTableArgs) -> Result<()> {
    let factors: Vec<(String, f64)> = a
        .factors
        .iter()
        .map(|f| Ok((f.clone(), parse_factor(f)?)))
        .collect::<Result<_>>()?;
    for (_, f) in &factors {
        if !(*f > 1.0) {
            bail!("factors must exceed 1, got {f}");
        }
    }
    print!("{:>6}", "level");
    for (name, _) in &factors {
        print!(" {:>22}", format!("F={name}"));
    }
    println!();
    let ladders: Vec<Vec<f64>> = factors
        .iter()
        .map(|(_, f)| sigma_ladder(*f, a.sigma, a.levels))
        .collect();
    for i in 0..a.levels {
        print!("{:>6}", i + 1);
        for l in &ladders {
            print!(" {:>22.15}", l[i]);
        }
        println!();
    }
    Ok(())
}
