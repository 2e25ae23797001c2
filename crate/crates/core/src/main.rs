use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptive_ate::data::DatasetSpec;
use adaptive_ate::designs::ClippingFunction;
use adaptive_ate::harness::{
    coverage_study, read_curves, run_experiment, write_report, DataSource, DesignSpec,
    ExperimentConfig, GroupSpec, CURVES_FILE, SUMMARY_FILE,
};
use adaptive_ate::multigroup::StepIndexing;
use adaptive_ate::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "adaptive-ate",
    version,
    about = "Adaptive treatment-assignment experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replicate a design on Gaussian outcomes.
    Simulate {
        #[command(flatten)]
        gaussian: GaussianArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Replicate a design on a CSV population.
    RunDataset {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Chebyshev interval coverage on Gaussian or CSV outcomes.
    Coverage {
        #[command(flatten)]
        gaussian: GaussianArgs,
        #[command(flatten)]
        dataset: OptionalDatasetArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Print a short summary of a written report.
    Report {
        /// Directory holding curves.csv and summary.json.
        #[arg(long, default_value = "out")]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignKind {
    Fixed,
    #[value(name = "clip-ogd-0")]
    ClipOgd0,
    ClipOgdSc,
    Mgate,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    design: Option<DesignKind>,
    /// Propensity of the fixed design.
    #[arg(long)]
    p: Option<f64>,
    /// Strong-convexity constant of the adaptive schedules.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Group family document or group spec (JSON).
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    fixed_population: Option<bool>,
    /// Also report regret per group.
    #[arg(long)]
    per_group: bool,
    /// Skip regret curves.
    #[arg(long)]
    no_regret: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GaussianArgs {
    #[arg(long)]
    mu1: Option<f64>,
    #[arg(long)]
    mu0: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    columns: ColumnArgs,
}

#[derive(Args)]
struct OptionalDatasetArgs {
    /// CSV source instead of Gaussian outcomes.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    columns: ColumnArgs,
}

#[derive(Args)]
struct ColumnArgs {
    #[arg(long, default_value = "y1")]
    y1_col: String,
    #[arg(long, default_value = "y0")]
    y0_col: String,
    /// Comma-separated group indicator columns; default is every g_* column.
    #[arg(long, value_delimiter = ',')]
    group_cols: Vec<String>,
    #[arg(long, default_value_t = 1)]
    resample: usize,
    #[arg(long)]
    imputation_scale: Option<f64>,
    #[arg(long)]
    no_shuffle: bool,
}

impl ColumnArgs {
    fn spec(&self, path: &Path) -> DatasetSpec {
        let mut spec = DatasetSpec::new(path);
        spec.treated_column = self.y1_col.clone();
        spec.control_column = self.y0_col.clone();
        spec.group_columns = self.group_cols.clone();
        spec.resample = self.resample;
        spec.imputation_scale = self.imputation_scale;
        spec.shuffle = !self.no_shuffle;
        spec
    }
}

fn gaussian_source(base: Option<&DataSource>, g: &GaussianArgs) -> DataSource {
    let (mu1, mu0, sigma) = match base {
        Some(DataSource::Gaussian { mu1, mu0, sigma }) => (*mu1, *mu0, *sigma),
        _ => (2.0, 1.0, 1.0),
    };
    DataSource::Gaussian {
        mu1: g.mu1.unwrap_or(mu1),
        mu0: g.mu0.unwrap_or(mu0),
        sigma: g.sigma.unwrap_or(sigma),
    }
}

fn load_groups(path: &Path) -> Result<GroupSpec> {
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if value.get("kind").is_some() {
        Ok(serde_json::from_value(value)?)
    } else {
        Ok(GroupSpec::File {
            path: path.to_path_buf(),
        })
    }
}

fn design_from(kind: DesignKind, base: &DesignSpec, p: Option<f64>, c: Option<f64>) -> DesignSpec {
    let (base_c, clipping) = match base {
        DesignSpec::ClipOgdSc { c, clipping } | DesignSpec::Mgate { c, clipping, .. } => {
            (*c, clipping.clone())
        }
        _ => (1.0, ClippingFunction::default()),
    };
    let c = c.unwrap_or(base_c);
    match kind {
        DesignKind::Fixed => DesignSpec::Fixed {
            p: p.or(match base {
                DesignSpec::Fixed { p } => Some(*p),
                _ => None,
            })
            .unwrap_or(0.5),
        },
        DesignKind::ClipOgd0 => DesignSpec::ClipOgdZero,
        DesignKind::ClipOgdSc => DesignSpec::ClipOgdSc { c, clipping },
        DesignKind::Mgate => match base {
            DesignSpec::Mgate {
                fallback_propensity,
                indexing,
                ..
            } => DesignSpec::Mgate {
                c,
                clipping,
                fallback_propensity: *fallback_propensity,
                indexing: *indexing,
            },
            _ => DesignSpec::Mgate {
                c,
                clipping,
                fallback_propensity: 0.5,
                indexing: StepIndexing::default(),
            },
        },
    }
}

fn kind_of(d: &DesignSpec) -> DesignKind {
    match d {
        DesignSpec::Fixed { .. } => DesignKind::Fixed,
        DesignSpec::ClipOgdZero => DesignKind::ClipOgd0,
        DesignSpec::ClipOgdSc { .. } => DesignKind::ClipOgdSc,
        DesignSpec::Mgate { .. } => DesignKind::Mgate,
    }
}

/// Loads `--config` if given, then applies the data source and flags.
fn build_config(
    common: &CommonArgs,
    data: impl FnOnce(Option<&DataSource>) -> DataSource,
) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(path) => Some(ExperimentConfig::from_json_file(path)?),
        None => None,
    };
    let source = data(base.as_ref().map(|b| &b.data));
    let mut cfg = match base {
        Some(mut b) => {
            b.data = source;
            b
        }
        None => ExperimentConfig::new(
            source,
            DesignSpec::ClipOgdSc {
                c: 1.0,
                clipping: ClippingFunction::default(),
            },
        ),
    };
    let kind = common.design.unwrap_or_else(|| kind_of(&cfg.design));
    cfg.design = design_from(kind, &cfg.design, common.p, common.c);
    if let Some(h) = common.horizon {
        cfg.horizon = Some(h);
    }
    if let Some(r) = common.reps {
        cfg.replications = r;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(a) = common.alpha {
        cfg.alpha = a;
    }
    if let Some(g) = &common.groups {
        cfg.groups = Some(load_groups(g)?);
    }
    if common.fixed_population.is_some() {
        cfg.fixed_population = common.fixed_population;
    }
    if common.per_group {
        cfg.per_group = true;
    }
    if common.no_regret {
        cfg.regret = false;
    }
    if let Some(o) = &common.out {
        cfg.output = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn experiment(cfg: &ExperimentConfig) -> Result<()> {
    let report = run_experiment(cfg)?;
    let dir = out_dir(cfg);
    write_report(&report, cfg, &dir)?;
    let s = &report.summary;
    println!(
        "{} T={} R={}: tau_hat {:.6} (sd {:.6}), true ATE {:.6}, coverage {:.4}",
        s.design,
        s.horizon,
        s.replications,
        s.tau_hat_mean,
        s.tau_hat_sd,
        s.true_ate,
        s.ci_coverage
    );
    if let Some(r) = s.final_regret_mean {
        println!(
            "final regret {:.6} (se {:.6})",
            r,
            s.final_regret_se.unwrap_or(0.0)
        );
    }
    for (name, g) in &s.per_group {
        println!(
            "group {name}: final regret {:.6} (se {:.6})",
            g.final_regret_mean, g.final_regret_se
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn report(input: &Path) -> Result<()> {
    let table = read_curves(&input.join(CURVES_FILE))?;
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(input.join(SUMMARY_FILE))?)?;
    let last = table
        .rows
        .last()
        .ok_or_else(|| Error::Config("curve file has no rows".into()))?;
    println!("version {}", summary["version"].as_str().unwrap_or("?"));
    println!("design {}", summary["design"].as_str().unwrap_or("?"));
    for (col, v) in table.columns.iter().zip(last) {
        match v {
            Some(x) => println!("{col} = {x}"),
            None => println!("{col} = -"),
        }
    }
    for key in [
        "tau_hat_mean",
        "tau_hat_sd",
        "true_ate",
        "vb_hat_mean",
        "ci_coverage",
    ] {
        println!("{key} = {}", summary[key]);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { gaussian, common } => {
            let cfg = build_config(&common, |b| gaussian_source(b, &gaussian))?;
            experiment(&cfg)
        }
        Command::RunDataset { dataset, common } => {
            let cfg = build_config(&common, |_| {
                DataSource::Csv(dataset.columns.spec(&dataset.data))
            })?;
            experiment(&cfg)
        }
        Command::Coverage {
            gaussian,
            dataset,
            common,
        } => {
            let cfg = build_config(&common, |b| match &dataset.data {
                Some(path) => DataSource::Csv(dataset.columns.spec(path)),
                None => match b {
                    Some(src @ (DataSource::Csv(_) | DataSource::Inline { .. })) => src.clone(),
                    _ => gaussian_source(b, &gaussian),
                },
            })?;
            let c = coverage_study(&cfg)?;
            println!(
                "coverage {:.4} over {} replications at alpha {} (mean half-width {:.6}, {} degenerate)",
                c.coverage, c.replications, c.alpha, c.mean_half_width, c.degenerate
            );
            Ok(())
        }
        Command::Report { input } => report(&input),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
