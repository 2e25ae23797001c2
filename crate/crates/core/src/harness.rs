//! Seeded Monte Carlo replication of a design on a data source, streaming
//! aggregation and report files.
//!
//! Seeds: replication `r` (1-based) uses `replication_seed(master, r)`. Its
//! ChaCha8 stream 0 draws the outcomes (when the population is redrawn) and
//! stream 1 draws the treatment coins. A fixed population is drawn once from
//! `master` on stream 2.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_gaussian_with, ingest_csv, score_quantile_groups, DatasetSpec, GaussianSpec, ScoreGroupSpec,
};
use crate::designs::{schedule_sc, schedule_zero, ClipOgd, ClippingFunction, FixedDesign};
use crate::error::{Error, Result};
use crate::estimation::{chebyshev_ci, ipw_estimate, true_ate, variance_bound_estimate};
use crate::evaluation::{group_regret, neyman_regret, optimal_propensity};
use crate::multigroup::{GroupFamily, Mgate, MgateConfig, StepIndexing};
use crate::protocol::{run_design, AdaptiveDesign, OutcomeSequence, PotentialOutcomes};

pub const DEFAULT_HORIZON: usize = 20_000;
pub const DEFAULT_REPLICATIONS: usize = 500;

/// Replications run in parallel in blocks of this size and are merged in
/// order, which bounds memory for large `R`.
const BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// i.i.d. normal outcomes; length comes from the config horizon.
    Gaussian {
        mu1: f64,
        mu0: f64,
        sigma: f64,
    },
    Csv(DatasetSpec),
    /// A population given in full.
    Inline {
        sequence: OutcomeSequence,
    },
}

fn default_c() -> f64 {
    1.0
}

fn default_fallback() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DesignSpec {
    Fixed {
        p: f64,
    },
    /// Horizon-tuned schedule; the horizon is the population length.
    #[serde(rename = "clip-ogd-0")]
    ClipOgdZero,
    ClipOgdSc {
        #[serde(default = "default_c")]
        c: f64,
        #[serde(default)]
        clipping: ClippingFunction,
    },
    Mgate {
        #[serde(default = "default_c")]
        c: f64,
        #[serde(default)]
        clipping: ClippingFunction,
        #[serde(default = "default_fallback")]
        fallback_propensity: f64,
        #[serde(default)]
        indexing: StepIndexing,
    },
}

impl DesignSpec {
    pub fn label(&self) -> &'static str {
        match self {
            DesignSpec::Fixed { .. } => "fixed",
            DesignSpec::ClipOgdZero => "clip-ogd-0",
            DesignSpec::ClipOgdSc { .. } => "clip-ogd-sc",
            DesignSpec::Mgate { .. } => "mgate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GroupSpec {
    /// Quantile groups of the per-unit optimal score, recomputed per population.
    ScoreQuantiles(ScoreGroupSpec),
    Family(GroupFamily),
    /// A group family document on disk.
    File {
        path: PathBuf,
    },
    /// The `g_*` indicator columns of a CSV source.
    Columns,
}

fn default_replications() -> usize {
    DEFAULT_REPLICATIONS
}

fn default_alpha() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub design: DesignSpec,
    #[serde(default)]
    pub groups: Option<GroupSpec>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Gaussian length, or a truncation of CSV and inline populations.
    #[serde(default)]
    pub horizon: Option<usize>,
    /// Hold one population fixed across replications. Defaults to true for
    /// CSV and inline sources and false for Gaussian ones.
    #[serde(default)]
    pub fixed_population: Option<bool>,
    #[serde(default = "default_true")]
    pub regret: bool,
    #[serde(default)]
    pub per_group: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(data: DataSource, design: DesignSpec) -> Self {
        Self {
            data,
            design,
            groups: None,
            replications: DEFAULT_REPLICATIONS,
            seed: 0,
            alpha: default_alpha(),
            horizon: None,
            fixed_population: None,
            regret: true,
            per_group: false,
            output: None,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn fixed_population(&self) -> bool {
        self.fixed_population
            .unwrap_or(!matches!(self.data, DataSource::Gaussian { .. }))
    }

    /// Group spec in effect: explicit, or defaults when MGATE needs one.
    pub fn effective_groups(&self) -> Option<GroupSpec> {
        if self.groups.is_some() {
            return self.groups.clone();
        }
        if !matches!(self.design, DesignSpec::Mgate { .. }) {
            return None;
        }
        if let DataSource::Csv(spec) = &self.data {
            if !spec.group_columns.is_empty() {
                return Some(GroupSpec::Columns);
            }
        }
        Some(GroupSpec::ScoreQuantiles(ScoreGroupSpec::default()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.horizon == Some(0) {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        match &self.design {
            DesignSpec::Fixed { p } => {
                FixedDesign::new(*p)?;
            }
            DesignSpec::ClipOgdZero => {}
            DesignSpec::ClipOgdSc { c, clipping } => {
                schedule_sc(*c, clipping.clone())?;
            }
            DesignSpec::Mgate {
                c,
                clipping,
                fallback_propensity,
                ..
            } => {
                schedule_sc(*c, clipping.clone())?;
                FixedDesign::new(*fallback_propensity)?;
            }
        }
        if self.per_group && self.effective_groups().is_none() {
            return Err(Error::Config(
                "per-group evaluation needs a group spec".into(),
            ));
        }
        if matches!(self.effective_groups(), Some(GroupSpec::Columns))
            && !matches!(self.data, DataSource::Csv(_))
        {
            return Err(Error::Config("column groups need a CSV source".into()));
        }
        if let DataSource::Gaussian { mu1, mu0, sigma } = self.data {
            GaussianSpec {
                mu1,
                mu0,
                sigma,
                len: self.horizon.unwrap_or(DEFAULT_HORIZON),
                seed: 0,
            }
            .validate()?;
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(splitmix64(master) ^ r)`.
pub fn replication_seed(master: u64, r: usize) -> u64 {
    splitmix64(splitmix64(master) ^ r as u64)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Every round up to 1000, then roughly 2% apart, always ending at `len`.
pub fn checkpoints(len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=len.min(1000)).collect();
    let mut t = 1000usize;
    while t < len {
        t = ((t as f64 * 1.02).ceil() as usize).min(len);
        out.push(t);
    }
    out
}

/// Resolved group definition shared by every replication.
#[derive(Debug, Clone)]
enum Groups {
    Score(ScoreGroupSpec),
    Family(GroupFamily),
    Columns,
}

/// A population ready to run: outcomes, covariates and group membership.
#[derive(Debug, Clone)]
struct Population {
    seq: OutcomeSequence,
    family: Option<GroupFamily>,
    membership: Option<Vec<Vec<bool>>>,
}

fn draw_population(
    cfg: &ExperimentConfig,
    groups: Option<&Groups>,
    rng: &mut ChaCha8Rng,
) -> Result<Population> {
    let (mut seq, columns) = match &cfg.data {
        DataSource::Gaussian { mu1, mu0, sigma } => {
            let spec = GaussianSpec {
                mu1: *mu1,
                mu0: *mu0,
                sigma: *sigma,
                len: cfg.horizon.unwrap_or(DEFAULT_HORIZON),
                seed: 0,
            };
            (gen_gaussian_with(&spec, rng)?, None)
        }
        DataSource::Csv(spec) => {
            let d = ingest_csv(spec, rng)?;
            let fam = d.group_family();
            (d.sequence, fam.map(|f| (f, d.membership)))
        }
        DataSource::Inline { sequence } => (sequence.clone(), None),
    };
    if let Some(h) = cfg.horizon {
        if !matches!(cfg.data, DataSource::Gaussian { .. }) {
            if h > seq.len() {
                return Err(Error::Config(format!(
                    "horizon {h} exceeds the population size {}",
                    seq.len()
                )));
            }
            seq = seq.truncated(h)?;
        }
    }
    let (family, membership) = match groups {
        None => (None, None),
        Some(Groups::Score(spec)) => {
            let g = score_quantile_groups(&seq, spec)?;
            seq = g.attach(&seq)?;
            (Some(g.family), Some(g.membership))
        }
        Some(Groups::Family(fam)) => {
            let covs = seq
                .covariates()
                .ok_or_else(|| Error::Config("group family needs covariates".into()))?;
            for x in covs {
                fam.check_fields(x)?;
            }
            (Some(fam.clone()), Some(fam.membership(covs)))
        }
        Some(Groups::Columns) => {
            let (fam, m) = columns
                .ok_or_else(|| Error::Config("the CSV source has no g_* group columns".into()))?;
            let n = seq.len();
            (Some(fam), Some(m.into_iter().take(n).collect()))
        }
    };
    Ok(Population {
        seq,
        family,
        membership,
    })
}

fn build_design(spec: &DesignSpec, pop: &Population) -> Result<Box<dyn AdaptiveDesign>> {
    Ok(match spec {
        DesignSpec::Fixed { p } => Box::new(FixedDesign::new(*p)?),
        DesignSpec::ClipOgdZero => Box::new(ClipOgd::new(schedule_zero(pop.seq.len() as u64)?)),
        DesignSpec::ClipOgdSc { c, clipping } => {
            Box::new(ClipOgd::new(schedule_sc(*c, clipping.clone())?))
        }
        DesignSpec::Mgate {
            c,
            clipping,
            fallback_propensity,
            indexing,
        } => {
            let family = pop
                .family
                .clone()
                .ok_or_else(|| Error::Config("mgate needs a group spec".into()))?;
            let mut config = MgateConfig::new(*c, clipping.clone());
            config.fallback_propensity = *fallback_propensity;
            config.indexing = *indexing;
            Box::new(Mgate::new(family, config)?)
        }
    })
}

/// Final numbers of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub replication: usize,
    pub seed: u64,
    pub tau_hat: f64,
    pub true_ate: f64,
    pub vb_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub covered: bool,
    pub final_propensity: f64,
    pub final_regret: Option<f64>,
    /// Per-group propensities at the end, for designs that keep them.
    pub group_propensities: Option<Vec<f64>>,
    /// Hindsight-optimal propensity per group; `None` for empty or all-zero groups.
    pub group_optima: Option<Vec<Option<f64>>>,
    pub group_final_regret: Option<Vec<f64>>,
}

struct GroupTrace {
    regret: Vec<f64>,
    counts: Vec<f64>,
}

struct ReplicationOutcome {
    summary: ReplicationSummary,
    propensity: Vec<f64>,
    tau: Vec<f64>,
    regret: Option<Vec<f64>>,
    groups: Vec<GroupTrace>,
}

fn run_replication(
    cfg: &ExperimentConfig,
    groups: Option<&Groups>,
    shared: Option<&Population>,
    marks: &[usize],
    r: usize,
) -> Result<ReplicationOutcome> {
    let seed = replication_seed(cfg.seed, r);
    let owned;
    let pop = match shared {
        Some(p) => p,
        None => {
            owned = draw_population(cfg, groups, &mut stream(seed, 0))?;
            &owned
        }
    };
    let seq = &pop.seq;
    let mut design = build_design(&cfg.design, pop)?;
    let traj = run_design(&mut design, seq, &mut stream(seed, 1))?;

    let est = ipw_estimate(&traj)?;
    let vb = variance_bound_estimate(&traj)?;
    let ci = chebyshev_ci(&est, &vb, cfg.alpha)?;
    let tau = true_ate(seq);

    let records = traj.records();
    let propensity = marks.iter().map(|&t| records[t - 1].propensity).collect();
    let mut partial = Vec::with_capacity(marks.len());
    let mut sum = 0.0;
    let mut next = 0;
    for (i, rec) in records.iter().enumerate() {
        sum += rec.observed * rec.ipw_weight();
        if next < marks.len() && marks[next] == i + 1 {
            partial.push(sum / (i + 1) as f64);
            next += 1;
        }
    }

    let regret = if cfg.regret {
        let curve = neyman_regret(&traj, seq)?;
        Some(
            marks
                .iter()
                .map(|&t| curve.values[t - 1])
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let mut traces = Vec::new();
    let mut group_optima = None;
    let mut group_final_regret = None;
    if let (true, Some(fam), Some(membership)) = (cfg.per_group, &pop.family, &pop.membership) {
        let names = fam.names();
        let report = group_regret(&traj, seq, membership, &names)?;
        group_final_regret = Some(
            report
                .groups
                .iter()
                .map(|g| g.values.last().copied().unwrap_or(0.0))
                .collect(),
        );
        for g in &report.groups {
            traces.push(GroupTrace {
                regret: marks.iter().map(|&t| g.values[t - 1]).collect(),
                counts: marks.iter().map(|&t| g.counts[t - 1] as f64).collect(),
            });
        }
        group_optima = Some(
            (0..names.len())
                .map(|g| {
                    let units: Vec<PotentialOutcomes> = seq
                        .units()
                        .iter()
                        .zip(membership)
                        .filter(|(_, m)| m[g])
                        .map(|(u, _)| *u)
                        .collect();
                    optimal_propensity(&units).ok().map(|c| c.propensity)
                })
                .collect(),
        );
    }

    Ok(ReplicationOutcome {
        summary: ReplicationSummary {
            replication: r,
            seed,
            tau_hat: est.tau_hat,
            true_ate: tau,
            vb_hat: vb.vb_hat,
            ci_lo: ci.lo,
            ci_hi: ci.hi,
            covered: ci.contains(tau),
            final_propensity: records.last().map(|x| x.propensity).unwrap_or(0.5),
            final_regret: regret.as_ref().and_then(|v| v.last().copied()),
            group_propensities: design.group_propensities().map(<[f64]>::to_vec),
            group_optima,
            group_final_regret,
        },
        propensity,
        tau: partial,
        regret,
        groups: traces,
    })
}

/// Welford running mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample variance; zero below two observations.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sd() / (self.n as f64).sqrt()
        }
    }
}

fn push_all(stats: &mut [RunningStats], xs: &[f64]) {
    for (s, &x) in stats.iter_mut().zip(xs) {
        s.push(x);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCurves {
    pub name: String,
    pub mean_regret: Vec<f64>,
    pub se_regret: Vec<f64>,
    pub mean_count: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub final_regret_mean: f64,
    pub final_regret_se: f64,
    pub final_count_mean: f64,
    pub final_propensity_mean: Option<f64>,
    pub optimum_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub design: String,
    pub replications: usize,
    pub horizon: usize,
    pub tau_hat_mean: f64,
    pub tau_hat_sd: f64,
    pub tau_hat_se: f64,
    /// Mean over replications of each population's ATE.
    pub true_ate: f64,
    pub vb_hat_mean: f64,
    pub ci_coverage: f64,
    pub final_propensity_mean: f64,
    pub final_regret_mean: Option<f64>,
    pub final_regret_se: Option<f64>,
    pub per_group: BTreeMap<String, GroupSummary>,
}

/// Curves at the logged rounds plus final summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub checkpoints: Vec<usize>,
    pub mean_propensity: Vec<f64>,
    pub mean_regret: Option<Vec<f64>>,
    pub se_regret: Option<Vec<f64>>,
    pub mean_tau_hat: Vec<f64>,
    pub groups: Vec<GroupCurves>,
    pub summary: Summary,
    pub replications: Vec<ReplicationSummary>,
    pub runtime_seconds: f64,
}

struct Aggregator {
    propensity: Vec<RunningStats>,
    tau_trace: Vec<RunningStats>,
    regret: Vec<RunningStats>,
    group_regret: Vec<Vec<RunningStats>>,
    group_count: Vec<Vec<RunningStats>>,
    summaries: Vec<ReplicationSummary>,
}

impl Aggregator {
    fn new(len: usize, groups: usize) -> Self {
        Self {
            propensity: vec![RunningStats::default(); len],
            tau_trace: vec![RunningStats::default(); len],
            regret: vec![RunningStats::default(); len],
            group_regret: vec![vec![RunningStats::default(); len]; groups],
            group_count: vec![vec![RunningStats::default(); len]; groups],
            summaries: Vec::new(),
        }
    }

    fn push(&mut self, o: ReplicationOutcome) {
        push_all(&mut self.propensity, &o.propensity);
        push_all(&mut self.tau_trace, &o.tau);
        if let Some(r) = &o.regret {
            push_all(&mut self.regret, r);
        }
        for (g, trace) in o.groups.iter().enumerate() {
            push_all(&mut self.group_regret[g], &trace.regret);
            push_all(&mut self.group_count[g], &trace.counts);
        }
        self.summaries.push(o.summary);
    }
}

fn resolve_groups(cfg: &ExperimentConfig) -> Result<Option<Groups>> {
    Ok(match cfg.effective_groups() {
        None => None,
        Some(GroupSpec::ScoreQuantiles(s)) => {
            s.validate()?;
            Some(Groups::Score(s))
        }
        Some(GroupSpec::Family(f)) => Some(Groups::Family(GroupFamily::new(f.groups)?)),
        Some(GroupSpec::File { path }) => Some(Groups::Family(GroupFamily::from_json_file(&path)?)),
        Some(GroupSpec::Columns) => Some(Groups::Columns),
    })
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let mut s = RunningStats::default();
    xs.for_each(|x| s.push(x));
    (s.count() > 0).then(|| s.mean())
}

/// Runs every replication and aggregates. Results depend only on the config,
/// not on thread count or scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<AggregateReport> {
    let started = Instant::now();
    cfg.validate()?;
    let groups = resolve_groups(cfg)?;
    let shared = if cfg.fixed_population() {
        Some(draw_population(
            cfg,
            groups.as_ref(),
            &mut stream(cfg.seed, 2),
        )?)
    } else {
        None
    };
    // Every population drawn from the source has the same length.
    let (len, names) = match &shared {
        Some(p) => (p.seq.len(), p.family.as_ref().map(|f| f.names())),
        None => {
            let probe = draw_population(
                cfg,
                groups.as_ref(),
                &mut stream(replication_seed(cfg.seed, 1), 0),
            )?;
            (probe.seq.len(), probe.family.as_ref().map(|f| f.names()))
        }
    };
    let names = if cfg.per_group {
        names.unwrap_or_default()
    } else {
        Vec::new()
    };
    let marks = checkpoints(len);

    let mut agg = Aggregator::new(marks.len(), names.len());
    let mut start = 1;
    while start <= cfg.replications {
        let end = (start + BLOCK).min(cfg.replications + 1);
        let block: Vec<ReplicationOutcome> = (start..end)
            .into_par_iter()
            .map(|r| run_replication(cfg, groups.as_ref(), shared.as_ref(), &marks, r))
            .collect::<Result<_>>()?;
        for o in block {
            agg.push(o);
        }
        start = end;
    }

    let reps = &agg.summaries;
    let mut tau_hat = RunningStats::default();
    let mut final_regret = RunningStats::default();
    for s in reps {
        tau_hat.push(s.tau_hat);
        if let Some(f) = s.final_regret {
            final_regret.push(f);
        }
    }
    let covered = reps.iter().filter(|s| s.covered).count();

    let mut per_group = BTreeMap::new();
    let mut group_curves = Vec::new();
    for (g, name) in names.iter().enumerate() {
        let last = marks.len() - 1;
        per_group.insert(
            name.clone(),
            GroupSummary {
                final_regret_mean: agg.group_regret[g][last].mean(),
                final_regret_se: agg.group_regret[g][last].se(),
                final_count_mean: agg.group_count[g][last].mean(),
                final_propensity_mean: mean_of(
                    reps.iter()
                        .filter_map(|s| s.group_propensities.as_ref().map(|p| p[g])),
                ),
                optimum_mean: mean_of(
                    reps.iter()
                        .filter_map(|s| s.group_optima.as_ref().and_then(|o| o[g])),
                ),
            },
        );
        group_curves.push(GroupCurves {
            name: name.clone(),
            mean_regret: agg.group_regret[g].iter().map(RunningStats::mean).collect(),
            se_regret: agg.group_regret[g].iter().map(RunningStats::se).collect(),
            mean_count: agg.group_count[g].iter().map(RunningStats::mean).collect(),
        });
    }

    let summary = Summary {
        design: cfg.design.label().to_string(),
        replications: reps.len(),
        horizon: len,
        tau_hat_mean: tau_hat.mean(),
        tau_hat_sd: tau_hat.sd(),
        tau_hat_se: tau_hat.se(),
        true_ate: mean_of(reps.iter().map(|s| s.true_ate)).unwrap_or(0.0),
        vb_hat_mean: mean_of(reps.iter().map(|s| s.vb_hat)).unwrap_or(0.0),
        ci_coverage: covered as f64 / reps.len() as f64,
        final_propensity_mean: mean_of(reps.iter().map(|s| s.final_propensity)).unwrap_or(0.5),
        final_regret_mean: cfg.regret.then(|| final_regret.mean()),
        final_regret_se: cfg.regret.then(|| final_regret.se()),
        per_group,
    };

    Ok(AggregateReport {
        mean_propensity: agg.propensity.iter().map(RunningStats::mean).collect(),
        mean_regret: cfg
            .regret
            .then(|| agg.regret.iter().map(RunningStats::mean).collect()),
        se_regret: cfg
            .regret
            .then(|| agg.regret.iter().map(RunningStats::se).collect()),
        mean_tau_hat: agg.tau_trace.iter().map(RunningStats::mean).collect(),
        checkpoints: marks,
        groups: group_curves,
        summary,
        replications: agg.summaries,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub coverage: f64,
    pub replications: usize,
    pub alpha: f64,
    pub mean_half_width: f64,
    /// Replications whose interval had zero width.
    pub degenerate: usize,
}

/// Fraction of replications whose Chebyshev interval contains the true ATE.
pub fn coverage_study(cfg: &ExperimentConfig) -> Result<CoverageResult> {
    let mut cfg = cfg.clone();
    cfg.regret = false;
    cfg.per_group = false;
    let report = run_experiment(&cfg)?;
    let reps = &report.replications;
    Ok(CoverageResult {
        coverage: report.summary.ci_coverage,
        replications: reps.len(),
        alpha: cfg.alpha,
        mean_half_width: mean_of(reps.iter().map(|s| 0.5 * (s.ci_hi - s.ci_lo))).unwrap_or(0.0),
        degenerate: reps.iter().filter(|s| s.ci_hi == s.ci_lo).count(),
    })
}

/// A parsed or to-be-written curve file. Missing cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl CurveTable {
    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

impl AggregateReport {
    pub fn curve_table(&self) -> CurveTable {
        let mut columns: Vec<String> = ["t", "mean_propensity", "mean_regret", "se_regret"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for g in &self.groups {
            columns.push(format!("mean_regret_{}", g.name));
            columns.push(format!("se_regret_{}", g.name));
        }
        let rows = (0..self.checkpoints.len())
            .map(|i| {
                let mut row = vec![
                    Some(self.checkpoints[i] as f64),
                    Some(self.mean_propensity[i]),
                    self.mean_regret.as_ref().map(|v| v[i]),
                    self.se_regret.as_ref().map(|v| v[i]),
                ];
                for g in &self.groups {
                    row.push(Some(g.mean_regret[i]));
                    row.push(Some(g.se_regret[i]));
                }
                row
            })
            .collect();
        CurveTable { columns, rows }
    }
}

pub fn write_curves(table: &CurveTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&table.columns)?;
    for row in &table.rows {
        w.write_record(
            row.iter()
                .map(|c| c.map(|x| x.to_string()).unwrap_or_default()),
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves(path: &Path) -> Result<CurveTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    let columns: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .zip(&columns)
            .map(|(cell, col)| {
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse::<f64>().map(Some).map_err(|_| Error::Parse {
                        row: i + 1,
                        column: col.clone(),
                        value: cell.to_string(),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(CurveTable { columns, rows })
}

pub const CURVES_FILE: &str = "curves.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// The summary document written next to the curves.
pub fn summary_json(report: &AggregateReport, cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let s = &report.summary;
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(serde_json::json!({
        "config": serde_json::to_value(cfg)?,
        "design": s.design,
        "replications": s.replications,
        "horizon": s.horizon,
        "tau_hat_mean": s.tau_hat_mean,
        "tau_hat_sd": s.tau_hat_sd,
        "true_ate": s.true_ate,
        "vb_hat_mean": s.vb_hat_mean,
        "ci_coverage": s.ci_coverage,
        "final_propensity_mean": s.final_propensity_mean,
        "final_regret_mean": s.final_regret_mean,
        "final_regret_se": s.final_regret_se,
        "per_group": serde_json::to_value(&s.per_group)?,
        "runtime_seconds": report.runtime_seconds,
        "version": version_string(),
        "metadata": { "unix_timestamp": timestamp },
    }))
}

/// Writes `curves.csv` and `summary.json` into `dir`, creating it.
pub fn write_report(report: &AggregateReport, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_curves(&report.curve_table(), &dir.join(CURVES_FILE))?;
    let summary = summary_json(report, cfg)?;
    fs::write(
        dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(())
}
