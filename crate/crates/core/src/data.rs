//! Outcome sources: Gaussian generators, CSV ingestion and score-quantile
//! groups.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multigroup::{Group, GroupFamily, GroupPredicate};
use crate::protocol::{Covariate, CovariateValue, OutcomeSequence, PotentialOutcomes};

/// `y_t(i) ~ N(mu_i, sigma^2)` i.i.d.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mu1: f64,
    pub mu0: f64,
    pub sigma: f64,
    pub len: usize,
    pub seed: u64,
}

impl GaussianSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.len == 0 {
            return Err(Error::Config(
                "Gaussian source needs at least one unit".into(),
            ));
        }
        if !(self.mu1.is_finite() && self.mu0.is_finite()) {
            return Err(Error::Config("Gaussian means must be finite".into()));
        }
        Ok(())
    }
}

/// Draws from `rng`: per unit, treated outcome then control outcome.
pub fn gen_gaussian_with<R: Rng + ?Sized>(
    spec: &GaussianSpec,
    rng: &mut R,
) -> Result<OutcomeSequence> {
    spec.validate()?;
    let treated = Normal::new(spec.mu1, spec.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let control = Normal::new(spec.mu0, spec.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let units = (0..spec.len)
        .map(|_| {
            let y1 = treated.sample(rng);
            let y0 = control.sample(rng);
            PotentialOutcomes {
                treated: y1,
                control: y0,
            }
        })
        .collect();
    OutcomeSequence::new(units)
}

/// Draws with a ChaCha8 stream seeded from `spec.seed`.
pub fn gen_gaussian(spec: &GaussianSpec) -> Result<OutcomeSequence> {
    gen_gaussian_with(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}

fn default_resample() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// How to read an outcome CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub path: PathBuf,
    #[serde(default = "default_y1")]
    pub treated_column: String,
    #[serde(default = "default_y0")]
    pub control_column: String,
    /// Explicit group columns; when empty every `g_*` column is used.
    #[serde(default)]
    pub group_columns: Vec<String>,
    /// Standard deviation of imputation noise; default is the column's
    /// sample standard deviation.
    #[serde(default)]
    pub imputation_scale: Option<f64>,
    #[serde(default = "default_resample")]
    pub resample: usize,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

fn default_y1() -> String {
    "y1".into()
}

fn default_y0() -> String {
    "y0".into()
}

impl DatasetSpec {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            treated_column: default_y1(),
            control_column: default_y0(),
            group_columns: Vec::new(),
            imputation_scale: None,
            resample: 1,
            shuffle: true,
        }
    }
}

/// An ingested dataset: outcomes with covariates plus named group columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequence: OutcomeSequence,
    pub group_names: Vec<String>,
    /// `T x d` membership for `group_names`.
    pub membership: Vec<Vec<bool>>,
}

impl Dataset {
    /// Group family reading the group columns from the covariates.
    pub fn group_family(&self) -> Option<GroupFamily> {
        if self.group_names.is_empty() {
            return None;
        }
        let groups = self
            .group_names
            .iter()
            .map(|c| Group {
                name: c.strip_prefix("g_").unwrap_or(c).to_string(),
                predicate: GroupPredicate::Indicator { column: c.clone() },
            })
            .collect();
        GroupFamily::new(groups).ok()
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Reads `spec.path`, fills missing numeric cells with Gaussian noise around
/// the column mean, replicates each row `resample` times and optionally
/// shuffles. Randomness is drawn from `rng` in that order.
pub fn ingest_csv<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Result<Dataset> {
    let file = std::fs::File::open(&spec.path)?;
    ingest_reader(file, spec, rng)
}

pub fn ingest_reader<R: Rng + ?Sized>(
    reader: impl std::io::Read,
    spec: &DatasetSpec,
    rng: &mut R,
) -> Result<Dataset> {
    if spec.resample == 0 {
        return Err(Error::Config("resample factor must be at least 1".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y1_col = col(&spec.treated_column)?;
    let y0_col = col(&spec.control_column)?;
    let group_cols: Vec<usize> = if spec.group_columns.is_empty() {
        (0..header.len())
            .filter(|&i| header[i].starts_with("g_"))
            .collect()
    } else {
        spec.group_columns
            .iter()
            .map(|g| col(g))
            .collect::<Result<_>>()?
    };

    let rows: Vec<Vec<String>> = rdr
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "{} has no data rows",
            spec.path.display()
        )));
    }

    // Parse every column; a column is numeric when all present cells parse.
    let ncol = header.len();
    let mut parsed: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(rows.len()); ncol];
    let mut numeric = vec![true; ncol];
    for (i, row) in rows.iter().enumerate() {
        for c in 0..ncol {
            let cell = row[c].as_str();
            let v = if is_missing(cell) {
                None
            } else {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Some(v),
                    _ => {
                        let required = c == y1_col || c == y0_col || group_cols.contains(&c);
                        if required {
                            return Err(Error::Parse {
                                row: i + 1,
                                column: header[c].clone(),
                                value: cell.to_string(),
                            });
                        }
                        numeric[c] = false;
                        None
                    }
                }
            };
            parsed[c].push(v);
        }
    }
    for &g in &group_cols {
        for (i, v) in parsed[g].iter().enumerate() {
            match v {
                Some(x) if *x == 0.0 || *x == 1.0 => {}
                _ => {
                    return Err(Error::Parse {
                        row: i + 1,
                        column: header[g].clone(),
                        value: rows[i][g].clone(),
                    })
                }
            }
        }
    }

    // Impute numeric non-group columns, column by column in file order.
    for c in 0..ncol {
        if !numeric[c] || group_cols.contains(&c) {
            continue;
        }
        let present: Vec<f64> = parsed[c].iter().flatten().copied().collect();
        if present.len() == parsed[c].len() {
            continue;
        }
        if present.is_empty() {
            return Err(Error::Config(format!(
                "column `{}` has no values",
                header[c]
            )));
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        let scale = spec.imputation_scale.unwrap_or_else(|| sample_sd(&present));
        for v in parsed[c].iter_mut().filter(|v| v.is_none()) {
            let noise: f64 = if scale > 0.0 {
                Normal::new(0.0, scale)
                    .map_err(|e| Error::Config(e.to_string()))?
                    .sample(rng)
            } else {
                0.0
            };
            *v = Some(mean + noise);
        }
    }

    let mut base: Vec<(PotentialOutcomes, Covariate, Vec<bool>)> = Vec::with_capacity(rows.len());
    for i in 0..rows.len() {
        let unit = PotentialOutcomes::new(parsed[y1_col][i].unwrap(), parsed[y0_col][i].unwrap())?;
        let mut cov = Covariate {
            fields: BTreeMap::new(),
        };
        for c in 0..ncol {
            if c == y1_col || c == y0_col {
                continue;
            }
            let value = if numeric[c] {
                CovariateValue::Real(parsed[c][i].unwrap())
            } else {
                CovariateValue::Categorical(rows[i][c].clone())
            };
            cov.insert(header[c].clone(), value);
        }
        let groups = group_cols
            .iter()
            .map(|&g| parsed[g][i] == Some(1.0))
            .collect();
        base.push((unit, cov, groups));
    }

    let mut units = Vec::with_capacity(base.len() * spec.resample);
    for row in &base {
        for _ in 0..spec.resample {
            units.push(row.clone());
        }
    }
    if spec.shuffle {
        units.shuffle(rng);
    }
    let mut outcomes = Vec::with_capacity(units.len());
    let mut covariates = Vec::with_capacity(units.len());
    let mut membership = Vec::with_capacity(units.len());
    for (u, c, g) in units {
        outcomes.push(u);
        covariates.push(c);
        membership.push(g);
    }
    Ok(Dataset {
        sequence: OutcomeSequence::with_covariates(outcomes, Some(covariates))?,
        group_names: group_cols.iter().map(|&g| header[g].clone()).collect(),
        membership,
    })
}

/// Covariate field holding the score rank attached by [`ScoreGroups::attach`].
pub const SCORE_RANK_FIELD: &str = "score_rank";

fn default_epsilon() -> f64 {
    1e-9
}

/// Groups defined by quantiles of the per-unit optimal propensity score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreGroupSpec {
    pub epsilon: f64,
    /// Inclusive rank intervals `(lo, hi)` in `[0, 1]`.
    pub thresholds: Vec<(f64, f64)>,
    pub include_all_group: bool,
}

impl Default for ScoreGroupSpec {
    /// All units, ranks at most 2/3, ranks at least 1/3.
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            thresholds: vec![(0.0, 2.0 / 3.0), (1.0 / 3.0, 1.0)],
            include_all_group: true,
        }
    }
}

impl ScoreGroupSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("score epsilon must be nonnegative".into()));
        }
        for &(lo, hi) in &self.thresholds {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return Err(Error::Config(format!("bad quantile interval ({lo}, {hi})")));
            }
        }
        if self.thresholds.is_empty() && !self.include_all_group {
            return Err(Error::Config("score groups spec defines no group".into()));
        }
        Ok(())
    }

    /// Family over [`SCORE_RANK_FIELD`].
    pub fn family(&self) -> Result<GroupFamily> {
        self.validate()?;
        let mut groups = Vec::new();
        if self.include_all_group {
            groups.push(Group {
                name: "G0".into(),
                predicate: GroupPredicate::All,
            });
        }
        for (k, &(lo, hi)) in self.thresholds.iter().enumerate() {
            groups.push(Group {
                name: format!("G{}", k + 1),
                predicate: GroupPredicate::Interval {
                    field: SCORE_RANK_FIELD.into(),
                    lo: Some(lo),
                    hi: Some(hi),
                },
            });
        }
        GroupFamily::new(groups)
    }
}

/// `1 / (1 + y0^2 / (y1^2 + eps))`.
pub fn optimal_score(u: &PotentialOutcomes, epsilon: f64) -> f64 {
    1.0 / (1.0 + u.control * u.control / (u.treated * u.treated + epsilon))
}

/// Empirical CDF ranks with average-rank ties: `(rank - 0.5) / n`.
pub fn midpoint_ranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share average 1-based rank (i+j)/2 + 1
        let r = ((i + j) as f64 / 2.0 + 0.5) / n as f64;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGroups {
    pub scores: Vec<f64>,
    pub ranks: Vec<f64>,
    pub family: GroupFamily,
    pub membership: Vec<Vec<bool>>,
}

impl ScoreGroups {
    /// Copy of `seq` with each unit's rank stored in [`SCORE_RANK_FIELD`].
    pub fn attach(&self, seq: &OutcomeSequence) -> Result<OutcomeSequence> {
        let mut covs: Vec<Covariate> = match seq.covariates() {
            Some(c) => c.to_vec(),
            None => vec![Covariate::new(); seq.len()],
        };
        for (c, &r) in covs.iter_mut().zip(&self.ranks) {
            c.insert(SCORE_RANK_FIELD, CovariateValue::Real(r));
        }
        let mut out = seq.clone();
        out.set_covariates(covs)?;
        Ok(out)
    }
}

/// Scores every unit, ranks the scores and assigns quantile groups.
pub fn score_quantile_groups(seq: &OutcomeSequence, spec: &ScoreGroupSpec) -> Result<ScoreGroups> {
    let family = spec.family()?;
    let scores: Vec<f64> = seq
        .units()
        .iter()
        .map(|u| optimal_score(u, spec.epsilon))
        .collect();
    let ranks = midpoint_ranks(&scores);
    let membership = ranks
        .iter()
        .map(|&r| family.activity(&Covariate::new().with_real(SCORE_RANK_FIELD, r)))
        .collect();
    Ok(ScoreGroups {
        scores,
        ranks,
        family,
        membership,
    })
}

/// Reads a group family document.
pub fn load_group_family(path: &Path) -> Result<GroupFamily> {
    GroupFamily::from_json_file(path)
}
