//! Studies, grouping by reported variance, and the generative model.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const DEFAULT_GROUPING_TOLERANCE: f64 = 1e-9;

/// One study: a reported effect and its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub effect: f64,
    pub std_error: f64,
    /// Forces this study into the group with the same label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
}

impl Study {
    pub fn new(effect: f64, std_error: f64) -> Result<Self> {
        if !effect.is_finite() {
            return Err(Error::InvalidInput(format!("effect must be finite, got {effect}")));
        }
        if !(std_error > 0.0) || !std_error.is_finite() {
            return Err(Error::InvalidInput(format!(
                "std_error must be positive and finite, got {std_error}"
            )));
        }
        Ok(Self { effect, std_error, group_id: None })
    }

    pub fn with_group(mut self, id: impl Into<String>) -> Self {
        self.group_id = Some(id.into());
        self
    }

    pub fn variance(&self) -> f64 {
        self.std_error * self.std_error
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySet {
    pub studies: Vec<Study>,
    /// Relative tolerance below which two reported variances count as equal.
    pub grouping_tolerance: f64,
}

impl StudySet {
    pub fn new(studies: Vec<Study>) -> Self {
        Self { studies, grouping_tolerance: DEFAULT_GROUPING_TOLERANCE }
    }

    /// Builds a set from `(effect, std_error)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        let studies = pairs
            .iter()
            .map(|&(x, s)| Study::new(x, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(studies))
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.grouping_tolerance = tol;
        self
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    pub fn effects(&self) -> Vec<f64> {
        self.studies.iter().map(|s| s.effect).collect()
    }

    /// Reads `effect,std_error[,group_id]` CSV with a header row.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
            .clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let effect_col = col("effect").ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing `effect` column".into(),
        })?;
        let se_col = col("std_error").ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing `std_error` column".into(),
        })?;
        let group_col = col("group_id");

        let mut studies = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| Error::Parse {
                line: e.position().map(|p| p.line() as usize).unwrap_or(0),
                message: e.to_string(),
            })?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            if record.iter().all(|f| f.is_empty()) {
                continue;
            }
            let field = |i: usize, name: &str| -> Result<f64> {
                let raw = record.get(i).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("missing `{name}` field"),
                })?;
                raw.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("`{name}` is not a number: {raw:?}"),
                })
            };
            let effect = field(effect_col, "effect")?;
            let se = field(se_col, "std_error")?;
            let mut study = Study::new(effect, se)
                .map_err(|e| Error::Parse { line, message: e.to_string() })?;
            if let Some(g) = group_col.and_then(|i| record.get(i)) {
                if !g.is_empty() {
                    study = study.with_group(g);
                }
            }
            studies.push(study);
        }
        Ok(Self::new(studies))
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?;
        Self::from_csv_reader(file)
    }
}

/// Sufficient statistics after pooling studies with equal reported variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedData {
    /// Distinct reported variances `s_i²`, strictly increasing.
    pub group_variances: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub group_means: Vec<f64>,
    /// Unbiased within-group sample variances; zero for singleton groups.
    pub within_variances: Vec<f64>,
}

impl GroupedData {
    pub fn p(&self) -> usize {
        self.group_variances.len()
    }

    pub fn n(&self) -> usize {
        self.multiplicities.iter().sum()
    }

    /// `Σ ν_i x̄_i / n`, the mean of all raw effects.
    pub fn grand_mean(&self) -> f64 {
        let n = self.n() as f64;
        self.multiplicities
            .iter()
            .zip(&self.group_means)
            .map(|(&nu, &x)| nu as f64 * x)
            .sum::<f64>()
            / n
    }

    /// Reported-variance average `s² = Σ ν_i s_i² / n`.
    pub fn mean_variance(&self) -> f64 {
        let n = self.n() as f64;
        self.multiplicities
            .iter()
            .zip(&self.group_variances)
            .map(|(&nu, &s2)| nu as f64 * s2)
            .sum::<f64>()
            / n
    }

    /// A study set whose grouping reproduces these statistics: each group gets
    /// `ν_i` studies placed symmetrically about the group mean.
    pub fn to_study_set(&self) -> Result<StudySet> {
        let mut studies = Vec::with_capacity(self.n());
        for i in 0..self.p() {
            let nu = self.multiplicities[i];
            let se = self.group_variances[i].sqrt();
            let mean = self.group_means[i];
            if nu == 1 {
                studies.push(Study::new(mean, se)?);
                continue;
            }
            // centred ramp scaled to sum of squares (ν − 1)
            let centre = (nu as f64 - 1.0) / 2.0;
            let ss: f64 = (0..nu).map(|k| (k as f64 - centre).powi(2)).sum();
            let scale = ((nu as f64 - 1.0) / ss).sqrt() * self.within_variances[i].sqrt();
            for k in 0..nu {
                studies.push(Study::new(mean + scale * (k as f64 - centre), se)?);
            }
        }
        Ok(StudySet::new(studies))
    }
}

/// Pools studies whose variances agree within the set's relative tolerance
/// (or that share a `group_id`). Groups come out in ascending variance order.
pub fn group(set: &StudySet) -> Result<GroupedData> {
    if set.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 studies, got {}",
            set.len()
        )));
    }
    let tol = set.grouping_tolerance;
    if !(tol >= 0.0) {
        return Err(Error::InvalidInput(format!("grouping tolerance must be >= 0, got {tol}")));
    }

    let mut buckets: Vec<Vec<&Study>> = Vec::new();
    let mut labelled: BTreeMap<&str, Vec<&Study>> = BTreeMap::new();
    let mut free: Vec<&Study> = Vec::new();
    for s in &set.studies {
        match &s.group_id {
            Some(id) => labelled.entry(id.as_str()).or_default().push(s),
            None => free.push(s),
        }
    }
    buckets.extend(labelled.into_values());

    free.sort_by(|a, b| a.variance().total_cmp(&b.variance()));
    let mut current: Vec<&Study> = Vec::new();
    for s in free {
        match current.first() {
            Some(anchor) if s.variance() <= anchor.variance() * (1.0 + tol) => current.push(s),
            Some(_) => buckets.push(std::mem::replace(&mut current, vec![s])),
            None => current.push(s),
        }
    }
    if !current.is_empty() {
        buckets.push(current);
    }

    let mut groups: Vec<(f64, Vec<f64>)> = buckets
        .into_iter()
        .map(|b| {
            let v = b.iter().map(|s| s.variance()).sum::<f64>() / b.len() as f64;
            (v, b.iter().map(|s| s.effect).collect())
        })
        .collect();
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in groups.windows(2) {
        if w[1].0 <= w[0].0 * (1.0 + tol) {
            return Err(Error::InvalidInput(format!(
                "groups with variances {} and {} are not distinct",
                w[0].0, w[1].0
            )));
        }
    }

    let mut out = GroupedData {
        group_variances: Vec::with_capacity(groups.len()),
        multiplicities: Vec::with_capacity(groups.len()),
        group_means: Vec::with_capacity(groups.len()),
        within_variances: Vec::with_capacity(groups.len()),
    };
    for (v, xs) in groups {
        let nu = xs.len();
        let mean = xs.iter().sum::<f64>() / nu as f64;
        let u2 = if nu > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nu as f64 - 1.0)
        } else {
            0.0
        };
        out.group_variances.push(v);
        out.multiplicities.push(nu);
        out.group_means.push(mean);
        out.within_variances.push(u2);
    }
    Ok(out)
}

/// Parameters for drawing synthetic studies `x = μ + b + ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeConfig {
    pub mu: f64,
    pub tau2: f64,
    pub group_variances: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub seed: u64,
}

impl GenerativeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau2 >= 0.0) || !self.tau2.is_finite() {
            return Err(Error::InvalidInput(format!("tau2 must be >= 0, got {}", self.tau2)));
        }
        if !self.mu.is_finite() {
            return Err(Error::InvalidInput("mu must be finite".into()));
        }
        if self.group_variances.len() != self.multiplicities.len() {
            return Err(Error::InvalidInput(
                "group_variances and multiplicities differ in length".into(),
            ));
        }
        if self.group_variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("group variances must be positive".into()));
        }
        if self.multiplicities.contains(&0) {
            return Err(Error::InvalidInput("multiplicities must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws one study per unit of multiplicity, in group order.
pub fn simulate(config: &GenerativeConfig) -> Result<StudySet> {
    simulate_stream(config, 0)
}

/// As [`simulate`], on an explicit stream of the config's seed.
pub fn simulate_stream(config: &GenerativeConfig, stream_id: u64) -> Result<StudySet> {
    config.validate()?;
    let mut rng = RngStream::new(config.seed, stream_id);
    let tau = config.tau2.sqrt();
    let mut studies = Vec::new();
    for (&s2, &nu) in config.group_variances.iter().zip(&config.multiplicities) {
        let se = s2.sqrt();
        for _ in 0..nu {
            let b = tau * rng.normal();
            let eps = se * rng.normal();
            studies.push(Study::new(config.mu + b + eps, se)?);
        }
    }
    Ok(StudySet::new(studies))
}
