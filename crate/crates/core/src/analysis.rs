//! Statistical comparison of audio features across contextual conditions.
//!
//! For every pair of conditions within a dimension and every feature, the
//! playlist songs of the two conditions are compared with an independent
//! two-sample t-test. Significance uses a Bonferroni threshold over the
//! number of tests actually run.

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::checked_beta_reg;

use crate::context::Condition;
use crate::error::{Error, Result};
use crate::feature_space::{AudioFeature, FeatureVector, FEATURE_COUNT};
use crate::ingestion::PlaylistCorpus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    /// Unequal variances, Welch–Satterthwaite degrees of freedom.
    #[default]
    Welch,
    /// Pooled variance, `n_a + n_b − 2` degrees of freedom.
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    /// Positive when the first sample has the larger mean.
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: f64,
    /// Both samples had zero variance but different means; `t` is infinite.
    pub degenerate: bool,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, ss / (n - 1.0))
}

/// Two-sided tail probability `P(|T| ≥ |t|)` for Student's t with `df`
/// degrees of freedom, via the regularized incomplete beta function.
pub fn t_two_sided_p(t: f64, df: f64) -> Result<f64> {
    if t.is_infinite() {
        return Ok(0.0);
    }
    let x = df / (df + t * t);
    checked_beta_reg(df / 2.0, 0.5, x)
        .map(|p| p.clamp(0.0, 1.0))
        .map_err(|e| Error::validation("t distribution", e.to_string()))
}

pub fn t_test(a: &[f64], b: &[f64], kind: TestKind) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::validation(
            "t-test samples",
            format!("need at least 2 values per sample, got {} and {}", a.len(), b.len()),
        ));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::validation("t-test samples", "non-finite value"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let diff = ma - mb;

    let (se2, df) = match kind {
        TestKind::Welch => {
            let (qa, qb) = (va / na, vb / nb);
            let se2 = qa + qb;
            let denom = qa * qa / (na - 1.0) + qb * qb / (nb - 1.0);
            let df = if denom > 0.0 { se2 * se2 / denom } else { na + nb - 2.0 };
            (se2, df)
        }
        TestKind::Student => {
            let df = na + nb - 2.0;
            let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            (pooled * (1.0 / na + 1.0 / nb), df)
        }
    };

    if se2 == 0.0 {
        return Ok(if diff == 0.0 {
            TTest { t: 0.0, p: 1.0, df, degenerate: false }
        } else {
            TTest {
                t: f64::INFINITY.copysign(diff),
                p: 0.0,
                df,
                degenerate: true,
            }
        });
    }
    let t = diff / se2.sqrt();
    Ok(TTest {
        t,
        p: t_two_sided_p(t, df)?,
        df,
        degenerate: false,
    })
}

/// `alpha / m`.
pub fn bonferroni_threshold(alpha: f64, m: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation("alpha", format!("{alpha} is outside (0, 1)")));
    }
    if m == 0 {
        return Err(Error::validation("test count", "Bonferroni correction needs m >= 1"));
    }
    Ok(alpha / m as f64)
}

/// Mean and spread of the audio features in one condition's corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionProfile {
    pub dimension: String,
    pub condition: Condition,
    pub mean: FeatureVector,
    /// Unbiased sample variance per feature; `None` when `n < 2`.
    pub variance: Option<[f64; FEATURE_COUNT]>,
    pub n: usize,
}

impl ConditionProfile {
    pub fn testable(&self) -> bool {
        self.n >= 2
    }
}

pub fn condition_profile(corpus: &PlaylistCorpus) -> Result<ConditionProfile> {
    if corpus.songs.is_empty() {
        return Err(Error::Empty(format!("corpus for {:?} has no songs", corpus.condition.name())));
    }
    let columns = feature_columns(corpus);
    let n = corpus.songs.len();
    let mut mean = [0.0; FEATURE_COUNT];
    let mut variance = [0.0; FEATURE_COUNT];
    for (i, col) in columns.iter().enumerate() {
        if n >= 2 {
            let (m, v) = mean_var(col);
            mean[i] = m;
            variance[i] = v;
        } else {
            mean[i] = col[0];
        }
    }
    Ok(ConditionProfile {
        dimension: corpus.dimension.clone(),
        condition: corpus.condition.clone(),
        mean: FeatureVector::from_mean(mean),
        variance: (n >= 2).then_some(variance),
        n,
    })
}

fn feature_columns(corpus: &PlaylistCorpus) -> Vec<Vec<f64>> {
    AudioFeature::ALL
        .iter()
        .map(|f| corpus.songs.iter().map(|s| s.features.get(*f)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TTestResult {
    pub dimension: String,
    pub condition_a: Condition,
    pub condition_b: Condition,
    pub feature: AudioFeature,
    pub t: f64,
    pub p: f64,
    pub significant: bool,
    pub n_a: usize,
    pub n_b: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisTable {
    pub alpha: f64,
    /// Number of tests executed; the Bonferroni `m`.
    pub tests: usize,
    pub threshold: f64,
    pub results: Vec<TTestResult>,
    pub profiles: Vec<ConditionProfile>,
    /// Condition pairs skipped because a side had fewer than 2 songs.
    pub skipped: Vec<(String, Condition, Condition)>,
}

/// Runs every within-dimension condition pair × feature test.
///
/// Corpora are grouped by dimension in order of first appearance and
/// paired in input order, which fixes the output order.
pub fn compare_all(corpora: &[PlaylistCorpus], alpha: f64, kind: TestKind) -> Result<AnalysisTable> {
    let mut by_dim: Vec<(&str, Vec<&PlaylistCorpus>)> = Vec::new();
    for c in corpora {
        match by_dim.iter_mut().find(|(d, _)| *d == c.dimension) {
            Some((_, group)) => group.push(c),
            None => by_dim.push((&c.dimension, vec![c])),
        }
    }

    let profiles: Vec<ConditionProfile> = corpora.iter().map(condition_profile).collect::<Result<_>>()?;
    let columns: Vec<Vec<Vec<f64>>> = corpora.iter().map(feature_columns).collect();
    let index_of = |c: &PlaylistCorpus| corpora.iter().position(|x| std::ptr::eq(x, c)).unwrap();

    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (dim, group) in &by_dim {
        if group.len() < 2 {
            warn!("dimension {dim:?} has fewer than 2 conditions with corpora; nothing to compare");
        }
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                let (a, b) = (index_of(group[i]), index_of(group[j]));
                if profiles[a].testable() && profiles[b].testable() {
                    pairs.push((dim.to_string(), a, b));
                } else {
                    warn!(
                        "skipping {} vs {}: each corpus needs at least 2 songs",
                        group[i].condition, group[j].condition
                    );
                    skipped.push((dim.to_string(), group[i].condition.clone(), group[j].condition.clone()));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty("no testable condition pairs".into()));
    }
    let tests = pairs.len() * FEATURE_COUNT;
    let threshold = bonferroni_threshold(alpha, tests)?;

    let results: Vec<TTestResult> = pairs
        .par_iter()
        .map(|(dim, a, b)| {
            AudioFeature::ALL
                .iter()
                .map(|&f| {
                    let r = t_test(&columns[*a][f.index()], &columns[*b][f.index()], kind)?;
                    Ok(TTestResult {
                        dimension: dim.clone(),
                        condition_a: corpora[*a].condition.clone(),
                        condition_b: corpora[*b].condition.clone(),
                        feature: f,
                        t: r.t,
                        p: r.p,
                        significant: r.p < threshold,
                        n_a: corpora[*a].songs.len(),
                        n_b: corpora[*b].songs.len(),
                        degenerate: r.degenerate,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    Ok(AnalysisTable {
        alpha,
        tests,
        threshold,
        results,
        profiles,
        skipped,
    })
}

impl AnalysisTable {
    /// `dimension, condition_a, condition_b, feature, t, p, significant, n_a, n_b`
    pub fn write_tests<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["dimension", "condition_a", "condition_b", "feature", "t", "p", "significant", "n_a", "n_b"])?;
        for r in &self.results {
            wtr.write_record([
                r.dimension.clone(),
                r.condition_a.to_string(),
                r.condition_b.to_string(),
                r.feature.to_string(),
                format!("{:.4}", r.t),
                format!("{:.6e}", r.p),
                r.significant.to_string(),
                r.n_a.to_string(),
                r.n_b.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<analysis>", e))?;
        Ok(())
    }

    /// Long-format per-condition profile: `dimension, condition, n, feature, mean, variance`.
    pub fn write_profiles<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["dimension", "condition", "n", "feature", "mean", "variance"])?;
        for p in &self.profiles {
            for f in AudioFeature::ALL {
                wtr.write_record([
                    p.dimension.clone(),
                    p.condition.to_string(),
                    p.n.to_string(),
                    f.to_string(),
                    format!("{:.6}", p.mean.get(f)),
                    p.variance.map(|v| format!("{:.6}", v[f.index()])).unwrap_or_default(),
                ])?;
            }
        }
        wtr.flush().map_err(|e| Error::io("<analysis>", e))?;
        Ok(())
    }

    /// Tests per dimension, for reporting.
    pub fn tests_per_dimension(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for r in &self.results {
            *out.entry(r.dimension.as_str()).or_default() += 1;
        }
        out
    }
}
