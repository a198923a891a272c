//! Top-k evaluation over seen/unseen candidate sets and report rendering.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AssembledDataset, ClassVectorSet, DatasetRow};
use crate::error::{Error, Result};
use crate::network::{init_model, ArchConfig, Model};
use crate::semantic_space::{
    IndexOptions, LinearScan, NeighborSearch, RankedLabels, SemanticIndex,
};
use crate::trainer::{train, TrainConfig, TrainHistory};

const PREDICT_CHUNK: usize = 256;

/// Which class vectors a prediction competes against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMode {
    AllClasses,
    UnseenOnly,
    SeenOnly,
}

impl CandidateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CandidateMode::AllClasses => "all_classes",
            CandidateMode::UnseenOnly => "unseen_only",
            CandidateMode::SeenOnly => "seen_only",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchBackend {
    #[default]
    KdTree,
    LinearScan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub candidate_mode: CandidateMode,
    pub seen_holdout_fraction: f64,
    pub seed: u64,
    pub normalize_class_vectors: bool,
    #[serde(default)]
    pub search: SearchBackend,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            candidate_mode: CandidateMode::UnseenOnly,
            seen_holdout_fraction: 0.3,
            seed: 0,
            normalize_class_vectors: false,
            search: SearchBackend::KdTree,
        }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg(format!(
                "ks must be positive and strictly ascending, got {:?}",
                self.ks
            )));
        }
        if !(self.seen_holdout_fraction > 0.0 && self.seen_holdout_fraction < 1.0) {
            return Err(Error::arg(format!(
                "holdout fraction must be in (0, 1), got {}",
                self.seen_holdout_fraction
            )));
        }
        Ok(())
    }

    fn max_k(&self) -> usize {
        *self.ks.last().expect("validated")
    }
}

/// Accuracy per k for one candidate set. `None` when undefined (no samples,
/// or k larger than the candidate set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub candidates: usize,
    pub accuracy: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    #[serde(rename = "true")]
    pub true_label: String,
    pub ranked: Vec<crate::semantic_space::Neighbor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub n: usize,
    /// Accuracies for `config.candidate_mode`.
    pub accuracy: BTreeMap<String, Option<f64>>,
    /// Accuracies for the primary mode and every additionally reported mode.
    pub modes: BTreeMap<String, ModeResult>,
    /// Ranked predictions in the primary mode, truncated to the largest k.
    pub samples: Vec<SampleResult>,
}

impl EvalReport {
    pub fn top(&self, k: usize) -> Option<f64> {
        self.accuracy.get(&format!("top{k}")).copied().flatten()
    }

    pub fn mode_top(&self, mode: CandidateMode, k: usize) -> Option<f64> {
        self.modes
            .get(mode.as_str())
            .and_then(|m| m.accuracy.get(&format!("top{k}")).copied().flatten())
    }
}

/// True iff `true_label` is among the first `k` ranked labels.
pub fn top_k_hit(ranked: &RankedLabels, true_label: &str, k: usize) -> bool {
    ranked.labels().take(k).any(|l| l == true_label)
}

/// Candidate labels for a mode. Unseen means every class-vector label the
/// model was not trained on.
pub fn candidate_labels(mode: CandidateMode, seen: &[String], cv: &ClassVectorSet) -> Vec<String> {
    let seen_set: HashSet<&str> = seen.iter().map(String::as_str).collect();
    match mode {
        CandidateMode::AllClasses => cv.labels().to_vec(),
        CandidateMode::SeenOnly => seen.to_vec(),
        CandidateMode::UnseenOnly => cv
            .labels()
            .iter()
            .filter(|l| !seen_set.contains(l.as_str()))
            .cloned()
            .collect(),
    }
}

fn build_search(
    cv: &ClassVectorSet,
    candidates: &[String],
    config: &EvalConfig,
) -> Result<Box<dyn NeighborSearch + Sync>> {
    let options = IndexOptions {
        normalize: config.normalize_class_vectors,
    };
    Ok(match config.search {
        SearchBackend::KdTree => Box::new(SemanticIndex::build(cv, Some(candidates), options)?),
        SearchBackend::LinearScan => Box::new(LinearScan::build(cv, Some(candidates), options)?),
    })
}

fn secondary_modes(mode: CandidateMode) -> &'static [CandidateMode] {
    match mode {
        CandidateMode::UnseenOnly | CandidateMode::SeenOnly => &[CandidateMode::AllClasses],
        CandidateMode::AllClasses => &[],
    }
}

/// Scores precomputed semantic predictions (`[rows × dim]`, row-aligned with
/// `rows`) against the class vectors.
pub fn evaluate_predictions(
    predictions: &[f32],
    rows: &[DatasetRow],
    cv: &ClassVectorSet,
    seen_labels: &[String],
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let dim = cv.dim();
    if predictions.len() != rows.len() * dim {
        return Err(Error::arg(
            "predictions do not match rows and class-vector dim",
        ));
    }
    let mut report = EvalReport {
        config: config.clone(),
        n: rows.len(),
        accuracy: BTreeMap::new(),
        modes: BTreeMap::new(),
        samples: Vec::with_capacity(rows.len()),
    };

    for (pass, &mode) in std::iter::once(&config.candidate_mode)
        .chain(secondary_modes(config.candidate_mode))
        .enumerate()
    {
        let primary = pass == 0;
        let candidates = candidate_labels(mode, seen_labels, cv);
        if candidates.is_empty() {
            return Err(Error::arg(format!(
                "no candidate labels for {}",
                mode.as_str()
            )));
        }
        if primary {
            if candidates.len() < config.max_k() {
                return Err(Error::arg(format!(
                    "{} has {} candidates, fewer than k={}",
                    mode.as_str(),
                    candidates.len(),
                    config.max_k()
                )));
            }
            let set: HashSet<&str> = candidates.iter().map(String::as_str).collect();
            if let Some(r) = rows.iter().find(|r| !set.contains(r.label.as_str())) {
                return Err(Error::arg(format!(
                    "row '{}' has label '{}' outside the {} candidate set",
                    r.id,
                    r.label,
                    mode.as_str()
                )));
            }
        }
        let search = build_search(cv, &candidates, config)?;
        let depth = config.max_k().min(candidates.len());
        let ranked_all: Vec<RankedLabels> = predictions
            .par_chunks_exact(dim)
            .map(|pred| search.query_k_nearest(pred, depth))
            .collect::<Result<_>>()?;
        let mut hits = vec![0usize; config.ks.len()];
        for (row, ranked) in rows.iter().zip(ranked_all) {
            for (h, &k) in hits.iter_mut().zip(&config.ks) {
                if k <= depth && top_k_hit(&ranked, &row.label, k) {
                    *h += 1;
                }
            }
            if primary {
                report.samples.push(SampleResult {
                    id: row.id.clone(),
                    true_label: row.label.clone(),
                    ranked: ranked.entries,
                });
            }
        }
        let accuracy: BTreeMap<String, Option<f64>> = config
            .ks
            .iter()
            .zip(&hits)
            .map(|(&k, &h)| {
                let acc = (!rows.is_empty() && k <= candidates.len())
                    .then(|| h as f64 / rows.len() as f64);
                (format!("top{k}"), acc)
            })
            .collect();
        if primary {
            report.accuracy = accuracy.clone();
        }
        report.modes.insert(
            mode.as_str().to_owned(),
            ModeResult {
                candidates: candidates.len(),
                accuracy,
            },
        );
    }
    Ok(report)
}

/// Semantic-layer predictions for every row, in row order.
pub fn predict_rows(model: &Model<f32>, rows: &[DatasetRow]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(rows.len() * model.semantic_dim());
    for chunk in rows.chunks(PREDICT_CHUNK) {
        let images: Vec<f32> = chunk.iter().flat_map(|r| r.image.iter().copied()).collect();
        let texts: Vec<f32> = chunk.iter().flat_map(|r| r.text.iter().copied()).collect();
        out.extend(model.predict_semantic_batch(&images, &texts, chunk.len())?);
    }
    Ok(out)
}

/// Predicts each row's semantic vector and ranks candidate labels by distance.
pub fn evaluate(
    model: &Model<f32>,
    dataset: &AssembledDataset,
    cv: &ClassVectorSet,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if cv.dim() != model.semantic_dim() {
        return Err(Error::Mismatch(format!(
            "class vectors have dim {}, model predicts {}",
            cv.dim(),
            model.semantic_dim()
        )));
    }
    let predictions = predict_rows(model, &dataset.rows)?;
    evaluate_predictions(&predictions, &dataset.rows, cv, &model.label_order, config)
}

/// Per-class seeded split into (train, holdout). Each class with at least two
/// rows contributes `round(n·fraction)` rows (at least one, at most n−1) to
/// the holdout; smaller classes are excluded with a warning.
pub fn stratified_holdout(
    data: &AssembledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(AssembledDataset, AssembledDataset, Vec<String>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::arg(format!(
            "holdout fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    let mut warnings = Vec::new();
    for (c, mut members) in data.rows_by_class().into_iter().enumerate() {
        if members.len() < 2 {
            let msg = format!(
                "class '{}' has {} samples; excluded from the holdout protocol",
                data.label_order[c],
                members.len()
            );
            warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let h = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
        test_idx.extend_from_slice(&members[..h]);
        train_idx.extend_from_slice(&members[h..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((data.select(&train_idx), data.select(&test_idx), warnings))
}

#[derive(Debug, Clone)]
pub struct SeenEvalOutcome {
    pub report: EvalReport,
    pub history: TrainHistory,
    pub model: Model<f32>,
    pub train_rows: usize,
    pub holdout_rows: usize,
    pub warnings: Vec<String>,
}

/// Seen-class protocol: stratified holdout of the seen rows, training a fresh
/// model on the rest, and top-k over the seen classes on the holdout.
pub fn seen_class_eval(
    arch: &ArchConfig,
    train_config: &TrainConfig,
    data_seen: &AssembledDataset,
    cv: &ClassVectorSet,
    config: &EvalConfig,
) -> Result<SeenEvalOutcome> {
    config.validate()?;
    let (train_set, holdout, warnings) =
        stratified_holdout(data_seen, config.seen_holdout_fraction, config.seed)?;
    let mut model = init_model(cv, &data_seen.label_order, arch)?;
    let history = train(&mut model, &train_set, train_config)?;
    let config = EvalConfig {
        candidate_mode: CandidateMode::SeenOnly,
        ..config.clone()
    };
    let report = evaluate(&model, &holdout, cv, &config)?;
    Ok(SeenEvalOutcome {
        report,
        history,
        model,
        train_rows: train_set.len(),
        holdout_rows: holdout.len(),
        warnings,
    })
}

/// Mean and sample standard deviation of each accuracy across repeats.
pub fn summarize(reports: &[EvalReport]) -> BTreeMap<String, BTreeMap<String, (f64, f64)>> {
    let mut values: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (mode, res) in &r.modes {
            for (k, acc) in &res.accuracy {
                if let Some(a) = acc {
                    values
                        .entry((mode.clone(), k.clone()))
                        .or_default()
                        .push(*a);
                }
            }
        }
    }
    let mut out: BTreeMap<String, BTreeMap<String, (f64, f64)>> = BTreeMap::new();
    for ((mode, k), v) in values {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        out.entry(mode).or_default().insert(k, (mean, sd));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

fn percent(acc: Option<f64>) -> String {
    acc.map_or_else(|| "n/a".to_owned(), |a| format!("{:.2}%", a * 100.0))
}

/// Renders a report. Text mirrors a results table (one row per candidate
/// mode, one column per k) followed, if `samples` is set, by each sample's
/// nearest labels, nearest first. JSON has sorted keys.
pub fn render_report(report: &EvalReport, format: ReportFormat, samples: bool) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut value = serde_json::to_value(report)?;
            if !samples {
                value["samples"] = serde_json::Value::Array(Vec::new());
            }
            Ok(serde_json::to_string_pretty(&value)? + "\n")
        }
        ReportFormat::Text => {
            let mut s = String::new();
            let cfg = &report.config;
            let _ = writeln!(
                s,
                "mode={} N={} ks={:?} normalize={} seed={}",
                cfg.candidate_mode.as_str(),
                report.n,
                cfg.ks,
                cfg.normalize_class_vectors,
                cfg.seed
            );
            let _ = write!(s, "{:<13} {:>10}", "candidates", "size");
            for k in &cfg.ks {
                let _ = write!(s, " {:>10}", format!("top-{k}"));
            }
            s.push('\n');
            let mut modes: Vec<(&String, &ModeResult)> = report.modes.iter().collect();
            // primary first
            modes.sort_by_key(|(m, _)| m.as_str() != cfg.candidate_mode.as_str());
            for (mode, res) in modes {
                let _ = write!(s, "{:<13} {:>10}", mode, res.candidates);
                for k in &cfg.ks {
                    let acc = res.accuracy.get(&format!("top{k}")).copied().flatten();
                    let _ = write!(s, " {:>10}", percent(acc));
                }
                s.push('\n');
            }
            if samples && !report.samples.is_empty() {
                s.push('\n');
                for sample in &report.samples {
                    let labels: Vec<String> = sample
                        .ranked
                        .iter()
                        .map(|n| format!("{} ({:.4})", n.label, n.distance))
                        .collect();
                    let _ = writeln!(
                        s,
                        "{}  true={}  nearest: {}",
                        sample.id,
                        sample.true_label,
                        labels.join(", ")
                    );
                }
            }
            Ok(s)
        }
    }
}
