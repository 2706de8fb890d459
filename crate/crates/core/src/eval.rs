//! Accuracy/length evaluation, difficulty stratification against a baseline
//! report, and the (τ, β) sensitivity sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CesError, Result};
use crate::policy::FeatureMap;
use crate::records::{check_version, read_jsonl_numbered, write_jsonl, SCHEMA_VERSION};
use crate::rollout::{decode, Decoding};
use crate::streams::stream;
use crate::tasks::{check_accuracy, generate_instance, TaskInstance, Tier, TierMix};
use crate::trainer::train_loop;
use crate::Params;

pub const DEFAULT_TAU_GRID: [f64; 3] = [0.005, 0.01, 0.05];
pub const DEFAULT_BETA_GRID: [f64; 3] = [0.4, 1.0, 2.0];

/// Baseline accuracy strictly above this is "simple".
pub const SIMPLE_THRESHOLD: f64 = 0.5;

/// A frozen, seed-generated question set with ids `0..count`.
pub fn question_set(seed: u64, count: usize, mix: TierMix) -> Vec<TaskInstance> {
    (0..count as u64)
        .map(|id| generate_instance(&mut stream(seed, "questions", &[id]), mix, id))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub generations: usize,
    pub temperature: f64,
    pub budget: usize,
    pub seed: u64,
}

impl EvalSettings {
    pub fn from_config(config: &RunConfig) -> Self {
        EvalSettings {
            generations: config.eval.generations,
            temperature: config.eval.temperature,
            budget: config.train.budget,
            seed: config.eval.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionResult {
    pub id: u64,
    pub tier: Tier,
    pub correct: usize,
    pub lengths: Vec<usize>,
}

impl QuestionResult {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.lengths.len() as f64
    }

    pub fn mean_length(&self) -> f64 {
        self.lengths.iter().sum::<usize>() as f64 / self.lengths.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub questions: usize,
    pub accuracy: f64,
    pub mean_length: f64,
}

impl Aggregate {
    fn over<'a>(results: impl IntoIterator<Item = &'a QuestionResult>) -> Option<Aggregate> {
        let (mut n, mut acc, mut len) = (0usize, 0.0, 0.0);
        for q in results {
            n += 1;
            acc += q.accuracy();
            len += q.mean_length();
        }
        (n > 0).then(|| Aggregate {
            questions: n,
            accuracy: acc / n as f64,
            mean_length: len / n as f64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Simple,
    Difficult,
}

impl Stratum {
    pub fn of(baseline_accuracy: f64) -> Stratum {
        if baseline_accuracy > SIMPLE_THRESHOLD {
            Stratum::Simple
        } else {
            Stratum::Difficult
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StratifiedQuestion {
    pub id: u64,
    pub stratum: Stratum,
    pub baseline_accuracy: f64,
    pub baseline_mean_length: f64,
    pub new_accuracy: f64,
    pub new_mean_length: f64,
}

impl StratifiedQuestion {
    pub fn length_delta(&self) -> f64 {
        self.new_mean_length - self.baseline_mean_length
    }
}

/// Means over the questions of one stratum; `None` fields when it is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub stratum: Stratum,
    pub questions: usize,
    pub baseline_accuracy: Option<f64>,
    pub baseline_mean_length: Option<f64>,
    pub new_accuracy: Option<f64>,
    pub new_mean_length: Option<f64>,
    pub length_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub questions: Vec<StratifiedQuestion>,
    pub strata: [StratumSummary; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub generations: usize,
    pub temperature: f64,
    pub questions: Vec<QuestionResult>,
    pub tiers: BTreeMap<Tier, Aggregate>,
    pub overall: Aggregate,
    pub comparison: Option<Comparison>,
}

impl EvalReport {
    /// Rebuilds tier and overall aggregates from per-question results.
    pub fn from_questions(generations: usize, temperature: f64, mut questions: Vec<QuestionResult>) -> Result<Self> {
        questions.sort_by_key(|q| q.id);
        let overall = Aggregate::over(&questions).ok_or_else(|| CesError::Input("empty question set".into()))?;
        let mut tiers = BTreeMap::new();
        for tier in [Tier::Easy, Tier::Hard] {
            if let Some(a) = Aggregate::over(questions.iter().filter(|q| q.tier == tier)) {
                tiers.insert(tier, a);
            }
        }
        Ok(EvalReport {
            generations,
            temperature,
            questions,
            tiers,
            overall,
            comparison: None,
        })
    }
}

/// Samples `generations` responses per question and scores them.
pub fn evaluate(params: &Params, fmap: &FeatureMap, questions: &[TaskInstance], settings: &EvalSettings) -> Result<EvalReport> {
    if questions.is_empty() {
        return Err(CesError::Input("empty question set".into()));
    }
    if settings.generations == 0 {
        return Err(CesError::Input("generations must be positive".into()));
    }
    let decoding = Decoding::Sample {
        temperature: settings.temperature,
    };
    let results = questions
        .par_iter()
        .map(|q| {
            let mut correct = 0;
            let mut lengths = Vec::with_capacity(settings.generations);
            for g in 0..settings.generations as u64 {
                let mut rng = stream(settings.seed, "eval", &[q.id, g]);
                let tokens = decode(params, fmap, q, settings.budget, decoding, &mut rng)?;
                correct += check_accuracy(q, &tokens) as usize;
                lengths.push(tokens.len());
            }
            Ok(QuestionResult {
                id: q.id,
                tier: q.tier,
                correct,
                lengths,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_questions(settings.generations, settings.temperature, results)
}

fn summarize(stratum: Stratum, rows: &[StratifiedQuestion]) -> StratumSummary {
    let members: Vec<_> = rows.iter().filter(|r| r.stratum == stratum).collect();
    let n = members.len();
    let mean = |f: &dyn Fn(&StratifiedQuestion) -> f64| {
        (n > 0).then(|| members.iter().map(|r| f(r)).sum::<f64>() / n as f64)
    };
    StratumSummary {
        stratum,
        questions: n,
        baseline_accuracy: mean(&|r| r.baseline_accuracy),
        baseline_mean_length: mean(&|r| r.baseline_mean_length),
        new_accuracy: mean(&|r| r.new_accuracy),
        new_mean_length: mean(&|r| r.new_mean_length),
        length_delta: mean(&|r| r.length_delta()),
    }
}

/// Labels every question by its baseline accuracy and compares lengths.
pub fn stratify(baseline: &EvalReport, new: &EvalReport) -> Result<Comparison> {
    let base: BTreeMap<u64, &QuestionResult> = baseline.questions.iter().map(|q| (q.id, q)).collect();
    let fresh: BTreeMap<u64, &QuestionResult> = new.questions.iter().map(|q| (q.id, q)).collect();
    if base.len() != baseline.questions.len() || fresh.len() != new.questions.len() {
        return Err(CesError::Input("duplicate question id in report".into()));
    }
    if !base.keys().eq(fresh.keys()) {
        let missing = base
            .keys()
            .find(|id| !fresh.contains_key(id))
            .or_else(|| fresh.keys().find(|id| !base.contains_key(id)))
            .copied()
            .unwrap_or_default();
        return Err(CesError::Input(format!(
            "baseline and new reports cover different question ids (first mismatch: {missing})"
        )));
    }
    let questions: Vec<StratifiedQuestion> = base
        .values()
        .zip(fresh.values())
        .map(|(b, n)| StratifiedQuestion {
            id: b.id,
            stratum: Stratum::of(b.accuracy()),
            baseline_accuracy: b.accuracy(),
            baseline_mean_length: b.mean_length(),
            new_accuracy: n.accuracy(),
            new_mean_length: n.mean_length(),
        })
        .collect();
    let strata = [
        summarize(Stratum::Simple, &questions),
        summarize(Stratum::Difficult, &questions),
    ];
    Ok(Comparison { questions, strata })
}

/// One line of a report file, discriminated by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReportRecord {
    Question {
        schema_version: u32,
        id: u64,
        tier: Tier,
        correct: usize,
        accuracy: f64,
        lengths: Vec<usize>,
        mean_length: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stratum: Option<Stratum>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        baseline_accuracy: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        baseline_mean_length: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        length_delta: Option<f64>,
    },
    Tier {
        schema_version: u32,
        tier: Tier,
        questions: usize,
        accuracy: f64,
        mean_length: f64,
    },
    Overall {
        schema_version: u32,
        generations: usize,
        temperature: f64,
        questions: usize,
        accuracy: f64,
        mean_length: f64,
    },
    Stratum {
        schema_version: u32,
        stratum: Stratum,
        questions: usize,
        baseline_accuracy: Option<f64>,
        baseline_mean_length: Option<f64>,
        new_accuracy: Option<f64>,
        new_mean_length: Option<f64>,
        length_delta: Option<f64>,
    },
}

pub fn report_records(report: &EvalReport) -> Vec<ReportRecord> {
    let strat: BTreeMap<u64, &StratifiedQuestion> = report
        .comparison
        .iter()
        .flat_map(|c| c.questions.iter().map(|q| (q.id, q)))
        .collect();
    let mut out: Vec<ReportRecord> = report
        .questions
        .iter()
        .map(|q| {
            let s = strat.get(&q.id);
            ReportRecord::Question {
                schema_version: SCHEMA_VERSION,
                id: q.id,
                tier: q.tier,
                correct: q.correct,
                accuracy: q.accuracy(),
                lengths: q.lengths.clone(),
                mean_length: q.mean_length(),
                stratum: s.map(|s| s.stratum),
                baseline_accuracy: s.map(|s| s.baseline_accuracy),
                baseline_mean_length: s.map(|s| s.baseline_mean_length),
                length_delta: s.map(|s| s.length_delta()),
            }
        })
        .collect();
    out.extend(report.tiers.iter().map(|(tier, a)| ReportRecord::Tier {
        schema_version: SCHEMA_VERSION,
        tier: *tier,
        questions: a.questions,
        accuracy: a.accuracy,
        mean_length: a.mean_length,
    }));
    out.push(ReportRecord::Overall {
        schema_version: SCHEMA_VERSION,
        generations: report.generations,
        temperature: report.temperature,
        questions: report.overall.questions,
        accuracy: report.overall.accuracy,
        mean_length: report.overall.mean_length,
    });
    if let Some(c) = &report.comparison {
        out.extend(c.strata.iter().map(|s| ReportRecord::Stratum {
            schema_version: SCHEMA_VERSION,
            stratum: s.stratum,
            questions: s.questions,
            baseline_accuracy: s.baseline_accuracy,
            baseline_mean_length: s.baseline_mean_length,
            new_accuracy: s.new_accuracy,
            new_mean_length: s.new_mean_length,
            length_delta: s.length_delta,
        }));
    }
    out
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_jsonl(path, report_records(report))
}

/// Reads the per-question lines of a report; aggregates are recomputed.
pub fn read_report(path: &Path) -> Result<EvalReport> {
    let records: Vec<(usize, ReportRecord)> = read_jsonl_numbered(path)?;
    let schema = |line: usize, message: String| CesError::Schema {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut questions = Vec::new();
    let mut header = None;
    for (line, rec) in records {
        match rec {
            ReportRecord::Question {
                schema_version,
                id,
                tier,
                correct,
                lengths,
                ..
            } => {
                check_version(schema_version).map_err(|m| schema(line, m))?;
                if lengths.is_empty() || correct > lengths.len() {
                    return Err(schema(line, format!("question {id} has inconsistent counts")));
                }
                questions.push(QuestionResult {
                    id,
                    tier,
                    correct,
                    lengths,
                });
            }
            ReportRecord::Overall {
                schema_version,
                generations,
                temperature,
                ..
            } => {
                check_version(schema_version).map_err(|m| schema(line, m))?;
                header = Some((generations, temperature));
            }
            ReportRecord::Tier { schema_version, .. } | ReportRecord::Stratum { schema_version, .. } => {
                check_version(schema_version).map_err(|m| schema(line, m))?;
            }
        }
    }
    let (generations, temperature) =
        header.ok_or_else(|| CesError::Input(format!("{}: report has no overall record", path.display())))?;
    EvalReport::from_questions(generations, temperature, questions)
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

pub fn report_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>9} {:>8} {:>8}", "slice", "questions", "acc", "len");
    for (tier, a) in &report.tiers {
        let name = format!("{tier:?}").to_lowercase();
        let _ = writeln!(s, "{name:<10} {:>9} {:>8.4} {:>8.2}", a.questions, a.accuracy, a.mean_length);
    }
    let o = report.overall;
    let _ = writeln!(s, "{:<10} {:>9} {:>8.4} {:>8.2}", "overall", o.questions, o.accuracy, o.mean_length);
    if let Some(c) = &report.comparison {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<10} {:>9} {:>9} {:>8} {:>8} {:>8}",
            "stratum", "questions", "base_acc", "base_len", "new_len", "delta"
        );
        for st in &c.strata {
            let name = format!("{:?}", st.stratum).to_lowercase();
            let _ = writeln!(
                s,
                "{name:<10} {:>9} {:>9} {:>8} {:>8} {:>8}",
                st.questions,
                opt(st.baseline_accuracy, 4),
                opt(st.baseline_mean_length, 2),
                opt(st.new_mean_length, 2),
                opt(st.length_delta, 2)
            );
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub tau: f64,
    pub beta: f64,
    pub outcome: std::result::Result<Aggregate, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub taus: Vec<f64>,
    pub betas: Vec<f64>,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn succeeded(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_ok()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRecord {
    pub schema_version: u32,
    pub tau: f64,
    pub beta: f64,
    pub accuracy: Option<f64>,
    pub mean_length: Option<f64>,
    pub error: Option<String>,
}

/// Trains one policy per (τ, β) cell from the same starting point and seed,
/// then evaluates each on `questions`. β sets both β₁ and β₂.
pub fn sweep(
    base: &RunConfig,
    initial: &Params,
    questions: &[TaskInstance],
    taus: &[f64],
    betas: &[f64],
) -> Result<SweepResult> {
    if taus.is_empty() || betas.is_empty() {
        return Err(CesError::Input("sweep grids must be non-empty".into()));
    }
    if questions.is_empty() {
        return Err(CesError::Input("empty question set".into()));
    }
    let settings = EvalSettings::from_config(base);
    let fmap = base.feature_map();
    let mut cells = Vec::with_capacity(taus.len() * betas.len());
    for &tau in taus {
        for &beta in betas {
            let mut cfg = base.clone();
            cfg.shaping.tau = tau;
            cfg.shaping.beta1 = beta;
            cfg.shaping.beta2 = beta;
            let outcome = cfg
                .validate()
                .and_then(|_| train_loop(&cfg, initial.clone(), |_| Ok(())))
                .and_then(|r| evaluate(&r.params, &fmap, questions, &settings))
                .map(|report| report.overall)
                .map_err(|e| e.to_string());
            cells.push(SweepCell { tau, beta, outcome });
        }
    }
    Ok(SweepResult {
        taus: taus.to_vec(),
        betas: betas.to_vec(),
        cells,
    })
}

pub fn sweep_records(result: &SweepResult) -> Vec<SweepRecord> {
    result
        .cells
        .iter()
        .map(|c| SweepRecord {
            schema_version: SCHEMA_VERSION,
            tau: c.tau,
            beta: c.beta,
            accuracy: c.outcome.as_ref().ok().map(|a| a.accuracy),
            mean_length: c.outcome.as_ref().ok().map(|a| a.mean_length),
            error: c.outcome.as_ref().err().cloned(),
        })
        .collect()
}

/// Rows are τ, columns β; each cell reads `acc / len`.
pub fn sweep_table(result: &SweepResult) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:>8}", "tau\\beta");
    for b in &result.betas {
        let _ = write!(s, " {b:>15}");
    }
    let _ = writeln!(s);
    for (i, tau) in result.taus.iter().enumerate() {
        let _ = write!(s, "{tau:>8}");
        for j in 0..result.betas.len() {
            let cell = &result.cells[i * result.betas.len() + j];
            let text = match &cell.outcome {
                Ok(a) => format!("{:.3} / {:.2}", a.accuracy, a.mean_length),
                Err(_) => "failed".to_string(),
            };
            let _ = write!(s, " {text:>15}");
        }
        let _ = writeln!(s);
    }
    s
}
