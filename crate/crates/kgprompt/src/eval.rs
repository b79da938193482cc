//! Biometric evaluation: score sets, threshold selection, the full metric
//! family (FAR, FRR, ROC, EER, HTER, AUC, APCER, BPCER, ACER, BPCER@APCER)
//! and the subject-disjoint protocol runners.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::describe::DescriptionCache;
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::manifest::{EncodedSample, Label, Split};
use crate::model::{ModelSpec, ModelState};
use crate::trainer::{fit, TrainConfig, TrainSample};

const AUTO_SPLIT_SALT: u64 = 0x8000_0000_4c69_7e2b;

/// Tolerance for deciding a target APCER is exactly attainable.
const TARGET_EPS: f64 = 1e-9;

/// One attack score with the type of artifact that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackScore {
    pub score: f64,
    pub attack_type: String,
}

/// Genuine and attack scores of one evaluation set.
///
/// Scores are the real-face probability of each sample; higher means more
/// genuine. A sample is accepted when its score is >= the threshold.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    genuine: Vec<f64>,
    attacks: Vec<AttackScore>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, attacks: Vec<AttackScore>) -> Result<Self> {
        if genuine.iter().any(|s| !s.is_finite()) || attacks.iter().any(|a| !a.score.is_finite()) {
            return Err(Error::MalformedFile("scores must be finite".into()));
        }
        Ok(ScoreSet { genuine, attacks })
    }

    pub fn genuine(&self) -> &[f64] {
        &self.genuine
    }

    pub fn attacks(&self) -> &[AttackScore] {
        &self.attacks
    }

    /// Appends another set's scores into this one.
    pub fn absorb(&mut self, other: ScoreSet) {
        self.genuine.extend(other.genuine);
        self.attacks.extend(other.attacks);
    }

    fn check_both(&self) -> Result<()> {
        if self.genuine.is_empty() {
            return Err(Error::EmptyClass("real".into()));
        }
        if self.attacks.is_empty() {
            return Err(Error::EmptyClass("mask".into()));
        }
        Ok(())
    }

    fn far_at(&self, threshold: f64) -> f64 {
        let accepted = self.attacks.iter().filter(|a| a.score >= threshold).count();
        accepted as f64 / self.attacks.len() as f64
    }

    fn frr_at(&self, threshold: f64) -> f64 {
        let rejected = self.genuine.iter().filter(|&&s| s < threshold).count();
        rejected as f64 / self.genuine.len() as f64
    }
}

/// Fraction of attack scores accepted (>= threshold).
pub fn far(s: &ScoreSet, threshold: f64) -> Result<f64> {
    s.check_both()?;
    Ok(s.far_at(threshold))
}

/// Fraction of genuine scores rejected (< threshold).
pub fn frr(s: &ScoreSet, threshold: f64) -> Result<f64> {
    s.check_both()?;
    Ok(s.frr_at(threshold))
}

/// One operating point of the ROC curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Step-function ROC: one point per distinct score plus the two sentinels,
/// thresholds ascending.
pub fn roc_curve(s: &ScoreSet) -> Result<Vec<RocPoint>> {
    s.check_both()?;
    let mut candidates: Vec<f64> = s
        .genuine
        .iter()
        .copied()
        .chain(s.attacks.iter().map(|a| a.score))
        .collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    candidates.dedup();
    let mut thresholds = Vec::with_capacity(candidates.len() + 2);
    thresholds.push(f64::NEG_INFINITY);
    thresholds.extend(candidates);
    thresholds.push(f64::INFINITY);
    Ok(thresholds
        .into_iter()
        .map(|threshold| RocPoint {
            threshold,
            far: s.far_at(threshold),
            frr: s.frr_at(threshold),
        })
        .collect())
}

/// A decision threshold and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Threshold {
    pub value: f64,
    pub source: String,
}

/// The ROC point closest to FAR = FRR on the development set.
///
/// Ties go to the smaller FAR + FRR, then the smaller threshold; the
/// returned EER is the midpoint (FAR + FRR) / 2 there, as a fraction.
pub fn eer_threshold(dev: &ScoreSet) -> Result<(Threshold, f64)> {
    let roc = roc_curve(dev)?;
    let best = roc
        .iter()
        .min_by(|a, b| {
            let key_a = ((a.far - a.frr).abs(), a.far + a.frr, a.threshold);
            let key_b = ((b.far - b.frr).abs(), b.far + b.frr, b.threshold);
            key_a.partial_cmp(&key_b).expect("finite rates")
        })
        .expect("roc has sentinel points");
    let eer = (best.far + best.frr) / 2.0;
    Ok((
        Threshold {
            value: best.threshold,
            source: "dev-eer".into(),
        },
        eer,
    ))
}

/// Half total error rate on a test set at a dev-chosen threshold.
pub fn hter(test: &ScoreSet, threshold: &Threshold) -> Result<f64> {
    test.check_both()?;
    Ok((test.far_at(threshold.value) + test.frr_at(threshold.value)) / 2.0)
}

/// Area under the ROC curve, as a fraction; ties count half.
pub fn auc(s: &ScoreSet) -> Result<f64> {
    let roc = roc_curve(s)?;
    let mut area = 0.0;
    for pair in roc.windows(2) {
        let width = pair[0].far - pair[1].far;
        let height = (1.0 - pair[0].frr) + (1.0 - pair[1].frr);
        area += width * height / 2.0;
    }
    Ok(area)
}

/// ISO-style presentation attack rates at a threshold: APCER is the worst
/// per-attack-type acceptance rate, BPCER the genuine rejection rate, ACER
/// their mean.
pub fn apcer_bpcer_acer(s: &ScoreSet, threshold: f64) -> Result<(f64, f64, f64)> {
    s.check_both()?;
    let mut by_type: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for attack in &s.attacks {
        let entry = by_type.entry(attack.attack_type.as_str()).or_insert((0, 0));
        entry.1 += 1;
        if attack.score >= threshold {
            entry.0 += 1;
        }
    }
    let apcer = by_type
        .values()
        .map(|&(accepted, total)| accepted as f64 / total as f64)
        .fold(0.0, f64::max);
    let bpcer = s.frr_at(threshold);
    Ok((apcer, bpcer, (apcer + bpcer) / 2.0))
}

/// BPCER at the operating point where the pooled APCER equals `target`.
///
/// The target must be exactly attainable on this finite set: among candidate
/// thresholds (distinct scores plus sentinels) with APCER equal to the
/// target, the largest is chosen. Otherwise the attack-count granularity
/// makes the point unreachable and an error reports why.
pub fn bpcer_at_apcer(s: &ScoreSet, target: f64) -> Result<f64> {
    s.check_both()?;
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidConfig(format!(
            "APCER target must be in [0,1], got {target}"
        )));
    }
    let roc = roc_curve(s)?;
    let best = roc
        .iter()
        .rev()
        .find(|point| (point.far - target).abs() <= TARGET_EPS);
    match best {
        Some(point) => Ok(point.frr),
        None => {
            let n = s.attacks.len();
            Err(Error::UnreachableOperatingPoint {
                target,
                reason: format!(
                    "{n} attack scores give APCER granularity {:.6}; no threshold attains the target exactly",
                    1.0 / n as f64
                ),
            })
        }
    }
}

/// Percentage form of a fraction.
fn pct(fraction: f64) -> f64 {
    fraction * 100.0
}

/// Mean and population standard deviation, in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MetricSummary {
        mean,
        std: var.sqrt(),
    }
}

/// Metrics of one protocol round, as percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_pool: String,
    pub threshold: f64,
    pub dev_eer: f64,
    pub hter: f64,
    pub auc: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

/// Full protocol result: per-round metrics, their mean and spread, the
/// pooled-test BPCER@APCER points and the pooled ROC curve.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub protocol: String,
    pub rounds: Vec<RoundMetrics>,
    pub eer: MetricSummary,
    pub hter: MetricSummary,
    pub auc: MetricSummary,
    pub apcer: MetricSummary,
    pub bpcer: MetricSummary,
    pub acer: MetricSummary,
    pub b_at_a_01: Option<f64>,
    pub b_at_a_001: Option<f64>,
    pub b_at_a_note: Option<String>,
    pub roc: Vec<RocPoint>,
}

fn class_for_label(graph: &KnowledgeGraph, label: Label) -> Result<usize> {
    let name = match label {
        Label::Real => "real face",
        Label::Mask => "3D mask",
    };
    graph
        .categories()
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| Error::InvalidConfig(format!("graph does not define the `{name}` category")))
}

/// Scores samples with a trained model: each sample's real-face probability.
pub fn score_samples(model: &ModelState, samples: &[&EncodedSample]) -> Result<ScoreSet> {
    let real = model
        .class_index("real face")
        .ok_or_else(|| Error::InvalidConfig("model lacks the `real face` class".into()))?;
    let mut genuine = Vec::new();
    let mut attacks = Vec::new();
    for sample in samples {
        let p_real = model.score(&sample.features)?[real];
        match sample.label {
            Label::Real => genuine.push(p_real),
            Label::Mask => attacks.push(AttackScore {
                score: p_real,
                attack_type: sample.attack_type.clone(),
            }),
        }
    }
    ScoreSet::new(genuine, attacks)
}

/// Converts encoded samples into training pairs with graph class indices.
pub fn to_train_samples(
    graph: &KnowledgeGraph,
    samples: &[&EncodedSample],
) -> Result<Vec<TrainSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(TrainSample {
                features: s.features.clone(),
                label: class_for_label(graph, s.label)?,
            })
        })
        .collect()
}

fn b_at_a_fields(pooled: &ScoreSet) -> Result<(Option<f64>, Option<f64>, Option<String>)> {
    let mut notes = Vec::new();
    let mut compute = |target: f64| -> Result<Option<f64>> {
        match bpcer_at_apcer(pooled, target) {
            Ok(v) => Ok(Some(pct(v))),
            Err(Error::UnreachableOperatingPoint { target, reason }) => {
                notes.push(format!("APCER={}%: {reason}", pct(target)));
                Ok(None)
            }
            Err(e) => Err(e),
        }
    };
    let b01 = compute(0.1)?;
    let b001 = compute(0.01)?;
    let note = if notes.is_empty() {
        None
    } else {
        Some(notes.join("; "))
    };
    Ok((b01, b001, note))
}

fn finish_report(
    protocol: &str,
    rounds: Vec<RoundMetrics>,
    pooled: &ScoreSet,
) -> Result<EvaluationReport> {
    let collect = |f: &dyn Fn(&RoundMetrics) -> f64| -> Vec<f64> { rounds.iter().map(f).collect() };
    let (b_at_a_01, b_at_a_001, b_at_a_note) = b_at_a_fields(pooled)?;
    Ok(EvaluationReport {
        protocol: protocol.to_string(),
        eer: summarize(&collect(&|r| r.dev_eer)),
        hter: summarize(&collect(&|r| r.hter)),
        auc: summarize(&collect(&|r| r.auc)),
        apcer: summarize(&collect(&|r| r.apcer)),
        bpcer: summarize(&collect(&|r| r.bpcer)),
        acer: summarize(&collect(&|r| r.acer)),
        b_at_a_01,
        b_at_a_001,
        b_at_a_note,
        roc: roc_curve(pooled)?,
        rounds,
    })
}

fn round_metrics(
    round: usize,
    test_pool: String,
    model: &ModelState,
    dev: &[&EncodedSample],
    test: &[&EncodedSample],
) -> Result<(RoundMetrics, ScoreSet)> {
    let dev_scores = score_samples(model, dev)?;
    let (threshold, dev_eer) = eer_threshold(&dev_scores)?;
    let test_scores = score_samples(model, test)?;
    let hter_value = hter(&test_scores, &threshold)?;
    let auc_value = auc(&test_scores)?;
    let (apcer_value, bpcer_value, acer_value) = apcer_bpcer_acer(&test_scores, threshold.value)?;
    Ok((
        RoundMetrics {
            round,
            test_pool,
            threshold: threshold.value,
            dev_eer: pct(dev_eer),
            hter: pct(hter_value),
            auc: pct(auc_value),
            apcer: pct(apcer_value),
            bpcer: pct(bpcer_value),
            acer: pct(acer_value),
        },
        test_scores,
    ))
}

/// How many subjects each LOOCV round assigns to train and dev.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectProfile {
    pub train_subjects: usize,
    pub dev_subjects: usize,
}

/// Leave-one-subject-out protocol.
///
/// Round r holds out subject r (rotating through the sorted subject list),
/// shuffles the rest with seed + r, takes the profile's train and dev
/// subject counts, fits a fresh model and evaluates on the held-out
/// subject. Split tags in the manifest are ignored; the protocol resplits.
#[allow(clippy::too_many_arguments)]
pub fn run_loocv(
    graph: &KnowledgeGraph,
    cache: &DescriptionCache,
    spec: &ModelSpec,
    train_cfg: &TrainConfig,
    samples: &[EncodedSample],
    profile: &SubjectProfile,
    rounds: usize,
    seed: u64,
) -> Result<EvaluationReport> {
    if rounds == 0 {
        return Err(Error::InvalidConfig("rounds must be at least 1".into()));
    }
    if profile.train_subjects == 0 || profile.dev_subjects == 0 {
        return Err(Error::InvalidConfig(
            "profile needs train and dev subjects".into(),
        ));
    }
    let subjects: Vec<String> = samples
        .iter()
        .map(|s| s.subject.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let needed = 1 + profile.train_subjects + profile.dev_subjects;
    if subjects.len() < needed {
        return Err(Error::TooFewSubjects {
            needed,
            available: subjects.len(),
        });
    }

    let mut round_rows = Vec::with_capacity(rounds);
    let mut pooled = ScoreSet::default();
    for round in 0..rounds {
        let round_seed = seed.wrapping_add(round as u64);
        let held = &subjects[round % subjects.len()];
        let mut rest: Vec<&String> = subjects.iter().filter(|s| *s != held).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(round_seed);
        rest.shuffle(&mut rng);
        let train_set: BTreeSet<&String> = rest[..profile.train_subjects].iter().copied().collect();
        let dev_set: BTreeSet<&String> = rest
            [profile.train_subjects..profile.train_subjects + profile.dev_subjects]
            .iter()
            .copied()
            .collect();

        let train_refs: Vec<&EncodedSample> = samples
            .iter()
            .filter(|s| train_set.contains(&s.subject))
            .collect();
        let dev_refs: Vec<&EncodedSample> = samples
            .iter()
            .filter(|s| dev_set.contains(&s.subject))
            .collect();
        let test_refs: Vec<&EncodedSample> =
            samples.iter().filter(|s| &s.subject == held).collect();

        let mut model = spec.build(graph, cache, round_seed)?;
        let cfg = TrainConfig {
            seed: round_seed,
            ..train_cfg.clone()
        };
        fit(&mut model, &to_train_samples(graph, &train_refs)?, &cfg)?;

        let (row, test_scores) = round_metrics(round, held.clone(), &model, &dev_refs, &test_refs)?;
        round_rows.push(row);
        pooled.absorb(test_scores);
    }
    finish_report("loocv", round_rows, &pooled)
}

fn assign_auto(
    samples: Vec<&EncodedSample>,
    seed: u64,
) -> (Vec<&EncodedSample>, Vec<&EncodedSample>) {
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ AUTO_SPLIT_SALT);
    indices.shuffle(&mut rng);
    let dev_count = (samples.len() / 5).max(1);
    let dev_set: BTreeSet<usize> = indices.into_iter().take(dev_count).collect();
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for (i, sample) in samples.into_iter().enumerate() {
        if dev_set.contains(&i) {
            dev.push(sample);
        } else {
            train.push(sample);
        }
    }
    (train, dev)
}

/// Partitions training-side samples by split tag; `auto` rows become a
/// seeded 80/20 train/dev split with at least one dev sample, `test` rows
/// are dropped.
pub fn train_dev_split(
    samples: &[EncodedSample],
    seed: u64,
) -> (Vec<&EncodedSample>, Vec<&EncodedSample>) {
    let mut train: Vec<&EncodedSample> =
        samples.iter().filter(|s| s.split == Split::Train).collect();
    let mut dev: Vec<&EncodedSample> = samples.iter().filter(|s| s.split == Split::Dev).collect();
    let autos: Vec<&EncodedSample> = samples.iter().filter(|s| s.split == Split::Auto).collect();
    if !autos.is_empty() {
        let (auto_train, auto_dev) = assign_auto(autos, seed);
        train.extend(auto_train);
        dev.extend(auto_dev);
    }
    (train, dev)
}

/// Cross-dataset protocol: fit on the training manifest's train split,
/// calibrate the threshold on its dev split, evaluate on the foreign test
/// manifest. `auto` rows become a seeded 80/20 train/dev split on the
/// training side and all-test on the test side.
pub fn run_cross_dataset(
    graph: &KnowledgeGraph,
    cache: &DescriptionCache,
    spec: &ModelSpec,
    train_cfg: &TrainConfig,
    train_samples: &[EncodedSample],
    test_samples: &[EncodedSample],
    seed: u64,
) -> Result<EvaluationReport> {
    let train_paths: BTreeSet<&PathBuf> = train_samples.iter().map(|s| &s.path).collect();
    if let Some(shared) = test_samples.iter().find(|s| train_paths.contains(&s.path)) {
        return Err(Error::InvalidConfig(format!(
            "train and test manifests share `{}`; cross-dataset needs disjoint sets",
            shared.path.display()
        )));
    }

    let (train_refs, dev_refs) = train_dev_split(train_samples, seed);
    let test_refs: Vec<&EncodedSample> = test_samples
        .iter()
        .filter(|s| matches!(s.split, Split::Test | Split::Auto))
        .collect();

    let mut model = spec.build(graph, cache, seed)?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    fit(&mut model, &to_train_samples(graph, &train_refs)?, &cfg)?;

    let (row, test_scores) =
        round_metrics(0, "test manifest".into(), &model, &dev_refs, &test_refs)?;
    finish_report("cross", vec![row], &test_scores)
}

fn fmt_threshold(value: f64) -> String {
    if value == f64::NEG_INFINITY {
        "-inf".into()
    } else if value == f64::INFINITY {
        "+inf".into()
    } else {
        format!("{value:.6}")
    }
}

/// Renders the report as structured text, rates as percentages to two
/// decimals, followed by the raw pooled ROC points.
pub fn render_report(report: &EvaluationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "protocol: {}", report.protocol);
    let _ = writeln!(out, "rounds: {}", report.rounds.len());
    let _ = writeln!(out);
    let _ = writeln!(out, "metric   mean     std");
    for (name, summary) in [
        ("EER", &report.eer),
        ("HTER", &report.hter),
        ("AUC", &report.auc),
        ("APCER", &report.apcer),
        ("BPCER", &report.bpcer),
        ("ACER", &report.acer),
    ] {
        let _ = writeln!(
            out,
            "{name:<8} {:>6.2}% {:>6.2}%",
            summary.mean, summary.std
        );
    }
    for (name, value) in [
        ("BPCER@APCER=10%", report.b_at_a_01),
        ("BPCER@APCER=1%", report.b_at_a_001),
    ] {
        match value {
            Some(v) => {
                let _ = writeln!(out, "{name} (pooled test): {v:.2}%");
            }
            None => {
                let _ = writeln!(out, "{name} (pooled test): unreachable");
            }
        }
    }
    if let Some(note) = &report.b_at_a_note {
        let _ = writeln!(out, "note: {note}");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "per round:");
    let _ = writeln!(
        out,
        "round  test_pool  threshold  dev_eer  hter  auc  apcer  bpcer  acer"
    );
    for r in &report.rounds {
        let _ = writeln!(
            out,
            "{}  {}  {}  {:.2}%  {:.2}%  {:.2}%  {:.2}%  {:.2}%  {:.2}%",
            r.round,
            r.test_pool,
            fmt_threshold(r.threshold),
            r.dev_eer,
            r.hter,
            r.auc,
            r.apcer,
            r.bpcer,
            r.acer
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "roc (pooled test):");
    let _ = writeln!(out, "threshold  far  frr");
    for p in &report.roc {
        let _ = writeln!(
            out,
            "{}  {:.2}%  {:.2}%",
            fmt_threshold(p.threshold),
            pct(p.far),
            pct(p.frr)
        );
    }
    out
}

/// Renders the pooled ROC curve as a standalone SVG image.
pub fn render_roc_svg(roc: &[RocPoint]) -> String {
    let size = 440.0;
    let margin = 40.0;
    let span = size - 2.0 * margin;
    let sx = |far: f64| margin + far * span;
    let sy = |tpr: f64| size - margin - tpr * span;
    let points: Vec<String> = roc
        .iter()
        .map(|p| format!("{:.2},{:.2}", sx(p.far), sy(1.0 - p.frr)))
        .collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">"
    );
    let _ = writeln!(
        svg,
        "  <rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        svg,
        "  <line x1=\"{m}\" y1=\"{b}\" x2=\"{e}\" y2=\"{b}\" stroke=\"black\"/>",
        m = margin,
        b = size - margin,
        e = size - margin
    );
    let _ = writeln!(
        svg,
        "  <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>",
        m = margin,
        b = size - margin
    );
    let _ = writeln!(
        svg,
        "  <line x1=\"{m}\" y1=\"{b}\" x2=\"{e}\" y2=\"{m}\" stroke=\"lightgray\" stroke-dasharray=\"4\"/>",
        m = margin,
        b = size - margin,
        e = size - margin
    );
    let _ = writeln!(
        svg,
        "  <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>",
        points.join(" ")
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{x}\" y=\"{y}\" font-size=\"12\">FAR</text>",
        x = size / 2.0 - 12.0,
        y = size - 10.0
    );
    let _ = writeln!(
        svg,
        "  <text x=\"12\" y=\"{y}\" font-size=\"12\" transform=\"rotate(-90 12 {y})\">1 - FRR</text>",
        y = size / 2.0
    );
    let _ = writeln!(svg, "</svg>");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(genuine: &[f64], attacks: &[f64]) -> ScoreSet {
        ScoreSet::new(
            genuine.to_vec(),
            attacks
                .iter()
                .map(|&s| AttackScore {
                    score: s,
                    attack_type: "resin".into(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn typed_set(genuine: &[f64], attacks: &[(f64, &str)]) -> ScoreSet {
        ScoreSet::new(
            genuine.to_vec(),
            attacks
                .iter()
                .map(|&(s, t)| AttackScore {
                    score: s,
                    attack_type: t.into(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn roc_has_perfect_point_under_separation() {
        let s = set(&[0.9, 0.8], &[0.1, 0.2]);
        let roc = roc_curve(&s).unwrap();
        assert!(roc.iter().any(|p| p.far == 0.0 && p.frr == 0.0));
        assert_eq!(roc.len(), 4 + 2);
        assert_eq!(roc.first().unwrap().threshold, f64::NEG_INFINITY);
        assert_eq!(roc.last().unwrap().threshold, f64::INFINITY);
    }

    #[test]
    fn roc_with_all_scores_equal_is_degenerate() {
        let s = set(&[0.5, 0.5], &[0.5]);
        let roc = roc_curve(&s).unwrap();
        for p in &roc {
            assert!(
                (p.far == 1.0 && p.frr == 0.0) || (p.far == 0.0 && p.frr == 1.0),
                "unexpected point {p:?}"
            );
        }
    }

    #[test]
    fn far_frr_match_hand_counts_at_half() {
        let s = set(&[0.9, 0.4], &[0.6, 0.1]);
        assert_eq!(far(&s, 0.5).unwrap(), 0.5);
        assert_eq!(frr(&s, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn metrics_reject_single_class_sets() {
        let no_attacks = ScoreSet::new(vec![0.5], vec![]).unwrap();
        assert!(matches!(
            roc_curve(&no_attacks).unwrap_err(),
            Error::EmptyClass(_)
        ));
        let no_genuine = set(&[], &[0.5]);
        assert!(matches!(
            auc(&no_genuine).unwrap_err(),
            Error::EmptyClass(_)
        ));
    }

    #[test]
    fn eer_is_zero_for_perfect_separation() {
        let s = set(&[0.9, 0.8], &[0.1, 0.2]);
        let (threshold, eer) = eer_threshold(&s).unwrap();
        assert_eq!(eer, 0.0);
        assert!(threshold.value > 0.2 && threshold.value <= 0.8);
    }

    #[test]
    fn eer_on_interleaved_scores_is_half() {
        let s = set(&[0.9, 0.4], &[0.6, 0.1]);
        let (threshold, eer) = eer_threshold(&s).unwrap();
        assert_eq!(eer, 0.5);
        assert_eq!(threshold.value, 0.6);
    }

    #[test]
    fn eer_at_chance_for_identical_distributions() {
        let s = set(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9]);
        let (_, eer) = eer_threshold(&s).unwrap();
        assert_eq!(eer, 0.5);
    }

    #[test]
    fn hter_examples() {
        let s = set(&[0.9, 0.4], &[0.6, 0.1]);
        let theta = Threshold {
            value: 0.5,
            source: "dev-eer".into(),
        };
        assert_eq!(hter(&s, &theta).unwrap(), 0.5);

        let separated = set(&[0.9, 0.8], &[0.1, 0.2]);
        let mid = Threshold {
            value: 0.5,
            source: "dev-eer".into(),
        };
        assert_eq!(hter(&separated, &mid).unwrap(), 0.0);
    }

    #[test]
    fn hter_arithmetic_is_the_mean_of_rates() {
        let genuine: Vec<f64> = (0..10).map(|i| if i < 1 { 0.3 } else { 0.9 }).collect();
        let attacks: Vec<f64> = (0..10).map(|i| if i < 2 { 0.7 } else { 0.1 }).collect();
        let s = set(&genuine, &attacks);
        let theta = Threshold {
            value: 0.5,
            source: "dev-eer".into(),
        };
        assert!((hter(&s, &theta).unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn auc_examples() {
        assert!((auc(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap() - 1.0).abs() < 1e-12);
        assert!((auc(&set(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9])).unwrap() - 0.5).abs() < 1e-12);
        assert!((auc(&set(&[0.9, 0.4], &[0.6, 0.1])).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_reverses_with_labels() {
        let s = set(&[0.9, 0.4, 0.7], &[0.6, 0.1]);
        let reversed = set(&[0.6, 0.1], &[0.9, 0.4, 0.7]);
        let total = auc(&s).unwrap() + auc(&reversed).unwrap();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_counts_ties_half() {
        let s = set(&[0.5], &[0.5]);
        assert!((auc(&s).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn apcer_takes_the_worst_type() {
        let s = typed_set(
            &[0.9, 0.8],
            &[
                (0.6, "resin"),
                (0.1, "resin"),
                (0.1, "silicone"),
                (0.1, "silicone"),
            ],
        );
        let (apcer, bpcer, acer) = apcer_bpcer_acer(&s, 0.5).unwrap();
        assert_eq!(apcer, 0.5);
        assert_eq!(bpcer, 0.0);
        assert_eq!(acer, 0.25);
    }

    #[test]
    fn single_type_apcer_equals_far() {
        let s = set(&[0.9, 0.4], &[0.6, 0.1]);
        let (apcer, _, _) = apcer_bpcer_acer(&s, 0.5).unwrap();
        assert_eq!(apcer, far(&s, 0.5).unwrap());
    }

    #[test]
    fn acer_is_the_mean_of_the_two() {
        let s = typed_set(
            &[0.3, 0.9],
            &[(0.6, "a"), (0.6, "a"), (0.6, "a"), (0.1, "a")],
        );
        let (apcer, bpcer, acer) = apcer_bpcer_acer(&s, 0.5).unwrap();
        assert!((apcer - 0.75).abs() < 1e-12);
        assert!((bpcer - 0.5).abs() < 1e-12);
        assert!((acer - 0.625).abs() < 1e-12);
    }

    #[test]
    fn bpcer_at_apcer_on_large_perfect_separation() {
        let genuine: Vec<f64> = (0..100).map(|i| 0.8 + (i as f64) * 0.001).collect();
        let attacks: Vec<f64> = (0..100).map(|i| 0.1 + (i as f64) * 0.001).collect();
        let s = set(&genuine, &attacks);
        assert_eq!(bpcer_at_apcer(&s, 0.1).unwrap(), 0.0);
        assert_eq!(bpcer_at_apcer(&s, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn bpcer_at_apcer_admits_exactly_one_accept_of_ten() {
        let genuine: Vec<f64> = (0..10).map(|i| 0.5 + (i as f64) * 0.01).collect();
        let attacks: Vec<f64> = (0..10).map(|i| 0.1 + (i as f64) * 0.05).collect();
        let s = set(&genuine, &attacks);
        let bpcer = bpcer_at_apcer(&s, 0.1).unwrap();
        let top_attack = 0.55;
        let expect = genuine.iter().filter(|&&g| g < top_attack).count() as f64 / 10.0;
        assert_eq!(bpcer, expect);
    }

    #[test]
    fn bpcer_at_apcer_unreachable_with_five_attacks() {
        let s = set(&[0.9, 0.8], &[0.1, 0.2, 0.3, 0.4, 0.5]);
        let err = bpcer_at_apcer(&s, 0.01).unwrap_err();
        match err {
            Error::UnreachableOperatingPoint { target, reason } => {
                assert_eq!(target, 0.01);
                assert!(reason.contains("0.2"), "reason: {reason}");
            }
            other => panic!("got {other:?}"),
        }
    }

    #[test]
    fn monotone_transforms_preserve_eer_and_auc() {
        let s = set(&[0.9, 0.4, 0.65], &[0.6, 0.1, 0.3]);
        let squash = |v: f64| 1.0 / (1.0 + (-3.0 * v).exp());
        let transformed = set(
            &[squash(0.9), squash(0.4), squash(0.65)],
            &[squash(0.6), squash(0.1), squash(0.3)],
        );
        let (theta_a, eer_a) = eer_threshold(&s).unwrap();
        let (theta_b, eer_b) = eer_threshold(&transformed).unwrap();
        assert_eq!(eer_a, eer_b);
        assert_eq!(squash(theta_a.value), theta_b.value);
        assert!((auc(&s).unwrap() - auc(&transformed).unwrap()).abs() < 1e-12);
        let h_a = hter(&s, &theta_a).unwrap();
        let h_b = hter(&transformed, &theta_b).unwrap();
        assert_eq!(h_a, h_b);
    }

    #[test]
    fn dev_hter_at_dev_eer_threshold_equals_eer() {
        let s = set(&[0.9, 0.4, 0.65, 0.2], &[0.6, 0.1, 0.3]);
        let (theta, eer) = eer_threshold(&s).unwrap();
        assert_eq!(hter(&s, &theta).unwrap(), eer);
    }

    #[test]
    fn report_rendering_uses_two_decimals() {
        let s = set(&[0.9, 0.8], &[0.1, 0.2]);
        let roc = roc_curve(&s).unwrap();
        let report = EvaluationReport {
            protocol: "cross".into(),
            rounds: vec![RoundMetrics {
                round: 0,
                test_pool: "test manifest".into(),
                threshold: 0.5,
                dev_eer: 1.234,
                hter: 0.0,
                auc: 100.0,
                apcer: 0.0,
                bpcer: 0.0,
                acer: 0.0,
            }],
            eer: MetricSummary {
                mean: 1.234,
                std: 0.0,
            },
            hter: MetricSummary {
                mean: 0.0,
                std: 0.0,
            },
            auc: MetricSummary {
                mean: 100.0,
                std: 0.0,
            },
            apcer: MetricSummary {
                mean: 0.0,
                std: 0.0,
            },
            bpcer: MetricSummary {
                mean: 0.0,
                std: 0.0,
            },
            acer: MetricSummary {
                mean: 0.0,
                std: 0.0,
            },
            b_at_a_01: Some(0.0),
            b_at_a_001: None,
            b_at_a_note: Some("APCER=1%: granularity".into()),
            roc,
        };
        let text = render_report(&report);
        assert!(text.contains("protocol: cross"));
        assert!(text.contains("EER        1.23%"));
        assert!(text.contains("AUC      100.00%"));
        assert!(text.contains("BPCER@APCER=10% (pooled test): 0.00%"));
        assert!(text.contains("BPCER@APCER=1% (pooled test): unreachable"));
        assert!(text.contains("-inf"));
        assert!(text.contains("+inf"));
    }

    #[test]
    fn roc_svg_contains_curve_points() {
        let s = set(&[0.9, 0.8], &[0.1, 0.2]);
        let svg = render_roc_svg(&roc_curve(&s).unwrap());
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    proptest! {
        #[test]
        fn apcer_dominates_pooled_far(seed in 0u64..300) {
            use rand::{Rng, SeedableRng};
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let genuine: Vec<f64> = (0..rng.random_range(1..20)).map(|_| rng.random_range(0.0..1.0)).collect();
            let attacks: Vec<(f64, &str)> = (0..rng.random_range(2..30))
                .map(|_| {
                    let t = if rng.random_bool(0.5) { "resin" } else { "silicone" };
                    (rng.random_range(0.0..1.0), t)
                })
                .collect();
            let s = typed_set(&genuine, &attacks);
            let threshold = rng.random_range(0.0..1.0);
            let (apcer, _, _) = apcer_bpcer_acer(&s, threshold).unwrap();
            let pooled = far(&s, threshold).unwrap();
            prop_assert!(apcer >= pooled - 1e-12);
        }

        #[test]
        fn eer_ties_prefer_smaller_rates_then_smaller_threshold(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let genuine: Vec<f64> = (0..rng.random_range(1..15)).map(|_| rng.random_range(0.0..1.0)).collect();
            let attacks: Vec<f64> = (0..rng.random_range(1..15)).map(|_| rng.random_range(0.0..1.0)).collect();
            let s = set(&genuine, &attacks);
            let (theta, eer) = eer_threshold(&s).unwrap();
            let roc = roc_curve(&s).unwrap();
            let best_diff = roc.iter().map(|p| (p.far - p.frr).abs()).fold(f64::INFINITY, f64::min);
            let candidates: Vec<&RocPoint> = roc
                .iter()
                .filter(|p| (p.far - p.frr).abs() == best_diff)
                .collect();
            let best_sum = candidates.iter().map(|p| p.far + p.frr).fold(f64::INFINITY, f64::min);
            let finalists: Vec<&&RocPoint> = candidates
                .iter()
                .filter(|p| p.far + p.frr == best_sum)
                .collect();
            let chosen = finalists
                .iter()
                .map(|p| p.threshold)
                .fold(f64::INFINITY, f64::min);
            prop_assert_eq!(theta.value, chosen);
            let at = finalists[0];
            prop_assert!((eer - (at.far + at.frr) / 2.0).abs() < 1e-15);
        }
    }
}
