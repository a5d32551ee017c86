//! Scoring of external prediction files against gold answer nodes, with
//! FixQ/FixA and answer-frequency breakdowns.
//!
//! A prediction is correct iff its normalized string equals the label of any
//! gold answer node. Gold answers are resolved to their nearest KG node when
//! the bundle is built, so scoring never consults the graph.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{answer_label, mean_std, FoldBundle};
use crate::error::{Error, Result};
use crate::io::read_jsonl;
use crate::template::QaSample;
use crate::text::normalize_label;
use crate::variant::{AdversarialSample, VariantKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Predictions(BTreeMap<String, String>);

impl Predictions {
    pub fn from_records(records: impl IntoIterator<Item = PredictionRecord>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in records {
            if map.insert(r.sample_id.clone(), r.answer).is_some() {
                return Err(Error::DuplicatePrediction(r.sample_id));
            }
        }
        Ok(Predictions(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Predictions::from_records(read_jsonl::<PredictionRecord>(path)?)
    }

    pub fn get(&self, sample_id: &str) -> Option<&str> {
        self.0.get(sample_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Gold view shared by corpus and adversarial samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldItem {
    pub id: String,
    /// Normalized answer node labels, primary first.
    pub answers: Vec<String>,
    pub kind: Option<VariantKind>,
}

impl GoldItem {
    pub fn primary(&self) -> &str {
        &self.answers[0]
    }
}

impl From<&QaSample> for GoldItem {
    fn from(s: &QaSample) -> Self {
        GoldItem { id: s.id.clone(), answers: vec![answer_label(s)], kind: None }
    }
}

impl From<&AdversarialSample> for GoldItem {
    fn from(s: &AdversarialSample) -> Self {
        GoldItem { id: s.id.clone(), answers: s.answer_nodes.iter().map(|n| n.to_string()).collect(), kind: Some(s.kind) }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub correct: u64,
    pub total: u64,
}

impl Score {
    /// `None` for an empty subset.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += u64::from(correct);
    }

    fn merge(&mut self, other: Score) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

pub fn is_correct(prediction: Option<&str>, gold: &GoldItem) -> bool {
    prediction.is_some_and(|p| {
        let p = normalize_label(p);
        gold.answers.contains(&p)
    })
}

pub fn score(predictions: &Predictions, gold: &[GoldItem]) -> Score {
    let mut s = Score::default();
    for g in gold {
        s.add(is_correct(predictions.get(&g.id), g));
    }
    s
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindBreakdown {
    pub fix_a: Option<Score>,
    pub fix_q: Option<Score>,
}

pub fn breakdown_by_kind(predictions: &Predictions, gold: &[GoldItem]) -> KindBreakdown {
    let subset = |kind: VariantKind| {
        let items: Vec<GoldItem> = gold.iter().filter(|g| g.kind == Some(kind)).cloned().collect();
        (!items.is_empty()).then(|| score(predictions, &items))
    };
    KindBreakdown { fix_a: subset(VariantKind::FixA), fix_q: subset(VariantKind::FixQ) }
}

/// Lower edges of half-open occurrence buckets; the last bucket is unbounded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u64>", into = "Vec<u64>")]
pub struct BucketEdges(Vec<u64>);

impl BucketEdges {
    pub fn new(edges: Vec<u64>) -> Result<Self> {
        if edges.first() != Some(&0) {
            return Err(Error::Config("bucket edges must start at 0".into()));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("bucket edges must be strictly increasing: {edges:?}")));
        }
        Ok(BucketEdges(edges))
    }

    pub fn bucket_of(&self, count: u64) -> usize {
        self.0.partition_point(|&e| e <= count) - 1
    }

    pub fn label(&self, bucket: usize) -> String {
        match self.0.get(bucket + 1) {
            Some(upper) => format!("{}-{}", self.0[bucket], upper),
            None => format!("{}+", self.0[bucket]),
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for BucketEdges {
    fn default() -> Self {
        BucketEdges(vec![0, 10, 50, 100])
    }
}

impl TryFrom<Vec<u64>> for BucketEdges {
    type Error = Error;

    fn try_from(v: Vec<u64>) -> Result<Self> {
        BucketEdges::new(v)
    }
}

impl From<BucketEdges> for Vec<u64> {
    fn from(e: BucketEdges) -> Self {
        e.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketStats {
    pub label: String,
    pub score: Score,
    /// Sum over the bucket's samples of their answer's training occurrences.
    pub training_occurrences: u64,
}

/// Group gold items by how often their primary answer occurs in the original
/// corpus and score each group.
pub fn bucket_by_answer_occurrence(
    predictions: &Predictions,
    gold: &[GoldItem],
    occurrences: &BTreeMap<String, usize>,
    edges: &BucketEdges,
    training_occurrences: Option<&BTreeMap<String, usize>>,
) -> Vec<BucketStats> {
    let mut buckets: Vec<BucketStats> =
        (0..edges.len()).map(|i| BucketStats { label: edges.label(i), score: Score::default(), training_occurrences: 0 }).collect();
    for g in gold {
        let count = occurrences.get(g.primary()).copied().unwrap_or(0) as u64;
        let b = &mut buckets[edges.bucket_of(count)];
        b.score.add(is_correct(predictions.get(&g.id), g));
        if let Some(train) = training_occurrences {
            b.training_occurrences += train.get(g.primary()).copied().unwrap_or(0) as u64;
        }
    }
    buckets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub set: String,
    pub per_fold: Vec<Score>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub overall: Score,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub by_kind: Option<KindBreakdown>,
    pub buckets: Vec<BucketStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub std_convention: String,
    pub folds: Vec<usize>,
    pub sets: Vec<SetReport>,
}

pub const EVAL_SETS: [&str; 3] = ["standard_test", "originating", "adversarial_test"];

fn gold_for(bundle: &FoldBundle, set: &str) -> Vec<GoldItem> {
    match set {
        "standard_test" => bundle.standard_test.iter().map(GoldItem::from).collect(),
        "originating" => bundle.originating.iter().map(GoldItem::from).collect(),
        "adversarial_test" => bundle.adversarial_test.iter().map(GoldItem::from).collect(),
        other => unreachable!("unknown evaluation set {other}"),
    }
}

/// Score one prediction file per fold on every evaluation set.
///
/// Bucket occurrences come from the answer histogram of the whole corpus;
/// training occurrences from each fold's standard train and augmentation sets.
pub fn evaluate(bundle: &[FoldBundle], predictions: &[Predictions], edges: &BucketEdges) -> Result<EvalReport> {
    if bundle.len() != predictions.len() {
        return Err(Error::Config(format!("{} folds but {} prediction files", bundle.len(), predictions.len())));
    }
    let occurrences = crate::dataset::answer_histogram(bundle.iter().flat_map(|b| b.standard_train.iter().chain(&b.standard_test)));
    let mut sets = Vec::new();
    for set in EVAL_SETS {
        let mut per_fold = Vec::new();
        let mut overall = Score::default();
        let mut kinds = KindBreakdown::default();
        let mut buckets: Vec<BucketStats> = Vec::new();
        for (fold, preds) in bundle.iter().zip(predictions) {
            let gold = gold_for(fold, set);
            let s = score(preds, &gold);
            overall.merge(s);
            per_fold.push(s);
            let k = breakdown_by_kind(preds, &gold);
            for (acc, part) in [(&mut kinds.fix_a, k.fix_a), (&mut kinds.fix_q, k.fix_q)] {
                if let Some(p) = part {
                    acc.get_or_insert_with(Score::default).merge(p);
                }
            }
            let mut training = crate::dataset::answer_histogram(&fold.standard_train);
            for s in &fold.augmentation {
                *training.entry(s.primary_answer().to_string()).or_default() += 1;
            }
            let fold_buckets = bucket_by_answer_occurrence(preds, &gold, &occurrences, edges, Some(&training));
            if buckets.is_empty() {
                buckets = fold_buckets;
            } else {
                for (acc, b) in buckets.iter_mut().zip(fold_buckets) {
                    acc.score.merge(b.score);
                    acc.training_occurrences += b.training_occurrences;
                }
            }
        }
        let accs: Vec<f64> = per_fold.iter().filter_map(Score::accuracy).collect();
        let (mean, std) = if accs.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&accs);
            (Some(m), Some(s))
        };
        sets.push(SetReport {
            set: set.to_string(),
            per_fold,
            mean,
            std,
            overall,
            by_kind: (set == "adversarial_test").then_some(kinds),
            buckets,
        });
    }
    Ok(EvalReport {
        std_convention: "population standard deviation over folds".into(),
        folds: bundle.iter().map(|b| b.fold_index).collect(),
        sets,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map(|a| format!("{:.2}", a * 100.0)).unwrap_or_else(|| "n/a".into())
}

/// Sets as columns, accuracy as `mean ± std` in percent.
pub fn render_eval_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<16}", "");
    for s in &report.sets {
        let _ = write!(out, "{:>22}", s.set);
    }
    out.push('\n');
    let _ = write!(out, "{:<16}", "accuracy");
    for s in &report.sets {
        let _ = write!(out, "{:>22}", format!("{} ± {}", pct(s.mean), pct(s.std)));
    }
    out.push('\n');
    for (i, fold) in report.folds.iter().enumerate() {
        let _ = write!(out, "{:<16}", format!("  fold {fold}"));
        for s in &report.sets {
            let _ = write!(out, "{:>22}", pct(s.per_fold[i].accuracy()));
        }
        out.push('\n');
    }
    if let Some(adv) = report.sets.iter().find(|s| s.by_kind.is_some()) {
        let k = adv.by_kind.unwrap_or_default();
        let _ = writeln!(
            out,
            "\n{}: FixA {}  FixQ {}",
            adv.set,
            pct(k.fix_a.and_then(|s| s.accuracy())),
            pct(k.fix_q.and_then(|s| s.accuracy()))
        );
        let _ = writeln!(out, "answer-occurrence buckets ({}):", adv.set);
        for b in &adv.buckets {
            let _ = writeln!(
                out,
                "  {:<10} {:>8} n={:<6} train_occ={}",
                b.label,
                pct(b.score.accuracy()),
                b.score.total,
                b.training_occurrences
            );
        }
    }
    let _ = writeln!(out, "({})", report.std_convention);
    out
}
