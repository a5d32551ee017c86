//! Fold-aware set construction: train/test template partition, adversarial
//! test and augmentation sets, leakage checks, augmented training emission
//! and summary statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::template::{QaSample, QuestionTemplate, ReviewStatus, Split};
use crate::variant::{AdversarialSample, VariantKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold_index: usize,
    pub train_image_ids: BTreeSet<String>,
    pub test_image_ids: BTreeSet<String>,
}

impl FoldSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(shared) = self.train_image_ids.intersection(&self.test_image_ids).next() {
            return Err(Error::InvalidFold(format!("fold {}: image {shared} is in both train and test", self.fold_index)));
        }
        Ok(())
    }

    /// Split of a record given its explicit tags, falling back to its image.
    pub fn split_of(&self, tags: &BTreeMap<usize, Split>, image_id: &str) -> Option<Split> {
        if let Some(split) = tags.get(&self.fold_index) {
            return Some(*split);
        }
        if self.train_image_ids.contains(image_id) {
            Some(Split::Train)
        } else if self.test_image_ids.contains(image_id) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplatePartition {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

/// A template is a train template for a fold iff its source sample is in
/// that fold's training set.
pub fn partition_templates(fold: &FoldSpec, templates: &[QuestionTemplate]) -> Result<TemplatePartition> {
    let mut partition = TemplatePartition::default();
    for t in templates {
        match fold.split_of(&t.folds, &t.source_image_id) {
            Some(Split::Train) => partition.train.insert(t.id.clone()),
            Some(Split::Test) => partition.test.insert(t.id.clone()),
            None => return Err(Error::MissingFoldMembership { template_id: t.id.clone(), fold: fold.fold_index }),
        };
    }
    Ok(partition)
}

fn accepted(s: &AdversarialSample) -> bool {
    s.review_status == ReviewStatus::Accepted
}

/// Accepted samples whose template is a test template of this fold. With
/// `include_unverified`, pending samples count too.
pub fn build_adversarial_test(
    partition: &TemplatePartition,
    samples: &[AdversarialSample],
    include_unverified: bool,
) -> Vec<AdversarialSample> {
    samples
        .iter()
        .filter(|s| {
            let usable = accepted(s) || include_unverified && s.review_status == ReviewStatus::Pending;
            usable && partition.test.contains(&s.template_id)
        })
        .cloned()
        .collect()
}

/// Samples whose template is a train template of this fold. With
/// `include_unverified`, generated samples not yet rejected also count.
pub fn build_augmentation(
    partition: &TemplatePartition,
    samples: &[AdversarialSample],
    include_unverified: bool,
) -> Vec<AdversarialSample> {
    samples
        .iter()
        .filter(|s| {
            let usable = accepted(s) || include_unverified && s.review_status != ReviewStatus::Rejected;
            usable && partition.train.contains(&s.template_id)
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldBundle {
    pub fold_index: usize,
    pub standard_train: Vec<QaSample>,
    pub standard_test: Vec<QaSample>,
    pub originating: Vec<QaSample>,
    pub adversarial_test: Vec<AdversarialSample>,
    pub augmentation: Vec<AdversarialSample>,
}

impl FoldBundle {
    pub const SET_NAMES: [&'static str; 5] = ["standard_train", "standard_test", "originating", "adversarial_test", "augmentation"];

    pub fn fix_a(&self) -> impl Iterator<Item = &AdversarialSample> {
        self.adversarial_test.iter().filter(|s| s.kind == VariantKind::FixA)
    }

    pub fn fix_q(&self) -> impl Iterator<Item = &AdversarialSample> {
        self.adversarial_test.iter().filter(|s| s.kind == VariantKind::FixQ)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleOptions {
    pub augment_unverified: bool,
    pub test_unverified: bool,
}

pub fn build_bundle(
    folds: &[FoldSpec],
    corpus: &[QaSample],
    templates: &[QuestionTemplate],
    samples: &[AdversarialSample],
    options: BundleOptions,
) -> Result<Vec<FoldBundle>> {
    let known: BTreeSet<&str> = templates.iter().map(|t| t.id.as_str()).collect();
    if let Some(orphan) = samples.iter().find(|s| !known.contains(s.template_id.as_str())) {
        return Err(Error::Validation(format!("sample {} references unknown template {}", orphan.id, orphan.template_id)));
    }
    let mut out = Vec::with_capacity(folds.len());
    for fold in folds {
        fold.validate()?;
        let mut standard_train = Vec::new();
        let mut standard_test = Vec::new();
        for s in corpus {
            match fold.split_of(&s.folds, &s.image_id) {
                Some(Split::Train) => standard_train.push(s.clone()),
                Some(Split::Test) => standard_test.push(s.clone()),
                None => {
                    return Err(Error::InvalidFold(format!(
                        "fold {}: corpus image {} of sample {} is in neither split",
                        fold.fold_index, s.image_id, s.id
                    )))
                }
            }
        }
        let partition = partition_templates(fold, templates)?;
        let adversarial_test = build_adversarial_test(&partition, samples, options.test_unverified);
        let augmentation = build_augmentation(&partition, samples, options.augment_unverified);
        let origins: BTreeSet<&str> = adversarial_test.iter().map(|s| s.originating_sample_id.as_str()).collect();
        let originating = standard_test.iter().filter(|s| origins.contains(s.id.as_str())).cloned().collect();
        out.push(FoldBundle { fold_index: fold.fold_index, standard_train, standard_test, originating, adversarial_test, augmentation });
    }
    Ok(out)
}

/// Template ids behind the adversarial test set must not overlap the ones
/// behind standard training or augmentation.
pub fn check_leakage(bundle: &FoldBundle, templates: &[QuestionTemplate]) -> Result<()> {
    let by_source: BTreeMap<&str, &str> = templates.iter().map(|t| (t.source_sample_id.as_str(), t.id.as_str())).collect();
    let test_ids: BTreeSet<&str> = bundle.adversarial_test.iter().map(|s| s.template_id.as_str()).collect();
    let train_ids: BTreeSet<&str> = bundle
        .standard_train
        .iter()
        .filter_map(|s| by_source.get(s.id.as_str()).copied())
        .chain(bundle.augmentation.iter().map(|s| s.template_id.as_str()))
        .collect();
    match test_ids.intersection(&train_ids).next() {
        Some(leaked) => {
            Err(Error::Validation(format!("fold {}: template {leaked} feeds both adversarial test and training", bundle.fold_index)))
        }
        None => Ok(()),
    }
    .and_then(|_| {
        let test: BTreeSet<&str> = bundle.standard_test.iter().map(|s| s.id.as_str()).collect();
        match bundle.originating.iter().find(|s| !test.contains(s.id.as_str())) {
            Some(s) => {
                Err(Error::Validation(format!("fold {}: originating sample {} is not in the standard test set", bundle.fold_index, s.id)))
            }
            None => Ok(()),
        }
    })
}

/// One record of the augmented training stream: either the original sample
/// or one of its adversarial variants. Serializes as the wrapped record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum TrainingRecord {
    Original(QaSample),
    Variant(AdversarialSample),
}

impl TrainingRecord {
    pub fn is_variant(&self) -> bool {
        matches!(self, TrainingRecord::Variant(_))
    }
}

/// Training stream where each sample with variants is, with probability
/// `replace_prob`, swapped for a uniformly chosen variant. Each epoch draws
/// from its own stream of the seeded generator.
pub struct Augmenter<'a> {
    train: &'a [QaSample],
    variants: BTreeMap<&'a str, Vec<&'a AdversarialSample>>,
    seed: u64,
    replace_prob: f64,
}

impl<'a> Augmenter<'a> {
    pub fn new(train: &'a [QaSample], augmentation: &'a [AdversarialSample], seed: u64, replace_prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&replace_prob) {
            return Err(Error::Config(format!("replace_prob must be in [0, 1], got {replace_prob}")));
        }
        let mut variants: BTreeMap<&str, Vec<&AdversarialSample>> = BTreeMap::new();
        for s in augmentation {
            variants.entry(s.originating_sample_id.as_str()).or_default().push(s);
        }
        for list in variants.values_mut() {
            list.sort_by(|a, b| a.id.cmp(&b.id));
        }
        Ok(Augmenter { train, variants, seed, replace_prob })
    }

    pub fn epoch(&self, epoch: u64) -> Vec<TrainingRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        self.train
            .iter()
            .map(|s| match self.variants.get(s.id.as_str()) {
                Some(options) if rng.gen_bool(self.replace_prob) => {
                    TrainingRecord::Variant(options[rng.gen_range(0..options.len())].clone())
                }
                _ => TrainingRecord::Original(s.clone()),
            })
            .collect()
    }
}

pub fn apply_augmentation(
    standard_train: &[QaSample],
    augmentation: &[AdversarialSample],
    seed: u64,
    replace_prob: f64,
) -> Result<Vec<TrainingRecord>> {
    Ok(Augmenter::new(standard_train, augmentation, seed, replace_prob)?.epoch(0))
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetStats {
    pub per_fold: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
}

impl SetStats {
    fn from_counts(per_fold: Vec<usize>) -> Self {
        let values: Vec<f64> = per_fold.iter().map(|&c| c as f64).collect();
        let (mean, std) = mean_std(&values);
        SetStats { per_fold, mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub folds: usize,
    pub sets: BTreeMap<String, SetStats>,
    /// Answer node label -> occurrences in the corpus.
    pub answer_histogram: BTreeMap<String, usize>,
    pub distinct_answers: usize,
    pub answers_below_3: usize,
    pub distinct_corpus_triplets: usize,
    pub distinct_adversarial_triplets: usize,
    /// Adversarial triplets not used by any corpus sample.
    pub new_triplets: usize,
    /// Distinct adversarial samples per relation.
    pub per_relation: BTreeMap<String, usize>,
}

pub fn answer_label(s: &QaSample) -> String {
    s.answer_node().map(|n| n.to_string()).unwrap_or_else(|| crate::text::normalize_label(&s.answer))
}

/// Answer occurrence counts over a set of corpus samples, deduplicated by id.
pub fn answer_histogram<'a>(samples: impl IntoIterator<Item = &'a QaSample>) -> BTreeMap<String, usize> {
    let mut seen = BTreeSet::new();
    let mut hist = BTreeMap::new();
    for s in samples {
        if seen.insert(s.id.as_str()) {
            *hist.entry(answer_label(s)).or_default() += 1;
        }
    }
    hist
}

pub fn compute_stats(bundle: &[FoldBundle]) -> StatsReport {
    let count = |f: &dyn Fn(&FoldBundle) -> usize| SetStats::from_counts(bundle.iter().map(f).collect());
    let mut sets = BTreeMap::new();
    sets.insert("standard_train".to_string(), count(&|b| b.standard_train.len()));
    sets.insert("standard_test".to_string(), count(&|b| b.standard_test.len()));
    sets.insert("originating".to_string(), count(&|b| b.originating.len()));
    sets.insert("adversarial_test".to_string(), count(&|b| b.adversarial_test.len()));
    sets.insert("adversarial_test.fix_a".to_string(), count(&|b| b.fix_a().count()));
    sets.insert("adversarial_test.fix_q".to_string(), count(&|b| b.fix_q().count()));
    sets.insert("augmentation".to_string(), count(&|b| b.augmentation.len()));

    let corpus = bundle.iter().flat_map(|b| b.standard_train.iter().chain(&b.standard_test));
    let answer_histogram = answer_histogram(corpus.clone());
    let corpus_triplets: BTreeSet<_> = corpus.map(|s| &s.fact).collect();
    let mut adversarial: BTreeMap<&str, &AdversarialSample> = BTreeMap::new();
    for s in bundle.iter().flat_map(|b| b.adversarial_test.iter().chain(&b.augmentation)) {
        adversarial.insert(s.id.as_str(), s);
    }
    let adversarial_triplets: BTreeSet<_> = adversarial.values().map(|s| &s.triplet).collect();
    let mut per_relation = BTreeMap::new();
    for s in adversarial.values() {
        *per_relation.entry(s.triplet.relation.to_string()).or_default() += 1;
    }
    StatsReport {
        folds: bundle.len(),
        sets,
        distinct_answers: answer_histogram.len(),
        answers_below_3: answer_histogram.values().filter(|&&c| c < 3).count(),
        answer_histogram,
        distinct_corpus_triplets: corpus_triplets.len(),
        new_triplets: adversarial_triplets.difference(&corpus_triplets).count(),
        distinct_adversarial_triplets: adversarial_triplets.len(),
        per_relation,
    }
}

/// Plain-text rendering of the per-set counts.
pub fn render_stats_table(report: &StatsReport) -> String {
    let rows = [
        ("Standard Train Set", "standard_train"),
        ("Standard Test Set", "standard_test"),
        ("Originating Questions Set", "originating"),
        ("Adversarial Test Set", "adversarial_test"),
        ("  - FixA Questions", "adversarial_test.fix_a"),
        ("  - FixQ Questions", "adversarial_test.fix_q"),
        ("Augmentation data", "augmentation"),
    ];
    let mut out = String::new();
    let _ = writeln!(out, "{:<28}{:>12}{:>10}", "Set Name", "#Samples", "std");
    let _ = writeln!(out, "{}", "-".repeat(50));
    for (label, key) in rows {
        if let Some(s) = report.sets.get(key) {
            let _ = writeln!(out, "{label:<28}{:>12.1}{:>10.1}", s.mean, s.std);
        }
    }
    let _ = writeln!(out, "{}", "-".repeat(50));
    let _ = writeln!(out, "folds: {}; population std over folds", report.folds);
    let _ = writeln!(out, "answers: {} distinct, {} occurring fewer than 3 times", report.distinct_answers, report.answers_below_3);
    let _ = writeln!(
        out,
        "triplets: {} in corpus, {} in adversarial samples ({} new)",
        report.distinct_corpus_triplets, report.distinct_adversarial_triplets, report.new_triplets
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{NodeId, TripletKey};

    fn qa(id: &str, image: &str, answer: &str) -> QaSample {
        QaSample {
            id: id.into(),
            question: format!("question {id}"),
            answer: answer.into(),
            answer_node: Some(NodeId::from_label(answer)),
            fact: TripletKey::new(answer, "/r/IsA", "thing").unwrap(),
            image_id: image.into(),
            folds: BTreeMap::new(),
        }
    }

    fn adv(id: &str, template: &str, origin: &str, status: ReviewStatus) -> AdversarialSample {
        AdversarialSample {
            id: id.into(),
            kind: VariantKind::FixA,
            question: format!("variant {id}"),
            answer_nodes: vec![NodeId::from_label("a")],
            triplet: TripletKey::new("a", "/r/IsA", id).unwrap(),
            surface: String::new(),
            template_id: template.into(),
            originating_sample_id: origin.into(),
            originating_question: format!("question {origin}"),
            originating_answer: NodeId::from_label("a"),
            originating_image_id: "i".into(),
            image_id: Some("i".into()),
            review_status: status,
            flags: vec![],
        }
    }

    fn fold(i: usize, train: &[&str], test: &[&str]) -> FoldSpec {
        FoldSpec {
            fold_index: i,
            train_image_ids: train.iter().map(|s| s.to_string()).collect(),
            test_image_ids: test.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn overlapping_fold_is_invalid() {
        assert!(fold(0, &["a"], &["a"]).validate().is_err());
    }

    #[test]
    fn partition_follows_source_split() {
        let f = fold(0, &["img1"], &["img2"]);
        let mut t1 = crate::template::tests_support::template("tpl-1", "img1");
        let t2 = crate::template::tests_support::template("tpl-2", "img2");
        let p = partition_templates(&f, &[t1.clone(), t2.clone()]).unwrap();
        assert!(p.train.contains("tpl-1") && p.test.contains("tpl-2"));
        let swapped = fold(1, &["img2"], &["img1"]);
        let p = partition_templates(&swapped, &[t1.clone()]).unwrap();
        assert!(p.test.contains("tpl-1"));
        t1.source_image_id = "elsewhere".into();
        assert!(matches!(partition_templates(&f, &[t1]), Err(Error::MissingFoldMembership { .. })));
    }

    #[test]
    fn adversarial_and_augmentation_filters() {
        let p = TemplatePartition { train: BTreeSet::from(["tr".to_string()]), test: BTreeSet::from(["te".to_string()]) };
        let samples = vec![
            adv("x1", "tr", "s", ReviewStatus::Accepted),
            adv("x2", "te", "s", ReviewStatus::Accepted),
            adv("x3", "te", "s", ReviewStatus::Rejected),
            adv("x4", "tr", "s", ReviewStatus::Pending),
        ];
        let test: Vec<_> = build_adversarial_test(&p, &samples, false).into_iter().map(|s| s.id).collect();
        assert_eq!(test, ["x2"]);
        let aug: Vec<_> = build_augmentation(&p, &samples, false).into_iter().map(|s| s.id).collect();
        assert_eq!(aug, ["x1"]);
        let aug: Vec<_> = build_augmentation(&p, &samples, true).into_iter().map(|s| s.id).collect();
        assert_eq!(aug, ["x1", "x4"]);
    }

    #[test]
    fn replace_prob_bounds() {
        let train = vec![qa("s", "i", "a")];
        assert!(matches!(apply_augmentation(&train, &[], 1, 1.5), Err(Error::Config(_))));
        assert!(matches!(apply_augmentation(&train, &[], 1, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn replace_all_and_none() {
        let train = vec![qa("s1", "i", "a"), qa("s2", "i", "b")];
        let aug = vec![adv("v1", "t", "s1", ReviewStatus::Accepted), adv("v2", "t", "s2", ReviewStatus::Accepted)];
        let all = apply_augmentation(&train, &aug, 3, 1.0).unwrap();
        assert!(all.iter().all(TrainingRecord::is_variant));
        let none = apply_augmentation(&train, &aug, 3, 0.0).unwrap();
        assert_eq!(crate::io::to_jsonl(&none), crate::io::to_jsonl(&train), "identity output must serialize exactly like the input");
    }

    #[test]
    fn stats_on_hand_counted_fixture() {
        let mk = |n: usize, prefix: &str| -> Vec<QaSample> {
            (0..n).map(|i| qa(&format!("{prefix}{i}"), "i", &format!("ans{}", i % 7))).collect()
        };
        let mk_adv = |n: usize, prefix: &str, kind: VariantKind| -> Vec<AdversarialSample> {
            (0..n)
                .map(|i| {
                    let mut s = adv(&format!("{prefix}{i}"), "t", "o", ReviewStatus::Accepted);
                    s.kind = kind;
                    s
                })
                .collect()
        };
        let fold_a = FoldBundle {
            fold_index: 0,
            standard_train: mk(100, "tr"),
            standard_test: mk(100, "te"),
            originating: mk(20, "te"),
            adversarial_test: [mk_adv(30, "fa", VariantKind::FixA), mk_adv(10, "fq", VariantKind::FixQ)].concat(),
            augmentation: vec![],
        };
        let mut fold_b = fold_a.clone();
        fold_b.fold_index = 1;
        fold_b.adversarial_test.truncate(20);
        let report = compute_stats(&[fold_a, fold_b]);
        assert_eq!(report.sets["standard_train"].per_fold, [100, 100]);
        assert_eq!(report.sets["originating"].mean, 20.0);
        assert_eq!(report.sets["adversarial_test"].per_fold, [40, 20]);
        assert_eq!(report.sets["adversarial_test"].mean, 30.0);
        assert_eq!(report.sets["adversarial_test"].std, 10.0);
        assert_eq!(report.sets["adversarial_test.fix_q"].per_fold, [10, 0]);
        assert_eq!(report.sets["augmentation"].std, 0.0);
        // 200 distinct corpus ids, answers ans0..ans6
        assert_eq!(report.distinct_answers, 7);
        assert_eq!(report.answer_histogram.values().sum::<usize>(), 200);
    }

    #[test]
    fn empty_sets_have_zero_std() {
        let b = FoldBundle {
            fold_index: 0,
            standard_train: vec![],
            standard_test: vec![],
            originating: vec![],
            adversarial_test: vec![],
            augmentation: vec![],
        };
        let r = compute_stats(&[b.clone(), b]);
        assert_eq!(r.sets["adversarial_test"].mean, 0.0);
        assert_eq!(r.sets["adversarial_test"].std, 0.0);
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert_eq!(s, 2.0);
    }
}
