//! Stage runner. Each stage reads its prerequisites from the output
//! directory, writes its artifacts into a temporary directory and renames it
//! into place, together with a manifest of hashes and counts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::config::PipelineConfig;
use crate::dataset::{self, BundleOptions, FoldBundle, FoldSpec};
use crate::error::{Error, Result};
use crate::eval::{self, Predictions};
use crate::image::{assign_all, ImageCatalog};
use crate::io::{read_json, read_jsonl, sha256_hex, to_jsonl};
use crate::kg::{load_kg, parse_blocklist, write_blocklist, KgIndex, TripletKey};
use crate::review::{items_for, ReviewBook, VerdictLog};
use crate::template::{dedupe_templates, extract_template, flag_non_transferable, QaSample, QuestionTemplate, Transferability};
use crate::variant::{generate_all, AdversarialSample, VariantKind};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    ExtractTemplates,
    GenerateVariants,
    AssignImages,
    Export,
    BuildFolds,
    Augment,
    Stats,
    Evaluate,
}

impl Stage {
    /// Batch stages in run order. Review happens between assign-images and
    /// export and is driven separately.
    pub const ALL: [Stage; 8] = [
        Stage::ExtractTemplates,
        Stage::GenerateVariants,
        Stage::AssignImages,
        Stage::Export,
        Stage::BuildFolds,
        Stage::Augment,
        Stage::Stats,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::ExtractTemplates => "extract-templates",
            Stage::GenerateVariants => "generate-variants",
            Stage::AssignImages => "assign-images",
            Stage::Export => "export",
            Stage::BuildFolds => "build-folds",
            Stage::Augment => "augment",
            Stage::Stats => "stats",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Directory under the output dir holding this stage's artifacts.
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::ExtractTemplates => "templates",
            Stage::GenerateVariants => "variants",
            Stage::AssignImages => "images",
            Stage::Export => "export",
            Stage::BuildFolds => "folds",
            Stage::Augment => "augment",
            Stage::Stats => "stats",
            Stage::Evaluate => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    /// 1 + the largest sequence among upstream manifests.
    pub sequence: u64,
    pub seed: u64,
    pub settings_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub upstream: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
    pub drop_reasons: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Materialize augmented training epochs to disk.
    pub freeze: bool,
}

pub fn stage_dir(config: &PipelineConfig, stage: Stage) -> PathBuf {
    config.paths.output_dir.join(stage.dir_name())
}

/// Collects a stage's outputs and provenance, then publishes them atomically.
struct StageOutput {
    stage: Stage,
    manifest: Manifest,
    files: BTreeMap<String, Vec<u8>>,
}

impl StageOutput {
    fn new(stage: Stage, config: &PipelineConfig) -> Self {
        StageOutput {
            stage,
            manifest: Manifest {
                stage: stage.name().to_string(),
                sequence: 1,
                seed: config.seed,
                settings_sha256: sha256_hex(config.settings_json().as_bytes()),
                ..Default::default()
            },
            files: BTreeMap::new(),
        }
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.manifest.inputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    /// Read a file produced by `upstream`, recording its manifest.
    fn upstream_file(&mut self, config: &PipelineConfig, upstream: Stage, file: &str) -> Result<PathBuf> {
        let dir = stage_dir(config, upstream);
        let manifest_path = dir.join(MANIFEST);
        let path = dir.join(file);
        for p in [&manifest_path, &path] {
            if !p.is_file() {
                return Err(Error::Prerequisite { stage: upstream.name().to_string(), path: p.clone() });
            }
        }
        let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: Manifest = serde_json::from_slice(&raw)?;
        self.manifest.sequence = self.manifest.sequence.max(m.sequence + 1);
        self.manifest.upstream.insert(upstream.name().to_string(), sha256_hex(&raw));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.manifest.inputs.insert(format!("{}/{file}", upstream.dir_name()), sha256_hex(&bytes));
        Ok(path)
    }

    fn file(&mut self, name: impl Into<String>, content: impl Into<Vec<u8>>) {
        self.files.insert(name.into(), content.into());
    }

    fn jsonl<T: Serialize>(&mut self, name: &str, records: &[T]) {
        self.file(name, to_jsonl(records));
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.file(name, s);
        Ok(())
    }

    fn count(&mut self, key: impl Into<String>, n: usize) {
        self.manifest.counts.insert(key.into(), n as u64);
    }

    fn publish(mut self, config: &PipelineConfig) -> Result<Manifest> {
        let out = &config.paths.output_dir;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let tmp = out.join(format!(".{}.tmp", self.stage.dir_name()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        for (name, bytes) in &self.files {
            let path = tmp.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            self.manifest.outputs.insert(name.clone(), sha256_hex(bytes));
        }
        let mut m = serde_json::to_string_pretty(&self.manifest)?;
        m.push('\n');
        let manifest_path = tmp.join(MANIFEST);
        fs::write(&manifest_path, m).map_err(|e| Error::io(&manifest_path, e))?;
        let dest = stage_dir(config, self.stage);
        if dest.exists() {
            fs::remove_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
        }
        fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
        info!(stage = %self.stage, dir = %dest.display(), "stage complete");
        Ok(self.manifest)
    }
}

pub const REVIEW_BLOCKLIST: &str = "review_blocklist.tsv";

/// The KG with the configured blocklist and the triplets flagged during
/// review (as of the last export) removed.
fn load_index(config: &PipelineConfig, out: &mut StageOutput) -> Result<KgIndex> {
    out.input("kg", &config.paths.kg)?;
    if let Some(b) = &config.paths.blocklist {
        out.input("blocklist", b)?;
    }
    let (mut index, report) = load_kg(&config.paths.kg, &config.whitelist()?, config.paths.blocklist.as_deref())?;
    let reviewed = stage_dir(config, Stage::Export).join(REVIEW_BLOCKLIST);
    if reviewed.is_file() {
        let keys = parse_blocklist(&reviewed)?;
        // an empty list changes nothing, so it is not recorded as an input
        if !keys.is_empty() {
            out.input("review_blocklist", &reviewed)?;
            for key in &keys {
                index.block(key);
            }
        }
    }
    out.count("kg.rows", report.rows);
    out.count("kg.indexed", index.len());
    out.manifest.drop_reasons.insert("kg.duplicate".into(), report.duplicates as u64);
    out.manifest.drop_reasons.insert("kg.not-whitelisted".into(), report.not_whitelisted as u64);
    out.manifest.drop_reasons.insert("kg.blocked".into(), report.blocked as u64);
    Ok(index)
}

/// Replay the verdict log, if any, over the given items.
fn replay_review(
    config: &PipelineConfig,
    out: Option<&mut StageOutput>,
    templates: &[QuestionTemplate],
    samples: &[AdversarialSample],
) -> Result<ReviewBook> {
    let log = VerdictLog::new(config.verdict_log());
    let verdicts = log.read()?;
    if let (Some(out), true) = (out, log.path().is_file()) {
        out.input("verdicts", log.path())?;
    }
    ReviewBook::replay(config.annotators.clone(), items_for(templates, samples), verdicts)
}

fn bump(map: &mut BTreeMap<String, u64>, key: &str) {
    *map.entry(key.to_string()).or_default() += 1;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub sample_id: String,
    pub reason: String,
}

fn extract_templates(config: &PipelineConfig) -> Result<Manifest> {
    let mut out = StageOutput::new(Stage::ExtractTemplates, config);
    let index = load_index(config, &mut out)?;
    out.input("corpus", &config.paths.corpus)?;
    let mut corpus: Vec<QaSample> = read_jsonl(&config.paths.corpus)?;
    corpus.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = corpus.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::Validation(format!("duplicate corpus sample id {}", w[0].id)));
    }
    let mut templates = Vec::new();
    let mut skipped = Vec::new();
    let mut drops = BTreeMap::new();
    for sample in &mut corpus {
        let result = sample.resolve(&index).and_then(|_| extract_template(sample, &index));
        let reason = match result {
            Ok(Some(t)) => {
                templates.push(t);
                continue;
            }
            Err(Error::AmbiguousSpans { candidate, .. }) => {
                bump(&mut drops, "ambiguous-kept-for-review");
                templates.push(*candidate);
                continue;
            }
            Ok(None) => "no-entity-span",
            Err(Error::UnknownFact { .. }) => "unknown-fact",
            Err(Error::AnswerNotInFact { .. }) => "answer-not-in-fact",
            Err(Error::Validation(_)) | Err(Error::InvalidRelation(_)) => "invalid-sample",
            Err(e) => return Err(e),
        };
        bump(&mut drops, reason);
        skipped.push(SkippedSample { sample_id: sample.id.clone(), reason: reason.to_string() });
    }
    let extracted = templates.len();
    let templates: Vec<QuestionTemplate> = templates.into_iter().map(flag_non_transferable).collect();
    let templates = dedupe_templates(templates, config.dedupe_threshold);
    drops.insert("near-duplicate".into(), (extracted - templates.len()) as u64);
    out.count("corpus", corpus.len());
    out.count("templates.extracted", extracted);
    out.count("templates.kept", templates.len());
    out.count("templates.flagged", templates.iter().filter(|t| t.transferable == Transferability::Flagged).count());
    out.manifest.drop_reasons.extend(drops);
    out.jsonl("templates.jsonl", &templates);
    out.jsonl("corpus.jsonl", &corpus);
    out.jsonl("skipped.jsonl", &skipped);
    out.publish(config)
}

fn generate_variants(config: &PipelineConfig) -> Result<Manifest> {
    let mut out = StageOutput::new(Stage::GenerateVariants, config);
    let path = out.upstream_file(config, Stage::ExtractTemplates, "templates.jsonl")?;
    let mut templates: Vec<QuestionTemplate> = read_jsonl(&path)?;
    let index = load_index(config, &mut out)?;
    // template verdicts decide whether flagged templates may generate
    replay_review(config, Some(&mut out), &templates, &[])?.apply_to_templates(&mut templates);
    let samples = generate_all(&templates, &index, &config.generation());
    out.count("templates.usable", templates.iter().filter(|t| t.is_usable()).count());
    out.count("samples.fix_a", samples.iter().filter(|s| s.kind == VariantKind::FixA).count());
    out.count("samples.fix_q", samples.iter().filter(|s| s.kind == VariantKind::FixQ).count());
    out.jsonl("samples.jsonl", &samples);
    out.publish(config)
}

fn assign_images(config: &PipelineConfig) -> Result<Manifest> {
    let mut out = StageOutput::new(Stage::AssignImages, config);
    let path = out.upstream_file(config, Stage::GenerateVariants, "samples.jsonl")?;
    let samples: Vec<AdversarialSample> = read_jsonl(&path)?;
    let index = load_index(config, &mut out)?;
    out.input("catalog", &config.paths.catalog)?;
    let catalog = ImageCatalog::load(&config.paths.catalog)?;
    let (samples, report) = assign_all(samples, &catalog, Some(&index));
    out.count("catalog.images", catalog.len());
    out.count("samples.assigned", report.assigned);
    out.count("samples.fix_a", samples.iter().filter(|s| s.kind == VariantKind::FixA).count());
    out.count("samples.fix_q", samples.iter().filter(|s| s.kind == VariantKind::FixQ).count());
    out.manifest.drop_reasons.extend(report.drop_counts.iter().map(|(k, v)| (k.clone(), *v as u64)));
    out.jsonl("samples.jsonl", &samples);
    out.jsonl("assignment_log.jsonl", &report.ledger.log);
    out.jsonl("dropped.jsonl", &report.dropped);
    out.json("image_counts.json", &report.ledger.counts)?;
    out.publish(config)
}

/// Review state over the current templates and assigned samples. Samples are
/// optional so that template review can start before generation.
pub fn open_review(config: &PipelineConfig) -> Result<(ReviewBook, VerdictLog)> {
    let templates_path = stage_dir(config, Stage::ExtractTemplates).join("templates.jsonl");
    if !templates_path.is_file() {
        return Err(Error::Prerequisite { stage: Stage::ExtractTemplates.name().to_string(), path: templates_path });
    }
    let templates: Vec<QuestionTemplate> = read_jsonl(&templates_path)?;
    let samples_path = stage_dir(config, Stage::AssignImages).join("samples.jsonl");
    let samples: Vec<AdversarialSample> = if samples_path.is_file() { read_jsonl(&samples_path)? } else { Vec::new() };
    let book = replay_review(config, None, &templates, &samples)?;
    Ok((book, VerdictLog::new(config.verdict_log())))
}

fn export(config: &PipelineConfig) -> Result<Manifest> {
    let mut out = StageOutput::new(Stage::Export, config);
    let tpath = out.upstream_file(config, Stage::ExtractTemplates, "templates.jsonl")?;
    let spath = out.upstream_file(config, Stage::AssignImages, "samples.jsonl")?;
    let mut templates: Vec<QuestionTemplate> = read_jsonl(&tpath)?;
    let mut samples: Vec<AdversarialSample> = read_jsonl(&spath)?;
    let book = replay_review(config, Some(&mut out), &templates, &samples)?;
    book.apply_to_templates(&mut templates);
    book.apply_to_samples(&mut samples);
    let flagged: BTreeSet<TripletKey> = book.blocklist().clone();
    let mut blocklist = flagged.clone();
    if let Some(b) = &config.paths.blocklist {
        out.input("blocklist", b)?;
        blocklist.extend(parse_blocklist(b)?);
    }
    let resolved = book.export_resolved();
    let progress = book.progress();
    out.count("samples", samples.len());
    out.count("samples.accepted", progress.samples.accepted);
    out.count("samples.rejected", progress.samples.rejected);
    out.count("samples.conflict", progress.samples.conflict);
    out.count("samples.pending", progress.samples.pending);
    out.count("templates.accepted", progress.templates.accepted);
    out.count("blocklist", blocklist.len());
    out.jsonl("templates.jsonl", &templates);
    out.jsonl("samples.jsonl", &samples);
    out.jsonl("accepted.jsonl", &resolved.accepted);
    out.file("blocklist.tsv", write_blocklist(&blocklist));
    out.file(REVIEW_BLOCKLIST, write_blocklist(&flagged));
    out.json("progress.json", &progress)?;
    out.publish(config)
}

fn read_folds(config: &PipelineConfig, out: &mut StageOutput) -> Result<Vec<FoldSpec>> {
    out.input("folds", &config.paths.folds)?;
    let folds: Vec<FoldSpec> = read_json(&config.paths.folds)?;
    let distinct: BTreeSet<usize> = folds.iter().map(|f| f.fold_index).collect();
    if folds.is_empty() || distinct.len() != folds.len() {
        return Err(Error::InvalidFold("fold indices must be nonempty and unique".into()));
    }
    Ok(folds)
}

fn fold_dir(fold: usize) -> String {
    format!("fold_{fold}")
}

fn build_folds(config: &PipelineConfig) -> Result<Manifest> {
    let mut out = StageOutput::new(Stage::BuildFolds, config);
    let cpath = out.upstream_file(config, Stage::ExtractTemplates, "corpus.jsonl")?;
    let tpath = out.upstream_file(config, Stage::Export, "templates.jsonl")?;
    let spath = out.upstream_file(config, Stage::Export, "samples.jsonl")?;
    let corpus: Vec<QaSample> = read_jsonl(&cpath)?;
    let templates: Vec<QuestionTemplate> = read_jsonl(&tpath)?;
    let samples: Vec<AdversarialSample> = read_jsonl(&spath)?;
    let folds = read_folds(config, &mut out)?;
    let options = BundleOptions { augment_unverified: config.augment_unverified, test_unverified: config.test_unverified };
    let bundles = dataset::build_bundle(&folds, &corpus, &templates, &samples, options)?;
    for b in &bundles {
        dataset::check_leakage(b, &templates)?;
        let dir = fold_dir(b.fold_index);
        out.jsonl(&format!("{dir}/standard_train.jsonl"), &b.standard_train);
        out.jsonl(&format!("{dir}/standard_test.jsonl"), &b.standard_test);
        out.jsonl(&format!("{dir}/originating.jsonl"), &b.originating);
        out.jsonl(&format!("{dir}/adversarial_test.jsonl"), &b.adversarial_test);
        out.jsonl(&format!("{dir}/augmentation.jsonl"), &b.augmentation);
        out.count(format!("{dir}.standard_train"), b.standard_train.len());
        out.count(format!("{dir}.standard_test"), b.standard_test.len());
        out.count(format!("{dir}.originating"), b.originating.len());
        out.count(format!("{dir}.adversarial_test.fix_a"), b.fix_a().count());
        out.count(format!("{dir}.adversarial_test.fix_q"), b.fix_q().count());
        out.count(format!("{dir}.augmentation"), b.augmentation.len());
    }
    out.publish(config)
}

/// Read the fold sets written by `build-folds`.
pub fn load_bundles(config: &PipelineConfig) -> Result<Vec<FoldBundle>> {
    let mut scratch = StageOutput::new(Stage::BuildFolds, config);
    load_bundles_into(config, &mut scratch)
}

fn load_bundles_into(config: &PipelineConfig, out: &mut StageOutput) -> Result<Vec<FoldBundle>> {
    let folds: Vec<FoldSpec> = read_json(&config.paths.folds)?;
    let mut bundles = Vec::with_capacity(folds.len());
    for f in folds {
        let dir = fold_dir(f.fold_index);
        let mut read = |set: &str| out.upstream_file(config, Stage::BuildFolds, &format!("{dir}/{set}.jsonl"));
        let (train, test, orig, adv, aug) =
            (read("standard_train")?, read("standard_test")?, read("originating")?, read("adversarial_test")?, read("augmentation")?);
        bundles.push(FoldBundle {
            fold_index: f.fold_index,
            standard_train: read_jsonl(&train)?,
            standard_test: read_jsonl(&test)?,
            originating: read_jsonl(&orig)?,
            adversarial_test: read_jsonl(&adv)?,
            augmentation: read_jsonl(&aug)?,
        });
    }
    Ok(bundles)
}

fn augment(config: &PipelineConfig, options: RunOptions) -> Result<Manifest> {
    let mut out = StageOutput::new(Stage::Augment, config);
    let bundles = load_bundles_into(config, &mut out)?;
    for b in &bundles {
        let augmenter = dataset::Augmenter::new(&b.standard_train, &b.augmentation, config.seed, config.replace_prob)?;
        let dir = fold_dir(b.fold_index);
        for epoch in 0..config.epochs {
            let records = augmenter.epoch(epoch);
            out.count(format!("{dir}.epoch_{epoch}.replaced"), records.iter().filter(|r| r.is_variant()).count());
            if options.freeze {
                out.jsonl(&format!("{dir}/epoch_{epoch}.jsonl"), &records);
            }
        }
    }
    out.manifest.counts.insert("frozen".into(), options.freeze as u64);
    out.publish(config)
}

fn stats(config: &PipelineConfig) -> Result<Manifest> {
    let mut out = StageOutput::new(Stage::Stats, config);
    let bundles = load_bundles_into(config, &mut out)?;
    let report = dataset::compute_stats(&bundles);
    out.count("folds", bundles.len());
    out.count("answers.distinct", report.distinct_answers);
    out.count("triplets.new", report.new_triplets);
    out.json("stats.json", &report)?;
    out.file("table.txt", dataset::render_stats_table(&report));
    out.publish(config)
}

fn evaluate(config: &PipelineConfig) -> Result<Manifest> {
    let mut out = StageOutput::new(Stage::Evaluate, config);
    let bundles = load_bundles_into(config, &mut out)?;
    if config.paths.predictions.len() != bundles.len() {
        return Err(Error::Config(format!(
            "evaluate needs one prediction file per fold: {} folds, {} files",
            bundles.len(),
            config.paths.predictions.len()
        )));
    }
    let mut predictions = Vec::new();
    for (i, p) in config.paths.predictions.iter().enumerate() {
        out.input(&format!("predictions.{i}"), p)?;
        predictions.push(Predictions::load(p)?);
    }
    let report = eval::evaluate(&bundles, &predictions, &config.bucket_edges()?)?;
    out.json("report.json", &report)?;
    out.file("table.txt", eval::render_eval_table(&report));
    out.publish(config)
}

pub fn run_stage(stage: Stage, config: &PipelineConfig, options: RunOptions) -> Result<Manifest> {
    config.validate()?;
    info!(%stage, "running stage");
    match stage {
        Stage::ExtractTemplates => extract_templates(config),
        Stage::GenerateVariants => generate_variants(config),
        Stage::AssignImages => assign_images(config),
        Stage::Export => export(config),
        Stage::BuildFolds => build_folds(config),
        Stage::Augment => augment(config, options),
        Stage::Stats => stats(config),
        Stage::Evaluate => evaluate(config),
    }
}

/// Every batch stage in order; evaluate only when predictions are configured.
pub fn run_all(config: &PipelineConfig, options: RunOptions) -> Result<Vec<Manifest>> {
    Stage::ALL
        .into_iter()
        .filter(|s| *s != Stage::Evaluate || !config.paths.predictions.is_empty())
        .map(|s| run_stage(s, config, options))
        .collect()
}
