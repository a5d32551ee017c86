mod common;

use std::fs;

use kgadv::io::{read_json, read_jsonl};
use kgadv::kg::TripletKey;
use kgadv::pipeline::{open_review, run_all, run_stage, stage_dir, Manifest, RunOptions, Stage, MANIFEST};
use kgadv::review::{Decision, Verdict};
use kgadv::template::{QaSample, QuestionTemplate, ReviewStatus};
use kgadv::variant::{AdversarialSample, VariantKind};
use kgadv::Error;

fn manifest(config: &kgadv::config::PipelineConfig, stage: Stage) -> Manifest {
    read_json(&stage_dir(config, stage).join(MANIFEST)).unwrap()
}

#[test]
fn toy_pipeline_reproduces_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::toy_config(dir.path());
    run_all(&config, RunOptions::default()).unwrap();

    let templates: Vec<QuestionTemplate> = read_jsonl(&stage_dir(&config, Stage::ExtractTemplates).join("templates.jsonl")).unwrap();
    let t = templates.iter().find(|t| t.source_sample_id == "q01").unwrap();
    assert_eq!(t.text, "what is used for <t> in this image?");

    let samples: Vec<AdversarialSample> = read_jsonl(&stage_dir(&config, Stage::AssignImages).join("samples.jsonl")).unwrap();
    let holding = samples.iter().find(|s| s.question == "what is used for holding water in this image?").expect("worked FixA sample");
    assert_eq!(holding.kind, VariantKind::FixA);
    assert_eq!(holding.primary_answer().as_str(), "bottle");

    // FixQ keeps the question, changes answer and image
    for s in samples.iter().filter(|s| s.kind == VariantKind::FixQ) {
        assert_eq!(s.question, s.originating_question);
        assert_ne!(s.image_id.as_deref(), Some(s.originating_image_id.as_str()));
        assert_ne!(s.primary_answer(), &s.originating_answer);
    }
    // the positional template is held back until reviewed
    assert!(samples.iter().all(|s| s.template_id != "tpl-q06"));
    let skipped: Vec<serde_json::Value> = read_jsonl(&stage_dir(&config, Stage::ExtractTemplates).join("skipped.jsonl")).unwrap();
    assert_eq!(skipped.len(), 1);
    assert_eq!(skipped[0]["reason"], "no-entity-span");
}

#[test]
fn manifests_chain_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::toy_config(dir.path());
    run_all(&config, RunOptions { freeze: true }).unwrap();
    let first = common::snapshot(dir.path());

    let chain = [Stage::ExtractTemplates, Stage::GenerateVariants, Stage::AssignImages, Stage::Export, Stage::BuildFolds];
    for pair in chain.windows(2) {
        let (up, down) = (manifest(&config, pair[0]), manifest(&config, pair[1]));
        assert!(down.sequence > up.sequence, "{} -> {}", pair[0], pair[1]);
        let raw = fs::read(stage_dir(&config, pair[0]).join(MANIFEST)).unwrap();
        assert_eq!(down.upstream[pair[0].name()], kgadv::io::sha256_hex(&raw));
    }
    // every recorded output hash matches the file on disk
    for stage in chain {
        let m = manifest(&config, stage);
        assert_eq!(m.seed, 13);
        for (file, hash) in &m.outputs {
            let bytes = fs::read(stage_dir(&config, stage).join(file)).unwrap();
            assert_eq!(&kgadv::io::sha256_hex(&bytes), hash, "{file}");
        }
    }

    run_all(&config, RunOptions { freeze: true }).unwrap();
    assert_eq!(first, common::snapshot(dir.path()));
}

#[test]
fn missing_prerequisite_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::toy_config(dir.path());
    config.paths.predictions = vec![common::toy_dir().join("folds.json"), common::toy_dir().join("folds.json")];
    let err = run_stage(Stage::Evaluate, &config, RunOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    match &err {
        Error::Prerequisite { stage, path } => {
            assert_eq!(stage, "build-folds");
            assert!(path.ends_with("folds/manifest.json"), "{}", path.display());
        }
        other => panic!("unexpected {other}"),
    }
    assert!(err.to_string().contains("folds/manifest.json"));
    assert!(!stage_dir(&config, Stage::Evaluate).exists());
}

#[test]
fn failed_stage_leaves_previous_output_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::toy_config(dir.path());
    run_stage(Stage::ExtractTemplates, &config, RunOptions::default()).unwrap();
    let before = common::snapshot(&stage_dir(&config, Stage::ExtractTemplates));
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\": \"x\"}\n").unwrap();
    config.paths.corpus = bad;
    let err = run_stage(Stage::ExtractTemplates, &config, RunOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
    assert_eq!(before, common::snapshot(&stage_dir(&config, Stage::ExtractTemplates)));
}

#[test]
fn review_verdicts_flow_into_export_and_regeneration() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::toy_config(dir.path());
    config.test_unverified = false;
    for s in [Stage::ExtractTemplates, Stage::GenerateVariants, Stage::AssignImages] {
        run_stage(s, &config, RunOptions::default()).unwrap();
    }
    let (mut book, log) = open_review(&config).unwrap();
    let samples: Vec<AdversarialSample> = read_jsonl(&stage_dir(&config, Stage::AssignImages).join("samples.jsonl")).unwrap();
    let wine = samples.iter().find(|s| s.question.contains("carrying wine")).unwrap();
    let water = samples.iter().find(|s| s.question.contains("holding water")).unwrap();
    let submit = |book: &mut kgadv::review::ReviewBook, a: &str, item: &str, decision: Decision| {
        let v = Verdict { annotator_id: a.into(), item_id: item.into(), decision, timestamp_ms: 0, idempotency_key: None };
        book.submit(v.clone()).unwrap();
        log.append(&v).unwrap();
    };
    let [a1, a2] = [config.annotators[0].clone(), config.annotators[1].clone()];
    submit(&mut book, &a1, &water.id, Decision::Accept);
    submit(&mut book, &a2, &water.id, Decision::Accept);
    submit(&mut book, &a1, &wine.id, Decision::FlagInappropriate);
    // accept the positional template so it starts generating
    submit(&mut book, &a1, "tpl-q06", Decision::Edit { new_text: "what object is made of <t>?".into() });
    submit(&mut book, &a2, "tpl-q06", Decision::Edit { new_text: "what object is made of <t>?".into() });

    run_stage(Stage::Export, &config, RunOptions::default()).unwrap();
    let exported: Vec<AdversarialSample> = read_jsonl(&stage_dir(&config, Stage::Export).join("samples.jsonl")).unwrap();
    let status = |id: &str| exported.iter().find(|s| s.id == id).unwrap().review_status;
    assert_eq!(status(&water.id), ReviewStatus::Accepted);
    assert_eq!(status(&wine.id), ReviewStatus::Rejected);
    let blocklist = fs::read_to_string(stage_dir(&config, Stage::Export).join("blocklist.tsv")).unwrap();
    assert!(blocklist.contains("bottle\t/r/UsedFor\tcarry wine"));

    run_stage(Stage::BuildFolds, &config, RunOptions::default()).unwrap();
    let fold0: Vec<AdversarialSample> = read_jsonl(&stage_dir(&config, Stage::BuildFolds).join("fold_0/adversarial_test.jsonl")).unwrap();
    assert_eq!(fold0.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), [water.id.as_str()]);

    // regeneration honours the blocklist and the reviewed template
    run_stage(Stage::GenerateVariants, &config, RunOptions::default()).unwrap();
    let regenerated: Vec<AdversarialSample> = read_jsonl(&stage_dir(&config, Stage::GenerateVariants).join("samples.jsonl")).unwrap();
    let blocked = TripletKey::new("bottle", "/r/UsedFor", "carry wine").unwrap();
    assert!(regenerated.iter().all(|s| s.triplet != blocked));
    assert!(regenerated.iter().any(|s| s.question == "what object is made of plastic?"));
}

#[test]
fn augment_freeze_with_zero_probability_copies_training_set() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::toy_config(dir.path());
    config.replace_prob = 0.0;
    run_all(&config, RunOptions { freeze: true }).unwrap();
    for fold in 0..2 {
        let train = fs::read(stage_dir(&config, Stage::BuildFolds).join(format!("fold_{fold}/standard_train.jsonl"))).unwrap();
        for epoch in 0..2 {
            let emitted = fs::read(stage_dir(&config, Stage::Augment).join(format!("fold_{fold}/epoch_{epoch}.jsonl"))).unwrap();
            assert_eq!(train, emitted);
        }
    }
    let corpus: Vec<QaSample> = read_jsonl(&stage_dir(&config, Stage::ExtractTemplates).join("corpus.jsonl")).unwrap();
    assert!(corpus.iter().all(|s| s.answer_node().is_some()));
}

#[test]
fn evaluate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::toy_config(dir.path());
    run_all(&config, RunOptions::default()).unwrap();
    for fold in 0..2 {
        let adv: Vec<AdversarialSample> =
            read_jsonl(&stage_dir(&config, Stage::BuildFolds).join(format!("fold_{fold}/adversarial_test.jsonl"))).unwrap();
        let lines: String = adv
            .iter()
            .map(|s| format!("{{\"sample_id\":\"{}\",\"answer\":\"{}\"}}\n", s.id, s.primary_answer().as_str().to_uppercase()))
            .collect();
        let p = dir.path().join(format!("pred{fold}.jsonl"));
        fs::write(&p, lines).unwrap();
        config.paths.predictions.push(p);
    }
    run_stage(Stage::Evaluate, &config, RunOptions::default()).unwrap();
    let report: kgadv::eval::EvalReport = read_json(&stage_dir(&config, Stage::Evaluate).join("report.json")).unwrap();
    let adv = report.sets.iter().find(|s| s.set == "adversarial_test").unwrap();
    assert_eq!(adv.overall.correct, adv.overall.total);
    assert_eq!(adv.mean, Some(1.0));
    let std_test = report.sets.iter().find(|s| s.set == "standard_test").unwrap();
    assert_eq!(std_test.overall.correct, 0);
}
