//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use kgadv::config::PipelineConfig;
use kgadv::dataset::FoldSpec;
use kgadv::kg::{default_whitelist, KgIndex, KgTriplet, TripletKey};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

/// Config for the static toy fixture writing into `out`.
pub fn toy_config(out: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::load(&toy_dir().join("pipeline.toml")).unwrap();
    c.paths.output_dir = out.to_path_buf();
    c
}

pub fn index_of(rows: &[(&str, &str, &str)]) -> KgIndex {
    let rows = rows.iter().map(|(h, r, t)| {
        let k = TripletKey::new(h, r, t).unwrap();
        KgTriplet { head: k.head, relation: k.relation, tail: k.tail, surface_text: None, blocked: false }
    });
    KgIndex::build(rows, &default_whitelist(), &BTreeSet::new()).0
}

/// A generated corpus with KG, image catalog and folds.
pub struct World {
    pub kg_tsv: String,
    pub corpus_jsonl: String,
    pub catalog: BTreeMap<String, Vec<String>>,
    pub folds: Vec<FoldSpec>,
    pub samples: usize,
}

const HEADS: &[&str] = &[
    "bottle", "jug", "vase", "cup", "spoon", "ladle", "hammer", "mallet", "knife", "saw", "broom", "brush", "pen", "pencil", "kettle",
    "pan", "bucket", "basket", "rope", "ladder", "drill", "shovel", "rake", "towel", "sponge", "oven", "fan", "lamp", "clock", "phone",
];
const USES: &[&str] = &[
    "store liquid",
    "hold water",
    "carry wine",
    "scoop food",
    "stir soup",
    "hit nail",
    "cut bread",
    "cut wood",
    "sweep floor",
    "paint wall",
    "write letter",
    "draw picture",
    "boil water",
    "fry egg",
    "carry sand",
    "tie box",
    "climb wall",
    "dig hole",
    "dry hand",
    "clean dish",
    "bake bread",
    "cool room",
    "light room",
    "tell time",
    "call friend",
];
const PARTS: &[&str] = &["handle", "lid", "blade", "cord", "button", "wheel", "base", "spout"];
const OPENERS: &[&str] = &[
    "",
    "tell me, ",
    "quick one: ",
    "looking closely, ",
    "in your opinion, ",
    "based on common sense, ",
    "hint: think of daily life. ",
    "without guessing wildly, ",
    "as far as you know, ",
    "from experience, ",
];
const PLACES: &[&str] = &["kitchen", "garage", "garden", "office", "bathroom", "shed"];

/// Random KG over household objects and a corpus whose questions mention
/// the non-answer entity verbatim, spread over `images` images and 5 folds.
pub fn world(seed: u64, samples: usize, images: usize) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets: BTreeSet<(String, &str, String)> = BTreeSet::new();
    for h in HEADS {
        for u in USES.choose_multiple(&mut rng, 4) {
            triplets.insert((h.to_string(), "/r/UsedFor", u.to_string()));
        }
        for p in PARTS.choose_multiple(&mut rng, 2) {
            triplets.insert((h.to_string(), "/r/HasA", p.to_string()));
        }
        triplets.insert((h.to_string(), "/r/AtLocation", PLACES.choose(&mut rng).unwrap().to_string()));
    }
    let triplets: Vec<_> = triplets.into_iter().collect();
    let mut kg_tsv = String::new();
    for (h, r, t) in &triplets {
        writeln!(kg_tsv, "{h}\t{r}\t{t}").unwrap();
    }

    let image_ids: Vec<String> = (0..images).map(|i| format!("img{i:05}")).collect();
    let mut catalog: BTreeMap<String, Vec<String>> = image_ids
        .iter()
        .map(|id| {
            let labels = HEADS.choose_multiple(&mut rng, 3).map(|s| s.to_string()).collect();
            (id.clone(), labels)
        })
        .collect();

    let mut corpus_jsonl = String::new();
    for i in 0..samples {
        let (h, r, t) = triplets.choose(&mut rng).unwrap();
        let image = image_ids[rng.gen_range(0..images)].clone();
        let phrasing = rng.gen_range(0..3);
        let opener = OPENERS.choose(&mut rng).unwrap();
        let (question, answer) = match (*r, phrasing) {
            ("/r/UsedFor", 0) => (format!("what is used for {t} in this image?"), h.clone()),
            ("/r/UsedFor", 1) => (format!("which thing shown can help you {t}?"), h.clone()),
            ("/r/UsedFor", _) => (format!("if you need to {t}, which object would you pick here?"), h.clone()),
            ("/r/HasA", 0) => (format!("which object in this image has a {t}?"), h.clone()),
            ("/r/HasA", 1) => (format!("name something visible that comes with a {t}"), h.clone()),
            ("/r/HasA", _) => (format!("what in the photo includes a {t} as a part?"), h.clone()),
            (_, 0) => (format!("where would you usually find the {h}?"), t.clone()),
            (_, 1) => (format!("in which room is a {h} normally kept?"), t.clone()),
            _ => (format!("a {h} like this one belongs in what place?"), t.clone()),
        };
        let question = format!("{opener}{question}");
        let labels = catalog.get_mut(&image).unwrap();
        if !labels.contains(&answer) {
            labels.push(answer.clone());
        }
        let record = serde_json::json!({
            "id": format!("s{i:05}"),
            "question": question,
            "answer": answer,
            "fact": {"head": h, "relation": r, "tail": t},
            "image_id": image,
        });
        writeln!(corpus_jsonl, "{record}").unwrap();
    }

    let folds = (0..5)
        .map(|f| FoldSpec {
            fold_index: f,
            train_image_ids: image_ids.iter().enumerate().filter(|(i, _)| i % 5 != f).map(|(_, id)| id.clone()).collect(),
            test_image_ids: image_ids.iter().enumerate().filter(|(i, _)| i % 5 == f).map(|(_, id)| id.clone()).collect(),
        })
        .collect();
    World { kg_tsv, corpus_jsonl, catalog, folds, samples }
}

impl World {
    /// Write the inputs plus a config into `dir`; outputs go to `dir/out`.
    pub fn write(&self, dir: &Path, seed: u64) -> PipelineConfig {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join("kg.tsv"), &self.kg_tsv).unwrap();
        fs::write(dir.join("corpus.jsonl"), &self.corpus_jsonl).unwrap();
        fs::write(dir.join("catalog.json"), serde_json::to_string_pretty(&self.catalog).unwrap()).unwrap();
        fs::write(dir.join("folds.json"), serde_json::to_string_pretty(&self.folds).unwrap()).unwrap();
        let toml = format!(
            "seed = {seed}\nselection = \"seeded\"\nepochs = 2\n\
             [paths]\nkg = \"kg.tsv\"\ncorpus = \"corpus.jsonl\"\ncatalog = \"catalog.json\"\n\
             folds = \"folds.json\"\noutput_dir = \"out\"\n"
        );
        fs::write(dir.join("pipeline.toml"), toml).unwrap();
        PipelineConfig::load(&dir.join("pipeline.toml")).unwrap()
    }
}

/// Every regular file under `root`, relative path to contents.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}
