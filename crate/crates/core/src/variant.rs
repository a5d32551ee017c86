//! FixA / FixQ generation by sibling-triplet enumeration.
//!
//! FixA keeps the answer node and relation and varies the node in the
//! question slot, so the question is re-rendered. FixQ keeps the slot node
//! and relation and varies the answer, so the question text is unchanged and
//! only the image (assigned later) and answer differ.

use std::fmt;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::inflect::Inflection;
use crate::io::sha256_hex;
use crate::kg::{KgIndex, KgNode, KgTriplet, NodeId, TripletKey};
use crate::template::{QuestionTemplate, ReviewStatus, Role};

pub const DEFAULT_CAP: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariantKind {
    FixA,
    FixQ,
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VariantKind::FixA => "FixA",
            VariantKind::FixQ => "FixQ",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversarialSample {
    pub id: String,
    pub kind: VariantKind,
    pub question: String,
    /// Primary (triplet-derived) answer first.
    pub answer_nodes: Vec<NodeId>,
    pub triplet: TripletKey,
    /// Rendered triplet surface, shown to reviewers.
    pub surface: String,
    pub template_id: String,
    pub originating_sample_id: String,
    pub originating_question: String,
    pub originating_answer: NodeId,
    pub originating_image_id: String,
    pub image_id: Option<String>,
    #[serde(default)]
    pub review_status: ReviewStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl AdversarialSample {
    pub fn primary_answer(&self) -> &NodeId {
        &self.answer_nodes[0]
    }

    /// Check the kind invariants against the originating sample.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.answer_nodes.is_empty() {
            return Err(format!("{}: no answer nodes", self.id));
        }
        match self.kind {
            VariantKind::FixA => {
                if self.question == self.originating_question {
                    return Err(format!("{}: FixA question equals the originating question", self.id));
                }
                if self.answer_nodes != [self.originating_answer.clone()] {
                    return Err(format!("{}: FixA answer differs from the originating answer", self.id));
                }
            }
            VariantKind::FixQ => {
                if self.question != self.originating_question {
                    return Err(format!("{}: FixQ question differs from the originating question", self.id));
                }
                if self.primary_answer() == &self.originating_answer {
                    return Err(format!("{}: FixQ primary answer equals the originating answer", self.id));
                }
            }
        }
        Ok(())
    }
}

/// How the per-template cap picks among siblings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Selection {
    /// Sorted sibling order, truncated.
    #[default]
    First,
    /// Uniform subset drawn from a per-template stream of `seed`, kept in
    /// sibling order.
    Seeded { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub cap_fix_a: usize,
    pub cap_fix_q: usize,
    pub selection: Selection,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { cap_fix_a: DEFAULT_CAP, cap_fix_q: DEFAULT_CAP, selection: Selection::First }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedQuestion {
    pub text: String,
    /// The recorded inflection did not apply and the label was inserted verbatim.
    pub fell_back: bool,
}

/// Fill the template slot with `node`, inflected like the original span.
pub fn render_question(template: &QuestionTemplate, node: &KgNode) -> RenderedQuestion {
    match template.slot_inflection().apply(&node.label) {
        Some(surface) => RenderedQuestion { text: template.fill(&surface), fell_back: false },
        None => RenderedQuestion { text: template.fill(&node.label), fell_back: true },
    }
}

pub fn sample_id(template_id: &str, kind: VariantKind, triplet: &TripletKey) -> String {
    let digest = sha256_hex(format!("{template_id}\u{1f}{kind}\u{1f}{}", triplet.to_tsv()).as_bytes());
    format!("{}-{}", kind.to_string().to_lowercase(), &digest[..16])
}

fn select<'a>(siblings: Vec<&'a KgTriplet>, cap: usize, selection: Selection, template_id: &str) -> Vec<&'a KgTriplet> {
    if siblings.len() <= cap {
        return siblings;
    }
    match selection {
        Selection::First => siblings.into_iter().take(cap).collect(),
        Selection::Seeded { seed } => {
            let salt = u64::from_str_radix(&sha256_hex(template_id.as_bytes())[..16], 16).expect("hex digest");
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
            let mut picked = sample_indices(&mut rng, siblings.len(), cap).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| siblings[i]).collect()
        }
    }
}

fn base_sample(template: &QuestionTemplate, kind: VariantKind, triplet: &KgTriplet) -> AdversarialSample {
    let key = triplet.key();
    AdversarialSample {
        id: sample_id(&template.id, kind, &key),
        kind,
        question: String::new(),
        answer_nodes: Vec::new(),
        surface: triplet.render_surface(),
        triplet: key,
        template_id: template.id.clone(),
        originating_sample_id: template.source_sample_id.clone(),
        originating_question: template.source_question.clone(),
        originating_answer: template.fixed_node.clone(),
        originating_image_id: template.source_image_id.clone(),
        image_id: None,
        review_status: ReviewStatus::Pending,
        flags: Vec::new(),
    }
}

/// Same answer, reworded question: siblings that keep the answer node and
/// relation and vary the slot node.
pub fn generate_fix_a(template: &QuestionTemplate, index: &KgIndex, cap: usize, selection: Selection) -> Vec<AdversarialSample> {
    let siblings = match template.answer_role {
        Role::Head => index.siblings_fixed_head(&template.fixed_node, &template.relation, &template.slot_node),
        Role::Tail => index.siblings_fixed_tail(&template.fixed_node, &template.relation, &template.slot_node),
    };
    let slot_role = template.slot_kind();
    let mut out = Vec::new();
    for triplet in select(siblings, cap, selection, &template.id) {
        let key = triplet.key();
        let Some(node) = index.node(slot_role.of(&key)) else { continue };
        let rendered = render_question(template, node);
        let mut s = base_sample(template, VariantKind::FixA, triplet);
        s.question = rendered.text;
        s.answer_nodes = vec![template.fixed_node.clone()];
        if rendered.fell_back {
            s.flags.push(format!("inflection-fallback: {:?} on `{}`", template.slot_inflection(), node.label));
        }
        if template.slot_inflection() == Inflection::StemMatch {
            s.flags.push("stem-match-template".into());
        }
        out.push(s);
    }
    out
}

/// Same question, different answer: siblings that keep the slot node and
/// relation and vary the answer node.
pub fn generate_fix_q(template: &QuestionTemplate, index: &KgIndex, cap: usize, selection: Selection) -> Vec<AdversarialSample> {
    let siblings = match template.answer_role {
        Role::Head => index.siblings_fixed_tail(&template.slot_node, &template.relation, &template.fixed_node),
        Role::Tail => index.siblings_fixed_head(&template.slot_node, &template.relation, &template.fixed_node),
    };
    select(siblings, cap, selection, &template.id)
        .into_iter()
        .map(|triplet| {
            let key = triplet.key();
            let mut s = base_sample(template, VariantKind::FixQ, triplet);
            s.question = template.source_question.clone();
            s.answer_nodes = vec![template.answer_role.of(&key).clone()];
            s
        })
        .collect()
}

/// All variants of all usable templates in canonical
/// `(template id, kind, triplet key)` order.
pub fn generate_all(templates: &[QuestionTemplate], index: &KgIndex, config: &GenerationConfig) -> Vec<AdversarialSample> {
    let mut out: Vec<AdversarialSample> = templates
        .iter()
        .filter(|t| t.is_usable())
        .flat_map(|t| {
            let mut v = generate_fix_a(t, index, config.cap_fix_a, config.selection);
            v.extend(generate_fix_q(t, index, config.cap_fix_q, config.selection));
            v
        })
        // edited templates may coincide with the original text
        .filter(|s| s.check_invariants().is_ok())
        .collect();
    out.sort_by(|a, b| (&a.template_id, a.kind, &a.triplet).cmp(&(&b.template_id, b.kind, &b.triplet)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::default_whitelist;
    use crate::template::{extract_template, QaSample};
    use std::collections::{BTreeMap, BTreeSet};

    fn index(rows: &[(String, &str, String)]) -> KgIndex {
        let rows = rows.iter().map(|(h, r, t)| {
            let k = TripletKey::new(h, r, t).unwrap();
            KgTriplet { head: k.head, relation: k.relation, tail: k.tail, surface_text: None, blocked: false }
        });
        KgIndex::build(rows, &default_whitelist(), &BTreeSet::new()).0
    }

    fn row(h: &str, r: &'static str, t: &str) -> (String, &'static str, String) {
        (h.to_string(), r, t.to_string())
    }

    fn bottle_template(idx: &KgIndex) -> QuestionTemplate {
        let s = QaSample {
            id: "s1".into(),
            question: "what is used for storing liquid in this image?".into(),
            answer: "bottle".into(),
            answer_node: None,
            fact: TripletKey::new("bottle", "/r/UsedFor", "store liquid").unwrap(),
            image_id: "img0".into(),
            folds: BTreeMap::new(),
        };
        extract_template(&s, idx).unwrap().unwrap()
    }

    #[test]
    fn fix_a_worked_example() {
        let idx = index(&[row("bottle", "/r/UsedFor", "store liquid"), row("bottle", "/r/UsedFor", "hold water")]);
        let t = bottle_template(&idx);
        let out = generate_fix_a(&t, &idx, 5, Selection::First);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].question, "what is used for holding water in this image?");
        assert_eq!(out[0].answer_nodes, vec![NodeId::from_label("bottle")]);
        assert_eq!(out[0].kind, VariantKind::FixA);
        assert!(out[0].check_invariants().is_ok());
    }

    #[test]
    fn fix_q_worked_example() {
        let idx = index(&[row("bottle", "/r/UsedFor", "store liquid"), row("jug", "/r/UsedFor", "store liquid")]);
        let t = bottle_template(&idx);
        let out = generate_fix_q(&t, &idx, 5, Selection::First);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].question, "what is used for storing liquid in this image?");
        assert_eq!(out[0].answer_nodes, vec![NodeId::from_label("jug")]);
        assert!(out[0].check_invariants().is_ok());
        assert!(generate_fix_a(&t, &idx, 5, Selection::First).is_empty());
    }

    #[test]
    fn caps_truncate_sorted_siblings() {
        let mut rows = vec![row("bottle", "/r/UsedFor", "store liquid")];
        for i in 0..9 {
            rows.push(row("bottle", "/r/UsedFor", &format!("hold thing{i}")));
        }
        for i in 0..8 {
            rows.push(row(&format!("jar{i}"), "/r/UsedFor", "store liquid"));
        }
        let idx = index(&rows);
        let t = bottle_template(&idx);

        // oracle: enumerate by linear scan, sort, truncate
        let mut expected: Vec<String> = idx
            .triplets()
            .filter(|tr| tr.head.as_str() == "bottle" && tr.tail.as_str() != "store liquid")
            .map(|tr| tr.tail.to_string())
            .collect();
        expected.sort();
        expected.truncate(5);

        let fix_a = generate_fix_a(&t, &idx, 5, Selection::First);
        assert_eq!(fix_a.iter().map(|s| s.triplet.tail.to_string()).collect::<Vec<_>>(), expected);
        assert_eq!(generate_fix_q(&t, &idx, 5, Selection::First).len(), 5);

        let seeded = generate_fix_a(&t, &idx, 5, Selection::Seeded { seed: 7 });
        assert_eq!(seeded.len(), 5);
        assert_eq!(seeded, generate_fix_a(&t, &idx, 5, Selection::Seeded { seed: 7 }));
    }

    #[test]
    fn render_gerund_and_fallback() {
        let idx = index(&[row("bottle", "/r/UsedFor", "store liquid"), row("hammer", "/r/UsedFor", "hit nail")]);
        let t = bottle_template(&idx);
        let hit = idx.node(&NodeId::from_label("hit nail")).unwrap();
        assert_eq!(render_question(&t, hit).text, "what is used for hitting nail in this image?");
        let odd = KgNode { id: NodeId::from_label("4 wheels"), label: "4 wheels".into(), lemma: "4 wheel".into() };
        let r = render_question(&t, &odd);
        assert!(r.fell_back);
        assert_eq!(r.text, "what is used for 4 wheels in this image?");
    }

    #[test]
    fn ids_are_stable() {
        let key = TripletKey::new("bottle", "/r/UsedFor", "hold water").unwrap();
        assert_eq!(sample_id("tpl-s1", VariantKind::FixA, &key), sample_id("tpl-s1", VariantKind::FixA, &key));
        assert_ne!(sample_id("tpl-s1", VariantKind::FixA, &key), sample_id("tpl-s1", VariantKind::FixQ, &key));
        assert!(sample_id("tpl-s1", VariantKind::FixQ, &key).starts_with("fixq-"));
    }
}
