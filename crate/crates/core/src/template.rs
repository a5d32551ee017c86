//! Slot-template extraction from grounded QA samples, transferability
//! heuristics and near-duplicate removal.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inflect::Inflection;
use crate::kg::{KgIndex, NodeId, Relation, TripletKey};
use crate::text::{normalize_label, similar_at_least, stem_token};

pub const HEAD_SLOT: &str = "<h>";
pub const TAIL_SLOT: &str = "<t>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Head,
    Tail,
}

impl Role {
    pub fn other(self) -> Role {
        match self {
            Role::Head => Role::Tail,
            Role::Tail => Role::Head,
        }
    }

    pub fn slot_token(self) -> &'static str {
        match self {
            Role::Head => HEAD_SLOT,
            Role::Tail => TAIL_SLOT,
        }
    }

    pub fn of(self, key: &TripletKey) -> &NodeId {
        match self {
            Role::Head => &key.head,
            Role::Tail => &key.tail,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    #[default]
    Pending,
    Accepted,
    Rejected,
    Conflict,
}

impl fmt::Display for ReviewStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReviewStatus::Pending => "pending",
            ReviewStatus::Accepted => "accepted",
            ReviewStatus::Rejected => "rejected",
            ReviewStatus::Conflict => "conflict",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Transferability {
    #[default]
    AutoOk,
    Flagged,
    Rejected,
}

/// One record of the QA corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaSample {
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_node: Option<NodeId>,
    pub fact: TripletKey,
    pub image_id: String,
    /// Optional per-fold train/test tags; fold specs are used when absent.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub folds: BTreeMap<usize, Split>,
}

impl QaSample {
    /// Normalize fact labels and resolve `answer_node` to the nearest KG node.
    pub fn resolve(&mut self, index: &KgIndex) -> Result<()> {
        self.fact = TripletKey::new(self.fact.head.as_str(), self.fact.relation.as_str(), self.fact.tail.as_str())?;
        let nearest = index.nearest_node(&self.answer)?.id.clone();
        match &self.answer_node {
            Some(given) if NodeId::from_label(given.as_str()) != nearest => {
                Err(Error::Validation(format!("sample {}: answer_node `{given}` disagrees with nearest node `{nearest}`", self.id)))
            }
            _ => {
                self.answer_node = Some(nearest);
                Ok(())
            }
        }
    }

    pub fn answer_node(&self) -> Option<&NodeId> {
        self.answer_node.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpan {
    /// Byte range of the slot surface in the source question.
    pub start: usize,
    pub end: usize,
    pub slot_kind: Role,
    pub inflection: Inflection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub id: String,
    pub text: String,
    pub relation: Relation,
    /// The node that is not in the slot; always the node at `answer_role`.
    pub fixed_node: NodeId,
    pub answer_role: Role,
    /// The node the slot held in the source question.
    pub slot_node: NodeId,
    pub slot: SlotSpan,
    /// Exact question substring replaced by the slot token.
    pub slot_surface: String,
    pub source_sample_id: String,
    pub source_question: String,
    pub source_image_id: String,
    pub source_fact: TripletKey,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub folds: BTreeMap<usize, Split>,
    pub transferable: Transferability,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default)]
    pub review_status: ReviewStatus,
}

impl QuestionTemplate {
    pub fn slot_kind(&self) -> Role {
        self.slot.slot_kind
    }

    pub fn slot_inflection(&self) -> Inflection {
        self.slot.inflection
    }

    /// Template text with `surface` in place of the slot token.
    pub fn fill(&self, surface: &str) -> String {
        self.text.replacen(self.slot_kind().slot_token(), surface, 1)
    }

    /// Usable for generation: auto-ok, or flagged and accepted by review.
    pub fn is_usable(&self) -> bool {
        match self.transferable {
            Transferability::AutoOk => self.review_status != ReviewStatus::Rejected,
            Transferability::Flagged => self.review_status == ReviewStatus::Accepted,
            Transferability::Rejected => false,
        }
    }

    fn flag(&mut self, reason: impl Into<String>) {
        self.transferable = Transferability::Flagged;
        self.flags.push(reason.into());
    }
}

pub fn count_slots(text: &str) -> usize {
    text.matches(HEAD_SLOT).count() + text.matches(TAIL_SLOT).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Match {
    start: usize,
    end: usize,
    inflection: Inflection,
}

impl Match {
    fn overlaps(&self, other: &Match) -> bool {
        self.start < other.end && other.start < self.end
    }
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b >= 0x80
}

/// Leftmost case-insensitive whole-word occurrence of `needle`.
fn find_word(haystack: &str, needle: &str) -> Option<(usize, usize)> {
    let h = haystack.as_bytes();
    let n = needle.as_bytes();
    if n.is_empty() || n.len() > h.len() {
        return None;
    }
    (0..=h.len() - n.len()).find_map(|i| {
        let window = &h[i..i + n.len()];
        let boundary_left = i == 0 || !is_word_byte(h[i - 1]);
        let boundary_right = i + n.len() == h.len() || !is_word_byte(h[i + n.len()]);
        (boundary_left && boundary_right && window.eq_ignore_ascii_case(n) && haystack.is_char_boundary(i)).then_some((i, i + n.len()))
    })
}

fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &b) in bytes.iter().enumerate() {
        match (is_word_byte(b), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, bytes.len()));
    }
    spans
}

fn stem_match(question: &str, label: &str) -> Option<Match> {
    let label_stems: Vec<String> = label.split(' ').map(stem_token).collect();
    let words = word_spans(question);
    if label_stems.is_empty() || words.len() < label_stems.len() {
        return None;
    }
    words.windows(label_stems.len()).find_map(|window| {
        let matches = window.iter().zip(&label_stems).all(|(&(s, e), stem)| stem_token(&question[s..e]) == *stem);
        matches.then(|| Match { start: window[0].0, end: window[window.len() - 1].1, inflection: Inflection::StemMatch })
    })
}

/// Longest productive match of `label`, falling back to stem equality.
fn best_match(question: &str, label: &str) -> Option<Match> {
    let mut best: Option<Match> = None;
    for inflection in Inflection::PRODUCTIVE {
        let Some(surface) = inflection.apply(label) else { continue };
        if let Some((start, end)) = find_word(question, &surface) {
            let candidate = Match { start, end, inflection };
            if best.is_none_or(|b| candidate.end - candidate.start > b.end - b.start) {
                best = Some(candidate);
            }
        }
    }
    best.or_else(|| stem_match(question, label))
}

fn template_id(sample_id: &str) -> String {
    format!("tpl-{sample_id}")
}

/// Replace the KG entity mentioned in the question with a slot token.
///
/// The non-answer entity is slotted when present. If only the answer entity
/// occurs, it is slotted with the answer role inverted and the template is
/// flagged. Returns `Ok(None)` when neither entity occurs, and
/// `Error::AmbiguousSpans` (carrying a flagged candidate) when the two spans
/// overlap.
pub fn extract_template(sample: &QaSample, index: &KgIndex) -> Result<Option<QuestionTemplate>> {
    let fact = index.get(&sample.fact).ok_or_else(|| Error::UnknownFact { sample_id: sample.id.clone(), fact: sample.fact.to_string() })?;
    let key = fact.key();
    let answer = sample.answer_node.clone().map(Ok).unwrap_or_else(|| index.nearest_node(&sample.answer).map(|n| n.id.clone()))?;
    let answer_role = if answer == key.head {
        Role::Head
    } else if answer == key.tail {
        Role::Tail
    } else {
        return Err(Error::AnswerNotInFact { sample_id: sample.id.clone(), answer: answer.to_string() });
    };
    let non_answer_role = answer_role.other();

    let answer_match = best_match(&sample.question, answer_role.of(&key).as_str());
    let other_match = best_match(&sample.question, non_answer_role.of(&key).as_str());

    let build = |slot_role: Role, m: Match| -> QuestionTemplate {
        let slot_token = slot_role.slot_token();
        let text = format!("{}{}{}", &sample.question[..m.start], slot_token, &sample.question[m.end..]);
        let fixed_role = slot_role.other();
        let mut template = QuestionTemplate {
            id: template_id(&sample.id),
            text,
            relation: key.relation.clone(),
            fixed_node: fixed_role.of(&key).clone(),
            answer_role: fixed_role,
            slot_node: slot_role.of(&key).clone(),
            slot: SlotSpan { start: m.start, end: m.end, slot_kind: slot_role, inflection: m.inflection },
            slot_surface: sample.question[m.start..m.end].to_string(),
            source_sample_id: sample.id.clone(),
            source_question: sample.question.clone(),
            source_image_id: sample.image_id.clone(),
            source_fact: key.clone(),
            folds: sample.folds.clone(),
            transferable: Transferability::AutoOk,
            flags: Vec::new(),
            review_status: ReviewStatus::Pending,
        };
        if m.inflection == Inflection::StemMatch {
            template.flag("stem-match");
        }
        template
    };

    match (other_match, answer_match) {
        (Some(o), Some(a)) if o.overlaps(&a) => {
            let (role, m) = if a.end - a.start > o.end - o.start { (answer_role, a) } else { (non_answer_role, o) };
            let mut candidate = build(role, m);
            candidate.flag("ambiguous-spans");
            Err(Error::AmbiguousSpans { sample_id: sample.id.clone(), candidate: Box::new(candidate) })
        }
        (Some(o), _) => Ok(Some(build(non_answer_role, o))),
        (None, Some(a)) => {
            let mut t = build(answer_role, a);
            t.flag("answer-role-inverted");
            Ok(Some(t))
        }
        (None, None) => Ok(None),
    }
}

const POSITIONAL: &[&str] = &[
    "lower right",
    "lower left",
    "upper right",
    "upper left",
    "top right",
    "top left",
    "bottom right",
    "bottom left",
    "left of",
    "right of",
    "top of the image",
    "top of the picture",
    "bottom of the image",
    "bottom of the picture",
    "on the left",
    "on the right",
    "in the corner",
    "in the background",
    "in the foreground",
    "in the middle of",
    "in the center of",
    "in front of",
    "behind the",
    "next to the",
];

const SCENE: &[&str] =
    &["the place shown", "this place", "this location", "this scene", "the scene", "this room", "this setting", "where is this"];

const DEIXIS: &[&str] =
    &["shown here", "happening here", "going on here", "this person", "these people", "that person", "this event", "this activity"];

/// Apply the transferability heuristics. Manual verdicts are never overridden.
pub fn flag_non_transferable(mut template: QuestionTemplate) -> QuestionTemplate {
    if template.transferable == Transferability::Rejected {
        return template;
    }
    let text = normalize_label(&template.text);
    for (family, patterns) in [("positional", POSITIONAL), ("scene", SCENE), ("deixis", DEIXIS)] {
        for p in patterns.iter().filter(|p| text.contains(*p)) {
            template.flag(format!("{family}: {p}"));
        }
    }
    template
}

fn find_root(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Collapse single-linkage similarity clusters to their lowest-id member.
///
/// Two templates link when `1 - lev/max_len >= threshold` over their
/// normalized texts; clusters are the transitive closure of those links.
pub fn dedupe_templates(templates: Vec<QuestionTemplate>, threshold: f64) -> Vec<QuestionTemplate> {
    let mut templates = templates;
    templates.sort_by(|a, b| a.id.cmp(&b.id));
    let texts: Vec<String> = templates.iter().map(|t| normalize_label(&t.text)).collect();
    let mut parent: Vec<usize> = (0..templates.len()).collect();
    for i in 0..templates.len() {
        for j in (i + 1)..templates.len() {
            let (ri, rj) = (find_root(&mut parent, i), find_root(&mut parent, j));
            if ri == rj {
                continue;
            }
            if texts[i] == texts[j] || similar_at_least(&texts[i], &texts[j], threshold) {
                // keep the smaller index as root so roots are lowest ids
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    templates.into_iter().enumerate().filter(|(i, _)| find_root(&mut parent, *i) == *i).map(|(_, t)| t).collect()
}


#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub fn template(id: &str, image: &str) -> QuestionTemplate {
        let fact = TripletKey::new("bottle", "/r/UsedFor", "store liquid").unwrap();
        QuestionTemplate {
            id: id.into(),
            text: "what is used for <t> in this image?".into(),
            relation: fact.relation.clone(),
            fixed_node: fact.head.clone(),
            answer_role: Role::Head,
            slot_node: fact.tail.clone(),
            slot: SlotSpan { start: 17, end: 31, slot_kind: Role::Tail, inflection: Inflection::Gerund },
            slot_surface: "storing liquid".into(),
            source_sample_id: id.trim_start_matches("tpl-").into(),
            source_question: "what is used for storing liquid in this image?".into(),
            source_image_id: image.into(),
            source_fact: fact,
            folds: BTreeMap::new(),
            transferable: Transferability::AutoOk,
            flags: vec![],
            review_status: ReviewStatus::Pending,
        }
    }
}
