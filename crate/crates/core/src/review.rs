//! Two-annotator verification over an append-only verdict log.
//!
//! Item statuses are a pure function of the log: they are recomputed by
//! replaying every verdict in order, so reopening a log reproduces the same
//! state. Acceptance needs both designated annotators to accept (or to submit
//! the same edit); any rejection rejects; a flag for inappropriate content
//! rejects every item built on the same triplet and adds it to the blocklist.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::from_jsonl;
use crate::kg::TripletKey;
use crate::template::{count_slots, QuestionTemplate, ReviewStatus, Transferability};
use crate::variant::{AdversarialSample, VariantKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Template,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    CounterIntuitive,
    WrongImage,
    NonTransferable,
    Inappropriate,
    /// May reveal information about individuals.
    Privacy,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<RejectReason>,
    },
    Edit {
        new_text: String,
    },
    FlagInappropriate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub annotator_id: String,
    pub item_id: String,
    #[serde(flatten)]
    pub decision: Decision,
    #[serde(default)]
    pub timestamp_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

/// What the reviewer sees; fixed when the item is created.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemPayload {
    pub question: String,
    pub surface: String,
    pub answers: Vec<String>,
    pub triplet: TripletKey,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant_kind: Option<VariantKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub originating_question: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot_token: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemDef {
    pub id: String,
    pub kind: ItemKind,
    pub payload: ItemPayload,
}

impl ItemDef {
    pub fn from_template(t: &QuestionTemplate) -> Self {
        ItemDef {
            id: t.id.clone(),
            kind: ItemKind::Template,
            payload: ItemPayload {
                question: t.text.clone(),
                surface: format!("[{}] {} [{}]", t.source_fact.head, t.relation.gloss(), t.source_fact.tail),
                answers: vec![t.fixed_node.to_string()],
                triplet: t.source_fact.clone(),
                image_id: Some(t.source_image_id.clone()),
                variant_kind: None,
                originating_question: Some(t.source_question.clone()),
                slot_token: Some(t.slot_kind().slot_token().to_string()),
                flags: t.flags.clone(),
            },
        }
    }

    pub fn from_sample(s: &AdversarialSample) -> Self {
        ItemDef {
            id: s.id.clone(),
            kind: ItemKind::Sample,
            payload: ItemPayload {
                question: s.question.clone(),
                surface: s.surface.clone(),
                answers: s.answer_nodes.iter().map(|n| n.to_string()).collect(),
                triplet: s.triplet.clone(),
                image_id: s.image_id.clone(),
                variant_kind: Some(s.kind),
                originating_question: Some(s.originating_question.clone()),
                slot_token: None,
                flags: s.flags.clone(),
            },
        }
    }

    fn validate_edit(&self, new_text: &str) -> Result<()> {
        if new_text.trim().is_empty() {
            return Err(Error::Validation("edited text is empty".into()));
        }
        match self.kind {
            ItemKind::Template => {
                let token = self.payload.slot_token.as_deref().unwrap_or_default();
                if count_slots(new_text) != 1 || !new_text.contains(token) {
                    return Err(Error::Validation(format!("template edit must keep exactly one {token} placeholder")));
                }
            }
            ItemKind::Sample => {
                if count_slots(new_text) != 0 {
                    return Err(Error::Validation("sample text must not contain placeholders".into()));
                }
                let original = self.payload.originating_question.as_deref();
                match self.payload.variant_kind {
                    Some(VariantKind::FixA) if original == Some(new_text) => {
                        return Err(Error::Validation("FixA question must differ from the originating question".into()))
                    }
                    Some(VariantKind::FixQ) if original != Some(new_text) => {
                        return Err(Error::Validation("FixQ question must stay the originating question".into()))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub kind: ItemKind,
    pub payload: ItemPayload,
    pub status: ReviewStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<RejectReason>,
    /// Latest verdict of each annotator.
    pub verdicts: Vec<Verdict>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueFilter {
    #[serde(default)]
    pub kind: Option<ItemKind>,
    #[serde(default)]
    pub status: Option<ReviewStatus>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Funnel {
    pub generated: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub conflict: usize,
    pub pending: usize,
    pub acceptance_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProgress {
    pub verdicts: usize,
    pub items: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub annotators: BTreeMap<String, AnnotatorProgress>,
    pub templates: Funnel,
    pub samples: Funnel,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResolvedExport {
    pub accepted: Vec<ReviewItem>,
    pub blocklist: Vec<TripletKey>,
    pub funnel: Funnel,
}

#[derive(Debug, Clone)]
struct Derived {
    status: ReviewStatus,
    final_text: Option<String>,
    reject_reason: Option<RejectReason>,
}

/// Review state: item definitions, the verdict log, and statuses derived
/// from it.
#[derive(Debug, Clone)]
pub struct ReviewBook {
    annotators: Vec<String>,
    items: BTreeMap<String, ItemDef>,
    log: Vec<Verdict>,
    derived: BTreeMap<String, Derived>,
    blocklist: BTreeSet<TripletKey>,
}

impl ReviewBook {
    pub fn new(annotators: Vec<String>, items: impl IntoIterator<Item = ItemDef>) -> Result<Self> {
        let distinct: BTreeSet<&String> = annotators.iter().collect();
        if annotators.len() != 2 || distinct.len() != 2 {
            return Err(Error::Config(format!("exactly two distinct annotators are required, got {annotators:?}")));
        }
        let mut book = ReviewBook {
            annotators,
            items: items.into_iter().map(|i| (i.id.clone(), i)).collect(),
            log: Vec::new(),
            derived: BTreeMap::new(),
            blocklist: BTreeSet::new(),
        };
        book.recompute();
        Ok(book)
    }

    /// Rebuild state from a log without re-validating it.
    pub fn replay(annotators: Vec<String>, items: impl IntoIterator<Item = ItemDef>, log: Vec<Verdict>) -> Result<Self> {
        let mut book = ReviewBook::new(annotators, items)?;
        book.log = log;
        book.recompute();
        Ok(book)
    }

    pub fn annotators(&self) -> &[String] {
        &self.annotators
    }

    pub fn log(&self) -> &[Verdict] {
        &self.log
    }

    pub fn blocklist(&self) -> &BTreeSet<TripletKey> {
        &self.blocklist
    }

    /// Check a verdict without recording it. `Ok(false)` means its
    /// idempotency key was already seen and submitting it is a no-op.
    pub fn validate(&self, verdict: &Verdict) -> Result<bool> {
        if !self.annotators.contains(&verdict.annotator_id) {
            return Err(Error::Validation(format!("annotator {} is not registered", verdict.annotator_id)));
        }
        let def = self.items.get(&verdict.item_id).ok_or_else(|| Error::NotFound(verdict.item_id.clone()))?;
        if let Some(key) = &verdict.idempotency_key {
            if self.log.iter().any(|v| v.idempotency_key.as_ref() == Some(key)) {
                return Ok(false);
            }
        }
        if let Decision::Edit { new_text } = &verdict.decision {
            def.validate_edit(new_text)?;
        }
        Ok(true)
    }

    /// Validate and append a verdict. A repeated idempotency key is a no-op.
    pub fn submit(&mut self, verdict: Verdict) -> Result<(ReviewItem, bool)> {
        let fresh = self.validate(&verdict)?;
        let id = verdict.item_id.clone();
        if fresh {
            self.log.push(verdict);
            self.recompute();
        }
        Ok((self.item(&id).expect("validated item exists"), fresh))
    }

    fn recompute(&mut self) {
        let mut latest: BTreeMap<&str, BTreeMap<&str, &Verdict>> = BTreeMap::new();
        let mut blocklist = BTreeSet::new();
        for v in &self.log {
            let Some(def) = self.items.get(&v.item_id) else { continue };
            if v.decision == Decision::FlagInappropriate {
                blocklist.insert(def.payload.triplet.clone());
            }
            latest.entry(v.item_id.as_str()).or_default().insert(v.annotator_id.as_str(), v);
        }
        let mut derived = BTreeMap::new();
        for (id, def) in &self.items {
            let votes = latest.get(id.as_str());
            let state = if blocklist.contains(&def.payload.triplet) {
                Derived { status: ReviewStatus::Rejected, final_text: None, reject_reason: Some(RejectReason::Inappropriate) }
            } else {
                let decisions: Vec<&Decision> =
                    self.annotators.iter().filter_map(|a| votes.and_then(|m| m.get(a.as_str()))).map(|v| &v.decision).collect();
                resolve(&decisions)
            };
            derived.insert(id.clone(), state);
        }
        self.derived = derived;
        self.blocklist = blocklist;
    }

    pub fn item(&self, id: &str) -> Option<ReviewItem> {
        let def = self.items.get(id)?;
        let d = &self.derived[id];
        let verdicts = self
            .annotators
            .iter()
            .filter_map(|a| self.log.iter().rev().find(|v| v.item_id == id && &v.annotator_id == a))
            .cloned()
            .collect();
        Some(ReviewItem {
            id: def.id.clone(),
            kind: def.kind,
            payload: def.payload.clone(),
            status: d.status,
            final_text: d.final_text.clone(),
            reject_reason: d.reject_reason,
            verdicts,
        })
    }

    pub fn status(&self, id: &str) -> Option<ReviewStatus> {
        self.derived.get(id).map(|d| d.status)
    }

    /// Items matching the filter (default: pending), templates before
    /// samples, each in id order.
    pub fn queue(&self, filter: &QueueFilter) -> Vec<ReviewItem> {
        let want = filter.status.unwrap_or(ReviewStatus::Pending);
        let mut ids: Vec<(&ItemKind, &String)> = self
            .items
            .values()
            .filter(|d| filter.kind.is_none_or(|k| k == d.kind))
            .filter(|d| self.derived[&d.id].status == want)
            .map(|d| (&d.kind, &d.id))
            .collect();
        ids.sort();
        ids.into_iter().filter_map(|(_, id)| self.item(id)).collect()
    }

    fn funnel(&self, kind: ItemKind) -> Funnel {
        let mut f = Funnel::default();
        for d in self.items.values().filter(|d| d.kind == kind) {
            f.generated += 1;
            match self.derived[&d.id].status {
                ReviewStatus::Accepted => f.accepted += 1,
                ReviewStatus::Rejected => f.rejected += 1,
                ReviewStatus::Conflict => f.conflict += 1,
                ReviewStatus::Pending => f.pending += 1,
            }
        }
        f.acceptance_rate = (f.generated > 0).then(|| f.accepted as f64 / f.generated as f64);
        f
    }

    pub fn progress(&self) -> Progress {
        let mut annotators: BTreeMap<String, AnnotatorProgress> =
            self.annotators.iter().map(|a| (a.clone(), AnnotatorProgress::default())).collect();
        let mut touched: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for v in &self.log {
            if let Some(p) = annotators.get_mut(&v.annotator_id) {
                p.verdicts += 1;
                touched.entry(v.annotator_id.as_str()).or_default().insert(v.item_id.as_str());
            }
        }
        for (a, items) in touched {
            annotators.get_mut(a).expect("registered").items = items.len();
        }
        Progress { annotators, templates: self.funnel(ItemKind::Template), samples: self.funnel(ItemKind::Sample) }
    }

    pub fn export_resolved(&self) -> ResolvedExport {
        let accepted =
            self.items.keys().filter(|id| self.derived[*id].status == ReviewStatus::Accepted).filter_map(|id| self.item(id)).collect();
        ResolvedExport { accepted, blocklist: self.blocklist.iter().cloned().collect(), funnel: self.funnel(ItemKind::Sample) }
    }

    /// Copy statuses and accepted edits onto generated samples.
    pub fn apply_to_samples(&self, samples: &mut [AdversarialSample]) {
        for s in samples {
            if let Some(d) = self.derived.get(&s.id) {
                s.review_status = d.status;
                if let Some(text) = &d.final_text {
                    s.question = text.clone();
                }
            }
            if self.blocklist.contains(&s.triplet) {
                s.review_status = ReviewStatus::Rejected;
            }
        }
    }

    /// Copy statuses and accepted edits onto templates.
    pub fn apply_to_templates(&self, templates: &mut [QuestionTemplate]) {
        for t in templates {
            if let Some(d) = self.derived.get(&t.id) {
                t.review_status = d.status;
                if d.status == ReviewStatus::Rejected {
                    t.transferable = Transferability::Rejected;
                }
                if let Some(text) = &d.final_text {
                    t.text = text.clone();
                }
            }
        }
    }
}

fn resolve(decisions: &[&Decision]) -> Derived {
    let pending = Derived { status: ReviewStatus::Pending, final_text: None, reject_reason: None };
    if let Some(reason) = decisions.iter().find_map(|d| match d {
        Decision::Reject { reason } => Some(reason.unwrap_or(RejectReason::Other)),
        _ => None,
    }) {
        return Derived { status: ReviewStatus::Rejected, reject_reason: Some(reason), final_text: None };
    }
    match decisions {
        [Decision::Accept, Decision::Accept] => Derived { status: ReviewStatus::Accepted, ..pending },
        [Decision::Edit { new_text: a }, Decision::Edit { new_text: b }] if a == b => {
            Derived { status: ReviewStatus::Accepted, final_text: Some(a.clone()), reject_reason: None }
        }
        [_, _] => Derived { status: ReviewStatus::Conflict, ..pending },
        _ => pending,
    }
}

/// Append-only JSON-lines verdict file.
#[derive(Debug, Clone)]
pub struct VerdictLog {
    path: PathBuf,
}

impl VerdictLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        VerdictLog { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read(&self) -> Result<Vec<Verdict>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let raw = fs::read_to_string(&self.path).map_err(|e| Error::io(&self.path, e))?;
        from_jsonl(&self.path, &raw)
    }

    pub fn append(&self, verdict: &Verdict) -> Result<()> {
        if let Some(parent) = self.path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let mut line = serde_json::to_string(verdict)?;
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        f.sync_data().map_err(|e| Error::io(&self.path, e))
    }
}

/// Review items for a pipeline run: flagged templates plus assigned samples.
pub fn items_for(templates: &[QuestionTemplate], samples: &[AdversarialSample]) -> Vec<ItemDef> {
    templates
        .iter()
        .filter(|t| t.transferable == Transferability::Flagged)
        .map(ItemDef::from_template)
        .chain(samples.iter().map(ItemDef::from_sample))
        .collect()
}
