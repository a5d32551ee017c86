//! Balanced image assignment: each sample gets the least-used image that
//! contains its answer object.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::read_json;
use crate::kg::{KgIndex, NodeId};
use crate::template::Role;
use crate::text::normalize_label;
use crate::variant::{AdversarialSample, VariantKind};

pub const DROP_NO_IMAGE: &str = "no-image";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImageCatalog {
    images: BTreeMap<String, BTreeSet<String>>,
}

impl ImageCatalog {
    pub fn new<I, L, S>(images: I) -> Self
    where
        I: IntoIterator<Item = (String, L)>,
        L: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let images =
            images.into_iter().map(|(id, labels)| (id, labels.into_iter().map(|l| normalize_label(l.as_ref())).collect())).collect();
        ImageCatalog { images }
    }

    /// JSON object mapping image id to an array of object labels.
    pub fn load(path: &Path) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = read_json(path)?;
        Ok(ImageCatalog::new(raw))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &String> {
        self.images.keys()
    }

    pub fn contains(&self, image_id: &str, object_label: &str) -> bool {
        self.images.get(image_id).is_some_and(|labels| labels.contains(&normalize_label(object_label)))
    }

    pub fn eligible_images(&self, object_label: &str, exclude: &BTreeSet<String>) -> BTreeSet<String> {
        let label = normalize_label(object_label);
        self.images.iter().filter(|(id, labels)| labels.contains(&label) && !exclude.contains(*id)).map(|(id, _)| id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub sample_id: String,
    pub image_id: String,
    pub count_before: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentLedger {
    pub counts: BTreeMap<String, u64>,
    pub log: Vec<AssignmentRecord>,
}

impl AssignmentLedger {
    pub fn for_catalog(catalog: &ImageCatalog) -> Self {
        AssignmentLedger { counts: catalog.image_ids().map(|id| (id.clone(), 0)).collect(), log: Vec::new() }
    }

    pub fn count(&self, image_id: &str) -> u64 {
        self.counts.get(image_id).copied().unwrap_or(0)
    }
}

/// Images excluded for a sample: FixQ must not reuse the originating image.
pub fn exclusions(sample: &AdversarialSample) -> BTreeSet<String> {
    match sample.kind {
        VariantKind::FixQ => BTreeSet::from([sample.originating_image_id.clone()]),
        VariantKind::FixA => BTreeSet::new(),
    }
}

/// Pick the eligible image with the fewest assignments (ties: smallest id),
/// record it, and write it into the sample. `None` when nothing is eligible.
pub fn assign_image(sample: &mut AdversarialSample, catalog: &ImageCatalog, ledger: &mut AssignmentLedger) -> Option<String> {
    let eligible = catalog.eligible_images(sample.primary_answer().as_str(), &exclusions(sample));
    // BTreeSet iterates ascending, min_by_key keeps the first minimum
    let chosen = eligible.into_iter().min_by_key(|id| ledger.count(id))?;
    let before = ledger.count(&chosen);
    ledger.counts.insert(chosen.clone(), before + 1);
    ledger.log.push(AssignmentRecord { sample_id: sample.id.clone(), image_id: chosen.clone(), count_before: before });
    sample.image_id = Some(chosen.clone());
    Some(chosen)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedSample {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentReport {
    pub assigned: usize,
    pub drop_counts: BTreeMap<String, usize>,
    pub dropped: Vec<DroppedSample>,
    pub ledger: AssignmentLedger,
}

/// Other answers to a FixQ question visible in its assigned image: every
/// node that completes the fixed (slot, relation) pair and is annotated in
/// the image. The primary answer stays first.
pub fn expand_answers(sample: &mut AdversarialSample, index: &KgIndex, catalog: &ImageCatalog) {
    if sample.kind != VariantKind::FixQ {
        return;
    }
    let Some(image) = sample.image_id.clone() else { return };
    let primary = sample.primary_answer().clone();
    // the varying role is whichever node of the triplet is the answer
    let answer_role = if sample.triplet.head == primary { Role::Head } else { Role::Tail };
    let slot = answer_role.other().of(&sample.triplet).clone();
    let siblings = match answer_role {
        Role::Head => index.siblings_fixed_tail(&slot, &sample.triplet.relation, &primary),
        Role::Tail => index.siblings_fixed_head(&slot, &sample.triplet.relation, &primary),
    };
    let extra: Vec<NodeId> =
        siblings.into_iter().map(|t| answer_role.of(&t.key()).clone()).filter(|n| catalog.contains(&image, n.as_str())).collect();
    sample.answer_nodes.extend(extra);
}

/// Assign images to all samples in canonical sample-id order.
pub fn assign_all(
    samples: Vec<AdversarialSample>,
    catalog: &ImageCatalog,
    index: Option<&KgIndex>,
) -> (Vec<AdversarialSample>, AssignmentReport) {
    let mut samples = samples;
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let mut report = AssignmentReport { ledger: AssignmentLedger::for_catalog(catalog), ..Default::default() };
    let mut kept = Vec::with_capacity(samples.len());
    for mut sample in samples {
        if assign_image(&mut sample, catalog, &mut report.ledger).is_some() {
            if let Some(index) = index {
                expand_answers(&mut sample, index, catalog);
            }
            report.assigned += 1;
            kept.push(sample);
        } else {
            *report.drop_counts.entry(DROP_NO_IMAGE.to_string()).or_default() += 1;
            report.dropped.push(DroppedSample { sample_id: sample.id, reason: DROP_NO_IMAGE.to_string() });
        }
    }
    (kept, report)
}
