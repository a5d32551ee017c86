//! Triplet knowledge graph: TSV loading, sibling queries, surface rendering
//! and nearest-node resolution of free-text answers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{lemma, levenshtein_chars, normalize_label};

/// Node identifier. Nodes are keyed by their normalized label so that
/// identifiers survive KG reloads and version changes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn from_label(raw: &str) -> Self {
        NodeId(normalize_label(raw))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgNode {
    pub id: NodeId,
    pub label: String,
    pub lemma: String,
}

impl KgNode {
    fn new(raw: &str) -> Self {
        let label = normalize_label(raw);
        KgNode { id: NodeId(label.clone()), lemma: lemma(&label), label }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Relation(String);

impl Relation {
    pub fn new(name: &str) -> Result<Self> {
        let name = name.trim();
        match name.strip_prefix("/r/") {
            Some(rest) if !rest.is_empty() && rest.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => Ok(Relation(name.to_string())),
            _ => Err(Error::InvalidRelation(name.to_string())),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// `UsedFor` for `/r/UsedFor`.
    pub fn short_name(&self) -> &str {
        &self.0[3..]
    }

    /// Human-readable verb phrase used when a triplet has no stored surface text.
    pub fn gloss(&self) -> String {
        match GLOSSES.iter().find(|(name, _)| *name == self.short_name()) {
            Some((_, gloss)) => gloss.to_string(),
            None => split_camel(self.short_name()),
        }
    }
}

const GLOSSES: [(&str, &str); 9] = [
    ("RelatedTo", "is related to"),
    ("IsA", "is a"),
    ("PartOf", "is part of"),
    ("HasA", "has"),
    ("UsedFor", "used for"),
    ("CapableOf", "is capable of"),
    ("AtLocation", "is found at"),
    ("Desires", "desires"),
    ("MadeOf", "is made of"),
];

fn split_camel(name: &str) -> String {
    let mut out = String::new();
    for (i, c) in name.chars().enumerate() {
        if c == '_' {
            out.push(' ');
            continue;
        }
        if c.is_uppercase() && i > 0 && !out.ends_with(' ') {
            out.push(' ');
        }
        out.extend(c.to_lowercase());
    }
    out
}

impl TryFrom<String> for Relation {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Relation::new(&value)
    }
}

impl From<Relation> for String {
    fn from(r: Relation) -> String {
        r.0
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The nine relations covered by the adversarial set.
pub const DEFAULT_RELATIONS: [&str; 9] =
    ["/r/RelatedTo", "/r/IsA", "/r/PartOf", "/r/HasA", "/r/UsedFor", "/r/CapableOf", "/r/AtLocation", "/r/Desires", "/r/MadeOf"];

pub fn default_whitelist() -> BTreeSet<Relation> {
    DEFAULT_RELATIONS.iter().map(|r| Relation::new(r).expect("static relation names are valid")).collect()
}

/// `(head, relation, tail)` identity of a triplet.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TripletKey {
    pub head: NodeId,
    pub relation: Relation,
    pub tail: NodeId,
}

impl TripletKey {
    pub fn new(head: &str, relation: &str, tail: &str) -> Result<Self> {
        Ok(TripletKey { head: NodeId::from_label(head), relation: Relation::new(relation)?, tail: NodeId::from_label(tail) })
    }

    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{}", self.head, self.relation, self.tail)
    }
}

impl fmt::Display for TripletKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgTriplet {
    pub head: NodeId,
    pub relation: Relation,
    pub tail: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface_text: Option<String>,
    #[serde(default)]
    pub blocked: bool,
}

impl KgTriplet {
    pub fn key(&self) -> TripletKey {
        TripletKey { head: self.head.clone(), relation: self.relation.clone(), tail: self.tail.clone() }
    }

    /// Stored surface text, or `[head] gloss [tail]`.
    pub fn render_surface(&self) -> String {
        match &self.surface_text {
            Some(text) => text.clone(),
            None => format!("[{}] {} [{}]", self.head, self.relation.gloss(), self.tail),
        }
    }
}

/// Outcome counters of a load, persisted in stage manifests.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows: usize,
    pub indexed: usize,
    pub duplicates: usize,
    pub not_whitelisted: usize,
    pub blocked: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct KgIndex {
    nodes: BTreeMap<NodeId, KgNode>,
    triplets: Vec<KgTriplet>,
    positions: BTreeMap<TripletKey, usize>,
    by_head: BTreeMap<(NodeId, Relation), Vec<usize>>,
    by_tail: BTreeMap<(NodeId, Relation), Vec<usize>>,
    names: Vec<(NodeId, Vec<char>)>,
}

#[derive(Serialize)]
struct SerializedIndex<'a> {
    nodes: Vec<&'a KgNode>,
    triplets: Vec<&'a KgTriplet>,
}

impl KgIndex {
    /// Build an index from already-parsed triplets. Triplets outside
    /// `whitelist` or inside `blocklist` are dropped, duplicates collapse to
    /// the first occurrence.
    pub fn build(
        rows: impl IntoIterator<Item = KgTriplet>,
        whitelist: &BTreeSet<Relation>,
        blocklist: &BTreeSet<TripletKey>,
    ) -> (Self, LoadReport) {
        let mut report = LoadReport::default();
        let mut kept: BTreeMap<TripletKey, KgTriplet> = BTreeMap::new();
        for triplet in rows {
            report.rows += 1;
            if !whitelist.contains(&triplet.relation) {
                report.not_whitelisted += 1;
                continue;
            }
            let key = triplet.key();
            if blocklist.contains(&key) {
                report.blocked += 1;
                continue;
            }
            if kept.contains_key(&key) {
                report.duplicates += 1;
                continue;
            }
            kept.insert(key, triplet);
        }

        let mut index = KgIndex::default();
        for (key, triplet) in kept {
            for id in [&key.head, &key.tail] {
                index.nodes.entry(id.clone()).or_insert_with(|| KgNode::new(id.as_str()));
            }
            index.positions.insert(key, index.triplets.len());
            index.triplets.push(triplet);
        }
        index.rebuild_maps();
        report.indexed = index.len();
        if index.is_empty() {
            let msg = "knowledge graph is empty after whitelist and blocklist filtering".to_string();
            tracing::warn!("{msg}");
            report.warnings.push(msg);
        }
        (index, report)
    }

    fn rebuild_maps(&mut self) {
        self.by_head.clear();
        self.by_tail.clear();
        for (pos, t) in self.triplets.iter().enumerate() {
            if t.blocked {
                continue;
            }
            self.by_head.entry((t.head.clone(), t.relation.clone())).or_default().push(pos);
            self.by_tail.entry((t.tail.clone(), t.relation.clone())).or_default().push(pos);
        }
        // triplets are stored in key order, so head lists are already
        // tail-sorted; tail lists need an explicit sort by head label
        for list in self.by_tail.values_mut() {
            let triplets = &self.triplets;
            list.sort_by(|a, b| triplets[*a].head.cmp(&triplets[*b].head));
        }
        self.names = self.nodes.values().map(|n| (n.id.clone(), n.label.chars().collect())).collect();
    }

    /// Number of non-blocked triplets.
    pub fn len(&self) -> usize {
        self.triplets.iter().filter(|t| !t.blocked).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, id: &NodeId) -> Option<&KgNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &KgNode> {
        self.nodes.values()
    }

    pub fn triplets(&self) -> impl Iterator<Item = &KgTriplet> {
        self.triplets.iter().filter(|t| !t.blocked)
    }

    pub fn get(&self, key: &TripletKey) -> Option<&KgTriplet> {
        self.positions.get(key).map(|&p| &self.triplets[p]).filter(|t| !t.blocked)
    }

    /// Mark a triplet blocked and drop it from the sibling maps.
    pub fn block(&mut self, key: &TripletKey) -> bool {
        match self.positions.get(key) {
            Some(&pos) if !self.triplets[pos].blocked => {
                self.triplets[pos].blocked = true;
                for map in [&mut self.by_head, &mut self.by_tail] {
                    for list in map.values_mut() {
                        list.retain(|&p| p != pos);
                    }
                }
                true
            }
            _ => false,
        }
    }

    /// Triplets sharing `head` and `relation`, minus the one ending in
    /// `exclude_tail`; ordered by tail label.
    pub fn siblings_fixed_head(&self, head: &NodeId, relation: &Relation, exclude_tail: &NodeId) -> Vec<&KgTriplet> {
        self.by_head
            .get(&(head.clone(), relation.clone()))
            .into_iter()
            .flatten()
            .map(|&p| &self.triplets[p])
            .filter(|t| &t.tail != exclude_tail)
            .collect()
    }

    /// Triplets sharing `tail` and `relation`, minus the one starting at
    /// `exclude_head`; ordered by head label.
    pub fn siblings_fixed_tail(&self, tail: &NodeId, relation: &Relation, exclude_head: &NodeId) -> Vec<&KgTriplet> {
        self.by_tail
            .get(&(tail.clone(), relation.clone()))
            .into_iter()
            .flatten()
            .map(|&p| &self.triplets[p])
            .filter(|t| &t.head != exclude_head)
            .collect()
    }

    /// Node whose label is closest to `answer` in Levenshtein distance, ties
    /// going to the lexicographically smallest label.
    pub fn nearest_node(&self, answer: &str) -> Result<&KgNode> {
        let query: Vec<char> = normalize_label(answer).chars().collect();
        let mut best: Option<(usize, &NodeId)> = None;
        for (id, name) in &self.names {
            if let Some((best_d, _)) = best {
                // names are visited in ascending label order, so an equal
                // distance never displaces the incumbent
                if name.len().abs_diff(query.len()) >= best_d {
                    continue;
                }
            }
            let d = levenshtein_chars(&query, name);
            if best.is_none_or(|(best_d, _)| d < best_d) {
                best = Some((d, id));
                if d == 0 {
                    break;
                }
            }
        }
        best.map(|(_, id)| &self.nodes[id]).ok_or(Error::EmptyIndex)
    }

    /// Canonical JSON of nodes and non-blocked triplets.
    pub fn to_canonical_json(&self) -> String {
        let doc = SerializedIndex { nodes: self.nodes.values().collect(), triplets: self.triplets().collect() };
        serde_json::to_string(&doc).expect("index serialization cannot fail")
    }
}

fn strip_comment(line: &str) -> Option<&str> {
    let line = line.trim_end_matches(['\r', '\n']);
    if line.trim().is_empty() || line.trim_start().starts_with('#') {
        None
    } else {
        Some(line)
    }
}

fn parse_key_fields(path: &Path, line_no: usize, fields: &[&str]) -> Result<TripletKey> {
    let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: line_no, message };
    if fields.len() < 3 {
        return Err(parse_err(format!("expected at least 3 tab-separated fields, got {}", fields.len())));
    }
    if fields[0].trim().is_empty() || fields[2].trim().is_empty() {
        return Err(parse_err("empty head or tail label".into()));
    }
    TripletKey::new(fields[0], fields[1], fields[2]).map_err(|e| parse_err(e.to_string()))
}

/// Parse a triplet TSV: `head \t relation \t tail [\t surface_text]`.
pub fn parse_triplets(path: &Path) -> Result<Vec<KgTriplet>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let Some(line) = strip_comment(line) else { continue };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() > 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected at most 4 fields, got {}", fields.len()),
            });
        }
        let key = parse_key_fields(path, i + 1, &fields)?;
        let surface_text = fields.get(3).map(|s| s.trim()).filter(|s| !s.is_empty()).map(str::to_string);
        out.push(KgTriplet { head: key.head, relation: key.relation, tail: key.tail, surface_text, blocked: false });
    }
    Ok(out)
}

/// Parse a blocklist: same key columns as the triplet TSV, no surface text.
pub fn parse_blocklist(path: &Path) -> Result<BTreeSet<TripletKey>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeSet::new();
    for (i, line) in raw.lines().enumerate() {
        let Some(line) = strip_comment(line) else { continue };
        let fields: Vec<&str> = line.split('\t').collect();
        out.insert(parse_key_fields(path, i + 1, &fields)?);
    }
    Ok(out)
}

pub fn write_blocklist(keys: &BTreeSet<TripletKey>) -> String {
    let mut out = String::from("# head\trelation\ttail\n");
    for key in keys {
        out.push_str(&key.to_tsv());
        out.push('\n');
    }
    out
}

pub fn load_kg(triplet_file: &Path, whitelist: &BTreeSet<Relation>, blocklist: Option<&Path>) -> Result<(KgIndex, LoadReport)> {
    let rows = parse_triplets(triplet_file)?;
    let blocked = match blocklist {
        Some(p) => parse_blocklist(p)?,
        None => BTreeSet::new(),
    };
    Ok(KgIndex::build(rows, whitelist, &blocked))
}
