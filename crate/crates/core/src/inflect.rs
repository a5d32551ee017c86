//! The closed set of surface transforms between a KG label and the span that
//! realizes it inside a question.

use serde::{Deserialize, Serialize};

use crate::text::{ends_with_sibilant, is_vowel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inflection {
    Identity,
    Plural,
    Gerund,
    /// Matched by token stems only. Not productive: new labels are inserted
    /// verbatim and the result is routed to review.
    StemMatch,
}

impl Inflection {
    /// Productive transforms, in preference order for equal-length matches.
    pub const PRODUCTIVE: [Inflection; 3] = [Inflection::Identity, Inflection::Plural, Inflection::Gerund];

    /// Surface form of `label` under this transform, or `None` when the rule
    /// does not apply to the label.
    pub fn apply(self, label: &str) -> Option<String> {
        match self {
            Inflection::Identity => Some(label.to_string()),
            Inflection::Plural => map_last_token(label, pluralize),
            Inflection::Gerund => map_first_token(label, gerund),
            Inflection::StemMatch => None,
        }
    }
}

fn map_last_token(label: &str, f: impl Fn(&str) -> Option<String>) -> Option<String> {
    let (prefix, last) = match label.rsplit_once(' ') {
        Some((p, l)) => (Some(p), l),
        None => (None, label),
    };
    let inflected = f(last)?;
    Some(match prefix {
        Some(p) => format!("{p} {inflected}"),
        None => inflected,
    })
}

fn map_first_token(label: &str, f: impl Fn(&str) -> Option<String>) -> Option<String> {
    let (first, rest) = match label.split_once(' ') {
        Some((f, r)) => (f, Some(r)),
        None => (label, None),
    };
    let inflected = f(first)?;
    Some(match rest {
        Some(r) => format!("{inflected} {r}"),
        None => inflected,
    })
}

fn is_word(token: &str) -> bool {
    !token.is_empty() && token.bytes().all(|b| b.is_ascii_lowercase())
}

/// `+es` after sibilants, `+s` otherwise.
pub fn pluralize(noun: &str) -> Option<String> {
    if !is_word(noun) {
        return None;
    }
    if ends_with_sibilant(noun) {
        Some(format!("{noun}es"))
    } else {
        Some(format!("{noun}s"))
    }
}

fn vowel_groups(word: &[u8]) -> usize {
    let mut groups = 0;
    let mut in_group = false;
    for &b in word {
        let v = is_vowel(b) || b == b'y' && in_group;
        if v && !in_group {
            groups += 1;
        }
        in_group = v;
    }
    groups
}

/// Present participle of a verb token. `None` for tokens that cannot be a
/// base-form verb (non-alphabetic, too short, already a participle).
pub fn gerund(verb: &str) -> Option<String> {
    if !is_word(verb) || verb.len() < 2 || verb.ends_with("ing") {
        return None;
    }
    let b = verb.as_bytes();
    let n = b.len();
    if let Some(stem) = verb.strip_suffix("ie") {
        return Some(format!("{stem}ying"));
    }
    if verb.ends_with("ee") || verb.ends_with("ye") || verb.ends_with("oe") {
        return Some(format!("{verb}ing"));
    }
    if b[n - 1] == b'e' && n > 2 {
        return Some(format!("{}ing", &verb[..n - 1]));
    }
    // single-syllable consonant-vowel-consonant: hit -> hitting
    if n >= 3
        && !is_vowel(b[n - 1])
        && !matches!(b[n - 1], b'w' | b'x' | b'y')
        && is_vowel(b[n - 2])
        && !is_vowel(b[n - 3])
        && vowel_groups(b) == 1
    {
        return Some(format!("{verb}{}ing", b[n - 1] as char));
    }
    Some(format!("{verb}ing"))
}
