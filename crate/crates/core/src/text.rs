//! Label normalization and edit distance shared by every module that matches
//! KG node names against free text.

/// Lowercase, trim and collapse internal whitespace runs to a single space.
pub fn normalize_label(raw: &str) -> String {
    raw.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Crude suffix-stripping stem of a single lowercase token.
///
/// Only used for the stem-equality fallback in span matching, so it needs to
/// conflate `store`/`storing`/`stores` and `hit`/`hitting`, nothing more.
pub fn stem_token(token: &str) -> String {
    let t = token.to_lowercase();
    let strip = |word: &str, suffix: &str| -> Option<String> {
        let base = word.strip_suffix(suffix)?;
        (base.chars().count() >= 3).then(|| base.to_string())
    };
    let mut base = if let Some(b) = strip(&t, "ing") {
        b
    } else if let Some(b) = strip(&t, "ies") {
        format!("{b}y")
    } else if let Some(b) = strip(&t, "es").filter(|b| ends_with_sibilant(b)) {
        b
    } else if let Some(b) = strip(&t, "ed") {
        b
    } else if let Some(b) = strip(&t, "s").filter(|b| !b.ends_with('s')) {
        b
    } else {
        t.clone()
    };
    // hitt -> hit
    let bytes = base.as_bytes();
    let last = bytes.last().copied().unwrap_or(b'a');
    if bytes.len() >= 4 && last == bytes[bytes.len() - 2] && !is_vowel(last) && !matches!(last, b'l' | b's' | b'z' | b'f') {
        base.pop();
    }
    if base.ends_with('e') && base.chars().count() > 3 {
        base.pop();
    }
    base
}

/// Stem of a whole label, token by token.
pub fn lemma(label: &str) -> String {
    normalize_label(label).split(' ').map(stem_token).collect::<Vec<_>>().join(" ")
}

pub(crate) fn is_vowel(b: u8) -> bool {
    matches!(b, b'a' | b'e' | b'i' | b'o' | b'u')
}

pub(crate) fn ends_with_sibilant(word: &str) -> bool {
    ["s", "x", "z", "ch", "sh"].iter().any(|s| word.ends_with(s))
}

/// Plain Levenshtein distance (unit insert, delete, substitute) over chars.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein_chars(&a, &b)
}

pub(crate) fn levenshtein_chars(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            cur[j + 1] = (cur[j] + 1).min(prev[j + 1] + 1).min(prev[j] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Distance if it is at most `k`, computed over the diagonal band only.
pub(crate) fn levenshtein_within(a: &[char], b: &[char], k: usize) -> Option<usize> {
    let (n, m) = (a.len(), b.len());
    if n.abs_diff(m) > k {
        return None;
    }
    const INF: usize = usize::MAX / 2;
    let mut prev: Vec<usize> = (0..=m).map(|j| if j <= k { j } else { INF }).collect();
    let mut cur = vec![INF; m + 1];
    for i in 1..=n {
        let lo = i.saturating_sub(k).max(1);
        let hi = (i + k).min(m);
        cur[lo - 1] = if lo == 1 { i } else { INF };
        let mut row_min = cur[lo - 1];
        for j in lo..=hi {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            let v = (cur[j - 1] + 1).min(prev[j] + 1).min(prev[j - 1] + cost);
            cur[j] = v;
            row_min = row_min.min(v);
        }
        if hi < m {
            cur[hi + 1] = INF;
        }
        if row_min > k {
            return None;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    (prev[m] <= k).then_some(prev[m])
}

/// `similarity(a, b) >= threshold` without computing distances that cannot
/// reach it.
pub fn similar_at_least(a: &str, b: &str, threshold: f64) -> bool {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0 >= threshold;
    }
    let passes = |d: usize| 1.0 - d as f64 / longest as f64 >= threshold;
    // largest distance that still passes; the predicate is monotone in d
    let mut k = ((1.0 - threshold).max(0.0) * longest as f64).floor() as usize;
    while k > 0 && !passes(k) {
        k -= 1;
    }
    while k < longest && passes(k + 1) {
        k += 1;
    }
    if !passes(k) {
        return false;
    }
    levenshtein_within(&a, &b, k).is_some()
}

/// `1 - d / max(|a|, |b|)`; two empty strings are identical.
pub fn similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein_chars(&a, &b) as f64 / longest as f64
}
