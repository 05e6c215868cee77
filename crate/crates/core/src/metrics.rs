//! Recall-oriented ROUGE-N / ROUGE-L / ROUGE-S and word error rate.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerOptions {
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for TokenizerOptions {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '«' | '»' | '“' | '”' | '„' | '‘' | '’' | '‚' | '—' | '–' | '…' | '¿' | '¡' | '·' | '‹' | '›'
        )
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.iter().any(|t| t.is_empty()) {
            return Err(Error::argument("empty token"));
        }
        Ok(Self { tokens })
    }

    /// Lowercase, split on unicode whitespace and strip surrounding
    /// punctuation. Tokens that are pure punctuation disappear.
    pub fn tokenize(text: &str) -> Self {
        Self::tokenize_with(text, &TokenizerOptions::default())
    }

    pub fn tokenize_with(text: &str, opts: &TokenizerOptions) -> Self {
        let tokens = text
            .split_whitespace()
            .map(|w| {
                if opts.strip_punctuation {
                    w.trim_matches(is_punctuation)
                } else {
                    w
                }
            })
            .filter(|w| !w.is_empty())
            .map(|w| {
                if opts.lowercase {
                    w.to_lowercase()
                } else {
                    w.to_string()
                }
            })
            .collect();
        Self { tokens }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl From<&str> for TokenSequence {
    fn from(text: &str) -> Self {
        Self::tokenize(text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    N(usize),
    L,
    S,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub value: f64,
    pub variant: RougeVariant,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

fn clipped_recall<K: std::hash::Hash + Eq>(
    cand: &HashMap<K, usize>,
    reference: &HashMap<K, usize>,
    total: usize,
) -> f64 {
    let hits: usize = reference
        .iter()
        .map(|(g, &c)| c.min(cand.get(g).copied().unwrap_or(0)))
        .sum();
    hits as f64 / total as f64
}

/// Clipped n-gram recall, averaged over the references that have at least
/// `n` tokens.
pub fn rouge_n(candidate: &TokenSequence, references: &[TokenSequence], n: usize) -> Result<RougeScore> {
    if n == 0 {
        return Err(Error::argument("rouge_n needs n >= 1"));
    }
    let cand = ngram_counts(&candidate.tokens, n);
    let scores: Vec<f64> = references
        .iter()
        .filter(|r| r.len() >= n)
        .map(|r| clipped_recall(&cand, &ngram_counts(&r.tokens, n), r.len() + 1 - n))
        .collect();
    if scores.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "rouge-{n}: no reference has {n} or more tokens"
        )));
    }
    Ok(RougeScore {
        value: scores.iter().sum::<f64>() / scores.len() as f64,
        variant: RougeVariant::N(n),
    })
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `LCS(candidate, reference) / |reference|`.
pub fn rouge_l(candidate: &TokenSequence, reference: &TokenSequence) -> Result<RougeScore> {
    if reference.is_empty() {
        return Err(Error::UndefinedMetric("rouge-l: empty reference".into()));
    }
    Ok(RougeScore {
        value: lcs_len(&candidate.tokens, &reference.tokens) as f64 / reference.len() as f64,
        variant: RougeVariant::L,
    })
}

fn skip_bigrams(tokens: &[String]) -> HashMap<(&str, &str), usize> {
    let mut counts = HashMap::new();
    for i in 0..tokens.len() {
        for j in i + 1..tokens.len() {
            *counts.entry((tokens[i].as_str(), tokens[j].as_str())).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped skip-bigram recall with unlimited gap.
pub fn rouge_s(candidate: &TokenSequence, reference: &TokenSequence) -> Result<RougeScore> {
    let m = reference.len();
    if m < 2 {
        return Err(Error::UndefinedMetric(
            "rouge-s: reference shorter than 2 tokens".into(),
        ));
    }
    Ok(RougeScore {
        value: clipped_recall(
            &skip_bigrams(&candidate.tokens),
            &skip_bigrams(&reference.tokens),
            m * (m - 1) / 2,
        ),
        variant: RougeVariant::S,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub hits: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
    pub wer: f64,
}

impl WerBreakdown {
    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Unit-cost alignment of `hypothesis` against `reference`. On ties the
/// backtrace prefers match, then substitution, deletion, insertion.
pub fn wer(reference: &TokenSequence, hypothesis: &TokenSequence) -> Result<WerBreakdown> {
    let (r, h) = (&reference.tokens, &hypothesis.tokens);
    if r.is_empty() {
        return Err(Error::UndefinedMetric("wer: empty reference".into()));
    }
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, v) in d.iter_mut().take(w).enumerate() {
        *v = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let (mut hits, mut subs, mut dels, mut ins) = (0, 0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && r[i - 1] == h[j - 1] && d[(i - 1) * w + j - 1] == here {
            hits += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[(i - 1) * w + j - 1] + 1 == here {
            subs += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && d[(i - 1) * w + j] + 1 == here {
            dels += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(WerBreakdown {
        hits,
        substitutions: subs,
        deletions: dels,
        insertions: ins,
        reference_length: n,
        wer: (subs + dels + ins) as f64 / n as f64,
    })
}

/// One line of a JSON-lines corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rouge1,
    Rouge2,
    #[serde(rename = "rougeL")]
    RougeL,
    #[serde(rename = "rougeS")]
    RougeS,
    Wer,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Rouge1 => "rouge1",
            Metric::Rouge2 => "rouge2",
            Metric::RougeL => "rougeL",
            Metric::RougeS => "rougeS",
            Metric::Wer => "wer",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rouge1" => Ok(Metric::Rouge1),
            "rouge2" => Ok(Metric::Rouge2),
            "rougeL" | "rougel" => Ok(Metric::RougeL),
            "rougeS" | "rouges" => Ok(Metric::RougeS),
            "wer" => Ok(Metric::Wer),
            other => Err(Error::argument(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocScore {
    pub id: String,
    pub score: f64,
    pub references: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<WerBreakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub metric: Metric,
    pub documents: usize,
    /// Mean of the per-document scores.
    pub mean: f64,
    /// WER only: total edits over total reference words.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooled_wer: Option<f64>,
    pub scores: Vec<DocScore>,
}

/// Mean of `f` over the references for which it is defined.
fn mean_defined(refs: &[TokenSequence], f: impl Fn(&TokenSequence) -> Result<RougeScore>) -> Result<f64> {
    let mut first_err = None;
    let mut vals = Vec::new();
    for r in refs {
        match f(r) {
            Ok(s) => vals.push(s.value),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) if vals.is_empty() => Err(e),
        _ => Ok(vals.iter().sum::<f64>() / vals.len() as f64),
    }
}

fn score_document(id: &str, cand: &TokenSequence, refs: &[TokenSequence], metric: Metric) -> Result<DocScore> {
    let tag = |e: Error| match e {
        Error::UndefinedMetric(msg) => Error::UndefinedMetric(format!("for id {id}: {msg}")),
        other => other,
    };
    let mut breakdown = None;
    let score = match metric {
        Metric::Rouge1 => rouge_n(cand, refs, 1).map_err(tag)?.value,
        Metric::Rouge2 => rouge_n(cand, refs, 2).map_err(tag)?.value,
        Metric::RougeL => mean_defined(refs, |r| rouge_l(cand, r)).map_err(tag)?,
        Metric::RougeS => mean_defined(refs, |r| rouge_s(cand, r)).map_err(tag)?,
        Metric::Wer => {
            if refs.len() != 1 {
                return Err(Error::Content(format!(
                    "id {id} has {} references; wer needs exactly one",
                    refs.len()
                )));
            }
            let b = wer(&refs[0], cand).map_err(tag)?;
            breakdown = Some(b);
            b.wer
        }
    };
    Ok(DocScore {
        id: id.to_string(),
        score,
        references: refs.len(),
        breakdown,
    })
}

/// Join candidates and references on `id` and score each candidate. A
/// reference id may repeat (multiple references); candidate ids may not.
/// Scores are reported in candidate order.
pub fn score_corpus(
    candidates: &[Document],
    references: &[Document],
    metric: Metric,
    opts: &TokenizerOptions,
    exec: Exec,
) -> Result<CorpusReport> {
    let mut refs: HashMap<&str, Vec<TokenSequence>> = HashMap::new();
    for d in references {
        refs.entry(d.id.as_str())
            .or_default()
            .push(TokenSequence::tokenize_with(&d.text, opts));
    }
    let mut seen = HashSet::new();
    for d in candidates {
        if !seen.insert(d.id.as_str()) {
            return Err(Error::Content(format!("duplicate candidate id {}", d.id)));
        }
    }
    let unmatched: Vec<String> = seen
        .iter()
        .filter(|id| !refs.contains_key(*id))
        .chain(refs.keys().filter(|id| !seen.contains(*id)))
        .map(|s| s.to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedIds(unmatched));
    }
    let scores = exec.map(candidates, |d| {
        let cand = TokenSequence::tokenize_with(&d.text, opts);
        score_document(&d.id, &cand, &refs[d.id.as_str()], metric)
    });
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    let n = scores.len();
    let mean = if n == 0 {
        0.0
    } else {
        scores.iter().map(|s| s.score).sum::<f64>() / n as f64
    };
    let pooled_wer = (metric == Metric::Wer && n > 0).then(|| {
        let (edits, words) = scores
            .iter()
            .filter_map(|s| s.breakdown)
            .fold((0, 0), |(e, w), b| (e + b.edits(), w + b.reference_length));
        edits as f64 / words as f64
    });
    Ok(CorpusReport {
        metric,
        documents: n,
        mean,
        pooled_wer,
        scores,
    })
}

impl CorpusReport {
    pub fn to_text(&self) -> String {
        let width = self.scores.iter().map(|s| s.id.len()).max().unwrap_or(2).max(2);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>8}", "id", self.metric.name());
        for d in &self.scores {
            let _ = writeln!(s, "{:<width$}  {:>8.4}", d.id, d.score);
        }
        let _ = writeln!(s, "{:<width$}  {:>8.4}", "mean", self.mean);
        if let Some(p) = self.pooled_wer {
            let _ = writeln!(s, "{:<width$}  {:>8.4}", "pooled", p);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> TokenSequence {
        TokenSequence::tokenize(s)
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(ts("The cat, \"sat\"!  «Кот»").tokens(), ["the", "cat", "sat", "кот"]);
        assert!(ts(" -- ... ").is_empty());
        let raw = TokenSequence::tokenize_with(
            "A, b",
            &TokenizerOptions {
                lowercase: false,
                strip_punctuation: false,
            },
        );
        assert_eq!(raw.tokens(), ["A,", "b"]);
        assert!(TokenSequence::new(vec![String::new()]).is_err());
    }

    #[test]
    fn rouge_n_examples() {
        let s = ts("the cat sat on the mat");
        for n in 1..=6 {
            assert_eq!(rouge_n(&s, std::slice::from_ref(&s), n).unwrap().value, 1.0);
        }
        assert_eq!(
            rouge_n(&ts("the cat sat"), &[ts("the cat ran")], 1).unwrap().value,
            2.0 / 3.0
        );
        assert_eq!(rouge_n(&ts("a a"), &[ts("a a a")], 1).unwrap().value, 2.0 / 3.0);
        assert!(matches!(rouge_n(&s, &[ts("a")], 2), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn rouge_n_multi_reference_is_mean() {
        let c = ts("the cat sat");
        let refs = [ts("the cat ran"), ts("a dog sat"), ts("the cat sat")];
        let each: Vec<f64> = refs
            .iter()
            .map(|r| rouge_n(&c, std::slice::from_ref(r), 1).unwrap().value)
            .collect();
        let mean = each.iter().sum::<f64>() / 3.0;
        assert!((rouge_n(&c, &refs, 1).unwrap().value - mean).abs() < 1e-15);
        // too-short references are skipped
        let v = rouge_n(&c, &[ts("cat"), ts("the cat")], 2).unwrap().value;
        assert_eq!(v, 1.0);
    }

    #[test]
    fn rouge_l_examples() {
        assert_eq!(rouge_l(&ts("a b c"), &ts("a b c")).unwrap().value, 1.0);
        assert_eq!(rouge_l(&ts("a c b"), &ts("a b c")).unwrap().value, 2.0 / 3.0);
        assert_eq!(rouge_l(&ts("x y"), &ts("a b c")).unwrap().value, 0.0);
        assert!(rouge_l(&ts("a"), &ts("")).is_err());
        // inserting unseen tokens leaves the score unchanged
        assert_eq!(rouge_l(&ts("a zz c q b"), &ts("a b c")).unwrap().value, 2.0 / 3.0);
    }

    #[test]
    fn rouge_s_examples() {
        assert_eq!(rouge_s(&ts("a b c d"), &ts("a b c d")).unwrap().value, 1.0);
        assert_eq!(rouge_s(&ts("a c"), &ts("a b c")).unwrap().value, 1.0 / 3.0);
        assert_eq!(rouge_s(&ts("b a"), &ts("a b")).unwrap().value, 0.0);
        assert!(rouge_s(&ts("a"), &ts("a")).is_err());
    }

    #[test]
    fn wer_examples() {
        let same = wer(&ts("a b c"), &ts("a b c")).unwrap();
        assert_eq!((same.edits(), same.wer), (0, 0.0));
        let s = wer(&ts("a b c"), &ts("a x c")).unwrap();
        assert_eq!((s.substitutions, s.deletions, s.insertions), (1, 0, 0));
        assert_eq!(s.wer, 1.0 / 3.0);
        let i = wer(&ts("a"), &ts("a b c")).unwrap();
        assert_eq!((i.insertions, i.wer), (2, 2.0));
        let d = wer(&ts("a b c"), &ts("")).unwrap();
        assert_eq!((d.deletions, d.wer), (3, 1.0));
        assert!(wer(&ts(""), &ts("a")).is_err());
    }

    #[test]
    fn wer_tie_prefers_substitution() {
        // "a b" vs "b c": distance 2 either as two substitutions or
        // delete a, match b, insert c
        let b = wer(&ts("a b"), &ts("b c")).unwrap();
        assert_eq!(b.edits(), 2);
        assert_eq!((b.substitutions, b.deletions, b.insertions), (2, 0, 0));
    }

    fn docs(rows: &[(&str, &str)]) -> Vec<Document> {
        rows.iter()
            .map(|(id, text)| Document {
                id: id.to_string(),
                text: text.to_string(),
            })
            .collect()
    }

    #[test]
    fn corpus_scoring() {
        let c = docs(&[("1", "the cat sat"), ("2", "a x c"), ("3", "a")]);
        let r = docs(&[("3", "a b c"), ("1", "the cat ran"), ("2", "a b c")]);
        let rep = score_corpus(&c, &r, Metric::Wer, &TokenizerOptions::default(), Exec::default()).unwrap();
        let ids: Vec<&str> = rep.scores.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["1", "2", "3"]);
        assert_eq!(rep.pooled_wer, Some((1.0 + 1.0 + 2.0) / 9.0));
        let seq = score_corpus(&c, &r, Metric::Rouge1, &TokenizerOptions::default(), Exec::Sequential).unwrap();
        let par = score_corpus(&c, &r, Metric::Rouge1, &TokenizerOptions::default(), Exec::Parallel).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.scores[0].score, 2.0 / 3.0);
        assert!(rep.to_text().contains("pooled"));
    }

    #[test]
    fn corpus_errors() {
        let opts = TokenizerOptions::default();
        let c = docs(&[("1", "a"), ("2", "b")]);
        let r = docs(&[("1", "a"), ("3", "b")]);
        match score_corpus(&c, &r, Metric::Rouge1, &opts, Exec::default()) {
            Err(Error::UnmatchedIds(ids)) => assert_eq!(ids, ["2", "3"]),
            other => panic!("{other:?}"),
        }
        let empty = docs(&[("1", "  ")]);
        let err = score_corpus(&docs(&[("1", "a")]), &empty, Metric::RougeL, &opts, Exec::default()).unwrap_err();
        assert!(err.to_string().contains("id 1"));
        let dup = docs(&[("1", "a"), ("1", "b")]);
        assert!(matches!(
            score_corpus(&dup, &docs(&[("1", "a")]), Metric::Rouge1, &opts, Exec::default()),
            Err(Error::Content(_))
        ));
    }

    #[test]
    fn metric_names_roundtrip() {
        for m in [
            Metric::Rouge1,
            Metric::Rouge2,
            Metric::RougeL,
            Metric::RougeS,
            Metric::Wer,
        ] {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
    }
}
