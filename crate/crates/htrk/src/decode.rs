//! CTC decoders: best-path, prefix beam search, and dictionary-constrained
//! word beam search with an optional character bigram language model.
//!
//! Beam search keeps, per candidate labeling, the summed log mass of paths
//! ending in blank and in non-blank separately. The dictionary variant
//! restricts extensions to prefixes of a word trie and requires complete
//! words at the end. All decoders are deterministic: score ties break on
//! lexicographically smaller labelings.

use crate::ctc::{collapse, Label, ProbMatrix};
use crate::data::Charset;
use crate::{Error, Result};
use std::collections::BTreeMap;

/// One beam search hypothesis.
#[derive(Debug, Clone)]
pub struct Beam {
    pub labeling: Label,
    /// Log mass of paths ending in blank.
    pub prob_blank: f64,
    /// Log mass of paths ending in the labeling's last symbol.
    pub prob_non_blank: f64,
    /// Weighted log contribution of the language model.
    pub lm_score: f64,
}

impl Beam {
    fn root() -> Self {
        Beam {
            labeling: Label::empty(),
            prob_blank: 0.0,
            prob_non_blank: f64::NEG_INFINITY,
            lm_score: 0.0,
        }
    }

    /// Combined score used for pruning and the final ranking.
    pub fn total(&self) -> f64 {
        log_add(self.prob_blank, self.prob_non_blank) + self.lm_score
    }
}

/// Picks the most probable class per frame and collapses the path.
/// Ties break toward the lowest class index.
pub fn best_path(m: &ProbMatrix) -> Label {
    let mut path = Vec::with_capacity(m.t_steps());
    for t in 0..m.t_steps() {
        let mut best = 0;
        for k in 1..m.num_classes() {
            if m.prob(t, k) > m.prob(t, best) {
                best = k;
            }
        }
        path.push(best);
    }
    collapse(&path, m.blank())
}

/// Score of the best-path decoding: the product of per-frame maxima, the
/// figure reported as a recognition percentage.
pub fn best_path_score(m: &ProbMatrix) -> f64 {
    (0..m.t_steps())
        .map(|t| {
            (0..m.num_classes())
                .map(|k| m.prob(t, k))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .product()
}

/// Unconstrained prefix beam search. With `beam_width >= (C+1)^T` no
/// hypothesis is ever pruned, so the result is the exact
/// maximum-probability labeling.
pub fn beam_search(m: &ProbMatrix, beam_width: usize) -> Result<Label> {
    if beam_width < 1 {
        return Err(Error::Config("beam_width must be at least 1".into()));
    }
    let finals = run_beam_search(m, beam_width, None, None)?;
    Ok(finals.into_iter().next().map(|b| b.labeling).unwrap_or_default())
}

/// Dictionary-constrained beam search: every extension must keep the
/// current word a valid prefix of `dict`, and the final hypothesis must end
/// on a complete word. Returns the empty label when no hypothesis can
/// complete a word within the available frames.
pub fn word_beam_search(
    m: &ProbMatrix,
    dict: &PrefixTree,
    lm: Option<&CharLM>,
    beam_width: usize,
) -> Result<Label> {
    if beam_width < 1 {
        return Err(Error::Config("beam_width must be at least 1".into()));
    }
    if dict.word_count() == 0 {
        return Err(Error::Config("word beam search needs a non-empty dictionary".into()));
    }
    let finals = run_beam_search(m, beam_width, Some(dict), lm)?;
    Ok(finals
        .into_iter()
        .find(|b| dict.is_complete(&b.labeling))
        .map(|b| b.labeling)
        .unwrap_or_default())
}

/// Shared beam update; returns the final beams best-first.
fn run_beam_search(
    m: &ProbMatrix,
    beam_width: usize,
    dict: Option<&PrefixTree>,
    lm: Option<&CharLM>,
) -> Result<Vec<Beam>> {
    let blank = m.blank();
    let num_symbols = m.blank(); // symbol classes, excluding blank
    let mut beams = vec![Beam::root()];
    let mut allowed = Vec::with_capacity(num_symbols);

    for t in 0..m.t_steps() {
        let mut next: BTreeMap<Label, Beam> = BTreeMap::new();
        let lp = |k: usize| m.prob(t, k).ln();
        for beam in &beams {
            let total_path = log_add(beam.prob_blank, beam.prob_non_blank);

            // same labeling, path ends in blank
            {
                let entry = next.entry(beam.labeling.clone()).or_insert_with(|| Beam {
                    labeling: beam.labeling.clone(),
                    prob_blank: f64::NEG_INFINITY,
                    prob_non_blank: f64::NEG_INFINITY,
                    lm_score: beam.lm_score,
                });
                entry.prob_blank = log_add(entry.prob_blank, total_path + lp(blank));
            }

            // same labeling, repeated last symbol without a blank between
            if let Some(&last) = beam.labeling.symbols().last() {
                let contrib = beam.prob_non_blank + lp(last);
                let entry = next.entry(beam.labeling.clone()).or_insert_with(|| Beam {
                    labeling: beam.labeling.clone(),
                    prob_blank: f64::NEG_INFINITY,
                    prob_non_blank: f64::NEG_INFINITY,
                    lm_score: beam.lm_score,
                });
                entry.prob_non_blank = log_add(entry.prob_non_blank, contrib);
            }

            // extensions
            allowed.clear();
            match dict {
                Some(trie) => trie.allowed_extensions(&beam.labeling, &mut allowed),
                None => allowed.extend(0..num_symbols),
            }
            for &c in &allowed {
                let contrib = if beam.labeling.symbols().last() == Some(&c) {
                    // repeats need a blank-terminated parent path
                    beam.prob_blank + lp(c)
                } else {
                    total_path + lp(c)
                };
                if contrib == f64::NEG_INFINITY {
                    continue;
                }
                let mut symbols = beam.labeling.symbols().to_vec();
                symbols.push(c);
                let new_labeling = Label::new(symbols);
                let lm_step = match lm {
                    Some(model) => {
                        model.weight() * model.transition(beam.labeling.symbols().last().copied(), c)
                    }
                    None => 0.0,
                };
                let entry = next.entry(new_labeling.clone()).or_insert_with(|| Beam {
                    labeling: new_labeling,
                    prob_blank: f64::NEG_INFINITY,
                    prob_non_blank: f64::NEG_INFINITY,
                    lm_score: beam.lm_score + lm_step,
                });
                entry.prob_non_blank = log_add(entry.prob_non_blank, contrib);
            }
        }
        let mut pool: Vec<Beam> = next.into_values().collect();
        sort_best_first(&mut pool);
        pool.truncate(beam_width);
        beams = pool;
    }
    sort_best_first(&mut beams);
    Ok(beams)
}

fn sort_best_first(beams: &mut [Beam]) {
    beams.sort_by(|a, b| {
        b.total()
            .partial_cmp(&a.total())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.labeling.cmp(&b.labeling))
    });
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

// ── dictionary prefix tree ───────────────────────────────────────────

#[derive(Debug, Default)]
struct TrieNode {
    children: BTreeMap<usize, usize>,
    is_word: bool,
}

/// Trie over dictionary words as charset index sequences. When built from
/// text with a charset containing a space, the space class acts as a word
/// separator during decoding.
#[derive(Debug)]
pub struct PrefixTree {
    nodes: Vec<TrieNode>,
    space: Option<usize>,
    words: usize,
}

impl PrefixTree {
    pub fn from_labels(labels: &[Label]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("dictionary has no words".into()));
        }
        let mut tree = PrefixTree {
            nodes: vec![TrieNode::default()],
            space: None,
            words: 0,
        };
        for label in labels {
            tree.insert(label);
        }
        Ok(tree)
    }

    /// Builds from words encoded against `charset`; the charset's space
    /// symbol, if any, becomes the word separator.
    pub fn from_words<S: AsRef<str>>(words: &[S], charset: &Charset) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Config("dictionary has no words".into()));
        }
        let mut tree = PrefixTree {
            nodes: vec![TrieNode::default()],
            space: charset.index_of(' '),
            words: 0,
        };
        for word in words {
            let label = charset.encode(word.as_ref())?;
            tree.insert(&label);
        }
        Ok(tree)
    }

    fn insert(&mut self, label: &Label) {
        let mut node = 0;
        for &sym in label.symbols() {
            let next = match self.nodes[node].children.get(&sym) {
                Some(&n) => n,
                None => {
                    self.nodes.push(TrieNode::default());
                    let id = self.nodes.len() - 1;
                    self.nodes[node].children.insert(sym, id);
                    id
                }
            };
            node = next;
        }
        if !self.nodes[node].is_word {
            self.nodes[node].is_word = true;
            self.words += 1;
        }
    }

    pub fn word_count(&self) -> usize {
        self.words
    }

    pub fn contains(&self, label: &Label) -> bool {
        match self.walk(label.symbols()) {
            Some(node) => self.nodes[node].is_word,
            None => false,
        }
    }

    fn walk(&self, symbols: &[usize]) -> Option<usize> {
        let mut node = 0;
        for &sym in symbols {
            node = *self.nodes[node].children.get(&sym)?;
        }
        Some(node)
    }

    /// The partial word a labeling is currently inside: everything after
    /// the last space.
    fn current_word<'a>(&self, labeling: &'a Label) -> &'a [usize] {
        let symbols = labeling.symbols();
        match self.space {
            Some(space) => match symbols.iter().rposition(|&s| s == space) {
                Some(pos) => &symbols[pos + 1..],
                None => symbols,
            },
            None => symbols,
        }
    }

    fn allowed_extensions(&self, labeling: &Label, out: &mut Vec<usize>) {
        let suffix = self.current_word(labeling);
        let Some(node) = self.walk(suffix) else {
            return;
        };
        out.extend(self.nodes[node].children.keys().copied());
        // a completed, non-empty word may be followed by the separator
        if let Some(space) = self.space {
            if !suffix.is_empty() && self.nodes[node].is_word {
                out.push(space);
            }
        }
    }

    /// Whether a labeling ends on a word boundary: empty, a complete word,
    /// or a separator right after a complete word.
    pub fn is_complete(&self, labeling: &Label) -> bool {
        let suffix = self.current_word(labeling);
        if suffix.is_empty() {
            return true;
        }
        match self.walk(suffix) {
            Some(node) => self.nodes[node].is_word,
            None => false,
        }
    }
}

// ── character bigram language model ──────────────────────────────────

/// Bigram model over charset symbols plus a word-boundary state, trained
/// from a plain-text corpus with additive smoothing.
#[derive(Debug, Clone)]
pub struct CharLM {
    /// `(S+1)×(S+1)` row-major table of log p(next | prev); index S is the
    /// word boundary.
    log_probs: Vec<f64>,
    symbols: usize,
    weight: f64,
}

impl CharLM {
    /// Default per-extension weight applied to LM log scores.
    pub const DEFAULT_WEIGHT: f64 = 0.01;

    /// Trains on whitespace-separated words; words containing characters
    /// outside the charset are skipped. `smoothing` is the additive count.
    pub fn train(corpus: &str, charset: &Charset, smoothing: f64) -> Result<Self> {
        if smoothing <= 0.0 {
            return Err(Error::Config("LM smoothing must be positive".into()));
        }
        let s = charset.len();
        let states = s + 1;
        let boundary = s;
        let mut counts = vec![0.0f64; states * states];
        for word in corpus.split_whitespace() {
            let Ok(label) = charset.encode(word) else {
                continue;
            };
            if label.is_empty() {
                continue;
            }
            let mut prev = boundary;
            for &sym in label.symbols() {
                counts[prev * states + sym] += 1.0;
                prev = sym;
            }
            counts[prev * states + boundary] += 1.0;
        }
        let mut log_probs = vec![0.0f64; states * states];
        for prev in 0..states {
            let row = &counts[prev * states..(prev + 1) * states];
            let total: f64 = row.iter().sum::<f64>() + smoothing * states as f64;
            for next in 0..states {
                log_probs[prev * states + next] = ((row[next] + smoothing) / total).ln();
            }
        }
        Ok(CharLM {
            log_probs,
            symbols: s,
            weight: Self::DEFAULT_WEIGHT,
        })
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Log p(next | prev); `None` is the word boundary on either side.
    pub fn log_prob(&self, prev: Option<usize>, next: Option<usize>) -> f64 {
        let states = self.symbols + 1;
        let p = prev.unwrap_or(self.symbols).min(self.symbols);
        let n = next.unwrap_or(self.symbols).min(self.symbols);
        self.log_probs[p * states + n]
    }

    /// Transition score used during decoding; a space on either side maps
    /// to the boundary state.
    fn transition(&self, prev: Option<usize>, next: usize) -> f64 {
        let prev = prev.filter(|&p| p < self.symbols);
        let next = if next < self.symbols { Some(next) } else { None };
        self.log_prob(prev, next)
    }

    pub fn num_symbols(&self) -> usize {
        self.symbols
    }
}

/// Reads a dictionary file: UTF-8, one word per line, NFC-normalized.
pub fn read_dictionary(path: &std::path::Path, charset: &Charset) -> Result<PrefixTree> {
    let text = std::fs::read_to_string(path)?;
    let words: Vec<String> = text
        .lines()
        .map(|l| crate::data::nfc_normalize(l.trim()))
        .filter(|l| !l.is_empty())
        .collect();
    PrefixTree::from_words(&words, charset)
}
