//! Dataset plumbing: the Cyrillic charset, TSV manifests with deterministic
//! train/val/test1/test2 splits, and a synthetic word-image generator backed
//! by an embedded stroke font.
//!
//! TEST1 holds out whole words (transcripts never seen in training), TEST2
//! holds out samples of words that do appear in training, mirroring the
//! unseen-word vs unseen-style distinction.

pub mod font;

use crate::ctc::Label;
use crate::imaging::{augment, write_pgm, GrayImage};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

/// Ordered symbol table. The CTC blank is implicit: its class index equals
/// `len()` and is never part of the symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

/// The 33 Russian letters shared by both alphabets, lowercase.
pub const RUSSIAN_LETTERS: &str = "абвгдеёжзийклмнопрстуфхцчшщъыьэюя";
/// The 9 additional Kazakh letters, lowercase.
pub const KAZAKH_LETTERS: &str = "әғқңөұүһі";

impl Charset {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &ch) in symbols.iter().enumerate() {
            if index.insert(ch, i).is_some() {
                return Err(Error::Config(format!("duplicate charset symbol {ch:?}")));
            }
        }
        Ok(Charset { symbols, index })
    }

    /// Default recognition charset: 33 Russian + 9 Kazakh letters + space.
    pub fn htr_cyrillic() -> Self {
        let mut symbols: Vec<char> = RUSSIAN_LETTERS.chars().collect();
        symbols.extend(KAZAKH_LETTERS.chars());
        symbols.push(' ');
        Charset::new(symbols).unwrap()
    }

    /// Russian-only variant: 33 letters + space.
    pub fn russian() -> Self {
        let mut symbols: Vec<char> = RUSSIAN_LETTERS.chars().collect();
        symbols.push(' ');
        Charset::new(symbols).unwrap()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Class index of the CTC blank.
    pub fn blank_index(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn symbol(&self, index: usize) -> Option<char> {
        self.symbols.get(index).copied()
    }

    pub fn index_of(&self, ch: char) -> Option<usize> {
        self.index.get(&ch).copied()
    }

    pub fn contains(&self, ch: char) -> bool {
        self.index.contains_key(&ch)
    }

    /// Encodes NFC-normalized text to a label; unknown symbols are reported
    /// with their position.
    pub fn encode(&self, text: &str) -> Result<Label> {
        let normalized = nfc_normalize(text);
        let mut symbols = Vec::with_capacity(normalized.chars().count());
        for (pos, ch) in normalized.chars().enumerate() {
            match self.index_of(ch) {
                Some(i) => symbols.push(i),
                None => return Err(Error::UnknownSymbol { ch, pos }),
            }
        }
        Ok(Label::new(symbols))
    }

    pub fn decode(&self, label: &Label) -> Result<String> {
        label
            .symbols()
            .iter()
            .map(|&i| {
                self.symbol(i).ok_or_else(|| {
                    Error::Contract(format!("label index {i} outside charset of {}", self.len()))
                })
            })
            .collect()
    }

    /// Charset file: one symbol per line, UTF-8.
    pub fn to_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for &ch in &self.symbols {
            out.push(ch);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut symbols = Vec::new();
        for line in text.lines() {
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (Some(ch), None) => symbols.push(ch),
                (None, _) => continue,
                _ => {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        msg: format!("charset line {line:?} is not a single symbol"),
                    })
                }
            }
        }
        Charset::new(symbols)
    }
}

/// NFC composition for the Cyrillic letters this pipeline can represent:
/// base vowels/consonants followed by combining breve (U+0306) or diaeresis
/// (U+0308) fold into their precomposed forms. Other text passes through.
pub fn nfc_normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending: Option<char> = None;
    for ch in text.chars() {
        match (pending, ch) {
            (Some(base), '\u{0306}') => {
                let composed = match base {
                    'и' => 'й',
                    'И' => 'Й',
                    'у' => 'ў',
                    'У' => 'Ў',
                    other => {
                        out.push(other);
                        out.push('\u{0306}');
                        pending = None;
                        continue;
                    }
                };
                out.push(composed);
                pending = None;
            }
            (Some(base), '\u{0308}') => {
                let composed = match base {
                    'е' => 'ё',
                    'Е' => 'Ё',
                    other => {
                        out.push(other);
                        out.push('\u{0308}');
                        pending = None;
                        continue;
                    }
                };
                out.push(composed);
                pending = None;
            }
            (Some(base), next) => {
                out.push(base);
                pending = Some(next);
            }
            (None, next) => pending = Some(next),
        }
    }
    if let Some(last) = pending {
        out.push(last);
    }
    out
}

/// Dataset partition, mirroring the 70/15/7.5/7.5 protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test1,
    Test2,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test1, Split::Test2];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test1 => "test1",
            Split::Test2 => "test2",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test1" => Ok(Split::Test1),
            "test2" => Ok(Split::Test2),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train|val|test1|test2)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the dataset directory.
    pub path: String,
    pub transcript: String,
    pub split: Split,
}

/// All (image, transcript) pairs with their split assignment.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.of_split(split).count()
    }

    pub fn transcripts(&self, split: Split) -> BTreeSet<&str> {
        self.of_split(split).map(|e| e.transcript.as_str()).collect()
    }

    /// Writes `manifest.tsv` (all entries) plus one TSV per split, each line
    /// `relative_path<TAB>transcript`, NFC, LF endings.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let render = |entries: Vec<&ManifestEntry>| -> String {
            let mut out = String::new();
            for e in entries {
                out.push_str(&e.path);
                out.push('\t');
                out.push_str(&nfc_normalize(&e.transcript));
                out.push('\n');
            }
            out
        };
        std::fs::write(dir.join("manifest.tsv"), render(self.entries.iter().collect()))?;
        for split in Split::ALL {
            let name = format!("{split}.tsv");
            std::fs::write(dir.join(name), render(self.of_split(split).collect()))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let parse = |path: &Path, split: Split| -> Result<Vec<ManifestEntry>> {
            let text = std::fs::read_to_string(path)?;
            let mut entries = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let Some((p, t)) = line.split_once('\t') else {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        msg: format!("line {} has no tab separator", lineno + 1),
                    });
                };
                entries.push(ManifestEntry {
                    path: p.to_string(),
                    transcript: t.to_string(),
                    split,
                });
            }
            Ok(entries)
        };
        let mut entries = Vec::new();
        for split in Split::ALL {
            let path = dir.join(format!("{split}.tsv"));
            entries.extend(parse(&path, split)?);
        }
        let manifest_lines = std::fs::read_to_string(dir.join("manifest.tsv"))?
            .lines()
            .filter(|l| !l.is_empty())
            .count();
        if manifest_lines != entries.len() {
            return Err(Error::Parse {
                path: dir.join("manifest.tsv").display().to_string(),
                msg: format!(
                    "manifest lists {manifest_lines} entries but splits hold {}",
                    entries.len()
                ),
            });
        }
        Ok(DatasetManifest { entries })
    }
}

/// Deterministically assigns splits to (path, transcript) pairs.
///
/// TEST1 receives whole words (closest whole-word total to 7.5%), so its
/// transcripts never intersect train or val. TEST2 takes the remainder of
/// the 15% test share from seen words, and a repair pass guarantees every
/// TEST2 transcript also occurs in train.
pub fn split(pairs: &[(String, String)], seed: u64) -> Result<DatasetManifest> {
    let distinct: BTreeSet<&str> = pairs.iter().map(|(_, t)| t.as_str()).collect();
    if distinct.len() < 2 {
        return Err(Error::Config(format!(
            "split needs at least 2 distinct transcripts, got {}",
            distinct.len()
        )));
    }
    let n = pairs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5717_A2C9_1B3D_04EF);

    // choose TEST1 words
    let mut per_word: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, t) in pairs {
        *per_word.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut words: Vec<&str> = per_word.keys().copied().collect();
    words.shuffle(&mut rng);
    let target_test1 = 0.075 * n as f64;
    let mut test1_words: BTreeSet<&str> = BTreeSet::new();
    let mut test1_n = 0usize;
    for &word in &words {
        if test1_words.len() + 1 == distinct.len() {
            break; // leave at least one word for training
        }
        let k = per_word[word];
        let with = (test1_n + k) as f64;
        if (with - target_test1).abs() <= (test1_n as f64 - target_test1).abs() {
            test1_words.insert(word);
            test1_n += k;
        }
        if test1_n as f64 >= target_test1 {
            break;
        }
    }

    // shuffle remaining entries and cut train/val/test2
    let mut rest: Vec<usize> = (0..n)
        .filter(|&i| !test1_words.contains(pairs[i].1.as_str()))
        .collect();
    rest.shuffle(&mut rng);
    let test_total = (0.15 * n as f64).round() as usize;
    let test2_n = test_total.saturating_sub(test1_n).min(rest.len());
    let val_n = ((0.15 * n as f64).round() as usize).min(rest.len() - test2_n);
    let train_n = rest.len() - val_n - test2_n;

    let mut splits = vec![Split::Test1; n];
    for (pos, &i) in rest.iter().enumerate() {
        splits[i] = if pos < train_n {
            Split::Train
        } else if pos < train_n + val_n {
            Split::Val
        } else {
            Split::Test2
        };
    }

    // repair: every TEST2 transcript must occur in train
    let mut train_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for i in 0..n {
        if splits[i] == Split::Train {
            *train_counts.entry(pairs[i].1.as_str()).or_insert(0) += 1;
        }
    }
    for i in 0..n {
        if splits[i] != Split::Test2 {
            continue;
        }
        let transcript = pairs[i].1.as_str();
        if train_counts.get(transcript).copied().unwrap_or(0) > 0 {
            continue;
        }
        // swap with a train entry whose transcript is redundant there
        let donor = (0..n).find(|&j| {
            splits[j] == Split::Train && train_counts.get(pairs[j].1.as_str()).copied().unwrap_or(0) > 1
        });
        match donor {
            Some(j) => {
                splits.swap(i, j);
                *train_counts.get_mut(pairs[j].1.as_str()).unwrap() -= 1;
                *train_counts.entry(transcript).or_insert(0) += 1;
            }
            None => {
                // degenerate dataset: promote the entry itself to train
                splits[i] = Split::Train;
                *train_counts.entry(transcript).or_insert(0) += 1;
            }
        }
    }

    Ok(DatasetManifest {
        entries: pairs
            .iter()
            .zip(splits)
            .map(|((path, transcript), split)| ManifestEntry {
                path: path.clone(),
                transcript: transcript.clone(),
                split,
            })
            .collect(),
    })
}

/// 42 lowercase Cyrillic city and country names, the synthetic stand-in
/// vocabulary. All encodable with [`Charset::htr_cyrillic`].
pub const SAMPLE_WORDS: [&str; 42] = [
    "алматы",
    "астана",
    "атырау",
    "ақтау",
    "ақтөбе",
    "орал",
    "семей",
    "тараз",
    "павлодар",
    "қостанай",
    "көкшетау",
    "түркістан",
    "шымкент",
    "қарағанды",
    "екібастұз",
    "теміртау",
    "риддер",
    "қызылорда",
    "россия",
    "беларусь",
    "украина",
    "грузия",
    "армения",
    "молдова",
    "литва",
    "латвия",
    "эстония",
    "польша",
    "чехия",
    "сербия",
    "венгрия",
    "румыния",
    "болгария",
    "финляндия",
    "швеция",
    "норвегия",
    "дания",
    "австрия",
    "италия",
    "испания",
    "греция",
    "франция",
];

/// Deterministic per-sample seed derivation (splitmix-style mixing).
pub fn derive_seed(seed: u64, word_idx: usize, sample_idx: usize) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(word_idx as u64 + 1))
        .wrapping_add(0xBF58_476D_1CE4_E5B9u64.wrapping_mul(sample_idx as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders `per_word` samples of every word with the stroke font, writes
/// PGM files plus the split manifests and the charset file under `out_dir`,
/// and returns the manifest. Sample 0 of each word is the canonical
/// rendering; later samples are affine-augmented.
pub fn generate(
    words: &[String],
    per_word: usize,
    charset: &Charset,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if words.is_empty() || per_word == 0 {
        return Err(Error::Config("generate needs words and per_word >= 1".into()));
    }
    for word in words {
        charset.encode(word)?;
    }
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;

    let mut pairs = Vec::with_capacity(words.len() * per_word);
    for (wi, word) in words.iter().enumerate() {
        let canonical = font::render_word(word, 32);
        for si in 0..per_word {
            let img = if si == 0 {
                canonical.clone()
            } else {
                augment(&canonical, derive_seed(seed, wi, si))
            };
            let name = format!("images/w{wi:03}_s{si:04}.pgm");
            write_pgm(&img, &out_dir.join(&name))?;
            pairs.push((name, nfc_normalize(word)));
        }
    }
    let manifest = split(&pairs, seed)?;
    manifest.save(out_dir)?;
    charset.to_file(&out_dir.join("charset.txt"))?;
    Ok(manifest)
}

/// Loads the image behind a manifest entry.
pub fn load_entry_image(dir: &Path, entry: &ManifestEntry) -> Result<GrayImage> {
    crate::imaging::read_image(&dir.join(&entry.path))
}
