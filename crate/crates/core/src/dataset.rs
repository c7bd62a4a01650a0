//! Keyword inventories from force-aligned manifests.
//!
//! Entries whose external ASR hypothesis disagrees with the aligned keyword
//! (by character error rate) are dropped, frequent function words and
//! held-out keywords are removed, and the most frequent remaining keywords
//! are sampled into a balanced inventory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Pre-defined command keywords of the Speech Commands split.
pub const PRE_DEFINED: [&str; 10] = [
    "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go",
];

/// Keywords merged into the single `unknown` class.
pub const UNKNOWN: [&str; 15] = [
    "bed", "bird", "cat", "dog", "wow", "house", "learn", "sheila", "tree", "happy", "marvin",
    "backward", "follow", "forward", "visual",
];

/// Held-out keywords used for enrollment and evaluation.
pub const USER_DEFINED: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

pub const UNKNOWN_LABEL: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio_path: String,
    pub keyword: String,
    pub hypothesis: String,
    pub duration_s: f64,
    pub source: String,
}

impl ManifestEntry {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.keyword.is_empty() {
            return Err("empty keyword".into());
        }
        if !(self.duration_s > 0.0) {
            return Err(format!("duration_s {} must be positive", self.duration_s));
        }
        Ok(())
    }
}

/// An inventory row: the manifest entry plus its CER and the 1-based
/// frequency rank of its keyword.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InventoryEntry {
    #[serde(flatten)]
    pub entry: ManifestEntry,
    pub cer: f64,
    pub inventory_keyword_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub cer_threshold: f64,
    pub drop_top_frequent: usize,
    pub drop_single_letter: bool,
    pub excluded_keywords: BTreeSet<String>,
    pub inventory_size: usize,
    pub samples_per_keyword: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            cer_threshold: 0.0,
            drop_top_frequent: 13,
            drop_single_letter: true,
            excluded_keywords: USER_DEFINED.iter().map(|s| s.to_string()).collect(),
            inventory_size: 1000,
            samples_per_keyword: 1000,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cer_threshold) {
            return Err(Error::InvalidArgument(format!(
                "cer_threshold {} outside [0, 1]",
                self.cer_threshold
            )));
        }
        if self.inventory_size == 0 || self.samples_per_keyword == 0 {
            return Err(Error::InvalidArgument(
                "inventory_size and samples_per_keyword must be positive".into(),
            ));
        }
        Ok(())
    }

    fn structurally_excluded(&self, keyword: &str) -> bool {
        (self.drop_single_letter && is_single_letter(keyword))
            || self.excluded_keywords.contains(keyword)
    }
}

fn is_single_letter(keyword: &str) -> bool {
    keyword.chars().count() == 1
}

type CharBuf = SmallVec<[char; 32]>;

/// Unit-cost Levenshtein distance over characters.
pub fn edit_distance(a: &str, b: &str) -> usize {
    if a.is_ascii() && b.is_ascii() {
        let (a, b) = (a.as_bytes(), b.as_bytes());
        return match (a.len(), b.len()) {
            (0, n) | (n, 0) => n,
            (m, _) if m <= 64 => bit_parallel(a, b),
            (_, n) if n <= 64 => bit_parallel(b, a),
            _ => levenshtein(a, b),
        };
    }
    let a: CharBuf = a.chars().collect();
    let b: CharBuf = b.chars().collect();
    levenshtein(&a, &b)
}

/// Hyyrö's bit-vector Levenshtein distance for ASCII, `pattern` of 1 to 64
/// bytes. Bit `i` of the vertical delta vectors tracks row `i + 1`.
fn bit_parallel(pattern: &[u8], text: &[u8]) -> usize {
    let m = pattern.len();
    let mut peq = [0u64; 128];
    for (i, &c) in pattern.iter().enumerate() {
        peq[c as usize] |= 1 << i;
    }
    let last = 1u64 << (m - 1);
    let mut pv = !0u64;
    let mut mv = 0u64;
    let mut score = m;
    for &c in text {
        let eq = peq[c as usize];
        let xv = eq | mv;
        let xh = ((eq & pv).wrapping_add(pv) ^ pv) | eq;
        let ph = mv | !(xh | pv);
        let mh = pv & xh;
        if ph & last != 0 {
            score += 1;
        } else if mh & last != 0 {
            score -= 1;
        }
        let ph = (ph << 1) | 1;
        let mh = mh << 1;
        pv = mh | !(xv | ph);
        mv = ph & xv;
    }
    score
}

fn levenshtein<C: PartialEq>(a: &[C], b: &[C]) -> usize {
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let (a, b) = (&a[prefix..], &b[prefix..]);
    let suffix = a.iter().rev().zip(b.iter().rev()).take_while(|(x, y)| x == y).count();
    let (a, b) = (&a[..a.len() - suffix], &b[..b.len() - suffix]);
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    if b.is_empty() {
        return a.len();
    }
    // single row over the shorter string; `diag` holds the previous row's
    // value one column to the left
    let mut row: SmallVec<[usize; 32]> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let above = row[j + 1];
            let v = (diag + usize::from(ca != cb)).min(above + 1).min(row[j] + 1);
            diag = above;
            row[j + 1] = v;
        }
    }
    row[b.len()]
}

/// Character error rate of `hypothesis` against `reference`.
pub fn compute_cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let len = if reference.is_ascii() {
        reference.len()
    } else {
        reference.chars().count()
    };
    if len == 0 {
        return Err(Error::Empty("CER reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / len as f64)
}

/// Keywords ordered by descending count, ties lexicographic.
fn rank_by_frequency<'a>(keywords: impl Iterator<Item = &'a str>) -> Vec<(&'a str, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for k in keywords {
        *counts.entry(k).or_default() += 1;
    }
    let mut ranked: Vec<_> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked
}

/// Per-rule drop counts. Each dropped entry is attributed to the first
/// rule that removes it, in field order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub cer: usize,
    pub top_frequent: usize,
    pub single_letter: usize,
    pub excluded: usize,
    pub retained: usize,
}

pub fn filter_manifest(entries: &[ManifestEntry], cfg: &FilterConfig) -> Vec<ManifestEntry> {
    filter_manifest_counted(entries, cfg).0
}

pub fn filter_manifest_counted(
    entries: &[ManifestEntry],
    cfg: &FilterConfig,
) -> (Vec<ManifestEntry>, FilterStats) {
    let mut stats = FilterStats {
        input: entries.len(),
        ..FilterStats::default()
    };
    let cer_ok: Vec<&ManifestEntry> = entries
        .iter()
        .filter(|e| {
            let keep = compute_cer(&e.keyword, &e.hypothesis)
                .map(|c| c <= cfg.cer_threshold)
                .unwrap_or(false);
            if !keep {
                stats.cer += 1;
            }
            keep
        })
        .collect();

    let top: BTreeSet<&str> = rank_by_frequency(cer_ok.iter().map(|e| e.keyword.as_str()))
        .into_iter()
        .take(cfg.drop_top_frequent)
        .map(|(k, _)| k)
        .collect();

    let mut retained = Vec::with_capacity(cer_ok.len());
    for e in cer_ok {
        let k = e.keyword.as_str();
        if top.contains(k) {
            stats.top_frequent += 1;
        } else if cfg.drop_single_letter && is_single_letter(k) {
            stats.single_letter += 1;
        } else if cfg.excluded_keywords.contains(k) {
            stats.excluded += 1;
        } else {
            retained.push(e.clone());
        }
    }
    stats.retained = retained.len();
    (retained, stats)
}

/// A sampled keyword inventory in frequency-rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct Inventory {
    pub classes: Vec<InventoryClass>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InventoryClass {
    pub keyword: String,
    /// 1-based frequency rank.
    pub rank: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Inventory {
    pub fn to_map(&self) -> BTreeMap<String, Vec<ManifestEntry>> {
        self.classes
            .iter()
            .map(|c| (c.keyword.clone(), c.entries.clone()))
            .collect()
    }

    pub fn rows(&self) -> Vec<InventoryEntry> {
        self.classes
            .iter()
            .flat_map(|c| {
                c.entries.iter().map(move |e| InventoryEntry {
                    cer: compute_cer(&e.keyword, &e.hypothesis).unwrap_or(1.0),
                    entry: e.clone(),
                    inventory_keyword_rank: c.rank,
                })
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(|c| c.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Picks the `inventory_size` most frequent keywords and samples up to
/// `samples_per_keyword` instances of each without replacement.
pub fn build_inventory(entries: &[ManifestEntry], cfg: &FilterConfig) -> Result<Inventory> {
    cfg.validate()?;
    let eligible: Vec<&ManifestEntry> = entries
        .iter()
        .filter(|e| !cfg.structurally_excluded(&e.keyword))
        .collect();
    let ranked = rank_by_frequency(eligible.iter().map(|e| e.keyword.as_str()));
    if ranked.len() < cfg.inventory_size {
        return Err(Error::InsufficientData(format!(
            "inventory needs {} keywords but only {} are available ({} short)",
            cfg.inventory_size,
            ranked.len(),
            cfg.inventory_size - ranked.len()
        )));
    }

    let mut by_keyword: HashMap<&str, Vec<&ManifestEntry>> = HashMap::new();
    for e in &eligible {
        by_keyword.entry(e.keyword.as_str()).or_default().push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes = ranked
        .iter()
        .take(cfg.inventory_size)
        .enumerate()
        .map(|(i, (keyword, _))| {
            let mut pool = by_keyword.remove(keyword).unwrap_or_default();
            pool.shuffle(&mut rng);
            pool.truncate(cfg.samples_per_keyword);
            InventoryClass {
                keyword: keyword.to_string(),
                rank: i + 1,
                entries: pool.into_iter().cloned().collect(),
            }
        })
        .collect();
    Ok(Inventory { classes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitLists {
    pub pre_defined: BTreeSet<String>,
    pub unknown: BTreeSet<String>,
    pub user_defined: BTreeSet<String>,
}

impl Default for SplitLists {
    fn default() -> Self {
        let set = |ks: &[&str]| ks.iter().map(|s| s.to_string()).collect();
        SplitLists {
            pre_defined: set(&PRE_DEFINED),
            unknown: set(&UNKNOWN),
            user_defined: set(&USER_DEFINED),
        }
    }
}

impl SplitLists {
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            (&self.pre_defined, &self.unknown),
            (&self.pre_defined, &self.user_defined),
            (&self.unknown, &self.user_defined),
        ];
        for (a, b) in pairs {
            if let Some(k) = a.intersection(b).next() {
                return Err(Error::InvalidArgument(format!(
                    "keyword {k:?} appears in two splits"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    PreDefined,
    Unknown,
    UserDefined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEntry {
    pub entry: ManifestEntry,
    /// Training class; the keyword itself except in the unknown split.
    pub class_label: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandSplits {
    pub pre_defined: Vec<LabeledEntry>,
    pub unknown: Vec<LabeledEntry>,
    pub user_defined: Vec<LabeledEntry>,
}

impl CommandSplits {
    /// Classes used for in-domain fine-tuning.
    pub fn finetune_entries(&self) -> impl Iterator<Item = &LabeledEntry> {
        self.pre_defined.iter().chain(&self.unknown)
    }
}

pub fn split_of(keyword: &str, lists: &SplitLists) -> Option<Split> {
    if lists.pre_defined.contains(keyword) {
        Some(Split::PreDefined)
    } else if lists.unknown.contains(keyword) {
        Some(Split::Unknown)
    } else if lists.user_defined.contains(keyword) {
        Some(Split::UserDefined)
    } else {
        None
    }
}

pub fn split_commands(entries: &[ManifestEntry], lists: &SplitLists) -> Result<CommandSplits> {
    lists.validate()?;
    let mut out = CommandSplits::default();
    for e in entries {
        let split = split_of(&e.keyword, lists)
            .ok_or_else(|| Error::UnassignedKeyword(e.keyword.clone()))?;
        let (bucket, class_label) = match split {
            Split::PreDefined => (&mut out.pre_defined, e.keyword.clone()),
            Split::Unknown => (&mut out.unknown, UNKNOWN_LABEL.to_string()),
            Split::UserDefined => (&mut out.user_defined, e.keyword.clone()),
        };
        bucket.push(LabeledEntry {
            entry: e.clone(),
            class_label,
        });
    }
    Ok(out)
}

/// Reads a JSON Lines manifest. Blank lines are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_manifest(reader: impl BufRead) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<manifest>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            what: "manifest",
            line: i + 1,
            message,
        };
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        entry.validate().map_err(malformed)?;
        out.push(entry);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
