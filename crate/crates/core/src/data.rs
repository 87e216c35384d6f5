//! Interaction logs, preprocessing into per-window cross-domain sequences,
//! chronological merging, and train/validation/test splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::A, Domain::B];

    pub fn index(self) -> usize {
        match self {
            Domain::A => 0,
            Domain::B => 1,
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionEvent {
    pub user_id: String,
    pub item_id: String,
    /// Parsed and kept, never read by the model.
    pub rating: f64,
    pub timestamp: u64,
    pub domain: Domain,
}

impl InteractionEvent {
    /// The TSV line `parse_log` reads back into an identical event.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.user_id, self.item_id, self.rating, self.timestamp, self.domain
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reject {
    /// 1-based line number in the input.
    pub line: usize,
    pub text: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct ParseReport {
    pub events: Vec<InteractionEvent>,
    pub rejects: Vec<Reject>,
}

fn parse_line(line: &str) -> std::result::Result<InteractionEvent, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 tab-separated fields, found {}", fields.len()));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err("empty user or item id".into());
    }
    let rating: f64 = fields[2]
        .parse()
        .map_err(|_| format!("bad rating `{}`", fields[2]))?;
    if !rating.is_finite() {
        return Err(format!("bad rating `{}`", fields[2]));
    }
    let timestamp: u64 = fields[3]
        .parse()
        .map_err(|_| format!("bad timestamp `{}`", fields[3]))?;
    let domain: Domain = fields[4].parse()?;
    Ok(InteractionEvent {
        user_id: fields[0].to_string(),
        item_id: fields[1].to_string(),
        rating,
        timestamp,
        domain,
    })
}

/// Parses `user_id<TAB>item_id<TAB>rating<TAB>timestamp<TAB>domain` lines.
/// Blank and `#` lines are skipped; malformed lines are reported, not dropped silently.
pub fn parse_log<I, S>(lines: I) -> ParseReport
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut report = ParseReport::default();
    for (i, line) in lines.into_iter().enumerate() {
        let line = line.as_ref().trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_line(line) {
            Ok(ev) => report.events.push(ev),
            Err(reason) => report.rejects.push(Reject {
                line: i + 1,
                text: line.to_string(),
                reason,
            }),
        }
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SequenceDomain {
    A,
    B,
    Merged,
}

impl fmt::Display for SequenceDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SequenceDomain::A => "A",
            SequenceDomain::B => "B",
            SequenceDomain::Merged => "M",
        })
    }
}

impl From<Domain> for SequenceDomain {
    fn from(d: Domain) -> Self {
        match d {
            Domain::A => SequenceDomain::A,
            Domain::B => SequenceDomain::B,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqItem {
    pub item: usize,
    pub timestamp: u64,
    pub source: Domain,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BehaviorSequence {
    pub user: usize,
    pub domain: SequenceDomain,
    pub items: Vec<SeqItem>,
}

impl BehaviorSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// One user window: `(S_A, S_B, S_M)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceTriple {
    pub a: BehaviorSequence,
    pub b: BehaviorSequence,
    pub merged: BehaviorSequence,
}

impl SequenceTriple {
    /// Builds the triple, deriving `S_M` by chronological merge.
    pub fn from_domains(user: usize, a: Vec<SeqItem>, b: Vec<SeqItem>) -> Result<Self> {
        let a = BehaviorSequence {
            user,
            domain: SequenceDomain::A,
            items: a,
        };
        let b = BehaviorSequence {
            user,
            domain: SequenceDomain::B,
            items: b,
        };
        let merged = merge_chronological(&a, &b)?;
        Ok(SequenceTriple { a, b, merged })
    }

    pub fn domain(&self, d: Domain) -> &BehaviorSequence {
        match d {
            Domain::A => &self.a,
            Domain::B => &self.b,
        }
    }

    /// Checks the sequence invariants, including that restricting `S_M` to one
    /// source domain reproduces that domain's sequence exactly.
    pub fn validate(&self) -> Result<()> {
        for (seq, expected) in [(&self.a, Domain::A), (&self.b, Domain::B)] {
            if seq.items.iter().any(|it| it.source != expected) {
                return Err(Error::Contract(format!("S_{expected} holds items from the other domain")));
            }
        }
        for seq in [&self.a, &self.b, &self.merged] {
            if seq.items.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
                return Err(Error::Contract(format!("S_{} timestamps decrease", seq.domain)));
            }
        }
        for d in Domain::BOTH {
            let restricted = self.merged.items.iter().filter(|it| it.source == d);
            if !restricted.eq(self.domain(d).items.iter()) {
                return Err(Error::Contract(format!("S_M restricted to {d} differs from S_{d}")));
            }
        }
        let tie_broken = self
            .merged
            .items
            .windows(2)
            .any(|w| w[0].timestamp == w[1].timestamp && w[0].source == Domain::B && w[1].source == Domain::A);
        if tie_broken {
            return Err(Error::Contract("S_M puts a B item before an A item with the same timestamp".into()));
        }
        Ok(())
    }
}

fn check_sorted(seq: &BehaviorSequence) -> Result<()> {
    if seq.items.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
        return Err(Error::Contract(format!("S_{} is not time-sorted", seq.domain)));
    }
    Ok(())
}

/// Stable timestamp merge; on equal timestamps the domain-A item goes first.
pub fn merge_chronological(a: &BehaviorSequence, b: &BehaviorSequence) -> Result<BehaviorSequence> {
    check_sorted(a)?;
    check_sorted(b)?;
    let mut items = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.items.len() || j < b.items.len() {
        let take_a = match (a.items.get(i), b.items.get(j)) {
            (Some(x), Some(y)) => x.timestamp <= y.timestamp,
            (Some(_), None) => true,
            _ => false,
        };
        if take_a {
            items.push(a.items[i]);
            i += 1;
        } else {
            items.push(b.items[j]);
            j += 1;
        }
    }
    Ok(BehaviorSequence {
        user: a.user,
        domain: SequenceDomain::Merged,
        items,
    })
}

/// Dense item indices for one domain.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainVocab {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
    counts: Vec<u64>,
}

impl DomainVocab {
    /// Builds a vocabulary whose indices follow the sorted order of `counts`' keys.
    pub fn from_counts(counts: BTreeMap<String, u64>) -> Self {
        let mut v = DomainVocab::default();
        for (id, c) in counts {
            v.index.insert(id.clone(), v.ids.len());
            v.ids.push(id);
            v.counts.push(c);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id_of(&self, index: usize) -> Option<&str> {
        self.ids.get(index).map(String::as_str)
    }

    pub fn count(&self, index: usize) -> u64 {
        self.counts[index]
    }

    /// SHA-256 over the ids in index order; identifies the catalog in checkpoints.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update(id.as_bytes());
            h.update(b"\n");
        }
        format!("{:x}", h.finalize())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    pub a: DomainVocab,
    pub b: DomainVocab,
}

impl Vocabulary {
    pub fn domain(&self, d: Domain) -> &DomainVocab {
        match d {
            Domain::A => &self.a,
            Domain::B => &self.b,
        }
    }

    pub fn catalog(&self) -> Catalog {
        Catalog {
            size_a: self.a.len(),
            size_b: self.b.len(),
            digest_a: self.a.digest(),
            digest_b: self.b.digest(),
        }
    }
}

/// Catalog sizes and digests: everything the model needs to know about a vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub size_a: usize,
    pub size_b: usize,
    pub digest_a: String,
    pub digest_b: String,
}

impl Catalog {
    pub fn size(&self, d: Domain) -> usize {
        match d {
            Domain::A => self.size_a,
            Domain::B => self.size_b,
        }
    }

    /// A catalog with placeholder digests, for synthetic data.
    pub fn synthetic(size_a: usize, size_b: usize) -> Self {
        Catalog {
            size_a,
            size_b,
            digest_a: format!("synthetic-{size_a}"),
            digest_b: format!("synthetic-{size_b}"),
        }
    }
}

const DAY_SECONDS: u64 = 86_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Users need this many interactions in each domain, items this many overall.
    pub min_interactions: usize,
    /// Window length; 90 mirrors "three months", 730 "two years".
    pub period_days: u64,
    pub min_items_per_domain: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_interactions: 10,
            period_days: 90,
            min_items_per_domain: 5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.period_days == 0 {
            problems.push("period_days: must be positive".to_string());
        }
        if self.min_items_per_domain == 0 {
            problems.push("min_items_per_domain: must be positive".to_string());
        }
        problems
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub input_events: usize,
    pub input_users: usize,
    pub overlapped_users: usize,
    pub filter_rounds: usize,
    pub users_after_filter: usize,
    pub events_after_filter: usize,
    pub windows_total: usize,
    pub windows_kept: usize,
    pub users_kept: usize,
    pub items_a: usize,
    pub items_b: usize,
    pub sequences: usize,
    pub avg_sequence_length: f64,
}

impl fmt::Display for PreprocessStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input events\t{}", self.input_events)?;
        writeln!(f, "input users\t{}", self.input_users)?;
        writeln!(f, "users in both domains\t{}", self.overlapped_users)?;
        writeln!(f, "users after frequency filter\t{}", self.users_after_filter)?;
        writeln!(f, "filter rounds\t{}", self.filter_rounds)?;
        writeln!(f, "windows kept / total\t{}/{}", self.windows_kept, self.windows_total)?;
        writeln!(f, "A #Items\t{}", self.items_a)?;
        writeln!(f, "B #Items\t{}", self.items_b)?;
        writeln!(f, "#Overlapped-users\t{}", self.users_kept)?;
        writeln!(f, "#Sequences\t{}", self.sequences)?;
        write!(f, "Sequence Avg Length\t{:.1}", self.avg_sequence_length)
    }
}

#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub vocab: Vocabulary,
    /// Internal user index -> raw user id.
    pub users: Vec<String>,
    pub triples: Vec<SequenceTriple>,
    pub stats: PreprocessStats,
}

/// Overlap filter, fixed-point frequency filter, windowing, per-window size
/// filter, and chronological merge.
pub fn preprocess(events: &[InteractionEvent], cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let mut stats = PreprocessStats {
        input_events: events.len(),
        ..Default::default()
    };
    if events.is_empty() {
        return Err(Error::DatasetExhausted("no input events".into()));
    }
    if let Some(p) = cfg.validate().into_iter().next() {
        return Err(Error::Config(vec![p]));
    }

    let mut domains_of: BTreeMap<&str, [bool; 2]> = BTreeMap::new();
    for ev in events {
        domains_of.entry(&ev.user_id).or_default()[ev.domain.index()] = true;
    }
    stats.input_users = domains_of.len();
    let overlapped: BTreeSet<&str> = domains_of
        .iter()
        .filter(|(_, d)| d[0] && d[1])
        .map(|(u, _)| *u)
        .collect();
    stats.overlapped_users = overlapped.len();

    let mut alive: Vec<&InteractionEvent> = events
        .iter()
        .filter(|e| overlapped.contains(e.user_id.as_str()))
        .collect();

    loop {
        stats.filter_rounds += 1;
        let mut user_counts: BTreeMap<&str, [usize; 2]> = BTreeMap::new();
        let mut item_counts: BTreeMap<(Domain, &str), usize> = BTreeMap::new();
        for e in &alive {
            user_counts.entry(&e.user_id).or_default()[e.domain.index()] += 1;
            *item_counts.entry((e.domain, &e.item_id)).or_default() += 1;
        }
        let before = alive.len();
        alive.retain(|e| {
            let u = user_counts[e.user_id.as_str()];
            u[0] >= cfg.min_interactions
                && u[1] >= cfg.min_interactions
                && item_counts[&(e.domain, e.item_id.as_str())] >= cfg.min_interactions
        });
        if alive.len() == before {
            break;
        }
    }
    stats.events_after_filter = alive.len();

    let mut by_user: BTreeMap<&str, Vec<&InteractionEvent>> = BTreeMap::new();
    for e in &alive {
        by_user.entry(&e.user_id).or_default().push(e);
    }
    stats.users_after_filter = by_user.len();

    let period = cfg.period_days * DAY_SECONDS;
    let mut kept_windows: Vec<(&str, Vec<&InteractionEvent>)> = Vec::new();
    for (user, mut evs) in by_user {
        evs.sort_by_key(|e| e.timestamp);
        let start = evs[0].timestamp;
        let mut windows: BTreeMap<u64, Vec<&InteractionEvent>> = BTreeMap::new();
        for e in evs {
            windows.entry((e.timestamp - start) / period).or_default().push(e);
        }
        stats.windows_total += windows.len();
        for (_, w) in windows {
            let na = w.iter().filter(|e| e.domain == Domain::A).count();
            let nb = w.len() - na;
            if na >= cfg.min_items_per_domain && nb >= cfg.min_items_per_domain {
                kept_windows.push((user, w));
            }
        }
    }
    stats.windows_kept = kept_windows.len();

    if kept_windows.is_empty() {
        return Err(Error::DatasetExhausted(format!(
            "{} input users, {} in both domains, {} after frequency filter, {}/{} windows kept",
            stats.input_users,
            stats.overlapped_users,
            stats.users_after_filter,
            stats.windows_kept,
            stats.windows_total
        )));
    }

    let mut counts = [BTreeMap::<String, u64>::new(), BTreeMap::new()];
    let mut user_ids = BTreeSet::new();
    for (user, w) in &kept_windows {
        user_ids.insert(*user);
        for e in w {
            *counts[e.domain.index()].entry(e.item_id.clone()).or_default() += 1;
        }
    }
    let [ca, cb] = counts;
    let vocab = Vocabulary {
        a: DomainVocab::from_counts(ca),
        b: DomainVocab::from_counts(cb),
    };
    let users: Vec<String> = user_ids.iter().map(|u| u.to_string()).collect();
    let user_index: BTreeMap<&str, usize> = user_ids.iter().enumerate().map(|(i, u)| (*u, i)).collect();

    let mut triples = Vec::with_capacity(kept_windows.len());
    for (user, w) in &kept_windows {
        let mut per_domain = [Vec::new(), Vec::new()];
        for e in w {
            let item = vocab.domain(e.domain).index_of(&e.item_id).expect("item in vocabulary");
            per_domain[e.domain.index()].push(SeqItem {
                item,
                timestamp: e.timestamp,
                source: e.domain,
            });
        }
        for seq in &mut per_domain {
            seq.sort_by_key(|it| (it.timestamp, it.item));
        }
        let [a, b] = per_domain;
        triples.push(SequenceTriple::from_domains(user_index[user], a, b)?);
    }

    stats.users_kept = users.len();
    stats.items_a = vocab.a.len();
    stats.items_b = vocab.b.len();
    stats.sequences = triples.len();
    stats.avg_sequence_length =
        triples.iter().map(|t| t.merged.len()).sum::<usize>() as f64 / triples.len() as f64;

    Ok(Preprocessed {
        vocab,
        users,
        triples,
        stats,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Split sizes for `n` items: train and validation rounded to nearest, remainder to test.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let total = ratios.0 + ratios.1 + ratios.2;
    let train = ((ratios.0 / total) * n as f64).round() as usize;
    let val = (((ratios.1 / total) * n as f64).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    (train, val, n - train - val)
}

/// Seeded shuffle followed by a contiguous cut.
pub fn split<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit<T>> {
    if items.len() < 3 {
        return Err(Error::Data(format!("need at least 3 sequences to split, got {}", items.len())));
    }
    if [ratios.0, ratios.1, ratios.2].iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Config(vec![format!("split ratios {ratios:?} must be non-negative")]));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val, _) = split_sizes(items.len(), ratios);
    let pick = |range: &[usize]| range.iter().map(|&i| items[i].clone()).collect();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        validation: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.75, 0.15, 0.10);

/// A processed-sequence file: catalog header plus `(S_A, S_B, S_M)` line triples.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedData {
    pub catalog: Catalog,
    pub triples: Vec<SequenceTriple>,
}

const PROCESSED_MAGIC: &str = "#ddghm-processed\t1";

fn format_items(seq: &BehaviorSequence) -> String {
    seq.items
        .iter()
        .map(|it| format!("{}:{}:{}", it.item, it.timestamp, it.source))
        .collect::<Vec<_>>()
        .join(",")
}

/// Renders `user<TAB>domain<TAB>idx:ts:src,...` lines, three per triple (A, B, M).
pub fn write_processed(data: &ProcessedData) -> String {
    let mut out = String::new();
    out.push_str(PROCESSED_MAGIC);
    out.push('\n');
    let c = &data.catalog;
    out.push_str(&format!("#vocab\tA\t{}\t{}\n", c.size_a, c.digest_a));
    out.push_str(&format!("#vocab\tB\t{}\t{}\n", c.size_b, c.digest_b));
    for t in &data.triples {
        for seq in [&t.a, &t.b, &t.merged] {
            out.push_str(&format!("{}\t{}\t{}\n", seq.user, seq.domain, format_items(seq)));
        }
    }
    out
}

fn parse_items(field: &str, line_no: usize) -> Result<Vec<SeqItem>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|tok| {
            let parts: Vec<&str> = tok.split(':').collect();
            let bad = || Error::Data(format!("line {line_no}: bad item token `{tok}`"));
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok(SeqItem {
                item: parts[0].parse().map_err(|_| bad())?,
                timestamp: parts[1].parse().map_err(|_| bad())?,
                source: parts[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn read_processed(text: &str) -> Result<ProcessedData> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == PROCESSED_MAGIC => {}
        _ => return Err(Error::Data("missing processed-sequence header".into())),
    }
    let mut sizes: [Option<(usize, String)>; 2] = [None, None];
    let mut seqs: Vec<(usize, BehaviorSequence)> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields[0] == "#vocab" {
            if fields.len() != 4 {
                return Err(Error::Data(format!("line {line_no}: bad vocab header")));
            }
            let d: Domain = fields[1].parse().map_err(Error::Data)?;
            let n = fields[2]
                .parse()
                .map_err(|_| Error::Data(format!("line {line_no}: bad vocab size")))?;
            sizes[d.index()] = Some((n, fields[3].to_string()));
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::Data(format!("line {line_no}: expected 3 fields")));
        }
        let user = fields[0]
            .parse()
            .map_err(|_| Error::Data(format!("line {line_no}: bad user index")))?;
        let domain = match fields[1] {
            "A" => SequenceDomain::A,
            "B" => SequenceDomain::B,
            "M" => SequenceDomain::Merged,
            d => return Err(Error::Data(format!("line {line_no}: bad sequence domain `{d}`"))),
        };
        seqs.push((
            line_no,
            BehaviorSequence {
                user,
                domain,
                items: parse_items(fields[2], line_no)?,
            },
        ));
    }
    let [Some((size_a, digest_a)), Some((size_b, digest_b))] = sizes else {
        return Err(Error::Data("missing #vocab header".into()));
    };
    let catalog = Catalog {
        size_a,
        size_b,
        digest_a,
        digest_b,
    };
    if seqs.len() % 3 != 0 {
        return Err(Error::Data("sequence lines do not form A/B/M triples".into()));
    }
    let mut triples = Vec::with_capacity(seqs.len() / 3);
    for chunk in seqs.chunks(3) {
        let (line_no, a) = &chunk[0];
        let (_, b) = &chunk[1];
        let (_, m) = &chunk[2];
        if a.domain != SequenceDomain::A || b.domain != SequenceDomain::B || m.domain != SequenceDomain::Merged {
            return Err(Error::Data(format!("line {line_no}: expected A, B, M lines in order")));
        }
        if a.user != b.user || a.user != m.user {
            return Err(Error::Data(format!("line {line_no}: triple mixes users")));
        }
        let triple = SequenceTriple {
            a: a.clone(),
            b: b.clone(),
            merged: m.clone(),
        };
        triple
            .validate()
            .map_err(|e| Error::Data(format!("line {line_no}: {e}")))?;
        for d in Domain::BOTH {
            if let Some(it) = triple.domain(d).items.iter().find(|it| it.item >= catalog.size(d)) {
                return Err(Error::Data(format!(
                    "line {line_no}: item {} outside domain {d} catalog of {}",
                    it.item,
                    catalog.size(d)
                )));
            }
        }
        triples.push(triple);
    }
    Ok(ProcessedData { catalog, triples })
}

/// `domain<TAB>index<TAB>item_id<TAB>count` rows for a vocabulary.
pub fn write_vocabulary(vocab: &Vocabulary) -> String {
    let mut out = String::from("#domain\tindex\titem_id\tcount\n");
    for d in Domain::BOTH {
        let v = vocab.domain(d);
        for i in 0..v.len() {
            out.push_str(&format!("{d}\t{i}\t{}\t{}\n", v.id_of(i).unwrap(), v.count(i)));
        }
    }
    out
}
