//! Hierarchical note corpora: entity records, notes and taxonomies.
//!
//! The on-disk format is JSON Lines, one patient per line:
//!
//! ```text
//! {"patient_id": "p1", "label": 0, "notes": [{"note_id": "n1", "taxonomy": "ECG", "hour": 2.5, "text": "..."}]}
//! ```

mod embeddings;
mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use embeddings::{load_embeddings, EmbeddingTable, Vocab, DEFAULT_EMBEDDING_DIM, OOV_STD};
pub use synthetic::{generate_synthetic, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawNote {
    pub note_id: String,
    pub taxonomy: String,
    /// Hours since first admission.
    pub hour: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub label: u8,
    /// Ascending by `hour`.
    pub notes: Vec<RawNote>,
}

impl PatientRecord {
    /// Total token count over all notes.
    pub fn token_count(&self, lowercase: bool) -> usize {
        self.notes
            .iter()
            .map(|n| tokenize(&n.text, lowercase).len())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub max_notes: usize,
    pub top_taxonomies: usize,
    pub min_token_freq: usize,
    pub lowercase: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            max_notes: 30,
            top_taxonomies: 6,
            min_token_freq: 1,
            lowercase: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_notes == 0 {
            return Err(Error::InvalidArgument("max_notes must be >= 1".into()));
        }
        if self.top_taxonomies == 0 {
            return Err(Error::InvalidArgument("top_taxonomies must be >= 1".into()));
        }
        Ok(())
    }
}

/// Kept taxonomy names mapped to dense ids, in rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyTable {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TaxonomyTable {
    pub fn new(names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self { names, index }
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        if self.index.is_empty() && !self.names.is_empty() {
            return self.names.iter().position(|n| n == name);
        }
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub records: Vec<PatientRecord>,
    pub vocab: Vocab,
    pub taxonomies: TaxonomyTable,
}

/// Lowercases (optionally) and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| {
            if lowercase {
                t.to_lowercase()
            } else {
                t.to_string()
            }
        })
        .collect()
}

pub fn parse_corpus(path: &Path) -> Result<Vec<PatientRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus_reader(BufReader::new(file))
}

pub fn parse_corpus_reader<R: BufRead>(reader: R) -> Result<Vec<PatientRecord>> {
    let mut records = Vec::new();
    let mut seen_patients = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let record = record_from_value(&value, line_no)?;
        if !seen_patients.insert(record.patient_id.clone()) {
            return Err(Error::validation(
                line_no,
                "patient_id",
                format!("duplicate patient_id `{}`", record.patient_id),
            ));
        }
        records.push(record);
    }
    Ok(records)
}

fn required<'a>(
    obj: &'a serde_json::Map<String, Value>,
    field: &str,
    line: usize,
) -> Result<&'a Value> {
    obj.get(field)
        .ok_or_else(|| Error::validation(line, field, "missing required field"))
}

fn required_str(obj: &serde_json::Map<String, Value>, field: &str, line: usize) -> Result<String> {
    required(obj, field, line)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::validation(line, field, "expected a string"))
}

fn record_from_value(value: &Value, line: usize) -> Result<PatientRecord> {
    let obj = value.as_object().ok_or_else(|| Error::Parse {
        line,
        message: "expected a JSON object".into(),
    })?;
    let patient_id = required_str(obj, "patient_id", line)?;
    let label = match required(obj, "label", line)?.as_u64() {
        Some(0) => 0,
        Some(1) => 1,
        _ => return Err(Error::validation(line, "label", "must be 0 or 1")),
    };
    let raw_notes = required(obj, "notes", line)?
        .as_array()
        .ok_or_else(|| Error::validation(line, "notes", "expected an array"))?;

    let mut notes = Vec::with_capacity(raw_notes.len());
    let mut ids = HashSet::new();
    for raw in raw_notes {
        let n = raw
            .as_object()
            .ok_or_else(|| Error::validation(line, "notes", "expected note objects"))?;
        let note_id = required_str(n, "note_id", line)?;
        let taxonomy = required_str(n, "taxonomy", line)?;
        let hour = required(n, "hour", line)?
            .as_f64()
            .ok_or_else(|| Error::validation(line, "hour", "expected a number"))?;
        if !(hour >= 0.0) || !hour.is_finite() {
            return Err(Error::validation(line, "hour", "must be finite and >= 0"));
        }
        let text = required_str(n, "text", line)?;
        if !ids.insert(note_id.clone()) {
            return Err(Error::validation(
                line,
                "note_id",
                format!("duplicate note_id `{note_id}` in patient `{patient_id}`"),
            ));
        }
        notes.push(RawNote {
            note_id,
            taxonomy,
            hour,
            text,
        });
    }
    sort_notes(&mut notes);
    Ok(PatientRecord {
        patient_id,
        label,
        notes,
    })
}

// Stable, so equal hours keep file order.
fn sort_notes(notes: &mut [RawNote]) {
    notes.sort_by(|a, b| a.hour.total_cmp(&b.hour));
}

pub fn write_corpus(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("records serialize"));
        buf.push('\n');
    }
    file.write_all(buf.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Ranks taxonomies by note count (descending, ties lexicographic) and
/// returns the first `top` names.
pub fn rank_taxonomies(records: &[PatientRecord], top: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        for n in &r.notes {
            *counts.entry(n.taxonomy.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked
        .into_iter()
        .take(top)
        .map(|(n, _)| n.to_string())
        .collect()
}

/// Taxonomy filter, note cap and tokenization; returns per-patient
/// per-note token lists aligned with the kept notes.
fn filter_and_tokenize(
    records: &[PatientRecord],
    taxonomies: &TaxonomyTable,
    config: &PreprocessConfig,
) -> Vec<(PatientRecord, Vec<Vec<String>>)> {
    records
        .iter()
        .map(|r| {
            let kept: Vec<RawNote> = r
                .notes
                .iter()
                .filter(|n| taxonomies.id(&n.taxonomy).is_some())
                .take(config.max_notes)
                .cloned()
                .collect();
            let tokens = kept
                .iter()
                .map(|n| tokenize(&n.text, config.lowercase))
                .collect();
            (
                PatientRecord {
                    patient_id: r.patient_id.clone(),
                    label: r.label,
                    notes: kept,
                },
                tokens,
            )
        })
        .collect()
}

/// Drops tokens rejected by `keep`, then empty notes, then empty patients.
fn finalize(
    staged: Vec<(PatientRecord, Vec<Vec<String>>)>,
    keep: impl Fn(&str) -> bool,
) -> Vec<PatientRecord> {
    let mut out = Vec::new();
    for (mut record, tokens) in staged {
        let notes = std::mem::take(&mut record.notes);
        for (mut note, toks) in notes.into_iter().zip(tokens) {
            let kept: Vec<String> = toks.into_iter().filter(|t| keep(t)).collect();
            if kept.is_empty() {
                continue;
            }
            note.text = kept.join(" ");
            record.notes.push(note);
        }
        if !record.notes.is_empty() {
            out.push(record);
        }
    }
    out
}

/// Fits taxonomy ranking and vocabulary on `records` and normalizes them.
///
/// Note text in the output is the surviving tokens joined by single
/// spaces, so re-running the same config is a no-op.
pub fn preprocess(records: &[PatientRecord], config: &PreprocessConfig) -> Result<Preprocessed> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let taxonomies = TaxonomyTable::new(rank_taxonomies(records, config.top_taxonomies));
    let staged = filter_and_tokenize(records, &taxonomies, config);

    let mut freq: HashMap<&str, usize> = HashMap::new();
    for (_, notes) in &staged {
        for t in notes.iter().flatten() {
            *freq.entry(t.as_str()).or_default() += 1;
        }
    }
    let keep: HashSet<String> = freq
        .into_iter()
        .filter(|(_, c)| *c >= config.min_token_freq)
        .map(|(t, _)| t.to_string())
        .collect();

    let records = finalize(staged, |t| keep.contains(t));
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = Vocab::from_tokens(
        records
            .iter()
            .flat_map(|r| r.notes.iter())
            .flat_map(|n| n.text.split(' ')),
    );
    // Taxonomies whose notes all vanished are still kept in the table so
    // ids stay stable between fit and apply.
    Ok(Preprocessed {
        records,
        vocab,
        taxonomies,
    })
}

/// Applies a fitted vocabulary and taxonomy table to unseen records:
/// unknown taxonomies and out-of-vocabulary tokens are dropped.
pub fn apply_preprocess(
    records: &[PatientRecord],
    vocab: &Vocab,
    taxonomies: &TaxonomyTable,
    config: &PreprocessConfig,
) -> Result<Vec<PatientRecord>> {
    config.validate()?;
    let staged = filter_and_tokenize(records, taxonomies, config);
    let out = finalize(staged, |t| vocab.index(t).is_some());
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

/// Seeded uniform shuffle, then the first `round(val_fraction * n)` go to
/// validation.
pub fn split_train_val<T: Clone>(
    records: &[T],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    if records.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 records to split, got {}",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_val = (val_fraction * records.len() as f64).round() as usize;
    let val = order[..n_val].iter().map(|&i| records[i].clone()).collect();
    let train = order[n_val..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, val))
}

pub const SHORT_MAX: usize = 600;
pub const MEDIUM_MAX: usize = 1600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LengthBucket {
    Short,
    Medium,
    Long,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 3] = [
        LengthBucket::Short,
        LengthBucket::Medium,
        LengthBucket::Long,
    ];

    /// `[0, 600)`, `[600, 1600)`, `[1600, ∞)`.
    pub fn of(tokens: usize) -> Self {
        if tokens < SHORT_MAX {
            LengthBucket::Short
        } else if tokens < MEDIUM_MAX {
            LengthBucket::Medium
        } else {
            LengthBucket::Long
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LengthBucket::Short => "short",
            LengthBucket::Medium => "medium",
            LengthBucket::Long => "long",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LengthBuckets {
    pub short: Vec<PatientRecord>,
    pub medium: Vec<PatientRecord>,
    pub long: Vec<PatientRecord>,
}

impl LengthBuckets {
    pub fn get(&self, b: LengthBucket) -> &[PatientRecord] {
        match b {
            LengthBucket::Short => &self.short,
            LengthBucket::Medium => &self.medium,
            LengthBucket::Long => &self.long,
        }
    }
}

pub fn bucket_by_length(records: &[PatientRecord]) -> LengthBuckets {
    let mut out = LengthBuckets::default();
    for r in records {
        let bucket = match LengthBucket::of(r.token_count(false)) {
            LengthBucket::Short => &mut out.short,
            LengthBucket::Medium => &mut out.medium,
            LengthBucket::Long => &mut out.long,
        };
        bucket.push(r.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn note(id: &str, tax: &str, hour: f64, text: &str) -> RawNote {
        RawNote {
            note_id: id.into(),
            taxonomy: tax.into(),
            hour,
            text: text.into(),
        }
    }

    fn patient(id: &str, label: u8, notes: Vec<RawNote>) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            label,
            notes,
        }
    }

    #[test]
    fn empty_input_parses_to_nothing() {
        assert!(parse_corpus_reader("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn single_line_round_trip() {
        let line = r#"{"patient_id":"p1","label":1,"notes":[{"note_id":"n1","taxonomy":"ECG","hour":0,"text":"sinus rhythm"}]}"#;
        let recs = parse_corpus_reader(line.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].patient_id, "p1");
        assert_eq!(recs[0].label, 1);
        assert_eq!(recs[0].notes.len(), 1);
    }

    #[test]
    fn bad_label_is_a_validation_error() {
        let line = r#"{"patient_id":"p1","label":2,"notes":[]}"#;
        match parse_corpus_reader(line.as_bytes()) {
            Err(Error::Validation { field, line, .. }) => {
                assert_eq!(field, "label");
                assert_eq!(line, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"patient_id\":\"p1\",\"label\":0,\"notes\":[]}\n{oops\n";
        match parse_corpus_reader(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let line =
            r#"{"patient_id":"p1","label":0,"notes":[{"note_id":"n1","hour":0,"text":"x"}]}"#;
        match parse_corpus_reader(line.as_bytes()) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "taxonomy"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_note_id_rejected() {
        let line = r#"{"patient_id":"p1","label":0,"notes":[{"note_id":"n1","taxonomy":"A","hour":0,"text":"x"},{"note_id":"n1","taxonomy":"A","hour":1,"text":"y"}]}"#;
        match parse_corpus_reader(line.as_bytes()) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "note_id"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn notes_sorted_by_hour() {
        let line = r#"{"patient_id":"p1","label":0,"notes":[{"note_id":"b","taxonomy":"A","hour":5,"text":"x"},{"note_id":"a","taxonomy":"A","hour":1,"text":"y"}]}"#;
        let recs = parse_corpus_reader(line.as_bytes()).unwrap();
        assert_eq!(recs[0].notes[0].note_id, "a");
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            tokenize("Atrial-Fibrillation, HR 120!", true),
            vec!["atrial", "fibrillation", "hr", "120"]
        );
        assert!(tokenize("!!!", true).is_empty());
    }

    #[test]
    fn note_cap_keeps_earliest() {
        let notes = (0..35)
            .map(|i| note(&format!("n{i}"), "A", i as f64, &format!("w{i}")))
            .collect();
        let pre = preprocess(&[patient("p", 0, notes)], &PreprocessConfig::default()).unwrap();
        let kept = &pre.records[0].notes;
        assert_eq!(kept.len(), 30);
        assert_eq!(kept.last().unwrap().note_id, "n29");
    }

    #[test]
    fn seventh_taxonomy_dropped() {
        // Counts 9,8,7,6,5,4,3 for taxonomies t0..t6.
        let mut recs = Vec::new();
        for (t, count) in [9, 8, 7, 6, 5, 4, 3].iter().enumerate() {
            let notes = (0..*count)
                .map(|i| note(&format!("n{i}"), &format!("t{t}"), i as f64, "word"))
                .collect();
            recs.push(patient(&format!("p{t}"), 0, notes));
        }
        let pre = preprocess(&recs, &PreprocessConfig::default()).unwrap();
        assert_eq!(pre.taxonomies.len(), 6);
        assert!(pre.taxonomies.id("t6").is_none());
        assert_eq!(pre.records.len(), 6);
        assert!(pre.records.iter().all(|r| r.patient_id != "p6"));
    }

    #[test]
    fn taxonomy_ties_break_lexicographically() {
        let recs = vec![patient(
            "p",
            0,
            vec![note("a", "zeta", 0.0, "x"), note("b", "alpha", 1.0, "y")],
        )];
        assert_eq!(rank_taxonomies(&recs, 1), vec!["alpha".to_string()]);
    }

    #[test]
    fn punctuation_only_note_dropped() {
        let recs = vec![patient(
            "p",
            1,
            vec![note("a", "A", 0.0, "!!!"), note("b", "A", 1.0, "ok")],
        )];
        let pre = preprocess(&recs, &PreprocessConfig::default()).unwrap();
        assert_eq!(pre.records[0].notes.len(), 1);
        assert_eq!(pre.records[0].notes[0].note_id, "b");
    }

    #[test]
    fn all_patients_eliminated_is_an_error() {
        let recs = vec![patient("p", 1, vec![note("a", "A", 0.0, "...")])];
        assert!(matches!(
            preprocess(&recs, &PreprocessConfig::default()),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn min_freq_filters_rare_tokens() {
        let recs = vec![patient("p", 0, vec![note("a", "A", 0.0, "x x y")])];
        let config = PreprocessConfig {
            min_token_freq: 2,
            ..Default::default()
        };
        let pre = preprocess(&recs, &config).unwrap();
        assert_eq!(pre.records[0].notes[0].text, "x x");
        assert_eq!(pre.vocab.len(), 1);
    }

    #[test]
    fn apply_drops_unknown_tokens_and_taxonomies() {
        let train = vec![patient("p", 0, vec![note("a", "A", 0.0, "x y")])];
        let pre = preprocess(&train, &PreprocessConfig::default()).unwrap();
        let test = vec![patient(
            "q",
            1,
            vec![note("a", "A", 0.0, "x z"), note("b", "B", 1.0, "x")],
        )];
        let out = apply_preprocess(
            &test,
            &pre.vocab,
            &pre.taxonomies,
            &PreprocessConfig::default(),
        )
        .unwrap();
        assert_eq!(out[0].notes.len(), 1);
        assert_eq!(out[0].notes[0].text, "x");
    }

    #[test]
    fn split_sizes_and_determinism() {
        let items: Vec<usize> = (0..10).collect();
        let (tr, va) = split_train_val(&items, 0.2, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        let (tr2, va2) = split_train_val(&items, 0.2, 3).unwrap();
        assert_eq!((tr, va), (tr2, va2));
        assert!(split_train_val(&items, 1.0, 3).is_err());
        assert!(split_train_val(&items[..1], 0.5, 3).is_err());
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(LengthBucket::of(599), LengthBucket::Short);
        assert_eq!(LengthBucket::of(600), LengthBucket::Medium);
        assert_eq!(LengthBucket::of(1599), LengthBucket::Medium);
        assert_eq!(LengthBucket::of(1600), LengthBucket::Long);
    }

    #[test]
    fn all_short_leaves_other_buckets_empty() {
        let recs = vec![patient("p", 0, vec![note("a", "A", 0.0, "a b c")])];
        let b = bucket_by_length(&recs);
        assert_eq!(b.short.len(), 1);
        assert!(b.medium.is_empty() && b.long.is_empty());
    }
}
