//! Seeded generator for corpora where a shared word changes meaning with
//! the note taxonomy it appears in.
//!
//! Every patient carries the trigger token and the critical token
//! somewhere. A patient is positive iff both sit in the same note of the
//! critical taxonomy. Negatives either put the pair together in a note of
//! another taxonomy (a decoy) or split them across notes so that they
//! never share the critical taxonomy. Note counts, lengths and taxonomy
//! draws do not depend on the label.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PatientRecord, RawNote};
use crate::error::{Error, Result};

const TAXONOMY_NAMES: [&str; 6] = [
    "ecg",
    "nursing",
    "radiology",
    "physician",
    "echo",
    "nursing_other",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    pub n_taxonomies: usize,
    /// Inclusive range.
    pub notes_per_patient: (usize, usize),
    /// Inclusive range, tokens per note.
    pub note_length: (usize, usize),
    pub shared_vocab: usize,
    pub keywords_per_taxonomy: usize,
    /// Probability that a filler token comes from the note's taxonomy
    /// keywords rather than the shared pool.
    pub keyword_rate: f64,
    pub positive_rate: f64,
    /// Fraction of negatives whose trigger/critical pair shares a note of a
    /// non-critical taxonomy.
    pub decoy_rate: f64,
    pub trigger_token: String,
    pub critical_token: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_patients: 200,
            n_taxonomies: 6,
            notes_per_patient: (3, 8),
            note_length: (6, 16),
            shared_vocab: 120,
            keywords_per_taxonomy: 20,
            keyword_rate: 0.4,
            positive_rate: 0.3,
            decoy_rate: 0.5,
            trigger_token: "rhythm".into(),
            critical_token: "fibrillation".into(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn taxonomy_name(&self, t: usize) -> String {
        TAXONOMY_NAMES
            .get(t)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("taxonomy{t}"))
    }

    pub fn critical_taxonomy(&self) -> String {
        self.taxonomy_name(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.n_patients == 0 || self.shared_vocab == 0 || self.keywords_per_taxonomy == 0 {
            return bad("all counts must be >= 1");
        }
        if self.n_taxonomies < 2 {
            return bad("need at least 2 taxonomies for decoys");
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return bad("positive_rate must be in (0, 1)");
        }
        for (name, r) in [
            ("keyword_rate", self.keyword_rate),
            ("decoy_rate", self.decoy_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        let (lo, hi) = self.notes_per_patient;
        if lo < 2 || hi < lo {
            return bad("notes_per_patient must satisfy 2 <= min <= max");
        }
        let (lo, hi) = self.note_length;
        if lo < 2 || hi < lo {
            return bad("note_length must satisfy 2 <= min <= max (trigger rule needs two slots)");
        }
        if self.trigger_token == self.critical_token
            || self.trigger_token.is_empty()
            || self.critical_token.is_empty()
        {
            return bad("trigger and critical tokens must be distinct and non-empty");
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<PatientRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shared: Vec<String> = (0..spec.shared_vocab).map(|i| format!("w{i}")).collect();
    let keywords: Vec<Vec<String>> = (0..spec.n_taxonomies)
        .map(|t| {
            (0..spec.keywords_per_taxonomy)
                .map(|i| format!("{}k{i}", spec.taxonomy_name(t)))
                .collect()
        })
        .collect();

    let mut out = Vec::with_capacity(spec.n_patients);
    for p in 0..spec.n_patients {
        let label = u8::from(rng.random::<f64>() < spec.positive_rate);
        let n_notes = rng.random_range(spec.notes_per_patient.0..=spec.notes_per_patient.1);

        // Note 0 is always critical-taxonomy and note 1 never is, so both
        // decoy and split placements are always available.
        let mut taxonomies: Vec<usize> = (0..n_notes)
            .map(|_| rng.random_range(0..spec.n_taxonomies))
            .collect();
        taxonomies[0] = 0;
        taxonomies[1] = rng.random_range(1..spec.n_taxonomies);

        let mut texts: Vec<Vec<String>> = taxonomies
            .iter()
            .map(|&t| {
                let len = rng.random_range(spec.note_length.0..=spec.note_length.1);
                (0..len)
                    .map(|_| {
                        let pool = if rng.random::<f64>() < spec.keyword_rate {
                            &keywords[t]
                        } else {
                            &shared
                        };
                        pool.choose(&mut rng).expect("non-empty pool").clone()
                    })
                    .collect()
            })
            .collect();

        let critical_notes: Vec<usize> = (0..n_notes).filter(|&j| taxonomies[j] == 0).collect();
        let other_notes: Vec<usize> = (0..n_notes).filter(|&j| taxonomies[j] != 0).collect();
        let pick = |rng: &mut ChaCha8Rng, from: &[usize]| *from.choose(rng).expect("non-empty");

        let (trigger_note, critical_note) = if label == 1 {
            let j = pick(&mut rng, &critical_notes);
            (j, j)
        } else if rng.random::<f64>() < spec.decoy_rate {
            let j = pick(&mut rng, &other_notes);
            (j, j)
        } else {
            let a = pick(&mut rng, &critical_notes);
            let b = pick(&mut rng, &other_notes);
            if rng.random::<bool>() {
                (a, b)
            } else {
                (b, a)
            }
        };
        place(
            &mut texts[trigger_note],
            &spec.trigger_token,
            None,
            &mut rng,
        );
        let avoid = (trigger_note == critical_note)
            .then(|| position_of(&texts[trigger_note], &spec.trigger_token));
        place(
            &mut texts[critical_note],
            &spec.critical_token,
            avoid.flatten(),
            &mut rng,
        );

        let mut hour = 0.0f64;
        let notes = texts
            .into_iter()
            .zip(&taxonomies)
            .enumerate()
            .map(|(j, (words, &t))| {
                if j > 0 {
                    hour += rng.random_range(0.5..6.0);
                }
                RawNote {
                    note_id: format!("p{p}n{j}"),
                    taxonomy: spec.taxonomy_name(t),
                    hour: (hour * 100.0).round() / 100.0,
                    text: words.join(" "),
                }
            })
            .collect();
        out.push(PatientRecord {
            patient_id: format!("p{p}"),
            label,
            notes,
        });
    }
    Ok(out)
}

fn position_of(words: &[String], token: &str) -> Option<usize> {
    words.iter().position(|w| w == token)
}

/// Overwrites a random filler slot with `token`, keeping note length fixed.
fn place(words: &mut [String], token: &str, avoid: Option<usize>, rng: &mut ChaCha8Rng) {
    loop {
        let i = rng.random_range(0..words.len());
        if Some(i) != avoid {
            words[i] = token.to_string();
            return;
        }
    }
}
