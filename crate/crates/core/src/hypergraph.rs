//! Per-patient multi-level hypergraphs.
//!
//! Word nodes are connected to two tiers of hyperedges: one hyperedge per
//! note and one per taxonomy. Every entry (node or hyperedge) carries a
//! 4-real meta block `[type, word, note, taxonomy]` followed by a `d_word`
//! embedding, so all entries share the input width `d_in = 4 + d_word`.
//! Ids are scaled to `[0, 1]` by their corpus-wide maxima; `-1` marks an
//! id that does not apply to the entry type.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{tokenize, EmbeddingTable, PatientRecord, TaxonomyTable, Vocab};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const META_WIDTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryKind {
    Word = 0,
    Note = 1,
    Taxonomy = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub kind: EntryKind,
    pub word_index: i64,
    pub note_index: i64,
    pub taxonomy_index: i64,
}

impl EntryMeta {
    pub fn word(word: usize, note: usize, taxonomy: usize) -> Self {
        Self {
            kind: EntryKind::Word,
            word_index: word as i64,
            note_index: note as i64,
            taxonomy_index: taxonomy as i64,
        }
    }

    pub fn note(note: usize, taxonomy: usize) -> Self {
        Self {
            kind: EntryKind::Note,
            word_index: -1,
            note_index: note as i64,
            taxonomy_index: taxonomy as i64,
        }
    }

    pub fn taxonomy(taxonomy: usize) -> Self {
        Self {
            kind: EntryKind::Taxonomy,
            word_index: -1,
            note_index: -1,
            taxonomy_index: taxonomy as i64,
        }
    }
}

/// Corpus-wide id maxima used to scale meta ids into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub max_word_index: usize,
    pub max_note_index: usize,
    pub max_taxonomy_index: usize,
}

impl FeatureScale {
    pub fn new(vocab_len: usize, max_notes: usize, n_taxonomies: usize) -> Self {
        Self {
            max_word_index: vocab_len.saturating_sub(1),
            max_note_index: max_notes.saturating_sub(1),
            max_taxonomy_index: n_taxonomies.saturating_sub(1),
        }
    }

    pub fn encode(&self, meta: &EntryMeta) -> [f64; META_WIDTH] {
        let scale = |v: i64, max: usize| {
            if v < 0 {
                -1.0
            } else {
                v as f64 / max.max(1) as f64
            }
        };
        [
            meta.kind as i64 as f64,
            scale(meta.word_index, self.max_word_index),
            scale(meta.note_index, self.max_note_index),
            scale(meta.taxonomy_index, self.max_taxonomy_index),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelMask {
    All,
    NoteOnly,
    TaxonomyOnly,
}

impl LevelMask {
    pub fn admits_notes(self) -> bool {
        matches!(self, LevelMask::All | LevelMask::NoteOnly)
    }

    pub fn admits_taxonomies(self) -> bool {
        matches!(self, LevelMask::All | LevelMask::TaxonomyOnly)
    }
}

/// Binary incidence between word nodes and the two hyperedge tiers, kept
/// as adjacency lists in both directions. Column `j < m` is note edge `j`;
/// column `m + k` is taxonomy edge `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incidence {
    pub node_notes: Vec<Vec<usize>>,
    pub node_taxonomies: Vec<Vec<usize>>,
    pub note_members: Vec<Vec<usize>>,
    pub taxonomy_members: Vec<Vec<usize>>,
}

impl Incidence {
    /// Builds both directions from per-node edge lists; duplicates collapse.
    pub fn from_node_lists(
        mut node_notes: Vec<Vec<usize>>,
        mut node_taxonomies: Vec<Vec<usize>>,
        n_notes: usize,
        n_taxonomies: usize,
    ) -> Self {
        let mut note_members = vec![Vec::new(); n_notes];
        let mut taxonomy_members = vec![Vec::new(); n_taxonomies];
        for (v, (notes, taxes)) in node_notes
            .iter_mut()
            .zip(node_taxonomies.iter_mut())
            .enumerate()
        {
            notes.sort_unstable();
            notes.dedup();
            taxes.sort_unstable();
            taxes.dedup();
            for &e in notes.iter() {
                note_members[e].push(v);
            }
            for &e in taxes.iter() {
                taxonomy_members[e].push(v);
            }
        }
        Self {
            node_notes,
            node_taxonomies,
            note_members,
            taxonomy_members,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.node_notes.len()
    }

    pub fn n_notes(&self) -> usize {
        self.note_members.len()
    }

    pub fn n_taxonomies(&self) -> usize {
        self.taxonomy_members.len()
    }

    /// Dense `n × (m + s)` view with masked columns zeroed.
    pub fn to_dense(&self, mask: LevelMask) -> Matrix {
        let m = self.n_notes();
        let mut a = Matrix::zeros(self.n_nodes(), m + self.n_taxonomies());
        for v in 0..self.n_nodes() {
            if mask.admits_notes() {
                for &e in &self.node_notes[v] {
                    a.set(v, e, 1.0);
                }
            }
            if mask.admits_taxonomies() {
                for &e in &self.node_taxonomies[v] {
                    a.set(v, m + e, 1.0);
                }
            }
        }
        a
    }

    /// Unmasked `(node, column)` pairs in row-major order.
    pub fn entries(&self, mask: LevelMask) -> Vec<(usize, usize)> {
        let m = self.n_notes();
        let mut out = Vec::new();
        for v in 0..self.n_nodes() {
            if mask.admits_notes() {
                out.extend(self.node_notes[v].iter().map(|&e| (v, e)));
            }
            if mask.admits_taxonomies() {
                out.extend(self.node_taxonomies[v].iter().map(|&e| (v, m + e)));
            }
        }
        out
    }
}

/// Normalization degrees under a mask, clamped to at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Degrees {
    pub node: Vec<f64>,
    pub note: Vec<f64>,
    pub taxonomy: Vec<f64>,
}

pub fn degrees(incidence: &Incidence, mask: LevelMask) -> Degrees {
    let clamp = |c: usize| c.max(1) as f64;
    let node = (0..incidence.n_nodes())
        .map(|v| {
            let mut c = 0;
            if mask.admits_notes() {
                c += incidence.node_notes[v].len();
            }
            if mask.admits_taxonomies() {
                c += incidence.node_taxonomies[v].len();
            }
            clamp(c)
        })
        .collect();
    let note = incidence
        .note_members
        .iter()
        .map(|m| clamp(if mask.admits_notes() { m.len() } else { 0 }))
        .collect();
    let taxonomy = incidence
        .taxonomy_members
        .iter()
        .map(|m| clamp(if mask.admits_taxonomies() { m.len() } else { 0 }))
        .collect();
    Degrees {
        node,
        note,
        taxonomy,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteEdge {
    pub note_id: String,
    /// Position of the note within the patient, 0-based.
    pub ordinal: usize,
    pub hour: f64,
    pub taxonomy_index: usize,
}

/// Learned tables used to initialize hyperedges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeInitParams {
    /// `max_notes × d_word`, looked up by note ordinal.
    pub note_table: Matrix,
    /// `max_taxonomies × d_word`, looked up by taxonomy id.
    pub taxonomy_table: Matrix,
    /// `d_word × d_word` affine map applied after the taxonomy lookup.
    pub taxonomy_weight: Matrix,
    /// `1 × d_word`
    pub taxonomy_bias: Matrix,
}

impl EdgeInitParams {
    pub fn zeros(max_notes: usize, max_taxonomies: usize, d_word: usize) -> Self {
        Self {
            note_table: Matrix::zeros(max_notes, d_word),
            taxonomy_table: Matrix::zeros(max_taxonomies, d_word),
            taxonomy_weight: Matrix::zeros(d_word, d_word),
            taxonomy_bias: Matrix::zeros(1, d_word),
        }
    }

    pub fn d_word(&self) -> usize {
        self.note_table.cols()
    }
}

/// Fixed sinusoidal encoding of `floor(hour)`: even channels sine, odd
/// channels cosine, channel pair `i` at wavelength `10000^(2i/d)`.
pub fn hour_encoding(hour: f64, dim: usize) -> Vec<f64> {
    let pos = hour.floor();
    (0..dim)
        .map(|c| {
            let i = (c / 2) as f64;
            let angle = pos / 10000f64.powf(2.0 * i / dim as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// `[meta ∥ MNE(ordinal) + HE(hour)]`
pub fn init_note_edge(
    edge: &NoteEdge,
    scale: &FeatureScale,
    params: &EdgeInitParams,
) -> Result<Vec<f64>> {
    if !(edge.hour >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "note hour must be >= 0, got {}",
            edge.hour
        )));
    }
    if edge.ordinal >= params.note_table.rows() {
        return Err(Error::InvalidArgument(format!(
            "note ordinal {} out of range (max notes {})",
            edge.ordinal,
            params.note_table.rows()
        )));
    }
    let mut out = scale
        .encode(&EntryMeta::note(edge.ordinal, edge.taxonomy_index))
        .to_vec();
    let he = hour_encoding(edge.hour, params.d_word());
    out.extend(
        params
            .note_table
            .row(edge.ordinal)
            .iter()
            .zip(&he)
            .map(|(a, b)| a + b),
    );
    Ok(out)
}

/// MTE pre-activation: `table[t] · W + b`.
pub fn taxonomy_pre_activation(taxonomy_index: usize, params: &EdgeInitParams) -> Result<Vec<f64>> {
    if taxonomy_index >= params.taxonomy_table.rows() {
        return Err(Error::InvalidArgument(format!(
            "taxonomy index {taxonomy_index} out of range (max {})",
            params.taxonomy_table.rows()
        )));
    }
    let row = Matrix::from_vec(
        1,
        params.d_word(),
        params.taxonomy_table.row(taxonomy_index).to_vec(),
    );
    let mut pre = row.matmul(&params.taxonomy_weight);
    pre.add_assign(&params.taxonomy_bias);
    Ok(pre.as_slice().to_vec())
}

/// `[meta ∥ ReLU(table[t] · W + b)]`
pub fn init_taxonomy_edge(
    taxonomy_index: usize,
    scale: &FeatureScale,
    params: &EdgeInitParams,
) -> Result<Vec<f64>> {
    let pre = taxonomy_pre_activation(taxonomy_index, params)?;
    let mut out = scale.encode(&EntryMeta::taxonomy(taxonomy_index)).to_vec();
    out.extend(pre.iter().map(|v| v.max(0.0)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientHypergraph {
    pub patient_id: String,
    pub label: u8,
    /// Total tokens over all notes (with repeats).
    pub token_count: usize,
    /// Vocabulary index of each word node.
    pub node_tokens: Vec<usize>,
    pub node_meta: Vec<EntryMeta>,
    /// `n × d_in`
    pub node_features: Matrix,
    pub notes: Vec<NoteEdge>,
    /// Global taxonomy id of each local taxonomy edge.
    pub taxonomies: Vec<usize>,
    pub incidence: Incidence,
    pub scale: FeatureScale,
}

impl PatientHypergraph {
    pub fn n_nodes(&self) -> usize {
        self.node_tokens.len()
    }

    pub fn d_in(&self) -> usize {
        self.node_features.cols()
    }

    /// Relabels nodes: new node `i` is old node `perm[i]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n_nodes(), "permutation length");
        let mut features = Matrix::zeros(self.n_nodes(), self.d_in());
        for (new, &old) in perm.iter().enumerate() {
            features
                .row_mut(new)
                .copy_from_slice(self.node_features.row(old));
        }
        let node_notes = perm
            .iter()
            .map(|&o| self.incidence.node_notes[o].clone())
            .collect();
        let node_taxes = perm
            .iter()
            .map(|&o| self.incidence.node_taxonomies[o].clone())
            .collect();
        Self {
            node_tokens: perm.iter().map(|&o| self.node_tokens[o]).collect(),
            node_meta: perm.iter().map(|&o| self.node_meta[o]).collect(),
            node_features: features,
            incidence: Incidence::from_node_lists(
                node_notes,
                node_taxes,
                self.notes.len(),
                self.taxonomies.len(),
            ),
            ..self.clone()
        }
    }

    /// JSON dump of nodes (with meta) and hyperedges (with member lists).
    pub fn debug_json(&self, vocab: &Vocab, taxonomies: &TaxonomyTable) -> serde_json::Value {
        let tax_name = |t: usize| taxonomies.name(t).unwrap_or("?").to_string();
        let nodes: Vec<_> = self
            .node_tokens
            .iter()
            .zip(&self.node_meta)
            .enumerate()
            .map(|(i, (&tok, meta))| {
                json!({
                    "id": i,
                    "token": vocab.token(tok).unwrap_or("?"),
                    "type": meta.kind as u8,
                    "word_index": meta.word_index,
                    "note_index": meta.note_index,
                    "taxonomy_index": meta.taxonomy_index,
                })
            })
            .collect();
        let note_edges: Vec<_> = self
            .notes
            .iter()
            .zip(&self.incidence.note_members)
            .map(|(e, members)| {
                json!({
                    "note_id": e.note_id,
                    "ordinal": e.ordinal,
                    "hour": e.hour,
                    "taxonomy": tax_name(e.taxonomy_index),
                    "members": members,
                })
            })
            .collect();
        let taxonomy_edges: Vec<_> = self
            .taxonomies
            .iter()
            .zip(&self.incidence.taxonomy_members)
            .map(|(&t, members)| json!({"taxonomy": tax_name(t), "taxonomy_index": t, "members": members}))
            .collect();
        json!({
            "patient_id": self.patient_id,
            "label": self.label,
            "nodes": nodes,
            "note_edges": note_edges,
            "taxonomy_edges": taxonomy_edges,
        })
    }
}

/// Everything `construct` needs besides the patient itself.
#[derive(Debug, Clone, Copy)]
pub struct GraphContext<'a> {
    pub vocab: &'a Vocab,
    pub embeddings: &'a EmbeddingTable,
    pub taxonomies: &'a TaxonomyTable,
    pub scale: FeatureScale,
    pub lowercase: bool,
}

/// Builds every patient's graph, preserving input order.
pub fn construct_all(
    patients: &[PatientRecord],
    ctx: &GraphContext<'_>,
) -> Result<Vec<PatientHypergraph>> {
    patients.iter().map(|p| construct(p, ctx)).collect()
}

/// One word node per distinct token of the patient. A node is incident to
/// every note containing the token and to those notes' taxonomies.
pub fn construct(patient: &PatientRecord, ctx: &GraphContext<'_>) -> Result<PatientHypergraph> {
    if patient.notes.is_empty() {
        return Err(Error::Contract(format!(
            "patient `{}` has no notes",
            patient.patient_id
        )));
    }
    if ctx.embeddings.matrix.rows() != ctx.vocab.len() {
        return Err(Error::Shape(format!(
            "embedding table has {} rows for a vocabulary of {}",
            ctx.embeddings.matrix.rows(),
            ctx.vocab.len()
        )));
    }

    let mut taxonomy_local: HashMap<usize, usize> = HashMap::new();
    let mut taxonomies = Vec::new();
    let mut notes = Vec::with_capacity(patient.notes.len());
    let mut node_of_token: HashMap<usize, usize> = HashMap::new();
    let mut node_tokens = Vec::new();
    let mut node_meta = Vec::new();
    let mut node_notes: Vec<Vec<usize>> = Vec::new();
    let mut node_taxes: Vec<Vec<usize>> = Vec::new();
    let mut token_count = 0;

    for (ordinal, note) in patient.notes.iter().enumerate() {
        let tax = ctx.taxonomies.id(&note.taxonomy).ok_or_else(|| {
            Error::Contract(format!(
                "taxonomy `{}` not in the taxonomy table",
                note.taxonomy
            ))
        })?;
        let local_tax = *taxonomy_local.entry(tax).or_insert_with(|| {
            taxonomies.push(tax);
            taxonomies.len() - 1
        });
        notes.push(NoteEdge {
            note_id: note.note_id.clone(),
            ordinal,
            hour: note.hour,
            taxonomy_index: tax,
        });
        for token in tokenize(&note.text, ctx.lowercase) {
            token_count += 1;
            let word = ctx
                .vocab
                .index(&token)
                .ok_or_else(|| Error::Contract(format!("token `{token}` not in vocabulary")))?;
            let node = *node_of_token.entry(word).or_insert_with(|| {
                node_tokens.push(word);
                node_meta.push(EntryMeta::word(word, ordinal, tax));
                node_notes.push(Vec::new());
                node_taxes.push(Vec::new());
                node_tokens.len() - 1
            });
            node_notes[node].push(ordinal);
            node_taxes[node].push(local_tax);
        }
    }
    if node_tokens.is_empty() {
        return Err(Error::Contract(format!(
            "patient `{}` has no tokens",
            patient.patient_id
        )));
    }

    let d_in = META_WIDTH + ctx.embeddings.dim;
    let mut node_features = Matrix::zeros(node_tokens.len(), d_in);
    for (i, (&tok, meta)) in node_tokens.iter().zip(&node_meta).enumerate() {
        let row = node_features.row_mut(i);
        row[..META_WIDTH].copy_from_slice(&ctx.scale.encode(meta));
        row[META_WIDTH..].copy_from_slice(ctx.embeddings.row(tok));
    }
    let incidence =
        Incidence::from_node_lists(node_notes, node_taxes, notes.len(), taxonomies.len());
    Ok(PatientHypergraph {
        patient_id: patient.patient_id.clone(),
        label: patient.label,
        token_count,
        node_tokens,
        node_meta,
        node_features,
        notes,
        taxonomies,
        incidence,
        scale: ctx.scale,
    })
}

/// Disjoint union of patient graphs with index offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchedHypergraph {
    pub node_features: Matrix,
    pub notes: Vec<NoteEdge>,
    pub taxonomies: Vec<usize>,
    pub incidence: Incidence,
    pub scale: FeatureScale,
    /// Graph index of every node.
    pub membership: Vec<usize>,
    /// Node count per graph.
    pub graph_sizes: Vec<usize>,
    pub labels: Vec<u8>,
    pub patient_ids: Vec<String>,
}

impl BatchedHypergraph {
    pub fn n_graphs(&self) -> usize {
        self.graph_sizes.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.membership.len()
    }

    pub fn d_in(&self) -> usize {
        self.node_features.cols()
    }
}

pub fn batch(graphs: &[&PatientHypergraph]) -> Result<BatchedHypergraph> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot batch zero graphs".into()))?;
    let d_in = first.d_in();
    if let Some(g) = graphs.iter().find(|g| g.d_in() != d_in) {
        return Err(Error::Shape(format!(
            "graph `{}` has d_in {} but batch has {d_in}",
            g.patient_id,
            g.d_in()
        )));
    }
    let n_total: usize = graphs.iter().map(|g| g.n_nodes()).sum();
    let mut features = Vec::with_capacity(n_total * d_in);
    let mut notes = Vec::new();
    let mut taxonomies = Vec::new();
    let mut node_notes = Vec::with_capacity(n_total);
    let mut node_taxes = Vec::with_capacity(n_total);
    let mut membership = Vec::with_capacity(n_total);
    for (gi, g) in graphs.iter().enumerate() {
        let (note_off, tax_off) = (notes.len(), taxonomies.len());
        features.extend_from_slice(g.node_features.as_slice());
        notes.extend(g.notes.iter().cloned());
        taxonomies.extend_from_slice(&g.taxonomies);
        for v in 0..g.n_nodes() {
            node_notes.push(
                g.incidence.node_notes[v]
                    .iter()
                    .map(|e| e + note_off)
                    .collect(),
            );
            node_taxes.push(
                g.incidence.node_taxonomies[v]
                    .iter()
                    .map(|e| e + tax_off)
                    .collect(),
            );
            membership.push(gi);
        }
    }
    let incidence =
        Incidence::from_node_lists(node_notes, node_taxes, notes.len(), taxonomies.len());
    Ok(BatchedHypergraph {
        node_features: Matrix::from_vec(n_total, d_in, features),
        notes,
        taxonomies,
        incidence,
        scale: first.scale,
        membership,
        graph_sizes: graphs.iter().map(|g| g.n_nodes()).collect(),
        labels: graphs.iter().map(|g| g.label).collect(),
        patient_ids: graphs.iter().map(|g| g.patient_id.clone()).collect(),
    })
}
