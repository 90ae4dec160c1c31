#![allow(dead_code)]

use mlhgnn::corpus::{
    preprocess, EmbeddingTable, PatientRecord, PreprocessConfig, RawNote, TaxonomyTable, Vocab,
};
use mlhgnn::hypergraph::{
    construct_all, BatchedHypergraph, FeatureScale, GraphContext, Incidence, LevelMask,
    PatientHypergraph,
};
use mlhgnn::model::{apply_variant, LayerParams, ModelParams, StageKind};
use mlhgnn::tensor::Matrix;
use mlhgnn::training::dims_for;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TAXONOMIES: [&str; 4] = ["ecg", "nursing", "radiology", "echo"];
pub const MAX_NOTES: usize = 4;
pub const VOCAB_SIZE: usize = 12;

/// A patient with 1-4 notes over a 12-word vocabulary, so at most 12 word
/// nodes. With `disjoint`, no token appears in more than one note.
pub fn random_record(rng: &mut ChaCha8Rng, id: usize, disjoint: bool) -> PatientRecord {
    let n_notes = rng.random_range(1..=MAX_NOTES);
    let mut pool: Vec<usize> = (0..VOCAB_SIZE).collect();
    pool.shuffle(rng);
    let mut next = 0;
    let mut hour = rng.random_range(0.0..5.0);
    let notes = (0..n_notes)
        .map(|j| {
            // Disjoint notes draw without replacement: 4 notes x 3 <= 12 words.
            let len = rng.random_range(1..=if disjoint { 3 } else { 4 });
            let words: Vec<String> = (0..len)
                .map(|_| {
                    let w = if disjoint {
                        next += 1;
                        pool[next - 1]
                    } else {
                        rng.random_range(0..VOCAB_SIZE)
                    };
                    format!("w{w}")
                })
                .collect();
            hour += rng.random_range(0.0..30.0);
            RawNote {
                note_id: format!("n{j}"),
                taxonomy: TAXONOMIES[rng.random_range(0..TAXONOMIES.len())].to_string(),
                hour,
                text: words.join(" "),
            }
        })
        .collect();
    PatientRecord {
        patient_id: format!("p{id}"),
        label: u8::from(rng.random::<bool>()),
        notes,
    }
}

pub struct Fixture {
    pub records: Vec<PatientRecord>,
    pub graphs: Vec<PatientHypergraph>,
    pub vocab: Vocab,
    pub taxonomies: TaxonomyTable,
}

pub fn preprocess_config() -> PreprocessConfig {
    PreprocessConfig {
        max_notes: MAX_NOTES,
        top_taxonomies: TAXONOMIES.len(),
        min_token_freq: 1,
        lowercase: true,
    }
}

pub fn fixture(seed: u64, n: usize, d_word: usize, disjoint: bool) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<PatientRecord> = (0..n)
        .map(|i| random_record(&mut rng, i, disjoint))
        .collect();
    let pre = preprocess(&raw, &preprocess_config()).expect("preprocess");
    let embeddings = EmbeddingTable::random(pre.vocab.len(), d_word, seed ^ 0xABCD);
    let ctx = GraphContext {
        vocab: &pre.vocab,
        embeddings: &embeddings,
        taxonomies: &pre.taxonomies,
        scale: FeatureScale::new(pre.vocab.len(), MAX_NOTES, pre.taxonomies.len()),
        lowercase: true,
    };
    let graphs = construct_all(&pre.records, &ctx).expect("construct");
    Fixture {
        records: pre.records.clone(),
        graphs,
        vocab: pre.vocab,
        taxonomies: pre.taxonomies,
    }
}

/// Randomly initialized parameters with nonzero biases everywhere.
pub fn random_params(
    graphs: &[PatientHypergraph],
    hidden: usize,
    variant: &str,
    seed: u64,
) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = dims_for(graphs, hidden).expect("dims");
    let mut params = ModelParams::init(
        dims,
        apply_variant(variant).expect("variant"),
        0.3,
        &mut rng,
    )
    .expect("init");
    for layer in &mut params.stages {
        for b in layer.bias.as_mut_slice() {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    for b in params.edges.taxonomy_bias.as_mut_slice() {
        *b = rng.random_range(-0.1..0.1);
    }
    params
}

pub fn na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &Matrix) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.rows(), b.cols()), "shape");
    (0..a.nrows())
        .flat_map(|i| (0..a.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| (a[(i, j)] - b.get(i, j)).abs())
        .fold(0.0, f64::max)
}

/// Dense incidence blocks `(n × m, n × s)`, built straight from the
/// per-node lists and zeroed where the mask excludes a tier.
pub fn dense_incidence(inc: &Incidence, mask: LevelMask) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = inc.node_notes.len();
    let mut a_note = DMatrix::zeros(n, inc.note_members.len());
    let mut a_tax = DMatrix::zeros(n, inc.taxonomy_members.len());
    for v in 0..n {
        if matches!(mask, LevelMask::All | LevelMask::NoteOnly) {
            for &e in &inc.node_notes[v] {
                a_note[(v, e)] = 1.0;
            }
        }
        if matches!(mask, LevelMask::All | LevelMask::TaxonomyOnly) {
            for &e in &inc.node_taxonomies[v] {
                a_tax[(v, e)] = 1.0;
            }
        }
    }
    (a_note, a_tax)
}

fn inv_sqrt_degrees(sums: impl Iterator<Item = f64>) -> DMatrix<f64> {
    let d: Vec<f64> = sums.map(|s| 1.0 / s.max(1.0).sqrt()).collect();
    DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d))
}

pub fn relu(m: DMatrix<f64>) -> DMatrix<f64> {
    m.map(|x| x.max(0.0))
}

fn add_bias(mut m: DMatrix<f64>, bias: &Matrix) -> DMatrix<f64> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            m[(i, j)] += bias.get(0, j);
        }
    }
    m
}

fn weight(layer: &LayerParams, width: usize) -> DMatrix<f64> {
    na(layer.weight_for(width).expect("weight for width"))
}

/// Node update `φ(Dv^{-1/2} [A_n A_t] De^{-1/2} [F_n; F_t] Θ + b)`, with
/// each block multiplied by the weight matching its width.
pub fn dense_conv_nodes(
    notes: &DMatrix<f64>,
    taxes: &DMatrix<f64>,
    inc: &Incidence,
    mask: LevelMask,
    layer: &LayerParams,
) -> DMatrix<f64> {
    let (a_n, a_t) = dense_incidence(inc, mask);
    let dv = inv_sqrt_degrees((0..a_n.nrows()).map(|v| a_n.row(v).sum() + a_t.row(v).sum()));
    let de_n = inv_sqrt_degrees((0..a_n.ncols()).map(|e| a_n.column(e).sum()));
    let de_t = inv_sqrt_degrees((0..a_t.ncols()).map(|e| a_t.column(e).sum()));
    let hidden = layer.weight.cols();
    let mut pre = DMatrix::zeros(a_n.nrows(), hidden);
    if notes.nrows() > 0 {
        pre += &dv * &a_n * &de_n * notes * weight(layer, notes.ncols());
    }
    if taxes.nrows() > 0 {
        pre += &dv * &a_t * &de_t * taxes * weight(layer, taxes.ncols());
    }
    relu(add_bias(pre, &layer.bias))
}

/// Edge update for one tier: `φ(De^{-1/2} Aᵀ Dv^{-1/2} X Θ + b)`.
pub fn dense_conv_edges(
    nodes: &DMatrix<f64>,
    inc: &Incidence,
    mask: LevelMask,
    note_tier: bool,
    layer: &LayerParams,
) -> DMatrix<f64> {
    let (a_n, a_t) = dense_incidence(inc, mask);
    let dv = inv_sqrt_degrees((0..a_n.nrows()).map(|v| a_n.row(v).sum() + a_t.row(v).sum()));
    let a = if note_tier { a_n } else { a_t };
    let de = inv_sqrt_degrees((0..a.ncols()).map(|e| a.column(e).sum()));
    let pre = &de * a.transpose() * &dv * nodes * weight(layer, nodes.ncols());
    relu(add_bias(pre, &layer.bias))
}

/// Sinusoidal hour code computed independently of the library.
pub fn sinusoid(hour: f64, dim: usize) -> Vec<f64> {
    let p = hour.floor();
    (0..dim)
        .map(|c| {
            let rate = 10000f64.powf((2 * (c / 2)) as f64 / dim as f64);
            if c % 2 == 0 {
                (p / rate).sin()
            } else {
                (p / rate).cos()
            }
        })
        .collect()
}

pub struct DenseState {
    pub nodes: DMatrix<f64>,
    pub notes: DMatrix<f64>,
    pub taxes: DMatrix<f64>,
}

/// Eval-mode forward pass written with dense matrices only.
pub fn dense_forward(b: &BatchedHypergraph, params: &ModelParams) -> (Vec<DenseState>, Vec<f64>) {
    let d_word = params.dims.d_word;
    let scale = b.scale;
    let frac = |v: usize, max: usize| v as f64 / max.max(1) as f64;
    let mut notes = DMatrix::zeros(b.notes.len(), 4 + d_word);
    for (j, e) in b.notes.iter().enumerate() {
        notes[(j, 0)] = 1.0;
        notes[(j, 1)] = -1.0;
        notes[(j, 2)] = frac(e.ordinal, scale.max_note_index);
        notes[(j, 3)] = frac(e.taxonomy_index, scale.max_taxonomy_index);
        let he = sinusoid(e.hour, d_word);
        for c in 0..d_word {
            notes[(j, 4 + c)] = params.edges.note_table.get(e.ordinal, c) + he[c];
        }
    }
    let table = na(&params.edges.taxonomy_table);
    let mte = relu(add_bias(
        &table * na(&params.edges.taxonomy_weight),
        &params.edges.taxonomy_bias,
    ));
    let mut taxes = DMatrix::zeros(b.taxonomies.len(), 4 + d_word);
    for (k, &t) in b.taxonomies.iter().enumerate() {
        taxes[(k, 0)] = 2.0;
        taxes[(k, 1)] = -1.0;
        taxes[(k, 2)] = -1.0;
        taxes[(k, 3)] = frac(t, scale.max_taxonomy_index);
        for c in 0..d_word {
            taxes[(k, 4 + c)] = mte[(t, c)];
        }
    }
    let mut states = vec![DenseState {
        nodes: na(&b.node_features),
        notes,
        taxes,
    }];
    for (&kind, layer) in params.variant.stages.iter().zip(&params.stages) {
        let s = states.last().expect("state");
        let mask = match kind {
            StageKind::Global => LevelMask::All,
            StageKind::Note => LevelMask::NoteOnly,
            StageKind::Taxonomy => LevelMask::TaxonomyOnly,
        };
        let node_notes = if kind == StageKind::Taxonomy {
            DMatrix::zeros(0, 0)
        } else {
            s.notes.clone()
        };
        let node_taxes = if kind == StageKind::Note {
            DMatrix::zeros(0, 0)
        } else {
            s.taxes.clone()
        };
        let nodes = dense_conv_nodes(&node_notes, &node_taxes, &b.incidence, mask, layer);
        let notes = if kind == StageKind::Taxonomy {
            s.notes.clone()
        } else {
            dense_conv_edges(&s.nodes, &b.incidence, mask, true, layer)
        };
        let taxes = if kind == StageKind::Note {
            s.taxes.clone()
        } else {
            dense_conv_edges(&s.nodes, &b.incidence, mask, false, layer)
        };
        states.push(DenseState {
            nodes,
            notes,
            taxes,
        });
    }
    let last = &states.last().expect("state").nodes;
    let mut pool = DMatrix::zeros(b.graph_sizes.len(), b.n_nodes());
    for (v, &g) in b.membership.iter().enumerate() {
        pool[(g, v)] = 1.0 / b.graph_sizes[g] as f64;
    }
    let logits = pool * last * na(&params.classifier_weight);
    let bias = params.classifier_bias.get(0, 0);
    let probs = logits
        .iter()
        .map(|z| 1.0 / (1.0 + (-(z + bias)).exp()))
        .collect();
    (states, probs)
}
