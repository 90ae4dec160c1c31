//! Hierarchical message passing over multi-level hypergraphs.
//!
//! A model is a schedule of stages. Each stage owns one weight matrix that
//! is shared by the node update and the hyperedge updates it performs:
//!
//! | stage      | node update aggregates | note edges      | taxonomy edges  |
//! |------------|------------------------|-----------------|-----------------|
//! | `Global`   | all hyperedges         | from nodes      | from nodes      |
//! | `Note`     | note hyperedges        | from nodes      | copied          |
//! | `Taxonomy` | taxonomy hyperedges    | copied          | from nodes      |
//!
//! Every update reads the previous stage's outputs. Convolutions use the
//! symmetric normalization `1 / (sqrt(d_v) sqrt(d_e))` with degrees taken
//! under the stage's mask. After the last stage, word-node embeddings are
//! mean-pooled per graph and fed to a linear classifier and a sigmoid.
//!
//! `backward` is the exact reverse pass of `forward`, written out by hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::{
    degrees, init_note_edge, init_taxonomy_edge, taxonomy_pre_activation, BatchedHypergraph,
    Degrees, EdgeInitParams, Incidence, LevelMask, META_WIDTH,
};
use crate::tensor::Matrix;

/// Standard deviation of the Gaussian used for weight initialization.
pub const INIT_STD: f64 = 0.1;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    Global,
    Note,
    Taxonomy,
}

impl StageKind {
    pub fn mask(self) -> LevelMask {
        match self {
            StageKind::Global => LevelMask::All,
            StageKind::Note => LevelMask::NoteOnly,
            StageKind::Taxonomy => LevelMask::TaxonomyOnly,
        }
    }

    pub fn updates_notes(self) -> bool {
        matches!(self, StageKind::Global | StageKind::Note)
    }

    pub fn updates_taxonomies(self) -> bool {
        matches!(self, StageKind::Global | StageKind::Taxonomy)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: String,
    pub stages: Vec<StageKind>,
}

pub const VARIANT_NAMES: [&str; 5] = ["full", "wo_note", "wo_taxonomy", "wo_global", "homogeneous"];

pub fn apply_variant(name: &str) -> Result<VariantConfig> {
    use StageKind::*;
    let stages = match name {
        "full" => vec![Global, Note, Taxonomy],
        "wo_note" => vec![Global, Global, Taxonomy],
        "wo_taxonomy" => vec![Global, Note, Global],
        "wo_global" => vec![Note, Taxonomy],
        "homogeneous" => vec![Global, Global, Global],
        _ => {
            return Err(Error::UnknownVariant {
                name: name.to_string(),
                valid: VARIANT_NAMES.join(", "),
            })
        }
    };
    Ok(VariantConfig {
        name: name.to_string(),
        stages,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
    /// Used by tests to compare against linear oracles.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One stage's parameters. `weight` maps the stage's node input width to
/// the hidden width; `raw_weight` is present only when the stage also reads
/// a hyperedge block that still has the raw input width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Matrix,
    pub bias: Matrix,
    pub raw_weight: Option<Matrix>,
    #[serde(default)]
    pub activation: Activation,
}

impl LayerParams {
    pub fn new(weight: Matrix, bias: Matrix) -> Self {
        Self {
            weight,
            bias,
            raw_weight: None,
            activation: Activation::Relu,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// The weight that consumes inputs of width `width`.
    pub fn weight_for(&self, width: usize) -> Result<&Matrix> {
        if self.weight.rows() == width {
            return Ok(&self.weight);
        }
        match &self.raw_weight {
            Some(w) if w.rows() == width => Ok(w),
            _ => Err(Error::Shape(format!(
                "no weight accepts input width {width} (weight is {}x{})",
                self.weight.rows(),
                self.weight.cols()
            ))),
        }
    }

    fn weight_for_mut(&mut self, width: usize) -> &mut Matrix {
        if self.weight.rows() == width {
            return &mut self.weight;
        }
        self.raw_weight
            .as_mut()
            .filter(|w| w.rows() == width)
            .expect("gradient layout mirrors params")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_word: usize,
    pub hidden: usize,
    pub max_notes: usize,
    pub max_taxonomies: usize,
}

impl ModelDims {
    pub fn d_in(&self) -> usize {
        META_WIDTH + self.d_word
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub variant: VariantConfig,
    pub stages: Vec<LayerParams>,
    pub edges: EdgeInitParams,
    /// `hidden × 1`
    pub classifier_weight: Matrix,
    /// `1 × 1`
    pub classifier_bias: Matrix,
    pub dropout: f64,
}

/// Input widths seen by each stage: `(node width, raw width if a hyperedge
/// block read by the stage still has a different width)`.
fn stage_input_widths(
    stages: &[StageKind],
    d_in: usize,
    hidden: usize,
) -> Vec<(usize, Option<usize>)> {
    let (mut h, mut n, mut t) = (d_in, d_in, d_in);
    stages
        .iter()
        .map(|&kind| {
            let mut consumed = Vec::new();
            if kind.mask().admits_notes() {
                consumed.push(n);
            }
            if kind.mask().admits_taxonomies() {
                consumed.push(t);
            }
            let raw = consumed.into_iter().find(|&w| w != h);
            let shape = (h, raw);
            h = hidden;
            if kind.updates_notes() {
                n = hidden;
            }
            if kind.updates_taxonomies() {
                t = hidden;
            }
            shape
        })
        .collect()
}

impl ModelParams {
    /// Gaussian(0, 0.1) weights and embedding tables, zero biases.
    pub fn init<R: Rng + ?Sized>(
        dims: ModelDims,
        variant: VariantConfig,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if variant.stages.is_empty() || variant.stages.len() > 3 {
            return Err(Error::InvalidArgument(format!(
                "schedule must have 1-3 stages, got {}",
                variant.stages.len()
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must be in [0, 1), got {dropout}"
            )));
        }
        if dims.d_word == 0 || dims.hidden == 0 || dims.max_notes == 0 || dims.max_taxonomies == 0 {
            return Err(Error::InvalidArgument(
                "model dimensions must be >= 1".into(),
            ));
        }
        let stages = stage_input_widths(&variant.stages, dims.d_in(), dims.hidden)
            .into_iter()
            .map(|(main, raw)| LayerParams {
                weight: Matrix::gaussian(main, dims.hidden, INIT_STD, rng),
                bias: Matrix::zeros(1, dims.hidden),
                raw_weight: raw.map(|w| Matrix::gaussian(w, dims.hidden, INIT_STD, rng)),
                activation: Activation::Relu,
            })
            .collect();
        let edges = EdgeInitParams {
            note_table: Matrix::gaussian(dims.max_notes, dims.d_word, INIT_STD, rng),
            taxonomy_table: Matrix::gaussian(dims.max_taxonomies, dims.d_word, INIT_STD, rng),
            taxonomy_weight: Matrix::gaussian(dims.d_word, dims.d_word, INIT_STD, rng),
            taxonomy_bias: Matrix::zeros(1, dims.d_word),
        };
        Ok(Self {
            dims,
            variant,
            stages,
            edges,
            classifier_weight: Matrix::gaussian(dims.hidden, 1, INIT_STD, rng),
            classifier_bias: Matrix::zeros(1, 1),
            dropout,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// All trainable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.push(&s.weight);
            out.push(&s.bias);
            if let Some(w) = &s.raw_weight {
                out.push(w);
            }
        }
        out.extend([
            &self.edges.note_table,
            &self.edges.taxonomy_table,
            &self.edges.taxonomy_weight,
            &self.edges.taxonomy_bias,
            &self.classifier_weight,
            &self.classifier_bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
            if let Some(w) = &mut s.raw_weight {
                out.push(w);
            }
        }
        out.extend([
            &mut self.edges.note_table,
            &mut self.edges.taxonomy_table,
            &mut self.edges.taxonomy_weight,
            &mut self.edges.taxonomy_bias,
            &mut self.classifier_weight,
            &mut self.classifier_bias,
        ]);
        out
    }

    /// Names parallel to `tensors()`.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push(format!("stage{i}.weight"));
            out.push(format!("stage{i}.bias"));
            if s.raw_weight.is_some() {
                out.push(format!("stage{i}.raw_weight"));
            }
        }
        out.extend(
            [
                "note_table",
                "taxonomy_table",
                "taxonomy_weight",
                "taxonomy_bias",
                "classifier_weight",
                "classifier_bias",
            ]
            .map(String::from),
        );
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.as_slice().len()).sum()
    }

    fn check_shapes(&self) -> Result<()> {
        let expect = stage_input_widths(&self.variant.stages, self.dims.d_in(), self.dims.hidden);
        if expect.len() != self.stages.len() {
            return Err(Error::Shape(format!(
                "{} stage layers for a {}-stage schedule",
                self.stages.len(),
                expect.len()
            )));
        }
        for (i, ((main, raw), layer)) in expect.iter().zip(&self.stages).enumerate() {
            let raw_rows = layer.raw_weight.as_ref().map(Matrix::rows);
            if layer.weight.shape() != (*main, self.dims.hidden)
                || layer.bias.shape() != (1, self.dims.hidden)
                || raw_rows != *raw
            {
                return Err(Error::Shape(format!(
                    "stage {i} parameters do not match the schedule"
                )));
            }
        }
        if self.classifier_weight.shape() != (self.dims.hidden, 1) {
            return Err(Error::Shape("classifier weight".into()));
        }
        Ok(())
    }
}

/// Same layout as [`ModelParams`], holding dL/dθ.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub ModelParams);

impl Gradients {
    pub fn zeros_for(params: &ModelParams) -> Self {
        Gradients(params.zeros_like())
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.0.tensors()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.as_slice().iter())
            .fold(0.0, |a, &b| a.max(b.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from `seed`.
    Train {
        seed: u64,
    },
}

/// Node and hyperedge embeddings between stages.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub nodes: Matrix,
    pub notes: Matrix,
    pub taxonomies: Matrix,
}

/// Hyperedge blocks, for the edge convolution entry point.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeBlocks {
    pub notes: Matrix,
    pub taxonomies: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeLevel {
    Note,
    Taxonomy,
}

/// Per-update intermediates kept for the reverse pass.
#[derive(Debug, Clone, PartialEq)]
struct UpdateTrace {
    /// Normalized neighbour sums feeding an edge update; empty for node
    /// updates, whose inputs are the stage's hyperedge blocks.
    aggregates: Vec<Matrix>,
    pre: Matrix,
    /// Inverted-dropout multipliers (0 or 1/(1-p)), train mode only.
    dropout: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    pub kind: StageKind,
    node: UpdateTrace,
    note: Option<UpdateTrace>,
    taxonomy: Option<UpdateTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `states[0]` is the input; `states[k + 1]` is the output of stage `k`.
    pub states: Vec<BlockState>,
    pub stages: Vec<StageTrace>,
    /// Taxonomy-edge MLP pre-activations, `s × d_word`.
    taxonomy_pre: Matrix,
    /// Mean-pooled word-node embeddings per graph, `B × hidden`.
    pub pooled: Matrix,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ForwardTrace {
    pub fn final_state(&self) -> &BlockState {
        self.states.last().expect("at least the input state")
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn coefficient(deg_node: f64, deg_edge: f64) -> f64 {
    1.0 / (deg_node.sqrt() * deg_edge.sqrt())
}

/// `out[v] = Σ_{e ∈ edges(v)} feats[e] / (sqrt(d_v) sqrt(d_e))`
fn aggregate_to_nodes(
    feats: &Matrix,
    node_edges: &[Vec<usize>],
    deg_node: &[f64],
    deg_edge: &[f64],
) -> Matrix {
    let mut out = Matrix::zeros(node_edges.len(), feats.cols());
    for (v, edges) in node_edges.iter().enumerate() {
        let row = out.row_mut(v);
        for &e in edges {
            let c = coefficient(deg_node[v], deg_edge[e]);
            for (o, x) in row.iter_mut().zip(feats.row(e)) {
                *o += c * x;
            }
        }
    }
    out
}

/// `out[e] = Σ_{v ∈ members(e)} feats[v] / (sqrt(d_v) sqrt(d_e))`
fn aggregate_to_edges(
    feats: &Matrix,
    members: &[Vec<usize>],
    deg_node: &[f64],
    deg_edge: &[f64],
) -> Matrix {
    let mut out = Matrix::zeros(members.len(), feats.cols());
    for (e, nodes) in members.iter().enumerate() {
        let row = out.row_mut(e);
        for &v in nodes {
            let c = coefficient(deg_node[v], deg_edge[e]);
            for (o, x) in row.iter_mut().zip(feats.row(v)) {
                *o += c * x;
            }
        }
    }
    out
}

/// `pre = Σ_b agg_b · W(width_b) + bias`
fn affine(aggregates: &[Matrix], layer: &LayerParams, rows: usize) -> Result<Matrix> {
    let mut pre = Matrix::zeros(rows, layer.out_dim());
    for agg in aggregates {
        pre.add_assign(&agg.matmul(layer.weight_for(agg.cols())?));
    }
    pre.add_row_broadcast(layer.bias.as_slice());
    Ok(pre)
}

fn activate(pre: &Matrix, act: Activation) -> Matrix {
    let mut out = pre.clone();
    out.map_inplace(|x| act.apply(x));
    out
}

/// Node pre-activations. Each hyperedge block is projected first and then
/// spread to its nodes, which is cheaper than projecting per node because
/// hyperedges are far fewer than nodes.
fn node_pre(
    notes: &Matrix,
    taxonomies: &Matrix,
    incidence: &Incidence,
    deg: &Degrees,
    mask: LevelMask,
    layer: &LayerParams,
) -> Result<Matrix> {
    let mut pre = Matrix::zeros(incidence.n_nodes(), layer.out_dim());
    if mask.admits_notes() {
        let proj = notes.matmul(layer.weight_for(notes.cols())?);
        pre.add_assign(&aggregate_to_nodes(
            &proj,
            &incidence.node_notes,
            &deg.node,
            &deg.note,
        ));
    }
    if mask.admits_taxonomies() {
        let proj = taxonomies.matmul(layer.weight_for(taxonomies.cols())?);
        pre.add_assign(&aggregate_to_nodes(
            &proj,
            &incidence.node_taxonomies,
            &deg.node,
            &deg.taxonomy,
        ));
    }
    pre.add_row_broadcast(layer.bias.as_slice());
    Ok(pre)
}

/// Normalized member sums for one tier; zero when the mask excludes it.
fn edge_aggregate(
    nodes: &Matrix,
    incidence: &Incidence,
    deg: &Degrees,
    mask: LevelMask,
    level: EdgeLevel,
) -> Matrix {
    match level {
        EdgeLevel::Note if mask.admits_notes() => {
            aggregate_to_edges(nodes, &incidence.note_members, &deg.node, &deg.note)
        }
        EdgeLevel::Taxonomy if mask.admits_taxonomies() => {
            aggregate_to_edges(nodes, &incidence.taxonomy_members, &deg.node, &deg.taxonomy)
        }
        EdgeLevel::Note => Matrix::zeros(incidence.n_notes(), nodes.cols()),
        EdgeLevel::Taxonomy => Matrix::zeros(incidence.n_taxonomies(), nodes.cols()),
    }
}

fn check_rows(what: &str, m: &Matrix, rows: usize) -> Result<()> {
    if m.rows() != rows {
        return Err(Error::Shape(format!(
            "{what}: expected {rows} rows, got {}",
            m.rows()
        )));
    }
    Ok(())
}

/// Node convolution: every node aggregates the unmasked hyperedges it
/// belongs to. Nodes with no unmasked hyperedge get `φ(bias)`.
pub fn conv_nodes(
    note_feats: &Matrix,
    taxonomy_feats: &Matrix,
    incidence: &Incidence,
    mask: LevelMask,
    layer: &LayerParams,
) -> Result<Matrix> {
    check_rows("note features", note_feats, incidence.n_notes())?;
    check_rows(
        "taxonomy features",
        taxonomy_feats,
        incidence.n_taxonomies(),
    )?;
    let deg = degrees(incidence, mask);
    let pre = node_pre(note_feats, taxonomy_feats, incidence, &deg, mask, layer)?;
    Ok(activate(&pre, layer.activation))
}

/// Hyperedge convolution for one tier; the other tier is returned as is.
pub fn conv_edges(
    edges: &EdgeBlocks,
    node_feats: &Matrix,
    incidence: &Incidence,
    mask: LevelMask,
    level: EdgeLevel,
    layer: &LayerParams,
) -> Result<EdgeBlocks> {
    check_rows("node features", node_feats, incidence.n_nodes())?;
    let deg = degrees(incidence, mask);
    let agg = edge_aggregate(node_feats, incidence, &deg, mask, level);
    let rows = agg.rows();
    let updated = activate(&affine(&[agg], layer, rows)?, layer.activation);
    let mut out = edges.clone();
    match level {
        EdgeLevel::Note => out.notes = updated,
        EdgeLevel::Taxonomy => out.taxonomies = updated,
    }
    Ok(out)
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn apply_update(
    pre: Matrix,
    act: Activation,
    mode_rng: Option<(&mut ChaCha8Rng, f64)>,
) -> (Matrix, UpdateTrace) {
    let mut out = activate(&pre, act);
    let mut dropout = None;
    if let Some((rng, p)) = mode_rng {
        if p > 0.0 {
            let mask = dropout_mask(out.rows(), out.cols(), p, rng);
            for (o, m) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *o *= m;
            }
            dropout = Some(mask);
        }
    }
    (
        out,
        UpdateTrace {
            aggregates: Vec::new(),
            pre,
            dropout,
        },
    )
}

/// Initial hyperedge features for the batch: `[meta ∥ MNE + HE]` for notes
/// and `[meta ∥ ReLU(MTE)]` for taxonomies.
fn initial_edges(
    batch: &BatchedHypergraph,
    params: &ModelParams,
) -> Result<(Matrix, Matrix, Matrix)> {
    let d_in = params.dims.d_in();
    let mut notes = Matrix::zeros(batch.notes.len(), d_in);
    for (j, edge) in batch.notes.iter().enumerate() {
        notes
            .row_mut(j)
            .copy_from_slice(&init_note_edge(edge, &batch.scale, &params.edges)?);
    }
    let mut taxonomies = Matrix::zeros(batch.taxonomies.len(), d_in);
    let mut pre = Matrix::zeros(batch.taxonomies.len(), params.dims.d_word);
    for (k, &t) in batch.taxonomies.iter().enumerate() {
        taxonomies
            .row_mut(k)
            .copy_from_slice(&init_taxonomy_edge(t, &batch.scale, &params.edges)?);
        pre.row_mut(k)
            .copy_from_slice(&taxonomy_pre_activation(t, &params.edges)?);
    }
    Ok((notes, taxonomies, pre))
}

pub fn forward(
    batch: &BatchedHypergraph,
    params: &ModelParams,
    mode: Mode,
) -> Result<ForwardTrace> {
    params.check_shapes()?;
    if batch.d_in() != params.dims.d_in() {
        return Err(Error::Shape(format!(
            "batch feature width {} but model expects {}",
            batch.d_in(),
            params.dims.d_in()
        )));
    }
    for &kind in &params.variant.stages {
        if kind.mask().admits_notes() && batch.notes.is_empty() {
            return Err(Error::Contract(
                "schedule needs note hyperedges but the batch has none".into(),
            ));
        }
        if kind.mask().admits_taxonomies() && batch.taxonomies.is_empty() {
            return Err(Error::Contract(
                "schedule needs taxonomy hyperedges but the batch has none".into(),
            ));
        }
    }

    let incidence = &batch.incidence;
    let (notes0, taxonomies0, taxonomy_pre) = initial_edges(batch, params)?;
    let mut rng = match mode {
        Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Mode::Eval => None,
    };
    let p = params.dropout;

    let mut states = vec![BlockState {
        nodes: batch.node_features.clone(),
        notes: notes0,
        taxonomies: taxonomies0,
    }];
    let mut stage_traces = Vec::with_capacity(params.stages.len());
    let all_masks = [LevelMask::All, LevelMask::NoteOnly, LevelMask::TaxonomyOnly];
    let degree_cache: Vec<Degrees> = all_masks.iter().map(|&m| degrees(incidence, m)).collect();
    let deg_for =
        |m: LevelMask| &degree_cache[all_masks.iter().position(|&x| x == m).expect("mask")];

    for (&kind, layer) in params.variant.stages.iter().zip(&params.stages) {
        let input = states.last().expect("state");
        let mask = kind.mask();
        let deg = deg_for(mask);

        let pre = node_pre(&input.notes, &input.taxonomies, incidence, deg, mask, layer)?;
        let (nodes, node_trace) = apply_update(pre, layer.activation, rng.as_mut().map(|r| (r, p)));

        let mut edge_update = |level: EdgeLevel| -> Result<(Matrix, UpdateTrace)> {
            let agg = edge_aggregate(&input.nodes, incidence, deg, mask, level);
            let pre = affine(std::slice::from_ref(&agg), layer, agg.rows())?;
            let (out, mut trace) =
                apply_update(pre, layer.activation, rng.as_mut().map(|r| (r, p)));
            trace.aggregates = vec![agg];
            Ok((out, trace))
        };
        let (notes, note_trace) = if kind.updates_notes() {
            let (m, t) = edge_update(EdgeLevel::Note)?;
            (m, Some(t))
        } else {
            (input.notes.clone(), None)
        };
        let (taxonomies, taxonomy_trace) = if kind.updates_taxonomies() {
            let (m, t) = edge_update(EdgeLevel::Taxonomy)?;
            (m, Some(t))
        } else {
            (input.taxonomies.clone(), None)
        };

        stage_traces.push(StageTrace {
            kind,
            node: node_trace,
            note: note_trace,
            taxonomy: taxonomy_trace,
        });
        states.push(BlockState {
            nodes,
            notes,
            taxonomies,
        });
    }

    let final_nodes = &states.last().expect("state").nodes;
    let hidden = final_nodes.cols();
    let mut pooled = Matrix::zeros(batch.n_graphs(), hidden);
    for (v, &g) in batch.membership.iter().enumerate() {
        let row = pooled.row_mut(g);
        for (o, x) in row.iter_mut().zip(final_nodes.row(v)) {
            *o += x;
        }
    }
    for (g, &n) in batch.graph_sizes.iter().enumerate() {
        let inv = 1.0 / n.max(1) as f64;
        pooled.row_mut(g).iter_mut().for_each(|x| *x *= inv);
    }
    let bias = params.classifier_bias.get(0, 0);
    let logits: Vec<f64> = pooled
        .matmul(&params.classifier_weight)
        .as_slice()
        .iter()
        .map(|z| z + bias)
        .collect();
    let probabilities = logits.iter().map(|&z| sigmoid(z)).collect();

    Ok(ForwardTrace {
        states,
        stages: stage_traces,
        taxonomy_pre,
        pooled,
        logits,
        probabilities,
    })
}

/// `dpre = upstream ⊙ dropout ⊙ φ'(pre)`
fn pre_gradient(upstream: &Matrix, trace: &UpdateTrace, act: Activation) -> Matrix {
    let mut d = upstream.clone();
    let drop = trace.dropout.as_ref().map(Matrix::as_slice);
    for (i, (g, pre)) in d
        .as_mut_slice()
        .iter_mut()
        .zip(trace.pre.as_slice())
        .enumerate()
    {
        let m = drop.map_or(1.0, |m| m[i]);
        *g *= m * act.derivative(*pre);
    }
    d
}

/// Accumulates weight/bias gradients for one update and returns the
/// gradients with respect to each of its aggregates.
fn affine_backward(
    dpre: &Matrix,
    trace: &UpdateTrace,
    layer: &LayerParams,
    grad: &mut LayerParams,
) -> Result<Vec<Matrix>> {
    grad.bias.add_assign(&dpre.column_sums());
    let mut out = Vec::with_capacity(trace.aggregates.len());
    for agg in &trace.aggregates {
        let w = layer.weight_for(agg.cols())?;
        grad.weight_for_mut(agg.cols())
            .add_assign(&agg.t_matmul(dpre));
        out.push(dpre.matmul_t(w));
    }
    Ok(out)
}

/// Reverse of `proj = input · W`: accumulates `dW` and `d input`.
fn project_backward(
    input: &Matrix,
    dproj: &Matrix,
    layer: &LayerParams,
    grad: &mut LayerParams,
    d_input: &mut Matrix,
) -> Result<()> {
    grad.weight_for_mut(input.cols())
        .add_assign(&input.t_matmul(dproj));
    d_input.add_assign(&dproj.matmul_t(layer.weight_for(input.cols())?));
    Ok(())
}

/// Transpose of `aggregate_to_nodes`: scatter node-side gradients to edges.
fn scatter_nodes_to_edges(
    dagg: &Matrix,
    node_edges: &[Vec<usize>],
    deg_node: &[f64],
    deg_edge: &[f64],
    into: &mut Matrix,
) {
    for (v, edges) in node_edges.iter().enumerate() {
        let g = dagg.row(v);
        for &e in edges {
            let c = coefficient(deg_node[v], deg_edge[e]);
            for (o, x) in into.row_mut(e).iter_mut().zip(g) {
                *o += c * x;
            }
        }
    }
}

/// Transpose of `aggregate_to_edges`: scatter edge-side gradients to nodes.
fn scatter_edges_to_nodes(
    dagg: &Matrix,
    members: &[Vec<usize>],
    deg_node: &[f64],
    deg_edge: &[f64],
    into: &mut Matrix,
) {
    for (e, nodes) in members.iter().enumerate() {
        let g = dagg.row(e);
        for &v in nodes {
            let c = coefficient(deg_node[v], deg_edge[e]);
            for (o, x) in into.row_mut(v).iter_mut().zip(g) {
                *o += c * x;
            }
        }
    }
}

/// Exact gradients of `Σ_g dlogits[g] · logit_g` with respect to every
/// parameter, given a trace from [`forward`] on the same batch and params.
pub fn backward(
    trace: &ForwardTrace,
    batch: &BatchedHypergraph,
    params: &ModelParams,
    dlogits: &[f64],
) -> Result<Gradients> {
    if trace.stages.len() != params.stages.len() || trace.states.len() != params.stages.len() + 1 {
        return Err(Error::Shape(
            "trace does not match the parameter schedule".into(),
        ));
    }
    if dlogits.len() != batch.n_graphs() || trace.logits.len() != batch.n_graphs() {
        return Err(Error::Shape(format!(
            "{} upstream gradients for {} graphs",
            dlogits.len(),
            batch.n_graphs()
        )));
    }
    let mut grads = Gradients::zeros_for(params);
    let g = &mut grads.0;
    let incidence = &batch.incidence;

    // Classifier and mean pooling.
    let hidden = trace.pooled.cols();
    g.classifier_bias.set(0, 0, dlogits.iter().sum());
    let dl = Matrix::from_vec(dlogits.len(), 1, dlogits.to_vec());
    g.classifier_weight = trace.pooled.t_matmul(&dl);
    let w = params.classifier_weight.as_slice();
    let mut d_nodes = Matrix::zeros(batch.n_nodes(), hidden);
    for (v, &gi) in batch.membership.iter().enumerate() {
        let scale = dlogits[gi] / batch.graph_sizes[gi] as f64;
        for (o, wk) in d_nodes.row_mut(v).iter_mut().zip(w) {
            *o = scale * wk;
        }
    }
    let last = trace.final_state();
    let mut d_notes = last.notes.zeros_like();
    let mut d_taxonomies = last.taxonomies.zeros_like();

    for (k, stage) in trace.stages.iter().enumerate().rev() {
        let layer = &params.stages[k];
        let grad_layer = &mut g.stages[k];
        let input = &trace.states[k];
        let mask = stage.kind.mask();
        let deg = degrees(incidence, mask);

        let mut d_in_nodes = input.nodes.zeros_like();
        let mut d_in_notes = input.notes.zeros_like();
        let mut d_in_taxonomies = input.taxonomies.zeros_like();

        // Node update.
        let dpre = pre_gradient(&d_nodes, &stage.node, layer.activation);
        grad_layer.bias.add_assign(&dpre.column_sums());
        if mask.admits_notes() {
            let mut dproj = Matrix::zeros(input.notes.rows(), dpre.cols());
            scatter_nodes_to_edges(
                &dpre,
                &incidence.node_notes,
                &deg.node,
                &deg.note,
                &mut dproj,
            );
            project_backward(&input.notes, &dproj, layer, grad_layer, &mut d_in_notes)?;
        }
        if mask.admits_taxonomies() {
            let mut dproj = Matrix::zeros(input.taxonomies.rows(), dpre.cols());
            scatter_nodes_to_edges(
                &dpre,
                &incidence.node_taxonomies,
                &deg.node,
                &deg.taxonomy,
                &mut dproj,
            );
            project_backward(
                &input.taxonomies,
                &dproj,
                layer,
                grad_layer,
                &mut d_in_taxonomies,
            )?;
        }

        // Note tier: updated from nodes, or copied.
        match &stage.note {
            Some(t) => {
                let dpre = pre_gradient(&d_notes, t, layer.activation);
                let da = affine_backward(&dpre, t, layer, grad_layer)?.remove(0);
                scatter_edges_to_nodes(
                    &da,
                    &incidence.note_members,
                    &deg.node,
                    &deg.note,
                    &mut d_in_nodes,
                );
            }
            None => d_in_notes.add_assign(&d_notes),
        }
        match &stage.taxonomy {
            Some(t) => {
                let dpre = pre_gradient(&d_taxonomies, t, layer.activation);
                let da = affine_backward(&dpre, t, layer, grad_layer)?.remove(0);
                scatter_edges_to_nodes(
                    &da,
                    &incidence.taxonomy_members,
                    &deg.node,
                    &deg.taxonomy,
                    &mut d_in_nodes,
                );
            }
            None => d_in_taxonomies.add_assign(&d_taxonomies),
        }

        d_nodes = d_in_nodes;
        d_notes = d_in_notes;
        d_taxonomies = d_in_taxonomies;
    }

    // Hyperedge initializers; node inputs are fixed word embeddings.
    for (j, edge) in batch.notes.iter().enumerate() {
        let src = &d_notes.row(j)[META_WIDTH..];
        for (o, x) in g.edges.note_table.row_mut(edge.ordinal).iter_mut().zip(src) {
            *o += x;
        }
    }
    let d_word = params.dims.d_word;
    for (k, &t) in batch.taxonomies.iter().enumerate() {
        let dpre: Vec<f64> = d_taxonomies.row(k)[META_WIDTH..]
            .iter()
            .zip(trace.taxonomy_pre.row(k))
            .map(|(d, pre)| if *pre > 0.0 { *d } else { 0.0 })
            .collect();
        for (o, x) in g.edges.taxonomy_bias.row_mut(0).iter_mut().zip(&dpre) {
            *o += x;
        }
        let row = params.edges.taxonomy_table.row(t);
        for (a, &ra) in row.iter().enumerate() {
            for (b, &db) in dpre.iter().enumerate() {
                let cur = g.edges.taxonomy_weight.get(a, b);
                g.edges.taxonomy_weight.set(a, b, cur + ra * db);
            }
        }
        let dtable = Matrix::from_vec(1, d_word, dpre).matmul_t(&params.edges.taxonomy_weight);
        for (o, x) in g
            .edges
            .taxonomy_table
            .row_mut(t)
            .iter_mut()
            .zip(dtable.as_slice())
        {
            *o += x;
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::Incidence;

    fn linear_layer(dim: usize) -> LayerParams {
        LayerParams {
            weight: Matrix::identity(dim),
            bias: Matrix::zeros(1, dim),
            raw_weight: None,
            activation: Activation::Identity,
        }
    }

    fn two_node_incidence() -> Incidence {
        Incidence::from_node_lists(vec![vec![0], vec![0]], vec![vec![0], vec![0]], 1, 1)
    }

    #[test]
    fn variants_map_to_schedules() {
        use StageKind::*;
        assert_eq!(
            apply_variant("full").unwrap().stages,
            vec![Global, Note, Taxonomy]
        );
        assert_eq!(
            apply_variant("homogeneous").unwrap().stages,
            vec![Global, Global, Global]
        );
        assert_eq!(apply_variant("wo_global").unwrap().stages.len(), 2);
        assert_eq!(
            apply_variant("wo_note").unwrap().stages,
            vec![Global, Global, Taxonomy]
        );
        assert_eq!(
            apply_variant("wo_taxonomy").unwrap().stages,
            vec![Global, Note, Global]
        );
        let err = apply_variant("bogus").unwrap_err().to_string();
        assert!(err.contains("full") && err.contains("homogeneous"), "{err}");
    }

    #[test]
    fn zero_edges_zero_bias_give_zero_nodes() {
        let inc = two_node_incidence();
        let mut layer = linear_layer(3);
        layer.activation = Activation::Relu;
        let out = conv_nodes(
            &Matrix::zeros(1, 3),
            &Matrix::zeros(1, 3),
            &inc,
            LevelMask::All,
            &layer,
        )
        .unwrap();
        assert_eq!(out, Matrix::zeros(2, 3));
    }

    #[test]
    fn node_conv_matches_hand_values() {
        let inc = two_node_incidence();
        let note = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let tax = Matrix::from_rows(&[vec![3.0, -1.0]]);
        let layer = linear_layer(2);
        let all = conv_nodes(&note, &tax, &inc, LevelMask::All, &layer).unwrap();
        for v in 0..2 {
            assert!((all.get(v, 0) - 2.0).abs() < 1e-12);
            assert!((all.get(v, 1) - 0.5).abs() < 1e-12);
        }
        let only = conv_nodes(&note, &tax, &inc, LevelMask::NoteOnly, &layer).unwrap();
        let r = 0.5f64.sqrt();
        assert!((only.get(0, 0) - r).abs() < 1e-12 && (only.get(0, 1) - 2.0 * r).abs() < 1e-12);
    }

    #[test]
    fn edge_conv_single_node() {
        let inc = Incidence::from_node_lists(vec![vec![0]], vec![vec![0]], 1, 1);
        let blocks = EdgeBlocks {
            notes: Matrix::zeros(1, 1),
            taxonomies: Matrix::from_rows(&[vec![7.0]]),
        };
        let h = Matrix::from_rows(&[vec![1.0]]);
        let out = conv_edges(
            &blocks,
            &h,
            &inc,
            LevelMask::All,
            EdgeLevel::Note,
            &linear_layer(1),
        )
        .unwrap();
        assert!((out.notes.get(0, 0) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(out.taxonomies, blocks.taxonomies);
    }

    #[test]
    fn edge_conv_zero_nodes_give_bias() {
        let inc = two_node_incidence();
        let mut layer = linear_layer(2);
        layer.bias = Matrix::from_rows(&[vec![0.25, -0.5]]);
        layer.activation = Activation::Relu;
        let blocks = EdgeBlocks {
            notes: Matrix::zeros(1, 2),
            taxonomies: Matrix::from_rows(&[vec![9.0, 9.0]]),
        };
        let out = conv_edges(
            &blocks,
            &Matrix::zeros(2, 2),
            &inc,
            LevelMask::All,
            EdgeLevel::Taxonomy,
            &layer,
        )
        .unwrap();
        assert_eq!(out.taxonomies.as_slice(), &[0.25, 0.0]);
        assert_eq!(out.notes, blocks.notes);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let inc = two_node_incidence();
        let layer = linear_layer(2);
        assert!(conv_nodes(
            &Matrix::zeros(2, 2),
            &Matrix::zeros(1, 2),
            &inc,
            LevelMask::All,
            &layer
        )
        .is_err());
        assert!(conv_nodes(
            &Matrix::zeros(1, 3),
            &Matrix::zeros(1, 3),
            &inc,
            LevelMask::All,
            &layer
        )
        .is_err());
    }

    #[test]
    fn raw_weight_only_where_a_block_lags() {
        let wg = stage_input_widths(&apply_variant("wo_global").unwrap().stages, 10, 4);
        assert_eq!(wg, vec![(10, None), (4, Some(10))]);
        let full = stage_input_widths(&apply_variant("full").unwrap().stages, 10, 4);
        assert_eq!(full, vec![(10, None), (4, None), (4, None)]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
