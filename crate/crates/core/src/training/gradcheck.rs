//! Central finite-difference check of the hand-written reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch_loss;
use crate::corpus::{EmbeddingTable, PatientRecord, RawNote, TaxonomyTable, Vocab};
use crate::error::Result;
use crate::hypergraph::{
    batch, construct, BatchedHypergraph, FeatureScale, GraphContext, PatientHypergraph,
};
use crate::model::{
    apply_variant, backward, forward, Gradients, Mode, ModelDims, ModelParams, VARIANT_NAMES,
};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub d_word: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub step: f64,
    pub variants: Vec<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            d_word: 6,
            hidden: 8,
            dropout: 0.3,
            step: 1e-4,
            variants: VARIANT_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub variant: String,
    pub tensor: String,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub tensors: Vec<TensorCheck>,
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// A random patient with two notes in two taxonomies and at most ten
/// distinct tokens.
pub fn random_graph(rng: &mut impl Rng, d_word: usize) -> Result<PatientHypergraph> {
    let vocab =
        Vocab::from_tokens((0..10).map(|i| ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"][i]));
    let taxonomies = TaxonomyTable::new(vec!["t0".into(), "t1".into(), "t2".into()]);
    let embeddings = EmbeddingTable::random(vocab.len(), d_word, rng.random());
    let note = |i: usize, tax: &str, hour: f64, rng: &mut dyn rand::RngCore| {
        let len = rng.random_range(3..=5);
        let text: Vec<&str> = (0..len)
            .map(|_| vocab.tokens()[rng.random_range(0..vocab.len())].as_str())
            .collect();
        RawNote {
            note_id: format!("n{i}"),
            taxonomy: tax.into(),
            hour,
            text: text.join(" "),
        }
    };
    let h0 = rng.random_range(0.0..24.0);
    let h1 = h0 + rng.random_range(0.0..24.0);
    let first_tax = rng.random_range(0..3);
    let second_tax = (first_tax + rng.random_range(1..3)) % 3;
    let record = PatientRecord {
        patient_id: "gradcheck".into(),
        label: u8::from(rng.random::<bool>()),
        notes: vec![
            note(0, taxonomies.names()[first_tax].as_str(), h0, rng),
            note(1, taxonomies.names()[second_tax].as_str(), h1, rng),
        ],
    };
    let ctx = GraphContext {
        vocab: &vocab,
        embeddings: &embeddings,
        taxonomies: &taxonomies,
        scale: FeatureScale::new(vocab.len(), 4, taxonomies.len()),
        lowercase: true,
    };
    construct(&record, &ctx)
}

fn loss_at(b: &BatchedHypergraph, params: &ModelParams, mode: Mode) -> Result<f64> {
    let trace = forward(b, params, mode)?;
    Ok(batch_loss(&trace.probabilities, &b.labels).0)
}

/// Analytic gradients of the mean BCE loss.
pub fn analytic_gradients(
    b: &BatchedHypergraph,
    params: &ModelParams,
    mode: Mode,
) -> Result<Gradients> {
    let trace = forward(b, params, mode)?;
    let (_, dlogits) = batch_loss(&trace.probabilities, &b.labels);
    backward(&trace, b, params, &dlogits)
}

pub fn grad_check(config: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(config, seed, analytic_gradients)
}

/// Same as [`grad_check`] with a caller-supplied gradient routine, so a
/// deliberately broken backward can be shown to fail.
pub fn grad_check_with<F>(
    config: &GradCheckConfig,
    seed: u64,
    gradients: F,
) -> Result<GradCheckReport>
where
    F: Fn(&BatchedHypergraph, &ModelParams, Mode) -> Result<Gradients>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = random_graph(&mut rng, config.d_word)?;
    let b = batch(&[&graph])?;
    let mode = Mode::Train { seed: rng.random() };
    let dims = ModelDims {
        d_word: config.d_word,
        hidden: config.hidden,
        max_notes: graph.scale.max_note_index + 1,
        max_taxonomies: graph.scale.max_taxonomy_index + 1,
    };

    let mut tensors = Vec::new();
    let mut worst = 0.0f64;
    for name in &config.variants {
        let mut params = ModelParams::init(dims, apply_variant(name)?, config.dropout, &mut rng)?;
        // Nonzero biases so every bias path is exercised.
        for layer in &mut params.stages {
            layer
                .bias
                .as_mut_slice()
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.05..0.05));
        }
        let tax_bias = params.edges.taxonomy_bias.as_mut_slice();
        tax_bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.05..0.05));

        let grads = gradients(&b, &params, mode)?;
        let names = params.tensor_names();
        let n_tensors = names.len();
        for (ti, tensor_name) in names.into_iter().enumerate() {
            let len = params.tensors()[ti].as_slice().len();
            let mut tensor_worst = 0.0f64;
            for k in 0..len {
                let original = params.tensors()[ti].as_slice()[k];
                params.tensors_mut()[ti].as_mut_slice()[k] = original + config.step;
                let plus = loss_at(&b, &params, mode)?;
                params.tensors_mut()[ti].as_mut_slice()[k] = original - config.step;
                let minus = loss_at(&b, &params, mode)?;
                params.tensors_mut()[ti].as_mut_slice()[k] = original;
                let numeric = (plus - minus) / (2.0 * config.step);
                let analytic = grads.tensors()[ti].as_slice()[k];
                tensor_worst = tensor_worst.max(relative_error(analytic, numeric));
            }
            worst = worst.max(tensor_worst);
            tensors.push(TensorCheck {
                variant: name.clone(),
                tensor: tensor_name,
                max_relative_error: tensor_worst,
            });
        }
        debug_assert_eq!(n_tensors, params.tensors().len());
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        tensors,
    })
}
