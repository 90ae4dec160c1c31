mod common;

use common::{
    dense_conv_edges, dense_conv_nodes, dense_forward, fixture, max_abs_diff, na, random_params,
};
use mlhgnn::hypergraph::{batch, LevelMask};
use mlhgnn::model::{conv_edges, conv_nodes, forward, EdgeBlocks, EdgeLevel, Mode, VARIANT_NAMES};
use mlhgnn::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

#[test]
fn convolutions_match_dense_formulation() {
    let fx = fixture(21, 20, 5, false);
    let params = random_params(&fx.graphs, 6, "full", 1);
    let layer = &params.stages[0];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for g in &fx.graphs {
        let inc = &g.incidence;
        let d = g.d_in();
        let notes = Matrix::gaussian(inc.n_notes(), d, 1.0, &mut rng);
        let taxes = Matrix::gaussian(inc.n_taxonomies(), d, 1.0, &mut rng);
        for mask in [LevelMask::All, LevelMask::NoteOnly, LevelMask::TaxonomyOnly] {
            let got = conv_nodes(&notes, &taxes, inc, mask, layer).unwrap();
            let empty = nalgebra::DMatrix::zeros(0, 0);
            let n_in = if mask.admits_notes() {
                na(&notes)
            } else {
                empty.clone()
            };
            let t_in = if mask.admits_taxonomies() {
                na(&taxes)
            } else {
                empty
            };
            let want = dense_conv_nodes(&n_in, &t_in, inc, mask, layer);
            assert!(max_abs_diff(&want, &got) < TOL, "{mask:?}");

            let blocks = EdgeBlocks {
                notes: notes.clone(),
                taxonomies: taxes.clone(),
            };
            for level in [EdgeLevel::Note, EdgeLevel::Taxonomy] {
                let out = conv_edges(&blocks, &g.node_features, inc, mask, level, layer).unwrap();
                let note_tier = level == EdgeLevel::Note;
                let want = dense_conv_edges(&na(&g.node_features), inc, mask, note_tier, layer);
                let (got, other, other_in) = if note_tier {
                    (&out.notes, &out.taxonomies, &taxes)
                } else {
                    (&out.taxonomies, &out.notes, &notes)
                };
                assert!(max_abs_diff(&want, got) < TOL, "{mask:?} {level:?}");
                assert_eq!(other, other_in);
            }
        }
    }
}

#[test]
fn forward_matches_dense_formulation_for_every_variant() {
    let fx = fixture(22, 20, 5, false);
    for (vi, variant) in VARIANT_NAMES.iter().enumerate() {
        let params = random_params(&fx.graphs, 7, variant, vi as u64);
        for g in &fx.graphs {
            let b = batch(&[g]).unwrap();
            let trace = forward(&b, &params, Mode::Eval).unwrap();
            let (states, probs) = dense_forward(&b, &params);
            for (k, (s, d)) in trace.states.iter().zip(&states).enumerate() {
                assert!(
                    max_abs_diff(&d.nodes, &s.nodes) < TOL,
                    "{variant} stage {k} nodes"
                );
                assert!(
                    max_abs_diff(&d.notes, &s.notes) < TOL,
                    "{variant} stage {k} notes"
                );
                assert!(
                    max_abs_diff(&d.taxes, &s.taxonomies) < TOL,
                    "{variant} stage {k} taxonomies"
                );
            }
            assert!((probs[0] - trace.probabilities[0]).abs() < TOL);
        }
    }
}

#[test]
fn batched_forward_matches_dense_formulation() {
    let fx = fixture(23, 8, 4, false);
    let params = random_params(&fx.graphs, 5, "full", 9);
    let refs: Vec<_> = fx.graphs.iter().collect();
    let b = batch(&refs).unwrap();
    let trace = forward(&b, &params, Mode::Eval).unwrap();
    let (_, probs) = dense_forward(&b, &params);
    for (a, d) in trace.probabilities.iter().zip(&probs) {
        assert!((a - d).abs() < TOL);
    }
}
