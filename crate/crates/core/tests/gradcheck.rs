use mlhgnn::hypergraph::BatchedHypergraph;
use mlhgnn::model::{Gradients, Mode, ModelParams};
use mlhgnn::training::{analytic_gradients, grad_check, grad_check_with, GradCheckConfig};

#[test]
fn analytic_matches_finite_differences() {
    let config = GradCheckConfig::default();
    for seed in 0..6 {
        let report = grad_check(&config, seed).unwrap();
        for t in &report.tensors {
            if t.max_relative_error >= 1e-5 {
                eprintln!(
                    "seed {seed} {} {} {:.3e}",
                    t.variant, t.tensor, t.max_relative_error
                );
            }
        }
        assert!(
            report.max_relative_error < 1e-3,
            "seed {seed}: {}",
            report.max_relative_error
        );
    }
}

#[test]
fn broken_backward_is_caught() {
    let broken = |b: &BatchedHypergraph, p: &ModelParams, m: Mode| -> mlhgnn::Result<Gradients> {
        let mut g = analytic_gradients(b, p, m)?;
        for v in g.0.classifier_weight.as_mut_slice() {
            *v *= 1.1;
        }
        Ok(g)
    };
    let report = grad_check_with(&GradCheckConfig::default(), 0, broken).unwrap();
    assert!(report.max_relative_error > 1e-3);
    assert!(report
        .tensors
        .iter()
        .filter(|t| t.max_relative_error > 1e-3)
        .all(|t| t.tensor.contains("classifier")));
}
