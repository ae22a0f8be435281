//! Oracles shared by unit tests.

use malenia_tensor::{Graph, Tensor, Var};

use crate::alignment::PairSets;

/// Asserts that analytic gradients of the scalar `f` match central
/// differences with norm-relative error below `tol`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, tol: f64)
where
    F: for<'g> Fn(&[Var<'g, f64>]) -> Var<'g, f64>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let mut grads = g.backward(f(&vars));
    let eval = |xs: &[Tensor<f64>]| {
        let g = Graph::inference();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        f(&vars).item()
    };
    let h = 1e-5;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.take(vars[i]).unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut num = vec![0.0; t.len()];
        for (k, slot) in num.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= h;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = num.iter().zip(analytic.data()).map(|(a, b)| a - b).collect();
        let scale = norm(&num).max(norm(analytic.data()));
        let err = if scale > 1e-7 { norm(&diff) / scale } else { norm(&diff) };
        assert!(err < tol, "input {i}: relative error {err}");
    }
}

/// Term-by-term MP-NCE without any stabilisation.
pub fn naive_mp_nce(s: &Tensor<f64>, pairs: &PairSets) -> f64 {
    let mut total = 0.0;
    for j in 0..pairs.len() {
        let row = s.row(j);
        let zneg: f64 = pairs.negatives[j].iter().map(|&n| row[n].exp()).sum();
        let mut inner = 0.0;
        for &p in &pairs.positives[j] {
            inner += (row[p].exp() / (row[p].exp() + zneg)).ln();
        }
        total += inner / pairs.positives[j].len() as f64;
    }
    -total / pairs.len() as f64
}

/// A small configuration and a few 32³ samples of two seen classes.
pub fn tiny_setup() -> (crate::pipeline::Config, Vec<crate::phantom::Sample>) {
    let mut config = crate::pipeline::Config::default();
    config.model.tokens = 4;
    config.model.dim = 8;
    config.model.text_dim = 16;
    config.data.seen = vec!["Kidney Stone".into(), "Pancreas Cyst".into()];
    config.data.train_per_class = 1;
    config.train.epochs = 1;
    config.train.lr = 1e-3;
    let samples = crate::pipeline::generate_training_set(&config.data, &crate::phantom::ClassCatalog::default())
        .expect("tiny dataset");
    (config, samples)
}

pub fn tiny_model<T: malenia_tensor::Scalar>(config: &crate::pipeline::Config) -> crate::pipeline::Malenia<T> {
    let provider = crate::pipeline::default_provider(config);
    crate::pipeline::Malenia::new(&config.model, crate::attributes::AttributeSchema::default_schema(), &provider, 3)
        .expect("tiny model")
}
