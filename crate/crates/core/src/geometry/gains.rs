use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::{forward, MlpSpec, ParamVector, Predictions};

/// Fraction of rows on which the predicted labels of `p` and `q` differ.
pub fn diversity(p: &Predictions, q: &Predictions) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::InvalidArgument("diversity of empty predictions".into()));
    }
    let differ = p.labels().iter().zip(q.labels()).filter(|(a, b)| a != b).count();
    Ok(differ as f64 / p.len() as f64)
}

/// `½Err(p1) + ½Err(p2) − Err(ensemble)`, the ensemble averaging probabilities.
pub fn ensemble_gain_of(p1: &Predictions, p2: &Predictions, y: &[usize]) -> Result<f64> {
    let e1 = p1.error_rate(y)?;
    let e2 = p2.error_rate(y)?;
    let ens = p1.average(p2)?.error_rate(y)?;
    Ok(0.5 * e1 + 0.5 * e2 - ens)
}

/// Error reduction from ensembling two networks on `(x, y)`.
pub fn ensemble_gain(
    w1: &ParamVector,
    w2: &ParamVector,
    spec: &MlpSpec,
    x: &Tensor,
    y: &[usize],
) -> Result<f64> {
    let p1 = forward(w1, spec, x, None, 0)?;
    let p2 = forward(w2, spec, x, None, 0)?;
    ensemble_gain_of(&p1, &p2, y)
}

/// Error reduction from averaging the weights of two networks on `(x, y)`.
///
/// Nonnegative along a segment on which the error is convex.
pub fn average_gain(
    w1: &ParamVector,
    w2: &ParamVector,
    spec: &MlpSpec,
    x: &Tensor,
    y: &[usize],
) -> Result<f64> {
    let mid = w1.interpolate(w2, 0.5)?;
    let e1 = forward(w1, spec, x, None, 0)?.error_rate(y)?;
    let e2 = forward(w2, spec, x, None, 0)?.error_rate(y)?;
    let em = forward(&mid, spec, x, None, 0)?.error_rate(y)?;
    Ok(0.5 * e1 + 0.5 * e2 - em)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_mlp;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn diversity_extremes() {
        let a = Predictions::from_labels(&[0, 1, 1, 0], 2).unwrap();
        let b = Predictions::from_labels(&[1, 0, 0, 1], 2).unwrap();
        assert_eq!(diversity(&a, &a).unwrap(), 0.0);
        assert_eq!(diversity(&a, &b).unwrap(), 1.0);
        let c = Predictions::from_labels(&[0], 2).unwrap();
        assert!(matches!(diversity(&a, &c), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn ensembling_fixes_both_mistakes() {
        // each model is wrong on a different point, but only barely
        let p1 = Predictions::new(vec![0.4, 0.6, 0.1, 0.9], 2).unwrap();
        let p2 = Predictions::new(vec![0.9, 0.1, 0.6, 0.4], 2).unwrap();
        let y = [0, 1];
        assert_eq!(p1.error_rate(&y).unwrap(), 0.5);
        assert_eq!(p2.error_rate(&y).unwrap(), 0.5);
        // enumerate the ensemble rows by hand: (0.65, 0.35) and (0.35, 0.65)
        let ens = p1.average(&p2).unwrap();
        assert_eq!(ens.labels(), &[0, 1]);
        assert_eq!(ensemble_gain_of(&p1, &p2, &y).unwrap(), 0.5);
    }

    #[test]
    fn gains_vanish_for_identical_weights() {
        let spec = MlpSpec::new(vec![2, 5, 3], 0.0).unwrap();
        let w = init_mlp(&spec, 4);
        let mut rng = stream_rng(4, Stream::Test, 0);
        let x = Tensor::matrix(30, 2, (0..60).map(|_| rng.random_range(-3.0..3.0)).collect())
            .unwrap();
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        assert_eq!(ensemble_gain(&w, &w, &spec, &x, &y).unwrap(), 0.0);
        assert_eq!(average_gain(&w, &w, &spec, &x, &y).unwrap(), 0.0);
    }

    #[test]
    fn averaging_gain_is_nonnegative_for_convex_loss() {
        // linear model under squared loss: Jensen on the loss itself
        let mut rng = stream_rng(8, Stream::Test, 0);
        let x: Vec<[f64; 3]> = (0..40)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let t: Vec<f64> = x.iter().map(|r| r[0] - 2.0 * r[1] + 0.5 * r[2]).collect();
        let loss = |w: &[f64]| -> f64 {
            x.iter()
                .zip(&t)
                .map(|(r, t)| {
                    let f: f64 = r.iter().zip(w).map(|(a, b)| a * b).sum();
                    (f - t) * (f - t)
                })
                .sum::<f64>()
                / x.len() as f64
        };
        for _ in 0..100 {
            let w1: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let w2: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mid: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
            assert!(0.5 * loss(&w1) + 0.5 * loss(&w2) - loss(&mid) >= -1e-12);
        }
    }

    fn labels(n: usize) -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(0usize..3, n)
    }

    proptest! {
        #[test]
        fn diversity_is_a_metric(a in labels(12), b in labels(12), c in labels(12)) {
            let p = Predictions::from_labels(&a, 3).unwrap();
            let q = Predictions::from_labels(&b, 3).unwrap();
            let r = Predictions::from_labels(&c, 3).unwrap();
            let pq = diversity(&p, &q).unwrap();
            prop_assert_eq!(pq, diversity(&q, &p).unwrap());
            prop_assert!((0.0..=1.0).contains(&pq));
            prop_assert!(diversity(&p, &r).unwrap() <= pq + diversity(&q, &r).unwrap() + 1e-15);
        }
    }
}
