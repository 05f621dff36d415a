//! Desk-scale sample-quality metrics in the feature space of [`FeatureNet`].
//!
//! Values are only comparable between runs that share a feature net and a
//! reference set.

mod featurenet;

pub use featurenet::{train_feature_classifier, FeatureNet, FeatureNetConfig, FeatureNetParams, FEATURE_DIM};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

pub const COV_RIDGE: f64 = 1e-6;
pub const DESK_NOTE: &str = "desk-scale metrics in a project-trained feature space; not comparable to Inception-based values";

/// Sample mean and unbiased covariance of `n × dim` row-major features.
pub fn moments(feats: &[f64], dim: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if dim == 0 || feats.len() % dim != 0 {
        return Err(Error::Contract("feature buffer is not a whole number of rows".into()));
    }
    let n = feats.len() / dim;
    if n < 2 {
        return Err(Error::Domain("moments need at least two samples".into()));
    }
    let x = DMatrix::from_row_slice(n, dim, feats);
    let mu = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians. A ridge of [`COV_RIDGE`] is added
/// to both covariances; `Tr (Σ_a Σ_b)^{1/2}` comes from the eigenvalues of
/// `Σ_a^{1/2} Σ_b Σ_a^{1/2}` with negative ones clamped to zero.
pub fn frechet_from_moments(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::Contract("moment shapes disagree".into()));
    }
    let ridge = DMatrix::<f64>::identity(d, d) * COV_RIDGE;
    let sa = cov_a + &ridge;
    let sb = cov_b + &ridge;
    let root_a = sym_sqrt(&sa);
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let trace_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + sa.trace() + sb.trace() - 2.0 * trace_sqrt;
    if !value.is_finite() {
        return Err(Error::Contract("Fréchet distance is not finite".into()));
    }
    Ok(value.max(0.0))
}

/// Fréchet distance between two `n × dim` feature sets; each side needs more
/// than `dim` samples.
pub fn frechet_distance(feats_a: &[f64], feats_b: &[f64], dim: usize) -> Result<f64> {
    for (name, f) in [("first", feats_a), ("second", feats_b)] {
        if dim == 0 || f.len() / dim < dim + 1 {
            return Err(Error::Domain(format!("{name} feature set has fewer than {} samples", dim + 1)));
        }
    }
    let (ma, ca) = moments(feats_a, dim)?;
    let (mb, cb) = moments(feats_b, dim)?;
    frechet_from_moments(&ma, &ca, &mb, &cb)
}

/// `exp(mean_x KL(p(y|x) ‖ p(y)))` over `M × C` class probabilities, clamped
/// to its mathematical range `[1, C]` against rounding.
pub fn inception_score_analog(probs: &[f64], c: usize) -> Result<f64> {
    if c == 0 || probs.len() % c != 0 || probs.is_empty() {
        return Err(Error::Contract("class probabilities are not whole rows".into()));
    }
    let m = probs.len() / c;
    for row in probs.chunks(c) {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-5 || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Contract(format!("row sums to {sum}, not a probability vector")));
        }
    }
    let mut marginal = vec![0.0; c];
    for row in probs.chunks(c) {
        marginal.iter_mut().zip(row).for_each(|(a, &p)| *a += p / m as f64);
    }
    let kl: f64 = probs
        .chunks(c)
        .map(|row| row.iter().zip(&marginal).filter(|(&p, _)| p > 0.0).map(|(&p, &q)| p * (p / q).ln()).sum::<f64>())
        .sum::<f64>()
        / m as f64;
    Ok(kl.exp().clamp(1.0, c as f64))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared radius of each point's k-NN ball within its own set (self excluded).
fn knn_radii(feats: &[f64], dim: usize, k: usize) -> Vec<f64> {
    let n = feats.len() / dim;
    (0..n)
        .map(|i| {
            let a = &feats[i * dim..(i + 1) * dim];
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(a, &feats[j * dim..(j + 1) * dim])).collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn coverage(support: &[f64], radii: &[f64], queries: &[f64], dim: usize) -> f64 {
    let n = queries.len() / dim;
    let inside = (0..n)
        .filter(|&q| {
            let x = &queries[q * dim..(q + 1) * dim];
            radii.iter().enumerate().any(|(i, &r)| sq_dist(x, &support[i * dim..(i + 1) * dim]) <= r)
        })
        .count();
    inside as f64 / n as f64
}

/// k-NN manifold precision and recall. Precision is the fraction of generated
/// points inside some real point's k-NN ball; recall swaps the roles.
pub fn precision_recall(real: &[f64], generated: &[f64], dim: usize, k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::Domain("k must be positive".into()));
    }
    for (name, f) in [("real", real), ("generated", generated)] {
        if dim == 0 || f.len() % dim != 0 {
            return Err(Error::Contract(format!("{name} features are not whole rows")));
        }
        if f.len() / dim < k + 1 {
            return Err(Error::Domain(format!("{name} set has fewer than {} samples", k + 1)));
        }
    }
    let real_r = knn_radii(real, dim, k);
    let gen_r = knn_radii(generated, dim, k);
    Ok((coverage(real, &real_r, generated, dim), coverage(generated, &gen_r, real, dim)))
}

/// Evaluation record for one set of generated images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub desk_fid: f64,
    pub desk_is: f64,
    pub precision: f64,
    pub recall: f64,
    pub num_generated: usize,
    pub num_reference: usize,
    pub feature_net_accuracy: f64,
    #[serde(default)]
    pub generator_digest: String,
    #[serde(default)]
    pub adapter_digest: Option<String>,
    #[serde(default)]
    pub config_digest: String,
    pub note: String,
}

/// Reference statistics computed once and reused across evaluations.
#[derive(Debug, Clone)]
pub struct ReferenceStats {
    pub feats: Vec<f64>,
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl ReferenceStats {
    pub fn new(net: &FeatureNet, reference: &[Image]) -> Result<Self> {
        let (feats, _) = net.embed(reference)?;
        if feats.len() / FEATURE_DIM < FEATURE_DIM + 1 {
            return Err(Error::Domain(format!("reference set needs at least {} images", FEATURE_DIM + 1)));
        }
        let (mu, cov) = moments(&feats, FEATURE_DIM)?;
        Ok(Self { feats, mu, cov })
    }

    pub fn len(&self) -> usize {
        self.feats.len() / FEATURE_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }
}

/// Scores `generated` against the reference set.
pub fn evaluate(net: &FeatureNet, reference: &ReferenceStats, generated: &[Image], k: usize) -> Result<MetricsReport> {
    let (feats, probs) = net.embed(generated)?;
    if feats.len() / FEATURE_DIM < FEATURE_DIM + 1 {
        return Err(Error::Domain(format!("need at least {} generated images", FEATURE_DIM + 1)));
    }
    let (mu, cov) = moments(&feats, FEATURE_DIM)?;
    let desk_fid = frechet_from_moments(&reference.mu, &reference.cov, &mu, &cov)?;
    let desk_is = inception_score_analog(&probs, net.num_classes())?;
    let (precision, recall) = precision_recall(&reference.feats, &feats, FEATURE_DIM, k)?;
    Ok(MetricsReport {
        desk_fid,
        desk_is,
        precision,
        recall,
        num_generated: generated.len(),
        num_reference: reference.len(),
        feature_net_accuracy: net.accuracy,
        generator_digest: String::new(),
        adapter_digest: None,
        config_digest: String::new(),
        note: DESK_NOTE.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::tensor::Tensor;
    use proptest::prelude::{prop, prop_assert, proptest};

    #[test]
    fn identical_sets_have_zero_distance() {
        let x = Tensor::<f64>::randn(&[300, 8], 1.0, &mut stream(0, Stream::Init)).data;
        assert!(frechet_distance(&x, &x, 8).unwrap() < 1e-6);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let d = frechet_from_moments(&DVector::from_element(1, 0.0), &one, &DVector::from_element(1, 1.0), &one).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        // (μ₁−μ₂)² + (σ₁−σ₂)² with σ = 1 and 2
        let four = DMatrix::from_element(1, 1, 4.0);
        let d = frechet_from_moments(&DVector::from_element(1, 0.0), &one, &DVector::from_element(1, 0.0), &four).unwrap();
        assert!((d - 1.0).abs() < 1e-5);
    }

    #[test]
    fn symmetric_in_arguments() {
        let mut rng = stream(1, Stream::Init);
        let a = Tensor::<f64>::randn(&[80, 5], 1.0, &mut rng).data;
        let b: Vec<f64> = Tensor::<f64>::randn(&[90, 5], 2.0, &mut rng).data.iter().map(|v| v + 0.3).collect();
        let ab = frechet_distance(&a, &b, 5).unwrap();
        let ba = frechet_distance(&b, &a, 5).unwrap();
        assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
        assert!(matches!(frechet_distance(&a[..25], &b, 5), Err(Error::Domain(_))));
    }

    #[test]
    fn inception_score_identities() {
        assert!((inception_score_analog(&[0.25; 8], 4).unwrap() - 1.0).abs() < 1e-12);
        let mut onehot = vec![0.0; 100];
        for i in 0..10 {
            onehot[i * 10 + i] = 1.0;
        }
        assert!((inception_score_analog(&onehot, 10).unwrap() - 10.0).abs() < 1e-9);
        assert!((inception_score_analog(&[1.0, 0.0, 0.0, 1.0], 2).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(inception_score_analog(&[0.5, 0.4], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn precision_recall_edge_cases() {
        let x = Tensor::<f64>::randn(&[40, 3], 1.0, &mut stream(2, Stream::Init)).data;
        assert_eq!(precision_recall(&x, &x, 3, 3).unwrap(), (1.0, 1.0));
        let far: Vec<f64> = x.iter().map(|v| v + 1e6).collect();
        assert_eq!(precision_recall(&x, &far, 3, 3).unwrap().0, 0.0);
        assert!(matches!(precision_recall(&x[..9], &x, 3, 3), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn inception_score_stays_in_range(raw in prop::collection::vec(0.0f64..1.0, 4 * 6), peaked in 0usize..4) {
            let mut probs = raw.clone();
            for (r, row) in probs.chunks_mut(4).enumerate() {
                if r == 0 { row[peaked] += 5.0; }
                let z: f64 = row.iter().sum::<f64>().max(1e-12);
                if z <= 1e-12 { row.iter_mut().for_each(|v| *v = 0.25); } else { row.iter_mut().for_each(|v| *v /= z); }
            }
            let s = inception_score_analog(&probs, 4).unwrap();
            prop_assert!((1.0..=4.0).contains(&s));
        }

        #[test]
        fn frechet_is_non_negative(seed in 0u64..500, shift in -2.0f64..2.0) {
            let mut rng = stream(seed, Stream::Init);
            let a = Tensor::<f64>::randn(&[12, 3], 1.0, &mut rng).data;
            let b: Vec<f64> = Tensor::<f64>::randn(&[15, 3], 0.5, &mut rng).data.iter().map(|v| v + shift).collect();
            prop_assert!(frechet_distance(&a, &b, 3).unwrap() >= 0.0);
        }
    }
}
