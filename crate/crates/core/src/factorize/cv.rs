use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{als_fit, mean_predictor, svd_fit, AlsConfig, Method, SparseRatings, SvdConfig};
use crate::error::{Error, Result};
use crate::rng::{derive_indexed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub method: Method,
    pub fold_mse: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across folds.
    pub sd: f64,
}

/// Shuffle observed entries and deal them round-robin into `folds` parts.
pub(crate) fn split_folds(ratings: &SparseRatings, folds: usize, seed: u64) -> Vec<Vec<(usize, usize, f64)>> {
    let mut order: Vec<usize> = (0..ratings.len()).collect();
    order.shuffle(&mut seeded(seed));
    let mut parts = vec![Vec::new(); folds];
    for (pos, idx) in order.into_iter().enumerate() {
        parts[pos % folds].push(ratings.entries()[idx]);
    }
    parts
}

/// K-fold held-out MSE. Predictions are clipped to the observed reward range.
pub fn cross_validate(
    ratings: &SparseRatings,
    method: Method,
    k: usize,
    lambda: f64,
    folds: usize,
    seed: u64,
) -> Result<CvResult> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {folds}")));
    }
    let (lo, hi) = ratings
        .value_range()
        .ok_or_else(|| Error::EmptyDataset("no observed ratings".into()))?;
    let parts = split_folds(ratings, folds, seed);
    if parts.iter().any(Vec::is_empty) {
        return Err(Error::InsufficientData(format!(
            "{} observations cannot fill {folds} folds",
            ratings.len()
        )));
    }

    let mut fold_mse = Vec::with_capacity(folds);
    for (f, held_out) in parts.iter().enumerate() {
        let train = ratings.subset(
            parts
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, p)| p.iter().copied())
                .collect(),
        );
        let fold_seed = derive_indexed(seed, f as u64);
        let predict: Box<dyn Fn(usize, usize) -> f64> = match method {
            Method::Mean => {
                let mean = mean_predictor(&train)?.mean;
                Box::new(move |_, _| mean)
            }
            Method::Als => {
                let cfg = AlsConfig { k, lambda, seed: fold_seed, ..Default::default() };
                let model = als_fit(&train, &cfg)?.model;
                Box::new(move |i, j| model.predict(i, j))
            }
            Method::Svd => {
                let cfg = SvdConfig { k, lambda, seed: fold_seed, ..Default::default() };
                let model = svd_fit(&train, &cfg)?;
                Box::new(move |i, j| model.predict(i, j))
            }
        };
        let sse: f64 = held_out
            .iter()
            .map(|&(i, j, r)| (predict(i, j).clamp(lo, hi) - r).powi(2))
            .sum();
        fold_mse.push(sse / held_out.len() as f64);
    }

    let mean = fold_mse.iter().sum::<f64>() / folds as f64;
    let var = fold_mse.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (folds - 1) as f64;
    Ok(CvResult {
        method,
        fold_mse,
        mean,
        sd: var.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn folds_partition_observations() {
        let trip = (0..7).flat_map(|i| (0..9).map(move |j| (i, j, (i * j) as f64)));
        let ratings = SparseRatings::new(7, 9, trip).unwrap();
        let parts = split_folds(&ratings, 10, 4);
        let merged = ratings.subset(parts.into_iter().flatten().collect());
        assert_eq!(merged, ratings);
    }

    #[test]
    fn exact_low_rank_data_has_near_zero_error() {
        let u: Vec<f64> = (0..12).map(|i| 1.0 + (i % 4) as f64 * 0.5).collect();
        let v: Vec<f64> = (0..10).map(|j| 0.5 + (j % 3) as f64 * 0.25).collect();
        let trip: Vec<_> = (0..12).flat_map(|i| (0..10).map(move |j| (i, j))).map(|(i, j)| (i, j, u[i] * v[j])).collect();
        let ratings = SparseRatings::new(12, 10, trip).unwrap();
        let cv = cross_validate(&ratings, Method::Als, 1, 1e-6, 5, 2).unwrap();
        assert!(cv.mean < 1e-4, "{cv:?}");
    }

    #[test]
    fn mean_predictor_on_bernoulli_approaches_variance() {
        let p = 0.3;
        let mut rng = seeded(17);
        let mut trip = Vec::new();
        for i in 0..200 {
            for j in 0..100 {
                trip.push((i, j, if rng.random_bool(p) { 1.0 } else { 0.0 }));
            }
        }
        let ratings = SparseRatings::new(200, 100, trip).unwrap();
        let cv = cross_validate(&ratings, Method::Mean, 1, 0.1, 10, 1).unwrap();
        // analytic p(1-p) = 0.21; 20k draws give a standard error near 0.002
        assert!((cv.mean - p * (1.0 - p)).abs() < 0.01, "{}", cv.mean);
    }

    #[test]
    fn too_few_observations_for_folds() {
        let ratings = SparseRatings::new(3, 3, [(0, 0, 1.0), (1, 1, 0.0)]).unwrap();
        assert!(matches!(
            cross_validate(&ratings, Method::Mean, 1, 0.1, 3, 0),
            Err(Error::InsufficientData(_))
        ));
    }
}
