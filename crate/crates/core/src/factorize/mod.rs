//! Matrix factorization back-ends that turn the sparse reward matrix into
//! user and item latent vectors.
//!
//! Two learners are provided: alternating least squares over the observed
//! entries only ([`als_fit`]) and a truncated SVD of the filled matrix
//! ([`svd_fit`]). A constant [`MeanPredictor`] serves as the reference
//! baseline in cross-validation.

mod als;
mod cv;
mod svd;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Dataset;

pub use als::{als_fit, als_objective, AlsConfig, AlsFit};
pub use cv::{cross_validate, CvResult};
pub use svd::{svd_fit, SvdConfig, DENSE_SVD_LIMIT};

/// Observed entries of the `m x n` reward matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRatings {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<(usize, usize, f64)>,
    /// Value assumed for unobserved cells by methods that need a full matrix.
    pub default_value: f64,
}

impl SparseRatings {
    /// Build from triplets. Duplicate cells keep the last value written.
    pub fn new(n_rows: usize, n_cols: usize, triplets: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut cells = BTreeMap::new();
        for (i, j, r) in triplets {
            if i >= n_rows || j >= n_cols {
                return Err(Error::InvalidArgument(format!(
                    "entry ({i}, {j}) outside a {n_rows}x{n_cols} matrix"
                )));
            }
            if !r.is_finite() {
                return Err(Error::NonFinite(format!("rating at ({i}, {j})")));
            }
            cells.insert((i, j), r);
        }
        Ok(Self {
            n_rows,
            n_cols,
            entries: cells.into_iter().map(|((i, j), r)| (i, j, r)).collect(),
            default_value: 0.0,
        })
    }

    /// Rows are users, columns items; a repeated (user, item) keeps the latest reward.
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let triplets = dataset
            .logs
            .iter()
            .enumerate()
            .flat_map(|(u, log)| log.events.iter().map(move |e| (u, e.item, e.reward)));
        Self::new(dataset.n_users(), dataset.n_items(), triplets)
    }

    pub fn with_default(mut self, value: f64) -> Self {
        self.default_value = value;
        self
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Observed entries sorted by (row, column).
    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.entries.iter().map(|e| e.2).sum::<f64>() / self.len() as f64)
    }

    pub fn value_range(&self) -> Option<(f64, f64)> {
        (!self.is_empty()).then(|| {
            self.entries
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e.2), hi.max(e.2)))
        })
    }

    /// Same shape and default, different observed set.
    pub(crate) fn subset(&self, entries: Vec<(usize, usize, f64)>) -> Self {
        let mut entries = entries;
        entries.sort_by_key(|e| (e.0, e.1));
        Self {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            entries,
            default_value: self.default_value,
        }
    }

    /// Dense matrix with unobserved cells set to `default_value`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::from_element(self.n_rows, self.n_cols, self.default_value);
        for &(i, j, r) in &self.entries {
            m[(i, j)] = r;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Als,
    Svd,
    Mean,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Als => "als",
            Method::Svd => "svd",
            Method::Mean => "mean",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "als" => Ok(Method::Als),
            "svd" => Ok(Method::Svd),
            "mean" => Ok(Method::Mean),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

/// User matrix `U` (`m x k`) and item matrix `V` (`k x n`); predictions are `U V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentModel {
    pub users: DMatrix<f64>,
    pub items: DMatrix<f64>,
    pub lambda: f64,
    pub method: Method,
    pub seed: u64,
}

impl LatentModel {
    pub fn k(&self) -> usize {
        self.items.nrows()
    }

    pub fn n_users(&self) -> usize {
        self.users.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.items.ncols()
    }

    pub fn item_vector(&self, item: usize) -> DVector<f64> {
        self.items.column(item).into_owned()
    }

    pub fn predict(&self, user: usize, item: usize) -> f64 {
        self.users.row(user).transpose().dot(&self.items.column(item))
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.users * &self.items
    }

    pub fn validate(&self) -> Result<()> {
        if self.users.ncols() != self.items.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.items.nrows(),
                actual: self.users.ncols(),
            });
        }
        if self.k() == 0 {
            return Err(Error::InvalidArgument("latent dimension must be at least 1".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.users.iter().chain(self.items.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent model entry".into()));
        }
        Ok(())
    }
}

/// Predicts the training mean for every cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanPredictor {
    pub mean: f64,
}

pub fn mean_predictor(ratings: &SparseRatings) -> Result<MeanPredictor> {
    ratings
        .mean()
        .map(|mean| MeanPredictor { mean })
        .ok_or_else(|| Error::EmptyDataset("no observed ratings".into()))
}
