use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use super::{LatentModel, Method, SparseRatings};
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlsConfig {
    pub k: usize,
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once the relative objective decrease over a full sweep drops below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for AlsConfig {
    fn default() -> Self {
        Self {
            k: 20,
            lambda: 0.1,
            max_iters: 30,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

/// A fitted model plus the objective after every half-step (users, then items).
#[derive(Debug, Clone)]
pub struct AlsFit {
    pub model: LatentModel,
    pub objective_trace: Vec<f64>,
}

/// Squared error on observed entries plus `lambda (|U|^2 + |V|^2)`.
pub fn als_objective(ratings: &SparseRatings, users: &DMatrix<f64>, items: &DMatrix<f64>, lambda: f64) -> f64 {
    let sq: f64 = ratings
        .entries()
        .iter()
        .map(|&(i, j, r)| {
            let p = users.row(i).transpose().dot(&items.column(j));
            (r - p) * (r - p)
        })
        .sum();
    sq + lambda * (users.norm_squared() + items.norm_squared())
}

/// Ridge solve `(sum v v^T + lambda I)^-1 sum r v` for one row or column.
fn ridge_solve<'a>(
    k: usize,
    lambda: f64,
    observations: impl Iterator<Item = (nalgebra::DVectorView<'a, f64>, f64)>,
) -> DVector<f64> {
    let mut gram = DMatrix::<f64>::identity(k, k) * lambda;
    let mut rhs = DVector::<f64>::zeros(k);
    for (v, r) in observations {
        gram.ger(1.0, &v, &v, 1.0);
        rhs.axpy(r, &v, 1.0);
    }
    // lambda > 0 keeps the gram matrix positive definite
    match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(k)),
    }
}

/// Alternating least squares on the observed entries only.
///
/// Each half-step is an exact block minimization of [`als_objective`], so
/// the recorded trace never increases (up to rounding).
pub fn als_fit(ratings: &SparseRatings, config: &AlsConfig) -> Result<AlsFit> {
    let (m, n, k) = (ratings.n_rows(), ratings.n_cols(), config.k);
    if k == 0 || k > m.min(n) {
        return Err(Error::InvalidArgument(format!("k={k} must lie in 1..={}", m.min(n))));
    }
    if config.max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    if !(config.lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", config.lambda)));
    }

    let mut by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(i, j, r) in ratings.entries() {
        by_row[i].push((j, r));
        by_col[j].push((i, r));
    }

    let mut rng = seeded(config.seed);
    let bound = 0.5 / (k as f64).sqrt();
    let mut items = DMatrix::from_fn(k, n, |_, _| rng.random_range(-bound..=bound));
    let mut users = DMatrix::<f64>::zeros(m, k);
    let mut trace = Vec::with_capacity(2 * config.max_iters);

    for _ in 0..config.max_iters {
        let rows: Vec<DVector<f64>> = by_row
            .par_iter()
            .map(|obs| ridge_solve(k, config.lambda, obs.iter().map(|&(j, r)| (items.column(j), r))))
            .collect();
        for (i, u) in rows.iter().enumerate() {
            users.set_row(i, &u.transpose());
        }
        trace.push(als_objective(ratings, &users, &items, config.lambda));

        let user_t = users.transpose();
        let cols: Vec<DVector<f64>> = by_col
            .par_iter()
            .map(|obs| ridge_solve(k, config.lambda, obs.iter().map(|&(i, r)| (user_t.column(i), r))))
            .collect();
        for (j, v) in cols.iter().enumerate() {
            items.set_column(j, v);
        }
        let objective = als_objective(ratings, &users, &items, config.lambda);
        trace.push(objective);

        if trace.len() >= 4 {
            let prev = trace[trace.len() - 3];
            if (prev - objective) <= config.tolerance * prev.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        }
    }

    let model = LatentModel {
        users,
        items,
        lambda: config.lambda,
        method: Method::Als,
        seed: config.seed,
    };
    model.validate()?;
    Ok(AlsFit {
        model,
        objective_trace: trace,
    })
}
