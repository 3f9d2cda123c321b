use nalgebra::{DMatrix, DVector, SVD};
use rand_distr::{Distribution, StandardNormal};

use super::{LatentModel, Method, SparseRatings};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Matrices with both sides at most this size are decomposed densely.
pub const DENSE_SVD_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdConfig {
    pub k: usize,
    /// Carried into the model for the downstream state solve; the SVD itself is unregularized.
    pub lambda: f64,
    pub seed: u64,
    pub dense_limit: usize,
    pub oversample: usize,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for SvdConfig {
    fn default() -> Self {
        Self {
            k: 20,
            lambda: 0.1,
            seed: 0,
            dense_limit: DENSE_SVD_LIMIT,
            oversample: 10,
            max_iters: 300,
            tolerance: 1e-12,
        }
    }
}

/// Truncated SVD of the filled rating matrix.
///
/// Unobserved cells take `ratings.default_value`. Singular values are folded
/// into the user factor, so item vectors are orthonormal rows of `V`.
/// Components whose singular value is numerically zero are zeroed out.
pub fn svd_fit(ratings: &SparseRatings, config: &SvdConfig) -> Result<LatentModel> {
    let (m, n, k) = (ratings.n_rows(), ratings.n_cols(), config.k);
    if k == 0 || k > m.min(n) {
        return Err(Error::InvalidArgument(format!("k={k} must lie in 1..={}", m.min(n))));
    }
    let (mut left, sigma, mut right) = if m.max(n) <= config.dense_limit {
        dense_top_k(&ratings.to_dense(), k)
    } else {
        subspace_top_k(ratings, config)
    };

    let floor = sigma.first().copied().unwrap_or(0.0) * 1e-12;
    let mut dropped = 0;
    for c in 0..k {
        if sigma[c] <= floor {
            left.column_mut(c).fill(0.0);
            right.row_mut(c).fill(0.0);
            dropped += 1;
        } else {
            left.column_mut(c).scale_mut(sigma[c]);
        }
    }
    if dropped > 0 {
        log::warn!("svd: matrix rank below k={k}; {dropped} zero components padded");
    }

    let model = LatentModel {
        users: left,
        items: right,
        lambda: config.lambda,
        method: Method::Svd,
        seed: config.seed,
    };
    model.validate()?;
    Ok(model)
}

fn dense_top_k(a: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = SVD::new(a.clone(), true, true);
    let u = svd.u.expect("requested u");
    let vt = svd.v_t.expect("requested v_t");
    (
        u.columns(0, k).into_owned(),
        svd.singular_values.iter().take(k).copied().collect(),
        vt.rows(0, k).into_owned(),
    )
}

/// `A x` for the implicit filled matrix `A = f 1 1^T + S`, where `S` holds
/// `r - f` at observed cells.
struct FilledOperator<'a> {
    ratings: &'a SparseRatings,
}

impl FilledOperator<'_> {
    fn fill(&self) -> f64 {
        self.ratings.default_value
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.product(x, self.ratings.n_rows(), false)
    }

    fn apply_t(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        self.product(y, self.ratings.n_cols(), true)
    }

    fn product(&self, x: &DMatrix<f64>, out_rows: usize, transpose: bool) -> DMatrix<f64> {
        let f = self.fill();
        let mut out = DMatrix::zeros(out_rows, x.ncols());
        for c in 0..x.ncols() {
            let src = x.column(c);
            let mut dst = out.column_mut(c);
            if f != 0.0 {
                dst.fill(f * src.sum());
            }
            for &(i, j, r) in self.ratings.entries() {
                let (to, from) = if transpose { (j, i) } else { (i, j) };
                dst[to] += (r - f) * src[from];
            }
        }
        out
    }
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

/// Randomized subspace iteration run until the top-k singular values settle.
fn subspace_top_k(ratings: &SparseRatings, config: &SvdConfig) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let op = FilledOperator { ratings };
    let (m, n, k) = (ratings.n_rows(), ratings.n_cols(), config.k);
    let p = (k + config.oversample).min(m.min(n));
    let mut rng = seeded(config.seed);
    let omega = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormalize(op.apply(&omega));
    let mut previous: Option<DVector<f64>> = None;

    for iter in 0..config.max_iters {
        // B^T = A^T Q, so B = Q^T A
        let bt = op.apply_t(&q);
        let small = SVD::new(bt.transpose(), true, true);
        let sigma = small.singular_values.rows(0, k).into_owned();
        let settled = previous.as_ref().is_some_and(|prev| {
            (prev - &sigma).amax() <= config.tolerance * sigma[0].max(f64::MIN_POSITIVE)
        });
        if settled || iter + 1 == config.max_iters {
            let ub = small.u.expect("requested u");
            let vt = small.v_t.expect("requested v_t");
            let left = &q * ub.columns(0, k);
            return (left, sigma.iter().copied().collect(), vt.rows(0, k).into_owned());
        }
        previous = Some(sigma);
        let z = orthonormalize(bt);
        q = orthonormalize(op.apply(&z));
    }
    unreachable!("loop returns on its final iteration")
}
