//! Exact MMSE noise prediction under a zero-mean Gaussian image prior.
//!
//! For `x = sqrt(a) x0 + sqrt(1 - a) eps` with `x0 ~ N(0, S)` the conditional
//! mean of the noise is `sqrt(1 - a) (a S + (1 - a) I)^-1 x`, and its expected
//! squared error per coordinate is `mean_i a l_i / (a l_i + 1 - a)` over the
//! eigenvalues `l_i` of `S`.

use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::attention::AttentionContext;
use crate::error::{config_err, shape_err, Error, Result};
use crate::math::sqrt;
use crate::rng::{self, Rng};
use crate::stvolume::ImageBatch;

use super::{Denoiser, NoiseLevel, PromptEmbedding};

/// Tolerance for the symmetry check of a dense covariance.
const SYMMETRY_TOL: f64 = 1e-9;

/// Covariance of an image, either dense over all coordinates or separable
/// AR(1) along rows and columns (each channel independent).
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    kind: Kind,
}

#[derive(Debug, Clone)]
enum Kind {
    Dense {
        cov: DMatrix<f64>,
        lower: DMatrix<f64>,
    },
    Ar1 {
        rho_rows: f64,
        rho_cols: f64,
    },
}

/// `n x n` matrix with entries `rho^|i - j|`, row-major.
pub fn ar1_covariance(n: usize, rho: f64) -> Vec<f64> {
    let m = ar1_matrix(n, rho);
    (0..n * n).map(|i| m[(i / n, i % n)]).collect()
}

fn ar1_matrix(n: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| libm::pow(rho, i.abs_diff(j) as f64))
}

impl GaussianPrior {
    /// Dense prior over flattened `(rows, cols, channels)` images of `dim`
    /// coordinates. `cov` is row-major and must be symmetric positive definite.
    pub fn dense(dim: usize, cov: Vec<f64>) -> Result<Self> {
        if dim == 0 || cov.len() != dim * dim {
            return Err(shape_err!(
                "covariance of dimension {dim} needs {} entries, got {}",
                dim * dim,
                cov.len()
            ));
        }
        let cov = DMatrix::from_row_slice(dim, dim, &cov);
        if (&cov - cov.transpose()).amax() > SYMMETRY_TOL {
            return Err(Error::LinAlg("covariance is not symmetric".into()));
        }
        let lower = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::LinAlg("covariance is not positive definite".into()))?
            .unpack();
        Ok(Self {
            kind: Kind::Dense { cov, lower },
        })
    }

    pub fn identity(dim: usize) -> Self {
        let eye = DMatrix::identity(dim, dim);
        Self {
            kind: Kind::Dense {
                cov: eye.clone(),
                lower: eye,
            },
        }
    }

    /// Separable AR(1) prior: correlation `rho_rows^|dr| * rho_cols^|dc|`
    /// between pixels of the same channel, unit variance.
    pub fn ar1(rho_rows: f64, rho_cols: f64) -> Result<Self> {
        for rho in [rho_rows, rho_cols] {
            if !(rho > -1.0 && rho < 1.0) {
                return Err(config_err!(
                    "AR(1) coefficient must lie in (-1, 1), got {rho}"
                ));
            }
        }
        Ok(Self {
            kind: Kind::Ar1 { rho_rows, rho_cols },
        })
    }

    fn check(&self, rows: usize, cols: usize, channels: usize) -> Result<()> {
        if let Kind::Dense { cov, .. } = &self.kind {
            if rows * cols * channels != cov.nrows() {
                return Err(shape_err!(
                    "{rows}x{cols}x{channels} image does not match a {}-dimensional prior",
                    cov.nrows()
                ));
            }
        }
        Ok(())
    }

    /// Eigenvalues of the covariance of a `rows x cols x channels` image.
    pub fn eigenvalues(&self, rows: usize, cols: usize, channels: usize) -> Result<Vec<f64>> {
        self.check(rows, cols, channels)?;
        Ok(match &self.kind {
            Kind::Dense { cov, .. } => SymmetricEigen::new(cov.clone())
                .eigenvalues
                .iter()
                .copied()
                .collect(),
            Kind::Ar1 { rho_rows, rho_cols } => {
                let lr = SymmetricEigen::new(ar1_matrix(rows, *rho_rows)).eigenvalues;
                let lc = SymmetricEigen::new(ar1_matrix(cols, *rho_cols)).eigenvalues;
                let mut out = Vec::with_capacity(rows * cols * channels);
                for a in lr.iter() {
                    for b in lc.iter() {
                        out.extend(core::iter::repeat_n(a * b, channels));
                    }
                }
                out
            }
        })
    }

    /// Expected per-coordinate squared error of [`analytic_mmse`].
    pub fn expected_mse(
        &self,
        alpha_bar: f64,
        rows: usize,
        cols: usize,
        channels: usize,
    ) -> Result<f64> {
        check_alpha(alpha_bar)?;
        let ev = self.eigenvalues(rows, cols, channels)?;
        let n = ev.len() as f64;
        Ok(ev
            .iter()
            .map(|&l| 1.0 - (1.0 - alpha_bar) / (alpha_bar * l + 1.0 - alpha_bar))
            .sum::<f64>()
            / n)
    }

    /// One draw `x0 ~ N(0, S)` in `(row, col, channel)` order.
    pub fn sample(
        &self,
        rows: usize,
        cols: usize,
        channels: usize,
        rng: &mut Rng,
    ) -> Result<Vec<f32>> {
        self.check(rows, cols, channels)?;
        let n = rows * cols * channels;
        let w: Vec<f64> = (0..n).map(|_| rng::normal_f64(rng)).collect();
        Ok(match &self.kind {
            Kind::Dense { lower, .. } => (lower * nalgebra::DVector::from_vec(w))
                .iter()
                .map(|&v| v as f32)
                .collect(),
            Kind::Ar1 { rho_rows, rho_cols } => {
                let mut y = w;
                ar1_filter(&mut y, rows, cols * channels, *rho_rows);
                for r in 0..rows {
                    ar1_filter(
                        &mut y[r * cols * channels..(r + 1) * cols * channels],
                        cols,
                        channels,
                        *rho_cols,
                    );
                }
                y.into_iter().map(|v| v as f32).collect()
            }
        })
    }
}

/// In-place AR(1) recursion `y_i = rho y_{i-1} + sqrt(1 - rho^2) w_i` along an
/// axis of `len` steps with element stride `stride`, applied to each of the
/// `stride` interleaved sequences. Maps white noise to unit-variance AR(1).
pub(crate) fn ar1_filter(data: &mut [f64], len: usize, stride: usize, rho: f64) {
    let c = sqrt(1.0 - rho * rho);
    for lane in 0..stride {
        for i in 1..len {
            let prev = data[(i - 1) * stride + lane];
            let cur = &mut data[i * stride + lane];
            *cur = rho * prev + c * *cur;
        }
    }
}

fn check_alpha(alpha_bar: f64) -> Result<()> {
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(config_err!("alpha_bar must lie in (0, 1), got {alpha_bar}"));
    }
    Ok(())
}

/// `E[eps | x]` for every image of the batch.
pub fn analytic_mmse(prior: &GaussianPrior, x: &ImageBatch, alpha_bar: f64) -> Result<ImageBatch> {
    check_alpha(alpha_bar)?;
    let (rows, cols, ch) = (x.height, x.width, x.channels);
    prior.check(rows, cols, ch)?;
    let scale = sqrt(1.0 - alpha_bar);
    let mut out = ImageBatch::zeros(x.n, rows, cols, ch);
    match &prior.kind {
        Kind::Dense { cov, .. } => {
            let dim = cov.nrows();
            let m = cov * alpha_bar + DMatrix::identity(dim, dim) * (1.0 - alpha_bar);
            let chol = m
                .cholesky()
                .ok_or_else(|| Error::LinAlg("shifted covariance not positive definite".into()))?;
            let rhs = DMatrix::from_fn(dim, x.n, |i, j| x.data[j * dim + i] as f64);
            let sol = chol.solve(&rhs);
            for j in 0..x.n {
                for i in 0..dim {
                    out.data[j * dim + i] = (scale * sol[(i, j)]) as f32;
                }
            }
        }
        Kind::Ar1 { rho_rows, rho_cols } => {
            let er = SymmetricEigen::new(ar1_matrix(rows, *rho_rows));
            let ec = SymmetricEigen::new(ar1_matrix(cols, *rho_cols));
            let gain = DMatrix::from_fn(rows, cols, |i, j| {
                scale / (alpha_bar * er.eigenvalues[i] * ec.eigenvalues[j] + 1.0 - alpha_bar)
            });
            for img in 0..x.n {
                let src = x.image(img);
                let base = img * rows * cols * ch;
                for c in 0..ch {
                    let plane =
                        DMatrix::from_fn(rows, cols, |r, q| src[(r * cols + q) * ch + c] as f64);
                    let coef = er.eigenvectors.transpose() * plane * &ec.eigenvectors;
                    let back =
                        &er.eigenvectors * coef.component_mul(&gain) * ec.eigenvectors.transpose();
                    for r in 0..rows {
                        for q in 0..cols {
                            out.data[base + (r * cols + q) * ch + c] = back[(r, q)] as f32;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// [`analytic_mmse`] behind the [`Denoiser`] interface. Prompt and attention
/// context are ignored.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    pub prior: GaussianPrior,
}

impl AnalyticDenoiser {
    pub fn new(prior: GaussianPrior) -> Self {
        Self { prior }
    }
}

impl Denoiser for AnalyticDenoiser {
    fn predict(
        &self,
        x: &ImageBatch,
        level: NoiseLevel,
        _prompt: &PromptEmbedding,
        _attn: &mut AttentionContext<'_>,
    ) -> Result<ImageBatch> {
        analytic_mmse(&self.prior, x, level.alpha_bar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn batch(rows: usize, cols: usize, ch: usize, n: usize, seed: u64) -> ImageBatch {
        let mut r = rng::stream(seed, &[]);
        ImageBatch::new(
            n,
            rows,
            cols,
            ch,
            rng::normal_vec(&mut r, n * rows * cols * ch),
        )
        .unwrap()
    }

    #[test]
    fn identity_prior_scales_input() {
        let x = ImageBatch::new(1, 1, 1, 1, vec![2.0]).unwrap();
        let e = analytic_mmse(&GaussianPrior::identity(1), &x, 0.5).unwrap();
        assert!((e.data[0] as f64 - 2.0 * sqrt(0.5)).abs() < 1e-6);
        let x = batch(3, 4, 2, 2, 1);
        let e = analytic_mmse(&GaussianPrior::identity(24), &x, 0.3).unwrap();
        for (a, b) in e.data.iter().zip(&x.data) {
            assert!((*a as f64 - sqrt(0.7) * *b as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_in_zero_out_and_small_noise_limit() {
        let p = GaussianPrior::ar1(0.5, 0.8).unwrap();
        let zero = ImageBatch::zeros(2, 4, 4, 1);
        assert!(analytic_mmse(&p, &zero, 0.4)
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0.0));
        let x = batch(4, 4, 1, 1, 3);
        let tiny = analytic_mmse(&p, &x, 1.0 - 1e-10).unwrap();
        assert!(tiny.data.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn separable_route_matches_dense_route() {
        let (rows, cols) = (4, 5);
        let rr = ar1_covariance(rows, 0.7);
        let rc = ar1_covariance(cols, -0.3);
        let dim = rows * cols;
        let kron: Vec<f64> = (0..dim * dim)
            .map(|k| {
                let (i, j) = (k / dim, k % dim);
                rr[(i / cols) * rows + j / cols] * rc[(i % cols) * cols + j % cols]
            })
            .collect();
        let dense = GaussianPrior::dense(dim, kron).unwrap();
        let sep = GaussianPrior::ar1(0.7, -0.3).unwrap();
        let x = batch(rows, cols, 1, 3, 9);
        for ab in [0.9, 0.5, 0.05] {
            let a = analytic_mmse(&dense, &x, ab).unwrap();
            let b = analytic_mmse(&sep, &x, ab).unwrap();
            assert!(a
                .data
                .iter()
                .zip(&b.data)
                .all(|(p, q)| (p - q).abs() < 1e-5));
            let ma = dense.expected_mse(ab, rows, cols, 1).unwrap();
            let mb = sep.expected_mse(ab, rows, cols, 1).unwrap();
            assert!((ma - mb).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_covariances() {
        assert!(matches!(
            GaussianPrior::dense(2, vec![1.0, 0.5, 0.4, 1.0]),
            Err(Error::LinAlg(_))
        ));
        assert!(matches!(
            GaussianPrior::dense(2, vec![1.0, 2.0, 2.0, 1.0]),
            Err(Error::LinAlg(_))
        ));
        assert!(GaussianPrior::dense(2, vec![1.0]).is_err());
        assert!(GaussianPrior::ar1(1.0, 0.0).is_err());
        let x = batch(2, 2, 1, 1, 0);
        assert!(matches!(
            analytic_mmse(&GaussianPrior::identity(5), &x, 0.5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ar1_samples_have_target_covariance() {
        let p = GaussianPrior::ar1(0.8, 0.5).unwrap();
        let mut r = rng::stream(4, &[]);
        let n = 20_000;
        let (mut var, mut c_row, mut c_col) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let s = p.sample(3, 3, 1, &mut r).unwrap();
            var += (s[4] * s[4]) as f64;
            c_row += (s[4] * s[7]) as f64;
            c_col += (s[4] * s[5]) as f64;
        }
        let n = n as f64;
        assert!((var / n - 1.0).abs() < 0.05);
        assert!((c_row / n - 0.8).abs() < 0.05);
        assert!((c_col / n - 0.5).abs() < 0.05);
    }

    #[test]
    fn monte_carlo_mse_matches_trace_formula() {
        let dim = 64;
        let prior = GaussianPrior::dense(dim, ar1_covariance(dim, 0.9)).unwrap();
        let mut r = rng::stream(11, &[]);
        for ab in [0.9, 0.5, 0.1] {
            let n = 4000;
            let mut x0 = Vec::with_capacity(n * dim);
            for _ in 0..n {
                x0.extend(prior.sample(1, dim, 1, &mut r).unwrap());
            }
            let eps = rng::normal_vec(&mut r, n * dim);
            let noisy: Vec<f32> = x0
                .iter()
                .zip(&eps)
                .map(|(&a, &e)| (sqrt(ab) * a as f64 + sqrt(1.0 - ab) * e as f64) as f32)
                .collect();
            let pred =
                analytic_mmse(&prior, &ImageBatch::new(n, 1, dim, 1, noisy).unwrap(), ab).unwrap();
            let mse = pred
                .data
                .iter()
                .zip(&eps)
                .map(|(p, e)| ((p - e) as f64).powi(2))
                .sum::<f64>()
                / (n * dim) as f64;
            let want = prior.expected_mse(ab, 1, dim, 1).unwrap();
            assert!((mse / want - 1.0).abs() < 0.03, "ab {ab}: {mse} vs {want}");
        }
    }

    proptest! {
        #[test]
        fn mmse_is_linear(a in -3.0f32..3.0, b in -3.0f32..3.0, seed in any::<u64>(), ab in 0.01f64..0.99) {
            let p = GaussianPrior::ar1(0.6, 0.3).unwrap();
            let x = batch(4, 3, 2, 1, seed);
            let y = batch(4, 3, 2, 1, seed ^ 1);
            let comb = ImageBatch::new(1, 4, 3, 2, x.data.iter().zip(&y.data).map(|(u, v)| a * u + b * v).collect()).unwrap();
            let ex = analytic_mmse(&p, &x, ab).unwrap();
            let ey = analytic_mmse(&p, &y, ab).unwrap();
            let ec = analytic_mmse(&p, &comb, ab).unwrap();
            for i in 0..ec.data.len() {
                prop_assert!((ec.data[i] - (a * ex.data[i] + b * ey.data[i])).abs() < 1e-5);
            }
        }
    }
}
