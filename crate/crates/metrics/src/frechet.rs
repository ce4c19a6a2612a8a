//! Gaussian summaries and the Fréchet distance between them.

use gestor_core::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::embedder::Embedder;
use crate::{MetricsError, Result};

/// Diagonal loading applied when fitting, so singular covariances stay usable.
pub const DIAG_LOAD: f64 = 1e-6;
const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianSummary {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(MetricsError::Dimension(d, cov.nrows()));
        }
        Ok(Self { mean, cov, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Maximum-likelihood fit over rows (population covariance), plus `load` on the diagonal.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, load: f64) -> Result<Self> {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let Some(first) = rows.first() else {
            return Err(MetricsError::TooFewSamples { need: 1, got: 0 });
        };
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = DVector::zeros(d);
        for r in &rows {
            if r.len() != d {
                return Err(MetricsError::Dimension(d, r.len()));
            }
            mean += DVector::from_column_slice(r);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for r in &rows {
            let x = DVector::from_column_slice(r) - &mean;
            cov.syger(1.0, &x, &x, 1.0);
        }
        cov /= n;
        cov.fill_lower_triangle_with_upper_triangle();
        for i in 0..d {
            cov[(i, i)] += load;
        }
        Self::new(mean, cov, rows.len())
    }

    /// Fits over every frame (row) of every tensor.
    pub fn fit_frames<'a>(clips: impl IntoIterator<Item = &'a Tensor>, load: f64) -> Result<Self> {
        let clips: Vec<&Tensor> = clips.into_iter().collect();
        Self::fit(clips.iter().flat_map(|t| (0..t.rows()).map(move |r| t.row(r))), load)
    }
}

fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = sym_eigen(m);
    let min = e.eigenvalues.min();
    if min < -PSD_TOL * (1.0 + e.eigenvalues.amax()) {
        return Err(MetricsError::NotPsd(min));
    }
    let s = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose())
}

/// ‖μp − μq‖² + Tr(Σp + Σq − 2(ΣpΣq)^½), with the trace term taken from the
/// eigenvalues of the symmetric product Σp^½ Σq Σp^½.
pub fn frechet_distance(p: &GaussianSummary, q: &GaussianSummary) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(MetricsError::Dimension(p.dim(), q.dim()));
    }
    let sp = psd_sqrt(&p.cov)?;
    psd_sqrt(&q.cov)?;
    let prod = &sp * &q.cov * &sp;
    let e = sym_eigen(&prod);
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let dm = (&p.mean - &q.mean).norm_squared();
    Ok((dm + p.cov.trace() + q.cov.trace() - 2.0 * tr_sqrt).max(0.0))
}

fn need_two(n: usize) -> Result<()> {
    if n < 2 {
        return Err(MetricsError::TooFewSamples { need: 2, got: n });
    }
    Ok(())
}

/// Fréchet distance between per-frame pose Gaussians.
pub fn fgd_raw(generated: &[Tensor], reference: &[Tensor]) -> Result<f64> {
    need_two(generated.len())?;
    need_two(reference.len())?;
    let p = GaussianSummary::fit_frames(generated, DIAG_LOAD)?;
    let q = GaussianSummary::fit_frames(reference, DIAG_LOAD)?;
    frechet_distance(&p, &q)
}

/// Fréchet distance between per-frame Gaussians in the embedder's latent space.
pub fn fgd_feature(generated: &[Tensor], reference: &[Tensor], embedder: &Embedder) -> Result<f64> {
    need_two(generated.len())?;
    need_two(reference.len())?;
    let enc = |clips: &[Tensor]| -> Result<Vec<Tensor>> { clips.iter().map(|c| embedder.embed(c)).collect() };
    let p = GaussianSummary::fit_frames(&enc(generated)?, DIAG_LOAD)?;
    let q = GaussianSummary::fit_frames(&enc(reference)?, DIAG_LOAD)?;
    frechet_distance(&p, &q)
}
