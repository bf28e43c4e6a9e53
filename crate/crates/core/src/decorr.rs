//! Batch decorrelation of the fused representation: the regulariser, its
//! combination with the denoising loss, and correlation diagnostics.

use gradcore::tensor::gemm;
use gradcore::{CustomOp, Graph, Tensor, Var};
use nalgebra::DMatrix;

use crate::PlanError;

pub const DECORR_EPS: f64 = 1e-8;
pub const DEFAULT_BETA: f64 = 0.02;

/// Column-normalised correlation matrix `N^T N` of a `[B, d]` batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrMatrix {
    pub corr: Tensor,
    pub batch: usize,
}

struct Normalized {
    n: Vec<f64>,
    std: Vec<f64>,
    corr: Vec<f64>,
}

fn normalize(m: &Tensor, eps: f64) -> Result<Normalized, PlanError> {
    let (b, d) = m.as_matrix_dims();
    if b < 2 {
        return Err(PlanError::DegenerateBatch(b));
    }
    let x = m.data();
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (s, v) in mean.iter_mut().zip(row) {
            *s += v;
        }
    }
    mean.iter_mut().for_each(|s| *s /= b as f64);
    let mut n: Vec<f64> = x.iter().enumerate().map(|(k, v)| v - mean[k % d]).collect();
    let mut var = vec![0.0; d];
    for row in n.chunks(d) {
        for (s, v) in var.iter_mut().zip(row) {
            *s += v * v;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (eps + v / b as f64).sqrt()).collect();
    for row in n.chunks_mut(d) {
        for (v, s) in row.iter_mut().zip(&std) {
            *v /= s;
        }
    }
    let mut corr = vec![0.0; d * d];
    gemm(d, b, d, &n, true, &n, false, 0.0, &mut corr);
    Ok(Normalized { n, std, corr })
}

fn offdiag_loss(corr: &[f64], d: usize, b: usize) -> f64 {
    let mut s = 0.0;
    for j in 0..d {
        for k in 0..d {
            if j != k {
                s += corr[j * d + k] * corr[j * d + k];
            }
        }
    }
    s / (d * (d - 1)) as f64 / b as f64
}

pub fn corr_matrix(m: &Tensor) -> Result<CorrMatrix, PlanError> {
    let (b, d) = m.as_matrix_dims();
    let nz = normalize(m, DECORR_EPS)?;
    Ok(CorrMatrix {
        corr: Tensor::new(&[d, d], nz.corr)?,
        batch: b,
    })
}

/// Mean squared off-diagonal correlation divided by the batch size.
pub fn decorr_loss_value(m: &Tensor, eps: f64) -> Result<f64, PlanError> {
    let (b, d) = m.as_matrix_dims();
    if d < 2 {
        return Err(PlanError::Config(format!("decorrelation needs d >= 2, got {d}")));
    }
    let nz = normalize(m, eps)?;
    Ok(offdiag_loss(&nz.corr, d, b))
}

/// Tape op computing the decorrelation loss with an analytic backward pass.
pub struct DecorrOp {
    eps: f64,
    cache: Option<Normalized>,
}

impl DecorrOp {
    pub fn new(eps: f64) -> Self {
        Self { eps, cache: None }
    }
}

impl CustomOp for DecorrOp {
    fn name(&self) -> &'static str {
        "decorr"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> gradcore::Result<Tensor> {
        let m = inputs[0];
        let (b, d) = m.as_matrix_dims();
        if d < 2 {
            return Err(gradcore::GradError::ShapeMismatch(format!("decorr needs d >= 2, got {d}")));
        }
        let nz = normalize(m, self.eps).map_err(|e| gradcore::GradError::ShapeMismatch(e.to_string()))?;
        let loss = offdiag_loss(&nz.corr, d, b);
        self.cache = Some(nz);
        Ok(Tensor::scalar(loss))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Tensor> {
        let (b, d) = inputs[0].as_matrix_dims();
        let nz = self.cache.as_ref().expect("forward ran");
        let scale = grad_output.item() * 2.0 / ((d * (d - 1)) as f64 * b as f64);
        // dL/dcorr with the diagonal removed
        let mut gc = nz.corr.clone();
        for j in 0..d {
            gc[j * d + j] = 0.0;
        }
        gc.iter_mut().for_each(|v| *v *= scale);
        // corr = N^T N with symmetric upstream grad => dN = 2 N G
        let mut gn = vec![0.0; b * d];
        gemm(b, d, d, &nz.n, false, &gc, false, 0.0, &mut gn);
        gn.iter_mut().for_each(|v| *v *= 2.0);
        // through the per-column standardisation
        let mut proj = vec![0.0; d];
        for (grow, nrow) in gn.chunks(d).zip(nz.n.chunks(d)) {
            for j in 0..d {
                proj[j] += grow[j] * nrow[j];
            }
        }
        proj.iter_mut().for_each(|v| *v /= b as f64);
        let mut gx: Vec<f64> = gn
            .iter()
            .zip(&nz.n)
            .enumerate()
            .map(|(k, (g, n))| (g - n * proj[k % d]) / nz.std[k % d])
            .collect();
        // through the centring
        let mut mean = vec![0.0; d];
        for row in gx.chunks(d) {
            for (s, v) in mean.iter_mut().zip(row) {
                *s += v;
            }
        }
        for (k, v) in gx.iter_mut().enumerate() {
            *v -= mean[k % d] / b as f64;
        }
        vec![Tensor::new(&[b, d], gx).expect("grad shape")]
    }
}

/// Records the decorrelation loss of `m` (`[B, d]`) on the tape.
pub fn decorr_loss(g: &mut Graph, m: Var) -> Result<Var, PlanError> {
    let (b, _) = g.value(m).as_matrix_dims();
    if b < 2 {
        return Err(PlanError::DegenerateBatch(b));
    }
    Ok(g.custom(&[m], Box::new(DecorrOp::new(DECORR_EPS)))?)
}

/// `l_diff + beta * l_rep`.
pub fn combined_loss(g: &mut Graph, l_diff: Var, l_rep: Var, beta: f64) -> Result<Var, PlanError> {
    let r = g.scale(l_rep, beta);
    Ok(g.add(l_diff, r)?)
}

pub fn combined_loss_value(l_diff: f64, l_rep: f64, beta: f64) -> f64 {
    l_diff + beta * l_rep
}

/// Largest `k` singular values of a symmetric matrix, descending.
pub fn singular_spectrum(corr: &CorrMatrix, k: usize) -> Vec<f64> {
    symmetric_singular_values(&corr.corr).into_iter().take(k).collect()
}

pub fn symmetric_singular_values(a: &Tensor) -> Vec<f64> {
    let (r, c) = a.as_matrix_dims();
    assert_eq!(r, c, "square matrix expected");
    let m = DMatrix::from_row_slice(r, c, a.data());
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut s: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Mean absolute off-diagonal correlation coefficient (entries of `corr / B`).
pub fn mean_abs_offdiag(corr: &CorrMatrix) -> f64 {
    let d = corr.corr.rows();
    let mut s = 0.0;
    for j in 0..d {
        for k in 0..d {
            if j != k {
                s += corr.corr.get2(j, k).abs();
            }
        }
    }
    s / (d * (d - 1)) as f64 / corr.batch as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfectly_correlated_columns() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let l = decorr_loss_value(&m, DECORR_EPS).unwrap();
        assert!((l - 3.0).abs() < 1e-6, "{l}");
    }

    #[test]
    fn orthogonal_centred_columns_give_zero() {
        let m = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]]).unwrap();
        assert!(decorr_loss_value(&m, DECORR_EPS).unwrap().abs() < 1e-20);
    }

    #[test]
    fn single_row_is_degenerate() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(decorr_loss_value(&m, DECORR_EPS), Err(PlanError::DegenerateBatch(1))));
        let mut g = Graph::new();
        let v = g.variable(m);
        assert!(matches!(decorr_loss(&mut g, v), Err(PlanError::DegenerateBatch(1))));
    }

    #[test]
    fn combined_loss_weights() {
        assert_eq!(combined_loss_value(1.5, 4.0, 0.0), 1.5);
        assert_eq!(combined_loss_value(1.5, 0.0, 0.3), 1.5);
        assert_eq!(combined_loss_value(1.0, 2.0, DEFAULT_BETA), 1.04);
    }

    #[test]
    fn scaled_identity_spectrum() {
        let c = CorrMatrix {
            corr: Tensor::eye(5).map(|v| v * 7.0),
            batch: 7,
        };
        assert!(singular_spectrum(&c, 5).iter().all(|s| (s - 7.0).abs() < 1e-12));
    }
}
