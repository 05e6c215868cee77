//! SVD-shaped adapters `P diag(lambda) Q` with an orthogonality penalty on
//! `P` and `Q` and magnitude-based pruning of `lambda` under a shrinking
//! rank budget.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm_sq, matmul};
use crate::matrix::Matrix;
use crate::trainer::model::{AdapterizedModel, Projection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaLoraAdapter {
    /// `d1 x r`
    pub p: Matrix,
    /// Diagonal of `Lambda`, length `r`.
    pub lambda: Vec<f32>,
    /// `r x d2`
    pub q: Matrix,
    /// Weight of the orthogonality penalty.
    pub gamma: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaLoraGrads {
    pub p: Matrix,
    pub lambda: Vec<f32>,
    pub q: Matrix,
}

/// Orthonormal `rows x cols` columns from Gram-Schmidt on a seeded Gaussian.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = Matrix::random_normal(rows, cols, 1.0, rng);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|i| f64::from(g.get(i, j))).collect();
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|x| x / norm).collect());
    }
    Matrix::from_fn(rows, cols, |i, j| basis[j][i] as f32)
}

/// Orthonormal `P` and `Q`, `lambda = 0`.
pub fn init_adalora(d1: usize, d2: usize, r: usize, gamma: f32, seed: u64) -> Result<AdaLoraAdapter> {
    if r == 0 || r > d1.min(d2) {
        return Err(Error::argument(format!(
            "adalora rank {r} outside [1, {}] for a {d1}x{d2} weight",
            d1.min(d2)
        )));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::argument(format!("gamma must be non-negative, got {gamma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = orthonormal_columns(d1, r, &mut rng);
    let q = orthonormal_columns(d2, r, &mut rng).transpose();
    Ok(AdaLoraAdapter {
        p,
        lambda: vec![0.0; r],
        q,
        gamma,
    })
}

impl AdaLoraAdapter {
    pub fn max_rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn effective_rank(&self) -> usize {
        self.lambda.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn in_dim(&self) -> usize {
        self.p.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn trainable_params(&self) -> usize {
        self.p.len() + self.lambda.len() + self.q.len()
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        let r = self.lambda.len();
        if self.p.cols() != r || self.q.rows() != r {
            return Err(Error::Shape {
                op: "adalora factors",
                lhs: self.p.shape(),
                rhs: self.q.shape(),
            });
        }
        Ok(())
    }

    /// `((x P) * lambda) Q`.
    pub fn delta(&self, x: &Matrix) -> Result<Matrix> {
        self.check_shapes()?;
        matmul(&matmul(x, &self.p)?.scale_columns(&self.lambda)?, &self.q)
    }

    pub fn backward(&self, x: &Matrix, g: &Matrix) -> Result<(AdaLoraGrads, Matrix)> {
        self.check_shapes()?;
        let h = matmul(x, &self.p)?;
        let hs = h.scale_columns(&self.lambda)?;
        let d_hs = matmul(g, &self.q.transpose())?;
        let lambda = (0..self.lambda.len())
            .map(|i| (0..h.rows()).map(|s| d_hs.get(s, i) * h.get(s, i)).sum())
            .collect();
        let d_h = d_hs.scale_columns(&self.lambda)?;
        let grads = AdaLoraGrads {
            p: matmul(&x.transpose(), &d_h)?,
            lambda,
            q: matmul(&hs.transpose(), g)?,
        };
        let dx = matmul(&d_h, &self.p.transpose())?;
        Ok((grads, dx))
    }

    /// Gradients of [`orthogonality_penalty`] with respect to `P` and `Q`.
    pub fn penalty_grads(&self) -> Result<(Matrix, Matrix)> {
        let r = self.lambda.len();
        let eye = Matrix::identity(r);
        let ptp = matmul(&self.p.transpose(), &self.p)?.sub(&eye)?;
        let qqt = matmul(&self.q, &self.q.transpose())?.sub(&eye)?;
        let c = 4.0 * self.gamma;
        Ok((matmul(&self.p, &ptp)?.scale(c), matmul(&qqt, &self.q)?.scale(c)))
    }
}

/// `P diag(lambda) Q`.
pub fn adalora_delta(ad: &AdaLoraAdapter) -> Result<Matrix> {
    ad.check_shapes()?;
    matmul(&ad.p.scale_columns(&ad.lambda)?, &ad.q)
}

/// `gamma ||P^T P - I||_F^2 + gamma ||Q Q^T - I||_F^2`.
pub fn orthogonality_penalty(ad: &AdaLoraAdapter) -> Result<f32> {
    if ad.gamma == 0.0 {
        return Ok(0.0);
    }
    let eye = Matrix::identity(ad.lambda.len());
    let ptp = matmul(&ad.p.transpose(), &ad.p)?.sub(&eye)?;
    let qqt = matmul(&ad.q, &ad.q.transpose())?.sub(&eye)?;
    Ok((f64::from(ad.gamma) * (frobenius_norm_sq(&ptp) + frobenius_norm_sq(&qqt))) as f32)
}

pub fn regularized_loss(task_cost: f32, ad: &AdaLoraAdapter) -> Result<f32> {
    Ok(task_cost + orthogonality_penalty(ad)?)
}

/// `|lambda_i|`.
pub fn importance_scores(lambda_tilde: &[f32]) -> Vec<f32> {
    lambda_tilde.iter().map(|v| v.abs()).collect()
}

/// Non-increasing rank budget: flat at `b_init` during warmup, then linear
/// (rounded half to even) decay reaching `b_final` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub b_init: usize,
    pub b_final: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl BudgetSchedule {
    pub fn new(b_init: usize, b_final: usize, total_steps: usize, warmup_steps: usize) -> Result<Self> {
        let s = Self {
            b_init,
            b_final,
            total_steps,
            warmup_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_final > self.b_init {
            return Err(Error::argument(format!(
                "b_final {} exceeds b_init {}",
                self.b_final, self.b_init
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::argument("warmup_steps exceeds total_steps"));
        }
        if self.total_steps == 0 && self.b_init != self.b_final {
            return Err(Error::argument("a zero-length schedule needs b_init == b_final"));
        }
        Ok(())
    }

    pub fn budget_at(&self, t: usize) -> Result<usize> {
        budget_at(self, t)
    }
}

pub fn budget_at(schedule: &BudgetSchedule, t: usize) -> Result<usize> {
    schedule.validate()?;
    let BudgetSchedule {
        b_init,
        b_final,
        total_steps,
        warmup_steps,
    } = *schedule;
    if t > total_steps {
        return Err(Error::argument(format!("step {t} beyond total_steps {total_steps}")));
    }
    if t < warmup_steps {
        return Ok(b_init);
    }
    let span = total_steps - warmup_steps;
    if span == 0 {
        return Ok(b_final);
    }
    let num = ((b_init - b_final) * (t - warmup_steps)) as u128;
    let den = span as u128;
    let (q, rem) = (num / den, num % den);
    let drop = if 2 * rem > den || (2 * rem == den && q % 2 == 1) {
        q + 1
    } else {
        q
    };
    Ok(b_init - drop as usize)
}

/// Keep the `b_t` highest-scoring entries (ties go to the lower index) and
/// zero the rest. Kept values are copied bit for bit.
pub fn prune_lambda(lambda_tilde: &[f32], scores: &[f32], b_t: usize) -> Result<Vec<f32>> {
    if lambda_tilde.len() != scores.len() {
        return Err(Error::argument(format!(
            "lambda has {} entries but scores have {}",
            lambda_tilde.len(),
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut out = vec![0.0; lambda_tilde.len()];
    for &i in order.iter().take(b_t) {
        out[i] = lambda_tilde[i];
    }
    Ok(out)
}

/// Gradient step on the diagonal only, then pruning to `budget_at(t)`.
pub fn lambda_sgd_step(
    ad: &AdaLoraAdapter,
    grad_lambda: &[f32],
    eta: f32,
    schedule: &BudgetSchedule,
    t: usize,
) -> Result<AdaLoraAdapter> {
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::argument(format!("learning rate must be positive, got {eta}")));
    }
    if grad_lambda.len() != ad.lambda.len() {
        return Err(Error::argument("lambda gradient length mismatch"));
    }
    let tilde: Vec<f32> = ad.lambda.iter().zip(grad_lambda).map(|(l, g)| l - eta * g).collect();
    let lambda = prune_lambda(&tilde, &importance_scores(&tilde), budget_at(schedule, t)?)?;
    Ok(AdaLoraAdapter { lambda, ..ad.clone() })
}

/// Attach an independent AdaLoRA adapter to each target projection.
pub fn attach_adalora_adapters(
    mut model: AdapterizedModel,
    targets: &[Projection],
    r: usize,
    gamma: f32,
    seed: u64,
) -> Result<AdapterizedModel> {
    for &target in targets {
        let layer = model.projection_mut(target);
        let (d1, d2) = layer.weight.shape();
        layer.adapter = Adapter::AdaLora(init_adalora(d1, d2, r, gamma, target.derive_seed(seed))?);
    }
    Ok(model)
}
