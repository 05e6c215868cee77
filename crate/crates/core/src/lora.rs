//! Low-rank adapters: a frozen `n x k` weight plus a trainable delta `A B`
//! with `A: n x r` and `B: r x k`.
//!
//! `A` starts at zero and `B` is drawn from `N(0, sigma^2)`, so the delta is
//! exactly zero at initialization. There is no `alpha / r` output scaling.

use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::linalg::matmul;
use crate::matrix::Matrix;
use crate::trainer::model::{AdapterizedModel, Projection};

pub const DEFAULT_INIT_SIGMA: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub init_sigma: f32,
}

/// Gradients of a scalar loss with respect to `A` and `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraGrads {
    pub a: Matrix,
    pub b: Matrix,
}

pub fn init_lora(n: usize, k: usize, r: usize, sigma: f32, seed: u64) -> Result<LoraAdapter> {
    if r == 0 || r > n.min(k) {
        return Err(Error::argument(format!(
            "lora rank {r} outside [1, {}] for a {n}x{k} weight",
            n.min(k)
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::argument(format!("init sigma must be positive, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(LoraAdapter {
        a: Matrix::zeros(n, r),
        b: Matrix::random_normal(r, k, sigma, &mut rng),
        init_sigma: sigma,
    })
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn in_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Materialized `A B`; only for tests and reporting.
    pub fn delta_weight(&self) -> Result<Matrix> {
        matmul(&self.a, &self.b)
    }

    /// `(x A) B`, never forming `A B`.
    pub fn delta(&self, x: &Matrix) -> Result<Matrix> {
        matmul(&matmul(x, &self.a)?, &self.b)
    }

    /// Gradients for upstream `g = dL/dY` together with this path's
    /// contribution to `dL/dx`.
    pub fn backward(&self, x: &Matrix, g: &Matrix) -> Result<(LoraGrads, Matrix)> {
        let xa = matmul(x, &self.a)?;
        let gb = matmul(g, &self.b.transpose())?;
        let grads = LoraGrads {
            a: matmul(&x.transpose(), &gb)?,
            b: matmul(&xa.transpose(), g)?,
        };
        let dx = matmul(&gb, &self.a.transpose())?;
        Ok((grads, dx))
    }

    pub fn apply_grads(&mut self, grads: &LoraGrads, lr: f32) -> Result<()> {
        self.a.sgd_update(&grads.a, lr)?;
        self.b.sgd_update(&grads.b, lr)
    }
}

/// `x W + (x A) B`.
pub fn lora_forward(x: &Matrix, w: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    if w.shape() != (adapter.in_dim(), adapter.out_dim()) {
        return Err(Error::Shape {
            op: "lora_forward weight/adapter",
            lhs: w.shape(),
            rhs: (adapter.in_dim(), adapter.out_dim()),
        });
    }
    let mut y = matmul(x, w)?;
    y.add_assign(&adapter.delta(x)?)?;
    Ok(y)
}

/// `n k / ((n + k) r)` as an exact fraction.
pub fn param_ratio_exact(n: usize, k: usize, r: usize) -> Result<Ratio<u64>> {
    if n == 0 || k == 0 || r == 0 {
        return Err(Error::argument("param_ratio needs positive n, k, r"));
    }
    let (n, k, r) = (n as u64, k as u64, r as u64);
    Ok(Ratio::new(n * k, (n + k) * r))
}

/// Ratio of full-matrix trainable parameters to adapter parameters.
pub fn param_ratio(n: usize, k: usize, r: usize) -> Result<f64> {
    let q = param_ratio_exact(n, k, r)?;
    Ok(*q.numer() as f64 / *q.denom() as f64)
}

/// Attach an independent, freshly initialized LoRA adapter to each target
/// projection. Other projections are left untouched.
pub fn attach_adapters(
    mut model: AdapterizedModel,
    targets: &[Projection],
    r: usize,
    sigma: f32,
    seed: u64,
) -> Result<AdapterizedModel> {
    for &target in targets {
        let layer = model.projection_mut(target);
        let (n, k) = layer.weight.shape();
        layer.adapter = Adapter::Lora(init_lora(n, k, r, sigma, target.derive_seed(seed))?);
    }
    Ok(model)
}
