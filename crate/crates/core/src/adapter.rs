//! The adapter slot carried by each linear layer, plus the `PFTA` checkpoint
//! format.
//!
//! ```text
//! b"PFTA"
//! kind: u8           0 = LoRA, 1 = AdaLoRA
//! n: u64, k: u64, r: u64
//! hyper: f32         LoRA: init sigma; AdaLoRA: gamma
//! LoRA:    A (n x r), B (r x k)         as PFT1 tensors
//! AdaLoRA: P (n x r), lambda (1 x r), Q (r x k)
//! ```

use serde::{Deserialize, Serialize};

use crate::adalora::{lambda_sgd_step, orthogonality_penalty, AdaLoraAdapter, AdaLoraGrads, BudgetSchedule};
use crate::error::{Error, Result};
use crate::linalg::matmul;
use crate::lora::{LoraAdapter, LoraGrads};
use crate::matrix::{ByteReader, Matrix};

pub const ADAPTER_MAGIC: &[u8; 4] = b"PFTA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    None,
    Lora,
    AdaLora,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::None => "none",
            AdapterKind::Lora => "lora",
            AdapterKind::AdaLora => "adalora",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum Adapter {
    #[default]
    None,
    Lora(LoraAdapter),
    AdaLora(AdaLoraAdapter),
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdapterGrads {
    None,
    Lora(LoraGrads),
    AdaLora(AdaLoraGrads),
}

impl Adapter {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::None => AdapterKind::None,
            Adapter::Lora(_) => AdapterKind::Lora,
            Adapter::AdaLora(_) => AdapterKind::AdaLora,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Adapter::None)
    }

    pub fn trainable_params(&self) -> usize {
        match self {
            Adapter::None => 0,
            Adapter::Lora(a) => a.trainable_params(),
            Adapter::AdaLora(a) => a.trainable_params(),
        }
    }

    /// Number of active rank-one components: `r` for LoRA, the nonzero
    /// `lambda` count for AdaLoRA.
    pub fn effective_rank(&self) -> usize {
        match self {
            Adapter::None => 0,
            Adapter::Lora(a) => a.rank(),
            Adapter::AdaLora(a) => a.effective_rank(),
        }
    }

    /// The adapter path's output for `x`, or `None` without an adapter.
    pub fn delta(&self, x: &Matrix) -> Result<Option<Matrix>> {
        match self {
            Adapter::None => Ok(None),
            Adapter::Lora(a) => a.delta(x).map(Some),
            Adapter::AdaLora(a) => a.delta(x).map(Some),
        }
    }

    /// Adapter gradients and the adapter path's contribution to `dL/dx`.
    pub fn backward(&self, x: &Matrix, g: &Matrix) -> Result<(AdapterGrads, Option<Matrix>)> {
        match self {
            Adapter::None => Ok((AdapterGrads::None, None)),
            Adapter::Lora(a) => {
                let (grads, dx) = a.backward(x, g)?;
                Ok((AdapterGrads::Lora(grads), Some(dx)))
            }
            Adapter::AdaLora(a) => {
                let (grads, dx) = a.backward(x, g)?;
                Ok((AdapterGrads::AdaLora(grads), Some(dx)))
            }
        }
    }

    /// Orthogonality penalty; zero for anything but AdaLoRA.
    pub fn penalty(&self) -> Result<f32> {
        match self {
            Adapter::AdaLora(a) => orthogonality_penalty(a),
            _ => Ok(0.0),
        }
    }

    /// Add the penalty gradient to `grads` (AdaLoRA only).
    pub fn add_penalty_grads(&self, grads: &mut AdapterGrads) -> Result<()> {
        if let (Adapter::AdaLora(a), AdapterGrads::AdaLora(g)) = (self, grads) {
            if a.gamma != 0.0 {
                let (gp, gq) = a.penalty_grads()?;
                g.p.add_assign(&gp)?;
                g.q.add_assign(&gq)?;
            }
        }
        Ok(())
    }

    /// One SGD step. AdaLoRA updates `P` and `Q` directly and routes `lambda`
    /// through [`lambda_sgd_step`] so pruning happens at budget `b_t`.
    pub fn sgd_step(
        &mut self,
        grads: &AdapterGrads,
        eta: f32,
        schedule: Option<&BudgetSchedule>,
        t: usize,
    ) -> Result<()> {
        match (self, grads) {
            (Adapter::None, AdapterGrads::None) => Ok(()),
            (Adapter::Lora(a), AdapterGrads::Lora(g)) => a.apply_grads(g, eta),
            (Adapter::AdaLora(a), AdapterGrads::AdaLora(g)) => {
                let full;
                let schedule = match schedule {
                    Some(s) => s,
                    None => {
                        full = BudgetSchedule::new(a.max_rank(), a.max_rank(), t, 0)?;
                        &full
                    }
                };
                let mut next = lambda_sgd_step(a, &g.lambda, eta, schedule, t)?;
                next.p.sgd_update(&g.p, eta)?;
                next.q.sgd_update(&g.q, eta)?;
                *a = next;
                Ok(())
            }
            _ => Err(Error::argument("gradient kind does not match adapter kind")),
        }
    }

    /// Trainable values in a fixed order: `A, B` or `P, lambda, Q`.
    pub fn flat_params(&self) -> Vec<f32> {
        match self {
            Adapter::None => Vec::new(),
            Adapter::Lora(a) => [a.a.data(), a.b.data()].concat(),
            Adapter::AdaLora(a) => [a.p.data(), &a.lambda[..], a.q.data()].concat(),
        }
    }

    /// Inverse of [`Adapter::flat_params`].
    pub fn set_flat_params(&mut self, values: &[f32]) -> Result<()> {
        if values.len() != self.trainable_params() {
            return Err(Error::argument(format!(
                "expected {} adapter values, got {}",
                self.trainable_params(),
                values.len()
            )));
        }
        match self {
            Adapter::None => {}
            Adapter::Lora(a) => {
                let (va, vb) = values.split_at(a.a.len());
                a.a.data_mut().copy_from_slice(va);
                a.b.data_mut().copy_from_slice(vb);
            }
            Adapter::AdaLora(a) => {
                let (vp, rest) = values.split_at(a.p.len());
                let (vl, vq) = rest.split_at(a.lambda.len());
                a.p.data_mut().copy_from_slice(vp);
                a.lambda.copy_from_slice(vl);
                a.q.data_mut().copy_from_slice(vq);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(ADAPTER_MAGIC);
        let (kind, dims, hyper, mats): (u8, [usize; 3], f32, Vec<Matrix>) = match self {
            Adapter::None => return Err(Error::argument("no adapter to serialize")),
            Adapter::Lora(a) => (
                0,
                [a.in_dim(), a.out_dim(), a.rank()],
                a.init_sigma,
                vec![a.a.clone(), a.b.clone()],
            ),
            Adapter::AdaLora(a) => (
                1,
                [a.in_dim(), a.out_dim(), a.max_rank()],
                a.gamma,
                vec![
                    a.p.clone(),
                    Matrix::new(1, a.lambda.len(), a.lambda.clone())?,
                    a.q.clone(),
                ],
            ),
        };
        out.push(kind);
        for d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&hyper.to_le_bytes());
        for m in &mats {
            out.extend_from_slice(&m.to_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(ADAPTER_MAGIC)?;
        let kind = r.read_u8()?;
        let (n, k, rank) = (r.read_len()?, r.read_len()?, r.read_len()?);
        let hyper = r.read_f32()?;
        let expect = |m: &Matrix, shape: (usize, usize), name: &str| {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(Error::format(format!(
                    "adapter factor {name} has shape {:?}, header says {shape:?}",
                    m.shape()
                )))
            }
        };
        let adapter = match kind {
            0 => {
                let a = Matrix::read_bytes(&mut r)?;
                let b = Matrix::read_bytes(&mut r)?;
                expect(&a, (n, rank), "A")?;
                expect(&b, (rank, k), "B")?;
                Adapter::Lora(LoraAdapter {
                    a,
                    b,
                    init_sigma: hyper,
                })
            }
            1 => {
                let p = Matrix::read_bytes(&mut r)?;
                let lambda = Matrix::read_bytes(&mut r)?;
                let q = Matrix::read_bytes(&mut r)?;
                expect(&p, (n, rank), "P")?;
                expect(&lambda, (1, rank), "lambda")?;
                expect(&q, (rank, k), "Q")?;
                Adapter::AdaLora(AdaLoraAdapter {
                    p,
                    lambda: lambda.into_data(),
                    q,
                    gamma: hyper,
                })
            }
            other => return Err(Error::format(format!("unknown adapter kind {other}"))),
        };
        if !r.is_exhausted() {
            return Err(Error::format("trailing bytes after adapter"));
        }
        Ok(adapter)
    }
}

impl AdapterGrads {
    pub fn flatten(&self) -> Vec<f32> {
        match self {
            AdapterGrads::None => Vec::new(),
            AdapterGrads::Lora(g) => [g.a.data(), g.b.data()].concat(),
            AdapterGrads::AdaLora(g) => [g.p.data(), &g.lambda[..], g.q.data()].concat(),
        }
    }

    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &AdapterGrads) -> Result<()> {
        match (self, other) {
            (AdapterGrads::None, AdapterGrads::None) => Ok(()),
            (AdapterGrads::Lora(a), AdapterGrads::Lora(b)) => {
                a.a.add_assign(&b.a)?;
                a.b.add_assign(&b.b)
            }
            (AdapterGrads::AdaLora(a), AdapterGrads::AdaLora(b)) => {
                a.p.add_assign(&b.p)?;
                a.q.add_assign(&b.q)?;
                a.lambda.iter_mut().zip(&b.lambda).for_each(|(x, y)| *x += y);
                Ok(())
            }
            _ => Err(Error::argument("cannot add gradients of different adapter kinds")),
        }
    }
}

/// `x W + adapter(x)` for an already materialized `W`.
pub fn linear_forward(x: &Matrix, w: &Matrix, adapter: &Adapter) -> Result<Matrix> {
    let mut y = matmul(x, w)?;
    if let Some(d) = adapter.delta(x)? {
        y.add_assign(&d)?;
    }
    Ok(y)
}

/// Backward of [`linear_forward`] with `W` frozen: adapter gradients and
/// `dL/dx = g W^T + adapter contribution`.
pub fn linear_backward(x: &Matrix, w: &Matrix, adapter: &Adapter, g: &Matrix) -> Result<(AdapterGrads, Matrix)> {
    let (grads, dx_adapter) = adapter.backward(x, g)?;
    let mut dx = matmul(g, &w.transpose())?;
    if let Some(d) = dx_adapter {
        dx.add_assign(&d)?;
    }
    Ok((grads, dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adalora::init_adalora;
    use crate::lora::init_lora;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lora_checkpoint_roundtrip() {
        let mut ad = init_lora(5, 3, 2, 0.1, 4).unwrap();
        ad.a = Matrix::random_normal(5, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let a = Adapter::Lora(ad);
        let bytes = a.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"PFTA\0");
        assert_eq!(Adapter::from_bytes(&bytes).unwrap(), a);
    }

    #[test]
    fn adalora_checkpoint_roundtrip() {
        let mut ad = init_adalora(4, 6, 3, 0.5, 2).unwrap();
        ad.lambda = vec![0.0, -1.5, 2.25];
        let a = Adapter::AdaLora(ad);
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes[4], 1);
        assert_eq!(u64::from_le_bytes(bytes[21..29].try_into().unwrap()), 3);
        assert_eq!(Adapter::from_bytes(&bytes).unwrap(), a);
    }

    #[test]
    fn checkpoint_errors() {
        let a = Adapter::Lora(init_lora(3, 3, 1, 0.1, 0).unwrap());
        let bytes = a.to_bytes().unwrap();
        for cut in [0, 4, 20, bytes.len() - 1] {
            assert!(matches!(Adapter::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(Adapter::from_bytes(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Adapter::from_bytes(&long), Err(Error::Format(_))));
        assert!(Adapter::None.to_bytes().is_err());
    }

    #[test]
    fn flat_params_roundtrip() {
        let mut a = Adapter::AdaLora(init_adalora(4, 3, 2, 0.1, 9).unwrap());
        let mut v = a.flat_params();
        assert_eq!(v.len(), a.trainable_params());
        v.iter_mut().enumerate().for_each(|(i, x)| *x = i as f32);
        a.set_flat_params(&v).unwrap();
        assert_eq!(a.flat_params(), v);
        assert!(a.set_flat_params(&v[1..]).is_err());
    }

    #[test]
    fn none_adapter_is_plain_linear() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::random_normal(2, 3, 1.0, &mut r);
        let w = Matrix::random_normal(3, 4, 1.0, &mut r);
        assert_eq!(linear_forward(&x, &w, &Adapter::None).unwrap(), matmul(&x, &w).unwrap());
        let g = Matrix::random_normal(2, 4, 1.0, &mut r);
        let (grads, dx) = linear_backward(&x, &w, &Adapter::None, &g).unwrap();
        assert_eq!(grads, AdapterGrads::None);
        assert_eq!(dx, matmul(&g, &w.transpose()).unwrap());
    }

    #[test]
    fn mismatched_grads_rejected() {
        let mut a = Adapter::Lora(init_lora(3, 3, 1, 0.1, 0).unwrap());
        assert!(a.sgd_step(&AdapterGrads::None, 0.1, None, 0).is_err());
    }
}
