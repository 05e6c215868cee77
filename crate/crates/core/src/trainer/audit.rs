//! Gradient audit: analytic gradients from the training code against central
//! differences of a separate double-precision forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matrix::Matrix;
use crate::trainer::config::RunConfig;
use crate::trainer::model::{AdapterizedModel, Projection};
use crate::trainer::task::{make_toy_task_with, Example};
use crate::trainer::train::{batch_loss_grad, build_model};

/// Largest trainable-parameter count the audit accepts.
pub const AUDIT_MAX_PARAMS: usize = 500;
/// Examples from the training split used by the audit loss.
pub const AUDIT_EXAMPLES: usize = 4;
/// Relative error denominator floor: `|a - n| / max(|a|, |n|, floor)`.
pub const AUDIT_REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub adapter_kind: AdapterKind,
    pub epsilon: f64,
    pub params_checked: usize,
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Dense f64 matrix for the reference forward pass.
#[derive(Clone, Debug)]
struct M {
    r: usize,
    c: usize,
    d: Vec<f64>,
}

impl M {
    fn from_f32(m: &Matrix) -> M {
        M {
            r: m.rows(),
            c: m.cols(),
            d: m.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    fn from_slice(r: usize, c: usize, v: &[f64]) -> M {
        M { r, c, d: v.to_vec() }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    fn mul(&self, o: &M) -> M {
        assert_eq!(self.c, o.r);
        let mut d = vec![0.0; self.r * o.c];
        for i in 0..self.r {
            for j in 0..o.c {
                d[i * o.c + j] = (0..self.c).map(|t| self.at(i, t) * o.at(t, j)).sum();
            }
        }
        M { r: self.r, c: o.c, d }
    }

    fn t(&self) -> M {
        let mut d = vec![0.0; self.d.len()];
        for i in 0..self.r {
            for j in 0..self.c {
                d[j * self.r + i] = self.at(i, j);
            }
        }
        M {
            r: self.c,
            c: self.r,
            d,
        }
    }

    fn plus(&self, o: &M) -> M {
        M {
            r: self.r,
            c: self.c,
            d: self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect(),
        }
    }

    /// `||self - I||_F^2` for a square matrix.
    fn dist_to_identity_sq(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.r {
            for j in 0..self.c {
                let v = self.at(i, j) - if i == j { 1.0 } else { 0.0 };
                s += v * v;
            }
        }
        s
    }
}

/// Frozen pieces of the model plus the layout of the flat parameter vector.
struct Reference {
    embedding: M,
    weights: [M; 3],
    adapters: [AdapterKind; 3],
    gammas: [f64; 3],
    ranks: [usize; 3],
    head: M,
    head_trainable: bool,
}

impl Reference {
    fn new(model: &AdapterizedModel) -> Result<Self> {
        let mut weights = Vec::new();
        let mut adapters = [AdapterKind::None; 3];
        let mut gammas = [0.0; 3];
        let mut ranks = [0; 3];
        for (i, p) in Projection::ALL.into_iter().enumerate() {
            let layer = model.projection(p);
            weights.push(M::from_f32(&*layer.weight.materialize()?));
            adapters[i] = layer.adapter.kind();
            match &layer.adapter {
                Adapter::None => {}
                Adapter::Lora(a) => ranks[i] = a.rank(),
                Adapter::AdaLora(a) => {
                    ranks[i] = a.max_rank();
                    gammas[i] = f64::from(a.gamma);
                }
            }
        }
        let weights: [M; 3] = weights.try_into().expect("three projections");
        Ok(Self {
            embedding: M::from_f32(&model.embedding),
            weights,
            adapters,
            gammas,
            ranks,
            head: M::from_f32(&model.head),
            head_trainable: model.head_trainable,
        })
    }

    /// Penalized mean squared error over `examples` with parameters `theta`.
    fn loss(&self, theta: &[f64], examples: &[Example]) -> f64 {
        let mut rest = theta;
        let mut take = |n: usize| {
            let (a, b) = rest.split_at(n);
            rest = b;
            a
        };
        // adapter factors per projection (LoRA uses lambda = 1)
        let mut deltas: Vec<Option<(M, Vec<f64>, M)>> = Vec::new();
        let mut penalty = 0.0;
        for i in 0..3 {
            let (n, k) = (self.weights[i].r, self.weights[i].c);
            let r = self.ranks[i];
            match self.adapters[i] {
                AdapterKind::None => deltas.push(None),
                AdapterKind::Lora => {
                    let a = M::from_slice(n, r, take(n * r));
                    let b = M::from_slice(r, k, take(r * k));
                    deltas.push(Some((a, vec![1.0; r], b)));
                }
                AdapterKind::AdaLora => {
                    let p = M::from_slice(n, r, take(n * r));
                    let lambda = take(r).to_vec();
                    let q = M::from_slice(r, k, take(r * k));
                    penalty +=
                        self.gammas[i] * (p.t().mul(&p).dist_to_identity_sq() + q.mul(&q.t()).dist_to_identity_sq());
                    deltas.push(Some((p, lambda, q)));
                }
            }
        }
        let head = if self.head_trainable {
            M::from_slice(self.head.r, self.head.c, take(self.head.r * self.head.c))
        } else {
            self.head.clone()
        };
        let mut total = 0.0;
        for ex in examples {
            let h = M::from_f32(&ex.input).mul(&self.embedding);
            let proj: Vec<M> = (0..3)
                .map(|i| {
                    let base = h.mul(&self.weights[i]);
                    match &deltas[i] {
                        None => base,
                        Some((a, lambda, b)) => {
                            let mut ha = h.mul(a);
                            for row in ha.d.chunks_mut(ha.c) {
                                row.iter_mut().zip(lambda).for_each(|(v, l)| *v *= l);
                            }
                            base.plus(&ha.mul(b))
                        }
                    }
                })
                .collect();
            let scale = 1.0 / (proj[0].c as f64).sqrt();
            let mut s = proj[0].mul(&proj[1].t());
            for row in 0..s.r {
                let vals = &mut s.d[row * s.c..(row + 1) * s.c];
                let max = vals.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
                let mut z = 0.0;
                for v in vals.iter_mut() {
                    *v = (*v * scale - max).exp();
                    z += *v;
                }
                vals.iter_mut().for_each(|v| *v /= z);
            }
            let y = s.mul(&proj[2]).mul(&head);
            let t = M::from_f32(&ex.target);
            let se: f64 = y.d.iter().zip(&t.d).map(|(a, b)| (a - b) * (a - b)).sum();
            total += se / y.d.len() as f64;
        }
        total / examples.len() as f64 + penalty
    }
}

/// Build the model for `config`, move every trainable parameter away from its
/// initial value (so no gradient vanishes by construction), and compare the
/// analytic gradient of every parameter with central differences.
pub fn finite_difference_audit(config: &RunConfig, epsilon: f64) -> Result<AuditReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::argument(format!("epsilon must be positive, got {epsilon}")));
    }
    config.validate()?;
    let task = make_toy_task_with(
        config.seed,
        config.dims,
        config.dataset_size,
        &config.teacher,
        Exec::Sequential,
    )?;
    let mut model = build_model(config, &task)?;
    let n_params = model.trainable_params();
    if n_params > AUDIT_MAX_PARAMS {
        return Err(Error::argument(format!(
            "audit needs at most {AUDIT_MAX_PARAMS} trainable parameters, config has {n_params}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xa0d1);
    let noise = Normal::new(0.0f32, 0.3).expect("valid normal");
    let shifted: Vec<f32> = model
        .flat_params()
        .iter()
        .map(|&v| v + noise.sample(&mut rng))
        .collect();
    model.set_flat_params(&shifted)?;

    let examples: Vec<Example> = task.train.iter().take(AUDIT_EXAMPLES).cloned().collect();
    let batch: Vec<&Example> = examples.iter().collect();
    let (_, grads) = batch_loss_grad(&model, &batch, Exec::Sequential)?;
    let analytic = grads.flatten();

    let reference = Reference::new(&model)?;
    let mut theta: Vec<f64> = shifted.iter().map(|&v| f64::from(v)).collect();
    let mut report = AuditReport {
        adapter_kind: config.adapter.kind,
        epsilon,
        params_checked: theta.len(),
        max_rel_error: 0.0,
        worst_param: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + epsilon;
        let up = reference.loss(&theta, &examples);
        theta[i] = orig - epsilon;
        let down = reference.loss(&theta, &examples);
        theta[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = f64::from(analytic[i]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(AUDIT_REL_FLOOR);
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst_param = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
