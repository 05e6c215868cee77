use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::matmul;
use crate::matrix::Matrix;
use crate::trainer::config::{ModelDims, TeacherConfig};
use crate::trainer::model::{AdapterizedModel, FrozenWeight, Projection};

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Matrix,
    pub target: Matrix,
}

/// Synthetic regression task. `base` is the student's starting point;
/// targets come from `teacher`.
#[derive(Clone, Debug)]
pub struct ToyTask {
    pub base: AdapterizedModel,
    pub teacher: AdapterizedModel,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
}

/// Random dense model with weights of variance `1 / fan_in`.
pub fn random_model(dims: ModelDims, rng: &mut ChaCha8Rng) -> Result<AdapterizedModel> {
    let ModelDims { d_model, d_k, .. } = dims;
    let s_in = 1.0 / (d_model as f32).sqrt();
    AdapterizedModel::new(
        Matrix::random_normal(d_model, d_model, s_in, rng),
        Matrix::random_normal(d_model, d_k, s_in, rng),
        Matrix::random_normal(d_model, d_k, s_in, rng),
        Matrix::random_normal(d_model, d_k, s_in, rng),
        Matrix::random_normal(d_k, d_model, 1.0 / (d_k as f32).sqrt(), rng),
    )
}

/// Base plus a low-rank shift on every projection.
fn make_teacher(
    base: &AdapterizedModel,
    dims: ModelDims,
    cfg: &TeacherConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdapterizedModel> {
    let mut teacher = base.clone();
    if cfg.shift_rank == 0 || cfg.shift_scale == 0.0 {
        return Ok(teacher);
    }
    let norm = cfg.shift_scale / ((cfg.shift_rank * dims.d_model) as f32).sqrt();
    for p in Projection::ALL {
        let layer = teacher.projection_mut(p);
        let FrozenWeight::Dense(w) = &layer.weight else {
            return Err(Error::argument("teacher base must be dense"));
        };
        let u = Matrix::random_normal(dims.d_model, cfg.shift_rank, 1.0, rng);
        let v = Matrix::random_normal(cfg.shift_rank, dims.d_k, 1.0, rng);
        layer.weight = FrozenWeight::Dense(w.add(&matmul(&u, &v)?.scale(norm))?);
    }
    Ok(teacher)
}

pub fn make_toy_task(seed: u64, dims: ModelDims, size: usize, teacher: &TeacherConfig) -> Result<ToyTask> {
    make_toy_task_with(seed, dims, size, teacher, Exec::default())
}

/// Inputs are standard normal `seq_len x d_model` matrices. Example `i` draws
/// from its own generator stream, so generation order does not matter. The
/// first 80% of examples form the training split.
pub fn make_toy_task_with(
    seed: u64,
    dims: ModelDims,
    size: usize,
    teacher: &TeacherConfig,
    exec: Exec,
) -> Result<ToyTask> {
    if dims.d_model == 0 || dims.d_k == 0 || dims.seq_len == 0 {
        return Err(Error::argument("toy task dims must be positive"));
    }
    if size < 2 {
        return Err(Error::argument("toy task needs at least 2 examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = random_model(dims, &mut rng)?;
    let teacher = make_teacher(&base, dims, teacher, &mut rng)?;
    let examples = exec.map_range(size, |i| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(i as u64 + 1);
        let input = Matrix::random_normal(dims.seq_len, dims.d_model, 1.0, &mut r);
        let target = teacher.forward(&input)?;
        Ok(Example { input, target })
    });
    let mut examples = examples.into_iter().collect::<Result<Vec<_>>>()?;
    let n_train = (size * 4 / 5).clamp(1, size - 1);
    let validation = examples.split_off(n_train);
    Ok(ToyTask {
        base,
        teacher,
        train: examples,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    const DIMS: ModelDims = ModelDims {
        d_model: 16,
        d_k: 8,
        seq_len: 4,
    };

    #[test]
    fn same_seed_same_data() {
        let t = TeacherConfig::default();
        let a = make_toy_task(5, DIMS, 20, &t).unwrap();
        let b = make_toy_task_with(5, DIMS, 20, &t, Exec::Sequential).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);
        assert_ne!(a.train, make_toy_task(6, DIMS, 20, &t).unwrap().train);
        assert_eq!((a.train.len(), a.validation.len()), (16, 4));
    }

    #[test]
    fn teacher_fits_its_own_data() {
        let task = make_toy_task(1, DIMS, 10, &TeacherConfig::default()).unwrap();
        for ex in &task.validation {
            let y = task.teacher.forward(&ex.input).unwrap();
            assert!(y.max_abs_diff(&ex.target).unwrap() == 0.0);
        }
        assert_ne!(task.teacher, task.base);
    }

    #[test]
    fn generates_quickly() {
        let start = Instant::now();
        let task = make_toy_task(0, DIMS, 256, &TeacherConfig::default()).unwrap();
        assert_eq!(task.train.len() + task.validation.len(), 256);
        assert!(start.elapsed().as_secs_f64() < 1.0);
    }
}
