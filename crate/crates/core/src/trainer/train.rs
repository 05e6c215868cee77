use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adalora::attach_adalora_adapters;
use crate::adapter::AdapterKind;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lora::attach_adapters;
use crate::trainer::config::RunConfig;
use crate::trainer::model::{AdapterizedModel, FrozenWeight, ModelGrads, Projection};
use crate::trainer::report::frozen_storage;
use crate::trainer::task::{make_toy_task_with, Example, ToyTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub adapter_kind: AdapterKind,
    pub precision: String,
    /// Mini-batch loss before each update, including the AdaLoRA penalty.
    pub loss_curve: Vec<f32>,
    /// Loss on the whole training split before the first update.
    pub initial_loss: f32,
    /// Loss on the whole training split after the last update.
    pub final_loss: f32,
    pub validation_loss: f32,
    pub trainable_params: usize,
    pub total_params: usize,
    pub frozen_projection_bytes: usize,
    pub dense_projection_bytes: usize,
    pub compression_ratio: f64,
    pub mean_step_ms: f64,
    /// Effective rank per targeted adapter after each step.
    pub rank_trace: Vec<Vec<usize>>,
    /// AdaLoRA budget `b_t` applied at each step; empty otherwise.
    pub budget_trace: Vec<usize>,
    pub frozen_digest: String,
}

/// Student model for `config`: the task's base, projections quantized if
/// requested, adapters attached to the targets.
pub fn build_model(config: &RunConfig, task: &ToyTask) -> Result<AdapterizedModel> {
    let mut model = task.base.clone();
    model.head_trainable = config.head_trainable;
    if let Some(scheme) = config.quantization.scheme() {
        model.quantize_projections(&scheme)?;
    }
    let a = &config.adapter;
    let seed = config.seed.wrapping_add(0x5eed);
    match a.kind {
        AdapterKind::None => Ok(model),
        AdapterKind::Lora => attach_adapters(model, &a.targets, a.r, a.sigma, seed),
        AdapterKind::AdaLora => attach_adalora_adapters(model, &a.targets, a.r, a.gamma, seed),
    }
}

/// Mean squared error and its gradient for one example, scaled by `weight`.
fn example_loss_grad(model: &AdapterizedModel, ex: &Example, weight: f32) -> Result<(f64, ModelGrads)> {
    let cache = model.forward_cached(&ex.input)?;
    let diff = cache.out.sub(&ex.target)?;
    let n = diff.len() as f64;
    let loss = diff.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / n;
    let g = diff.scale(2.0 * weight / n as f32);
    Ok((loss, model.backward(&cache, &g)?))
}

/// Mean loss and summed gradient over `batch`, reduced in batch order.
pub fn batch_loss_grad(model: &AdapterizedModel, batch: &[&Example], exec: Exec) -> Result<(f32, ModelGrads)> {
    if batch.is_empty() {
        return Err(Error::argument("empty batch"));
    }
    let weight = 1.0 / batch.len() as f32;
    let parts = exec.map(batch, |ex| example_loss_grad(model, ex, weight));
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch")?;
    for part in iter {
        let (l, g) = part?;
        loss += l;
        grads.accumulate(&g)?;
    }
    let loss = (loss / batch.len() as f64) as f32 + model.penalty()?;
    model.add_penalty_grads(&mut grads)?;
    Ok((loss, grads))
}

/// Mean loss over `examples` plus the adapters' penalty.
pub fn dataset_loss(model: &AdapterizedModel, examples: &[Example], exec: Exec) -> Result<f32> {
    if examples.is_empty() {
        return Err(Error::argument("empty dataset"));
    }
    let parts = exec.map(examples, |ex| -> Result<f64> {
        let diff = model.forward(&ex.input)?.sub(&ex.target)?;
        Ok(diff.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / diff.len() as f64)
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok((total / examples.len() as f64) as f32 + model.penalty()?)
}

fn apply_update(model: &mut AdapterizedModel, grads: &ModelGrads, config: &RunConfig, t: usize) -> Result<()> {
    let schedule = config.schedule()?;
    for p in Projection::ALL {
        model
            .projection_mut(p)
            .adapter
            .sgd_step(grads.projection(p), config.eta, schedule.as_ref(), t)?;
    }
    if let Some(g) = &grads.head {
        model.head.sgd_update(g, config.eta)?;
    }
    Ok(())
}

pub fn train(config: &RunConfig) -> Result<TrainReport> {
    Ok(train_model_with(config, Exec::default())?.0)
}

/// Run training and return the report together with the trained model.
///
/// Step `t` (0-based) uses examples `t*B .. t*B + B` of the training split,
/// wrapping around, and prunes AdaLoRA adapters to `budget_at(t + 1)`.
pub fn train_model_with(config: &RunConfig, exec: Exec) -> Result<(TrainReport, AdapterizedModel)> {
    config.validate()?;
    let task = make_toy_task_with(config.seed, config.dims, config.dataset_size, &config.teacher, exec)?;
    let mut model = build_model(config, &task)?;
    let digest = model.frozen_digest();
    let n = task.train.len();
    let bs = config.batch_size.unwrap_or(n).min(n);
    let schedule = config.schedule()?;
    let targets = &config.adapter.targets;

    let initial_loss = dataset_loss(&model, &task.train, exec)?;
    let mut loss_curve = Vec::with_capacity(config.steps);
    let mut rank_trace = Vec::with_capacity(config.steps);
    let mut budget_trace = Vec::new();
    let mut elapsed = 0.0;
    for t in 0..config.steps {
        let start = Instant::now();
        let batch: Vec<&Example> = (0..bs).map(|j| &task.train[(t * bs + j) % n]).collect();
        let (loss, grads) = batch_loss_grad(&model, &batch, exec)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: t, loss });
        }
        loss_curve.push(loss);
        apply_update(&mut model, &grads, config, t + 1)?;
        elapsed += start.elapsed().as_secs_f64();
        if let Some(s) = &schedule {
            budget_trace.push(s.budget_at(t + 1)?);
        }
        if config.adapter.kind != AdapterKind::None {
            rank_trace.push(
                targets
                    .iter()
                    .map(|&p| model.projection(p).adapter.effective_rank())
                    .collect(),
            );
        }
    }
    let final_loss = dataset_loss(&model, &task.train, exec)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            step: config.steps,
            loss: final_loss,
        });
    }
    let validation_loss = dataset_loss(&model, &task.validation, exec)?;
    let storage = frozen_storage(config.dims, &config.quantization, config.quantization.precision)?;
    let frozen_digest = model.frozen_digest();
    if frozen_digest != digest {
        return Err(Error::argument("frozen weights changed during training"));
    }
    let report = TrainReport {
        adapter_kind: config.adapter.kind,
        precision: config.quantization.precision.name().to_string(),
        loss_curve,
        initial_loss,
        final_loss,
        validation_loss,
        trainable_params: model.trainable_params(),
        total_params: model.total_params(),
        frozen_projection_bytes: storage.bytes,
        dense_projection_bytes: storage.dense_bytes,
        compression_ratio: storage.ratio(),
        mean_step_ms: if config.steps == 0 {
            0.0
        } else {
            1e3 * elapsed / config.steps as f64
        },
        rank_trace,
        budget_trace,
        frozen_digest,
    };
    Ok((report, model))
}

/// Write adapters (`<p>.pfta`), quantized projections (`w<p>.pftq`) and a
/// trainable head (`head.pft1`) into `dir`. Returns the written paths in a
/// fixed order.
pub fn write_checkpoint(model: &AdapterizedModel, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    for p in Projection::ALL {
        let layer = model.projection(p);
        if !layer.adapter.is_none() {
            put(format!("{p}.pfta"), layer.adapter.to_bytes()?)?;
        }
        if let FrozenWeight::Quantized(q) = &layer.weight {
            put(format!("w{p}.pftq"), q.to_bytes())?;
        }
    }
    if model.head_trainable {
        put("head.pft1".to_string(), model.head.to_bytes())?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::config::{AdapterConfig, BudgetConfig, Precision};

    fn small(kind: AdapterKind) -> RunConfig {
        RunConfig {
            seed: 3,
            dataset_size: 20,
            steps: 30,
            eta: 0.05,
            adapter: AdapterConfig {
                kind,
                r: 2,
                sigma: 0.3,
                ..AdapterConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn head_only_training_decreases_loss() {
        let cfg = RunConfig {
            head_trainable: true,
            steps: 50,
            ..small(AdapterKind::None)
        };
        let r = train(&cfg).unwrap();
        assert!(r.loss_curve.windows(2).all(|w| w[1] < w[0]), "{:?}", r.loss_curve);
        assert_eq!(r.trainable_params, 8 * 16);
    }

    #[test]
    fn step_zero_loss_is_adapter_independent() {
        let losses: Vec<f32> = [AdapterKind::Lora, AdapterKind::AdaLora]
            .into_iter()
            .map(|k| train(&RunConfig { steps: 1, ..small(k) }).unwrap().loss_curve[0])
            .collect();
        let head = train(&RunConfig {
            steps: 1,
            head_trainable: true,
            ..small(AdapterKind::None)
        })
        .unwrap();
        assert_eq!(losses[0], head.loss_curve[0]);
        assert!((losses[1] - losses[0]).abs() <= 1e-6 * losses[0]);
    }

    #[test]
    fn parallel_matches_sequential() {
        let cfg = small(AdapterKind::Lora);
        let (a, ma) = train_model_with(&cfg, Exec::Parallel).unwrap();
        let (b, mb) = train_model_with(&cfg, Exec::Sequential).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(ma, mb);
    }

    #[test]
    fn adalora_respects_budget() {
        let cfg = RunConfig {
            budget: BudgetConfig {
                b_init: Some(2),
                b_final: Some(1),
                warmup_steps: 5,
            },
            ..small(AdapterKind::AdaLora)
        };
        let r = train(&cfg).unwrap();
        for (ranks, &b) in r.rank_trace.iter().zip(&r.budget_trace) {
            assert!(ranks.iter().all(|&k| k <= b));
        }
        assert_eq!(*r.budget_trace.last().unwrap(), 1);
    }

    #[test]
    fn quantized_run_keeps_weights_and_writes_checkpoint() {
        let mut cfg = small(AdapterKind::Lora);
        cfg.quantization.precision = Precision::Nf4;
        cfg.quantization.block_size = 16;
        let (r, model) = train_model_with(&cfg, Exec::default()).unwrap();
        assert!(r.compression_ratio > 1.0);
        let dir = tempfile::tempdir().unwrap();
        let files = write_checkpoint(&model, dir.path()).unwrap();
        let names: Vec<_> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, ["q.pfta", "wq.pftq", "k.pfta", "wk.pftq", "v.pfta", "wv.pftq"]);
    }

    #[test]
    fn divergence_names_the_step() {
        let cfg = RunConfig {
            eta: 1e6,
            steps: 50,
            head_trainable: true,
            ..small(AdapterKind::None)
        };
        assert!(matches!(train(&cfg), Err(Error::Divergence { .. })));
    }
}
