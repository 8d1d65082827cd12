//! Whole-model finite-difference gradient check at 64-bit precision.
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{M2ort, ModelConfig, Mode, MultiScaleBatch};
use crate::rng::{stream, Stream};
use crate::tensor::{Graph, Tensor};
use crate::train::mse_loss;

/// Step of the five-point central difference. Its truncation error is
/// `O(h^4)`, so a larger step keeps round-off in the loss difference small
/// relative to tiny gradients.
pub const STEP: f64 = 1e-3;
/// Entries where both gradients are below this are not scored.
pub const FLOOR: f64 = 1e-8;

/// The small configuration the check runs on by default.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        depth: 2,
        heads: 2,
        channels: 16,
        patch: 16,
        mask_prob: 0.0,
        genes: 5,
        height: 32,
        width: 32,
        dropout: 0.0,
        ..ModelConfig::variant(crate::model::Variant::Small)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst entry, and its flat index.
    pub worst: (String, usize),
    pub checked: usize,
    pub skipped_small: usize,
}

fn loss(model: &M2ort<f64>, batch: &MultiScaleBatch<f64>, target: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let pred = model.forward(&mut g, &bound, batch, &mut Mode::eval())?;
    let t = g.constant(target.clone());
    let l = mse_loss(&mut g, pred, t)?;
    Ok(g.value(l).item())
}

/// Compares analytic gradients of an MSE loss on random inputs against
/// central differences for every parameter entry. Mask and dropout must be
/// off so the forward pass is deterministic.
pub fn gradcheck(config: &ModelConfig, batch_size: usize, seed: u64) -> Result<GradcheckReport> {
    config.validate()?;
    if config.mask_prob != 0.0 || config.dropout != 0.0 {
        return Err(Error::InvalidConfig(
            "gradient check needs mask_prob = 0 and dropout = 0".into(),
        ));
    }
    let mut model = M2ort::<f64>::new(config.clone(), seed)?;
    let mut rng = stream(seed, Stream::Probe);
    // Move every parameter off its structured init so biases, shifts and
    // gains all carry non-trivial gradients.
    for (_, t) in model.params_mut().iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let batch = MultiScaleBatch::<f32>::random(config, batch_size, &mut rng).cast::<f64>();
    let target = Tensor::new(
        [batch_size, config.genes],
        (0..batch_size * config.genes).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;

    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let pred = model.forward(&mut g, &bound, &batch, &mut Mode::eval())?;
    let t = g.constant(target.clone());
    let l = mse_loss(&mut g, pred, t)?;
    let mut grads = g.backward(l)?;
    let analytic = bound.gradients(&mut grads);

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
        skipped_small: 0,
    };
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for name in names {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::InvalidInput(format!("no gradient for {name}")))?
            .clone();
        for i in 0..grad.numel() {
            let orig = model.params().get(&name).expect("bound name").data()[i];
            let mut at = |v: f64| -> Result<f64> {
                model.params_mut().get_mut(&name).expect("bound name").data_mut()[i] = v;
                loss(&model, &batch, &target)
            };
            let (p1, p2) = (at(orig + STEP)?, at(orig + 2.0 * STEP)?);
            let (m1, m2) = (at(orig - STEP)?, at(orig - 2.0 * STEP)?);
            model.params_mut().get_mut(&name).expect("bound name").data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * STEP);
            let a = grad.data()[i];
            if a.abs() < FLOOR && numeric.abs() < FLOOR {
                report.skipped_small += 1;
                continue;
            }
            report.checked += 1;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (name.clone(), i);
            }
        }
    }
    Ok(report)
}
