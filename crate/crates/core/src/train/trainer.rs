use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::metrics::mse_loss;
use crate::data::{batch_order, sha256_hex, Corpus, Dataset, GenePanel, Split};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, CheckpointMeta, M2ort, ModelConfig, Mode};
use crate::rng::{stream, ForwardRng, Stream};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph};

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,train_loss,val_pcc,val_rmse,seconds";
pub const BEST_DIR: &str = "best";
pub const FINAL_DIR: &str = "final";
pub const LAST_GOOD_DIR: &str = "last_good";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate every this many epochs (and after the last one).
    pub eval_every: usize,
    /// Stop after this many validations without a new best PCC.
    pub patience: Option<usize>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Record elapsed seconds in the log; when false the column is 0 so
    /// logs are reproducible byte for byte.
    pub log_wall_time: bool,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 100,
            batch_size: 96,
            seed: 0,
            eval_every: 1,
            patience: None,
            max_steps: None,
            log_wall_time: false,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr {} must be positive", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch_size and eval_every must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_pcc: Option<f64>,
    pub val_rmse: Option<f64>,
    pub seconds: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            opt(r.val_pcc),
            opt(r.val_rmse),
            r.seconds
        )
        .expect("string write");
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Highest validation mean PCC seen, when a validation set was given.
    pub best: Option<Checkpoint>,
    pub best_val_pcc: Option<f64>,
    pub log: Vec<LogRow>,
    /// Training loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

/// One forward/backward/Adam update on a batch; returns the batch loss.
/// On error the parameters and optimizer state are left untouched.
pub fn train_step(
    model: &mut M2ort<f32>,
    state: &mut AdamState<f32>,
    data: &Dataset,
    indices: &[usize],
    rng: &mut ForwardRng,
) -> Result<f64> {
    let (batch, targets) = data.batch(indices, model.config())?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let pred = model.forward(&mut g, &bound, &batch, &mut Mode::train(rng))?;
    let target = g.constant(targets);
    let loss_var = mse_loss(&mut g, pred, target)?;
    let loss = g.value(loss_var).item() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss ({loss})")));
    }
    let mut grads = g.backward(loss_var)?;
    let grads = bound.gradients(&mut grads);
    adam_step(model.params_mut(), &grads, state)?;
    Ok(loss)
}

fn checkpoint(model: &M2ort<f32>, state: &AdamState<f32>, epoch: usize, spec: &TrainSpec, log: &[LogRow]) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        optimizer: Some(state.clone()),
        metadata: CheckpointMeta {
            epoch,
            step: state.step,
            seed: spec.seed,
            loss_digest: sha256_hex(log_csv(log).as_bytes()),
        },
    }
}

/// Seeded MSE training with Adam. With `out`, writes the log after every
/// epoch and `best/` and `final/` checkpoints at the end.
pub fn train(
    config: &ModelConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    spec: &TrainSpec,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    spec.validate()?;
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training split has no spots".into()));
    }
    if config.genes != train_set.genes.len() {
        return Err(Error::InvalidConfig(format!(
            "config predicts {} genes but the panel has {}",
            config.genes,
            train_set.genes.len()
        )));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut model = M2ort::<f32>::new(config.clone(), spec.seed)?;
    let mut state = AdamState::new(AdamConfig {
        lr: spec.lr,
        ..AdamConfig::default()
    });
    let mut shuffle = stream(spec.seed, Stream::Shuffle);
    let mut fwd = ForwardRng::new(spec.seed);
    let start = Instant::now();

    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut stale = 0;
    let mut epoch = 0;
    'epochs: while epoch < spec.epochs {
        epoch += 1;
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for indices in batch_order(train_set.len(), spec.batch_size, Some(&mut shuffle)) {
            if spec.max_steps.is_some_and(|m| step_losses.len() >= m) {
                break;
            }
            let loss = match train_step(&mut model, &mut state, train_set, &indices, &mut fwd) {
                Ok(l) => l,
                Err(e) => {
                    if let Some(dir) = out {
                        checkpoint(&model, &state, epoch - 1, spec, &log).save(dir.join(LAST_GOOD_DIR))?;
                        log::error!("training aborted; last good parameters saved to {}", dir.join(LAST_GOOD_DIR).display());
                    }
                    return Err(e);
                }
            };
            step_losses.push(loss);
            loss_sum += loss * indices.len() as f64;
            seen += indices.len();
        }
        let done = epoch == spec.epochs || spec.max_steps.is_some_and(|m| step_losses.len() >= m);
        let mut row = LogRow {
            epoch,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            val_pcc: None,
            val_rmse: None,
            seconds: if spec.log_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        let mut stop = done;
        if let Some(val) = val_set.filter(|v| !v.is_empty()) {
            if epoch % spec.eval_every == 0 || done {
                let r = evaluate(&model, val, spec.batch_size)?.report;
                row.val_pcc = Some(r.mean_pcc);
                row.val_rmse = Some(r.mean_rmse);
                log.push(row.clone());
                if best.as_ref().is_none_or(|(p, _)| r.mean_pcc > *p) {
                    best = Some((r.mean_pcc, checkpoint(&model, &state, epoch, spec, &log)));
                    stale = 0;
                } else {
                    stale += 1;
                    if spec.patience.is_some_and(|p| stale >= p) {
                        log::info!("no validation improvement in {stale} evaluations; stopping");
                        stop = true;
                    }
                }
            } else {
                log.push(row.clone());
            }
        } else {
            log.push(row.clone());
        }
        log::info!(
            "epoch {epoch}: loss {:.6} val pcc {} rmse {}",
            row.train_loss,
            opt(row.val_pcc),
            opt(row.val_rmse)
        );
        if let Some(dir) = out {
            let path = dir.join(LOG_FILE);
            fs::write(&path, log_csv(&log)).map_err(|e| Error::io(path, e))?;
        }
        if stop {
            break 'epochs;
        }
    }

    let final_checkpoint = checkpoint(&model, &state, epoch, spec, &log);
    if let Some(dir) = out {
        final_checkpoint.save(dir.join(FINAL_DIR))?;
        if let Some((_, ck)) = &best {
            ck.save(dir.join(BEST_DIR))?;
        }
    }
    let (best_val_pcc, best) = match best {
        Some((p, c)) => (Some(p), Some(c)),
        None => (None, None),
    };
    Ok(TrainOutcome {
        final_checkpoint,
        best,
        best_val_pcc,
        log,
        step_losses,
    })
}

/// Loads the train and validation splits of a corpus and trains on them.
pub fn train_corpus(
    config: &ModelConfig,
    corpus: &Corpus,
    panel: &GenePanel,
    spec: &TrainSpec,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let train_set = Dataset::load(corpus, Split::Train, panel)?;
    let val_set = Dataset::load(corpus, Split::Val, panel)?;
    train(config, &train_set, Some(&val_set), spec, out)
}
