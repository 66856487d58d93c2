//! AdamW training with validation-based early stopping, and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{attribution_hit_rate, best_f1, pr_auc, MetricReport};
use crate::model::{bce_sum, LossReduction, Model, PreparedRoom};
use crate::params::{Gradients, Matrix, ParamStore};
use crate::tape::sigmoid_scalar;

/// Adam with decoupled weight decay: `p *= 1 - lr * wd`, then the Adam step.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(params: &ParamStore, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .ids()
            .map(|id| Matrix::zeros(params.get(id).dim()))
            .collect();
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let decay = 1.0 - lr * self.weight_decay;
        for (id, g) in grads.iter() {
            let i = id.index();
            let p = params.get_mut(id);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p *= decay;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-room training loss over the epoch (dropout active).
    pub train_loss: f64,
    /// Mean per-room validation loss.
    pub val_loss: f64,
    pub val_pr_auc: f64,
    pub val_f1: f64,
    pub val_threshold: f64,
    pub improved: bool,
    pub seconds: f64,
}

/// Snapshot of the best epoch so far.
#[derive(Clone, Debug)]
pub struct Best {
    pub epoch: usize,
    pub val_pr_auc: f64,
    /// Validation-selected max-F1 threshold on scores.
    pub threshold: f64,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub epochs_done: usize,
    pub best: Option<Best>,
    pub logs: Vec<EpochLog>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_pr_auc: f64,
    pub threshold: f64,
    pub stopped_early: bool,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let optimizer = AdamW::new(
            &model.params,
            model.config.learning_rate,
            model.config.weight_decay,
        );
        Self {
            model,
            optimizer,
            epochs_done: 0,
            best: None,
            logs: Vec::new(),
        }
    }

    /// Continues from a saved state; `best` describes the saved parameters.
    pub fn resume(
        model: Model,
        optimizer: AdamW,
        epochs_done: usize,
        best_val_pr_auc: f64,
        threshold: f64,
    ) -> Self {
        let best = Best {
            epoch: epochs_done,
            val_pr_auc: best_val_pr_auc,
            threshold,
            params: model.params.clone(),
            optimizer: optimizer.clone(),
        };
        Self {
            model,
            optimizer,
            epochs_done,
            best: Some(best),
            logs: Vec::new(),
        }
    }

    /// Summed loss gradients of a batch, reduced in room order whatever the
    /// thread count.
    fn batch_gradients(
        &self,
        rooms: &[&PreparedRoom],
        epoch: usize,
        offset: usize,
    ) -> (f64, Gradients) {
        let seed = self.model.config.seed;
        let dropout_rng = |i: usize| {
            ChaCha8Rng::seed_from_u64(mix(mix(seed, epoch as u64 + 1), (offset + i) as u64))
        };
        let threads = self.model.config.threads.min(rooms.len()).max(1);
        let mut total = Gradients::zeros_like(&self.model.params);
        let mut loss = 0.0;
        if threads == 1 {
            for (i, room) in rooms.iter().enumerate() {
                let (l, g) = self.model.room_gradients(room, Some(dropout_rng(i)));
                loss += l;
                total.add_assign(&g);
            }
        } else {
            let chunk = rooms.len().div_ceil(threads);
            let results: Vec<Vec<(f64, Gradients)>> = std::thread::scope(|s| {
                let handles: Vec<_> = rooms
                    .chunks(chunk)
                    .enumerate()
                    .map(|(c, part)| {
                        let model = &self.model;
                        s.spawn(move || {
                            part.iter()
                                .enumerate()
                                .map(|(i, room)| {
                                    model.room_gradients(room, Some(dropout_rng(c * chunk + i)))
                                })
                                .collect()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker panicked"))
                    .collect()
            });
            for (l, g) in results.iter().flatten() {
                loss += l;
                total.add_assign(g);
            }
        }
        (loss, total)
    }

    /// One pass over `train` in a seeded shuffled order. Returns the mean
    /// per-room loss.
    pub fn train_epoch(&mut self, train: &[PreparedRoom]) -> f64 {
        let epoch = self.epochs_done + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            self.model.config.seed,
            0xE90C + epoch as u64,
        )));
        let batch = self.model.config.batch_size;
        let mut total = 0.0;
        for (b, idx) in order.chunks(batch).enumerate() {
            let rooms: Vec<&PreparedRoom> = idx.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = self.batch_gradients(&rooms, epoch, b * batch);
            if self.model.config.loss_reduction == LossReduction::Mean {
                grads.scale(1.0 / rooms.len() as f64);
            }
            self.optimizer.update(&mut self.model.params, &grads);
            total += loss;
        }
        self.epochs_done = epoch;
        total / train.len() as f64
    }

    /// Trains until `max_epochs` or until validation PR-AUC has not improved
    /// for `patience` epochs, then restores the best parameters.
    pub fn fit(
        &mut self,
        train: &[PreparedRoom],
        val: &[PreparedRoom],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<TrainSummary> {
        if train.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        for room in train.iter().chain(val) {
            self.model.check_room(room)?;
        }
        let cfg = self.model.config.clone();
        let mut stale = 0;
        let mut run = 0;
        let mut stopped_early = false;
        while self.epochs_done < cfg.max_epochs {
            let start = Instant::now();
            let train_loss = self.train_epoch(train);
            let eval = evaluate_scores(&self.model, val)?;
            let labels: Vec<u8> = val.iter().map(|r| r.label).collect();
            let val_pr_auc = pr_auc(&eval.scores, &labels)?;
            let (val_f1, val_threshold) = best_f1(&eval.scores, &labels)?;
            let improved = self.best.as_ref().is_none_or(|b| val_pr_auc > b.val_pr_auc);
            if improved {
                self.best = Some(Best {
                    epoch: self.epochs_done,
                    val_pr_auc,
                    threshold: val_threshold,
                    params: self.model.params.clone(),
                    optimizer: self.optimizer.clone(),
                });
                stale = 0;
            } else {
                stale += 1;
            }
            let log = EpochLog {
                epoch: self.epochs_done,
                train_loss,
                val_loss: eval.loss / val.len() as f64,
                val_pr_auc,
                val_f1,
                val_threshold,
                improved,
                seconds: start.elapsed().as_secs_f64(),
            };
            on_epoch(&log);
            self.logs.push(log);
            run += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
        let best = self
            .best
            .as_ref()
            .ok_or_else(|| Error::Config("no epoch was run".into()))?;
        self.model.params = best.params.clone();
        Ok(TrainSummary {
            epochs_run: run,
            best_epoch: best.epoch,
            best_val_pr_auc: best.val_pr_auc,
            threshold: best.threshold,
            stopped_early,
        })
    }
}

pub struct ScoredRooms {
    pub scores: Vec<f64>,
    /// Summed evaluation-mode BCE.
    pub loss: f64,
}

/// Evaluation-mode scores of every room, in order.
pub fn evaluate_scores(model: &Model, rooms: &[PreparedRoom]) -> Result<ScoredRooms> {
    let mut scores = Vec::with_capacity(rooms.len());
    let mut loss = 0.0;
    for room in rooms {
        model.check_room(room)?;
        let g = crate::tape::Graph::new(&model.params);
        let z = g.scalar(model.trace(&g, room).logit);
        loss += bce_sum(&[z], &[room.label])?;
        scores.push(sigmoid_scalar(z));
    }
    Ok(ScoredRooms { scores, loss })
}

/// Full metric report on `rooms`. The F1 uses `threshold` when given, and
/// the hit rate averages over positive rooms with planted capsules.
pub fn evaluate(
    model: &Model,
    rooms: &[PreparedRoom],
    threshold: Option<f64>,
) -> Result<MetricReport> {
    let mut scores = Vec::with_capacity(rooms.len());
    let mut hits = Vec::new();
    for room in rooms {
        model.check_room(room)?;
        let out = model.predict(room);
        scores.push(out.score);
        if room.label == 1 {
            if let Some(rate) = room
                .planted
                .as_deref()
                .and_then(|p| attribution_hit_rate(&out.attribution, p, None))
            {
                hits.push(rate);
            }
        }
    }
    let labels: Vec<u8> = rooms.iter().map(|r| r.label).collect();
    let mut report = MetricReport::compute(&scores, &labels, threshold)?;
    report.attribution_hit_rate =
        (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64);
    Ok(report)
}

/// Mean hit rate of uniform attribution over the same rooms: the chance
/// level for [`evaluate`]'s `attribution_hit_rate`.
pub fn uniform_hit_rate(rooms: &[PreparedRoom]) -> Option<f64> {
    let rates: Vec<f64> = rooms
        .iter()
        .filter(|r| r.label == 1)
        .filter_map(|r| {
            let n = r.num_capsules();
            r.planted
                .as_deref()
                .and_then(|p| attribution_hit_rate(&vec![1.0 / n as f64; n], p, None))
        })
        .collect();
    (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
}
