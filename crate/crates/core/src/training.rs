//! SGD training loops for single models and RG/RD pairs.
//!
//! A batch is processed image by image on per-image tapes; gradients are
//! summed in batch order and averaged, so results are bit-reproducible for
//! a given seed regardless of timing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::boxes::BBox;
use crate::loss::{compute_loss, LossBreakdown, LossError, LossInputs};
use crate::model::{forward_pair, Bindings, Model, TemporalPair, Variant};
use crate::optim::{lr_at, Sgd, SgdConfig, StepError};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            seed: 0,
            sgd: SgdConfig::default(),
        }
    }
}

/// One labeled image.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Tensor,
    pub gts: Vec<(BBox, usize)>,
}

/// Per-step log line (batch means).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub total: f64,
    pub loc_first: f64,
    pub loc_second: f64,
    pub conf: f64,
    pub lr: f64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("step {step}: {source}")]
    Loss {
        step: usize,
        #[source]
        source: LossError,
    },
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: StepError,
    },
    #[error("training requires a non-empty dataset")]
    EmptyDataset,
}

struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(len: usize, seed: u64) -> Self {
        let mut b = Batcher {
            order: (0..len).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor];
        self.cursor += 1;
        idx
    }
}

fn accumulate_grads(
    acc: &mut [Option<Vec<f64>>],
    tape: &Tape,
    bindings: &Bindings,
) {
    for (k, &id) in bindings.ids().iter().enumerate() {
        if let Some(g) = tape.grad(id) {
            match &mut acc[k] {
                Some(buf) => {
                    for (b, v) in buf.iter_mut().zip(g) {
                        *b += v;
                    }
                }
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }
}

fn scale_grads(acc: &mut [Option<Vec<f64>>], factor: f64) {
    for g in acc.iter_mut().flatten() {
        for v in g.iter_mut() {
            *v *= factor;
        }
    }
}

fn loss_inputs<'a>(
    model: &'a Model,
    ar: &'a [crate::tape::TensorId],
    heads: &'a [crate::heads::HeadOutput],
    gts: &'a [(BBox, usize)],
) -> LossInputs<'a> {
    LossInputs {
        ar,
        heads,
        anchors: model.anchors(),
        gts,
        num_classes: model.config.num_classes,
        coding: model.config.coding,
        clip_refined: model
            .config
            .clip_refined_anchors
            .then_some(model.config.input_size as f64),
        grad_through_decode: model.config.grad_through_refined_decode,
    }
}

/// Trains a self-contained variant (dual-refinement net or the plain
/// baseline) and returns the per-step metrics log.
pub fn train_model(
    model: &mut Model,
    data: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRow>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    assert_ne!(model.config.variant, Variant::Rd, "train refinement detectors as a pair");
    let mut sgd = Sgd::new(cfg.sgd, &model.params);
    let mut batcher = Batcher::new(data.len(), cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg.steps, cfg.sgd.base_lr);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
        let mut sums = LossBreakdown::zero();
        for _ in 0..cfg.batch_size {
            let sample = &data[batcher.next()];
            let mut pass = model.forward(&sample.image, true);
            let inputs = loss_inputs(model, &pass.ar, &pass.heads, &sample.gts);
            let (loss_id, bd) =
                compute_loss(&mut pass.tape, &inputs).map_err(|source| TrainError::Loss { step, source })?;
            sums.total += bd.total;
            sums.loc_first += bd.loc_first;
            sums.loc_second += bd.loc_second;
            sums.conf += bd.conf;
            if let Some(id) = loss_id {
                pass.tape.backward(id);
                accumulate_grads(&mut grads, &pass.tape, &pass.bindings);
            }
        }
        scale_grads(&mut grads, 1.0 / cfg.batch_size as f64);
        sgd.step(&mut model.params, &grads, lr)
            .map_err(|source| TrainError::Step { step, source })?;
        log.push(MetricsRow {
            step,
            total: sums.total / cfg.batch_size as f64,
            loc_first: sums.loc_first / cfg.batch_size as f64,
            loc_second: sums.loc_second / cfg.batch_size as f64,
            conf: sums.conf / cfg.batch_size as f64,
            lr,
        });
    }
    Ok(log)
}

/// Joint training of a reference generator and refinement detector on
/// static images: the generator plays the anchor-refinement role, the
/// detector the detection role, sharing one objective per image.
pub fn train_pair(
    pair: &mut TemporalPair,
    data: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRow>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rg_sgd = Sgd::new(cfg.sgd, &pair.rg.params);
    let mut rd_sgd = Sgd::new(cfg.sgd, &pair.rd.params);
    let mut batcher = Batcher::new(data.len(), cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg.steps, cfg.sgd.base_lr);
        let mut rg_grads: Vec<Option<Vec<f64>>> = vec![None; pair.rg.params.len()];
        let mut rd_grads: Vec<Option<Vec<f64>>> = vec![None; pair.rd.params.len()];
        let mut sums = LossBreakdown::zero();
        for _ in 0..cfg.batch_size {
            let sample = &data[batcher.next()];
            let mut pass = forward_pair(&pair.rg, &pair.rd, &sample.image, true);
            let inputs = loss_inputs(&pair.rd, &pass.ar, &pass.heads, &sample.gts);
            let (loss_id, bd) =
                compute_loss(&mut pass.tape, &inputs).map_err(|source| TrainError::Loss { step, source })?;
            sums.total += bd.total;
            sums.loc_first += bd.loc_first;
            sums.loc_second += bd.loc_second;
            sums.conf += bd.conf;
            if let Some(id) = loss_id {
                pass.tape.backward(id);
                accumulate_grads(&mut rg_grads, &pass.tape, &pass.rg_bindings);
                accumulate_grads(&mut rd_grads, &pass.tape, &pass.rd_bindings);
            }
        }
        scale_grads(&mut rg_grads, 1.0 / cfg.batch_size as f64);
        scale_grads(&mut rd_grads, 1.0 / cfg.batch_size as f64);
        rg_sgd
            .step(&mut pair.rg.params, &rg_grads, lr)
            .map_err(|source| TrainError::Step { step, source })?;
        rd_sgd
            .step(&mut pair.rd.params, &rd_grads, lr)
            .map_err(|source| TrainError::Step { step, source })?;
        log.push(MetricsRow {
            step,
            total: sums.total / cfg.batch_size as f64,
            loc_first: sums.loc_first / cfg.batch_size as f64,
            loc_second: sums.loc_second / cfg.batch_size as f64,
            conf: sums.conf / cfg.batch_size as f64,
            lr,
        });
    }
    Ok(log)
}
