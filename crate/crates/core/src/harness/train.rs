use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::baseline::RecurrentBaseline;
use crate::data::{
    split_dataset, stage_types_of, windows_of, Holdout, SplitMode, Vocabulary, WaferSequence, WindowedSample, ZScore,
};
use crate::error::{Error, Result};
use crate::losses::{batch_regularizer, sample_objective, LabelMode, LossConfig};
use crate::network::{ModelKind, Network};
use crate::params::Adam;
use crate::stage_modules::ModularNetwork;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Seed offsets keep the independent random streams of one run apart.
const VALIDATION_STREAM: u64 = 0x5eed_0001;
const SHUFFLE_STREAM: u64 = 0x5eed_0002;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean measurement loss over samples.
    pub l1: f64,
    /// Mean proximity loss over samples where it is defined.
    pub l2: f64,
    /// Mean distinction loss over batches.
    pub l3: f64,
    pub total: f64,
    /// Measurement loss on the held-out validation windows.
    pub validation: Option<f64>,
}

/// A trained network with everything needed to apply it to raw sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub vocabulary: Vocabulary,
    pub zscore: ZScore,
    pub network: Network,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (early stopping).
    pub best_epoch: Option<usize>,
}

impl TrainedModel {
    /// Standardizes raw sequences with the training statistics.
    pub fn prepare(&self, sequences: &[WaferSequence]) -> Vec<WaferSequence> {
        let mut out = sequences.to_vec();
        self.zscore.apply(&mut out);
        out
    }
}

pub fn build_network(cfg: &TrainConfig, vocabulary: &Vocabulary, stage_types: &[usize]) -> Result<Network> {
    let sensors = vocabulary.sensors.len();
    let kqis = vocabulary.kqis.len();
    Ok(match cfg.model {
        ModelKind::Modular => Network::Modular(ModularNetwork::new(
            cfg.modular.clone(),
            sensors,
            kqis,
            vocabulary.mod_types.len(),
            stage_types,
            cfg.loss.label_mode == LabelMode::SoftAttention,
            cfg.seed,
        )?),
        ModelKind::RecurrentBaseline => {
            Network::RecurrentBaseline(RecurrentBaseline::new(sensors, cfg.modular.hidden, kqis, cfg.seed)?)
        }
    })
}

/// Fits z-score statistics, carves a validation split, builds the network
/// for the stage types present in `train`, and trains it.
pub fn fit(train: &[WaferSequence], vocabulary: &Vocabulary, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Split("train side is empty".into()));
    }
    let zscore = ZScore::fit(train, vocabulary.sensors.len());
    let mut standardized = train.to_vec();
    zscore.apply(&mut standardized);

    let (fit_part, val_part) = if cfg.validation_fraction > 0.0 && cfg.patience > 0 {
        match split_dataset(
            &standardized,
            SplitMode::Standard,
            &Holdout::Fraction(cfg.validation_fraction),
            cfg.seed ^ VALIDATION_STREAM,
        ) {
            Ok(parts) => parts,
            Err(_) => (standardized, Vec::new()),
        }
    } else {
        (standardized, Vec::new())
    };
    let train_windows = windows_of(&fit_part, cfg.window)?;
    let val_windows = windows_of(&val_part, cfg.window)?;
    if train_windows.is_empty() {
        return Err(Error::Config(format!("no training sequence has at least {} stages", cfg.window)));
    }
    let mut network = build_network(cfg, vocabulary, &stage_types_of(&fit_part))?;
    let (history, best_epoch) = train_network(&mut network, &train_windows, &val_windows, cfg)?;
    Ok(TrainedModel {
        config: cfg.clone(),
        vocabulary: vocabulary.clone(),
        zscore,
        network,
        history,
        best_epoch,
    })
}

#[derive(Default)]
struct Running {
    l1: f64,
    l1_n: usize,
    l2: f64,
    l2_n: usize,
    l3: f64,
    l3_n: usize,
}

impl Running {
    fn means(&self) -> (f64, f64, f64) {
        let avg = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        (avg(self.l1, self.l1_n), avg(self.l2, self.l2_n), avg(self.l3, self.l3_n))
    }
}

fn diverged(network: &Network, epoch: usize, batch: usize, what: &str) -> Error {
    for (name, norm) in network.params().norms() {
        log::error!("  {name}: |θ| = {norm:e}");
    }
    Error::Diverged {
        epoch,
        batch,
        detail: format!("{what} is not finite"),
    }
}

/// Mini-batch Adam over `train`, with mask clamping after every step and
/// early stopping on `validation` when it is nonempty and patience > 0.
pub fn train_network(
    network: &mut Network,
    train: &[WindowedSample],
    validation: &[WindowedSample],
    cfg: &TrainConfig,
) -> Result<(Vec<EpochRecord>, Option<usize>)> {
    let loss = cfg.effective_loss();
    let mut adam = Adam::new(cfg.optimizer, network.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let early_stopping = !validation.is_empty() && cfg.patience > 0;
    let mut best: Option<(f64, usize, Network)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut run = Running::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&WindowedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let grads = batch_gradients(network, &batch, &loss, &mut run, epoch, b)?;
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged(network, epoch, b, "gradient"));
            }
            adam.step(network.params_mut(), &grads)?;
            network.after_step();
            if !network.params().all_finite() {
                return Err(diverged(network, epoch, b, "parameter"));
            }
        }
        let (l1, l2, l3) = run.means();
        let total = loss_total(&loss, l1, l2, l3);
        let val = if validation.is_empty() {
            None
        } else {
            Some(validation_loss(network, validation)?)
        };
        log::info!("epoch {epoch}: l1 {l1:.4} l2 {l2:.4} l3 {l3:.4} total {total:.4} val {val:?}");
        history.push(EpochRecord {
            epoch,
            l1,
            l2,
            l3,
            total,
            validation: val,
        });
        if let (true, Some(v)) = (early_stopping, val) {
            let improved = best.as_ref().is_none_or(|(b, _, _)| v < *b);
            if improved {
                best = Some((v, epoch, network.clone()));
            } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
                log::info!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    match best {
        Some((_, epoch, params)) => {
            *network = params;
            Ok((history, Some(epoch)))
        }
        None => Ok((history, None)),
    }
}

fn loss_total(loss: &LossConfig, l1: f64, l2: f64, l3: f64) -> f64 {
    crate::losses::total_loss(
        loss,
        crate::losses::LossParts {
            measurement: l1,
            proximity: l2,
            distinction: l3,
        },
    )
}

fn batch_gradients(
    network: &Network,
    batch: &[&WindowedSample],
    loss: &LossConfig,
    run: &mut Running,
    epoch: usize,
    b: usize,
) -> Result<Vec<Tensor>> {
    let mut grads = network.params().zeros_like();
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let mut tape = Tape::new();
        let trace = network.forward(&mut tape, sample)?;
        let obj = sample_objective(&mut tape, network, &trace, sample, loss)?;
        if let Some(m) = obj.measurement {
            run.l1 += tape.scalar(m);
            run.l1_n += 1;
        }
        if let Some(p) = obj.proximity {
            run.l2 += tape.scalar(p);
            run.l2_n += 1;
        }
        if let Some(w) = obj.weighted {
            if !tape.scalar(w).is_finite() {
                return Err(diverged(network, epoch, b, "loss"));
            }
            tape.backward(w)?.accumulate_params(&mut grads, scale);
        }
    }
    let mut tape = Tape::new();
    if let Some((l3, weighted)) = batch_regularizer(&mut tape, network, loss)? {
        run.l3 += tape.scalar(l3);
        run.l3_n += 1;
        tape.backward(weighted)?.accumulate_params(&mut grads, 1.0);
    }
    Ok(grads)
}

/// Mean measurement loss (hard crop) over `samples`. Every loss
/// configuration is selected by this same criterion, so ablation rows differ
/// only in what they optimize.
pub fn validation_loss(network: &Network, samples: &[WindowedSample]) -> Result<f64> {
    let criterion = LossConfig::measurement_only();
    let mut sum = 0.0;
    for sample in samples {
        let mut tape = Tape::new();
        let trace = network.forward(&mut tape, sample)?;
        if let Some(m) = sample_objective(&mut tape, network, &trace, sample, &criterion)?.measurement {
            sum += tape.scalar(m);
        }
    }
    Ok(sum / samples.len().max(1) as f64)
}
