//! Training configuration, the training loop and evaluation.

use serde::{Deserialize, Serialize};

use crate::aggregation::WindowSpec;
use crate::codebook::{kmeans_init, InitBuffer, LossNorm};
use crate::data::{gen_synthetic, split, SyntheticConfig, SyntheticSample};
use crate::error::{Error, Result};
use crate::fusion::FusionStack;
use crate::metrics::{accuracy, confusion, macro_f1, Confusion};
use crate::model::{forward, forward_backward, Architecture, ClassifierParams, Gradients, ModelParams, PoolingMode};
use crate::numerics::Rng;
use crate::optim::{adam_step, AdamConfig, AdamState, GroupConfig, PlateauConfig, PlateauScheduler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of codebook centers.
    pub codebook_size: usize,
    /// Fraction of the training set offered to the initialization buffer.
    pub buffer_fraction: f64,
    /// Maximum frames the initialization buffer retains.
    pub buffer_capacity: usize,
    pub kmeans_iters: usize,
    /// Projection width of the first and second attention stage.
    pub width1: usize,
    pub width2: usize,
    pub pooling: PoolingMode,
    pub stage2: bool,
    pub loss_norm: LossNorm,
    /// Train/validation/test ratios.
    pub split: [f64; 3],
    pub window: WindowSpec,
    pub adam: AdamConfig,
    pub classifier: GroupConfig,
    pub quantizer: GroupConfig,
    pub scheduler: PlateauConfig,
    pub data: SyntheticConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            epochs: 30,
            batch_size: 8,
            codebook_size: 45,
            buffer_fraction: 0.5,
            buffer_capacity: 16_384,
            kmeans_iters: crate::codebook::DEFAULT_KMEANS_ITERS,
            width1: 32,
            width2: 32,
            pooling: PoolingMode::Vq,
            stage2: true,
            loss_norm: LossNorm::L2,
            split: [7.0, 2.0, 1.0],
            window: WindowSpec::default(),
            adam: AdamConfig::default(),
            classifier: GroupConfig::TOY_CLASSIFIER,
            quantizer: GroupConfig::TOY_QUANTIZER,
            scheduler: PlateauConfig::default(),
            data: SyntheticConfig::default(),
        }
    }
}

impl TrainingConfig {
    /// The default config with the published optimizer rates.
    pub fn published() -> Self {
        Self {
            classifier: GroupConfig::CLASSIFIER,
            quantizer: GroupConfig::QUANTIZER,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainingConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.window.validate()?;
        self.data.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.codebook_size == 0 {
            return bad("codebook_size must be positive".into());
        }
        if self.width1 == 0 || self.width2 == 0 {
            return bad("attention widths must be positive".into());
        }
        if !(self.buffer_fraction > 0.0 && self.buffer_fraction <= 1.0) {
            return bad("buffer_fraction must lie in (0, 1]".into());
        }
        for (name, g) in [("classifier", self.classifier), ("quantizer", self.quantizer)] {
            if !(g.lr >= 0.0 && g.weight_decay >= 0.0 && g.lr.is_finite()) {
                return bad(format!("{name} rates must be finite and nonnegative"));
            }
        }
        let s = self.scheduler;
        if !(s.factor > 0.0 && s.factor < 1.0) || !(s.threshold >= 0.0) {
            return bad("scheduler factor must lie in (0, 1) and threshold be nonnegative".into());
        }
        let a = self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps be positive".into());
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            window: self.window,
            pooling: self.pooling,
            use_stage2: self.stage2,
            loss_norm: self.loss_norm,
        }
    }

    /// The dataset this config describes.
    pub fn dataset(&self) -> Result<Vec<SyntheticSample>> {
        gen_synthetic(&self.data, &mut Rng::new(self.seed))
    }
}

/// Parameters together with the switches that interpret them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub params: ModelParams,
}

/// Adam moments for both groups and the schedule's current scale.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub classifier: AdamState,
    pub quantizer: Option<AdamState>,
    pub lr_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_quant: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    pub lr_scale: f64,
}

impl EpochMetrics {
    pub const TSV_HEADER: &'static str = "epoch\ttrain_loss\tval_loss\tval_acc\tval_f1\tlr_scale";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.train_loss, self.val_loss, self.val_acc, self.val_f1, self.lr_scale
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub metrics: Vec<EpochMetrics>,
    /// k-means inertia of the initial codebook, if one was built.
    pub init_inertia: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: Confusion,
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub mean_quant: f64,
}

pub fn evaluate(model: &Model, samples: &[SyntheticSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut pairs = Vec::with_capacity(samples.len());
    let (mut loss, mut ce, mut quant) = (0.0, 0.0, 0.0);
    for s in samples {
        let out = forward(&model.params, &model.arch, &s.audio, &s.midi, s.label)?;
        pairs.push((s.label, out.predicted()));
        loss += out.total;
        ce += out.ce;
        quant += out.quant;
    }
    let n = samples.len() as f64;
    let m = confusion(pairs);
    Ok(Evaluation {
        accuracy: accuracy(&m),
        macro_f1: macro_f1(&m),
        confusion: m,
        mean_loss: loss / n,
        mean_ce: ce / n,
        mean_quant: quant / n,
    })
}

/// Builds the fusion stack and classifier, and for codebook pooling fills the
/// initialization buffer from the first part of `train_order` and clusters it.
pub fn init_model(config: &TrainingConfig, train: &[SyntheticSample], rng: &mut Rng) -> Result<(Model, Option<f64>)> {
    let mut init_rng = rng.fork(1);
    let fusion = FusionStack::init(
        config.data.audio.dim,
        config.data.midi.dim,
        config.width1,
        config.width2,
        &mut init_rng,
    );
    let head_dim = if config.stage2 { config.width2 } else { config.width1 };
    let classifier = ClassifierParams::init(head_dim, &mut init_rng);

    let (codebook, inertia) = if config.pooling == PoolingMode::Vq {
        let cached = ((train.len() as f64) * config.buffer_fraction).ceil() as usize;
        let mut buf = InitBuffer::new(config.data.audio.dim, config.buffer_capacity, rng.next_u64());
        for s in train.iter().take(cached.max(1)) {
            buf.add(&s.audio)?;
        }
        let fit = kmeans_init(&buf, config.codebook_size, config.kmeans_iters, &mut rng.fork(2))?;
        (Some(fit.codebook), Some(fit.inertia))
    } else {
        (None, None)
    };

    let model = Model {
        arch: config.architecture(),
        params: ModelParams {
            codebook,
            fusion,
            classifier,
        },
    };
    Ok((model, inertia))
}

pub fn init_optimizer(params: &ModelParams) -> OptimizerState {
    OptimizerState {
        classifier: AdamState::for_shapes(&params.classifier_group_shapes()),
        quantizer: params
            .codebook
            .as_ref()
            .map(|cb| AdamState::for_shapes(&[cb.centers().shape()])),
        lr_scale: 1.0,
    }
}

/// Applies one batch gradient to both parameter groups.
pub fn apply_gradients(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    config: &TrainingConfig,
) -> Result<()> {
    let scale = state.lr_scale;
    let cls_grads = grads.classifier_group();
    adam_step(
        &mut params.classifier_group_mut(),
        &cls_grads,
        &mut state.classifier,
        &config.adam,
        config.classifier.lr * scale,
        config.classifier.weight_decay,
    )?;
    if let (Some(cb), Some(g), Some(st)) = (params.codebook.as_mut(), grads.codebook.as_ref(), state.quantizer.as_mut()) {
        adam_step(
            &mut [cb.centers_mut()],
            &[g],
            st,
            &config.adam,
            config.quantizer.lr * scale,
            config.quantizer.weight_decay,
        )?;
    }
    Ok(())
}

/// Splits `dataset` by `config.split` and trains on it.
pub fn train(dataset: &[SyntheticSample], config: &TrainingConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let splits = split(dataset, config.split)?;
    train_on(splits.train, splits.val, config)
}

/// Single-threaded, deterministic training loop.
pub fn train_on(train: &[SyntheticSample], val: &[SyntheticSample], config: &TrainingConfig) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut rng = Rng::new(config.seed ^ 0x5EED_0F_7A17);
    let mut order: Vec<usize> = (0..train.len()).collect();
    rng.shuffle(&mut order);
    let shuffled: Vec<SyntheticSample> = order.iter().map(|&i| train[i].clone()).collect();

    let (mut model, init_inertia) = init_model(config, &shuffled, &mut rng)?;
    let mut opt = init_optimizer(&model.params);
    let mut scheduler = PlateauScheduler::new(config.scheduler);
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        if epoch > 1 {
            rng.shuffle(&mut order);
        }
        let (mut loss_sum, mut ce_sum, mut quant_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let mut grads = Gradients::zeros_like(&model.params);
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &train[i];
                let (out, g) = forward_backward(&model.params, &model.arch, &s.audio, &s.midi, s.label)?;
                grads.accumulate(&g, w)?;
                loss_sum += out.total;
                ce_sum += out.ce;
                quant_sum += out.quant;
            }
            apply_gradients(&mut model.params, &grads, &mut opt, config)?;
        }
        let n = train.len() as f64;
        let train_loss = loss_sum / n;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }

        let (val_loss, val_acc, val_f1) = if val.is_empty() {
            (train_loss, f64::NAN, f64::NAN)
        } else {
            let ev = evaluate(&model, val)?;
            (ev.mean_loss, ev.accuracy, ev.macro_f1)
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        opt.lr_scale = scheduler.step(val_loss);
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            train_ce: ce_sum / n,
            train_quant: quant_sum / n,
            val_loss,
            val_acc,
            val_f1,
            lr_scale: opt.lr_scale,
        });
    }

    Ok(TrainOutcome {
        model,
        optimizer: opt,
        metrics,
        init_inertia,
    })
}
