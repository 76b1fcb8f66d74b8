//! Training loops: the undefended baseline, the alpha-mix defenses, VAT and
//! PGD adversarial training, all on SGD with momentum and a cosine schedule.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::{ensemble_attack_lenient, AttackConfig};
use crate::data::{
    mix_batch, sample_alpha, AlphaSource, LabeledDataset, MixConfig, PIXEL_MAX, PIXEL_MIN,
};
use crate::error::{Error, Result};
use crate::models::{accuracy, Model};
use crate::nn::{self, BatchStats, Mode, Reduction};
use crate::tape::{Tape, Var};
use crate::tensor::{l2_norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseVariant {
    None,
    FixedAlpha {
        alpha: f64,
    },
    FixedAlphaKl {
        alpha: f64,
        lambda: f64,
    },
    BetaAlphaKl {
        p: f64,
        q: f64,
        lambda: f64,
    },
    Vat {
        epsilon: f64,
        iterations: usize,
        lambda: f64,
    },
    Pgd {
        epsilon: f32,
        step_size: f32,
        iterations: usize,
    },
}

impl DefenseVariant {
    pub fn flagship() -> Self {
        DefenseVariant::BetaAlphaKl {
            p: 2.0,
            q: 4.0,
            lambda: 10.0,
        }
    }

    pub fn vat_default() -> Self {
        DefenseVariant::Vat {
            epsilon: 15.0,
            iterations: 3,
            lambda: 1.0,
        }
    }

    pub fn pgd_default(iterations: usize) -> Self {
        DefenseVariant::Pgd {
            epsilon: 8.0,
            step_size: 2.0,
            iterations,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DefenseVariant::None => "none",
            DefenseVariant::FixedAlpha { .. } => "fixed_alpha",
            DefenseVariant::FixedAlphaKl { .. } => "fixed_alpha_kl",
            DefenseVariant::BetaAlphaKl { .. } => "beta_alpha_kl",
            DefenseVariant::Vat { .. } => "vat",
            DefenseVariant::Pgd { .. } => "pgd",
        }
    }

    /// Alpha source and KL weight of the mixing variants.
    pub fn mix_config(&self) -> Option<MixConfig> {
        match *self {
            DefenseVariant::FixedAlpha { alpha } => Some(MixConfig {
                source: AlphaSource::Fixed { alpha },
                kl_weight: 0.0,
            }),
            DefenseVariant::FixedAlphaKl { alpha, lambda } => Some(MixConfig {
                source: AlphaSource::Fixed { alpha },
                kl_weight: lambda,
            }),
            DefenseVariant::BetaAlphaKl { p, q, lambda } => Some(MixConfig {
                source: AlphaSource::Beta { p, q },
                kl_weight: lambda,
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.mix_config() {
            return m.validate();
        }
        match *self {
            DefenseVariant::Vat {
                epsilon,
                iterations,
                lambda,
            } if !(epsilon > 0.0 && iterations >= 1 && lambda >= 0.0) => Err(Error::Config(format!(
                "vat needs epsilon > 0, iterations >= 1, lambda >= 0; got {epsilon}, {iterations}, {lambda}"
            ))),
            DefenseVariant::Pgd {
                epsilon,
                step_size,
                iterations,
            } if !(epsilon > 0.0 && step_size > 0.0 && iterations >= 1) => Err(Error::Config(format!(
                "pgd needs epsilon > 0, step > 0, iterations >= 1; got {epsilon}, {step_size}, {iterations}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Which side of `KL(y_clean || y_mixed)` receives the gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlGradient {
    /// Clean prediction held constant; gradient through the mixed pass.
    #[default]
    Mixed,
    /// Mixed prediction held constant and computed without a tape, so the
    /// batch costs one extra forward pass and no extra backward work.
    Clean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub defense: DefenseVariant,
    pub kl_gradient: KlGradient,
    /// Random start inside the eps-ball for PGD training.
    pub pgd_random_start: bool,
    /// Set the model's input standardization from the training set.
    pub standardize: bool,
    /// Where to write the best-validation checkpoint.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            seed: 0,
            defense: DefenseVariant::None,
            kl_gradient: KlGradient::Mixed,
            pgd_random_start: false,
            standardize: true,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "momentum must be in [0, 1), weight decay >= 0".into(),
            ));
        }
        self.defense.validate()
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                0.5 * self.learning_rate
                    * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Accuracy of the training forward passes on the inputs they saw.
    pub train_acc: f64,
    pub val_acc: f64,
    pub train_loss: f64,
    pub epoch_seconds: f64,
    /// Median of `epoch_seconds` over epochs `1..=epoch`.
    pub median_epoch_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub defense: DefenseVariant,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub median_epoch_seconds: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A training batch. `partners` are the mixing partners, row for row.
pub struct Batch<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [usize],
    pub partners: Option<&'a Tensor>,
}

/// Loss of one batch on `tape`, ready for `backward`.
pub struct Objective {
    pub loss: Var,
    /// Logits of the pass whose inputs count toward train accuracy.
    pub logits: Var,
    /// Batch-norm statistics to fold into the running estimates.
    pub batch_stats: Vec<BatchStats>,
}

pub fn loss_plain(
    model: &Model,
    tape: &mut Tape,
    params: &[Var],
    batch: &Batch,
) -> Result<Objective> {
    let x = tape.constant(batch.images.clone());
    let f = model.forward(tape, params, x, Mode::Train)?;
    let loss = nn::cross_entropy(tape, f.logits, batch.labels, Reduction::Mean)?;
    Ok(Objective {
        loss,
        logits: f.logits,
        batch_stats: f.batch_stats,
    })
}

fn partners<'a>(batch: &Batch<'a>) -> Result<&'a Tensor> {
    batch
        .partners
        .ok_or_else(|| Error::Config("mixing loss needs partner images".into()))
}

/// Cross-entropy on `(1 - alpha) x + alpha x_r` under the labels of `x`.
pub fn loss_fixed_alpha(
    model: &Model,
    tape: &mut Tape,
    params: &[Var],
    batch: &Batch,
    alpha: f64,
) -> Result<Objective> {
    let n = batch.labels.len();
    let mixed = mix_batch(batch.images, partners(batch)?, &vec![alpha; n])?;
    loss_plain(
        model,
        tape,
        params,
        &Batch {
            images: &mixed,
            labels: batch.labels,
            partners: None,
        },
    )
}

/// `CE(x, y) + lambda * KL(y_clean || y_mixed)` with one alpha per row.
/// Two forward passes and one backward pass per batch.
pub fn loss_alpha_kl(
    model: &Model,
    tape: &mut Tape,
    params: &[Var],
    batch: &Batch,
    alphas: &[f64],
    lambda: f64,
    gradient: KlGradient,
) -> Result<Objective> {
    let clean = loss_plain(model, tape, params, batch)?;
    if lambda == 0.0 {
        return Ok(clean);
    }
    let mixed = mix_batch(batch.images, partners(batch)?, alphas)?;
    let kl = match gradient {
        KlGradient::Mixed => {
            let xm = tape.constant(mixed);
            let fm = model.forward(tape, params, xm, Mode::Train)?;
            let p = tape.detach(clean.logits);
            nn::kl_divergence_logits(tape, p, fm.logits)?
        }
        KlGradient::Clean => {
            let mut side = Tape::new();
            let sp = model.bind(&mut side, false);
            let xm = side.constant(mixed);
            let fm = model.forward(&mut side, &sp, xm, Mode::Train)?;
            let q = tape.constant(side.value(fm.logits).clone());
            nn::kl_divergence_logits(tape, clean.logits, q)?
        }
    };
    let weighted = tape.scale(kl, lambda as f32);
    let loss = tape.add(clean.loss, weighted)?;
    Ok(Objective { loss, ..clean })
}

fn unit_rows(data: &mut [f32], row: usize) -> Vec<bool> {
    data.chunks_mut(row)
        .map(|r| {
            let n = l2_norm(r);
            if n > 1e-12 && n.is_finite() {
                for v in r.iter_mut() {
                    *v = (*v as f64 / n) as f32;
                }
                true
            } else {
                false
            }
        })
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    loop {
        let mut d: Vec<f32> = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z as f32
            })
            .collect();
        if unit_rows(&mut d, len)[0] {
            return d;
        }
    }
}

/// Relative size of the VAT finite-difference probe.
pub const VAT_XI_SCALE: f64 = 1e-3;

/// VAT adversarial direction `r_adv = eps * d`, `d` found by power iteration
/// on `KL(p(x) || p(x + xi d))` starting from random unit noise. The probe
/// scale is `xi = VAT_XI_SCALE * ||x_i||_2` per image. Rows whose gradient vanishes
/// restart from a fresh random direction.
pub fn vat_perturbation(
    model: &Model,
    x: &Tensor,
    epsilon: f64,
    iterations: usize,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let n = x.shape()[0];
    let row = x.len() / n;
    let xi: Vec<f32> = x
        .data()
        .chunks(row)
        .map(|r| {
            let s = l2_norm(r);
            (if s > 0.0 {
                VAT_XI_SCALE * s
            } else {
                VAT_XI_SCALE
            }) as f32
        })
        .collect();
    let p = model.logits_in_mode(x, mode)?;
    let mut d = Vec::with_capacity(x.len());
    for _ in 0..n {
        d.extend(random_unit(rng, row));
    }
    for _ in 0..iterations {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let dv = tape.leaf(Tensor::new(x.shape(), d.clone())?, true);
        let probe: Vec<f32> = xi
            .iter()
            .flat_map(|&s| std::iter::repeat_n(s, row))
            .collect();
        let probe = tape.constant(Tensor::new(x.shape(), probe)?);
        let scaled = tape.mul(dv, probe)?;
        let xc = tape.constant(x.clone());
        let xp = tape.add(xc, scaled)?;
        let f = model.forward(&mut tape, &params, xp, mode)?;
        let pv = tape.constant(p.clone());
        let kl = nn::kl_divergence_logits(&mut tape, pv, f.logits)?;
        let g = tape.backward(kl)?.wrt(dv);
        let mut next = g.into_data();
        for (i, ok) in unit_rows(&mut next, row).into_iter().enumerate() {
            if !ok {
                next[i * row..(i + 1) * row].copy_from_slice(&random_unit(rng, row));
            }
        }
        d = next;
    }
    Ok(Tensor::new(
        x.shape(),
        d.into_iter().map(|v| (epsilon * v as f64) as f32).collect(),
    )?)
}

/// `CE(x, y) + lambda * KL(p(x) || p(x + r_adv))` with `p(x)` held constant.
#[allow(clippy::too_many_arguments)]
pub fn vat_loss(
    model: &Model,
    tape: &mut Tape,
    params: &[Var],
    batch: &Batch,
    epsilon: f64,
    iterations: usize,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Objective> {
    let clean = loss_plain(model, tape, params, batch)?;
    if lambda == 0.0 {
        return Ok(clean);
    }
    let r = vat_perturbation(model, batch.images, epsilon, iterations, Mode::Train, rng)?;
    let xr: Vec<f32> = batch
        .images
        .data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| a + b)
        .collect();
    let xv = tape.constant(Tensor::new(batch.images.shape(), xr)?);
    let f = model.forward(tape, params, xv, Mode::Train)?;
    let p = tape.detach(clean.logits);
    let kl = nn::kl_divergence_logits(tape, p, f.logits)?;
    let weighted = tape.scale(kl, lambda as f32);
    let loss = tape.add(clean.loss, weighted)?;
    Ok(Objective { loss, ..clean })
}

/// Cross-entropy on `iterations`-step l-inf adversaries crafted against the
/// current parameters. `epsilon == 0` trains on the clean batch.
#[allow(clippy::too_many_arguments)]
pub fn pgd_loss(
    model: &Model,
    tape: &mut Tape,
    params: &[Var],
    batch: &Batch,
    epsilon: f32,
    step_size: f32,
    iterations: usize,
    random_start: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Objective> {
    if epsilon == 0.0 {
        return loss_plain(model, tape, params, batch);
    }
    let cfg = AttackConfig::new(epsilon, step_size, iterations, (PIXEL_MIN, PIXEL_MAX))?;
    let start = if random_start {
        use rand::Rng;
        let data = batch
            .images
            .data()
            .iter()
            .map(|&v| (v + rng.random_range(-epsilon..=epsilon)).clamp(PIXEL_MIN, PIXEL_MAX))
            .collect();
        Tensor::new(batch.images.shape(), data)?
    } else {
        batch.images.clone()
    };
    let adv = ensemble_attack_lenient(&[model], &start, batch.images, batch.labels, &cfg)?;
    loss_plain(
        model,
        tape,
        params,
        &Batch {
            images: &adv,
            labels: batch.labels,
            partners: None,
        },
    )
}

struct Sgd {
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    fn new(model: &Model) -> Self {
        Sgd {
            velocity: model
                .parameters()
                .iter()
                .map(|p| vec![0.0; p.len()])
                .collect(),
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64, momentum: f64, wd: f64) {
        let (lr, mu, wd) = (lr as f32, momentum as f32, wd as f32);
        for ((p, g), v) in model
            .parameters_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocity)
        {
            for ((w, &gw), vw) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vw = mu * *vw + gw + wd * *w;
                *w -= lr * *vw;
            }
        }
    }
}

/// Trains `model` in place and leaves it at its best-validation state.
///
/// On a non-finite batch loss the model is restored to the last
/// best-validation state (or its initial state) and `Error::Divergence` is
/// returned; a configured checkpoint file then holds that state too.
pub fn train(
    model: &mut Model,
    train_ds: &LabeledDataset,
    val_ds: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Data(crate::DataError::Empty));
    }
    if train_ds.image_shape() != model.spec().input_shape
        || val_ds.image_shape() != model.spec().input_shape
    {
        return Err(Error::Shape(format!(
            "model input {:?} does not match data {:?}",
            model.spec().input_shape,
            train_ds.image_shape()
        )));
    }
    if cfg.standardize {
        let (m, s) = train_ds.channel_stats();
        model.set_input_normalization(m, s)?;
    }
    model.meta.epochs = cfg.epochs;
    model.meta.defense = cfg.defense.name().into();
    model.meta.seed = cfg.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = train_ds.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mix = cfg.defense.mix_config();
    let mut sgd = Sgd::new(model);
    let mut best = model.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut seconds = Vec::new();
    let mut step_no = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut partner_order: Vec<usize> = (0..n).collect();
        partner_order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        let started = Instant::now();
        for b in 0..steps_per_epoch {
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let images = train_ds.images().select_outer(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_ds.labels()[i]).collect();
            let partner_images = match mix {
                Some(_) => Some(train_ds.images().select_outer(
                    &partner_order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)],
                )?),
                None => None,
            };
            let batch = Batch {
                images: &images,
                labels: &labels,
                partners: partner_images.as_ref(),
            };
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true);
            let obj = match cfg.defense {
                DefenseVariant::None => loss_plain(model, &mut tape, &params, &batch)?,
                DefenseVariant::FixedAlpha { alpha } => {
                    loss_fixed_alpha(model, &mut tape, &params, &batch, alpha)?
                }
                DefenseVariant::FixedAlphaKl { lambda, .. }
                | DefenseVariant::BetaAlphaKl { lambda, .. } => {
                    let m = mix.expect("mixing variant");
                    let alphas = (0..labels.len())
                        .map(|_| sample_alpha(&m, &mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    loss_alpha_kl(
                        model,
                        &mut tape,
                        &params,
                        &batch,
                        &alphas,
                        lambda,
                        cfg.kl_gradient,
                    )?
                }
                DefenseVariant::Vat {
                    epsilon,
                    iterations,
                    lambda,
                } => vat_loss(
                    model, &mut tape, &params, &batch, epsilon, iterations, lambda, &mut rng,
                )?,
                DefenseVariant::Pgd {
                    epsilon,
                    step_size,
                    iterations,
                } => pgd_loss(
                    model,
                    &mut tape,
                    &params,
                    &batch,
                    epsilon,
                    step_size,
                    iterations,
                    cfg.pgd_random_start,
                    &mut rng,
                )?,
            };
            let loss = tape.value(obj.loss).data()[0] as f64;
            if !loss.is_finite() {
                *model = best;
                return Err(Error::Divergence { epoch, loss });
            }
            let c = tape.value(obj.logits).shape()[1];
            correct += tape
                .value(obj.logits)
                .data()
                .chunks(c)
                .zip(&labels)
                .filter(|(r, &y)| nn::argmax(r) == y)
                .count();
            loss_sum += loss * labels.len() as f64;
            let grads = tape.backward(obj.loss)?;
            let grads: Vec<Tensor> = params.iter().map(|&p| grads.wrt(p)).collect();
            model.apply_batch_stats(&obj.batch_stats);
            sgd.step(
                model,
                &grads,
                cfg.lr_at(step_no, total),
                cfg.momentum,
                cfg.weight_decay,
            );
            step_no += 1;
        }
        let secs = started.elapsed().as_secs_f64();
        seconds.push(secs);
        let val_acc = accuracy(model, val_ds)?;
        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epoch;
            best = model.clone();
            if let Some(path) = &cfg.checkpoint {
                model.save(path)?;
            }
        }
        records.push(EpochRecord {
            epoch,
            train_acc: correct as f64 / n as f64,
            val_acc,
            train_loss: loss_sum / n as f64,
            epoch_seconds: secs,
            median_epoch_seconds: median(&seconds),
        });
    }
    *model = best;
    Ok(TrainReport {
        defense: cfg.defense,
        epochs: records,
        best_epoch,
        best_val_acc: best_val,
        median_epoch_seconds: median(&seconds),
    })
}
