//! Optimization loop: the two-phase schedule (recognition-only warmup,
//! then all pathways), loss weighting, the dynamic contrastive margin,
//! checkpointing, and the ablation-variant switchboard.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::data::{Batch, ProblemSource};
use crate::error::{Error, Result};
use crate::losses::{
    self, classifier_loss_parts, cond_loss, cond_loss_feature, cond_loss_pixel, gan_losses,
    kld_fixed_mask, kld_standard, vae_loss, LossWeights,
};
use crate::nets::{Model, LATENT_DIM, RES};
use crate::nn::{Mode, ParamList};
use crate::optim::{Adam, AdamSlot};
use crate::pipeline::{
    critic_codes, encode_choices, encode_context, frozen_generated_embeddings,
    generation_from_trace, generation_noise_dim, recognition_from_trace, reconstruct,
};

/// Training variants: `Full` is the complete method, the rest rewire one
/// component each, numbered as in the ablation study.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Full,
    NoReparamTrain,
    StandardKld,
    StaticHalfKld,
    NoVae,
    NoCm,
    MseCond,
    FeatureCond,
    PixelCond,
    NoFreeze,
}

impl AblationKind {
    pub const ALL: [AblationKind; 10] = [
        AblationKind::Full,
        AblationKind::NoReparamTrain,
        AblationKind::StandardKld,
        AblationKind::StaticHalfKld,
        AblationKind::NoVae,
        AblationKind::NoCm,
        AblationKind::MseCond,
        AblationKind::FeatureCond,
        AblationKind::PixelCond,
        AblationKind::NoFreeze,
    ];

    /// Row label used in ablation reports.
    pub fn label(self) -> &'static str {
        match self {
            AblationKind::Full => "Full",
            AblationKind::NoReparamTrain => "(1) W/o reparameterization in train",
            AblationKind::StandardKld => "(2) Standard KLD",
            AblationKind::StaticHalfKld => "(3) Static half KLD",
            AblationKind::NoVae => "(4) W/o VAE",
            AblationKind::NoCm => "(5) W/o auxiliary C_M",
            AblationKind::MseCond => "(6) W/o contrastive relation loss (MSE)",
            AblationKind::FeatureCond => "(7) Contrastive loss on encoder features",
            AblationKind::PixelCond => "(8) Contrastive loss on pixels",
            AblationKind::NoFreeze => "(9) W/o freeze",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationKind::Full => "full",
            AblationKind::NoReparamTrain => "no_reparam_train",
            AblationKind::StandardKld => "standard_kld",
            AblationKind::StaticHalfKld => "static_half_kld",
            AblationKind::NoVae => "no_vae",
            AblationKind::NoCm => "no_cm",
            AblationKind::MseCond => "mse_cond",
            AblationKind::FeatureCond => "feature_cond",
            AblationKind::PixelCond => "pixel_cond",
            AblationKind::NoFreeze => "no_freeze",
        })
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "full" => AblationKind::Full,
            "no_reparam_train" => AblationKind::NoReparamTrain,
            "standard_kld" => AblationKind::StandardKld,
            "static_half_kld" => AblationKind::StaticHalfKld,
            "no_vae" => AblationKind::NoVae,
            "no_cm" => AblationKind::NoCm,
            "mse_cond" => AblationKind::MseCond,
            "feature_cond" => AblationKind::FeatureCond,
            "pixel_cond" => AblationKind::PixelCond,
            "no_freeze" => AblationKind::NoFreeze,
            other => return Err(Error::config(format!("unknown ablation {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum KldKind {
    DynamicSelective,
    Standard,
    StaticHalf,
    None,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CondKind {
    Relation,
    RelationPositiveOnly,
    Feature,
    Pixel,
}

/// How a variant rewires the training step.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Wiring {
    pub reparam_in_train: bool,
    pub kld: KldKind,
    pub use_vae: bool,
    pub use_meta_loss: bool,
    pub cond: CondKind,
    pub freeze_critic: bool,
}

pub fn apply_ablation(kind: AblationKind) -> Wiring {
    let full = Wiring {
        reparam_in_train: true,
        kld: KldKind::DynamicSelective,
        use_vae: true,
        use_meta_loss: true,
        cond: CondKind::Relation,
        freeze_critic: true,
    };
    match kind {
        AblationKind::Full => full,
        AblationKind::NoReparamTrain => Wiring {
            reparam_in_train: false,
            kld: KldKind::None,
            ..full
        },
        AblationKind::StandardKld => Wiring {
            kld: KldKind::Standard,
            ..full
        },
        AblationKind::StaticHalfKld => Wiring {
            kld: KldKind::StaticHalf,
            ..full
        },
        AblationKind::NoVae => Wiring {
            use_vae: false,
            ..full
        },
        AblationKind::NoCm => Wiring {
            use_meta_loss: false,
            ..full
        },
        AblationKind::MseCond => Wiring {
            cond: CondKind::RelationPositiveOnly,
            ..full
        },
        AblationKind::FeatureCond => Wiring {
            cond: CondKind::Feature,
            ..full
        },
        AblationKind::PixelCond => Wiring {
            cond: CondKind::Pixel,
            ..full
        },
        AblationKind::NoFreeze => Wiring {
            freeze_critic: false,
            ..full
        },
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub margin_update_period: u64,
    pub initial_margin: f64,
    pub weights: LossWeights,
    pub ablation: AblationKind,
    pub width_mult: f64,
    pub seed: u64,
    /// Write a checkpoint after every epoch (in addition to the final one).
    pub epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            phase1_epochs: 5,
            phase2_epochs: 10,
            margin_update_period: 1000,
            initial_margin: 1.0,
            weights: LossWeights::default(),
            ablation: AblationKind::Full,
            width_mult: 1.0,
            seed: 0,
            epoch_checkpoints: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phase1_epochs + self.phase2_epochs == 0 {
            return Err(Error::config("at least one training epoch is required"));
        }
        if self.margin_update_period == 0 {
            return Err(Error::config("margin_update_period must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.initial_margin > 0.0) {
            return Err(Error::config("initial_margin must be positive"));
        }
        if !(self.width_mult > 0.0) {
            return Err(Error::config("width_mult must be positive"));
        }
        self.weights.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }
}

/// All mutable training state: parameters, optimizer moments, iteration
/// counter, and the dynamic contrastive margin with its accumulator.
pub struct TrainState {
    pub model: Model,
    pub config: TrainConfig,
    all_params: ParamList,
    main_params: ParamList,
    d_params: ParamList,
    pub opt_main: Adam,
    pub opt_d: Adam,
    pub iteration: u64,
    pub epoch: usize,
    pub margin: f64,
    pub margin_accum_sum: f64,
    pub margin_accum_count: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let wiring = apply_ablation(config.ablation);
        let model = Model::new(config.width_mult, wiring.reparam_in_train, config.seed)?;
        let all_params = model.params();
        let d_params = model.params_of(&["D"]);
        let main_params = ParamList {
            entries: model
                .params()
                .entries
                .into_iter()
                .filter(|e| !e.name.starts_with("D."))
                .collect(),
        };
        let opt_main = Adam::new(config.learning_rate, main_params.entries.len());
        let opt_d = Adam::new(config.learning_rate, d_params.entries.len());
        let margin = config.initial_margin;
        Ok(Self {
            model,
            config,
            all_params,
            main_params,
            d_params,
            opt_main,
            opt_d,
            iteration: 0,
            epoch: 0,
            margin,
            margin_accum_sum: 0.0,
            margin_accum_count: 0,
        })
    }

    pub fn phase(&self) -> u8 {
        if self.epoch < self.config.phase1_epochs {
            1
        } else {
            2
        }
    }

    pub fn params(&self) -> &ParamList {
        &self.all_params
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub epoch: usize,
    pub phase: u8,
    pub loss_choice: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_meta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_vae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_kld: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_cond_pos: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_cond_neg: Option<f64>,
    pub total: f64,
    pub margin: f64,
}

fn mix(seed: u64, tag: u64, counter: u64) -> u64 {
    fn splitmix64(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ counter)
}

const TAG_GEN_NOISE: u64 = 0x67;
const TAG_VAE_NOISE: u64 = 0x76;
const TAG_SHUFFLE: u64 = 0x5a;

fn normal_tensor(seed: u64, shape: (usize, usize)) -> Result<Tensor> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..shape.0 * shape.1)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Ok(Tensor::from_vec(data, shape, &candle_core::Device::Cpu)?)
}

fn finite(name: &str, value: f64, iteration: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            component: name.to_string(),
            iteration,
        })
    }
}

fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_scalar::<f32>()? as f64)
}

/// Gathers each problem's true target panel: (B, 1, RES, RES).
fn target_panels(batch: &Batch) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(batch.len());
    for (i, t) in batch.target.iter().enumerate() {
        parts.push(
            batch
                .choices
                .narrow(0, i, 1)?
                .narrow(1, *t, 1)?
                .reshape((1, 1, RES, RES))?,
        );
    }
    Ok(Tensor::cat(&parts.iter().collect::<Vec<_>>(), 0)?)
}

fn choice_labels(batch: &Batch) -> Result<Tensor> {
    let mut data = vec![0f32; batch.len() * 8];
    for (i, t) in batch.target.iter().enumerate() {
        data[i * 8 + t] = 1.0;
    }
    Ok(Tensor::from_vec(
        data,
        (batch.len(), 8),
        &candle_core::Device::Cpu,
    )?)
}

struct SectionTimer {
    enabled: bool,
    last: std::time::Instant,
}

impl SectionTimer {
    fn new() -> Self {
        Self {
            enabled: std::env::var("RAVENGEN_PROFILE").is_ok(),
            last: std::time::Instant::now(),
        }
    }

    fn lap(&mut self, label: &str) {
        if self.enabled {
            eprintln!("  [profile] {label}: {:.0} ms", self.last.elapsed().as_secs_f64() * 1e3);
            self.last = std::time::Instant::now();
        }
    }
}

/// Runs one optimization step. Phase 1 trains the recognition pathway
/// alone; phase 2 adds the VAE, KLD, adversarial and conditioned losses,
/// with the discriminator updated once per step from the same batch.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepMetrics> {
    let wiring = apply_ablation(state.config.ablation);
    let weights = state.config.weights;
    let iteration = state.iteration;
    let mode = Mode::Train;
    let model = &state.model;
    let b = batch.len();
    let mut timer = SectionTimer::new();

    let ctx = encode_context(model, &batch.context, mode)?;
    timer.lap("encode context");
    let choice_emb = encode_choices(model, &batch.choices, mode)?;
    timer.lap("encode choices");
    let (y_logits, psi_logits) = recognition_from_trace(model, &ctx, &choice_emb, mode)?;
    timer.lap("recognition heads");
    let labels = choice_labels(batch)?;
    let (l_choice, l_meta) = classifier_loss_parts(&y_logits, &labels, &psi_logits, &batch.meta)?;

    let loss_choice = finite("choice BCE", scalar_f64(&l_choice)?, iteration)?;
    let mut total = l_choice;
    let mut metrics = StepMetrics {
        iteration,
        epoch: state.epoch,
        phase: state.phase(),
        loss_choice,
        loss_meta: None,
        loss_vae: None,
        loss_kld: None,
        loss_g: None,
        loss_d: None,
        loss_cond_pos: None,
        loss_cond_neg: None,
        total: 0.0,
        margin: state.margin,
    };

    if wiring.use_meta_loss {
        metrics.loss_meta = Some(finite("meta BCE", scalar_f64(&l_meta)?, iteration)?);
        total = (total + (l_meta * weights.cm)?)?;
    }

    let mut d_grads = None;
    if state.phase() == 2 {
        // Generation pathway.
        let noise_dim = generation_noise_dim(model);
        let zp = normal_tensor(mix(state.config.seed, TAG_GEN_NOISE, iteration), (b, noise_dim))?;
        let gen = generation_from_trace(model, ctx, &zp, mode)?;
        timer.lap("generation head fwd");

        // Reconstruction pathway.
        if wiring.use_vae {
            let flat_choices = batch.choices.reshape((b * 8, 1, RES, RES))?;
            let z = normal_tensor(
                mix(state.config.seed, TAG_VAE_NOISE, iteration),
                (b * 8, LATENT_DIM),
            )?;
            let rec = reconstruct(model, &flat_choices, &z, mode)?;
            let l_vae = vae_loss(
                &rec.images,
                &flat_choices,
                &rec.mu,
                &rec.sigma,
                weights.lambda_kl1,
            )?;
            metrics.loss_vae = Some(finite("VAE", scalar_f64(&l_vae)?, iteration)?);
            total = (total + (l_vae * weights.vae)?)?;
            timer.lap("vae fwd");
        }

        // Latent regularization on the translator output.
        if wiring.kld != KldKind::None {
            let mu = gen.mu_g.as_ref().expect("reparam translator");
            let sigma = gen.sigma_g.as_ref().expect("reparam translator");
            let l_kld = match wiring.kld {
                KldKind::DynamicSelective => losses::ds_kld(mu, sigma)?.mean_all()?,
                KldKind::Standard => kld_standard(mu, sigma)?.mean_all()?,
                KldKind::StaticHalf => {
                    let mut mask = vec![0f32; LATENT_DIM];
                    for m in mask.iter_mut().take(LATENT_DIM / 2) {
                        *m = 1.0;
                    }
                    let mask =
                        Tensor::from_vec(mask, (1, LATENT_DIM), &candle_core::Device::Cpu)?;
                    kld_fixed_mask(mu, sigma, &mask)?.mean_all()?
                }
                KldKind::None => unreachable!(),
            };
            metrics.loss_kld = Some(finite("KLD", scalar_f64(&l_kld)?, iteration)?);
            total = (total + l_kld)?;
        }

        // Conditioned perceptual loss.
        let (pos, neg, margin_observation) = match wiring.cond {
            CondKind::Relation | CondKind::RelationPositiveOnly => {
                let codes = critic_codes(
                    model,
                    &gen.ctx,
                    &choice_emb,
                    &gen.image,
                    wiring.freeze_critic,
                    mode,
                )?;
                let (pos, neg) = cond_loss(&codes, &batch.target, state.margin)?;
                let dist = losses::mean_relation_distance(&codes)?;
                if wiring.cond == CondKind::RelationPositiveOnly {
                    let zero = Tensor::zeros((), DType::F32, &candle_core::Device::Cpu)?;
                    (pos, zero, dist)
                } else {
                    (pos, neg, dist)
                }
            }
            CondKind::Pixel => {
                let (pos, neg) =
                    cond_loss_pixel(&gen.image, &batch.choices, &batch.target, state.margin)?;
                let d2 = (&batch.choices.detach().reshape((b, 8, RES * RES))?
                    - &gen.image.detach().reshape((b, 1, RES * RES))?.broadcast_as((
                        b,
                        8,
                        RES * RES,
                    ))?)?
                    .sqr()?
                    .sum(2)?;
                (pos, neg, scalar_f64(&d2.mean_all()?)?)
            }
            CondKind::Feature => {
                let gen_emb = frozen_generated_embeddings(
                    model,
                    &gen.image,
                    wiring.freeze_critic,
                    mode,
                )?;
                let (pos, neg) = cond_loss_feature(
                    [&gen_emb[0], &gen_emb[1], &gen_emb[2]],
                    [&choice_emb[0], &choice_emb[1], &choice_emb[2]],
                    &batch.target,
                    state.margin,
                )?;
                // Margin observations in the same feature space.
                let mut sum = 0f64;
                for (g, c) in gen_emb.iter().zip(choice_emb.iter()) {
                    let gd = g.detach().reshape((b, 1, g.elem_count() / b))?;
                    let cd = c.detach().reshape((b, 8, c.elem_count() / (8 * b)))?;
                    sum += scalar_f64(&cd.broadcast_sub(&gd)?.sqr()?.sum(2)?.mean_all()?)?;
                }
                (pos, neg, sum)
            }
        };
        timer.lap("critic + cond fwd");
        metrics.loss_cond_pos = Some(finite("contrastive+", scalar_f64(&pos)?, iteration)?);
        metrics.loss_cond_neg = Some(finite("contrastive-", scalar_f64(&neg)?, iteration)?);
        total = (total + (pos * weights.contrast_pos)?)?;
        total = (total + (neg * weights.contrast_neg)?)?;
        state.margin_accum_sum += margin_observation;
        state.margin_accum_count += 1;

        // Adversarial losses; the discriminator gradient is taken before
        // any update so both nets see the same pre-step parameters.
        let real = target_panels(batch)?;
        let (l_d, l_g) = gan_losses(model, &real, &gen.image, mode)?;
        metrics.loss_d = Some(finite("discriminator", scalar_f64(&l_d)?, iteration)?);
        metrics.loss_g = Some(finite("generator adv", scalar_f64(&l_g)?, iteration)?);
        total = (total + l_g)?;
        timer.lap("gan fwd");
        d_grads = Some(l_d.backward()?);
        timer.lap("discriminator bwd");
    }

    metrics.total = finite("total", scalar_f64(&total)?, iteration)?;
    let main_grads = total.backward()?;
    timer.lap("main bwd");
    state.opt_main.step(&state.main_params.entries, &main_grads)?;
    timer.lap("optimizer");
    if let Some(d_grads) = d_grads {
        state.opt_d.step(&state.d_params.entries, &d_grads)?;
    }
    state.iteration += 1;
    Ok(metrics)
}

/// Margin update: sets the contrastive margin to the mean observed
/// relation-space distance since the previous update. An empty window
/// keeps the previous margin.
pub fn update_margin(state: &mut TrainState) {
    if state.margin_accum_count > 0 {
        state.margin = state.margin_accum_sum / state.margin_accum_count as f64;
        state.margin_accum_sum = 0.0;
        state.margin_accum_count = 0;
    }
}

/// Runs the full schedule over a problem source, logging one metric line
/// per step and optionally checkpointing per epoch.
pub fn run_training(
    config: &TrainConfig,
    data: &dyn ProblemSource,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&StepMetrics),
) -> Result<TrainState> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::config("training data source is empty"));
    }
    let mut state = TrainState::new(config.clone())?;
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join("metrics.jsonl"),
            )?))
        }
        None => None,
    };

    for epoch in 0..config.total_epochs() {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(mix(config.seed, TAG_SHUFFLE, epoch as u64));
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);

        for chunk in order.chunks(config.batch_size) {
            let problems = chunk
                .iter()
                .map(|i| data.get(*i))
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::from_problems(&problems, &state.model.device)?;
            let metrics = train_step(&mut state, &batch)?;
            if state.iteration % config.margin_update_period == 0 {
                update_margin(&mut state);
            }
            if let Some(log) = log.as_mut() {
                serde_json::to_writer(&mut *log, &metrics)
                    .map_err(|e| Error::config(format!("metric log write failed: {e}")))?;
                log.write_all(b"\n")?;
            }
            progress(&metrics);
        }

        if let Some(dir) = out_dir {
            if config.epoch_checkpoints {
                checkpoint_save(&state, &dir.join(format!("epoch_{:02}.ckpt", epoch + 1)))?;
            }
        }
    }
    state.epoch = config.total_epochs();

    if let Some(dir) = out_dir {
        checkpoint_save(&state, &dir.join("checkpoint.ckpt"))?;
        if let Some(mut log) = log {
            log.flush()?;
        }
    }
    Ok(state)
}

// ---- checkpointing ---------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"RVGNCKP1";

fn write_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    write_bytes(out, name.as_bytes());
    let dims = t.dims();
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    let data = t.flatten_all()?.to_vec1::<f32>()?;
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("bad parameter name".into()))?;
        let rank = self.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let n = self.u64()? as usize;
        let raw = self.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(data, dims, &candle_core::Device::Cpu)?;
        Ok((name, t))
    }
}

fn adam_section(out: &mut Vec<u8>, prefix: &str, params: &ParamList, opt: &Adam) -> Result<()> {
    let filled: Vec<(usize, &AdamSlot)> = opt
        .slots()
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.as_ref().map(|s| (i, s)))
        .collect();
    out.extend_from_slice(&(filled.len() as u32).to_le_bytes());
    for (i, slot) in filled {
        let name = &params.entries[i].name;
        write_bytes(out, name.as_bytes());
        out.extend_from_slice(&slot.t.to_le_bytes());
        write_tensor(out, &format!("{prefix}.{name}.m"), &slot.m)?;
        write_tensor(out, &format!("{prefix}.{name}.v"), &slot.v)?;
    }
    Ok(())
}

/// Serializes parameters, optimizer moments, iteration counter and the
/// margin state. Writing is atomic: temp file then rename.
pub fn checkpoint_save(state: &TrainState, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    let config = serde_json::to_string(&state.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
    write_bytes(&mut out, config.as_bytes());
    out.extend_from_slice(&state.iteration.to_le_bytes());
    out.extend_from_slice(&(state.epoch as u64).to_le_bytes());
    out.extend_from_slice(&state.margin.to_le_bytes());
    out.extend_from_slice(&state.margin_accum_sum.to_le_bytes());
    out.extend_from_slice(&state.margin_accum_count.to_le_bytes());

    out.extend_from_slice(&(state.all_params.entries.len() as u32).to_le_bytes());
    for entry in &state.all_params.entries {
        write_tensor(&mut out, &entry.name, entry.var.as_tensor())?;
    }
    adam_section(&mut out, "adam_main", &state.main_params, &state.opt_main)?;
    adam_section(&mut out, "adam_d", &state.d_params, &state.opt_d)?;

    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_adam_section(
    r: &mut Reader,
    params: &ParamList,
    opt: &mut Adam,
) -> Result<()> {
    let n = r.u32()? as usize;
    for _ in 0..n {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("bad optimizer entry name".into()))?;
        let t = r.u64()?;
        let (_, m) = r.tensor()?;
        let (_, v) = r.tensor()?;
        let idx = params
            .entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown optimizer entry {name}")))?;
        opt.slots_mut()[idx] = Some(AdamSlot { m, v, t });
    }
    Ok(())
}

/// Restores a full training state; the model is reconstructed from the
/// stored config, then every parameter is overwritten.
pub fn checkpoint_load(path: &Path) -> Result<TrainState> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic = r.take(8)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "version tag mismatch: expected {:?}, found {:?}; refusing to load",
            String::from_utf8_lossy(CKPT_MAGIC),
            String::from_utf8_lossy(magic)
        )));
    }
    let config: TrainConfig = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::Checkpoint(format!("bad config payload: {e}")))?;
    let mut state = TrainState::new(config)?;
    state.iteration = r.u64()?;
    state.epoch = r.u64()? as usize;
    state.margin = r.f64()?;
    state.margin_accum_sum = r.f64()?;
    state.margin_accum_count = r.u64()?;

    let n = r.u32()? as usize;
    if n != state.all_params.entries.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: checkpoint has {n}, model has {}",
            state.all_params.entries.len()
        )));
    }
    for _ in 0..n {
        let (name, t) = r.tensor()?;
        let entry = state
            .all_params
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if entry.var.dims() != t.dims() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                entry.var.dims(),
                t.dims()
            )));
        }
        entry.var.set(&t)?;
    }
    load_adam_section(&mut r, &state.main_params, &mut state.opt_main)?;
    load_adam_section(&mut r, &state.d_params, &mut state.opt_d)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthDataset;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            phase1_epochs: 1,
            phase2_epochs: 1,
            width_mult: 0.125,
            seed: 5,
            margin_update_period: 4,
            epoch_checkpoints: false,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(n: usize) -> SynthDataset {
        SynthDataset::new(vec!["shape.number.constant".parse().unwrap()], n, 11).unwrap()
    }

    fn batch_of(data: &SynthDataset, idx: &[usize]) -> Batch {
        let problems: Vec<_> = idx.iter().map(|i| data.get(*i).unwrap()).collect();
        Batch::from_problems(&problems, &candle_core::Device::Cpu).unwrap()
    }

    fn snapshot(state: &TrainState, prefix: &str) -> Vec<Vec<f32>> {
        state
            .params()
            .entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap())
            .collect()
    }

    #[test]
    fn phase1_touches_only_recognition_networks() {
        let mut state = TrainState::new(tiny_config()).unwrap();
        let data = tiny_data(4);
        let g0 = snapshot(&state, "G.");
        let d0 = snapshot(&state, "D.");
        let t0 = snapshot(&state, "T.");
        let rm0 = snapshot(&state, "RM_h.");
        let m = train_step(&mut state, &batch_of(&data, &[0, 1])).unwrap();
        assert_eq!(m.phase, 1);
        assert!(m.loss_vae.is_none());
        assert_eq!(snapshot(&state, "G."), g0, "phase 1 must not touch G");
        assert_eq!(snapshot(&state, "D."), d0, "phase 1 must not touch D");
        assert_eq!(snapshot(&state, "T."), t0, "phase 1 must not touch T");
        assert_ne!(snapshot(&state, "RM_h."), rm0, "phase 1 trains the reasoning stack");
    }

    #[test]
    fn phase2_reports_all_components_and_trains_gan() {
        let mut state = TrainState::new(tiny_config()).unwrap();
        state.epoch = 1; // into phase 2
        let data = tiny_data(4);
        let g0 = snapshot(&state, "G.");
        let d0 = snapshot(&state, "D.");
        let m = train_step(&mut state, &batch_of(&data, &[0, 1])).unwrap();
        assert_eq!(m.phase, 2);
        for (name, v) in [
            ("meta", m.loss_meta),
            ("vae", m.loss_vae),
            ("kld", m.loss_kld),
            ("g", m.loss_g),
            ("d", m.loss_d),
            ("pos", m.loss_cond_pos),
            ("neg", m.loss_cond_neg),
        ] {
            assert!(v.is_some(), "phase 2 metric {name} missing");
        }
        assert_ne!(snapshot(&state, "G."), g0);
        assert_ne!(snapshot(&state, "D."), d0);
        assert_eq!(state.margin_accum_count, 1);
    }

    #[test]
    fn margin_update_takes_mean_and_resets() {
        let mut state = TrainState::new(tiny_config()).unwrap();
        assert_eq!(state.margin, 1.0);
        state.margin_accum_sum = 4.0;
        state.margin_accum_count = 2;
        update_margin(&mut state);
        assert_eq!(state.margin, 2.0);
        assert_eq!(state.margin_accum_count, 0);

        // Empty window keeps the previous margin.
        update_margin(&mut state);
        assert_eq!(state.margin, 2.0);
    }

    #[test]
    fn ablation_wiring_matches_variants() {
        assert_eq!(apply_ablation(AblationKind::Full).kld, KldKind::DynamicSelective);
        let w = apply_ablation(AblationKind::NoReparamTrain);
        assert!(!w.reparam_in_train);
        assert_eq!(w.kld, KldKind::None);
        assert_eq!(apply_ablation(AblationKind::StandardKld).kld, KldKind::Standard);
        assert_eq!(apply_ablation(AblationKind::StaticHalfKld).kld, KldKind::StaticHalf);
        assert!(!apply_ablation(AblationKind::NoVae).use_vae);
        assert!(!apply_ablation(AblationKind::NoCm).use_meta_loss);
        assert_eq!(
            apply_ablation(AblationKind::MseCond).cond,
            CondKind::RelationPositiveOnly
        );
        assert_eq!(apply_ablation(AblationKind::FeatureCond).cond, CondKind::Feature);
        assert_eq!(apply_ablation(AblationKind::PixelCond).cond, CondKind::Pixel);
        assert!(!apply_ablation(AblationKind::NoFreeze).freeze_critic);
    }

    #[test]
    fn no_reparam_variant_uses_128_dim_noise() {
        let config = TrainConfig {
            ablation: AblationKind::NoReparamTrain,
            ..tiny_config()
        };
        let state = TrainState::new(config).unwrap();
        assert_eq!(generation_noise_dim(&state.model), 128);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(4);
        let mut state = TrainState::new(tiny_config()).unwrap();
        state.epoch = 1;
        train_step(&mut state, &batch_of(&data, &[0, 1])).unwrap();
        train_step(&mut state, &batch_of(&data, &[2, 3])).unwrap();

        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        checkpoint_save(&state, &p1).unwrap();
        let loaded = checkpoint_load(&p1).unwrap();
        assert_eq!(loaded.iteration, state.iteration);
        assert_eq!(loaded.margin, state.margin);
        checkpoint_save(&loaded, &p2).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b, "save -> load -> save must be byte-identical");
    }

    #[test]
    fn checkpoint_rejects_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let state = TrainState::new(tiny_config()).unwrap();
        let path = dir.path().join("c.ckpt");
        checkpoint_save(&state, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            checkpoint_load(&cut),
            Err(Error::Checkpoint(_))
        ));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let badp = path.with_extension("bad");
        std::fs::write(&badp, &bad).unwrap();
        let err = match checkpoint_load(&badp) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("bad magic must be refused"),
        };
        assert!(err.contains("version tag"), "{err}");
    }

    #[test]
    fn two_runs_with_same_seed_are_bit_identical() {
        let data = tiny_data(6);
        let config = tiny_config();
        let run = || {
            let mut lines = Vec::new();
            run_training(&config, &data, None, |m| {
                lines.push(serde_json::to_string(m).unwrap());
            })
            .unwrap();
            lines
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_weight_audit_total_is_linear_in_weights() {
        // d(total)/d(w_vae) equals the raw VAE component.
        let data = tiny_data(4);
        let base = tiny_config();
        let run_with = |vae_w: f64| -> (f64, f64) {
            let mut cfg = base.clone();
            cfg.weights.vae = vae_w;
            let mut state = TrainState::new(cfg).unwrap();
            state.epoch = 1;
            let m = train_step(&mut state, &batch_of(&data, &[0, 1])).unwrap();
            (m.total, m.loss_vae.unwrap())
        };
        let (t0, v0) = run_with(0.1);
        let (t1, v1) = run_with(0.1 + 0.05);
        assert!((v0 - v1).abs() < 1e-9, "same step must see the same raw VAE loss");
        let slope = (t1 - t0) / 0.05;
        assert!(
            (slope - v0).abs() <= 1e-4 * v0.abs().max(1.0),
            "slope {slope} vs component {v0}"
        );
    }
}
