//! The learnable sub-networks: VAE encoder `E`, generator `G`,
//! discriminator `D`, multi-scale context encoders `EC_h/EC_m/EC_l`,
//! reasoning modules `RM_t`, third-line mergers `P_t`, classifiers
//! `CO`/`CM`, scale fuser `R`, and translator `T`.
//!
//! Channel widths scale uniformly with a single multiplier; spatial
//! shapes are fixed by the 80x80 input resolution. The latent dimension
//! (64), the meta-target width (12) and all network outputs keep their
//! paper sizes at every width.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, leaky_relu, sigmoid, BatchNorm, Conv2d, ConvTranspose2d, DResBlock, InitRng,
    Linear, Mode, ParamList, ResBlock, WeightInit,
};

/// Model input resolution. The two stride-2 convolutions of `EC_h` turn
/// this into the 20x20 high-scale map, and the generator's transpose
/// chain 1->5->10->20->40->80 terminates here.
pub const RES: usize = 80;
/// Latent dimension shared by the VAE and the generation pathway.
pub const LATENT_DIM: usize = 64;
/// Width of the rule-metadata target.
pub const META_BITS: usize = 12;
/// Noise width for the translator variant that skips reparameterization.
pub const DIRECT_NOISE_DIM: usize = 128;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Scale {
    High,
    Mid,
    Low,
}

pub const SCALES: [Scale; 3] = [Scale::High, Scale::Mid, Scale::Low];

impl Scale {
    pub fn index(self) -> usize {
        match self {
            Scale::High => 0,
            Scale::Mid => 1,
            Scale::Low => 2,
        }
    }

    pub fn spatial(self) -> (usize, usize) {
        match self {
            Scale::High => (20, 20),
            Scale::Mid => (5, 5),
            Scale::Low => (1, 1),
        }
    }
}

/// Uniform channel-width multiplier. `base` is the high-scale channel
/// count; the paper's tables correspond to `base = 64`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Width {
    base: usize,
}

impl Width {
    pub fn from_mult(mult: f64) -> Self {
        Self {
            base: ((64.0 * mult).round() as usize).max(1),
        }
    }

    pub fn mult(&self) -> f64 {
        self.base as f64 / 64.0
    }

    pub fn w32(&self) -> usize {
        self.base.div_ceil(2)
    }
    pub fn w64(&self) -> usize {
        self.base
    }
    pub fn w128(&self) -> usize {
        self.base * 2
    }
    pub fn w256(&self) -> usize {
        self.base * 4
    }
    pub fn w512(&self) -> usize {
        self.base * 8
    }

    /// Channels of a scale's embedding.
    pub fn scale_channels(&self, scale: Scale) -> usize {
        match scale {
            Scale::High => self.w64(),
            Scale::Mid => self.w128(),
            Scale::Low => self.w256(),
        }
    }

    /// Dimension of the fused context embedding `x`.
    pub fn fused_dim(&self) -> usize {
        3 * self.w128()
    }
}

/// Mean/std pair in the shared 64-dim latent space, plus a sample.
/// With zero noise the sample equals the mean.
pub struct LatentCode {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub sample: Tensor,
}

impl LatentCode {
    pub fn from_stats(mu: Tensor, sigma: Tensor) -> Self {
        let sample = mu.clone();
        Self { mu, sigma, sample }
    }
}

/// Per-image feature maps at the three scales.
pub struct ScaleEmbedding {
    pub high: Tensor,
    pub mid: Tensor,
    pub low: Tensor,
}

impl ScaleEmbedding {
    pub fn get(&self, scale: Scale) -> &Tensor {
        match scale {
            Scale::High => &self.high,
            Scale::Mid => &self.mid,
            Scale::Low => &self.low,
        }
    }
}

/// `sample = mu + sigma (.) z`, the reparameterization used by both the
/// VAE and the translator pathway.
pub fn reparameterize(mu: &Tensor, sigma: &Tensor, z: &Tensor) -> Result<Tensor> {
    if mu.dims() != sigma.dims() || mu.dims() != z.dims() {
        return Err(Error::shape(format!(
            "reparameterize expects equal shapes, got {:?} / {:?} / {:?}",
            mu.dims(),
            sigma.dims(),
            z.dims()
        )));
    }
    Ok((mu + (sigma * z)?)?)
}

/// `q_t = (r1 - r2).^2 + (c1 - c2).^2`, elementwise over one scale.
pub fn merge_lines(r1: &Tensor, r2: &Tensor, c1: &Tensor, c2: &Tensor) -> Result<Tensor> {
    if r1.dims() != r2.dims() || c1.dims() != c2.dims() || r1.dims() != c1.dims() {
        return Err(Error::shape(format!(
            "merge_lines expects four equal shapes, got {:?} {:?} {:?} {:?}",
            r1.dims(),
            r2.dims(),
            c1.dims(),
            c2.dims()
        )));
    }
    Ok(((r1 - r2)?.sqr()? + (c1 - c2)?.sqr()?)?)
}

fn expect_images(t: &Tensor, what: &str) -> Result<()> {
    let dims = t.dims();
    if dims.len() != 4 || dims[1] != 1 || dims[2] != RES || dims[3] != RES {
        return Err(Error::shape(format!(
            "{what} expects (N,1,{RES},{RES}) images, got {dims:?}"
        )));
    }
    Ok(())
}

struct EncStage {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
}

impl EncStage {
    #[allow(clippy::too_many_arguments)]
    fn new(
        rng: &mut InitRng,
        cin: usize,
        cmid: usize,
        cout: usize,
        k1: (usize, usize, usize),
        k2: (usize, usize, usize),
        dev: &Device,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(rng, WeightInit::Kaiming, cin, cmid, k1.0, k1.1, k1.2, false, dev)?,
            bn1: BatchNorm::new(cmid, dev)?,
            conv2: Conv2d::new(rng, WeightInit::Kaiming, cmid, cout, k2.0, k2.1, k2.2, false, dev)?,
            bn2: BatchNorm::new(cout, dev)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> candle_core::Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x, mode)?, mode)?.relu()?;
        self.bn2.forward(&self.conv2.forward(&h, mode)?, mode)?.relu()
    }

    fn register(&self, prefix: &str, out: &mut ParamList) {
        self.conv1.register(&format!("{prefix}.conv1"), out);
        self.bn1.register(&format!("{prefix}.bn1"), out);
        self.conv2.register(&format!("{prefix}.conv2"), out);
        self.bn2.register(&format!("{prefix}.bn2"), out);
    }
}

/// Multi-scale context encoder. The stages run sequentially: the mid
/// embedding is computed from the high one, the low from the mid.
pub struct ContextEncoder {
    stage_h: EncStage,
    stage_m: EncStage,
    stage_l: EncStage,
}

impl ContextEncoder {
    fn new(rng: &mut InitRng, w: Width, dev: &Device) -> Result<Self> {
        Ok(Self {
            stage_h: EncStage::new(rng, 1, w.w32(), w.w64(), (7, 2, 3), (3, 2, 1), dev)?,
            stage_m: EncStage::new(rng, w.w64(), w.w64(), w.w128(), (3, 2, 1), (3, 2, 1), dev)?,
            stage_l: EncStage::new(rng, w.w128(), w.w128(), w.w256(), (3, 2, 1), (3, 2, 0), dev)?,
        })
    }

    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<ScaleEmbedding> {
        expect_images(images, "context_encode")?;
        let high = self.stage_h.forward(images, mode)?;
        let mid = self.stage_m.forward(&high, mode)?;
        let low = self.stage_l.forward(&mid, mode)?;
        Ok(ScaleEmbedding { high, mid, low })
    }

    fn register(&self, out: &mut ParamList) {
        self.stage_h.register("EC_h", out);
        self.stage_m.register("EC_m", out);
        self.stage_l.register("EC_l", out);
    }
}

/// Per-scale reasoning module aggregating an image triplet (a row or a
/// column) into one relation code. A single module serves both rows and
/// columns of its scale.
pub struct ReasonModule {
    head: Conv2d,
    rb1: ResBlock,
    rb2: ResBlock,
    tail: Conv2d,
    bn: BatchNorm,
}

impl ReasonModule {
    fn new(rng: &mut InitRng, channels: usize, low_scale: bool, dev: &Device) -> Result<Self> {
        // The low scale works on 1x1 maps; 1x1 kernels keep the shape.
        let (k, p) = if low_scale { (1, 0) } else { (3, 1) };
        Ok(Self {
            head: Conv2d::new(rng, WeightInit::Kaiming, 3 * channels, channels, k, 1, p, false, dev)?,
            rb1: ResBlock::new(rng, channels, k, p, dev)?,
            rb2: ResBlock::new(rng, channels, k, p, dev)?,
            tail: Conv2d::new(rng, WeightInit::Kaiming, channels, channels, k, 1, p, false, dev)?,
            bn: BatchNorm::new(channels, dev)?,
        })
    }

    /// Input is the channel concatenation of the triplet: (N, 3c, h, w).
    pub fn forward(&self, triplet: &Tensor, mode: Mode) -> candle_core::Result<Tensor> {
        let h = self.head.forward(triplet, mode)?;
        let h = self.rb1.forward(&h, mode)?;
        let h = self.rb2.forward(&h, mode)?;
        self.bn.forward(&self.tail.forward(&h, mode)?, mode)
    }

    fn register(&self, prefix: &str, out: &mut ParamList) {
        self.head.register(&format!("{prefix}.head"), out);
        self.rb1.register(&format!("{prefix}.rb1"), out);
        self.rb2.register(&format!("{prefix}.rb2"), out);
        self.tail.register(&format!("{prefix}.tail"), out);
        self.bn.register(&format!("{prefix}.bn"), out);
    }
}

/// Third-line merger `P_t`: consumes (e_a, e_b, q_t) and produces the
/// per-scale merged map `x_t` contribution.
pub struct ThirdLineMerger {
    head: Conv2d,
    rb: ResBlock,
}

impl ThirdLineMerger {
    fn new(rng: &mut InitRng, channels: usize, dev: &Device) -> Result<Self> {
        Ok(Self {
            head: Conv2d::new(rng, WeightInit::Kaiming, 3 * channels, channels, 3, 1, 1, false, dev)?,
            rb: ResBlock::new(rng, channels, 3, 1, dev)?,
        })
    }

    pub fn forward(&self, triplet: &Tensor, mode: Mode) -> candle_core::Result<Tensor> {
        self.rb.forward(&self.head.forward(triplet, mode)?, mode)
    }

    fn register(&self, prefix: &str, out: &mut ParamList) {
        self.head.register(&format!("{prefix}.head"), out);
        self.rb.register(&format!("{prefix}.rb"), out);
    }
}

/// Downsampling head for the high and mid scales: optional stem, two
/// strided residual blocks, global average pooling to `w128` features.
struct DownHead {
    stem: Option<(Conv2d, ResBlock)>,
    d1: DResBlock,
    d2: DResBlock,
}

impl DownHead {
    fn new(rng: &mut InitRng, c: usize, with_stem: bool, w: Width, dev: &Device) -> Result<Self> {
        let stem = if with_stem {
            Some((
                Conv2d::new(rng, WeightInit::Kaiming, 2 * c, c, 3, 1, 1, false, dev)?,
                ResBlock::new(rng, c, 3, 1, dev)?,
            ))
        } else {
            None
        };
        Ok(Self {
            stem,
            d1: DResBlock::new(rng, c, 2 * c, 2, dev)?,
            d2: DResBlock::new(rng, 2 * c, w.w128(), 2, dev)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        if let Some((conv, rb)) = &self.stem {
            h = rb.forward(&conv.forward(&h, mode)?, mode)?;
        }
        let h = self.d1.forward(&h, mode)?;
        let h = self.d2.forward(&h, mode)?;
        global_avg_pool(&h)
    }

    fn register(&self, prefix: &str, out: &mut ParamList) {
        if let Some((conv, rb)) = &self.stem {
            conv.register(&format!("{prefix}.stem_conv"), out);
            rb.register(&format!("{prefix}.stem_rb"), out);
        }
        self.d1.register(&format!("{prefix}.d1"), out);
        self.d2.register(&format!("{prefix}.d2"), out);
    }
}

/// Low-scale head: the 1x1 maps need no downsampling, only a channel
/// reduction to `w128` before pooling.
struct LowHead {
    stem: Option<(Conv2d, ResBlock)>,
    lead_rb: Option<ResBlock>,
    reduce: Conv2d,
    bn: BatchNorm,
    post: ResBlock,
}

impl LowHead {
    fn new(
        rng: &mut InitRng,
        c: usize,
        with_stem: bool,
        with_lead_rb: bool,
        w: Width,
        dev: &Device,
    ) -> Result<Self> {
        let stem = if with_stem {
            Some((
                Conv2d::new(rng, WeightInit::Kaiming, 2 * c, c, 3, 1, 1, false, dev)?,
                ResBlock::new(rng, c, 3, 1, dev)?,
            ))
        } else {
            None
        };
        let lead_rb = if with_lead_rb {
            Some(ResBlock::new(rng, c, 3, 1, dev)?)
        } else {
            None
        };
        Ok(Self {
            stem,
            lead_rb,
            reduce: Conv2d::new(rng, WeightInit::Kaiming, c, w.w128(), 1, 1, 0, false, dev)?,
            bn: BatchNorm::new(w.w128(), dev)?,
            post: ResBlock::new(rng, w.w128(), 1, 0, dev)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        if let Some((conv, rb)) = &self.stem {
            h = rb.forward(&conv.forward(&h, mode)?, mode)?;
        }
        if let Some(rb) = &self.lead_rb {
            h = rb.forward(&h, mode)?;
        }
        let h = self.bn.forward(&self.reduce.forward(&h, mode)?, mode)?.relu()?;
        let h = self.post.forward(&h, mode)?;
        global_avg_pool(&h)
    }

    fn register(&self, prefix: &str, out: &mut ParamList) {
        if let Some((conv, rb)) = &self.stem {
            conv.register(&format!("{prefix}.stem_conv"), out);
            rb.register(&format!("{prefix}.stem_rb"), out);
        }
        if let Some(rb) = &self.lead_rb {
            rb.register(&format!("{prefix}.lead_rb"), out);
        }
        self.reduce.register(&format!("{prefix}.reduce"), out);
        self.bn.register(&format!("{prefix}.bn"), out);
        self.post.register(&format!("{prefix}.post"), out);
    }
}

struct Mlp {
    l1: Linear,
    bn1: BatchNorm,
    l2: Linear,
    bn2: BatchNorm,
    l3: Linear,
}

impl Mlp {
    fn new(rng: &mut InitRng, cin: usize, c1: usize, c2: usize, cout: usize, dev: &Device) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(rng, WeightInit::Kaiming, cin, c1, false, dev)?,
            bn1: BatchNorm::new(c1, dev)?,
            l2: Linear::new(rng, WeightInit::Kaiming, c1, c2, false, dev)?,
            bn2: BatchNorm::new(c2, dev)?,
            l3: Linear::new(rng, WeightInit::Kaiming, c2, cout, true, dev)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> candle_core::Result<Tensor> {
        let h = self.bn1.forward(&self.l1.forward(x, mode)?, mode)?.relu()?;
        let h = self.bn2.forward(&self.l2.forward(&h, mode)?, mode)?.relu()?;
        self.l3.forward(&h, mode)
    }

    fn register(&self, prefix: &str, out: &mut ParamList) {
        self.l1.register(&format!("{prefix}.l1"), out);
        self.bn1.register(&format!("{prefix}.bn1"), out);
        self.l2.register(&format!("{prefix}.l2"), out);
        self.bn2.register(&format!("{prefix}.bn2"), out);
        self.l3.register(&format!("{prefix}.l3"), out);
    }
}

/// `CO`: scores one choice image against the merged context maps.
pub struct ChoiceClassifier {
    head_h: DownHead,
    head_m: DownHead,
    head_l: LowHead,
    mlp: Mlp,
}

impl ChoiceClassifier {
    fn new(rng: &mut InitRng, w: Width, dev: &Device) -> Result<Self> {
        Ok(Self {
            head_h: DownHead::new(rng, w.w64(), true, w, dev)?,
            head_m: DownHead::new(rng, w.w128(), true, w, dev)?,
            head_l: LowHead::new(rng, w.w256(), true, false, w, dev)?,
            mlp: Mlp::new(rng, w.fused_dim(), w.w256(), w.w128(), 1, dev)?,
        })
    }

    /// Raw logit; the sigmoid readout lives at the loss boundary.
    pub fn forward_logit(
        &self,
        x: [&Tensor; 3],
        choice: [&Tensor; 3],
        mode: Mode,
    ) -> candle_core::Result<Tensor> {
        let h = self
            .head_h
            .forward(&Tensor::cat(&[x[0], choice[0]], 1)?, mode)?;
        let m = self
            .head_m
            .forward(&Tensor::cat(&[x[1], choice[1]], 1)?, mode)?;
        let l = self
            .head_l
            .forward(&Tensor::cat(&[x[2], choice[2]], 1)?, mode)?;
        let cat = Tensor::cat(&[&h, &m, &l], 1)?;
        self.mlp.forward(&cat, mode)?.squeeze(1)
    }

    fn register(&self, out: &mut ParamList) {
        self.head_h.register("CO.head_h", out);
        self.head_m.register("CO.head_m", out);
        self.head_l.register("CO.head_l", out);
        self.mlp.register("CO.mlp", out);
    }
}

/// `CM`: predicts the 12-bit rule metadata from the merged context maps
/// alone; no choice image ever enters this network.
pub struct MetaClassifier {
    head_h: DownHead,
    head_m: DownHead,
    head_l: LowHead,
    mlp: Mlp,
}

impl MetaClassifier {
    fn new(rng: &mut InitRng, w: Width, dev: &Device) -> Result<Self> {
        Ok(Self {
            head_h: DownHead::new(rng, w.w64(), false, w, dev)?,
            head_m: DownHead::new(rng, w.w128(), false, w, dev)?,
            head_l: LowHead::new(rng, w.w256(), false, true, w, dev)?,
            mlp: Mlp::new(rng, w.fused_dim(), w.w256(), w.w128(), META_BITS, dev)?,
        })
    }

    pub fn forward_logits(&self, x: [&Tensor; 3], mode: Mode) -> candle_core::Result<Tensor> {
        let h = self.head_h.forward(x[0], mode)?;
        let m = self.head_m.forward(x[1], mode)?;
        let l = self.head_l.forward(x[2], mode)?;
        self.mlp.forward(&Tensor::cat(&[&h, &m, &l], 1)?, mode)
    }

    fn register(&self, out: &mut ParamList) {
        self.head_h.register("CM.head_h", out);
        self.head_m.register("CM.head_m", out);
        self.head_l.register("CM.head_l", out);
        self.mlp.register("CM.mlp", out);
    }
}

/// `R`: reduces the three merged maps to the fused context vector `x`.
pub struct ScaleFuser {
    head_h: DownHead,
    head_m: DownHead,
    head_l: LowHead,
}

impl ScaleFuser {
    fn new(rng: &mut InitRng, w: Width, dev: &Device) -> Result<Self> {
        Ok(Self {
            head_h: DownHead::new(rng, w.w64(), false, w, dev)?,
            head_m: DownHead::new(rng, w.w128(), false, w, dev)?,
            head_l: LowHead::new(rng, w.w256(), false, false, w, dev)?,
        })
    }

    pub fn forward(&self, x: [&Tensor; 3], mode: Mode) -> candle_core::Result<Tensor> {
        let h = self.head_h.forward(x[0], mode)?;
        let m = self.head_m.forward(x[1], mode)?;
        let l = self.head_l.forward(x[2], mode)?;
        Tensor::cat(&[&h, &m, &l], 1)
    }

    fn register(&self, out: &mut ParamList) {
        self.head_h.register("R.head_h", out);
        self.head_m.register("R.head_m", out);
        self.head_l.register("R.head_l", out);
    }
}

/// `T`: maps the fused context embedding into the VAE latent space.
///
/// The standard form emits `(mu_g, log-variance)` for reparameterization.
/// The no-reparameterization ablation instead takes `x` concatenated with
/// a 128-dim noise vector and emits the latent directly.
pub struct Translator {
    l1: Linear,
    l2: Linear,
    l3: Linear,
    reparam: bool,
}

impl Translator {
    fn new(rng: &mut InitRng, w: Width, reparam: bool, dev: &Device) -> Result<Self> {
        let cin = if reparam {
            w.fused_dim()
        } else {
            w.fused_dim() + DIRECT_NOISE_DIM
        };
        let cout = if reparam { 2 * LATENT_DIM } else { LATENT_DIM };
        Ok(Self {
            l1: Linear::new(rng, WeightInit::Kaiming, cin, w.w128(), false, dev)?,
            l2: Linear::new(rng, WeightInit::Kaiming, w.w128(), w.w128(), false, dev)?,
            l3: Linear::new(rng, WeightInit::Kaiming, w.w128(), cout, false, dev)?,
            reparam,
        })
    }

    pub fn has_reparam(&self) -> bool {
        self.reparam
    }

    fn trunk(&self, x: &Tensor, mode: Mode) -> candle_core::Result<Tensor> {
        let h = self.l1.forward(x, mode)?.relu()?;
        let h = self.l2.forward(&h, mode)?.relu()?;
        self.l3.forward(&h, mode)
    }

    /// `(mu_g, sigma_g)`; sigma is made positive by exponentiating the
    /// raw log-variance half of the output.
    pub fn forward_stats(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        if !self.reparam {
            return Err(Error::config(
                "translator was built without reparameterization",
            ));
        }
        let out = self.trunk(x, mode)?;
        let mu = out.narrow(1, 0, LATENT_DIM)?;
        let logvar = out.narrow(1, LATENT_DIM, LATENT_DIM)?;
        let sigma = (logvar * 0.5)?.exp()?;
        Ok((mu, sigma))
    }

    /// Direct latent for the no-reparameterization ablation; `x_noise`
    /// is the fused embedding with the noise vector already appended.
    pub fn forward_direct(&self, x_noise: &Tensor, mode: Mode) -> Result<Tensor> {
        if self.reparam {
            return Err(Error::config(
                "translator was built with reparameterization",
            ));
        }
        Ok(self.trunk(x_noise, mode)?)
    }

    fn register(&self, out: &mut ParamList) {
        self.l1.register("T.l1", out);
        self.l2.register("T.l2", out);
        self.l3.register("T.l3", out);
    }
}

/// VAE encoder `E`.
pub struct VaeEncoder {
    convs: Vec<(Conv2d, BatchNorm)>,
    fc: Linear,
}

impl VaeEncoder {
    fn new(rng: &mut InitRng, w: Width, dev: &Device) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = 1;
        for _ in 0..4 {
            convs.push((
                Conv2d::new(rng, WeightInit::Kaiming, cin, w.w32(), 3, 2, 0, true, dev)?,
                BatchNorm::new(w.w32(), dev)?,
            ));
            cin = w.w32();
        }
        // 80 -> 39 -> 19 -> 9 -> 4, so the flattened size is w32 * 4 * 4.
        Ok(Self {
            convs,
            fc: Linear::new(rng, WeightInit::Kaiming, w.w32() * 16, 2 * LATENT_DIM, true, dev)?,
        })
    }

    /// `(mu_v, sigma_v)`, sigma strictly positive.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        expect_images(images, "vae_encode")?;
        let mut h = images.clone();
        for (conv, bn) in &self.convs {
            h = bn.forward(&conv.forward(&h, mode)?, mode)?.relu()?;
        }
        let h = h.flatten_from(1)?;
        let out = self.fc.forward(&h, mode)?;
        let mu = out.narrow(1, 0, LATENT_DIM)?;
        let logvar = out.narrow(1, LATENT_DIM, LATENT_DIM)?;
        let sigma = (logvar * 0.5)?.exp()?;
        Ok((mu, sigma))
    }

    fn register(&self, out: &mut ParamList) {
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            conv.register(&format!("E.conv{}", i + 1), out);
            bn.register(&format!("E.bn{}", i + 1), out);
        }
        self.fc.register("E.fc", out);
    }
}

/// Generator `G`: 64-dim latent to an 80x80 image in [0,1].
pub struct Generator {
    blocks: Vec<(ConvTranspose2d, Option<BatchNorm>)>,
}

impl Generator {
    fn new(rng: &mut InitRng, w: Width, dev: &Device) -> Result<Self> {
        let chain = [
            (LATENT_DIM, w.w512(), 5, 1, 0, true),
            (w.w512(), w.w256(), 4, 2, 1, true),
            (w.w256(), w.w128(), 4, 2, 1, true),
            (w.w128(), w.w64(), 4, 2, 1, true),
            (w.w64(), 1, 4, 2, 1, false),
        ];
        let mut blocks = Vec::new();
        for (cin, cout, k, s, p, bn) in chain {
            blocks.push((
                ConvTranspose2d::new(rng, WeightInit::Gan, cin, cout, k, s, p, dev)?,
                if bn { Some(BatchNorm::new(cout, dev)?) } else { None },
            ));
        }
        Ok(Self { blocks })
    }

    pub fn forward(&self, latent: &Tensor, mode: Mode) -> Result<Tensor> {
        let dims = latent.dims();
        if dims.len() != 2 || dims[1] != LATENT_DIM {
            return Err(Error::shape(format!(
                "generate expects (N,{LATENT_DIM}) latents, got {dims:?}"
            )));
        }
        let mut h = latent.reshape((dims[0], LATENT_DIM, 1, 1))?;
        for (i, (convt, bn)) in self.blocks.iter().enumerate() {
            h = convt.forward(&h, mode)?;
            if let Some(bn) = bn {
                h = bn.forward(&h, mode)?.relu()?;
            }
            if i == self.blocks.len() - 1 {
                h = sigmoid(&h)?;
            }
        }
        Ok(h)
    }

    fn register(&self, out: &mut ParamList) {
        for (i, (convt, bn)) in self.blocks.iter().enumerate() {
            convt.register(&format!("G.convt{}", i + 1), out);
            if let Some(bn) = bn {
                bn.register(&format!("G.bn{}", i + 1), out);
            }
        }
    }
}

/// Unconditioned discriminator `D`; emits a probability in (0,1).
pub struct Discriminator {
    convs: Vec<(Conv2d, Option<BatchNorm>)>,
}

impl Discriminator {
    fn new(rng: &mut InitRng, w: Width, dev: &Device) -> Result<Self> {
        let chain = [
            (1, w.w64(), 4, 2, 1, false),
            (w.w64(), w.w128(), 4, 2, 1, true),
            (w.w128(), w.w256(), 4, 2, 1, true),
            (w.w256(), w.w512(), 4, 2, 1, true),
            (w.w512(), 1, 4, 1, 0, false),
            (1, 1, 2, 1, 0, false),
        ];
        let mut convs = Vec::new();
        for (cin, cout, k, s, p, bn) in chain {
            convs.push((
                Conv2d::new(rng, WeightInit::Gan, cin, cout, k, s, p, false, dev)?,
                if bn { Some(BatchNorm::new(cout, dev)?) } else { None },
            ));
        }
        Ok(Self { convs })
    }

    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        expect_images(images, "discriminate")?;
        let n = images.dims()[0];
        let mut h = images.clone();
        let last = self.convs.len() - 1;
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            h = conv.forward(&h, mode)?;
            if let Some(bn) = bn {
                h = bn.forward(&h, mode)?;
            }
            if i < last {
                h = leaky_relu(&h, 0.2)?;
            }
        }
        Ok(sigmoid(&h)?.reshape(n)?)
    }

    fn register(&self, out: &mut ParamList) {
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            conv.register(&format!("D.conv{}", i + 1), out);
            if let Some(bn) = bn {
                bn.register(&format!("D.bn{}", i + 1), out);
            }
        }
    }
}

/// The full set of sub-networks.
pub struct Model {
    pub width: Width,
    pub device: Device,
    pub vae_enc: VaeEncoder,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub ctx_enc: ContextEncoder,
    reason: [ReasonModule; 3],
    third: [ThirdLineMerger; 3],
    pub choice_clf: ChoiceClassifier,
    pub meta_clf: MetaClassifier,
    pub scale_fuser: ScaleFuser,
    pub translator: Translator,
}

impl Model {
    pub fn new(width_mult: f64, reparam_translator: bool, seed: u64) -> Result<Self> {
        let dev = Device::Cpu;
        let w = Width::from_mult(width_mult);
        let mut rng = InitRng::new(seed);
        Ok(Self {
            width: w,
            vae_enc: VaeEncoder::new(&mut rng, w, &dev)?,
            generator: Generator::new(&mut rng, w, &dev)?,
            discriminator: Discriminator::new(&mut rng, w, &dev)?,
            ctx_enc: ContextEncoder::new(&mut rng, w, &dev)?,
            reason: [
                ReasonModule::new(&mut rng, w.w64(), false, &dev)?,
                ReasonModule::new(&mut rng, w.w128(), false, &dev)?,
                ReasonModule::new(&mut rng, w.w256(), true, &dev)?,
            ],
            third: [
                ThirdLineMerger::new(&mut rng, w.w64(), &dev)?,
                ThirdLineMerger::new(&mut rng, w.w128(), &dev)?,
                ThirdLineMerger::new(&mut rng, w.w256(), &dev)?,
            ],
            choice_clf: ChoiceClassifier::new(&mut rng, w, &dev)?,
            meta_clf: MetaClassifier::new(&mut rng, w, &dev)?,
            scale_fuser: ScaleFuser::new(&mut rng, w, &dev)?,
            translator: Translator::new(&mut rng, w, reparam_translator, &dev)?,
            device: dev,
        })
    }

    pub fn has_reparam_translator(&self) -> bool {
        self.translator.has_reparam()
    }

    /// Every parameter and buffer under its canonical module-path name.
    pub fn params(&self) -> ParamList {
        let mut out = ParamList::default();
        self.vae_enc.register(&mut out);
        self.generator.register(&mut out);
        self.discriminator.register(&mut out);
        self.ctx_enc.register(&mut out);
        for (rm, name) in self.reason.iter().zip(["RM_h", "RM_m", "RM_l"]) {
            rm.register(name, &mut out);
        }
        for (p, name) in self.third.iter().zip(["P_h", "P_m", "P_l"]) {
            p.register(name, &mut out);
        }
        self.choice_clf.register(&mut out);
        self.meta_clf.register(&mut out);
        self.scale_fuser.register(&mut out);
        self.translator.register(&mut out);
        out
    }

    /// Parameters owned by a top-level module, by canonical name prefix.
    pub fn params_of(&self, prefixes: &[&str]) -> ParamList {
        let all = self.params();
        ParamList {
            entries: all
                .entries
                .into_iter()
                .filter(|e| {
                    prefixes
                        .iter()
                        .any(|p| e.name.starts_with(&format!("{p}.")))
                })
                .collect(),
        }
    }

    // ---- spec-level operations -------------------------------------

    pub fn vae_encode(&self, images: &Tensor, mode: Mode) -> Result<LatentCode> {
        let (mu, sigma) = self.vae_enc.forward(images, mode)?;
        Ok(LatentCode::from_stats(mu, sigma))
    }

    pub fn generate(&self, latent: &Tensor, mode: Mode) -> Result<Tensor> {
        self.generator.forward(latent, mode)
    }

    pub fn context_encode(&self, images: &Tensor, mode: Mode) -> Result<ScaleEmbedding> {
        self.ctx_enc.forward(images, mode)
    }

    /// Applies the scale's reasoning module to an (a, b, c) triplet. The
    /// same parameters serve row and column triplets.
    pub fn reason(
        &self,
        scale: Scale,
        a: &Tensor,
        b: &Tensor,
        c: &Tensor,
        mode: Mode,
    ) -> Result<Tensor> {
        let want = self.width.scale_channels(scale);
        for t in [a, b, c] {
            let dims = t.dims();
            if dims.len() != 4 || dims[1] != want {
                return Err(Error::shape(format!(
                    "reason at {scale:?} expects (N,{want},h,w) embeddings, got {dims:?}"
                )));
            }
            if dims != a.dims() {
                return Err(Error::shape("reason expects equal triplet shapes"));
            }
        }
        let cat = Tensor::cat(&[a, b, c], 1)?;
        Ok(self.reason_cat(scale, &cat, mode)?)
    }

    pub(crate) fn reason_cat(
        &self,
        scale: Scale,
        triplet: &Tensor,
        mode: Mode,
    ) -> candle_core::Result<Tensor> {
        self.reason[scale.index()].forward(triplet, mode)
    }

    /// `x_t = P_t(e7, e8, q) + P_t(e3, e6, q)`, both calls through the
    /// same merger parameters.
    pub fn merge_third_lines(
        &self,
        scale: Scale,
        e7: &Tensor,
        e8: &Tensor,
        e3: &Tensor,
        e6: &Tensor,
        q: &Tensor,
        mode: Mode,
    ) -> Result<Tensor> {
        let row = Tensor::cat(&[e7, e8, q], 1)?;
        let col = Tensor::cat(&[e3, e6, q], 1)?;
        let p = &self.third[scale.index()];
        Ok((p.forward(&row, mode)? + p.forward(&col, mode)?)?)
    }

    pub(crate) fn merge_third_cat(
        &self,
        scale: Scale,
        triplet: &Tensor,
        mode: Mode,
    ) -> candle_core::Result<Tensor> {
        self.third[scale.index()].forward(triplet, mode)
    }

    /// Probability that a choice is the correct answer.
    pub fn classify_choice(
        &self,
        x: [&Tensor; 3],
        choice: [&Tensor; 3],
        mode: Mode,
    ) -> Result<Tensor> {
        let logit = self.choice_clf.forward_logit(x, choice, mode)?;
        Ok(sigmoid(&logit)?)
    }

    /// 12 per-bit probabilities for the rule metadata.
    pub fn classify_meta(&self, x: [&Tensor; 3], mode: Mode) -> Result<Tensor> {
        let logits = self.meta_clf.forward_logits(x, mode)?;
        Ok(sigmoid(&logits)?)
    }

    pub fn fuse_scales(&self, x: [&Tensor; 3], mode: Mode) -> Result<Tensor> {
        Ok(self.scale_fuser.forward(x, mode)?)
    }

    pub fn translate(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        self.translator.forward_stats(x, mode)
    }

    pub fn discriminate(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        self.discriminator.forward(images, mode)
    }
}
