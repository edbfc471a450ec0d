//! Training signals: VAE loss, standard and dynamic-selective KLD, the
//! contrastive metric, GAN losses, the classifier loss, and the
//! conditioned-generation loss over relation codes.
//!
//! Everything is batched: per-sample terms are averaged over the batch so
//! a scalar tensor comes out, still attached to the autodiff graph.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nets::Model;
use crate::nn::Mode;

/// Loss weighting used by the full training objective. Everything not
/// listed here enters with weight 1.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Tradeoff between KLD and reconstruction inside the VAE loss.
    pub lambda_kl1: f64,
    /// Weight of the whole VAE loss in the total objective.
    pub vae: f64,
    /// Extra factor on the rule-metadata BCE term.
    pub cm: f64,
    /// Weight of the positive (target) contrastive sub-total.
    pub contrast_pos: f64,
    /// Weight of the negative (distractor) contrastive sub-total.
    pub contrast_neg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kl1: 4.0,
            vae: 0.1,
            cm: 10.0,
            contrast_pos: 3e-3,
            contrast_neg: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_kl1", self.lambda_kl1),
            ("vae", self.vae),
            ("cm", self.cm),
            ("contrast_pos", self.contrast_pos),
            ("contrast_neg", self.contrast_neg),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        1 => Ok(t.unsqueeze(0)?),
        2 => Ok(t.clone()),
        r => Err(Error::shape(format!("expected rank 1 or 2, got {r}"))),
    }
}

/// Closed-form KL divergence against a unit Gaussian, summed over latent
/// indices: sum_i 1/2 (mu_i^2 + sigma_i^2 - log sigma_i^2 - 1).
/// Returns one value per sample.
pub fn kld_standard(mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let mu = as_batch(mu)?;
    let sigma = as_batch(sigma)?;
    if mu.dims() != sigma.dims() {
        return Err(Error::shape(format!(
            "kld expects equal shapes, got {:?} vs {:?}",
            mu.dims(),
            sigma.dims()
        )));
    }
    let var = sigma.sqr()?;
    let term = ((mu.sqr()? + &var)? - (var.log()? + 1.0)?)?;
    Ok((term.sum(1)? * 0.5)?)
}

/// Per-sample median of the last dimension, from detached values.
fn median_last_dim(t: &Tensor) -> Result<Tensor> {
    let (sorted, _) = t.detach().sort_last_dim(true)?;
    let d = t.dims()[t.rank() - 1];
    let med = if d % 2 == 1 {
        sorted.narrow(1, d / 2, 1)?
    } else {
        let lo = sorted.narrow(1, d / 2 - 1, 1)?;
        let hi = sorted.narrow(1, d / 2, 1)?;
        (((lo + hi)?) * 0.5)?
    };
    Ok(med)
}

/// Dynamic Selective KLD: the mean penalty applies to every index, the
/// variance penalty only to the per-sample subset of indices whose
/// variance lies strictly above the per-sample median variance. The
/// subset is recomputed for every sample on every call.
pub fn ds_kld(mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let mu = as_batch(mu)?;
    let sigma = as_batch(sigma)?;
    if mu.dims() != sigma.dims() {
        return Err(Error::shape(format!(
            "ds_kld expects equal shapes, got {:?} vs {:?}",
            mu.dims(),
            sigma.dims()
        )));
    }
    let min_sigma = sigma
        .detach()
        .flatten_all()?
        .min(0)?
        .to_scalar::<f32>()?;
    if !(min_sigma > 0.0) {
        return Err(Error::Domain(format!(
            "ds_kld requires sigma > 0, got minimum {min_sigma}"
        )));
    }
    let var = sigma.sqr()?;
    let median = median_last_dim(&var)?;
    let mask = var
        .detach()
        .gt(&median.broadcast_as(var.shape())?)?
        .to_dtype(DType::F32)?;
    let mean_term = (mu.sqr()?.sum(1)? * 0.5)?;
    let var_term = ((&var - (var.log()? + 1.0)?)? * mask)?;
    let var_term = (var_term.sum(1)? * 0.5)?;
    Ok((mean_term + var_term)?)
}

/// Variance penalty restricted to a fixed index mask instead of the
/// dynamic median split; used by the static-half ablation.
pub fn kld_fixed_mask(mu: &Tensor, sigma: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mu = as_batch(mu)?;
    let sigma = as_batch(sigma)?;
    let var = sigma.sqr()?;
    let mean_term = (mu.sqr()?.sum(1)? * 0.5)?;
    let var_term = ((&var - (var.log()? + 1.0)?)?.broadcast_mul(mask)?.sum(1)? * 0.5)?;
    Ok((mean_term + var_term)?)
}

/// VAE loss: mean over the autoencoded images of
/// `lambda_kl1 * KLD + MSE(reconstruction, original)`.
pub fn vae_loss(
    reconstruction: &Tensor,
    original: &Tensor,
    mu: &Tensor,
    sigma: &Tensor,
    lambda_kl1: f64,
) -> Result<Tensor> {
    if reconstruction.dims() != original.dims() {
        return Err(Error::shape(format!(
            "vae_loss image shapes differ: {:?} vs {:?}",
            reconstruction.dims(),
            original.dims()
        )));
    }
    let kld = kld_standard(mu, sigma)?.mean_all()?;
    let mse = (reconstruction - original)?.sqr()?.mean_all()?;
    Ok(((kld * lambda_kl1)? + mse)?)
}

/// `Contrast(x0, x1, y) = y * d2 + (1 - y) * max(0, alpha - d2)` with the
/// squared Euclidean distance over flattened inputs.
pub fn contrastive(x0: &Tensor, x1: &Tensor, y: f64, alpha: f64) -> Result<Tensor> {
    if x0.dims() != x1.dims() {
        return Err(Error::shape(format!(
            "contrastive expects equal shapes, got {:?} vs {:?}",
            x0.dims(),
            x1.dims()
        )));
    }
    let d2 = (x0 - x1)?.sqr()?.sum_all()?;
    let pos = (&d2 * y)?;
    let hinge = ((d2 * -1.0)? + alpha)?.relu()?;
    Ok((pos + (hinge * (1.0 - y))?)?)
}

/// Squared distances between one embedding per problem and eight
/// candidate embeddings per problem: (N, D) x (N, 8, D) -> (N, 8).
fn pairwise_d2(single: &Tensor, eight: &Tensor) -> Result<Tensor> {
    let n = single.dims()[0];
    let flat_single = single.reshape((n, 1, single.elem_count() / n))?;
    let flat_eight = eight.reshape((n, 8, eight.elem_count() / (8 * n)))?;
    Ok(flat_eight.broadcast_sub(&flat_single)?.sqr()?.sum(2)?)
}

fn one_hot(indices: &[usize], width: usize, dev: &candle_core::Device) -> Result<Tensor> {
    let mut data = vec![0f32; indices.len() * width];
    for (row, &idx) in indices.iter().enumerate() {
        if idx >= width {
            return Err(Error::shape(format!("index {idx} out of range 0..{width}")));
        }
        data[row * width + idx] = 1.0;
    }
    Ok(Tensor::from_vec(data, (indices.len(), width), dev)?)
}

/// Positive/negative contrastive sub-totals from per-candidate squared
/// distances (N, 8): the positive term picks the target column, the
/// negative term averages the hinge over the 7 distractors.
fn pos_neg_from_d2(d2: &Tensor, target: &[usize], alpha: f64) -> Result<(Tensor, Tensor)> {
    let hot = one_hot(target, 8, d2.device())?;
    let pos = (d2 * &hot)?.sum(1)?;
    let hinge = ((d2 * -1.0)? + alpha)?.relu()?;
    let inv_hot = ((hot * -1.0)? + 1.0)?;
    let neg = ((hinge * inv_hot)?.sum(1)? / 7.0)?;
    Ok((pos, neg))
}

/// Relation codes produced by the frozen critic for the generated image
/// and all eight choices, per scale.
pub struct CriticCodes {
    /// Row codes of the generated candidate, one (N, c, h, w) per scale.
    pub r_gen: Vec<Tensor>,
    /// Column codes of the generated candidate.
    pub c_gen: Vec<Tensor>,
    /// Row codes of the eight choices, one (N, 8, c, h, w) per scale.
    pub r_choices: Vec<Tensor>,
    /// Column codes of the eight choices.
    pub c_choices: Vec<Tensor>,
}

/// The conditioned perceptual loss over relation codes. For every scale,
/// both the row and the column code of the generated image are pulled
/// toward the target's codes and pushed from the 7 distractors' codes.
/// Sub-totals are returned separately so the trainer can weight them.
pub fn cond_loss(codes: &CriticCodes, target: &[usize], alpha: f64) -> Result<(Tensor, Tensor)> {
    let mut pos_total: Option<Tensor> = None;
    let mut neg_total: Option<Tensor> = None;
    for scale in 0..3 {
        for (gen, choices) in [
            (&codes.r_gen[scale], &codes.r_choices[scale]),
            (&codes.c_gen[scale], &codes.c_choices[scale]),
        ] {
            let d2 = pairwise_d2(gen, choices)?;
            let (pos, neg) = pos_neg_from_d2(&d2, target, alpha)?;
            pos_total = Some(match pos_total {
                Some(t) => (t + pos)?,
                None => pos,
            });
            neg_total = Some(match neg_total {
                Some(t) => (t + neg)?,
                None => neg,
            });
        }
    }
    let pos = pos_total.expect("three scales").mean_all()?;
    let neg = neg_total.expect("three scales").mean_all()?;
    Ok((pos, neg))
}

/// Mean relation-space squared distance between the generated codes and
/// all eight choices' codes (rows and columns, all scales); feeds the
/// dynamic margin update. Detached.
pub fn mean_relation_distance(codes: &CriticCodes) -> Result<f64> {
    let mut sum = 0f64;
    let mut count = 0f64;
    for scale in 0..3 {
        for (gen, choices) in [
            (&codes.r_gen[scale], &codes.r_choices[scale]),
            (&codes.c_gen[scale], &codes.c_choices[scale]),
        ] {
            let d2 = pairwise_d2(&gen.detach(), &choices.detach())?;
            sum += d2.sum_all()?.to_scalar::<f32>()? as f64;
            count += d2.elem_count() as f64;
        }
    }
    Ok(sum / count)
}

/// Pixel-space variant of the conditioned loss: contrast on raw images.
pub fn cond_loss_pixel(
    generated: &Tensor,
    choices: &Tensor,
    target: &[usize],
    alpha: f64,
) -> Result<(Tensor, Tensor)> {
    let d2 = pairwise_d2(generated, &choices.detach())?;
    let (pos, neg) = pos_neg_from_d2(&d2, target, alpha)?;
    Ok((pos.mean_all()?, neg.mean_all()?))
}

/// Feature-space variant: contrast on the frozen-encoded generated
/// embeddings against detached choice embeddings, the three scales
/// flattened and concatenated per image.
pub fn cond_loss_feature(
    gen_emb: [&Tensor; 3],
    choice_emb: [&Tensor; 3],
    target: &[usize],
    alpha: f64,
) -> Result<(Tensor, Tensor)> {
    let n = gen_emb[0].dims()[0];
    let flat_gen = Tensor::cat(
        &gen_emb
            .iter()
            .map(|t| t.reshape((n, t.elem_count() / n)))
            .collect::<candle_core::Result<Vec<_>>>()?,
        1,
    )?;
    let flat_choices = Tensor::cat(
        &choice_emb
            .iter()
            .map(|t| t.detach().reshape((n, 8, t.elem_count() / (8 * n))))
            .collect::<candle_core::Result<Vec<_>>>()?,
        2,
    )?;
    let d2 = pairwise_d2(&flat_gen, &flat_choices)?;
    let (pos, neg) = pos_neg_from_d2(&d2, target, alpha)?;
    Ok((pos.mean_all()?, neg.mean_all()?))
}

const PROB_CLAMP: f64 = 1e-6;

/// Standard GAN losses in their numerically-safe minimization form.
/// The discriminator loss sees a detached copy of the generated image,
/// so its gradient never reaches the generator; the generator loss is
/// the non-saturating `-log D(I_g)`.
pub fn gan_losses(
    model: &Model,
    real: &Tensor,
    generated: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Tensor)> {
    let d_real = clamp_prob(&model.discriminate(real, mode)?)?;
    let d_fake_detached = clamp_prob(&model.discriminate(&generated.detach(), mode)?)?;
    let one_minus_fake = ((d_fake_detached * -1.0)? + 1.0)?;
    let loss_d = ((d_real.log()? + one_minus_fake.log()?)? * -1.0)?.mean_all()?;
    let d_fake = clamp_prob(&model.discriminate(generated, mode)?)?;
    let loss_g = (d_fake.log()? * -1.0)?.mean_all()?;
    Ok((loss_d, loss_g))
}

fn clamp_prob(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?)
}

/// Binary cross-entropy from logits, elementwise.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::shape(format!(
            "bce shapes differ: {:?} vs {:?}",
            logits.dims(),
            targets.dims()
        )));
    }
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * targets)?)? + softplus)?)
}

/// Classifier loss parts: mean BCE over the eight choice scores and mean
/// BCE over the twelve metadata bits, returned separately so the meta
/// term can carry its own weight.
pub fn classifier_loss_parts(
    y_logits: &Tensor,
    y: &Tensor,
    psi_logits: &Tensor,
    psi: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let choice = bce_with_logits(y_logits, y)?.mean_all()?;
    let meta = bce_with_logits(psi_logits, psi)?.mean_all()?;
    Ok((choice, meta))
}

/// `(1/8) sum BCE(y_hat, y) + (1/12) sum BCE(psi_hat, psi)`.
pub fn classifier_loss(
    y_logits: &Tensor,
    y: &Tensor,
    psi_logits: &Tensor,
    psi: &Tensor,
) -> Result<Tensor> {
    let (choice, meta) = classifier_loss_parts(y_logits, y, psi_logits, psi)?;
    Ok((choice + meta)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn dev() -> Device {
        Device::Cpu
    }

    fn t1(data: &[f32]) -> Tensor {
        Tensor::new(data, &dev()).unwrap()
    }

    fn scalar(t: &Tensor) -> f32 {
        t.flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .iter()
            .sum()
    }

    // Independent f64 reference for the standard KLD.
    fn kld_oracle(mu: &[f64], sigma: &[f64]) -> f64 {
        mu.iter()
            .zip(sigma)
            .map(|(m, s)| 0.5 * (m * m + s * s - (s * s).ln() - 1.0))
            .sum()
    }

    // Independent f64 reference for DS-KLD.
    fn ds_kld_oracle(mu: &[f64], sigma: &[f64]) -> f64 {
        let mut vars: Vec<f64> = sigma.iter().map(|s| s * s).collect();
        let mut sorted = vars.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let d = sorted.len();
        let median = if d % 2 == 1 {
            sorted[d / 2]
        } else {
            0.5 * (sorted[d / 2 - 1] + sorted[d / 2])
        };
        let mean_term: f64 = mu.iter().map(|m| 0.5 * m * m).sum();
        vars.retain(|v| *v > median);
        let var_term: f64 = vars.iter().map(|v| 0.5 * (v - v.ln() - 1.0)).sum();
        mean_term + var_term
    }

    #[test]
    fn kld_standard_known_values() {
        let z = kld_standard(&t1(&[0.0, 0.0]), &t1(&[1.0, 1.0])).unwrap();
        assert!(scalar(&z).abs() < 1e-7);
        let half = kld_standard(&t1(&[1.0]), &t1(&[1.0])).unwrap();
        assert!((scalar(&half) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn kld_matches_oracle_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        for _ in 0..100 {
            let d = rng.random_range(2..32);
            let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sigma: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..3.0)).collect();
            let mu32: Vec<f32> = mu.iter().map(|v| *v as f32).collect();
            let sg32: Vec<f32> = sigma.iter().map(|v| *v as f32).collect();
            let got = scalar(&kld_standard(&t1(&mu32), &t1(&sg32)).unwrap()) as f64;
            // Recompute the oracle on the f32-rounded inputs.
            let mu64: Vec<f64> = mu32.iter().map(|v| *v as f64).collect();
            let sg64: Vec<f64> = sg32.iter().map(|v| *v as f64).collect();
            let want = kld_oracle(&mu64, &sg64);
            assert!(
                (got - want).abs() <= 1e-6 * want.abs().max(1.0),
                "kld {got} vs oracle {want}"
            );
        }
    }

    #[test]
    fn ds_kld_known_values() {
        // No variance above an all-equal median and zero means -> 0.
        let z = ds_kld(&t1(&[0.0; 4]), &t1(&[1.0; 4])).unwrap();
        assert!(scalar(&z).abs() < 1e-7);

        // mu = 0, var = [0.25, 1, 4, 16]: only {4, 16} pass the median.
        let sigma = t1(&[0.5, 1.0, 2.0, 4.0]);
        let got = scalar(&ds_kld(&t1(&[0.0; 4]), &sigma).unwrap()) as f64;
        let want = 0.5 * ((4.0 - 4f64.ln() - 1.0) + (16.0 - 16f64.ln() - 1.0));
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        assert!((want - 6.9206).abs() < 1e-4);
    }

    #[test]
    fn ds_kld_matches_oracle_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(13);
        for _ in 0..100 {
            let d = rng.random_range(2..64);
            let mu32: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let sg32: Vec<f32> = (0..d).map(|_| rng.random_range(0.05f32..3.0)).collect();
            let got = scalar(&ds_kld(&t1(&mu32), &t1(&sg32)).unwrap()) as f64;
            let mu64: Vec<f64> = mu32.iter().map(|v| *v as f64).collect();
            let sg64: Vec<f64> = sg32.iter().map(|v| *v as f64).collect();
            let want = ds_kld_oracle(&mu64, &sg64);
            let rel = (got - want).abs() / want.abs().max(1.0);
            assert!(rel <= 2e-6, "ds_kld {got} vs oracle {want}");
        }
    }

    #[test]
    fn ds_kld_rejects_nonpositive_sigma() {
        let err = ds_kld(&t1(&[0.0, 0.0]), &t1(&[1.0, 0.0]));
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn ds_kld_gradient_zero_below_median() {
        // Finite differences on each sigma index: indices at or below the
        // median variance must contribute exactly no gradient.
        let mu = vec![0f32; 4];
        let sigma = vec![0.5f32, 1.0, 2.0, 4.0];
        let eval = |s: &[f32]| -> f64 {
            scalar(&ds_kld(&t1(&mu), &t1(s)).unwrap()) as f64
        };
        let h = 1e-3f32;
        for i in 0..4 {
            let mut up = sigma.clone();
            up[i] += h;
            let mut dn = sigma.clone();
            dn[i] -= h;
            let g = (eval(&up) - eval(&dn)) / (2.0 * h as f64);
            if i < 2 {
                assert_eq!(g, 0.0, "index {i} is below the median but got grad {g}");
            } else {
                assert!(g.abs() > 1e-3, "index {i} above median should have grad");
            }
        }
    }

    #[test]
    fn ds_kld_never_exceeds_standard_kld() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for _ in 0..50 {
            let d = rng.random_range(2..64);
            let mu: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let sg: Vec<f32> = (0..d).map(|_| rng.random_range(0.05f32..3.0)).collect();
            let full = scalar(&kld_standard(&t1(&mu), &t1(&sg)).unwrap());
            let ds = scalar(&ds_kld(&t1(&mu), &t1(&sg)).unwrap());
            assert!(ds <= full + 1e-5, "ds {ds} > standard {full}");
        }
    }

    #[test]
    fn contrastive_known_values() {
        let v = t1(&[0.3, -0.7, 2.0]);
        assert!(scalar(&contrastive(&v, &v, 1.0, 3.0).unwrap()).abs() < 1e-7);
        assert!((scalar(&contrastive(&v, &v, 0.0, 3.0).unwrap()) - 3.0).abs() < 1e-6);
        // Saturated hinge: d2 >= alpha -> 0.
        let far = t1(&[10.0, -0.7, 2.0]);
        assert!(scalar(&contrastive(&v, &far, 0.0, 3.0).unwrap()).abs() < 1e-7);
    }

    #[test]
    fn vae_loss_known_values() {
        let img = Tensor::zeros((2, 1, 4, 4), DType::F32, &dev()).unwrap();
        let mu = Tensor::zeros((2, 3), DType::F32, &dev()).unwrap();
        let sigma = Tensor::ones((2, 3), DType::F32, &dev()).unwrap();
        let zero = vae_loss(&img, &img, &mu, &sigma, 4.0).unwrap();
        assert!(scalar(&zero).abs() < 1e-7);

        let recon = (&img + 0.1).unwrap();
        let l = vae_loss(&recon, &img, &mu, &sigma, 4.0).unwrap();
        assert!((scalar(&l) - 0.01).abs() < 1e-6);

        // lambda = 0 reduces to pure MSE even with nonzero stats.
        let mu2 = (&mu + 1.0).unwrap();
        let l2 = vae_loss(&recon, &img, &mu2, &sigma, 0.0).unwrap();
        assert!((scalar(&l2) - 0.01).abs() < 1e-6);
    }

    #[test]
    fn classifier_loss_known_values() {
        // Uniform 0.5 on the choices (logit 0) with any labels -> ln 2.
        let y_logits = Tensor::zeros((1, 8), DType::F32, &dev()).unwrap();
        let mut y = vec![0f32; 8];
        y[3] = 1.0;
        let y = Tensor::from_vec(y, (1, 8), &dev()).unwrap();
        let psi_logits = Tensor::full(20f32, (1, 12), &dev()).unwrap();
        let psi = Tensor::ones((1, 12), DType::F32, &dev()).unwrap();
        let (choice, meta) = classifier_loss_parts(&y_logits, &y, &psi_logits, &psi).unwrap();
        assert!((scalar(&choice) - std::f32::consts::LN_2).abs() < 1e-6);
        assert!(scalar(&meta) < 1e-6);

        // Near-perfect predictions -> near zero.
        let strong = Tensor::from_vec(
            (0..8).map(|i| if i == 3 { 20f32 } else { -20.0 }).collect::<Vec<_>>(),
            (1, 8),
            &dev(),
        )
        .unwrap();
        let l = classifier_loss(&strong, &y, &psi_logits, &psi).unwrap();
        assert!(scalar(&l) < 1e-6);
    }

    #[test]
    fn finite_difference_gradients() {
        // Central differences vs autodiff for contrastive and kld.
        let x0 = vec![0.4f32, -0.2, 1.1];
        let x1 = vec![0.1f32, 0.3, 0.9];
        let alpha = 1.0;

        let x0v = Var::from_tensor(&t1(&x0)).unwrap();
        let loss = contrastive(x0v.as_tensor(), &t1(&x1), 0.0, alpha).unwrap();
        let grads = loss.backward().unwrap();
        let auto = grads.get(&x0v).unwrap().to_vec1::<f32>().unwrap();
        let h = 1e-3;
        for i in 0..x0.len() {
            let mut up = x0.clone();
            up[i] += h;
            let mut dn = x0.clone();
            dn[i] -= h;
            let fu = scalar(&contrastive(&t1(&up), &t1(&x1), 0.0, alpha).unwrap());
            let fd = scalar(&contrastive(&t1(&dn), &t1(&x1), 0.0, alpha).unwrap());
            let num = (fu - fd) / (2.0 * h);
            let rel = (num - auto[i]).abs() / auto[i].abs().max(1e-3);
            assert!(rel < 1e-3, "contrastive grad {i}: {num} vs {}", auto[i]);
        }

        let mu = vec![0.5f32, -1.0];
        let sg = vec![0.7f32, 1.4];
        let muv = Var::from_tensor(&t1(&mu)).unwrap();
        let loss = kld_standard(muv.as_tensor(), &t1(&sg)).unwrap().sum_all().unwrap();
        let auto = loss.backward().unwrap().get(&muv).unwrap().to_vec1::<f32>().unwrap();
        for i in 0..2 {
            let mut up = mu.clone();
            up[i] += h;
            let mut dn = mu.clone();
            dn[i] -= h;
            let num = (scalar(&kld_standard(&t1(&up), &t1(&sg)).unwrap())
                - scalar(&kld_standard(&t1(&dn), &t1(&sg)).unwrap()))
                / (2.0 * h);
            let rel = (num - auto[i]).abs() / auto[i].abs().max(1e-3);
            assert!(rel < 1e-3, "kld grad {i}: {num} vs {}", auto[i]);
        }
    }

    #[test]
    fn cond_loss_shapes_and_distractor_count() {
        // Hand-built codes: generated equals the target's code, distractor
        // distances all exceed alpha -> both sub-totals vanish.
        let n = 2;
        let gen = Tensor::zeros((n, 2, 2, 2), DType::F32, &dev()).unwrap();
        let mut choices = vec![5f32; n * 8 * 8];
        for p in 0..n {
            for k in 0..8 {
                choices[p * 64 + 3 * 8 + k] = 0.0; // target index 3 matches
            }
        }
        let choices = Tensor::from_vec(choices, (n, 8, 2, 2, 2), &dev()).unwrap();
        let codes = CriticCodes {
            r_gen: vec![gen.clone(), gen.clone(), gen.clone()],
            c_gen: vec![gen.clone(), gen.clone(), gen.clone()],
            r_choices: vec![choices.clone(), choices.clone(), choices.clone()],
            c_choices: vec![choices.clone(), choices.clone(), choices.clone()],
        };
        let (pos, neg) = cond_loss(&codes, &[3, 3], 1.0).unwrap();
        assert!(scalar(&pos).abs() < 1e-7);
        assert!(scalar(&neg).abs() < 1e-7);

        // With a huge margin every distractor contributes alpha - d2; the
        // negative total divides by 7 per (scale, line) pair.
        let alpha = 1e6;
        let (_, neg) = cond_loss(&codes, &[3, 3], alpha).unwrap();
        let per_pair = (7.0 * (alpha as f32 - 8.0 * 25.0)) / 7.0;
        let want = 6.0 * per_pair; // 3 scales x (row + col)
        let got = scalar(&neg);
        assert!((got - want).abs() / want < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn cond_loss_invariant_to_distractor_order() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let gen = Tensor::randn(0f32, 1f32, (1, 2, 2, 2), &dev()).unwrap();
        let choices = Tensor::randn(0f32, 1f32, (1, 8, 2, 2, 2), &dev()).unwrap();
        let build = |choices: &Tensor| CriticCodes {
            r_gen: vec![gen.clone(); 3],
            c_gen: vec![gen.clone(); 3],
            r_choices: vec![choices.clone(); 3],
            c_choices: vec![choices.clone(); 3],
        };
        let (p0, n0) = cond_loss(&build(&choices), &[2], 1.5).unwrap();

        // Permute the distractors, keep the target slot fixed.
        let mut order: Vec<usize> = (0..8).filter(|i| *i != 2).collect();
        order.shuffle(&mut rng);
        order.insert(2, 2);
        let idx = Tensor::from_vec(
            order.iter().map(|v| *v as u32).collect::<Vec<_>>(),
            8,
            &dev(),
        )
        .unwrap();
        let shuffled = choices.index_select(&idx, 1).unwrap();
        let (p1, n1) = cond_loss(&build(&shuffled), &[2], 1.5).unwrap();
        assert!((scalar(&p0) - scalar(&p1)).abs() < 1e-5);
        assert!((scalar(&n0) - scalar(&n1)).abs() < 1e-5);
    }
}
