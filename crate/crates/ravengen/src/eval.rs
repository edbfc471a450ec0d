//! Machine evaluation: generated-answer selection accuracy against the
//! seven distractors, Frechet distance over pooled recognizer features,
//! per-rule breakdown, and the baseline candidate sources.

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::data::{ProblemSource, RPMProblem};
use crate::error::{Error, Result};
use crate::nets::{Model, LATENT_DIM, RES};
use crate::nn::Mode;
use crate::pipeline::{
    encode_choices, encode_context, forward_generation, generation_noise_dim,
    recognition_from_trace,
};
use crate::trainer::AblationKind;

/// Candidate sources scored against the seven distractors.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// The true target panel itself.
    Real,
    /// Deterministic reconstruction `G(mu_v)` of the target.
    ReconMu,
    /// Reconstruction with reparameterization `G(mu_v + sigma_v . z)`.
    ReconReparam,
    /// The generation pathway with sampled noise.
    Generated,
    /// The generation pathway with zero noise (`h_g = mu_g`).
    GeneratedNoReparam,
    /// `G(z)` for unit-Gaussian latent noise.
    RandomVae,
}

impl Baseline {
    pub const ALL: [Baseline; 6] = [
        Baseline::Real,
        Baseline::ReconMu,
        Baseline::ReconReparam,
        Baseline::Generated,
        Baseline::GeneratedNoReparam,
        Baseline::RandomVae,
    ];
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::Real => "real",
            Baseline::ReconMu => "recon_mu",
            Baseline::ReconReparam => "recon_reparam",
            Baseline::Generated => "generated",
            Baseline::GeneratedNoReparam => "generated_no_reparam",
            Baseline::RandomVae => "random_vae",
        })
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "real" => Baseline::Real,
            "recon_mu" => Baseline::ReconMu,
            "recon_reparam" => Baseline::ReconReparam,
            "generated" => Baseline::Generated,
            "generated_no_reparam" => Baseline::GeneratedNoReparam,
            "random_vae" => Baseline::RandomVae,
            other => return Err(Error::config(format!("unknown baseline {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RuleReport {
    pub rule: String,
    pub problems: usize,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub baseline: Baseline,
    pub problems: usize,
    pub accuracy: f64,
    /// Frechet distance between target features and candidate features;
    /// absent for the `real` baseline where the sets coincide.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    pub per_rule: Vec<RuleReport>,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub problems: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub with_fid: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            problems: 500,
            batch_size: 16,
            seed: 0,
            with_fid: true,
        }
    }
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

fn normal(seed: u64, shape: (usize, usize)) -> Result<Tensor> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..shape.0 * shape.1)
        .map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal))
        .collect();
    Ok(Tensor::from_vec(data, shape, &candle_core::Device::Cpu)?)
}

fn stack_context(problems: &[&RPMProblem]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(problems.len() * 8 * RES * RES);
    for p in problems {
        for img in &p.context {
            data.extend_from_slice(&img.data);
        }
    }
    Ok(Tensor::from_vec(
        data,
        (problems.len(), 8, 1, RES, RES),
        &candle_core::Device::Cpu,
    )?)
}

fn stack_choices(problems: &[&RPMProblem]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(problems.len() * 8 * RES * RES);
    for p in problems {
        for img in &p.choices {
            data.extend_from_slice(&img.data);
        }
    }
    Ok(Tensor::from_vec(
        data,
        (problems.len(), 8, 1, RES, RES),
        &candle_core::Device::Cpu,
    )?)
}

fn stack_targets(problems: &[&RPMProblem]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(problems.len() * RES * RES);
    for p in problems {
        data.extend_from_slice(&p.target().data);
    }
    Ok(Tensor::from_vec(
        data,
        (problems.len(), 1, RES, RES),
        &candle_core::Device::Cpu,
    )?)
}

/// Produces, per problem, the image inserted in place of the true target.
/// `batch_seed` keys the per-baseline noise draws.
pub fn baseline_candidates(
    model: &Model,
    problems: &[&RPMProblem],
    baseline: Baseline,
    batch_seed: u64,
) -> Result<Tensor> {
    let b = problems.len();
    match baseline {
        Baseline::Real => stack_targets(problems),
        Baseline::ReconMu => {
            let code = model.vae_encode(&stack_targets(problems)?, Mode::Eval)?;
            model.generate(&code.mu, Mode::Eval)
        }
        Baseline::ReconReparam => {
            let code = model.vae_encode(&stack_targets(problems)?, Mode::Eval)?;
            let z = normal(mix(batch_seed, 0x11, 0), (b, LATENT_DIM))?;
            let latent = crate::nets::reparameterize(&code.mu, &code.sigma, &z)?;
            model.generate(&latent, Mode::Eval)
        }
        Baseline::Generated => {
            let noise = normal(mix(batch_seed, 0x22, 0), (b, generation_noise_dim(model)))?;
            Ok(forward_generation(model, &stack_context(problems)?, &noise, Mode::Eval)?.image)
        }
        Baseline::GeneratedNoReparam => {
            let noise = Tensor::zeros(
                (b, generation_noise_dim(model)),
                DType::F32,
                &candle_core::Device::Cpu,
            )?;
            Ok(forward_generation(model, &stack_context(problems)?, &noise, Mode::Eval)?.image)
        }
        Baseline::RandomVae => {
            let z = normal(mix(batch_seed, 0x33, 0), (b, LATENT_DIM))?;
            model.generate(&z, Mode::Eval)
        }
    }
}

/// Scores all eight candidates of each problem (the inserted candidate
/// plus the seven distractors) with the recognizer; success requires the
/// inserted candidate to attain the strict argmax. Ties count as failure.
fn successes(
    model: &Model,
    problems: &[&RPMProblem],
    candidates: &Tensor,
) -> Result<Vec<bool>> {
    let b = problems.len();
    let context = stack_context(problems)?;
    let choices = stack_choices(problems)?;

    // Insert each candidate at its problem's target slot.
    let mut rows = Vec::with_capacity(b);
    for (i, p) in problems.iter().enumerate() {
        let mut slots = Vec::with_capacity(8);
        for s in 0..8 {
            if s == p.target_index {
                slots.push(candidates.narrow(0, i, 1)?.reshape((1, 1, 1, RES, RES))?);
            } else {
                slots.push(choices.narrow(0, i, 1)?.narrow(1, s, 1)?);
            }
        }
        rows.push(Tensor::cat(&slots.iter().collect::<Vec<_>>(), 1)?);
    }
    let modified = Tensor::cat(&rows.iter().collect::<Vec<_>>(), 0)?;

    let ctx = encode_context(model, &context, Mode::Eval)?;
    let emb = encode_choices(model, &modified, Mode::Eval)?;
    let (y_logits, _) = recognition_from_trace(model, &ctx, &emb, Mode::Eval)?;
    let scores = y_logits.to_vec2::<f32>()?;

    Ok(problems
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let row = &scores[i];
            let target_score = row[p.target_index];
            row.iter()
                .enumerate()
                .all(|(s, v)| s == p.target_index || *v < target_score)
        })
        .collect())
}

/// Fraction of problems where the candidate beats all seven distractors.
pub fn selection_accuracy(
    model: &Model,
    data: &dyn ProblemSource,
    baseline: Baseline,
    opts: &EvalOptions,
) -> Result<f64> {
    let report = evaluate(
        model,
        data,
        baseline,
        &EvalOptions {
            with_fid: false,
            ..*opts
        },
    )?;
    Ok(report.accuracy)
}

/// Pooled recognizer features: the three context-encoder maps averaged
/// over space and concatenated low-mid-high (448-dim at paper width).
pub fn recognizer_features(model: &Model, images: &Tensor) -> Result<Vec<Vec<f32>>> {
    let emb = model.context_encode(images, Mode::Eval)?;
    let pool = |t: &Tensor| -> Result<Vec<Vec<f32>>> {
        Ok(crate::nn::global_avg_pool(t)?.to_vec2::<f32>()?)
    };
    let low = pool(&emb.low)?;
    let mid = pool(&emb.mid)?;
    let high = pool(&emb.high)?;
    Ok(low
        .into_iter()
        .zip(mid)
        .zip(high)
        .map(|((l, m), h)| {
            let mut v = l;
            v.extend(m);
            v.extend(h);
            v
        })
        .collect())
}

/// Frechet distance between Gaussian fits of two feature populations:
/// `|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))`, the matrix square
/// root taken by eigendecomposition of the symmetrized product, with the
/// unbiased covariance estimator.
pub fn fid(features_a: &[Vec<f32>], features_b: &[Vec<f32>]) -> Result<f64> {
    if features_a.len() < 2 || features_b.len() < 2 {
        return Err(Error::Eval(format!(
            "fid needs at least 2 samples per side, got {} and {}",
            features_a.len(),
            features_b.len()
        )));
    }
    let d = features_a[0].len();
    if d == 0 || features_b[0].len() != d {
        return Err(Error::Eval("fid feature dimensions differ".into()));
    }

    let stats = |feats: &[Vec<f32>]| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = feats.len();
        let mut mean = DVector::zeros(d);
        for f in feats {
            for (i, v) in f.iter().enumerate() {
                mean[i] += *v as f64;
            }
        }
        mean /= n as f64;
        let mut centered = DMatrix::zeros(n, d);
        for (r, f) in feats.iter().enumerate() {
            for (c, v) in f.iter().enumerate() {
                centered[(r, c)] = *v as f64 - mean[c];
            }
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::Eval("non-finite covariance".into()));
        }
        Ok((mean, cov))
    };

    let (mu_a, cov_a) = stats(features_a)?;
    let (mu_b, cov_b) = stats(features_b)?;

    // sqrt(Sa) via eigendecomposition, then Tr((Sa Sb)^(1/2)) as
    // Tr((sqrt(Sa) Sb sqrt(Sa))^(1/2)).
    let clip = |v: f64| if v < 1e-10 { 0.0 } else { v };
    let eig_a = nalgebra::SymmetricEigen::new(cov_a.clone());
    let sqrt_vals = DVector::from_iterator(d, eig_a.eigenvalues.iter().map(|v| clip(*v).sqrt()));
    let sqrt_a = &eig_a.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig_a.eigenvectors.transpose();
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig_m = nalgebra::SymmetricEigen::new(inner);
    let tr_sqrt: f64 = eig_m.eigenvalues.iter().map(|v| clip(*v).sqrt()).sum();

    let diff = &mu_a - &mu_b;
    let value = diff.norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::Eval("non-finite Frechet distance".into()));
    }
    Ok(value)
}

/// Full evaluation of one baseline: accuracy, FID against the true
/// targets, and the per-rule breakdown.
pub fn evaluate(
    model: &Model,
    data: &dyn ProblemSource,
    baseline: Baseline,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let n = opts.problems.min(data.len());
    if n == 0 {
        return Err(Error::Eval("evaluation needs at least one problem".into()));
    }

    struct Group {
        wins: usize,
        total: usize,
        target_feats: Vec<Vec<f32>>,
        cand_feats: Vec<Vec<f32>>,
    }
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    let mut wins = 0usize;
    let mut target_feats = Vec::new();
    let mut cand_feats = Vec::new();

    let mut index = 0usize;
    while index < n {
        let m = opts.batch_size.min(n - index);
        let problems: Vec<RPMProblem> = (index..index + m)
            .map(|i| data.get(i))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&RPMProblem> = problems.iter().collect();
        let candidates = baseline_candidates(
            model,
            &refs,
            baseline,
            mix(opts.seed, 0x77, index as u64),
        )?;
        let ok = successes(model, &refs, &candidates)?;

        let (tf, cf) = if opts.with_fid {
            (
                recognizer_features(model, &stack_targets(&refs)?)?,
                recognizer_features(model, &candidates)?,
            )
        } else {
            (Vec::new(), Vec::new())
        };

        for (i, p) in refs.iter().enumerate() {
            let rule = p
                .rule_tags
                .first()
                .map(|t| t.to_string())
                .unwrap_or_else(|| "unknown".to_string());
            let g = groups.entry(rule).or_insert(Group {
                wins: 0,
                total: 0,
                target_feats: Vec::new(),
                cand_feats: Vec::new(),
            });
            g.total += 1;
            if ok[i] {
                g.wins += 1;
                wins += 1;
            }
            if opts.with_fid {
                g.target_feats.push(tf[i].clone());
                g.cand_feats.push(cf[i].clone());
                target_feats.push(tf[i].clone());
                cand_feats.push(cf[i].clone());
            }
        }
        index += m;
    }

    let overall_fid = if opts.with_fid && baseline != Baseline::Real {
        Some(fid(&target_feats, &cand_feats)?)
    } else {
        None
    };

    let per_rule = groups
        .into_iter()
        .map(|(rule, g)| {
            let fid_value = if opts.with_fid && baseline != Baseline::Real && g.total >= 2 {
                fid(&g.target_feats, &g.cand_feats).ok()
            } else {
                None
            };
            RuleReport {
                rule,
                problems: g.total,
                accuracy: g.wins as f64 / g.total as f64,
                fid: fid_value,
            }
        })
        .collect();

    Ok(EvalReport {
        baseline,
        problems: n,
        accuracy: wins as f64 / n as f64,
        fid: overall_fid,
        per_rule,
    })
}

/// Text table mirroring the baseline-rows layout of the paper's results.
pub fn format_report_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<42} {:>8} {:>10}\n", "Candidate", "Acc", "FID"));
    for r in reports {
        let label = match r.baseline {
            Baseline::Real => "Real Target (I_a*)",
            Baseline::ReconMu => "Recon. Target (G(mu_v))",
            Baseline::ReconReparam => "Recon. Target with reparam (G(h_a*))",
            Baseline::Generated => "Full",
            Baseline::GeneratedNoReparam => "Full, w/o reparam. in test",
            Baseline::RandomVae => "Random VAE image",
        };
        let fid_s = r
            .fid
            .map(|f| format!("{f:.4}"))
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "{:<42} {:>7.1}% {:>10}\n",
            label,
            100.0 * r.accuracy,
            fid_s
        ));
    }
    out
}

/// Text table for ablation rows (variant label, accuracy, FID).
pub fn format_ablation_table(rows: &[(AblationKind, f64, Option<f64>)]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<46} {:>8} {:>10}\n", "Variant", "Acc", "FID"));
    for (kind, acc, fid_v) in rows {
        let fid_s = fid_v
            .map(|f| format!("{f:.4}"))
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "{:<46} {:>7.1}% {:>10}\n",
            kind.label(),
            100.0 * acc,
            fid_s
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Image, SynthDataset};

    #[test]
    fn fid_zero_on_identical_sets() {
        let feats: Vec<Vec<f32>> = (0..16)
            .map(|i| (0..6).map(|j| ((i * 7 + j) as f32 * 0.37).sin()).collect())
            .collect();
        let v = fid(&feats, &feats).unwrap();
        assert!(v.abs() <= 1e-6, "fid(identical) = {v}");
    }

    #[test]
    fn fid_equal_covariance_is_squared_mean_distance() {
        // Points +-c e_i have exact unit sample covariance when
        // c^2 = (2d - 1) / 2; shifting by delta gives FID = delta^2.
        let d = 3;
        let c = (((2 * d - 1) as f64) / 2.0).sqrt() as f32;
        let mut a: Vec<Vec<f32>> = Vec::new();
        for i in 0..d {
            for sign in [1.0f32, -1.0] {
                let mut v = vec![0f32; d];
                v[i] = sign * c;
                a.push(v);
            }
        }
        let delta = 1.7f32;
        let b: Vec<Vec<f32>> = a
            .iter()
            .map(|v| {
                let mut w = v.clone();
                w[0] += delta;
                w
            })
            .collect();
        let v = fid(&a, &b).unwrap();
        let want = (delta as f64).powi(2);
        assert!((v - want).abs() < 1e-9, "{v} vs {want}");

        // Symmetry.
        let v2 = fid(&b, &a).unwrap();
        assert!((v - v2).abs() < 1e-9);
    }

    #[test]
    fn fid_rejects_tiny_sets() {
        let one = vec![vec![1.0f32, 2.0]];
        assert!(matches!(fid(&one, &one), Err(Error::Eval(_))));
    }

    #[test]
    fn ties_count_as_failure() {
        // All choices identical: the candidate cannot strictly win.
        let m = Model::new(0.125, true, 3).unwrap();
        let img = Image::zeros(RES, RES);
        let p = RPMProblem::new(
            vec![img.clone(); 8],
            vec![img.clone(); 8],
            2,
            [0; 12],
            vec![],
        )
        .unwrap();
        let refs = vec![&p];
        let candidates = stack_targets(&refs).unwrap();
        let ok = successes(&m, &refs, &candidates).unwrap();
        assert_eq!(ok, vec![false]);
    }

    #[test]
    fn untrained_real_baseline_is_near_chance() {
        let m = Model::new(0.125, true, 5).unwrap();
        let ds = SynthDataset::new(
            vec!["shape.number.constant".parse().unwrap()],
            96,
            13,
        )
        .unwrap();
        let report = evaluate(
            &m,
            &ds,
            Baseline::Real,
            &EvalOptions {
                problems: 96,
                batch_size: 16,
                seed: 1,
                with_fid: false,
            },
        )
        .unwrap();
        assert!(
            report.accuracy < 0.4,
            "untrained recognizer should be near chance, got {}",
            report.accuracy
        );
    }

    #[test]
    fn per_rule_groups_partition_the_problems() {
        let m = Model::new(0.125, true, 6).unwrap();
        let ds = SynthDataset::new(
            vec![
                "shape.number.constant".parse().unwrap(),
                "line.type.constant".parse().unwrap(),
            ],
            32,
            17,
        )
        .unwrap();
        let report = evaluate(
            &m,
            &ds,
            Baseline::Real,
            &EvalOptions {
                problems: 32,
                batch_size: 8,
                seed: 2,
                with_fid: false,
            },
        )
        .unwrap();
        assert_eq!(report.per_rule.len(), 2);
        let total: usize = report.per_rule.iter().map(|r| r.problems).sum();
        assert_eq!(total, 32);
        // Group accuracies, weighted by count, average to the overall.
        let weighted: f64 = report
            .per_rule
            .iter()
            .map(|r| r.accuracy * r.problems as f64)
            .sum::<f64>()
            / 32.0;
        assert!((weighted - report.accuracy).abs() < 1e-9);
    }

    #[test]
    fn baselines_produce_panel_shaped_candidates() {
        let m = Model::new(0.125, true, 7).unwrap();
        let ds = SynthDataset::new(vec!["shape.number.constant".parse().unwrap()], 4, 3).unwrap();
        let problems: Vec<RPMProblem> = (0..2).map(|i| ds.get(i).unwrap()).collect();
        let refs: Vec<&RPMProblem> = problems.iter().collect();
        for b in Baseline::ALL {
            let c = baseline_candidates(&m, &refs, b, 9).unwrap();
            assert_eq!(c.dims(), &[2, 1, RES, RES], "baseline {b}");
        }
        // The real baseline returns the target panels verbatim.
        let real = baseline_candidates(&m, &refs, Baseline::Real, 9).unwrap();
        let direct = stack_targets(&refs).unwrap();
        assert_eq!(
            real.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            direct.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}
