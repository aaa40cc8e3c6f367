//! Clean/noisy sample selection from per-sample contrastive losses.
//!
//! The default strategy fits a two-component 1-D Gaussian mixture over the
//! batch losses with EM and thresholds the posterior probability of the
//! low-loss ("clean") component. Two simpler strategies are provided for
//! comparison runs.

use serde::{Deserialize, Serialize};

use crate::tensor::TensorError;

/// Selection strategy over per-sample losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStrategy {
    Gmm,
    SmallLossTopk,
    FixedThreshold,
}

/// Two-component 1-D Gaussian mixture over losses. The clean component is
/// the one with the lower mean; `fit_gmm_em` relabels after convergence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmParams {
    /// Mixture weight of the clean component.
    pub beta: f64,
    pub mu_c: f64,
    pub var_c: f64,
    pub mu_n: f64,
    pub var_n: f64,
    /// Set when the input could not support a two-component fit (all losses
    /// equal); everyone is treated as clean.
    pub degenerate: bool,
    pub iterations: usize,
    /// Log-likelihood after each EM iteration.
    pub loglik_trace: Vec<f64>,
}

const VAR_FLOOR: f64 = 1e-6;
const BETA_FLOOR: f64 = 1e-4;

fn log_normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
    let d = x - mu;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var)
}

/// log(exp(a) + exp(b)) without overflow.
fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Fits the mixture by EM. Initialization puts the component means at the
/// 25th/75th loss percentiles with equal variances, which stays stable in the
/// all-clean early-training regime.
pub fn fit_gmm_em(losses: &[f64], max_iter: usize, tol: f64) -> Result<GmmParams, TensorError> {
    if losses.len() < 4 {
        return Err(TensorError::Domain(format!(
            "mixture fit needs at least 4 samples, got {}",
            losses.len()
        )));
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "fit_gmm_em" });
    }
    let n = losses.len();
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let spread = sorted[n - 1] - sorted[0];
    let mean: f64 = losses.iter().sum::<f64>() / n as f64;
    if spread <= 1e-12 * 1f64.max(mean.abs()) {
        return Ok(GmmParams {
            beta: 1.0 - BETA_FLOOR,
            mu_c: mean,
            var_c: VAR_FLOOR,
            mu_n: mean,
            var_n: VAR_FLOOR,
            degenerate: true,
            iterations: 0,
            loglik_trace: Vec::new(),
        });
    }

    let sample_var = {
        let v = losses.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        v.max(VAR_FLOOR)
    };
    let mut beta = 0.5f64;
    let mut mu_c = percentile(&sorted, 0.25);
    let mut mu_n = percentile(&sorted, 0.75);
    let mut var_c = sample_var;
    let mut var_n = sample_var;
    if mu_n - mu_c < 1e-9 {
        // quartiles collapsed; nudge apart so EM can separate
        mu_c = sorted[0];
        mu_n = sorted[n - 1];
    }

    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut resp = vec![0.0; n];
    for it in 0..max_iter {
        iterations = it + 1;
        // E-step
        let mut loglik = 0.0;
        for (i, &x) in losses.iter().enumerate() {
            let lc = beta.ln() + log_normal_pdf(x, mu_c, var_c);
            let ln = (1.0 - beta).ln() + log_normal_pdf(x, mu_n, var_n);
            let denom = log_add_exp(lc, ln);
            resp[i] = (lc - denom).exp();
            loglik += denom;
        }
        let improved = trace.last().map(|&p| loglik - p).unwrap_or(f64::INFINITY);
        trace.push(loglik);
        if improved.abs() < tol {
            break;
        }
        // M-step
        let rc: f64 = resp.iter().sum();
        let rn = n as f64 - rc;
        beta = (rc / n as f64).clamp(BETA_FLOOR, 1.0 - BETA_FLOOR);
        if rc > 0.0 {
            mu_c = losses.iter().zip(&resp).map(|(&x, &r)| r * x).sum::<f64>() / rc;
            var_c = (losses
                .iter()
                .zip(&resp)
                .map(|(&x, &r)| r * (x - mu_c) * (x - mu_c))
                .sum::<f64>()
                / rc)
                .max(VAR_FLOOR);
        }
        if rn > 0.0 {
            mu_n = losses.iter().zip(&resp).map(|(&x, &r)| (1.0 - r) * x).sum::<f64>() / rn;
            var_n = (losses
                .iter()
                .zip(&resp)
                .map(|(&x, &r)| (1.0 - r) * (x - mu_n) * (x - mu_n))
                .sum::<f64>()
                / rn)
                .max(VAR_FLOOR);
        }
    }

    // the clean component is the low-loss one
    if mu_c > mu_n {
        std::mem::swap(&mut mu_c, &mut mu_n);
        std::mem::swap(&mut var_c, &mut var_n);
        beta = 1.0 - beta;
    }
    Ok(GmmParams {
        beta,
        mu_c,
        var_c,
        mu_n,
        var_n,
        degenerate: false,
        iterations,
        loglik_trace: trace,
    })
}

/// Posterior probability that a loss belongs to the clean component,
/// evaluated in log space.
pub fn posterior_clean(loss: f64, params: &GmmParams) -> f64 {
    if params.degenerate {
        return 1.0;
    }
    let lc = params.beta.ln() + log_normal_pdf(loss, params.mu_c, params.var_c);
    let ln = (1.0 - params.beta).ln() + log_normal_pdf(loss, params.mu_n, params.var_n);
    (lc - log_add_exp(lc, ln)).exp()
}

/// Knobs for [`partition`].
#[derive(Debug, Clone)]
pub struct PartitionOptions {
    pub strategy: PartitionStrategy,
    /// Posterior cutoff for the mixture strategy.
    pub clean_threshold: f64,
    /// Assumed noise rate for `SmallLossTopk`.
    pub assumed_noise_rate: f64,
    /// Loss cutoff for `FixedThreshold`; `None` uses the batch mean.
    pub fixed_cutoff: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PartitionOptions {
    fn default() -> Self {
        Self {
            strategy: PartitionStrategy::Gmm,
            clean_threshold: 0.5,
            assumed_noise_rate: 0.3,
            fixed_cutoff: None,
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

/// Per-call record of what the selection did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionOutcome {
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
    /// Clean posteriors (mixture strategy only).
    pub posteriors: Option<Vec<f64>>,
    pub gmm: Option<GmmParams>,
    pub degenerate: bool,
}

/// Splits sample indices into clean and noisy sets. The two sets are always
/// disjoint and exhaustive.
pub fn partition(
    losses: &[f64],
    opts: &PartitionOptions,
) -> Result<PartitionOutcome, TensorError> {
    let n = losses.len();
    match opts.strategy {
        PartitionStrategy::Gmm => {
            let params = fit_gmm_em(losses, opts.max_iter, opts.tol)?;
            let posteriors: Vec<f64> =
                losses.iter().map(|&l| posterior_clean(l, &params)).collect();
            let mut clean = Vec::new();
            let mut noisy = Vec::new();
            for (i, &w) in posteriors.iter().enumerate() {
                if w > opts.clean_threshold {
                    clean.push(i);
                } else {
                    noisy.push(i);
                }
            }
            let degenerate = params.degenerate;
            Ok(PartitionOutcome {
                clean,
                noisy,
                posteriors: Some(posteriors),
                gmm: Some(params),
                degenerate,
            })
        }
        PartitionStrategy::SmallLossTopk => {
            if !(0.0..=1.0).contains(&opts.assumed_noise_rate) {
                return Err(TensorError::Domain(format!(
                    "assumed noise rate must be in [0,1], got {}",
                    opts.assumed_noise_rate
                )));
            }
            let keep = ((1.0 - opts.assumed_noise_rate) * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                losses[a].partial_cmp(&losses[b]).expect("finite").then(a.cmp(&b))
            });
            let mut clean: Vec<usize> = order[..keep.min(n)].to_vec();
            let mut noisy: Vec<usize> = order[keep.min(n)..].to_vec();
            clean.sort_unstable();
            noisy.sort_unstable();
            Ok(PartitionOutcome { clean, noisy, posteriors: None, gmm: None, degenerate: false })
        }
        PartitionStrategy::FixedThreshold => {
            let cutoff = opts
                .fixed_cutoff
                .unwrap_or_else(|| losses.iter().sum::<f64>() / n.max(1) as f64);
            let mut clean = Vec::new();
            let mut noisy = Vec::new();
            for (i, &l) in losses.iter().enumerate() {
                if l < cutoff {
                    clean.push(i);
                } else {
                    noisy.push(i);
                }
            }
            Ok(PartitionOutcome { clean, noisy, posteriors: None, gmm: None, degenerate: false })
        }
    }
}

/// Fraction of samples whose clean/noisy assignment matches the given latent
/// flags (`true` = noisy).
pub fn agreement_with_latent(outcome: &PartitionOutcome, latent_noisy: &[bool]) -> f64 {
    let n = latent_noisy.len();
    if n == 0 {
        return 1.0;
    }
    let mut correct = 0usize;
    for &i in &outcome.clean {
        if !latent_noisy[i] {
            correct += 1;
        }
    }
    for &i in &outcome.noisy {
        if latent_noisy[i] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn planted(n: usize, beta: f64, seed: u64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean = Normal::new(0.0, 1.0).unwrap();
        let noisy = Normal::new(5.0, 1.0).unwrap();
        let mut losses = Vec::with_capacity(n);
        let mut flags = Vec::with_capacity(n);
        for _ in 0..n {
            if rng.random_bool(beta) {
                losses.push(clean.sample(&mut rng));
                flags.push(false);
            } else {
                losses.push(noisy.sample(&mut rng));
                flags.push(true);
            }
        }
        (losses, flags)
    }

    #[test]
    fn recovers_planted_mixture_means() {
        for seed in 0..10u64 {
            let (losses, _) = planted(2000, 0.5, seed);
            let p = fit_gmm_em(&losses, 100, 1e-8).unwrap();
            assert!(p.mu_c.abs() < 0.15, "seed {seed}: mu_c {}", p.mu_c);
            assert!((p.mu_n - 5.0).abs() < 0.15, "seed {seed}: mu_n {}", p.mu_n);
        }
    }

    #[test]
    fn loglik_nondecreasing_over_iterations() {
        for seed in 0..10u64 {
            let (losses, _) = planted(500, 0.4, 100 + seed);
            let p = fit_gmm_em(&losses, 100, 1e-12).unwrap();
            for w in p.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "seed {seed}: loglik dropped {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn identical_losses_are_degenerate_and_all_clean() {
        let losses = vec![1.25; 16];
        let p = fit_gmm_em(&losses, 100, 1e-8).unwrap();
        assert!(p.degenerate);
        let out = partition(&losses, &PartitionOptions::default()).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.clean.len(), 16);
        assert!(out.noisy.is_empty());
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(matches!(
            fit_gmm_em(&[0.0, 1.0, 2.0], 10, 1e-6),
            Err(TensorError::Domain(_))
        ));
    }

    #[test]
    fn posterior_midpoint_is_half() {
        let params = GmmParams {
            beta: 0.5,
            mu_c: 0.0,
            var_c: 1.0,
            mu_n: 2.0,
            var_n: 1.0,
            degenerate: false,
            iterations: 0,
            loglik_trace: vec![],
        };
        let w = posterior_clean(1.0, &params);
        assert!((w - 0.5).abs() < 1e-12);
    }

    #[test]
    fn posterior_closed_form_fixture() {
        let params = GmmParams {
            beta: 0.5,
            mu_c: 0.0,
            var_c: 1.0,
            mu_n: 2.0,
            var_n: 1.0,
            degenerate: false,
            iterations: 0,
            loglik_trace: vec![],
        };
        let w = posterior_clean(0.0, &params);
        assert!((w - 0.88079707797788244406).abs() < 1e-12);
    }

    #[test]
    fn posterior_monotone_when_variances_equal() {
        let params = GmmParams {
            beta: 0.3,
            mu_c: 0.0,
            var_c: 0.7,
            mu_n: 3.0,
            var_n: 0.7,
            degenerate: false,
            iterations: 0,
            loglik_trace: vec![],
        };
        let mut prev = posterior_clean(-5.0, &params);
        let mut l = -5.0;
        while l < 8.0 {
            l += 0.25;
            let w = posterior_clean(l, &params);
            assert!(w <= prev + 1e-12, "posterior rose at {l}");
            prev = w;
        }
    }

    #[test]
    fn responsibilities_sum_to_one() {
        // posterior_clean + posterior_noisy = 1 by construction; check the
        // complement computed directly from densities.
        let params = GmmParams {
            beta: 0.42,
            mu_c: 0.5,
            var_c: 0.9,
            mu_n: 4.0,
            var_n: 2.0,
            degenerate: false,
            iterations: 0,
            loglik_trace: vec![],
        };
        for &l in &[-2.0, 0.0, 1.7, 4.0, 9.0] {
            let wc = posterior_clean(l, &params);
            let lc = params.beta.ln() + log_normal_pdf(l, params.mu_c, params.var_c);
            let ln = (1.0 - params.beta).ln() + log_normal_pdf(l, params.mu_n, params.var_n);
            let wn = (ln - log_add_exp(lc, ln)).exp();
            assert!((wc + wn - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bimodal_partition_matches_planted_labels() {
        let (losses, flags) = planted(1000, 0.7, 77);
        let out = partition(&losses, &PartitionOptions::default()).unwrap();
        let agree = agreement_with_latent(&out, &flags);
        assert!(agree >= 0.99, "agreement {agree}");
    }

    #[test]
    fn topk_with_true_rate_matches_gmm_up_to_boundary() {
        let (losses, flags) = planted(1000, 0.7, 42);
        let true_rate = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
        let gmm = partition(&losses, &PartitionOptions::default()).unwrap();
        let topk = partition(
            &losses,
            &PartitionOptions {
                strategy: PartitionStrategy::SmallLossTopk,
                assumed_noise_rate: true_rate,
                ..Default::default()
            },
        )
        .unwrap();
        let gmm_clean: std::collections::HashSet<_> = gmm.clean.iter().collect();
        let topk_clean: std::collections::HashSet<_> = topk.clean.iter().collect();
        let diff = gmm_clean.symmetric_difference(&topk_clean).count();
        assert!(diff <= 10, "partitions differ on {diff} samples");
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for strategy in [
            PartitionStrategy::Gmm,
            PartitionStrategy::SmallLossTopk,
            PartitionStrategy::FixedThreshold,
        ] {
            let losses: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..6.0)).collect();
            let out = partition(
                &losses,
                &PartitionOptions { strategy, ..Default::default() },
            )
            .unwrap();
            let mut all: Vec<usize> = out.clean.iter().chain(&out.noisy).cloned().collect();
            all.sort_unstable();
            assert_eq!(all, (0..64).collect::<Vec<_>>(), "{strategy:?}");
        }
    }

    #[test]
    fn permuting_batch_permutes_partition() {
        let (losses, _) = planted(200, 0.6, 9);
        let base = partition(&losses, &PartitionOptions::default()).unwrap();
        let mut perm: Vec<usize> = (0..losses.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let permuted: Vec<f64> = perm.iter().map(|&i| losses[i]).collect();
        let out = partition(&permuted, &PartitionOptions::default()).unwrap();
        // sample j of the permuted batch is sample perm[j] of the original
        let base_noisy: std::collections::HashSet<_> = base.noisy.iter().cloned().collect();
        for j in 0..losses.len() {
            let noisy_now = out.noisy.contains(&j);
            assert_eq!(noisy_now, base_noisy.contains(&perm[j]), "index {j}");
        }
    }

    #[test]
    fn all_high_posterior_leaves_noisy_empty() {
        // tight cluster plus one far outlier: posteriors near 1 except outlier
        let mut losses = vec![0.0, 0.01, 0.02, 0.03, 0.015, 0.025];
        losses.push(10.0);
        let out = partition(&losses, &PartitionOptions::default()).unwrap();
        assert_eq!(out.noisy, vec![6]);
    }
}
