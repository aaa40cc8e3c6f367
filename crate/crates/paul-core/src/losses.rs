//! Loss functions and evidential quantities.
//!
//! The contrastive and evidential losses exist in two forms: plain `f64`
//! helpers for diagnostics and partitioning, and graph builders used by the
//! trainer (and by saliency, which needs input gradients). Both share the
//! same formulas; the graph form is the one that backpropagates.
//!
//! A batch of K pairs is treated as a K-way classification problem: row i of
//! the similarity matrix holds the logits of query i against every reference,
//! and column i is its annotated match.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::special;
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Batch reduction for a loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

/// Which loss drives the saliency map used for masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    Edl,
    Infonce,
    Uncertainty,
}

/// Per-sample Dirichlet summary derived from an evidence vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirichletState {
    pub evidence: Vec<f64>,
    pub alpha: Vec<f64>,
    pub concentration: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub uncertainty: f64,
    pub dst_singleton_masses: Vec<f64>,
    pub dst_ignorance: f64,
}

/// Scalar components of one combined-objective evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub match_loss: f64,
    pub edl_mse: f64,
    pub edl_kl: f64,
    pub total: f64,
    pub per_sample_infonce: Vec<f64>,
}

/// Graph handles produced alongside a [`LossBreakdown`].
pub struct TotalLossVars {
    pub total: Var,
    pub match_loss: Option<Var>,
    pub edl_loss: Option<Var>,
}

fn check_tau(tau: f64) -> Result<(), TensorError> {
    if !(tau > 0.0) {
        return Err(TensorError::Domain(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// plain-f64 evidential quantities
// ---------------------------------------------------------------------------

/// Evidence transform `e = exp(tanh(s / tau))`, elementwise over one
/// similarity row. Every component lands in `[e^-1, e]`.
pub fn evidence(sim_row: &[f64], tau: f64) -> Result<Vec<f64>, TensorError> {
    check_tau(tau)?;
    Ok(sim_row.iter().map(|&s| (s / tau).tanh().exp()).collect())
}

/// Dirichlet statistics for a non-negative evidence vector.
pub fn dirichlet_stats(e: &[f64]) -> Result<DirichletState, TensorError> {
    if e.iter().any(|&v| v < 0.0) {
        return Err(TensorError::Domain("evidence must be non-negative".into()));
    }
    let k = e.len();
    let alpha: Vec<f64> = e.iter().map(|&v| v + 1.0).collect();
    let concentration: f64 = alpha.iter().sum();
    let mean: Vec<f64> = alpha.iter().map(|&a| a / concentration).collect();
    let variance: Vec<f64> = alpha
        .iter()
        .map(|&a| a * (concentration - a) / (concentration * concentration * (concentration + 1.0)))
        .collect();
    let uncertainty = k as f64 / concentration;
    let dst_singleton_masses: Vec<f64> = e.iter().map(|&v| v / concentration).collect();
    Ok(DirichletState {
        evidence: e.to_vec(),
        alpha,
        concentration,
        mean,
        variance,
        uncertainty,
        dst_singleton_masses,
        dst_ignorance: uncertainty,
    })
}

/// `KL(Dir(alpha) || Dir(1))` in closed form. Requires `alpha_k >= 1`.
pub fn kl_dirichlet_to_uniform(alpha: &[f64]) -> Result<f64, TensorError> {
    if alpha.iter().any(|&a| a < 1.0) {
        return Err(TensorError::Domain("Dirichlet parameters must be >= 1".into()));
    }
    let k = alpha.len() as f64;
    let a_sum: f64 = alpha.iter().sum();
    let mut kl = special::ln_gamma(a_sum) - special::ln_gamma(k);
    let psi_sum = special::digamma(a_sum);
    for &a in alpha {
        kl -= special::ln_gamma(a);
        kl += (a - 1.0) * (special::digamma(a) - psi_sum);
    }
    Ok(kl)
}

/// Per-row contrastive losses computed without a graph, for partitioning.
/// Row i's positive is column i.
pub fn info_nce_values(sim: &Tensor, tau: f64) -> Result<Vec<f64>, TensorError> {
    check_tau(tau)?;
    let k = square_side(sim)?;
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let row: Vec<f64> = (0..k).map(|j| sim.at2(i, j) / tau).collect();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        out.push(lse - row[i]);
    }
    Ok(out)
}

fn square_side(sim: &Tensor) -> Result<usize, TensorError> {
    let sh = sim.shape();
    if sh.len() != 2 || sh[0] != sh[1] {
        return Err(TensorError::ShapeMismatch(format!("expected square matrix, got {sh:?}")));
    }
    Ok(sh[0])
}

// ---------------------------------------------------------------------------
// graph builders
// ---------------------------------------------------------------------------

/// Selects rows of a `[K, K]` matrix, keeping all columns.
fn gather_rows(g: &mut Graph, sim: Var, rows: &[usize], k: usize) -> Result<Var, TensorError> {
    let mut idx = Vec::with_capacity(rows.len() * k);
    for &r in rows {
        for c in 0..k {
            idx.push(r * k + c);
        }
    }
    g.gather(sim, Rc::new(idx), vec![rows.len(), k])
}

/// Contrastive loss over the given rows of a square similarity matrix.
/// Returns `(reduced scalar, per-row losses)`.
pub fn info_nce_graph(
    g: &mut Graph,
    sim: Var,
    rows: &[usize],
    tau: f64,
    reduction: Reduction,
) -> Result<(Var, Var), TensorError> {
    check_tau(tau)?;
    let k = square_side(g.value(sim))?;
    if rows.iter().any(|&r| r >= k) {
        return Err(TensorError::ShapeMismatch("row index out of range".into()));
    }
    let sub = gather_rows(g, sim, rows, k)?;
    let scaled = g.scale(sub, 1.0 / tau)?;
    let lse = g.logsumexp(scaled, 1)?;
    let diag_idx: Vec<usize> = rows.iter().map(|&r| r * k + r).collect();
    let diag = g.gather(sim, Rc::new(diag_idx), vec![rows.len()])?;
    let scaled_diag = g.scale(diag, 1.0 / tau)?;
    let per_row = g.sub(lse, scaled_diag)?;
    let scalar = match reduction {
        Reduction::Mean => g.mean_all(per_row)?,
        Reduction::Sum => g.sum_all(per_row)?,
    };
    Ok((scalar, per_row))
}

/// Convenience: contrastive loss over every row.
pub fn info_nce_all(
    g: &mut Graph,
    sim: Var,
    tau: f64,
    reduction: Reduction,
) -> Result<(Var, Var), TensorError> {
    let k = square_side(g.value(sim))?;
    let rows: Vec<usize> = (0..k).collect();
    info_nce_graph(g, sim, &rows, tau, reduction)
}

/// Options for the evidential loss builder.
#[derive(Debug, Clone, Copy)]
pub struct EdlOptions {
    pub tau_evidence: f64,
    pub lambda_kl: f64,
    /// Replace the true-class parameter by 1 before the KL (off by default;
    /// the plain form applies the KL to the raw parameters).
    pub kl_remove_true_evidence: bool,
    pub reduction: Reduction,
}

impl Default for EdlOptions {
    fn default() -> Self {
        Self {
            tau_evidence: 1.0,
            lambda_kl: 0.005,
            kl_remove_true_evidence: false,
            reduction: Reduction::Sum,
        }
    }
}

/// Pieces of the evidential loss, all graph handles.
pub struct EdlTerms {
    pub scalar: Var,
    pub per_sample: Var,
    pub mse_reduced: Var,
    pub kl_reduced: Var,
}

/// Evidential loss over the given rows of a square similarity matrix:
/// per sample, the expected squared error under the Dirichlet plus a
/// weighted KL toward the uniform Dirichlet. Row r's target is one-hot at
/// column `rows[r]`.
pub fn edl_loss_graph(
    g: &mut Graph,
    sim: Var,
    rows: &[usize],
    opts: &EdlOptions,
) -> Result<EdlTerms, TensorError> {
    check_tau(opts.tau_evidence)?;
    if opts.lambda_kl < 0.0 {
        return Err(TensorError::Domain(format!(
            "KL coefficient must be >= 0, got {}",
            opts.lambda_kl
        )));
    }
    let k = square_side(g.value(sim))?;
    if rows.iter().any(|&r| r >= k) {
        return Err(TensorError::ShapeMismatch("row index out of range".into()));
    }
    let r = rows.len();

    let sub = gather_rows(g, sim, rows, k)?;
    let scaled = g.scale(sub, 1.0 / opts.tau_evidence)?;
    let t = g.tanh(scaled)?;
    let e = g.exp(t)?;
    let alpha = g.add_scalar(e, 1.0)?;
    let conc = g.sum_axis(alpha, 1)?;
    let expand: Rc<Vec<usize>> = Rc::new((0..r * k).map(|i| i / k).collect());
    let conc_full = g.gather(conc, expand.clone(), vec![r, k])?;

    // one-hot targets on the original diagonal positions
    let mut y = vec![0.0; r * k];
    for (row_pos, &orig) in rows.iter().enumerate() {
        y[row_pos * k + orig] = 1.0;
    }
    let y = g.constant(Tensor::new(vec![r, k], y)?);

    let mean = g.div(alpha, conc_full)?;
    let err_diff = g.sub(y, mean)?;
    let err = g.square(err_diff)?;
    let rest = g.sub(conc_full, alpha)?;
    let var_num = g.mul(alpha, rest)?;
    let conc_sq = g.square(conc_full)?;
    let conc_p1 = g.add_scalar(conc_full, 1.0)?;
    let var_den = g.mul(conc_sq, conc_p1)?;
    let var = g.div(var_num, var_den)?;
    let mse_terms = g.add(err, var)?;
    let mse_per = g.sum_axis(mse_terms, 1)?;

    // KL(Dir(alpha) || Dir(1)), optionally with the true-class parameter
    // reset to 1 first.
    let (alpha_kl, conc_kl) = if opts.kl_remove_true_evidence {
        let mut one_minus_y = vec![1.0; r * k];
        let mut y_again = vec![0.0; r * k];
        for (row_pos, &orig) in rows.iter().enumerate() {
            one_minus_y[row_pos * k + orig] = 0.0;
            y_again[row_pos * k + orig] = 1.0;
        }
        let one_minus_y = g.constant(Tensor::new(vec![r, k], one_minus_y)?);
        let y_again = g.constant(Tensor::new(vec![r, k], y_again)?);
        let masked = g.mul(alpha, one_minus_y)?;
        let adj = g.add(masked, y_again)?;
        let conc_adj = g.sum_axis(adj, 1)?;
        (adj, conc_adj)
    } else {
        (alpha, conc)
    };
    let lg_conc = g.ln_gamma(conc_kl)?;
    let lg_alpha = g.ln_gamma(alpha_kl)?;
    let lg_alpha_sum = g.sum_axis(lg_alpha, 1)?;
    let lg_diff = g.sub(lg_conc, lg_alpha_sum)?;
    let lg_shifted = g.add_scalar(lg_diff, -special::ln_gamma(k as f64))?;
    let dig_alpha = g.digamma(alpha_kl)?;
    let dig_conc = g.digamma(conc_kl)?;
    let dig_conc_full = g.gather(dig_conc, expand, vec![r, k])?;
    let dig_diff = g.sub(dig_alpha, dig_conc_full)?;
    let am1 = g.add_scalar(alpha_kl, -1.0)?;
    let inner = g.mul(am1, dig_diff)?;
    let inner_sum = g.sum_axis(inner, 1)?;
    let kl_per = g.add(lg_shifted, inner_sum)?;

    let kl_weighted = g.scale(kl_per, opts.lambda_kl)?;
    let per_sample = g.add(mse_per, kl_weighted)?;
    let (scalar, mse_reduced, kl_reduced) = match opts.reduction {
        Reduction::Sum => (g.sum_all(per_sample)?, g.sum_all(mse_per)?, g.sum_all(kl_per)?),
        Reduction::Mean => (g.mean_all(per_sample)?, g.mean_all(mse_per)?, g.mean_all(kl_per)?),
    };
    Ok(EdlTerms { scalar, per_sample, mse_reduced, kl_reduced })
}

/// Total uncertainty `u = K / A` summed over the given rows; the guidance
/// signal for uncertainty-driven masking.
pub fn uncertainty_sum_graph(
    g: &mut Graph,
    sim: Var,
    rows: &[usize],
    tau_evidence: f64,
) -> Result<Var, TensorError> {
    check_tau(tau_evidence)?;
    let k = square_side(g.value(sim))?;
    let sub = gather_rows(g, sim, rows, k)?;
    let scaled = g.scale(sub, 1.0 / tau_evidence)?;
    let t = g.tanh(scaled)?;
    let e = g.exp(t)?;
    let alpha = g.add_scalar(e, 1.0)?;
    let conc = g.sum_axis(alpha, 1)?;
    let numer = g.constant(Tensor::new(vec![rows.len()], vec![k as f64; rows.len()])?);
    let u = g.div(numer, conc)?;
    g.sum_all(u)
}

/// Config for [`total_loss_graph`].
#[derive(Debug, Clone, Copy)]
pub struct TotalLossOptions {
    pub tau_infonce: f64,
    pub infonce_reduction: Reduction,
    pub lambda_edl: f64,
    pub edl: EdlOptions,
}

/// Combined objective over one batch similarity matrix: contrastive loss on
/// the match rows plus `lambda_edl` times the evidential loss on the noisy
/// rows. Row sets must be disjoint. An empty noisy set reduces the total to
/// the match term alone.
pub fn total_loss_graph(
    g: &mut Graph,
    sim: Var,
    match_rows: &[usize],
    noisy_rows: &[usize],
    opts: &TotalLossOptions,
) -> Result<(TotalLossVars, LossBreakdown), TensorError> {
    if opts.lambda_edl < 0.0 {
        return Err(TensorError::Domain(format!(
            "evidential weight must be >= 0, got {}",
            opts.lambda_edl
        )));
    }
    for r in match_rows {
        if noisy_rows.contains(r) {
            return Err(TensorError::Contract(format!("row {r} in both partitions")));
        }
    }

    let mut match_scalar = None;
    let mut per_sample_infonce = Vec::new();
    if !match_rows.is_empty() {
        let (scalar, per_row) =
            info_nce_graph(g, sim, match_rows, opts.tau_infonce, opts.infonce_reduction)?;
        per_sample_infonce = g.value(per_row).data().to_vec();
        match_scalar = Some(scalar);
    }

    let mut edl_scalar = None;
    let mut edl_mse = 0.0;
    let mut edl_kl = 0.0;
    if !noisy_rows.is_empty() && opts.lambda_edl > 0.0 {
        let terms = edl_loss_graph(g, sim, noisy_rows, &opts.edl)?;
        edl_mse = g.value(terms.mse_reduced).item();
        edl_kl = g.value(terms.kl_reduced).item();
        edl_scalar = Some(g.scale(terms.scalar, opts.lambda_edl)?);
    }

    let total = match (match_scalar, edl_scalar) {
        (Some(m), Some(e)) => g.add(m, e)?,
        (Some(m), None) => m,
        (None, Some(e)) => e,
        (None, None) => g.constant(Tensor::scalar(0.0)),
    };
    let match_value = match_scalar.map(|v| g.value(v).item()).unwrap_or(0.0);
    let breakdown = LossBreakdown {
        match_loss: match_value,
        edl_mse,
        edl_kl,
        total: g.value(total).item(),
        per_sample_infonce,
    };
    Ok((TotalLossVars { total, match_loss: match_scalar, edl_loss: edl_scalar }, breakdown))
}
