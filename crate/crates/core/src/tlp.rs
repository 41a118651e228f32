//! Nodewise l0-constrained regression: truncated-L1 difference-of-convex
//! iterations followed by an l0 projection and an unpenalized refit, with BIC
//! tuning over (tau, gamma, kappa) grids.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, FitResult, GramLasso};

pub const DEFAULT_MAX_DC_ITERATIONS: usize = 50;
pub const DEFAULT_DC_TOL: f64 = 1e-6;
pub const DEFAULT_CD_TOL: f64 = 1e-8;

/// Truncated-L1 surrogate `min(|z| / tau, 1)` of the indicator `z != 0`.
pub fn surrogate(z: f64, tau: f64) -> f64 {
    (z.abs() / tau).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TlpConfig {
    pub gamma: f64,
    pub tau: f64,
    pub kappa: usize,
    pub max_dc_iterations: usize,
    pub cd_tol: f64,
    pub dc_tol: f64,
}

impl TlpConfig {
    pub fn new(gamma: f64, tau: f64, kappa: usize) -> Self {
        TlpConfig {
            gamma,
            tau,
            kappa,
            max_dc_iterations: DEFAULT_MAX_DC_ITERATIONS,
            cd_tol: DEFAULT_CD_TOL,
            dc_tol: DEFAULT_DC_TOL,
        }
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.tau > 0.0) {
            return Err(Error::InvalidInput(format!(
                "gamma and tau must be positive (got {}, {})",
                self.gamma, self.tau
            )));
        }
        if self.kappa == 0 || self.kappa > q {
            return Err(Error::InvalidInput(format!(
                "kappa = {} outside [1, {q}]",
                self.kappa
            )));
        }
        if !(self.cd_tol > 0.0) || !(self.dc_tol > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        Ok(())
    }

    /// Lasso penalty level `gamma * tau` of the weighted subproblem.
    pub fn penalty_level(&self) -> f64 {
        self.gamma * self.tau
    }
}

/// Design matrix with its cached Gram matrix `X^T X / n`.
#[derive(Clone, Debug)]
pub struct Design<'a> {
    x: ArrayView2<'a, f64>,
    gram: Array2<f64>,
}

impl<'a> Design<'a> {
    pub fn new(x: ArrayView2<'a, f64>) -> Self {
        let gram = linalg::gram_matrix(x);
        Design { x, gram }
    }

    pub fn x(&self) -> ArrayView2<'a, f64> {
        self.x
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    pub fn gram(&self) -> ArrayView2<'_, f64> {
        self.gram.view()
    }

    /// `X^T y / n`.
    pub fn cross(&self, y: ArrayView1<'_, f64>) -> Array1<f64> {
        self.x.t().dot(&y) / self.n().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TlpFit {
    /// DC fixed point before projection.
    pub tilde_v: Vec<f64>,
    /// Projected and refitted coefficients; zero off `support`.
    pub v_hat: Vec<f64>,
    /// Kept indices, ascending.
    pub support: Vec<usize>,
    pub rss: f64,
    pub dc_iterations_used: usize,
    /// False when the DC loop hit its cap; the last iterate was projected anyway.
    pub converged: bool,
    /// Truncated-L1 objective at every DC iterate, starting from the initializer.
    pub objective_trace: Vec<f64>,
}

/// Truncated-L1 objective `sum (y - Xb)^2 + 2 n gamma tau sum min(|b_l|, tau)`,
/// which the DC iterations majorize.
pub fn tlp_objective(design: &Design<'_>, y: ArrayView1<'_, f64>, v: &[f64], cfg: &TlpConfig) -> f64 {
    let beta = ArrayView1::from(v);
    let resid = &y - &design.x().dot(&beta);
    let rss = resid.dot(&resid);
    let pen: f64 = v.iter().map(|b| b.abs().min(cfg.tau)).sum();
    rss + 2.0 * design.n() as f64 * cfg.gamma * cfg.tau * pen
}

struct DcOutcome {
    tilde_v: Vec<f64>,
    iterations: usize,
    converged: bool,
    objective_trace: Vec<f64>,
}

fn dc_iterate(
    design: &Design<'_>,
    y: ArrayView1<'_, f64>,
    xty: ArrayView1<'_, f64>,
    cfg: &TlpConfig,
    init: &[f64],
    track_objective: bool,
) -> Result<DcOutcome> {
    let solver = GramLasso::new(design.gram(), xty);
    let lambda = cfg.penalty_level();
    let mut cur = init.to_vec();
    let mut trace = Vec::new();
    if track_objective {
        trace.push(tlp_objective(design, y, &cur, cfg));
    }
    let mut t = 0usize;
    loop {
        let weights: Vec<bool> = cur.iter().map(|v| v.abs() <= cfg.tau).collect();
        let next = solver.solve(lambda, &weights, &cur, cfg.cd_tol)?;
        let change = next
            .iter()
            .zip(&cur)
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        if track_objective {
            trace.push(tlp_objective(design, y, &next, cfg));
        }
        cur = next;
        if change <= cfg.dc_tol {
            return Ok(DcOutcome {
                tilde_v: cur,
                iterations: t,
                converged: true,
                objective_trace: trace,
            });
        }
        t += 1;
        if t >= cfg.max_dc_iterations {
            log::warn!("DC iterations hit the cap of {}", cfg.max_dc_iterations);
            return Ok(DcOutcome {
                tilde_v: cur,
                iterations: t,
                converged: false,
                objective_trace: trace,
            });
        }
    }
}

/// Indices sorted by decreasing `|v|`; equal magnitudes keep index order.
pub fn magnitude_order(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| {
        v[b].abs()
            .partial_cmp(&v[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Keeps the `kappa` largest `|tilde_v|` (lowest index wins ties) and refits
/// unpenalized least squares on them.
pub fn l0_project_refit(
    tilde_v: &[f64],
    kappa: usize,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> Result<FitResult> {
    let q = x.ncols();
    if tilde_v.len() != q {
        return Err(Error::DimensionMismatch(format!(
            "tilde_v has length {}, design has {q} columns",
            tilde_v.len()
        )));
    }
    if kappa == 0 || kappa > q {
        return Err(Error::InvalidInput(format!("kappa = {kappa} outside [1, {q}]")));
    }
    let mut support: Vec<usize> = magnitude_order(tilde_v).into_iter().take(kappa).collect();
    support.sort_unstable();
    let sub = linalg::select_columns(x, &support);
    let fit = linalg::least_squares(sub.view(), y)?;
    let mut coefficients = Array1::zeros(q);
    for (&col, &b) in support.iter().zip(fit.coefficients.iter()) {
        coefficients[col] = b;
    }
    Ok(FitResult {
        coefficients,
        rss: fit.rss,
        support,
    })
}

fn check_init(init: &[f64], cfg: &TlpConfig) -> Result<()> {
    let active = init.iter().filter(|v| v.abs() > cfg.tau).count();
    if active > cfg.kappa {
        return Err(Error::InvalidInput(format!(
            "initializer has {active} entries above tau, more than kappa = {}",
            cfg.kappa
        )));
    }
    Ok(())
}

/// Zeroes all but the `kappa` largest entries exceeding `tau`, so a warm
/// start satisfies the initializer constraint.
pub fn feasible_init(init: &[f64], tau: f64, kappa: usize) -> Vec<f64> {
    let mut out = init.to_vec();
    let mut kept = 0usize;
    for idx in magnitude_order(init) {
        if out[idx].abs() > tau {
            if kept < kappa {
                kept += 1;
            } else {
                out[idx] = 0.0;
            }
        }
    }
    out
}

/// DC iterations from `init` until the sup-norm change is at most
/// `cfg.dc_tol`, then l0 projection and refit.
pub fn dc_constrained_fit(
    design: &Design<'_>,
    y: ArrayView1<'_, f64>,
    cfg: &TlpConfig,
    init: &[f64],
) -> Result<TlpFit> {
    cfg.validate(design.q())?;
    if y.len() != design.n() || init.len() != design.q() {
        return Err(Error::DimensionMismatch("dc_constrained_fit inputs".into()));
    }
    check_init(init, cfg)?;
    let xty = design.cross(y);
    let dc = dc_iterate(design, y, xty.view(), cfg, init, true)?;
    let refit = l0_project_refit(&dc.tilde_v, cfg.kappa, design.x(), y)?;
    Ok(TlpFit {
        tilde_v: dc.tilde_v,
        v_hat: refit.coefficients.to_vec(),
        support: refit.support,
        rss: refit.rss,
        dc_iterations_used: dc.iterations,
        converged: dc.converged,
        objective_trace: dc.objective_trace,
    })
}

/// Gaussian profile-likelihood BIC `n log(RSS / n) + df log n`.
pub fn bic(rss: f64, n: usize, df: usize) -> f64 {
    let nf = n as f64;
    nf * (rss.max(f64::MIN_POSITIVE) / nf).ln() + df as f64 * nf.ln()
}

/// Tuning grids for BIC selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub taus: Vec<f64>,
    /// Explicit gamma values; when empty they are derived from the data.
    #[serde(default)]
    pub gammas: Vec<f64>,
    pub gamma_count: usize,
    pub kappa_max: usize,
}

impl Default for TuningGrid {
    fn default() -> Self {
        TuningGrid {
            taus: vec![0.05, 0.1, 0.15],
            gammas: Vec::new(),
            gamma_count: 100,
            kappa_max: 30,
        }
    }
}

impl TuningGrid {
    pub fn validate(&self) -> Result<()> {
        if self.taus.is_empty() || self.taus.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::InvalidInput("tau grid must be nonempty and positive".into()));
        }
        if self.gammas.is_empty() && self.gamma_count == 0 {
            return Err(Error::InvalidInput("gamma grid must be nonempty".into()));
        }
        if self.gammas.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::InvalidInput("gamma values must be positive".into()));
        }
        if self.kappa_max == 0 {
            return Err(Error::InvalidInput("kappa_max must be at least 1".into()));
        }
        Ok(())
    }

    /// Gamma values for the given data: explicit ones if present, otherwise
    /// the log-spaced grid of [`gamma_grid`].
    pub fn gammas_for(&self, x: ArrayView2<'_, f64>, ys: ArrayView2<'_, f64>) -> Vec<f64> {
        if self.gammas.is_empty() {
            gamma_grid(x, ys, self.gamma_count)
        } else {
            self.gammas.clone()
        }
    }

    /// Kappa candidates `1..=min(kappa_max, q, n - 1)`.
    pub fn kappas_for(&self, q: usize, n: usize) -> Vec<usize> {
        let hi = self.kappa_max.min(q).min(n.saturating_sub(1)).max(1);
        (1..=hi).collect()
    }
}

/// Gap between the `kappa`-th and `(kappa+1)`-th largest magnitudes.
fn separation(v: &[f64], order: &[usize], kappa: usize) -> f64 {
    let at = |i: usize| order.get(i).map_or(0.0, |&l| v[l].abs());
    at(kappa - 1) - at(kappa)
}

/// `exp` of `count` equally spaced values from `log M` down to `0.05 log M`,
/// with `M = max_{l,j} |X_l^T Y_j|`. `log M` is floored at 1 so the grid
/// stays above 1 for weakly correlated data.
pub fn gamma_grid(x: ArrayView2<'_, f64>, ys: ArrayView2<'_, f64>, count: usize) -> Vec<f64> {
    let cross = x.t().dot(&ys);
    let max = cross.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let top = max.ln().max(1.0);
    let bottom = 0.05 * top;
    match count {
        0 => Vec::new(),
        1 => vec![top.exp()],
        _ => (0..count)
            .map(|i| {
                let t = i as f64 / (count - 1) as f64;
                (top + t * (bottom - top)).exp()
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunedFit {
    pub config: TlpConfig,
    pub fit: TlpFit,
    pub bic: f64,
}

/// Fits every `(tau, gamma)` cell once, projects onto every kappa, and keeps
/// the configuration with the smallest BIC. Cells with equal BIC select the
/// same model; among them the one whose fixed point separates the kept
/// entries most clearly from the rest wins, then the first in grid order.
/// Failing cells are skipped.
pub fn bic_tune(
    design: &Design<'_>,
    y: ArrayView1<'_, f64>,
    taus: &[f64],
    gammas: &[f64],
    kappas: &[usize],
) -> Result<TunedFit> {
    let n = design.n();
    let q = design.q();
    if taus.is_empty() || gammas.is_empty() || kappas.is_empty() {
        return Err(Error::InvalidInput("tuning grids must be nonempty".into()));
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch("response length".into()));
    }
    let mut kappas: Vec<usize> = kappas.iter().copied().filter(|&k| k >= 1 && k <= q).collect();
    kappas.sort_unstable();
    kappas.dedup();
    let kappa_top = *kappas.last().ok_or_else(|| {
        Error::InvalidInput(format!("no kappa in the grid lies within [1, {q}]"))
    })?;

    let xty = design.cross(y);
    let ycols: Vec<f64> = y.to_vec();
    let mut rss_cache: HashMap<Vec<usize>, Option<Vec<Option<f64>>>> = HashMap::new();
    let mut best: Option<(f64, f64, TlpConfig, Vec<f64>, usize, bool)> = None;

    for &tau in taus {
        for &gamma in gammas {
            let cfg = TlpConfig::new(gamma, tau, kappa_top);
            if cfg.validate(q).is_err() {
                continue;
            }
            let zero = vec![0.0; q];
            let dc = match dc_iterate(design, y, xty.view(), &cfg, &zero, false) {
                Ok(dc) => dc,
                Err(e) => {
                    log::debug!("skipping cell tau={tau}, gamma={gamma}: {e}");
                    continue;
                }
            };
            let full_order = magnitude_order(&dc.tilde_v);
            let order: Vec<usize> = full_order.iter().copied().take(kappa_top).collect();
            let rss_by_size = rss_cache
                .entry(order.clone())
                .or_insert_with(|| prefix_rss_for(design, &ycols, &order, &kappas));
            let Some(rss_by_size) = rss_by_size else {
                continue;
            };
            for &kappa in &kappas {
                let Some(rss) = rss_by_size[kappa] else {
                    continue;
                };
                let score = bic(rss, n, kappa);
                let margin = separation(&dc.tilde_v, &full_order, kappa);
                let better = match &best {
                    None => true,
                    Some((b, m, ..)) => {
                        let tol = 1e-9 * b.abs().max(1.0);
                        score < *b - tol || ((score - *b).abs() <= tol && margin > *m)
                    }
                };
                if better {
                    best = Some((
                        score,
                        margin,
                        TlpConfig::new(gamma, tau, kappa),
                        dc.tilde_v.clone(),
                        dc.iterations,
                        dc.converged,
                    ));
                }
            }
        }
    }

    let (score, _, config, tilde_v, iterations, converged) =
        best.ok_or_else(|| Error::InvalidInput("every tuning cell failed".into()))?;
    let refit = l0_project_refit(&tilde_v, config.kappa, design.x(), y)?;
    Ok(TunedFit {
        config,
        bic: score,
        fit: TlpFit {
            tilde_v,
            v_hat: refit.coefficients.to_vec(),
            support: refit.support,
            rss: refit.rss,
            dc_iterations_used: iterations,
            converged,
            objective_trace: Vec::new(),
        },
    })
}

/// RSS of the nested refits on the first `k` entries of `order`, indexed by
/// `k`. Falls back to one fit per kappa if the joint factorization is rank
/// deficient, so a collinear tail only knocks out the sizes that include it.
fn prefix_rss_for(
    design: &Design<'_>,
    y: &[f64],
    order: &[usize],
    kappas: &[usize],
) -> Option<Vec<Option<f64>>> {
    let x = design.x();
    let cols: Vec<Vec<f64>> = order.iter().map(|&c| x.column(c).to_vec()).collect();
    match linalg::prefix_rss(cols, y) {
        Ok(prefix) => Some(prefix.into_iter().map(Some).collect()),
        Err(_) => {
            let yv = ArrayView1::from(y);
            let mut out = vec![None; order.len() + 1];
            for &k in kappas {
                let sub = linalg::select_columns(x, &order[..k]);
                if let Ok(fit) = linalg::least_squares(sub.view(), yv) {
                    out[k] = Some(fit.rss);
                }
            }
            Some(out)
        }
    }
}
