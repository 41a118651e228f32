//! Likelihood-ratio tests of hypothesized directed edges and pathways, with
//! p-values from data perturbation and from the chi-square limit.
//!
//! Column convention: the combined data `Z = (X, Y)` holds the `q`
//! interventions in columns `0..q` and the `p` primary variables after them.

use ndarray::{concatenate, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::graph::{classify_hypothesis, HypothesisClassification, HypothesisSpec, SuperGraph, TestMode};
use crate::linalg::{self, nested_projection};
use crate::peeling::{learn_structure_with_design, PeelOptions, Tuning};
use crate::tlp::{Design, TuningGrid};

/// Monte-Carlo settings for the perturbation p-value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Worker count; `None` uses the ambient rayon pool.
    #[serde(default)]
    pub threads: Option<usize>,
    /// Start replicate DC iterations at the original fixed point.
    pub warm_start: bool,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            replicates: 500,
            seed: 0,
            threads: None,
            warm_start: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    #[default]
    Dp,
    Asymptotic,
    Both,
}

impl PValueMethod {
    fn wants_dp(self) -> bool {
        matches!(self, PValueMethod::Dp | PValueMethod::Both)
    }

    fn wants_asymptotic(self) -> bool {
        matches!(self, PValueMethod::Asymptotic | PValueMethod::Both)
    }
}

/// Where the super-graph comes from.
#[derive(Clone, Debug)]
pub enum StructureSource {
    /// Learn from data; replicates reuse the selected tuning.
    Learn { grid: TuningGrid, peel: PeelOptions },
    /// A known super-graph, used for the data and every replicate.
    Oracle(SuperGraph),
}

impl Default for StructureSource {
    fn default() -> Self {
        StructureSource::Learn {
            grid: TuningGrid::default(),
            peel: PeelOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TestOptions {
    pub structure: StructureSource,
    pub dp: DpConfig,
    pub method: PValueMethod,
    /// Use the normal approximation for the asymptotic p-value when the
    /// number of constrained edges is at least 50.
    pub normal_approximation: bool,
}

/// `A_j` and `B_j` as column indices into `Z`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeTestSets {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

/// `A_j = an(j) ∪ in(j) ∪ d(j)`, `B_j = (an(j) ∪ in(j)) \ d(j)`.
pub fn node_test_sets(s: &SuperGraph, j: usize, d: &[usize]) -> NodeTestSets {
    let q = s.q();
    let mut b: Vec<usize> = s.interventions_of(j);
    b.extend(s.ancestors_of(j).into_iter().filter(|k| !d.contains(k)).map(|k| q + k));
    b.sort_unstable();
    let mut a = b.clone();
    a.extend(d.iter().map(|k| q + k));
    a.extend(s.ancestors_of(j).into_iter().filter(|k| d.contains(k)).map(|k| q + k));
    a.sort_unstable();
    a.dedup();
    NodeTestSets { a, b }
}

/// `Z = (X, Y)`.
pub fn combined(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.nrows() != y.nrows() {
        return Err(Error::RowMismatch {
            y_rows: y.nrows(),
            x_rows: x.nrows(),
        });
    }
    concatenate(Axis(1), &[x, y]).map_err(|e| Error::DimensionMismatch(e.to_string()))
}

/// Residual variance of each `Y_j` regressed on `(Y_an, X_in)` with
/// denominator `n - |an(j)| - |in(j)|`.
pub fn sigma_hat(z: ArrayView2<'_, f64>, s: &SuperGraph) -> Result<Vec<f64>> {
    let n = z.nrows();
    let q = s.q();
    (0..s.p())
        .map(|j| {
            let mut cols = s.interventions_of(j);
            cols.extend(s.ancestors_of(j).into_iter().map(|k| q + k));
            if n <= cols.len() {
                return Err(Error::DegreesOfFreedomExhausted {
                    node: j + 1,
                    n,
                    predictors: cols.len(),
                });
            }
            let fit = linalg::least_squares(linalg::select_columns(z, &cols).view(), z.column(q + j))?;
            if fit.rss == 0.0 {
                log::warn!("node {}: response lies in the span of its regressors", j + 1);
            }
            Ok(fit.rss / (n - cols.len()) as f64)
        })
        .collect()
}

/// `sum_{j : d(j) nonempty} Y_j^T (P_A - P_B) Y_j / (2 sigma2_j)` and the
/// per-node terms (zero where `d(j)` is empty).
pub fn likelihood_ratio_edges(
    z: ArrayView2<'_, f64>,
    s: &SuperGraph,
    cls: &HypothesisClassification,
    sigma2: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let q = s.q();
    let mut terms = vec![0.0; s.p()];
    for (j, d) in cls.per_node_d.iter().enumerate() {
        if d.is_empty() {
            continue;
        }
        let sets = node_test_sets(s, j, d);
        let proj = nested_projection(z, &sets.a, &sets.b, z.column(q + j))?;
        terms[j] = proj.difference().max(0.0) / (2.0 * sigma2[j]);
    }
    Ok((terms.iter().sum(), terms))
}

/// `Y* = Y + E*` with `E*_ij ~ N(0, sigma2_j)`, filled row by row.
pub fn perturb(y: ArrayView2<'_, f64>, sigma2: &[f64], rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    let sd: Vec<f64> = sigma2.iter().map(|s| s.max(0.0).sqrt()).collect();
    let e = Array2::from_shape_fn(y.dim(), |(_, j)| {
        let draw: f64 = StandardNormal.sample(rng);
        draw * sd[j]
    });
    (&y + &e, e)
}

/// Perturbation statistic: for each `j` with `d_S(j)` nonempty,
/// `e*_j^T (P_A* - P_B*) e*_j / (2 s*_j)` with
/// `s*_j = e*_j^T (I - P_A*) e*_j / (n - |A*_j|)`, where `A*`, `B*` come from
/// the replicate super-graph and its own nondegenerate set.
pub fn dp_star_statistic(
    e_star: ArrayView2<'_, f64>,
    z_star: ArrayView2<'_, f64>,
    s_star: &SuperGraph,
    h: &HypothesisSpec,
    cls_on_s: &HypothesisClassification,
) -> Result<f64> {
    let n = z_star.nrows();
    let cls_star = classify_hypothesis(h, s_star);
    let mut total = 0.0;
    for (j, d) in cls_on_s.per_node_d.iter().enumerate() {
        if d.is_empty() {
            continue;
        }
        let sets = node_test_sets(s_star, j, &cls_star.per_node_d[j]);
        if n <= sets.a.len() {
            return Err(Error::DegreesOfFreedomExhausted {
                node: j + 1,
                n,
                predictors: sets.a.len(),
            });
        }
        let proj = nested_projection(z_star, &sets.a, &sets.b, e_star.column(j))?;
        let s_tilde = proj.residual_a / (n - sets.a.len()) as f64;
        total += proj.difference().max(0.0) / (2.0 * s_tilde);
    }
    Ok(total)
}

/// Classical F statistic for one node:
/// `[v^T (P_A - P_B) v / (|A| - |B|)] / [v^T (I - P_A) v / (n - |A|)]`.
pub fn node_f_statistic(z: ArrayView2<'_, f64>, a: &[usize], b: &[usize], v: ArrayView1<'_, f64>) -> Result<f64> {
    let n = z.nrows();
    let df1 = a.len().saturating_sub(b.len());
    if df1 == 0 || n <= a.len() {
        return Err(Error::InvalidInput("F statistic needs |A| > |B| and n > |A|".into()));
    }
    let proj = nested_projection(z, a, b, v)?;
    Ok((proj.difference() / df1 as f64) / (proj.residual_a / (n - a.len()) as f64))
}

/// `P(chi2_d >= 2 lr)`; with `normal` and `d >= 50` the standardized
/// `(2 lr - d) / sqrt(2 d)` is referred to the standard normal instead.
pub fn asymptotic_pvalue(lr: f64, d: usize, normal: bool) -> f64 {
    if d == 0 || lr <= 0.0 {
        return 1.0;
    }
    if normal && d >= 50 {
        let z = (2.0 * lr - d as f64) / (2.0 * d as f64).sqrt();
        let std = Normal::new(0.0, 1.0).expect("standard normal");
        return std.sf(z).clamp(0.0, 1.0);
    }
    let chi = ChiSquared::new(d as f64).expect("positive degrees of freedom");
    chi.sf(2.0 * lr).clamp(0.0, 1.0)
}

/// `#{m : Lr*_m >= Lr and contained_m} / #{m : contained_m}`.
pub fn dp_pvalue(lr: f64, lr_star: &[Option<f64>], contained: &[bool]) -> Result<f64> {
    let n_contained = contained.iter().filter(|c| **c).count();
    if n_contained == 0 {
        return Err(Error::NoContainedReplicates {
            replicates: contained.len(),
        });
    }
    let hits = lr_star
        .iter()
        .zip(contained)
        .filter(|(s, c)| **c && s.is_some_and(|v| v >= lr))
        .count();
    Ok(hits as f64 / n_contained as f64)
}

/// Holm step-down adjusted p-values, in input order.
pub fn holm_adjust(pvalues: &[f64]) -> Vec<f64> {
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * pvalues[i]).min(1.0));
        adjusted[i] = running;
    }
    adjusted
}

/// One tested statistic: the whole hypothesis for a regular edge test, or a
/// single edge for pathways and decomposed irregular tests.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentReport {
    pub edges: Vec<[usize; 2]>,
    pub d_size: usize,
    pub lr: f64,
    pub lr_star: Vec<Option<f64>>,
    pub dp_pvalue: Option<f64>,
    pub asymptotic_pvalue: Option<f64>,
    /// Holm-adjusted p-value for decomposed irregular tests.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjusted_pvalue: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DpTestReport {
    pub mode: TestMode,
    pub method: PValueMethod,
    pub hypothesis: Vec<[usize; 2]>,
    pub classification: HypothesisClassification,
    pub supergraph: SuperGraph,
    /// Likelihood ratio of the hypothesis; for pathways and decomposed tests
    /// the per-edge values are in `components`.
    pub lr: Option<f64>,
    pub pvalue: f64,
    pub dp_pvalue: Option<f64>,
    pub asymptotic_pvalue: Option<f64>,
    pub degeneracy_reason: Option<String>,
    pub sigma2_hat: Vec<f64>,
    pub replicates_run: usize,
    pub contained: Vec<bool>,
    pub n_contained: usize,
    /// Replicates whose structure estimate or statistic failed numerically;
    /// they count as not contained.
    pub failed_replicates: usize,
    pub seed: u64,
    pub components: Vec<ComponentReport>,
}

impl DpTestReport {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.pvalue <= alpha
    }
}

/// Edge test of `H0: U_kj = 0 for all (k, j) in h`.
pub fn dp_edge_test(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    h: &HypothesisSpec,
    opts: &TestOptions,
) -> Result<DpTestReport> {
    run_test(x, y, &h.with_mode(TestMode::EdgeTest), opts)
}

/// Pathway test of `H0: U_kj = 0 for some (k, j) in h`.
pub fn dp_pathway_test(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    h: &HypothesisSpec,
    opts: &TestOptions,
) -> Result<DpTestReport> {
    run_test(x, y, &h.with_mode(TestMode::PathwayTest), opts)
}

/// Dispatches on the mode stored in `h`.
pub fn run_test(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    h: &HypothesisSpec,
    opts: &TestOptions,
) -> Result<DpTestReport> {
    match opts.dp.threads {
        Some(t) if t > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
            pool.install(|| run_test_inner(x, y, h, opts))
        }
        _ => run_test_inner(x, y, h, opts),
    }
}

struct Fitted {
    s: SuperGraph,
    /// Frozen tuning and warm start for replicates; `None` in oracle mode.
    replicate_tuning: Option<(Tuning, Array2<f64>, PeelOptions)>,
}

fn run_test_inner(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    h: &HypothesisSpec,
    opts: &TestOptions,
) -> Result<DpTestReport> {
    let (n, q) = x.dim();
    let p = y.ncols();
    if y.nrows() != n {
        return Err(Error::RowMismatch {
            y_rows: y.nrows(),
            x_rows: n,
        });
    }
    h.check_bounds(p)?;
    if opts.method.wants_dp() && opts.dp.replicates == 0 {
        return Err(Error::InvalidInput("at least one replicate is required".into()));
    }
    let design = Design::new(x);
    let fitted = match &opts.structure {
        StructureSource::Oracle(s) => {
            if s.p() != p || s.q() != q {
                return Err(Error::DimensionMismatch(format!(
                    "oracle super-graph is (p={}, q={}), data is (p={p}, q={q})",
                    s.p(),
                    s.q()
                )));
            }
            Fitted {
                s: s.clone(),
                replicate_tuning: None,
            }
        }
        StructureSource::Learn { grid, peel } => {
            let fit = learn_structure_with_design(&design, y, &Tuning::Grid(grid.clone()), None, *peel)?;
            Fitted {
                s: fit.supergraph,
                replicate_tuning: Some((Tuning::Fixed(fit.configs), fit.tilde_v, *peel)),
            }
        }
    };
    let s = &fitted.s;
    let z = combined(x, y)?;
    let sigma2 = sigma_hat(z.view(), s)?;
    let cls = classify_hypothesis(h, s);
    let mode = h.mode();

    let mut report = DpTestReport {
        mode,
        method: opts.method,
        hypothesis: h.edges().iter().map(|&(k, j)| [k + 1, j + 1]).collect(),
        classification: cls.clone(),
        supergraph: s.clone(),
        lr: None,
        pvalue: 1.0,
        dp_pvalue: None,
        asymptotic_pvalue: None,
        degeneracy_reason: None,
        sigma2_hat: sigma2.clone(),
        replicates_run: 0,
        contained: Vec::new(),
        n_contained: 0,
        failed_replicates: 0,
        seed: opts.dp.seed,
        components: Vec::new(),
    };

    let reason = match mode {
        TestMode::EdgeTest if cls.is_degenerate => {
            Some("degenerate: every hypothesized edge reverses an estimated ancestral relation".to_string())
        }
        TestMode::PathwayTest if cls.d_size() < h.edges().len() => Some(format!(
            "degenerate: {} of {} pathway edges reverse an estimated ancestral relation",
            h.edges().len() - cls.d_size(),
            h.edges().len()
        )),
        TestMode::PathwayTest if !cls.is_regular => {
            Some("irregular: the pathway together with the ancestral relations contains a cycle".to_string())
        }
        _ => None,
    };
    if let Some(reason) = reason {
        report.degeneracy_reason = Some(reason);
        return Ok(report);
    }

    // Sub-hypotheses tested on a shared replicate set.
    let decomposed = mode == TestMode::PathwayTest || !cls.is_regular;
    let subs: Vec<HypothesisSpec> = if decomposed {
        cls.nondegenerate
            .iter()
            .map(|&e| HypothesisSpec::new([e], TestMode::EdgeTest))
            .collect::<Result<_>>()?
    } else {
        vec![HypothesisSpec::new(cls.nondegenerate.iter().copied(), TestMode::EdgeTest)?]
    };
    let sub_cls: Vec<HypothesisClassification> = subs.iter().map(|sh| classify_hypothesis(sh, s)).collect();
    let mut components = Vec::with_capacity(subs.len());
    for (sh, sc) in subs.iter().zip(&sub_cls) {
        let (lr, _) = likelihood_ratio_edges(z.view(), s, sc, &sigma2)?;
        components.push(ComponentReport {
            edges: sh.edges().iter().map(|&(k, j)| [k + 1, j + 1]).collect(),
            d_size: sc.d_size(),
            lr,
            lr_star: Vec::new(),
            dp_pvalue: None,
            asymptotic_pvalue: opts
                .method
                .wants_asymptotic()
                .then(|| asymptotic_pvalue(lr, sc.d_size(), opts.normal_approximation)),
            adjusted_pvalue: None,
        });
    }

    if opts.method.wants_dp() {
        let m = opts.dp.replicates;
        let outcomes: Vec<Option<Vec<f64>>> = (0..m)
            .into_par_iter()
            .map(|rep| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.dp.seed);
                rng.set_stream(rep as u64);
                match replicate(&design, x, y, &sigma2, &fitted, &subs, &sub_cls, opts.dp.warm_start, &mut rng) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        log::debug!("replicate {rep} failed: {e}");
                        None
                    }
                }
            })
            .collect();
        // outer None: failed; inner empty: not contained
        report.replicates_run = m;
        report.failed_replicates = outcomes.iter().filter(|o| o.is_none()).count();
        report.contained = outcomes.iter().map(|o| o.as_ref().is_some_and(|v| !v.is_empty())).collect();
        report.n_contained = report.contained.iter().filter(|c| **c).count();
        for (c, comp) in components.iter_mut().enumerate() {
            comp.lr_star = outcomes
                .iter()
                .map(|o| o.as_ref().and_then(|v| v.get(c).copied()))
                .collect();
            comp.dp_pvalue = Some(dp_pvalue(comp.lr, &comp.lr_star, &report.contained)?);
        }
    }

    let combine = |get: &dyn Fn(&ComponentReport) -> Option<f64>| -> Option<f64> {
        let ps: Option<Vec<f64>> = components.iter().map(get).collect();
        let ps = ps?;
        Some(match mode {
            TestMode::PathwayTest => ps.iter().copied().fold(0.0, f64::max),
            TestMode::EdgeTest if decomposed => holm_adjust(&ps).into_iter().fold(1.0, f64::min),
            TestMode::EdgeTest => ps[0],
        })
    };
    report.dp_pvalue = combine(&|c| c.dp_pvalue);
    report.asymptotic_pvalue = combine(&|c| c.asymptotic_pvalue);
    if mode == TestMode::EdgeTest && decomposed {
        let basis: Vec<Option<f64>> = components
            .iter()
            .map(|c| if opts.method.wants_dp() { c.dp_pvalue } else { c.asymptotic_pvalue })
            .collect();
        if let Some(ps) = basis.into_iter().collect::<Option<Vec<f64>>>() {
            for (c, adj) in components.iter_mut().zip(holm_adjust(&ps)) {
                c.adjusted_pvalue = Some(adj);
            }
        }
    }
    if !decomposed {
        report.lr = Some(components[0].lr);
    }
    report.pvalue = if opts.method.wants_dp() {
        report.dp_pvalue.unwrap_or(1.0)
    } else {
        report.asymptotic_pvalue.unwrap_or(1.0)
    };
    report.components = components;
    Ok(report)
}

/// One perturbation replicate: the statistic of every sub-hypothesis, or an
/// empty vector when the replicate super-graph does not contain the original.
#[allow(clippy::too_many_arguments)]
fn replicate(
    design: &Design<'_>,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    sigma2: &[f64],
    fitted: &Fitted,
    subs: &[HypothesisSpec],
    sub_cls: &[HypothesisClassification],
    warm_start: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let (y_star, e_star) = perturb(y, sigma2, rng);
    let s_star = match &fitted.replicate_tuning {
        None => fitted.s.clone(),
        Some((tuning, tilde_v, peel)) => {
            let warm = warm_start.then(|| tilde_v.view());
            learn_structure_with_design(design, y_star.view(), tuning, warm, *peel)?.supergraph
        }
    };
    if !s_star.contains(&fitted.s)? {
        return Ok(Vec::new());
    }
    let z_star = combined(x, y_star.view())?;
    subs.iter()
        .zip(sub_cls)
        .map(|(sh, sc)| dp_star_statistic(e_star.view(), z_star.view(), &s_star, sh, sc))
        .collect()
}
