//! Synthetic data from the linear SEM with interventions: random and hub
//! DAGs, three intervention layouts, AR(1) interventions, plus SHD scoring,
//! the rejection-rate experiment driver and KS calibration helpers.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    ancestral_closure, classify_hypothesis, topological_heights, topological_order, HypothesisClassification,
    HypothesisSpec, PairSet, SuperGraph, TestMode,
};
use crate::inference::{self, DpConfig, PValueMethod, StructureSource, TestOptions};
use crate::peeling::{learn_structure, PeelOptions, Tuning};
use crate::refit::{refit_dag, WeightedDag};
use crate::tlp::TuningGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Random,
    Hub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setup {
    A,
    B,
    C,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub p: usize,
    pub q: usize,
    pub n: usize,
    pub graph: GraphKind,
    pub setup: Setup,
    #[serde(default = "default_sigma2_range")]
    pub sigma2_range: (f64, f64),
    #[serde(default = "default_x_corr")]
    pub x_corr: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sigma2_range() -> (f64, f64) {
    (0.5, 1.0)
}

fn default_x_corr() -> f64 {
    0.5
}

impl SimDesign {
    pub fn new(p: usize, q: usize, n: usize, graph: GraphKind, setup: Setup) -> Self {
        SimDesign {
            p,
            q,
            n,
            graph,
            setup,
            sigma2_range: default_sigma2_range(),
            x_corr: default_x_corr(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n == 0 {
            return Err(Error::InvalidInput("p and n must be positive".into()));
        }
        let need = match self.setup {
            Setup::A | Setup::B => 2 * self.p,
            Setup::C => self.p,
        };
        if self.q < need {
            return Err(Error::DimensionMismatch(format!(
                "setup {:?} needs q >= {need}, got q = {}",
                self.setup, self.q
            )));
        }
        let (lo, hi) = self.sigma2_range;
        if !(lo > 0.0) || hi < lo {
            return Err(Error::InvalidInput("noise variance range must be positive and ordered".into()));
        }
        if !(self.x_corr.abs() < 1.0) {
            return Err(Error::InvalidInput("x_corr must lie in (-1, 1)".into()));
        }
        Ok(())
    }
}

/// Random: strictly upper entries iid Bernoulli(1/p). Hub: nodes 1 and 2
/// point to the odd and even nodes `2j+1`, `2j+2` for `j = 1..floor(p/2)-2`.
pub fn gen_u(kind: GraphKind, p: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut u = Array2::zeros((p, p));
    match kind {
        GraphKind::Random => {
            let prob = 1.0 / p.max(1) as f64;
            for k in 0..p {
                for j in k + 1..p {
                    if rng.random_bool(prob) {
                        u[[k, j]] = 1.0;
                    }
                }
            }
        }
        GraphKind::Hub => {
            let top = (p / 2).saturating_sub(2);
            for j in 1..=top {
                // 1-based (1, 2j+1) and (2, 2j+2)
                u[[0, 2 * j]] = 1.0;
                u[[1, 2 * j + 1]] = 1.0;
            }
        }
    }
    u
}

/// Intervention matrix. A and B stack `[A; B; 0]` with `A_jj = B_jj =
/// B_{j,j+1} = 1` for `j < p` and `A_pp = 1` (B additionally sets
/// `A_{j,j+1} = 1`); C is `[I; 0]`.
pub fn gen_w(setup: Setup, p: usize, q: usize) -> Result<Array2<f64>> {
    let need = match setup {
        Setup::A | Setup::B => 2 * p,
        Setup::C => p,
    };
    if q < need {
        return Err(Error::DimensionMismatch(format!("setup {setup:?} needs q >= {need}, got {q}")));
    }
    let mut w = Array2::zeros((q, p));
    match setup {
        Setup::C => {
            for j in 0..p {
                w[[j, j]] = 1.0;
            }
        }
        Setup::A | Setup::B => {
            for j in 0..p {
                w[[j, j]] = 1.0;
                if j + 1 < p {
                    w[[p + j, j]] = 1.0;
                    w[[p + j, j + 1]] = 1.0;
                    if setup == Setup::B {
                        w[[j, j + 1]] = 1.0;
                    }
                }
            }
        }
    }
    Ok(w)
}

/// `p` values equally spaced over `[lo, hi]`, ascending.
pub fn sigma2_grid(p: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    match p {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..p).map(|j| lo + (hi - lo) * j as f64 / (p - 1) as f64).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationTruth {
    pub dag: WeightedDag,
    /// `W (I - U)^{-1}`.
    pub v: Array2<f64>,
    /// `(I - U) diag(sigma2)^{-1} (I - U^T)`.
    pub omega: Array2<f64>,
    pub ancestral: PairSet,
}

impl SimulationTruth {
    pub fn new(dag: WeightedDag) -> Result<Self> {
        let p = dag.p();
        let v = dag.reduced_form()?;
        let i_minus_u = Array2::<f64>::eye(p) - &dag.u;
        let mut scaled = i_minus_u.clone();
        for j in 0..p {
            let s = 1.0 / dag.sigma2[j];
            scaled.column_mut(j).mapv_inplace(|x| x * s);
        }
        let omega = scaled.dot(&i_minus_u.t());
        let ancestral = ancestral_closure(&dag.graph())?;
        Ok(SimulationTruth { dag, v, omega, ancestral })
    }

    /// True super-graph: ancestral closure of `U` and the support of `V`.
    pub fn supergraph(&self) -> Result<SuperGraph> {
        let (q, p) = self.v.dim();
        let mut interventions = PairSet::new(q, p);
        for ((l, j), val) in self.v.indexed_iter() {
            if *val != 0.0 {
                interventions.insert(l, j);
            }
        }
        let heights = topological_heights(&self.dag.graph())?;
        SuperGraph::new(p, q, self.ancestral.clone(), interventions, heights)
    }

    pub fn d_true(&self, h: &HypothesisSpec) -> Result<HypothesisClassification> {
        Ok(classify_hypothesis(h, &self.supergraph()?))
    }
}

/// Draws `U` for the design and builds the truth with its fixed `W` and
/// noise variances.
pub fn build_truth(design: &SimDesign, rng: &mut impl Rng) -> Result<SimulationTruth> {
    design.validate()?;
    let u = gen_u(design.graph, design.p, rng);
    let w = gen_w(design.setup, design.p, design.q)?;
    let dag = WeightedDag::new(u, w, sigma2_grid(design.p, design.sigma2_range))?;
    SimulationTruth::new(dag)
}

/// `X` rows with AR(1) correlation `x_corr^{|l - l'|}`, then `Y` built node by
/// node in topological order.
pub fn sample_data(dag: &WeightedDag, n: usize, x_corr: f64, rng: &mut impl Rng) -> Result<(Array2<f64>, Array2<f64>)> {
    let (q, p) = (dag.q(), dag.p());
    let innovation = (1.0 - x_corr * x_corr).sqrt();
    let mut x = Array2::zeros((n, q));
    for i in 0..n {
        for l in 0..q {
            let z: f64 = StandardNormal.sample(rng);
            x[[i, l]] = if l == 0 { z } else { x_corr * x[[i, l - 1]] + innovation * z };
        }
    }
    let mut y = x.dot(&dag.w);
    for i in 0..n {
        for j in 0..p {
            let z: f64 = StandardNormal.sample(rng);
            y[[i, j]] += dag.sigma2[j].sqrt() * z;
        }
    }
    for j in topological_order(&dag.graph())? {
        for k in 0..p {
            let ukj = dag.u[[k, j]];
            if ukj != 0.0 {
                let parent = y.column(k).to_owned() * ukj;
                let mut col = y.column_mut(j);
                col += &parent;
            }
        }
    }
    Ok((x, y))
}

/// Number of positions where exactly one of the two matrices is nonzero.
pub fn shd(u_hat: ArrayView2<'_, f64>, u_true: ArrayView2<'_, f64>) -> Result<usize> {
    if u_hat.dim() != u_true.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} versus {:?}",
            u_hat.dim(),
            u_true.dim()
        )));
    }
    Ok(u_hat
        .iter()
        .zip(u_true.iter())
        .filter(|(a, b)| (**a != 0.0) != (**b != 0.0))
        .count())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    /// Learned super-graph, perturbation p-value.
    DpLr,
    /// Learned super-graph, chi-square p-value.
    Lr,
    /// True super-graph, chi-square p-value.
    Olr,
}

impl TestMethod {
    pub fn label(self) -> &'static str {
        match self {
            TestMethod::DpLr => "DP-LR",
            TestMethod::Lr => "LR",
            TestMethod::Olr => "OLR",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub design: SimDesign,
    /// 1-based hypothesized edges.
    pub hypothesis: Vec<[usize; 2]>,
    pub mode: TestMode,
    /// Signal values injected under the alternative; `0.0` is the null.
    pub signals: Vec<f64>,
    pub reps: usize,
    pub alpha: f64,
    pub methods: Vec<TestMethod>,
    #[serde(default)]
    pub dp: DpConfig,
    #[serde(default)]
    pub grid: TuningGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub method: String,
    pub signal: f64,
    pub reps: usize,
    pub rejections: usize,
    pub failures: usize,
    /// Rejections over successful replications.
    pub rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExperimentTable {
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentTable {
    pub fn rate(&self, method: TestMethod, signal: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method.label() && r.signal == signal)
            .map(|r| r.rate)
    }
}

/// Random stream `rep` under a master seed.
pub fn stream_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// Truth for one replication: a fresh `U` with the hypothesized entries set
/// to `signal` (pathways) or the first one set to `signal` and the rest to
/// zero (edge tests).
pub fn injected_truth(spec: &ExperimentSpec, h: &HypothesisSpec, signal: f64, rng: &mut impl Rng) -> Result<SimulationTruth> {
    let base = build_truth(&spec.design, rng)?;
    let mut u = base.dag.u.clone();
    for (i, &(k, j)) in h.edges().iter().enumerate() {
        let on = spec.mode == TestMode::PathwayTest || i == 0;
        u[[k, j]] = if on { signal } else { 0.0 };
    }
    let dag = WeightedDag::new(u, base.dag.w.clone(), base.dag.sigma2.clone())?;
    SimulationTruth::new(dag)
}

/// Rejection rates per method and signal level. Replication `r` uses the
/// same random stream at every signal level. Failed replications are
/// counted, never fatal.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentTable> {
    spec.design.validate()?;
    let h = HypothesisSpec::from_one_based(&spec.hypothesis, spec.mode)?;
    h.check_bounds(spec.design.p)?;
    if spec.reps == 0 || spec.signals.is_empty() || spec.methods.is_empty() {
        return Err(Error::InvalidInput("reps, signals and methods must be nonempty".into()));
    }
    let methods: Vec<TestMethod> = {
        let mut m = spec.methods.clone();
        m.dedup();
        m
    };
    let mut table = ExperimentTable::default();
    for &signal in &spec.signals {
        let outcomes: Vec<Vec<Option<bool>>> = (0..spec.reps)
            .into_par_iter()
            .map(|rep| one_replication(spec, &h, &methods, signal, rep as u64))
            .collect();
        for (mi, method) in methods.iter().enumerate() {
            let failures = outcomes.iter().filter(|o| o[mi].is_none()).count();
            let rejections = outcomes.iter().filter(|o| o[mi] == Some(true)).count();
            let ok = spec.reps - failures;
            table.rows.push(ExperimentRow {
                method: method.label().to_string(),
                signal,
                reps: spec.reps,
                rejections,
                failures,
                rate: if ok == 0 { f64::NAN } else { rejections as f64 / ok as f64 },
            });
        }
    }
    Ok(table)
}

fn one_replication(
    spec: &ExperimentSpec,
    h: &HypothesisSpec,
    methods: &[TestMethod],
    signal: f64,
    rep: u64,
) -> Vec<Option<bool>> {
    let mut rng = stream_rng(spec.design.seed, rep);
    let data = injected_truth(spec, h, signal, &mut rng)
        .and_then(|truth| sample_data(&truth.dag, spec.design.n, spec.design.x_corr, &mut rng).map(|d| (truth, d)));
    let (truth, (x, y)) = match data {
        Ok(v) => v,
        Err(e) => {
            log::debug!("replication {rep}: data generation failed: {e}");
            return vec![None; methods.len()];
        }
    };
    let dp = DpConfig {
        seed: spec.dp.seed.wrapping_add(rep),
        threads: None,
        ..spec.dp
    };
    let wants_dp = methods.contains(&TestMethod::DpLr);
    let wants_lr = methods.contains(&TestMethod::Lr);
    let learned = if wants_dp || wants_lr {
        let method = match (wants_dp, wants_lr) {
            (true, true) => PValueMethod::Both,
            (true, false) => PValueMethod::Dp,
            _ => PValueMethod::Asymptotic,
        };
        let opts = TestOptions {
            structure: StructureSource::Learn {
                grid: spec.grid.clone(),
                peel: PeelOptions::default(),
            },
            dp,
            method,
            normal_approximation: false,
        };
        inference::run_test(x.view(), y.view(), h, &opts)
            .map_err(|e| log::debug!("replication {rep}: learned test failed: {e}"))
            .ok()
    } else {
        None
    };
    let oracle = if methods.contains(&TestMethod::Olr) {
        truth
            .supergraph()
            .and_then(|s| {
                let opts = TestOptions {
                    structure: StructureSource::Oracle(s),
                    dp,
                    method: PValueMethod::Asymptotic,
                    normal_approximation: false,
                };
                inference::run_test(x.view(), y.view(), h, &opts)
            })
            .map_err(|e| log::debug!("replication {rep}: oracle test failed: {e}"))
            .ok()
    } else {
        None
    };
    methods
        .iter()
        .map(|m| match m {
            TestMethod::DpLr => learned.as_ref().and_then(|r| r.dp_pvalue).map(|p| p <= spec.alpha),
            TestMethod::Lr => learned.as_ref().and_then(|r| r.asymptotic_pvalue).map(|p| p <= spec.alpha),
            TestMethod::Olr => oracle.as_ref().map(|r| r.pvalue <= spec.alpha),
        })
        .collect()
}

/// Structure recovery: learn, refit with BIC, and score against the true
/// `U`. `None` marks a failed replication.
pub fn shd_experiment(design: &SimDesign, reps: usize, grid: &TuningGrid) -> Result<Vec<Option<usize>>> {
    design.validate()?;
    let out = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream_rng(design.seed, rep as u64);
            let truth = build_truth(design, &mut rng).ok()?;
            let (x, y) = sample_data(&truth.dag, design.n, design.x_corr, &mut rng).ok()?;
            let tuning = Tuning::Grid(grid.clone());
            let fit = learn_structure(x.view(), y.view(), &tuning, None, PeelOptions::default())
                .map_err(|e| log::debug!("replication {rep}: {e}"))
                .ok()?;
            let (dag, _) = refit_dag(x.view(), y.view(), &fit.supergraph, &tuning).ok()?;
            shd(dag.u.view(), truth.dag.u.view()).ok()
        })
        .collect();
    Ok(out)
}

/// One-sample Kolmogorov-Smirnov statistic `sup |F_n - F|`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs: Vec<f64> = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Asymptotic p-value of the KS statistic `d` at sample size `n`, with the
/// Stephens small-sample correction.
pub fn kolmogorov_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
