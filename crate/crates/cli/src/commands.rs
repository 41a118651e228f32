use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use peelnet::graph::HypothesisSpec;
use peelnet::inference::run_test;
use peelnet::io::{emit_json, parse_dataset, read_json, to_json, write_matrix_file, write_table_file};
use peelnet::peeling::PeelTrace;
use peelnet::simulate::{build_truth, run_experiment, sample_data, stream_rng, ExperimentSpec, GraphKind, Setup, SimDesign};
use peelnet::tlp::TlpConfig;
use peelnet::{
    learn_structure, refit_dag, DpConfig, DpTestReport, Error, PValueMethod, PeelOptions, StructureSource, SuperGraph,
    TestMode, TestOptions, Tuning, TuningGrid, WeightedDag,
};

use crate::{
    Command, DataArgs, EvalArgs, ExperimentArgs, GraphArg, GridArgs, LearnArgs, MethodArg, SetupArg, SimulateArgs,
    TestArgs,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Learn(a) => learn(a),
        Command::TestEdge(a) => test(a, TestMode::EdgeTest),
        Command::TestPath(a) => test(a, TestMode::PathwayTest),
        Command::Eval(a) => eval(a),
        Command::Experiment(a) => experiment(a),
    }
}

/// A weighted edge between 1-based node indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedEdge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Directed edges among `Y` plus, optionally, intervention edges `X -> Y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeList {
    pub p: usize,
    #[serde(default)]
    pub q: usize,
    pub edges: Vec<WeightedEdge>,
    #[serde(default)]
    pub interventions: Vec<WeightedEdge>,
    #[serde(default)]
    pub sigma2: Vec<f64>,
}

impl EdgeList {
    fn from_dag(dag: &WeightedDag) -> Self {
        EdgeList {
            p: dag.p(),
            q: dag.q(),
            edges: nonzero_entries(&dag.u),
            interventions: nonzero_entries(&dag.w),
            sigma2: dag.sigma2.clone(),
        }
    }

    fn support(&self) -> CliResult<BTreeSet<(usize, usize)>> {
        let mut out = BTreeSet::new();
        for e in &self.edges {
            if e.from == 0 || e.to == 0 || e.from > self.p || e.to > self.p {
                return Err(Error::InvalidInput(format!("edge ({}, {}) outside 1..={}", e.from, e.to, self.p)).into());
            }
            if e.weight != 0.0 {
                out.insert((e.from, e.to));
            }
        }
        Ok(out)
    }
}

fn nonzero_entries(m: &Array2<f64>) -> Vec<WeightedEdge> {
    m.indexed_iter()
        .filter(|(_, v)| **v != 0.0)
        .map(|((a, b), v)| WeightedEdge {
            from: a + 1,
            to: b + 1,
            weight: *v,
        })
        .collect()
}

#[derive(Serialize)]
struct TruthFile<'a> {
    design: &'a SimDesign,
    dag: &'a WeightedDag,
    reduced_form: &'a Array2<f64>,
    supergraph: &'a SuperGraph,
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let design = SimDesign {
        p: a.p,
        q: a.q,
        n: a.n,
        graph: match a.graph {
            GraphArg::Random => GraphKind::Random,
            GraphArg::Hub => GraphKind::Hub,
        },
        setup: match a.setup {
            SetupArg::A => Setup::A,
            SetupArg::B => Setup::B,
            SetupArg::C => Setup::C,
        },
        sigma2_range: (a.sigma2_min, a.sigma2_max),
        x_corr: a.x_corr,
        seed: a.seed,
    };
    let mut rng = stream_rng(design.seed, 0);
    let truth = build_truth(&design, &mut rng)?;
    let (x, y) = sample_data(&truth.dag, design.n, design.x_corr, &mut rng)?;
    create_dir(&a.out_dir)?;
    write_matrix_file(&a.out_dir.join("x.csv"), x.view(), "X")?;
    write_matrix_file(&a.out_dir.join("y.csv"), y.view(), "Y")?;
    let s = truth.supergraph()?;
    emit_json(
        &TruthFile {
            design: &design,
            dag: &truth.dag,
            reduced_form: &truth.v,
            supergraph: &s,
        },
        &a.out_dir.join("truth.json"),
    )?;
    emit_json(&s, &a.out_dir.join("supergraph.json"))?;
    emit_json(&EdgeList::from_dag(&truth.dag), &a.out_dir.join("edges.json"))?;
    println!(
        "simulated n={} p={} q={}: {} directed edges, {} ancestral pairs",
        design.n,
        design.p,
        design.q,
        truth.dag.u.iter().filter(|v| **v != 0.0).count(),
        truth.ancestral.len()
    );
    Ok(())
}

fn grid_of(g: &GridArgs) -> CliResult<(TuningGrid, PeelOptions)> {
    let grid = TuningGrid {
        taus: g.taus.clone(),
        gammas: g.gammas.clone(),
        gamma_count: g.gamma_count,
        kappa_max: g.kappa_max,
    };
    grid.validate()?;
    let peel = PeelOptions {
        strict_instruments: g.strict_instruments,
        adjacent_layers_only: g.adjacent_layers_only,
    };
    Ok((grid, peel))
}

fn load(d: &DataArgs) -> CliResult<peelnet::io::Dataset> {
    Ok(parse_dataset(&d.y, &d.x, d.headers)?)
}

#[derive(Serialize)]
struct TraceFile<'a> {
    trace: &'a PeelTrace,
    configs: &'a [TlpConfig],
}

fn learn(a: LearnArgs) -> CliResult<()> {
    let (grid, peel) = grid_of(&a.grid)?;
    let data = load(&a.data)?;
    let tuning = Tuning::Grid(grid);
    let fit = learn_structure(data.x.view(), data.y.view(), &tuning, None, peel)?;
    create_dir(&a.out_dir)?;
    emit_json(&fit.supergraph, &a.out_dir.join("supergraph.json"))?;
    emit_json(
        &TraceFile {
            trace: &fit.trace,
            configs: &fit.configs,
        },
        &a.out_dir.join("trace.json"),
    )?;
    if a.dump_v {
        write_matrix_file(&a.out_dir.join("v_hat.csv"), fit.estimate.v.view(), "Y")?;
    }
    let s = &fit.supergraph;
    println!(
        "learned {} ancestral pairs and {} intervention pairs over {} peeling rounds",
        s.ancestral().len(),
        s.interventions().len(),
        fit.trace.rounds.len()
    );
    if a.refit {
        let (dag, _) = refit_dag(data.x.view(), data.y.view(), s, &tuning)?;
        write_matrix_file(&a.out_dir.join("u_hat.csv"), dag.u.view(), "Y")?;
        write_matrix_file(&a.out_dir.join("w_hat.csv"), dag.w.view(), "Y")?;
        let edges = EdgeList::from_dag(&dag);
        emit_json(&edges, &a.out_dir.join("edges.json"))?;
        println!("refit: {} directed edges", edges.edges.len());
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum HypothesisFile {
    Pairs(Vec<[usize; 2]>),
    Object { edges: Vec<[usize; 2]> },
}

fn test(a: TestArgs, mode: TestMode) -> CliResult<()> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(CliError::Usage("--alpha must lie in (0, 1)".into()));
    }
    let (grid, peel) = grid_of(&a.grid)?;
    let pairs = match read_json::<HypothesisFile>(&a.hypothesis)? {
        HypothesisFile::Pairs(p) | HypothesisFile::Object { edges: p } => p,
    };
    let h = HypothesisSpec::from_one_based(&pairs, mode)?;
    let data = load(&a.data)?;
    let structure = match &a.oracle_supergraph {
        Some(path) => StructureSource::Oracle(read_json::<SuperGraph>(path)?),
        None => StructureSource::Learn { grid, peel },
    };
    let opts = TestOptions {
        structure,
        dp: DpConfig {
            replicates: a.replicates,
            seed: a.seed,
            threads: None,
            warm_start: a.warm_start,
        },
        method: match a.method {
            MethodArg::Dp => PValueMethod::Dp,
            MethodArg::Asymptotic => PValueMethod::Asymptotic,
            MethodArg::Both => PValueMethod::Both,
        },
        normal_approximation: a.normal_approximation,
    };
    let report = run_test(data.x.view(), data.y.view(), &h, &opts)?;
    let summary = summarize(&report, a.alpha);
    match &a.out {
        Some(path) => {
            emit_json(&report, path)?;
            println!("{summary}");
        }
        None => {
            print!("{}", to_json(&report)?);
            eprintln!("{summary}");
        }
    }
    Ok(())
}

fn fmt_p(p: Option<f64>) -> String {
    p.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn summarize(r: &DpTestReport, alpha: f64) -> String {
    let kind = match r.mode {
        TestMode::EdgeTest => "edge test",
        TestMode::PathwayTest => "pathway test",
    };
    let edges: Vec<String> = r.hypothesis.iter().map(|[k, j]| format!("{k}->{j}")).collect();
    let mut out = format!("{kind} of {{{}}}: p-value {:.4}", edges.join(", "), r.pvalue);
    if let Some(reason) = &r.degeneracy_reason {
        out.push_str(&format!(" ({reason})"));
    } else {
        out.push_str(&format!(
            " (perturbation {}, chi-square {})",
            fmt_p(r.dp_pvalue),
            fmt_p(r.asymptotic_pvalue)
        ));
        if r.replicates_run > 0 {
            out.push_str(&format!(", {}/{} replicates contained", r.n_contained, r.replicates_run));
        }
    }
    let verdict = if r.rejects(alpha) { "reject" } else { "do not reject" };
    out.push_str(&format!("; {verdict} at level {alpha}"));
    out
}

#[derive(Serialize)]
struct EvalReport {
    p: usize,
    shd: usize,
    missing: Vec<[usize; 2]>,
    extra: Vec<[usize; 2]>,
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let est: EdgeList = read_json(&a.estimate)?;
    let truth: EdgeList = read_json(&a.truth)?;
    if est.p != truth.p {
        return Err(Error::DimensionMismatch(format!("estimate has p = {}, truth has p = {}", est.p, truth.p)).into());
    }
    let (se, st) = (est.support()?, truth.support()?);
    let report = EvalReport {
        p: est.p,
        shd: se.symmetric_difference(&st).count(),
        missing: st.difference(&se).map(|&(k, j)| [k, j]).collect(),
        extra: se.difference(&st).map(|&(k, j)| [k, j]).collect(),
    };
    match &a.out {
        Some(path) => {
            emit_json(&report, path)?;
            println!("SHD {} ({} missing, {} extra)", report.shd, report.missing.len(), report.extra.len());
        }
        None => print!("{}", to_json(&report)?),
    }
    Ok(())
}

fn experiment(a: ExperimentArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.design).map_err(|e| Error::Io(format!("{}: {e}", a.design.display())))?;
    let is_toml = a.design.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let spec: ExperimentSpec = if is_toml {
        toml::from_str(&text).map_err(|e| Error::Parse {
            line: 0,
            column: 0,
            message: e.to_string(),
        })?
    } else {
        serde_json::from_str(&text).map_err(Error::from)?
    };
    let table = run_experiment(&spec)?;
    write_table_file(&a.out, &table.rows)?;
    for row in &table.rows {
        println!(
            "{:>6} signal {:<5} rate {:.3} ({} of {} rejected, {} failed)",
            row.method,
            row.signal,
            row.rate,
            row.rejections,
            row.reps - row.failures,
            row.failures
        );
    }
    Ok(())
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())).into())
}
