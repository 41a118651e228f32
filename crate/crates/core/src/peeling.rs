//! Layer-by-layer reconstruction of the super-graph from the reduced-form
//! coefficient matrix `V` (rows: interventions, columns: primary nodes).
//!
//! Each round finds the rows of smallest positive l0-norm in the submatrix of
//! unpeeled columns, pairs each with its largest entry, and peels those leaf
//! columns. A leaf `k` is an ancestor of an already-peeled node `j` when every
//! row paired with `k` in that round is nonzero at `j`. "Nonzero" always means
//! `|v_lj| > tau_j`.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::graph::{ancestral_closure, DirectedGraph, PairSet, SuperGraph};
use crate::tlp::{self, Design, TlpConfig, TuningGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct ReducedFormEstimate {
    /// `q x p` coefficient matrix.
    pub v: Array2<f64>,
    /// Per-column nonzero thresholds, length `p`.
    pub taus: Vec<f64>,
}

impl ReducedFormEstimate {
    pub fn new(v: Array2<f64>, taus: Vec<f64>) -> Result<Self> {
        if taus.len() != v.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} thresholds for {} columns",
                taus.len(),
                v.ncols()
            )));
        }
        if taus.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::InvalidInput("thresholds must be positive".into()));
        }
        Ok(ReducedFormEstimate { v, taus })
    }

    pub fn with_uniform_tau(v: Array2<f64>, tau: f64) -> Result<Self> {
        let p = v.ncols();
        ReducedFormEstimate::new(v, vec![tau; p])
    }

    #[inline]
    pub fn is_nonzero(&self, l: usize, j: usize) -> bool {
        self.v[[l, j]].abs() > self.taus[j]
    }

    pub fn q(&self) -> usize {
        self.v.nrows()
    }

    pub fn p(&self) -> usize {
        self.v.ncols()
    }

    /// Candidate intervention relations `{(l, j) : |v_lj| > tau_j}`.
    pub fn candidate_interventions(&self) -> PairSet {
        let mut set = PairSet::new(self.q(), self.p());
        for l in 0..self.q() {
            for j in 0..self.p() {
                if self.is_nonzero(l, j) {
                    set.insert(l, j);
                }
            }
        }
        set
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeelRound {
    pub height: usize,
    /// Instrument-leaf pairs `(l, j)`.
    pub pairs: Vec<(usize, usize)>,
    pub removed: Vec<usize>,
    /// Relations `(k, j)` found between this layer and the one just below.
    pub layer_edges: Vec<(usize, usize)>,
    /// Every ancestral relation found from this layer to any lower layer.
    pub links: Vec<(usize, usize)>,
}

#[derive(Serialize)]
struct PeelRoundJson {
    height: usize,
    pairs: Vec<[usize; 2]>,
    removed: Vec<usize>,
    layer_edges: Vec<[usize; 2]>,
    links: Vec<[usize; 2]>,
}

impl Serialize for PeelRound {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let pairs = |v: &[(usize, usize)]| v.iter().map(|&(a, b)| [a + 1, b + 1]).collect();
        PeelRoundJson {
            height: self.height,
            pairs: pairs(&self.pairs),
            removed: self.removed.iter().map(|j| j + 1).collect(),
            layer_edges: pairs(&self.layer_edges),
            links: pairs(&self.links),
        }
        .serialize(s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PeelTrace {
    pub rounds: Vec<PeelRound>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeelOptions {
    /// Require every round's minimal row l0-norm to be exactly 1, i.e. only
    /// true instruments of current leaves are used. Meant for exact inputs.
    #[serde(default)]
    pub strict_instruments: bool,
    /// Only look for relations into the layer directly below and rely on the
    /// closure for the rest.
    #[serde(default)]
    pub adjacent_layers_only: bool,
}

pub fn peel(est: &ReducedFormEstimate) -> Result<(SuperGraph, PeelTrace)> {
    peel_with(est, PeelOptions::default())
}

pub fn peel_with(est: &ReducedFormEstimate, opts: PeelOptions) -> Result<(SuperGraph, PeelTrace)> {
    let p = est.p();
    let q = est.q();
    let mut heights: Vec<Option<usize>> = vec![None; p];
    let mut links = DirectedGraph::empty(p);
    let mut trace = PeelTrace::default();
    let mut h = 0usize;

    while heights.iter().any(Option::is_none) {
        let active: Vec<usize> = (0..p).filter(|&j| heights[j].is_none()).collect();
        let norms: Vec<usize> = (0..q)
            .map(|l| active.iter().filter(|&&j| est.is_nonzero(l, j)).count())
            .collect();
        let min_norm = norms.iter().copied().filter(|&c| c > 0).min();
        let stalled = match min_norm {
            None => true,
            Some(m) => opts.strict_instruments && m != 1,
        };
        if stalled {
            return Err(Error::PeelStalled {
                height: h,
                remaining: active.len(),
                remaining_nodes: active.iter().map(|j| j + 1).collect(),
            });
        }
        let min_norm = min_norm.unwrap_or_default();

        let mut pairs = Vec::new();
        for l in (0..q).filter(|&l| norms[l] == min_norm) {
            let mut best: Option<usize> = None;
            for &j in &active {
                if !est.is_nonzero(l, j) {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(b) => est.v[[l, j]].abs() > est.v[[l, b]].abs(),
                };
                if better {
                    best = Some(j);
                }
            }
            if let Some(j) = best {
                pairs.push((l, j));
            }
        }
        let mut leaves: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
        leaves.sort_unstable();
        leaves.dedup();

        let mut layer_edges = Vec::new();
        let mut round_links = Vec::new();
        for &k in &leaves {
            let instruments: Vec<usize> = pairs
                .iter()
                .filter(|&&(_, j)| j == k)
                .map(|&(l, _)| l)
                .collect();
            for j in 0..p {
                let Some(hj) = heights[j] else { continue };
                let adjacent = hj + 1 == h;
                if opts.adjacent_layers_only && !adjacent {
                    continue;
                }
                if instruments.iter().all(|&l| est.is_nonzero(l, j)) {
                    links.add_edge(k, j)?;
                    round_links.push((k, j));
                    if adjacent {
                        layer_edges.push((k, j));
                    }
                }
            }
        }
        for &k in &leaves {
            heights[k] = Some(h);
        }
        trace.rounds.push(PeelRound {
            height: h,
            pairs,
            removed: leaves,
            layer_edges,
            links: round_links,
        });
        h += 1;
    }

    let ancestral = ancestral_closure(&links)?;
    let heights: Vec<usize> = heights.into_iter().map(Option::unwrap_or_default).collect();
    let sg = SuperGraph::new(p, q, ancestral, est.candidate_interventions(), heights)?;
    Ok((sg, trace))
}

/// How nodewise regressions are tuned.
#[derive(Clone, Debug, PartialEq)]
pub enum Tuning {
    /// BIC over the grid, independently per node.
    Grid(TuningGrid),
    /// One fixed configuration per node.
    Fixed(Vec<TlpConfig>),
}

/// Everything produced by the structure-learning pass.
#[derive(Clone, Debug)]
pub struct StructureFit {
    pub supergraph: SuperGraph,
    pub estimate: ReducedFormEstimate,
    pub trace: PeelTrace,
    /// Configuration used for every node (selected or supplied).
    pub configs: Vec<TlpConfig>,
    /// DC fixed points `tilde V`, `q x p`; reused as warm starts.
    pub tilde_v: Array2<f64>,
}

/// Nodewise l0-constrained regressions of every `Y_j` on `X` followed by
/// peeling. `warm` supplies per-node DC initializers (projected onto the
/// feasible set of the node's configuration).
pub fn learn_structure(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    tuning: &Tuning,
    warm: Option<ArrayView2<'_, f64>>,
    opts: PeelOptions,
) -> Result<StructureFit> {
    let design = Design::new(x);
    learn_structure_with_design(&design, y, tuning, warm, opts)
}

/// As [`learn_structure`] with a precomputed design (shared across replicates).
pub fn learn_structure_with_design(
    design: &Design<'_>,
    y: ArrayView2<'_, f64>,
    tuning: &Tuning,
    warm: Option<ArrayView2<'_, f64>>,
    opts: PeelOptions,
) -> Result<StructureFit> {
    let x = design.x();
    let (n, q) = x.dim();
    let p = y.ncols();
    if y.nrows() != n {
        return Err(Error::RowMismatch {
            y_rows: y.nrows(),
            x_rows: n,
        });
    }
    if let Some(w) = warm {
        if w.dim() != (q, p) {
            return Err(Error::DimensionMismatch("warm start must be q x p".into()));
        }
    }

    let per_node: Vec<Result<(TlpConfig, Vec<f64>, Vec<f64>)>> = match tuning {
        Tuning::Grid(grid) => {
            grid.validate()?;
            let gammas = grid.gammas_for(x, y);
            let kappas = grid.kappas_for(q, n);
            (0..p)
                .into_par_iter()
                .map(|j| {
                    let tuned = tlp::bic_tune(design, y.column(j), &grid.taus, &gammas, &kappas)?;
                    Ok((tuned.config, tuned.fit.tilde_v, tuned.fit.v_hat))
                })
                .collect()
        }
        Tuning::Fixed(configs) => {
            if configs.len() != p {
                return Err(Error::DimensionMismatch(format!(
                    "{} configurations for {p} nodes",
                    configs.len()
                )));
            }
            if configs.iter().map(|c| c.kappa).max().unwrap_or(0) >= n {
                return Err(Error::InvalidInput("sample size must exceed every kappa".into()));
            }
            (0..p)
                .into_par_iter()
                .map(|j| {
                    let cfg = configs[j];
                    let init = match warm {
                        Some(w) => tlp::feasible_init(&w.column(j).to_vec(), cfg.tau, cfg.kappa),
                        None => vec![0.0; q],
                    };
                    let fit = tlp::dc_constrained_fit(design, y.column(j), &cfg, &init)?;
                    Ok((cfg, fit.tilde_v, fit.v_hat))
                })
                .collect()
        }
    };

    let mut configs = Vec::with_capacity(p);
    let mut v = Array2::zeros((q, p));
    let mut tilde_v = Array2::zeros((q, p));
    for (j, res) in per_node.into_iter().enumerate() {
        let (cfg, tv, vh) = res?;
        for l in 0..q {
            v[[l, j]] = vh[l];
            tilde_v[[l, j]] = tv[l];
        }
        configs.push(cfg);
    }
    let taus = configs.iter().map(|c| c.tau).collect();
    let estimate = ReducedFormEstimate::new(v, taus)?;
    let (supergraph, trace) = peel_with(&estimate, opts)?;
    Ok(StructureFit {
        supergraph,
        estimate,
        trace,
        configs,
        tilde_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::topological_heights;
    use ndarray::array;

    fn one_based(set: &PairSet) -> Vec<[usize; 2]> {
        let mut v = set.to_one_based();
        v.sort();
        v
    }

    fn worked_example_estimate() -> Array2<f64> {
        array![
            [0.92, 0.48, 0.27, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.08, 0.0],
            [0.0, 1.03, 0.52, 0.21, 0.0],
            [0.0, 0.0, 0.0, 0.0, 1.06],
            [0.0, 0.0, 0.98, 0.55, 0.0],
        ]
    }

    #[test]
    fn worked_example_trace() {
        let est = ReducedFormEstimate::with_uniform_tau(worked_example_estimate(), 0.05).unwrap();
        let (sg, trace) = peel(&est).unwrap();
        assert_eq!(sg.heights(), &[3, 2, 1, 0, 0]);
        assert_eq!(
            one_based(sg.ancestral()),
            vec![[1, 2], [1, 3], [1, 4], [2, 3], [2, 4], [3, 4]]
        );
        let removed: Vec<Vec<usize>> = trace.rounds.iter().map(|r| r.removed.clone()).collect();
        assert_eq!(removed, vec![vec![3, 4], vec![2], vec![1], vec![0]]);
        assert_eq!(trace.rounds[0].pairs, vec![(1, 3), (3, 4)]);
        assert_eq!(trace.rounds[1].layer_edges, vec![(2, 3)]);
        assert_eq!(trace.rounds[2].layer_edges, vec![(1, 2)]);
        assert_eq!(trace.rounds[3].layer_edges, vec![(0, 1)]);
    }

    #[test]
    fn identity_gives_isolated_nodes() {
        let est = ReducedFormEstimate::with_uniform_tau(Array2::eye(4), 0.5).unwrap();
        let (sg, trace) = peel(&est).unwrap();
        assert!(sg.ancestral().is_empty());
        assert_eq!(sg.heights(), &[0, 0, 0, 0]);
        assert_eq!(one_based(sg.interventions()), vec![[1, 1], [2, 2], [3, 3], [4, 4]]);
        assert_eq!(trace.rounds.len(), 1);
    }

    #[test]
    fn unreachable_node_stalls() {
        let v = array![[1.0, 0.0], [0.0, 0.0]];
        let est = ReducedFormEstimate::with_uniform_tau(v, 0.1).unwrap();
        match peel(&est) {
            Err(Error::PeelStalled { remaining_nodes, .. }) => assert_eq!(remaining_nodes, vec![2]),
            other => panic!("expected a stall, got {other:?}"),
        }
    }

    #[test]
    fn strict_mode_rejects_pseudo_instruments() {
        // one valid instrument on the root, one two-target intervention
        let v = array![[1.0, 0.5], [0.8, 0.9]];
        let est = ReducedFormEstimate::with_uniform_tau(v, 0.1).unwrap();
        assert!(peel(&est).is_ok());
        let strict = PeelOptions {
            strict_instruments: true,
            ..Default::default()
        };
        assert!(matches!(peel_with(&est, strict), Err(Error::PeelStalled { .. })));
    }

    /// 1 -> 2, 2 -> 3 and a direct 1 -> 4 where node 4 sits two layers below
    /// node 1 with no unit-height chain to it.
    #[test]
    fn skip_layer_relation_needs_full_check() {
        // U: (1,2), (2,3), (1,4); heights: 1:2, 2:1, 3:0, 4:0
        let v = array![
            [1.0, 1.0, 1.0, 1.0],
            [0.0, 1.0, 1.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let est = ReducedFormEstimate::with_uniform_tau(v, 0.1).unwrap();
        let (sg, _) = peel(&est).unwrap();
        assert!(sg.ancestral().contains(0, 3));

        let literal = PeelOptions {
            adjacent_layers_only: true,
            ..Default::default()
        };
        let (sg_literal, _) = peel_with(&est, literal).unwrap();
        assert!(!sg_literal.ancestral().contains(0, 3));
        assert_eq!(sg_literal.heights(), sg.heights());
    }

    #[test]
    fn heights_match_layer_edge_graph() {
        let est = ReducedFormEstimate::with_uniform_tau(worked_example_estimate(), 0.05).unwrap();
        let (sg, trace) = peel(&est).unwrap();
        let edges: Vec<(usize, usize)> = trace.rounds.iter().flat_map(|r| r.layer_edges.clone()).collect();
        let g = DirectedGraph::from_edges(5, edges).unwrap();
        assert_eq!(topological_heights(&g).unwrap(), sg.heights());
    }

    #[test]
    fn trace_serializes_one_based() {
        let est = ReducedFormEstimate::with_uniform_tau(worked_example_estimate(), 0.05).unwrap();
        let (_, trace) = peel(&est).unwrap();
        let text = serde_json::to_string(&trace.rounds[0]).unwrap();
        assert!(text.contains(r#""pairs":[[2,4],[4,5]]"#), "{text}");
    }
}
