//! Directed graphs over primary variables and the combinatorial procedures
//! the rest of the crate builds on: cycle detection, ancestral closure,
//! topological heights and hypothesis classification.
//!
//! Indices are 0-based in memory. Every serialized form (JSON edge lists,
//! super-graph files) is 1-based; conversion happens in the serde impls only.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Dense set of ordered pairs `(row, col)` with O(1) membership.
///
/// Iteration is row-major, which gives every serialized edge list a stable
/// order.
#[derive(Clone, PartialEq, Eq)]
pub struct PairSet {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl PairSet {
    pub fn new(rows: usize, cols: usize) -> Self {
        PairSet {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_pairs<I>(rows: usize, cols: usize, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut set = PairSet::new(rows, cols);
        for (a, b) in pairs {
            if a >= rows || b >= cols {
                return Err(Error::InvalidInput(format!(
                    "pair ({}, {}) out of bounds for {}x{}",
                    a + 1,
                    b + 1,
                    rows,
                    cols
                )));
            }
            set.insert(a, b);
        }
        Ok(set)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn contains(&self, a: usize, b: usize) -> bool {
        a < self.rows && b < self.cols && self.bits[a * self.cols + b]
    }

    #[inline]
    pub fn insert(&mut self, a: usize, b: usize) -> bool {
        let slot = &mut self.bits[a * self.cols + b];
        let fresh = !*slot;
        *slot = true;
        fresh
    }

    pub fn remove(&mut self, a: usize, b: usize) -> bool {
        let slot = &mut self.bits[a * self.cols + b];
        let was = *slot;
        *slot = false;
        was
    }

    pub fn len(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cols = self.cols;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / cols, i % cols))
    }

    /// Rows `a` with `(a, col)` in the set.
    pub fn in_column(&self, col: usize) -> Vec<usize> {
        (0..self.rows).filter(|&a| self.contains(a, col)).collect()
    }

    /// Columns `b` with `(row, b)` in the set.
    pub fn in_row(&self, row: usize) -> Vec<usize> {
        (0..self.cols).filter(|&b| self.contains(row, b)).collect()
    }

    pub fn is_superset(&self, other: &PairSet) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }

    /// 1-based `[a, b]` pairs in row-major order.
    pub fn to_one_based(&self) -> Vec<[usize; 2]> {
        self.iter().map(|(a, b)| [a + 1, b + 1]).collect()
    }

    pub fn from_one_based(rows: usize, cols: usize, pairs: &[[usize; 2]]) -> Result<Self> {
        let mut zero = Vec::with_capacity(pairs.len());
        for &[a, b] in pairs {
            if a == 0 || b == 0 {
                return Err(Error::InvalidInput(format!(
                    "pair [{a}, {b}] is not 1-based"
                )));
            }
            zero.push((a - 1, b - 1));
        }
        PairSet::from_pairs(rows, cols, zero)
    }
}

impl std::fmt::Debug for PairSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.to_one_based()).finish()
    }
}

/// Directed graph on `p` primary nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectedGraph {
    p: usize,
    edges: PairSet,
}

impl DirectedGraph {
    pub fn empty(p: usize) -> Self {
        DirectedGraph {
            p,
            edges: PairSet::new(p, p),
        }
    }

    /// Builds a graph from 0-based `(from, to)` pairs. Self-loops are rejected.
    pub fn from_edges<I>(p: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut g = DirectedGraph::empty(p);
        for (k, j) in edges {
            g.add_edge(k, j)?;
        }
        Ok(g)
    }

    pub fn from_pair_set(set: PairSet) -> Result<Self> {
        if set.rows() != set.cols() {
            return Err(Error::DimensionMismatch(format!(
                "edge set must be square, got {}x{}",
                set.rows(),
                set.cols()
            )));
        }
        let p = set.rows();
        Self::from_edges(p, set.iter())
    }

    pub fn add_edge(&mut self, k: usize, j: usize) -> Result<()> {
        if k >= self.p || j >= self.p {
            return Err(Error::InvalidInput(format!(
                "edge ({}, {}) out of bounds for p = {}",
                k + 1,
                j + 1,
                self.p
            )));
        }
        if k == j {
            return Err(Error::InvalidInput(format!("self-loop on node {}", k + 1)));
        }
        self.edges.insert(k, j);
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn edges(&self) -> &PairSet {
        &self.edges
    }

    pub fn has_edge(&self, k: usize, j: usize) -> bool {
        self.edges.contains(k, j)
    }

    fn children(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.p];
        for (k, j) in self.edges.iter() {
            out[k].push(j);
        }
        out
    }
}

/// Iterative three-colour DFS; linear in nodes plus edges.
pub fn has_cycle(g: &DirectedGraph) -> bool {
    const WHITE: u8 = 0;
    const GREY: u8 = 1;
    const BLACK: u8 = 2;

    let children = g.children();
    let mut colour = vec![WHITE; g.p];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for root in 0..g.p {
        if colour[root] != WHITE {
            continue;
        }
        colour[root] = GREY;
        stack.push((root, 0));
        while let Some(top) = stack.last_mut() {
            let (node, next) = *top;
            if next < children[node].len() {
                top.1 += 1;
                let child = children[node][next];
                match colour[child] {
                    GREY => return true,
                    WHITE => {
                        colour[child] = GREY;
                        stack.push((child, 0));
                    }
                    _ => {}
                }
            } else {
                colour[node] = BLACK;
                stack.pop();
            }
        }
    }
    false
}

/// All pairs `(k, j)` joined by a directed path `k -> ... -> j`.
pub fn ancestral_closure(g: &DirectedGraph) -> Result<PairSet> {
    if has_cycle(g) {
        return Err(Error::CyclicInput);
    }
    let children = g.children();
    let mut closure = PairSet::new(g.p, g.p);
    let mut seen = vec![false; g.p];
    let mut stack = Vec::new();
    for source in 0..g.p {
        seen.iter_mut().for_each(|s| *s = false);
        stack.clear();
        stack.extend(children[source].iter().copied());
        while let Some(node) = stack.pop() {
            if seen[node] {
                continue;
            }
            seen[node] = true;
            closure.insert(source, node);
            stack.extend(children[node].iter().copied().filter(|&c| !seen[c]));
        }
    }
    Ok(closure)
}

/// Topological order (parents before children), or `CyclicInput`.
pub fn topological_order(g: &DirectedGraph) -> Result<Vec<usize>> {
    let children = g.children();
    let mut indegree = vec![0usize; g.p];
    for (_, j) in g.edges.iter() {
        indegree[j] += 1;
    }
    let mut ready: Vec<usize> = (0..g.p).rev().filter(|&j| indegree[j] == 0).collect();
    let mut order = Vec::with_capacity(g.p);
    while let Some(node) = ready.pop() {
        order.push(node);
        for &c in children[node].iter().rev() {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(c);
            }
        }
    }
    if order.len() != g.p {
        return Err(Error::CyclicInput);
    }
    Ok(order)
}

/// Length of the longest directed path from each node to a leaf.
pub fn topological_heights(g: &DirectedGraph) -> Result<Vec<usize>> {
    let order = topological_order(g)?;
    let children = g.children();
    let mut heights = vec![0usize; g.p];
    for &node in order.iter().rev() {
        heights[node] = children[node]
            .iter()
            .map(|&c| heights[c] + 1)
            .max()
            .unwrap_or(0);
    }
    Ok(heights)
}

/// Ancestral relations plus candidate intervention relations, with heights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperGraph {
    p: usize,
    q: usize,
    ancestral: PairSet,
    interventions: PairSet,
    heights: Vec<usize>,
}

impl SuperGraph {
    /// Validates the invariants: `ancestral` is acyclic and transitively
    /// closed, and heights strictly decrease along every ancestral pair.
    pub fn new(
        p: usize,
        q: usize,
        ancestral: PairSet,
        interventions: PairSet,
        heights: Vec<usize>,
    ) -> Result<Self> {
        if ancestral.rows() != p || ancestral.cols() != p {
            return Err(Error::DimensionMismatch("ancestral set must be p x p".into()));
        }
        if interventions.rows() != q || interventions.cols() != p {
            return Err(Error::DimensionMismatch(
                "intervention set must be q x p".into(),
            ));
        }
        if heights.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "expected {p} heights, got {}",
                heights.len()
            )));
        }
        let g = DirectedGraph::from_pair_set(ancestral.clone())?;
        let closure = ancestral_closure(&g)?;
        if closure != ancestral {
            return Err(Error::InvalidInput(
                "ancestral set is not transitively closed".into(),
            ));
        }
        if heights.iter().any(|&h| p > 0 && h >= p) {
            return Err(Error::InvalidInput("height out of range [0, p-1]".into()));
        }
        if ancestral.iter().any(|(k, j)| heights[k] <= heights[j]) {
            return Err(Error::InvalidInput(
                "heights must decrease along ancestral pairs".into(),
            ));
        }
        Ok(SuperGraph {
            p,
            q,
            ancestral,
            interventions,
            heights,
        })
    }

    /// Closes `edges` and derives heights from it.
    pub fn from_edges(p: usize, q: usize, edges: &DirectedGraph, interventions: PairSet) -> Result<Self> {
        let ancestral = ancestral_closure(edges)?;
        let heights = topological_heights(edges)?;
        SuperGraph::new(p, q, ancestral, interventions, heights)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn ancestral(&self) -> &PairSet {
        &self.ancestral
    }

    pub fn interventions(&self) -> &PairSet {
        &self.interventions
    }

    pub fn heights(&self) -> &[usize] {
        &self.heights
    }

    /// `an_S(j)`: 0-based ancestors of node `j`.
    pub fn ancestors_of(&self, j: usize) -> Vec<usize> {
        self.ancestral.in_column(j)
    }

    /// `in_S(j)`: 0-based candidate interventions on node `j`.
    pub fn interventions_of(&self, j: usize) -> Vec<usize> {
        self.interventions.in_column(j)
    }

    /// True iff both components of `self` contain those of `other`.
    pub fn contains(&self, other: &SuperGraph) -> Result<bool> {
        if self.p != other.p || self.q != other.q {
            return Err(Error::DimensionMismatch(format!(
                "super-graphs of size (p={}, q={}) and (p={}, q={})",
                self.p, self.q, other.p, other.q
            )));
        }
        Ok(self.ancestral.is_superset(&other.ancestral)
            && self.interventions.is_superset(&other.interventions))
    }
}

#[derive(Serialize, Deserialize)]
struct SuperGraphJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schema_version: Option<u32>,
    p: usize,
    q: usize,
    ancestral: Vec<[usize; 2]>,
    interventions: Vec<[usize; 2]>,
    heights: Vec<usize>,
}

impl Serialize for SuperGraph {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SuperGraphJson {
            schema_version: None,
            p: self.p,
            q: self.q,
            ancestral: self.ancestral.to_one_based(),
            interventions: self.interventions.to_one_based(),
            heights: self.heights.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SuperGraph {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = SuperGraphJson::deserialize(d)?;
        let ancestral =
            PairSet::from_one_based(raw.p, raw.p, &raw.ancestral).map_err(D::Error::custom)?;
        let interventions = PairSet::from_one_based(raw.q, raw.p, &raw.interventions)
            .map_err(D::Error::custom)?;
        SuperGraph::new(raw.p, raw.q, ancestral, interventions, raw.heights)
            .map_err(D::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMode {
    EdgeTest,
    PathwayTest,
}

/// Hypothesized edge set with set semantics: duplicates collapse on
/// construction, first occurrence wins the position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HypothesisSpec {
    edges: Vec<(usize, usize)>,
    mode: TestMode,
}

impl HypothesisSpec {
    pub fn new<I>(edges: I, mode: TestMode) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for e in edges {
            if e.0 == e.1 {
                return Err(Error::InvalidInput(format!(
                    "hypothesized self-loop on node {}",
                    e.0 + 1
                )));
            }
            if !out.contains(&e) {
                out.push(e);
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidInput("hypothesis edge set is empty".into()));
        }
        Ok(HypothesisSpec { edges: out, mode })
    }

    pub fn from_one_based(pairs: &[[usize; 2]], mode: TestMode) -> Result<Self> {
        let mut zero = Vec::with_capacity(pairs.len());
        for &[k, j] in pairs {
            if k == 0 || j == 0 {
                return Err(Error::InvalidInput(format!(
                    "hypothesis pair [{k}, {j}] is not 1-based"
                )));
            }
            zero.push((k - 1, j - 1));
        }
        HypothesisSpec::new(zero, mode)
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn mode(&self) -> TestMode {
        self.mode
    }

    pub fn with_mode(&self, mode: TestMode) -> Self {
        HypothesisSpec {
            edges: self.edges.clone(),
            mode,
        }
    }

    pub fn check_bounds(&self, p: usize) -> Result<()> {
        match self.edges.iter().find(|&&(k, j)| k >= p || j >= p) {
            Some(&(k, j)) => Err(Error::InvalidInput(format!(
                "hypothesized edge ({}, {}) out of bounds for p = {p}",
                k + 1,
                j + 1
            ))),
            None => Ok(()),
        }
    }
}

/// Nondegenerate subset of a hypothesis and its regularity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HypothesisClassification {
    pub nondegenerate: Vec<(usize, usize)>,
    pub is_degenerate: bool,
    pub is_regular: bool,
    /// `d(j)` for every node, 0-based, ascending.
    pub per_node_d: Vec<Vec<usize>>,
}

impl HypothesisClassification {
    pub fn d_size(&self) -> usize {
        self.nondegenerate.len()
    }
}

#[derive(Serialize, Deserialize)]
struct ClassificationJson {
    nondegenerate: Vec<[usize; 2]>,
    is_degenerate: bool,
    is_regular: bool,
    per_node_d: Vec<Vec<usize>>,
}

impl Serialize for HypothesisClassification {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ClassificationJson {
            nondegenerate: self.nondegenerate.iter().map(|&(k, j)| [k + 1, j + 1]).collect(),
            is_degenerate: self.is_degenerate,
            is_regular: self.is_regular,
            per_node_d: self
                .per_node_d
                .iter()
                .map(|d| d.iter().map(|k| k + 1).collect())
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for HypothesisClassification {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = ClassificationJson::deserialize(d)?;
        let dec = |v: usize| v.checked_sub(1).ok_or_else(|| D::Error::custom("index is not 1-based"));
        let nondegenerate = raw
            .nondegenerate
            .iter()
            .map(|&[k, j]| Ok((dec(k)?, dec(j)?)))
            .collect::<std::result::Result<Vec<_>, D::Error>>()?;
        let per_node_d = raw
            .per_node_d
            .iter()
            .map(|d| d.iter().map(|&k| dec(k)).collect())
            .collect::<std::result::Result<Vec<Vec<_>>, D::Error>>()?;
        Ok(HypothesisClassification {
            nondegenerate,
            is_degenerate: raw.is_degenerate,
            is_regular: raw.is_regular,
            per_node_d,
        })
    }
}

/// Splits `h` against the ancestral relations of `s`: an edge `(k, j)` is
/// nondegenerate iff `(j, k)` is not ancestral, and the hypothesis is regular
/// iff the nondegenerate edges together with the ancestral set stay acyclic.
pub fn classify_hypothesis(h: &HypothesisSpec, s: &SuperGraph) -> HypothesisClassification {
    let nondegenerate: Vec<(usize, usize)> = h
        .edges()
        .iter()
        .copied()
        .filter(|&(k, j)| !s.ancestral().contains(j, k))
        .collect();
    let mut per_node_d = vec![Vec::new(); s.p()];
    for &(k, j) in &nondegenerate {
        per_node_d[j].push(k);
    }
    per_node_d.iter_mut().for_each(|d| d.sort_unstable());

    let mut union = s.ancestral().clone();
    for &(k, j) in &nondegenerate {
        union.insert(k, j);
    }
    let is_regular = match DirectedGraph::from_pair_set(union) {
        Ok(g) => !has_cycle(&g),
        Err(_) => false,
    };
    HypothesisClassification {
        is_degenerate: nondegenerate.is_empty(),
        nondegenerate,
        is_regular,
        per_node_d,
    }
}
