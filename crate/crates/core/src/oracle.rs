//! Exact small-cluster laws by exhaustive enumeration (nearest-neighbour,
//! `d ≤ 2`, at most six sites), used as ground truth for the estimators.
//!
//! Two independent routes are provided. [`exact_cluster_law`] enumerates
//! lattice animals containing the origin and, for each, the spanning
//! connected subsets of its internal bonds:
//!
//! `P(C(0) = A) = [Σ_B p^{|B|} (1−p)^{|I(A)|−|B|}] (1−p)^{|∂A|}`.
//!
//! [`exact_size_law_by_growth`] walks the full decision tree of breadth-first
//! growth instead, branching on every bond variable, and so also yields the
//! probability that the cluster exceeds the size budget.

use std::collections::{BTreeSet, HashSet, VecDeque};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{neighbours, LatticePoint, ModelSpec, Neighbourhood};

pub const MAX_DIMENSION: usize = 2;
pub const MAX_SITES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumerationDomain {
    pub dimension: usize,
    pub n_max: usize,
}

impl EnumerationDomain {
    pub fn new(dimension: usize, n_max: usize) -> Result<Self> {
        if dimension == 0 || dimension > MAX_DIMENSION {
            return Err(Error::DomainTooLarge(format!(
                "exact enumeration supports d <= {MAX_DIMENSION}, got {dimension}"
            )));
        }
        if n_max == 0 || n_max > MAX_SITES {
            return Err(Error::DomainTooLarge(format!(
                "exact enumeration supports 1 <= n_max <= {MAX_SITES}, got {n_max}"
            )));
        }
        Ok(Self { dimension, n_max })
    }

    fn model(&self, p: f64) -> Result<ModelSpec> {
        ModelSpec::new(self.dimension, Neighbourhood::NearestNeighbour, p)
    }
}

/// A connected site set containing the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Animal {
    /// Sorted lexicographically.
    pub sites: Vec<LatticePoint>,
    /// Nearest-neighbour pairs inside the animal, as indices into `sites`.
    pub internal_bonds: Vec<(usize, usize)>,
    /// Number of bonds with exactly one endpoint in the animal.
    pub perimeter: usize,
    /// `spanning[b]` = number of connected spanning subsets with `b` bonds.
    pub spanning: Vec<u64>,
}

impl Animal {
    pub fn size(&self) -> usize {
        self.sites.len()
    }

    pub fn contains(&self, x: &LatticePoint) -> bool {
        self.sites.binary_search(x).is_ok()
    }

    /// `P(C(0) = A)` at bond density `p`.
    pub fn probability(&self, p: f64) -> f64 {
        let internal = self.internal_bonds.len() as i32;
        let q = 1.0 - p;
        let inner: f64 = self
            .spanning
            .iter()
            .enumerate()
            .map(|(b, &count)| count as f64 * p.powi(b as i32) * q.powi(internal - b as i32))
            .sum();
        inner * q.powi(self.perimeter as i32)
    }

    /// `Σ_{x ∈ A} e^{ik·x}`.
    pub fn fourier_sum(&self, k: &[f64]) -> Complex64 {
        self.sites
            .iter()
            .map(|x| {
                let phase: f64 = x.coords().iter().zip(k).map(|(&c, &kk)| c as f64 * kk).sum();
                Complex64::new(phase.cos(), phase.sin())
            })
            .sum()
    }
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        true
    }
}

fn spanning_counts(n: usize, bonds: &[(usize, usize)]) -> Vec<u64> {
    let mut counts = vec![0u64; bonds.len() + 1];
    for mask in 0u32..(1u32 << bonds.len()) {
        let mut sets = DisjointSets::new(n);
        let mut merged = 0;
        for (i, &(a, b)) in bonds.iter().enumerate() {
            if mask & (1 << i) != 0 && sets.union(a, b) {
                merged += 1;
            }
        }
        if merged + 1 == n {
            counts[mask.count_ones() as usize] += 1;
        }
    }
    counts
}

/// All animals containing the origin with at most `n_max` sites.
pub fn enumerate_animals(dom: &EnumerationDomain) -> Result<Vec<Animal>> {
    let m = dom.model(0.5)?;
    let mut layer: BTreeSet<Vec<LatticePoint>> = BTreeSet::new();
    layer.insert(vec![LatticePoint::origin(dom.dimension)]);
    let mut all = Vec::new();
    for size in 1..=dom.n_max {
        let mut next = BTreeSet::new();
        for sites in &layer {
            let set: HashSet<&LatticePoint> = sites.iter().collect();
            let mut internal = Vec::new();
            let mut perimeter = 0;
            for (i, x) in sites.iter().enumerate() {
                for y in neighbours(&m, x)? {
                    match sites.binary_search(&y) {
                        Ok(j) if i < j => internal.push((i, j)),
                        Ok(_) => {}
                        Err(_) => perimeter += 1,
                    }
                }
            }
            if size < dom.n_max {
                for x in sites {
                    for y in neighbours(&m, x)? {
                        if !set.contains(&y) {
                            let mut grown = sites.clone();
                            grown.push(y);
                            grown.sort();
                            next.insert(grown);
                        }
                    }
                }
            }
            let spanning = spanning_counts(sites.len(), &internal);
            all.push(Animal {
                sites: sites.clone(),
                internal_bonds: internal,
                perimeter,
                spanning,
            });
        }
        layer = next;
    }
    Ok(all)
}

/// Exact law of `C(0)` restricted to clusters with at most `n_max` sites.
#[derive(Clone, Debug)]
pub struct ClusterLaw {
    pub domain: EnumerationDomain,
    pub p: f64,
    pub shapes: Vec<(Animal, f64)>,
}

pub fn exact_cluster_law(dom: &EnumerationDomain, p: f64) -> Result<ClusterLaw> {
    dom.model(p)?;
    let shapes = enumerate_animals(dom)?
        .into_iter()
        .map(|a| {
            let w = a.probability(p);
            (a, w)
        })
        .collect();
    Ok(ClusterLaw {
        domain: dom.clone(),
        p,
        shapes,
    })
}

impl ClusterLaw {
    fn check_size(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.domain.n_max {
            return Err(Error::OutOfDomain);
        }
        Ok(())
    }

    fn check_point(&self, x: &LatticePoint) -> Result<()> {
        if x.dim() != self.domain.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.domain.dimension,
                found: x.dim(),
            });
        }
        if x.l1_norm() as usize >= self.domain.n_max {
            return Err(Error::OutOfDomain);
        }
        Ok(())
    }

    /// `P(|C(0)| = n)` for `n = 0..=n_max` (index 0 is zero).
    pub fn size_distribution(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.domain.n_max + 1];
        for (a, w) in &self.shapes {
            out[a.size()] += w;
        }
        out
    }

    /// `1 − Σ_{|A| ≤ n_max} P(C(0) = A)`.
    pub fn overflow(&self) -> f64 {
        1.0 - self.shapes.iter().map(|(_, w)| w).sum::<f64>()
    }

    /// `τ(x; n) = P(x ∈ C(0), |C(0)| = n)`.
    pub fn tau(&self, x: &LatticePoint, n: usize) -> Result<f64> {
        self.check_size(n)?;
        self.check_point(x)?;
        Ok(self
            .shapes
            .iter()
            .filter(|(a, _)| a.size() == n && a.contains(x))
            .map(|(_, w)| w)
            .sum())
    }

    /// `τ⁽³⁾(x, y; n) = P(x, y ∈ C(0), |C(0)| = n)`.
    pub fn tau3(&self, x: &LatticePoint, y: &LatticePoint, n: usize) -> Result<f64> {
        self.check_size(n)?;
        self.check_point(x)?;
        self.check_point(y)?;
        Ok(self
            .shapes
            .iter()
            .filter(|(a, _)| a.size() == n && a.contains(x) && a.contains(y))
            .map(|(_, w)| w)
            .sum())
    }

    pub fn tau_hat(&self, k: &[f64], n: usize) -> Result<Complex64> {
        self.check_size(n)?;
        self.check_wave(k)?;
        Ok(self
            .shapes
            .iter()
            .filter(|(a, _)| a.size() == n)
            .map(|(a, w)| a.fourier_sum(k) * *w)
            .sum())
    }

    pub fn tau3_hat(&self, k: &[f64], l: &[f64], n: usize) -> Result<Complex64> {
        self.check_size(n)?;
        self.check_wave(k)?;
        self.check_wave(l)?;
        Ok(self
            .shapes
            .iter()
            .filter(|(a, _)| a.size() == n)
            .map(|(a, w)| a.fourier_sum(k) * a.fourier_sum(l) * *w)
            .sum())
    }

    fn check_wave(&self, k: &[f64]) -> Result<()> {
        if k.len() != self.domain.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.domain.dimension,
                found: k.len(),
            });
        }
        Ok(())
    }

    /// Golden values for estimator tests.
    pub fn fixture(&self, waves: &[Vec<f64>], pairs: &[(usize, usize)]) -> Result<OracleFixture> {
        let mut tau_hat = Vec::new();
        let mut tau3_hat = Vec::new();
        for n in 1..=self.domain.n_max {
            for k in waves {
                let v = self.tau_hat(k, n)?;
                tau_hat.push(FourierValue {
                    n,
                    k: k.clone(),
                    l: None,
                    re: v.re,
                    im: v.im,
                });
            }
            for &(a, b) in pairs {
                let (k, l) = (
                    waves.get(a).ok_or(Error::OutOfDomain)?,
                    waves.get(b).ok_or(Error::OutOfDomain)?,
                );
                let v = self.tau3_hat(k, l, n)?;
                tau3_hat.push(FourierValue {
                    n,
                    k: k.clone(),
                    l: Some(l.clone()),
                    re: v.re,
                    im: v.im,
                });
            }
        }
        Ok(OracleFixture {
            dimension: self.domain.dimension,
            p: self.p,
            n_max: self.domain.n_max,
            size_distribution: self.size_distribution(),
            overflow: self.overflow(),
            tau_hat,
            tau3_hat,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierValue {
    pub n: usize,
    pub k: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l: Option<Vec<f64>>,
    pub re: f64,
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFixture {
    pub dimension: usize,
    pub p: f64,
    pub n_max: usize,
    pub size_distribution: Vec<f64>,
    pub overflow: f64,
    pub tau_hat: Vec<FourierValue>,
    pub tau3_hat: Vec<FourierValue>,
}

/// Size law from the growth decision tree.
#[derive(Clone, Debug)]
pub struct GrowthLaw {
    /// `P(|C(0)| = n)`, index 0 unused.
    pub sizes: Vec<f64>,
    /// `P(|C(0)| > n_max)`.
    pub overflow: f64,
}

pub fn exact_size_law_by_growth(dom: &EnumerationDomain, p: f64) -> Result<GrowthLaw> {
    let m = dom.model(p)?;
    let offsets = m.offsets();
    let mut law = GrowthLaw {
        sizes: vec![0.0; dom.n_max + 1],
        overflow: 0.0,
    };
    let mut sites = vec![vec![0i64; dom.dimension]];
    explore(&offsets, p, dom.n_max, &mut sites, 0, 0, 1.0, &mut law);
    Ok(law)
}

#[allow(clippy::too_many_arguments)]
fn explore(
    offsets: &[Vec<i64>],
    p: f64,
    n_max: usize,
    sites: &mut Vec<Vec<i64>>,
    head: usize,
    slot: usize,
    weight: f64,
    law: &mut GrowthLaw,
) {
    if head == sites.len() {
        law.sizes[sites.len()] += weight;
        return;
    }
    if slot == offsets.len() {
        explore(offsets, p, n_max, sites, head + 1, 0, weight, law);
        return;
    }
    let y: Vec<i64> = sites[head].iter().zip(&offsets[slot]).map(|(a, b)| a + b).collect();
    match sites.iter().position(|s| *s == y) {
        // decided when y was processed
        Some(j) if j < head => explore(offsets, p, n_max, sites, head, slot + 1, weight, law),
        Some(_) => {
            // both outcomes leave the site set unchanged
            explore(offsets, p, n_max, sites, head, slot + 1, weight, law);
        }
        None => {
            explore(offsets, p, n_max, sites, head, slot + 1, weight * (1.0 - p), law);
            if sites.len() == n_max {
                law.overflow += weight * p;
            } else {
                sites.push(y);
                explore(offsets, p, n_max, sites, head, slot + 1, weight * p, law);
                sites.pop();
            }
        }
    }
}

/// Exact backbone by unit-capacity max-flow: `u` belongs when two units of
/// flow can leave `u` and reach `{x, y}` (one unit into each, two into `x`
/// when `x = y`) over edge-disjoint occupied bonds.
pub fn exact_backbone(
    sites: &[LatticePoint],
    bonds: &[(LatticePoint, LatticePoint)],
    x: &LatticePoint,
    y: &LatticePoint,
) -> Result<Vec<LatticePoint>> {
    let index = |s: &LatticePoint| sites.iter().position(|t| t == s).ok_or(Error::SiteNotInCluster);
    let ix = index(x)?;
    let iy = index(y)?;
    let mut edges = Vec::with_capacity(bonds.len());
    for (a, b) in bonds {
        edges.push((index(a)?, index(b)?));
    }
    let n = sites.len();
    // connectivity of x and y
    let mut seen = vec![false; n];
    seen[ix] = true;
    let mut queue = VecDeque::from([ix]);
    while let Some(u) = queue.pop_front() {
        for &(a, b) in &edges {
            for (s, t) in [(a, b), (b, a)] {
                if s == u && !seen[t] {
                    seen[t] = true;
                    queue.push_back(t);
                }
            }
        }
    }
    if !seen[iy] {
        return Err(Error::Disconnected);
    }
    let mut out: Vec<LatticePoint> = (0..n)
        .filter(|&u| unit_flow(n, &edges, u, ix, iy) >= 2)
        .map(|u| sites[u].clone())
        .collect();
    out.sort();
    Ok(out)
}

/// Max flow (capped at 2) from `source` to a sink fed by `x` and `y`.
fn unit_flow(n: usize, edges: &[(usize, usize)], source: usize, x: usize, y: usize) -> usize {
    let sink = n;
    // arcs: (to, capacity); paired arcs at i ^ 1
    let mut to = Vec::new();
    let mut cap = Vec::new();
    let mut adj = vec![Vec::new(); n + 1];
    let mut add = |u: usize, v: usize, c_fwd: i32, c_back: i32, to: &mut Vec<usize>, cap: &mut Vec<i32>| {
        adj[u].push(to.len());
        to.push(v);
        cap.push(c_fwd);
        adj[v].push(to.len());
        to.push(u);
        cap.push(c_back);
    };
    for &(a, b) in edges {
        add(a, b, 1, 1, &mut to, &mut cap);
    }
    add(x, sink, 1, 0, &mut to, &mut cap);
    add(y, sink, 1, 0, &mut to, &mut cap);
    let mut flow = 0;
    while flow < 2 {
        let mut prev = vec![usize::MAX; n + 1];
        let mut visited = vec![false; n + 1];
        visited[source] = true;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            if u == sink {
                break;
            }
            for &arc in &adj[u] {
                let v = to[arc];
                if cap[arc] > 0 && !visited[v] {
                    visited[v] = true;
                    prev[v] = arc;
                    queue.push_back(v);
                }
            }
        }
        if !visited[sink] {
            break;
        }
        let mut v = sink;
        while v != source {
            let arc = prev[v];
            cap[arc] -= 1;
            cap[arc ^ 1] += 1;
            v = to[arc ^ 1];
        }
        flow += 1;
    }
    flow
}
