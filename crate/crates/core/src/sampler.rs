//! Lazy growth of the open cluster of the origin, the green-site variant,
//! backbone extraction and deterministic parallel batches.
//!
//! Growth is breadth first over sites in discovery order. When site `x` is
//! processed, every bond `{x, y}` with `y` not yet processed is decided by a
//! fresh Bernoulli(p) variable; bonds towards already processed sites were
//! decided when those sites were processed. Each bond incident to a
//! processed site is therefore decided exactly once. Occupied slots are
//! located with geometric skips, so vacant bonds cost nothing, which keeps
//! spread-out neighbourhoods with tens of thousands of bonds per site cheap.

use std::collections::{HashMap, VecDeque};

use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{canonical_bond, Bond, LatticePoint, ModelSpec};
use crate::rng::{GeometricSkip, RngStreamSpec};

/// Site lookup keyed by coordinates. Coordinates are bit-packed into four
/// words whenever the cluster's reach allows it, which avoids a heap
/// allocation per site; otherwise boxed slices are used.
#[derive(Clone, Debug)]
enum SiteMap {
    Packed {
        bits: u32,
        per_word: usize,
        bias: i64,
        map: FxHashMap<[u64; 4], u32>,
    },
    General(FxHashMap<Box<[i64]>, u32>),
}

impl SiteMap {
    fn for_reach(dim: usize, reach: u64) -> Self {
        // coordinates lie in [-reach, reach]
        let span = reach.saturating_mul(2).saturating_add(1);
        let bits = 64 - span.leading_zeros();
        if bits <= 32 {
            let per_word = (64 / bits) as usize;
            if dim.div_ceil(per_word) <= 4 {
                return SiteMap::Packed {
                    bits,
                    per_word,
                    bias: reach as i64,
                    map: FxHashMap::default(),
                };
            }
        }
        SiteMap::General(FxHashMap::default())
    }

    #[inline]
    fn pack(bits: u32, per_word: usize, bias: i64, c: &[i64]) -> Option<[u64; 4]> {
        let mut key = [0u64; 4];
        let limit = 1u64 << bits;
        for (i, &v) in c.iter().enumerate() {
            let u = v.wrapping_add(bias) as u64;
            if u >= limit {
                return None;
            }
            key[i / per_word] |= u << ((i % per_word) as u32 * bits);
        }
        Some(key)
    }

    #[inline]
    fn get(&self, c: &[i64]) -> Option<u32> {
        match self {
            SiteMap::Packed {
                bits,
                per_word,
                bias,
                map,
            } => Self::pack(*bits, *per_word, *bias, c).and_then(|k| map.get(&k).copied()),
            SiteMap::General(map) => map.get(c).copied(),
        }
    }

    #[inline]
    fn insert(&mut self, c: &[i64], index: u32) {
        match self {
            SiteMap::Packed {
                bits,
                per_word,
                bias,
                map,
            } => {
                let key = Self::pack(*bits, *per_word, *bias, c).expect("site outside the packed reach of the cluster");
                map.insert(key, index);
            }
            SiteMap::General(map) => {
                map.insert(c.into(), index);
            }
        }
    }

    fn clear(&mut self) {
        match self {
            SiteMap::Packed { map, .. } => map.clear(),
            SiteMap::General(map) => map.clear(),
        }
    }
}

/// A sampled cluster of the origin.
///
/// Sites are stored in discovery order (origin first); occupied bonds are
/// stored as pairs of site indices `(i, j)` with `i < j`.
#[derive(Clone, Debug)]
pub struct Cluster {
    dim: usize,
    coords: Vec<i64>,
    index: SiteMap,
    bonds: Vec<(u32, u32)>,
    truncated: bool,
}

impl Cluster {
    fn empty(dim: usize, reach: u64) -> Self {
        Self {
            dim,
            coords: Vec::new(),
            index: SiteMap::for_reach(dim, reach),
            bonds: Vec::new(),
            truncated: false,
        }
    }

    /// Builds a cluster from explicit sites and occupied bonds, checking that
    /// the graph is connected and that bonds join listed sites. The first
    /// site plays the role of the origin.
    pub fn from_parts(sites: &[LatticePoint], bonds: &[(LatticePoint, LatticePoint)]) -> Result<Self> {
        let first = sites
            .first()
            .ok_or_else(|| Error::InvalidArgument("a cluster needs at least one site".into()))?;
        let dim = first.dim();
        let mut c = Cluster::empty(dim, u64::MAX);
        c.index = SiteMap::General(FxHashMap::default());
        for s in sites {
            if s.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: s.dim(),
                });
            }
            if c.index.get(s.coords()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate site {s}")));
            }
            c.push_site(s.coords());
        }
        let mut seen = std::collections::HashSet::new();
        for (a, b) in bonds {
            let ia = c.index_of(a.coords()).ok_or(Error::SiteNotInCluster)?;
            let ib = c.index_of(b.coords()).ok_or(Error::SiteNotInCluster)?;
            if ia == ib {
                return Err(Error::DegenerateBond);
            }
            let pair = (ia.min(ib) as u32, ia.max(ib) as u32);
            if seen.insert(pair) {
                c.bonds.push(pair);
            }
        }
        let comps = c.components();
        if comps.iter().any(|&k| k != 0) {
            return Err(Error::Disconnected);
        }
        Ok(c)
    }

    fn reset(&mut self, dim: usize, reach: u64) {
        let fresh = SiteMap::for_reach(dim, reach);
        let same_layout = match (&self.index, &fresh) {
            (
                SiteMap::Packed {
                    bits: a,
                    per_word: b,
                    bias: c,
                    ..
                },
                SiteMap::Packed {
                    bits: x,
                    per_word: y,
                    bias: z,
                    ..
                },
            ) => a == x && b == y && c == z,
            (SiteMap::General(_), SiteMap::General(_)) => true,
            _ => false,
        };
        if same_layout && self.dim == dim {
            self.index.clear();
        } else {
            self.index = fresh;
        }
        self.dim = dim;
        self.coords.clear();
        self.bonds.clear();
        self.truncated = false;
    }

    #[inline]
    fn push_site(&mut self, c: &[i64]) -> u32 {
        let i = self.size() as u32;
        self.coords.extend_from_slice(c);
        self.index.insert(c, i);
        i
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of sites. For a truncated cluster this is `size_cap + 1`.
    pub fn size(&self) -> usize {
        self.coords.len() / self.dim.max(1)
    }

    pub fn is_truncated(&self) -> bool {
        self.truncated
    }

    #[inline]
    pub fn site(&self, i: usize) -> &[i64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sites(&self) -> impl ExactSizeIterator<Item = &[i64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn site_points(&self) -> Vec<LatticePoint> {
        self.sites().map(LatticePoint::from).collect()
    }

    pub fn index_of(&self, c: &[i64]) -> Option<usize> {
        if c.len() != self.dim {
            return None;
        }
        self.index.get(c).map(|i| i as usize)
    }

    pub fn contains(&self, x: &LatticePoint) -> bool {
        self.index_of(x.coords()).is_some()
    }

    /// Occupied bonds as site-index pairs `(i, j)`, `i < j`.
    pub fn bond_indices(&self) -> &[(u32, u32)] {
        &self.bonds
    }

    pub fn occupied_bonds(&self) -> Vec<Bond> {
        self.bonds
            .iter()
            .map(|&(a, b)| {
                canonical_bond(
                    &LatticePoint::from(self.site(a as usize)),
                    &LatticePoint::from(self.site(b as usize)),
                )
                .expect("stored bonds join distinct sites")
            })
            .collect()
    }

    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.size()];
        for (e, &(a, b)) in self.bonds.iter().enumerate() {
            adj[a as usize].push((b as usize, e));
            adj[b as usize].push((a as usize, e));
        }
        adj
    }

    /// Connected component label of every site, component of site 0 is 0.
    fn components(&self) -> Vec<usize> {
        let adj = self.adjacency();
        let mut label = vec![usize::MAX; self.size()];
        let mut next = 0;
        for s in 0..self.size() {
            if label[s] != usize::MAX {
                continue;
            }
            label[s] = next;
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &(v, _) in &adj[u] {
                    if label[v] == usize::MAX {
                        label[v] = next;
                        queue.push_back(v);
                    }
                }
            }
            next += 1;
        }
        label
    }

    /// Graph distance (number of occupied bonds) from site `from` to all sites.
    pub fn graph_distances(&self, from: usize) -> Vec<Option<usize>> {
        let adj = self.adjacency();
        let mut dist = vec![None; self.size()];
        dist[from] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for &(v, _) in &adj[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// FNV-1a hash of the sorted site list.
    pub fn fingerprint(&self) -> u64 {
        let mut sites: Vec<&[i64]> = self.sites().collect();
        sites.sort_unstable();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for s in sites {
            for v in s {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn to_json_line(&self) -> String {
        #[derive(Serialize)]
        struct Dump<'a> {
            sites: Vec<&'a [i64]>,
            bonds: Vec<[&'a [i64]; 2]>,
            truncated: bool,
        }
        let dump = Dump {
            sites: self.sites().collect(),
            bonds: self
                .bonds
                .iter()
                .map(|&(a, b)| [self.site(a as usize), self.site(b as usize)])
                .collect(),
            truncated: self.truncated,
        };
        serde_json::to_string(&dump).expect("cluster dump serialises")
    }
}

/// Reusable growth buffers.
pub struct ClusterGrower {
    cluster: Cluster,
    x: Vec<i64>,
    y: Vec<i64>,
    off: Vec<i64>,
}

impl Default for ClusterGrower {
    fn default() -> Self {
        Self::new()
    }
}

impl ClusterGrower {
    pub fn new() -> Self {
        Self {
            cluster: Cluster::empty(1, 1),
            x: Vec::new(),
            y: Vec::new(),
            off: Vec::new(),
        }
    }

    /// Grows C(0) until the frontier is exhausted or the size exceeds
    /// `size_cap`. When `record_bonds` is false only the site set is kept.
    pub fn grow(&mut self, m: &ModelSpec, rng: RngStreamSpec, size_cap: usize, record_bonds: bool) -> &Cluster {
        let d = m.dimension();
        let reach = (size_cap as u64 + 1).saturating_mul(m.range() as u64);
        self.cluster.reset(d, reach);
        self.x.resize(d, 0);
        self.y.resize(d, 0);
        self.off.resize(d, 0);

        let origin = vec![0i64; d];
        self.cluster.push_site(&origin);
        let skip = GeometricSkip::new(m.bond_density());
        let coordination = m.coordination();
        let mut r = rng.rng();
        let mut head = 0usize;

        'growth: while head < self.cluster.size() {
            self.x.copy_from_slice(self.cluster.site(head));
            let mut slot = skip.draw(&mut r);
            while slot < coordination {
                m.offset_into(slot, &mut self.off);
                for t in 0..d {
                    self.y[t] = self.x[t] + self.off[t];
                }
                match self.cluster.index.get(&self.y) {
                    // decided when that site was processed
                    Some(j) if (j as usize) < head => {}
                    Some(j) => {
                        if record_bonds {
                            self.cluster.bonds.push((head as u32, j));
                        }
                    }
                    None => {
                        let j = self.cluster.push_site(&self.y);
                        if record_bonds {
                            self.cluster.bonds.push((head as u32, j));
                        }
                        if self.cluster.size() > size_cap {
                            self.cluster.truncated = true;
                            break 'growth;
                        }
                    }
                }
                slot = slot.saturating_add(1).saturating_add(skip.draw(&mut r));
            }
            head += 1;
        }
        &self.cluster
    }

    /// As [`grow`](Self::grow), plus an independent "not green" mark with
    /// probability `z` for every site; returns whether no site is green.
    pub fn grow_green(
        &mut self,
        m: &ModelSpec,
        z: f64,
        rng: RngStreamSpec,
        size_cap: usize,
        record_bonds: bool,
    ) -> (&Cluster, bool) {
        self.grow(m, rng, size_cap, record_bonds);
        let mut colours = rng.aux_rng();
        let n = self.cluster.size();
        let green_free = (0..n).all(|_| colours.uniform() < z);
        (&self.cluster, green_free)
    }
}

pub fn grow_cluster(m: &ModelSpec, rng: RngStreamSpec, size_cap: usize) -> Result<Cluster> {
    if size_cap == 0 {
        return Err(Error::InvalidArgument("size cap must be at least 1".into()));
    }
    let mut g = ClusterGrower::new();
    g.grow(m, rng, size_cap, true);
    Ok(g.cluster)
}

pub fn grow_cluster_green(m: &ModelSpec, z: f64, rng: RngStreamSpec, size_cap: usize) -> Result<(Cluster, bool)> {
    if size_cap == 0 {
        return Err(Error::InvalidArgument("size cap must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&z) {
        return Err(Error::InvalidArgument(format!("z = {z} is outside [0, 1]")));
    }
    let mut g = ClusterGrower::new();
    let (_, free) = g.grow_green(m, z, rng, size_cap, true);
    Ok((g.cluster, free))
}

/// Record of every bond variable drawn by [`grow_cluster_audited`].
#[derive(Debug, Default)]
pub struct BondLedger {
    pub outcomes: HashMap<Bond, bool>,
    pub draws: usize,
    pub lookups: usize,
}

/// Reference growth that walks every neighbour slot and keeps each drawn
/// bond variable in a cache keyed by the canonical bond. It samples the same
/// law as [`grow_cluster`] (not the same realisation) and exposes the ledger
/// so perimeter completeness can be audited.
pub fn grow_cluster_audited(m: &ModelSpec, rng: RngStreamSpec, size_cap: usize) -> Result<(Cluster, BondLedger)> {
    if size_cap == 0 {
        return Err(Error::InvalidArgument("size cap must be at least 1".into()));
    }
    let d = m.dimension();
    let mut c = Cluster::empty(d, u64::MAX);
    c.index = SiteMap::General(FxHashMap::default());
    let mut ledger = BondLedger::default();
    let mut r = rng.rng();
    c.push_site(&vec![0; d]);
    let p = m.bond_density();
    let mut head = 0;
    'growth: while head < c.size() {
        let x = LatticePoint::from(c.site(head));
        for y in crate::lattice::neighbours(m, &x)? {
            let bond = canonical_bond(&x, &y)?;
            ledger.lookups += 1;
            let occupied = *ledger.outcomes.entry(bond).or_insert_with(|| {
                ledger.draws += 1;
                r.bernoulli(p)
            });
            if !occupied {
                continue;
            }
            match c.index_of(y.coords()) {
                Some(j) if j < head => {}
                Some(j) => c.bonds.push((head as u32, j as u32)),
                None => {
                    let j = c.push_site(y.coords());
                    c.bonds.push((head as u32, j));
                    if c.size() > size_cap {
                        c.truncated = true;
                        break 'growth;
                    }
                }
            }
        }
        head += 1;
    }
    Ok((c, ledger))
}

/// Checks the ledger of an untruncated audited cluster: every bond incident
/// to a site was drawn exactly once, perimeter bonds are vacant, and internal
/// bonds are occupied exactly when the cluster lists them.
pub fn audit_perimeter(m: &ModelSpec, c: &Cluster, ledger: &BondLedger) -> std::result::Result<(), String> {
    if c.is_truncated() {
        return Err("truncated clusters have an unexplored frontier".into());
    }
    if ledger.draws != ledger.outcomes.len() {
        return Err(format!(
            "{} draws for {} distinct bonds",
            ledger.draws,
            ledger.outcomes.len()
        ));
    }
    let occupied: std::collections::HashSet<Bond> = c.occupied_bonds().into_iter().collect();
    let mut incident = std::collections::HashSet::new();
    for s in c.site_points() {
        for y in crate::lattice::neighbours(m, &s).map_err(|e| e.to_string())? {
            let b = canonical_bond(&s, &y).map_err(|e| e.to_string())?;
            let outcome = *ledger
                .outcomes
                .get(&b)
                .ok_or_else(|| format!("bond {s}-{y} never examined"))?;
            if c.contains(&y) {
                if outcome != occupied.contains(&b) {
                    return Err(format!("internal bond {s}-{y} disagrees with the cluster"));
                }
            } else if outcome {
                return Err(format!("perimeter bond {s}-{y} is occupied"));
            }
            incident.insert(b);
        }
    }
    if incident.len() != ledger.outcomes.len() {
        return Err("ledger holds bonds not incident to the cluster".into());
    }
    Ok(())
}

/// Sites `u` admitting edge-disjoint occupied paths `x → u` and `u → y`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Backbone {
    pub x: LatticePoint,
    pub y: LatticePoint,
    /// Sorted lexicographically.
    pub sites: Vec<LatticePoint>,
}

impl Backbone {
    pub fn size(&self) -> usize {
        self.sites.len()
    }
}

/// Backbone between `x` and `y` in `c`.
///
/// Uses the bridge tree: after contracting 2-edge-connected components, a
/// site belongs to the backbone exactly when its component lies on the tree
/// path joining the components of `x` and `y`.
pub fn extract_backbone(c: &Cluster, x: &LatticePoint, y: &LatticePoint) -> Result<Backbone> {
    let ix = c.index_of(x.coords()).ok_or(Error::SiteNotInCluster)?;
    let iy = c.index_of(y.coords()).ok_or(Error::SiteNotInCluster)?;
    let members = backbone_indices(c, ix, iy)?;
    let mut sites: Vec<LatticePoint> = members.into_iter().map(|i| LatticePoint::from(c.site(i))).collect();
    sites.sort();
    Ok(Backbone {
        x: x.clone(),
        y: y.clone(),
        sites,
    })
}

pub(crate) fn backbone_indices(c: &Cluster, ix: usize, iy: usize) -> Result<Vec<usize>> {
    let n = c.size();
    let adj = c.adjacency();
    let bridges = find_bridges(n, &adj, c.bonds.len());

    // 2-edge-connected components
    let mut comp = vec![usize::MAX; n];
    let mut ncomp = 0;
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        comp[s] = ncomp;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for &(v, e) in &adj[u] {
                if !bridges[e] && comp[v] == usize::MAX {
                    comp[v] = ncomp;
                    stack.push(v);
                }
            }
        }
        ncomp += 1;
    }

    // path in the bridge tree from comp[ix] to comp[iy]
    let mut tree = vec![Vec::new(); ncomp];
    for (e, &(a, b)) in c.bonds.iter().enumerate() {
        if bridges[e] {
            let (ca, cb) = (comp[a as usize], comp[b as usize]);
            tree[ca].push(cb);
            tree[cb].push(ca);
        }
    }
    let (src, dst) = (comp[ix], comp[iy]);
    let mut parent = vec![usize::MAX; ncomp];
    parent[src] = src;
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        if u == dst {
            break;
        }
        for &v in &tree[u] {
            if parent[v] == usize::MAX {
                parent[v] = u;
                queue.push_back(v);
            }
        }
    }
    if parent[dst] == usize::MAX {
        return Err(Error::Disconnected);
    }
    let mut on_path = vec![false; ncomp];
    let mut cur = dst;
    loop {
        on_path[cur] = true;
        if cur == src {
            break;
        }
        cur = parent[cur];
    }
    Ok((0..n).filter(|&s| on_path[comp[s]]).collect())
}

/// Marks bridges with an iterative lowlink DFS (clusters can be long paths).
fn find_bridges(n: usize, adj: &[Vec<(usize, usize)>], n_edges: usize) -> Vec<bool> {
    let mut is_bridge = vec![false; n_edges];
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut time = 0;
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // (vertex, edge used to enter, next adjacency position)
        let mut stack: Vec<(usize, usize, usize)> = vec![(root, usize::MAX, 0)];
        disc[root] = time;
        low[root] = time;
        time += 1;
        while let Some(top) = stack.last_mut() {
            let (u, via, pos) = *top;
            if pos < adj[u].len() {
                top.2 += 1;
                let (v, e) = adj[u][pos];
                if e == via {
                    continue;
                }
                if disc[v] == usize::MAX {
                    disc[v] = time;
                    low[v] = time;
                    time += 1;
                    stack.push((v, e, 0));
                } else {
                    low[u] = low[u].min(disc[v]);
                }
            } else {
                stack.pop();
                if let Some(&(parent, _, _)) = stack.last() {
                    low[parent] = low[parent].min(low[u]);
                    if low[u] > disc[parent] {
                        is_bridge[via] = true;
                    }
                }
            }
        }
    }
    is_bridge
}

/// Stream range and parallelism for a batch of independent clusters.
#[derive(Clone, Copy, Debug)]
pub struct BatchPlan {
    pub seed: u64,
    pub first_stream: u64,
    pub count: u64,
    /// `None` uses the global rayon pool.
    pub workers: Option<usize>,
}

impl BatchPlan {
    pub fn new(seed: u64, count: u64) -> Self {
        Self {
            seed,
            first_stream: 0,
            count,
            workers: None,
        }
    }

    pub fn with_workers(mut self, workers: Option<usize>) -> Self {
        self.workers = workers;
        self
    }
}

const CHUNK: u64 = 512;
const WAVE: usize = 16;

/// Deterministic parallel fold over the streams of `plan`.
///
/// Streams are split into fixed chunks; each chunk is folded into a fresh
/// accumulator and chunk results are merged strictly in stream order, so
/// floating-point sums do not depend on the worker count or on scheduling.
pub fn fold_batch<A, Make, Visit, Merge>(plan: BatchPlan, make: Make, visit: Visit, merge: Merge) -> Result<A>
where
    A: Send,
    Make: Fn() -> A + Sync,
    Visit: Fn(&mut A, &mut ClusterGrower, RngStreamSpec) + Sync,
    Merge: Fn(A, A) -> A + Sync,
{
    let run = || {
        let chunks: Vec<(u64, u64)> = (0..plan.count.div_ceil(CHUNK))
            .map(|c| {
                let start = plan.first_stream + c * CHUNK;
                let end = (start + CHUNK).min(plan.first_stream + plan.count);
                (start, end)
            })
            .collect();
        let mut total = make();
        for wave in chunks.chunks(WAVE) {
            let parts: Vec<A> = wave
                .par_iter()
                .map(|&(start, end)| {
                    let mut acc = make();
                    let mut grower = ClusterGrower::new();
                    for s in start..end {
                        visit(&mut acc, &mut grower, RngStreamSpec::new(plan.seed, s));
                    }
                    acc
                })
                .collect();
            for part in parts {
                total = merge(total, part);
            }
        }
        total
    };
    match plan.workers {
        None => Ok(run()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(pool.install(run))
        }
    }
}

/// Clusters for streams `0..count`, in stream order.
pub fn sample_batch(
    m: &ModelSpec,
    seed: u64,
    size_cap: usize,
    count: u64,
    workers: Option<usize>,
) -> Result<Vec<Cluster>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    if size_cap == 0 {
        return Err(Error::InvalidArgument("size cap must be at least 1".into()));
    }
    fold_batch(
        BatchPlan::new(seed, count).with_workers(workers),
        Vec::new,
        |acc: &mut Vec<Cluster>, g, spec| acc.push(g.grow(m, spec, size_cap, true).clone()),
        |mut a, b| {
            a.extend(b);
            a
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(c: &[i64]) -> LatticePoint {
        LatticePoint::new(c.to_vec()).unwrap()
    }

    #[test]
    fn p_zero_gives_single_site() {
        let m = ModelSpec::nearest_neighbour(1, 0.0).unwrap();
        for s in 0..20 {
            let c = grow_cluster(&m, RngStreamSpec::new(3, s), 100).unwrap();
            assert_eq!(c.size(), 1);
            assert!(!c.is_truncated());
            assert_eq!(c.site(0), &[0]);
        }
    }

    #[test]
    fn p_one_truncates() {
        let m = ModelSpec::nearest_neighbour(2, 1.0).unwrap();
        let c = grow_cluster(&m, RngStreamSpec::new(3, 0), 50).unwrap();
        assert!(c.is_truncated());
        assert_eq!(c.size(), 51);
    }

    #[test]
    fn zero_cap_rejected() {
        let m = ModelSpec::nearest_neighbour(2, 0.5).unwrap();
        assert!(grow_cluster(&m, RngStreamSpec::new(0, 0), 0).is_err());
    }

    #[test]
    fn clusters_are_connected_with_valid_bonds() {
        for m in [
            ModelSpec::nearest_neighbour(2, 0.45).unwrap(),
            ModelSpec::nearest_neighbour(4, 0.2).unwrap(),
            ModelSpec::spread_out(2, 2, 0.06).unwrap(),
        ] {
            for s in 0..200 {
                let c = grow_cluster(&m, RngStreamSpec::new(11, s), 300).unwrap();
                assert!(c.components().iter().all(|&k| k == 0));
                for &(a, b) in c.bond_indices() {
                    assert!(a < b);
                    let diff: Vec<i64> = c
                        .site(b as usize)
                        .iter()
                        .zip(c.site(a as usize))
                        .map(|(u, v)| u - v)
                        .collect();
                    assert!(m.is_bond_vector(&diff));
                }
                let mut sorted = c.bond_indices().to_vec();
                sorted.sort_unstable();
                sorted.dedup();
                assert_eq!(sorted.len(), c.bond_indices().len(), "bond recorded twice");
            }
        }
    }

    #[test]
    fn growth_is_reproducible() {
        let m = ModelSpec::nearest_neighbour(3, 0.3).unwrap();
        let a = grow_cluster(&m, RngStreamSpec::new(5, 9), 1000).unwrap();
        let b = grow_cluster(&m, RngStreamSpec::new(5, 9), 1000).unwrap();
        assert_eq!(a.site_points(), b.site_points());
        assert_eq!(a.bond_indices(), b.bond_indices());
    }

    #[test]
    fn packed_and_general_maps_agree() {
        let m = ModelSpec::nearest_neighbour(3, 0.3).unwrap();
        let c = grow_cluster(&m, RngStreamSpec::new(5, 2), 1000).unwrap();
        let rebuilt = Cluster::from_parts(
            &c.site_points(),
            &c.occupied_bonds()
                .iter()
                .map(|b| (b.endpoints().0.clone(), b.endpoints().1.clone()))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        for s in c.sites() {
            assert_eq!(c.index_of(s), rebuilt.index_of(s));
        }
        assert_eq!(c.fingerprint(), rebuilt.fingerprint());
    }

    #[test]
    fn audited_growth_passes_perimeter_audit() {
        let m = ModelSpec::nearest_neighbour(2, 0.4).unwrap();
        let mut checked = 0;
        for s in 0..300 {
            let (c, ledger) = grow_cluster_audited(&m, RngStreamSpec::new(8, s), 200).unwrap();
            if c.is_truncated() {
                continue;
            }
            audit_perimeter(&m, &c, &ledger).unwrap();
            assert!(ledger.lookups >= ledger.draws);
            checked += 1;
        }
        assert!(checked > 250);
    }

    #[test]
    fn green_extremes() {
        let m = ModelSpec::nearest_neighbour(2, 0.3).unwrap();
        for s in 0..50 {
            let (_, free) = grow_cluster_green(&m, 1.0, RngStreamSpec::new(1, s), 100).unwrap();
            assert!(free);
            let (_, free) = grow_cluster_green(&m, 0.0, RngStreamSpec::new(1, s), 100).unwrap();
            assert!(!free);
        }
    }

    #[test]
    fn green_cluster_matches_plain_growth() {
        let m = ModelSpec::nearest_neighbour(2, 0.4).unwrap();
        for s in 0..30 {
            let spec = RngStreamSpec::new(4, s);
            let plain = grow_cluster(&m, spec, 100).unwrap();
            let (green, _) = grow_cluster_green(&m, 0.7, spec, 100).unwrap();
            assert_eq!(plain.site_points(), green.site_points());
        }
    }

    #[test]
    fn backbone_of_path() {
        let c = Cluster::from_parts(
            &[pt(&[0]), pt(&[1]), pt(&[2])],
            &[(pt(&[0]), pt(&[1])), (pt(&[1]), pt(&[2]))],
        )
        .unwrap();
        let b = extract_backbone(&c, &pt(&[0]), &pt(&[2])).unwrap();
        assert_eq!(b.sites, vec![pt(&[0]), pt(&[1]), pt(&[2])]);
    }

    #[test]
    fn backbone_drops_dangling_end() {
        // 0 - 1 - 2 with a dangling site hanging off 1
        let c = Cluster::from_parts(
            &[pt(&[0, 0]), pt(&[1, 0]), pt(&[2, 0]), pt(&[1, 1])],
            &[
                (pt(&[0, 0]), pt(&[1, 0])),
                (pt(&[1, 0]), pt(&[2, 0])),
                (pt(&[1, 0]), pt(&[1, 1])),
            ],
        )
        .unwrap();
        let b = extract_backbone(&c, &pt(&[0, 0]), &pt(&[2, 0])).unwrap();
        assert_eq!(b.sites, vec![pt(&[0, 0]), pt(&[1, 0]), pt(&[2, 0])]);
    }

    #[test]
    fn backbone_of_square_with_tail() {
        let sq = [pt(&[0, 0]), pt(&[1, 0]), pt(&[1, 1]), pt(&[0, 1])];
        let mut bonds: Vec<_> = (0..4).map(|i| (sq[i].clone(), sq[(i + 1) % 4].clone())).collect();
        bonds.push((pt(&[1, 1]), pt(&[2, 1])));
        let mut sites = sq.to_vec();
        sites.push(pt(&[2, 1]));
        let c = Cluster::from_parts(&sites, &bonds).unwrap();
        let b = extract_backbone(&c, &pt(&[0, 0]), &pt(&[1, 1])).unwrap();
        assert_eq!(b.size(), 4);
        let b = extract_backbone(&c, &pt(&[0, 0]), &pt(&[2, 1])).unwrap();
        assert_eq!(b.size(), 5);
        // x = y: the sites on a cycle through x
        let b = extract_backbone(&c, &pt(&[0, 0]), &pt(&[0, 0])).unwrap();
        assert_eq!(b.size(), 4);
        let b = extract_backbone(&c, &pt(&[2, 1]), &pt(&[2, 1])).unwrap();
        assert_eq!(b.sites, vec![pt(&[2, 1])]);
    }

    #[test]
    fn backbone_errors() {
        let c = Cluster::from_parts(&[pt(&[0])], &[]).unwrap();
        assert_eq!(extract_backbone(&c, &pt(&[0]), &pt(&[5])), Err(Error::SiteNotInCluster));
        assert!(Cluster::from_parts(&[pt(&[0]), pt(&[3])], &[]).is_err());
    }

    #[test]
    fn batch_matches_single_growth() {
        let m = ModelSpec::nearest_neighbour(2, 0.45).unwrap();
        let batch = sample_batch(&m, 21, 500, 1, None).unwrap();
        let single = grow_cluster(&m, RngStreamSpec::new(21, 0), 500).unwrap();
        assert_eq!(batch[0].site_points(), single.site_points());
        let batch = sample_batch(&m, 21, 500, 1200, Some(1)).unwrap();
        assert_eq!(batch.len(), 1200);
        let again = grow_cluster(&m, RngStreamSpec::new(21, 777), 500).unwrap();
        assert_eq!(batch[777].fingerprint(), again.fingerprint());
    }

    #[test]
    fn json_dump() {
        let c = Cluster::from_parts(&[pt(&[0]), pt(&[1])], &[(pt(&[0]), pt(&[1]))]).unwrap();
        assert_eq!(
            c.to_json_line(),
            r#"{"sites":[[0],[1]],"bonds":[[[0],[1]]],"truncated":false}"#
        );
    }
}
