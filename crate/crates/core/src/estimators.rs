//! Size-conditioned two- and three-point estimators, the z-weighted
//! generating-function estimators and dyadic scaling profiles of `q̂ₙ`.
//!
//! Each sample is assigned to one of [`BATCHES`] batches by its stream
//! index; standard errors are batch means, treating every estimator as a
//! ratio `Σ_b S_b / Σ_b N_b` with the batch as the sampling unit.
//!
//! Fourier sums in [`EstimatorAccumulator`] are kept in fixed point (scale
//! 2⁻³²) so that merging is exactly associative and commutative, and the
//! identities `F₀ = n`, `Σ F_k F₀ = n Σ F_k` hold bit for bit.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Cluster;

pub const BATCHES: usize = 32;

/// Wave vector in radians per lattice unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveVector(Vec<f64>);

impl WaveVector {
    /// Any finite vector (a continuum argument, before scaling).
    pub fn new(k: Vec<f64>) -> Result<Self> {
        if k.is_empty() {
            return Err(Error::InvalidArgument(
                "wave vector must have at least one component".into(),
            ));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("wave vector must be finite".into()));
        }
        Ok(Self(k))
    }

    /// A lattice Fourier argument, components in `[−π, π]`.
    pub fn lattice(k: Vec<f64>) -> Result<Self> {
        let w = Self::new(k)?;
        if w.0.iter().any(|v| v.abs() > std::f64::consts::PI) {
            return Err(Error::InvalidArgument(
                "lattice wave vector components must lie in [-pi, pi]".into(),
            ));
        }
        Ok(w)
    }

    pub fn zero(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    /// `k e_axis` in dimension `d`.
    pub fn along_axis(d: usize, axis: usize, k: f64) -> Result<Self> {
        if axis >= d {
            return Err(Error::InvalidArgument(format!("axis {axis} out of range for d = {d}")));
        }
        let mut v = vec![0.0; d];
        v[axis] = k;
        Self::new(v)
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

/// `Σ_{x∈C} e^{ik·x}`.
pub fn fourier_sum(c: &Cluster, k: &WaveVector) -> Result<Complex64> {
    if k.dim() != c.dim() {
        return Err(Error::DimensionMismatch {
            expected: c.dim(),
            found: k.dim(),
        });
    }
    if k.is_zero() {
        return Ok(Complex64::new(c.size() as f64, 0.0));
    }
    let kk = k.components();
    Ok(c.sites()
        .map(|x| {
            let phase: f64 = x.iter().zip(kk).map(|(&a, &b)| a as f64 * b).sum();
            Complex64::new(phase.cos(), phase.sin())
        })
        .sum())
}

/// `(1/d) Σ_i Σ_{x∈C} cos(k x_i)`, the axis average of `Σ_x e^{ik e_i·x}`
/// (real for any law symmetric under reflections).
pub fn axis_mean_cos_sum(c: &Cluster, k: f64) -> f64 {
    if k == 0.0 {
        return c.size() as f64;
    }
    let total: f64 = c
        .sites()
        .map(|x| x.iter().map(|&v| (k * v as f64).cos()).sum::<f64>())
        .sum();
    total / c.dim() as f64
}

/// `(1/d) Σ_{x∈C} |x|²`.
pub fn axis_mean_second_moment(c: &Cluster) -> f64 {
    let total: f64 = c.sites().map(|x| x.iter().map(|&v| (v * v) as f64).sum::<f64>()).sum();
    total / c.dim() as f64
}

/// Batch-means standard error of `Σ S_b / Σ N_b`.
fn ratio_stderr(sums: &[f64], denominators: &[f64]) -> f64 {
    let total_n: f64 = denominators.iter().sum();
    if total_n == 0.0 {
        return f64::NAN;
    }
    let ratio = sums.iter().sum::<f64>() / total_n;
    let b = sums.len() as f64;
    let ss: f64 = sums
        .iter()
        .zip(denominators)
        .map(|(s, n)| (s - ratio * n).powi(2))
        .sum();
    (b / (b - 1.0) * ss).sqrt() / total_n
}

fn complex_stderr(re: &[f64], im: &[f64], denominators: &[f64]) -> f64 {
    ratio_stderr(re, denominators).hypot(ratio_stderr(im, denominators))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// Complex estimate with the standard error of its modulus deviation,
/// `√(se(re)² + se(im)²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexEstimate {
    pub value: Complex64,
    pub stderr: f64,
}

const FIX_SCALE: f64 = 4_294_967_296.0; // 2^32

#[inline]
fn to_fixed(v: f64) -> i128 {
    (v * FIX_SCALE).round() as i128
}

#[inline]
fn from_fixed(v: i128) -> f64 {
    v as f64 / FIX_SCALE
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedComplex {
    pub re: i128,
    pub im: i128,
}

impl FixedComplex {
    fn quantise(z: Complex64) -> Self {
        Self {
            re: to_fixed(z.re),
            im: to_fixed(z.im),
        }
    }

    /// Product of two values at scale 2⁻³², returned at scale 2⁻⁶⁴.
    fn mul(self, o: Self) -> Self {
        Self {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }

    fn add(&mut self, o: Self) {
        self.re += o.re;
        self.im += o.im;
    }
}

/// Sums for clusters of exactly one size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBin {
    /// Clusters per batch.
    pub count: Vec<u64>,
    /// `Σ F_k` per wave and batch (scale 2⁻³²), index `w * BATCHES + b`.
    pub two: Vec<FixedComplex>,
    /// `Σ F_k F_l` per pair and batch (scale 2⁻⁶⁴).
    pub three: Vec<FixedComplex>,
}

impl SizeBin {
    fn new(waves: usize, pairs: usize) -> Self {
        Self {
            count: vec![0; BATCHES],
            two: vec![FixedComplex::default(); waves * BATCHES],
            three: vec![FixedComplex::default(); pairs * BATCHES],
        }
    }

    pub fn total(&self) -> u64 {
        self.count.iter().sum()
    }

    fn merge(&mut self, o: &SizeBin) {
        for (a, b) in self.count.iter_mut().zip(&o.count) {
            *a += b;
        }
        for (a, b) in self.two.iter_mut().zip(&o.two) {
            a.add(*b);
        }
        for (a, b) in self.three.iter_mut().zip(&o.three) {
            a.add(*b);
        }
    }
}

/// Worker-local sums for `P̂(|C|=n)`, `τ̂(k;n)` and `τ̂⁽³⁾(k,l;n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorAccumulator {
    dim: usize,
    waves: Vec<WaveVector>,
    pairs: Vec<(usize, usize)>,
    bins: BTreeMap<usize, SizeBin>,
    batch_samples: Vec<u64>,
    truncated: u64,
}

impl EstimatorAccumulator {
    /// Tracks `τ̂` at every wave in `waves` and `τ̂⁽³⁾` at every pair of
    /// indices into `waves`.
    pub fn new(dim: usize, waves: Vec<WaveVector>, pairs: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(w) = waves.iter().find(|w| w.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: w.dim(),
            });
        }
        if pairs.iter().any(|&(a, b)| a >= waves.len() || b >= waves.len()) {
            return Err(Error::InvalidArgument("pair refers to an unknown wave".into()));
        }
        Ok(Self {
            dim,
            waves,
            pairs,
            bins: BTreeMap::new(),
            batch_samples: vec![0; BATCHES],
            truncated: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn waves(&self) -> &[WaveVector] {
        &self.waves
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn total_samples(&self) -> u64 {
        self.batch_samples.iter().sum()
    }

    pub fn truncated(&self) -> u64 {
        self.truncated
    }

    pub fn bin(&self, n: usize) -> Option<&SizeBin> {
        self.bins.get(&n)
    }

    /// Sizes with at least one cluster, ascending.
    pub fn sizes(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.bins.iter().map(|(&n, b)| (n, b.total()))
    }

    /// Adds one sample. Truncated clusters count towards the total but are
    /// not binned.
    pub fn add(&mut self, c: &Cluster, stream_index: u64) -> Result<()> {
        if c.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: c.dim(),
            });
        }
        let b = (stream_index % BATCHES as u64) as usize;
        self.batch_samples[b] += 1;
        if c.is_truncated() {
            self.truncated += 1;
            return Ok(());
        }
        let sums: Vec<FixedComplex> = self
            .waves
            .iter()
            .map(|w| fourier_sum(c, w).map(FixedComplex::quantise))
            .collect::<Result<_>>()?;
        let (nw, np) = (self.waves.len(), self.pairs.len());
        let bin = self.bins.entry(c.size()).or_insert_with(|| SizeBin::new(nw, np));
        bin.count[b] += 1;
        for (w, s) in sums.iter().enumerate() {
            bin.two[w * BATCHES + b].add(*s);
        }
        for (p, &(k, l)) in self.pairs.iter().enumerate() {
            bin.three[p * BATCHES + b].add(sums[k].mul(sums[l]));
        }
        Ok(())
    }

    pub fn merge(mut self, other: &EstimatorAccumulator) -> Result<Self> {
        if self.dim != other.dim || self.waves != other.waves || self.pairs != other.pairs {
            return Err(Error::InvalidArgument(
                "accumulators track different observables".into(),
            ));
        }
        for (a, b) in self.batch_samples.iter_mut().zip(&other.batch_samples) {
            *a += b;
        }
        self.truncated += other.truncated;
        for (&n, bin) in &other.bins {
            match self.bins.get_mut(&n) {
                Some(mine) => mine.merge(bin),
                None => {
                    self.bins.insert(n, bin.clone());
                }
            }
        }
        Ok(self)
    }

    fn wave_index(&self, k: &WaveVector) -> Result<usize> {
        self.waves
            .iter()
            .position(|w| w == k)
            .ok_or_else(|| Error::InvalidArgument("wave vector is not tracked by this accumulator".into()))
    }

    fn pair_index(&self, k: &WaveVector, l: &WaveVector) -> Result<usize> {
        let (a, b) = (self.wave_index(k)?, self.wave_index(l)?);
        self.pairs
            .iter()
            .position(|&p| p == (a, b))
            .ok_or_else(|| Error::InvalidArgument("wave pair is not tracked by this accumulator".into()))
    }

    fn nonempty_bin(&self, n: usize) -> Result<&SizeBin> {
        if self.total_samples() == 0 {
            return Err(Error::EmptyAccumulator);
        }
        match self.bins.get(&n) {
            Some(b) if b.total() > 0 => Ok(b),
            _ => Err(Error::EmptyBin(n)),
        }
    }

    /// Fixed-point `Σ F_k` over size-`n` clusters (scale 2⁻³²).
    pub fn two_point_sum(&self, k: &WaveVector, n: usize) -> Result<FixedComplex> {
        let w = self.wave_index(k)?;
        let bin = self.nonempty_bin(n)?;
        Ok(sum_fixed(&bin.two[w * BATCHES..(w + 1) * BATCHES]))
    }

    /// Fixed-point `Σ F_k F_l` over size-`n` clusters (scale 2⁻⁶⁴).
    pub fn three_point_sum(&self, k: &WaveVector, l: &WaveVector, n: usize) -> Result<FixedComplex> {
        let p = self.pair_index(k, l)?;
        let bin = self.nonempty_bin(n)?;
        Ok(sum_fixed(&bin.three[p * BATCHES..(p + 1) * BATCHES]))
    }

    fn batch_denominators(&self) -> Vec<f64> {
        self.batch_samples.iter().map(|&v| v as f64).collect()
    }
}

fn sum_fixed(v: &[FixedComplex]) -> FixedComplex {
    let mut s = FixedComplex::default();
    for x in v {
        s.add(*x);
    }
    s
}

/// `P̂(|C|=n)` with binomial standard errors, for every observed size.
pub fn estimate_size_distribution(acc: &EstimatorAccumulator) -> Result<BTreeMap<usize, Estimate>> {
    let total = acc.total_samples();
    if total == 0 {
        return Err(Error::EmptyAccumulator);
    }
    let nf = total as f64;
    Ok(acc
        .bins
        .iter()
        .map(|(&n, b)| {
            let p = b.total() as f64 / nf;
            (
                n,
                Estimate {
                    value: p,
                    stderr: (p * (1.0 - p) / nf).sqrt(),
                },
            )
        })
        .collect())
}

/// `τ̂(k;n) = (1/N) Σ_{|C|=n} Σ_{x∈C} e^{ik·x}`.
pub fn estimate_tau_hat(acc: &EstimatorAccumulator, k: &WaveVector, n: usize) -> Result<ComplexEstimate> {
    let w = acc.wave_index(k)?;
    let bin = acc.nonempty_bin(n)?;
    let cells = &bin.two[w * BATCHES..(w + 1) * BATCHES];
    let s = sum_fixed(cells);
    let total = acc.total_samples() as f64;
    let re: Vec<f64> = cells.iter().map(|c| from_fixed(c.re)).collect();
    let im: Vec<f64> = cells.iter().map(|c| from_fixed(c.im)).collect();
    Ok(ComplexEstimate {
        value: Complex64::new(from_fixed(s.re), from_fixed(s.im)) / total,
        stderr: complex_stderr(&re, &im, &acc.batch_denominators()),
    })
}

/// `q̂ₙ(k) = τ̂(k;n) / (n P̂(|C|=n))`, the mean of `(1/n) Σ_{x∈C} e^{ik·x}`
/// over size-`n` clusters.
pub fn estimate_qn_hat(acc: &EstimatorAccumulator, k: &WaveVector, n: usize) -> Result<ComplexEstimate> {
    let w = acc.wave_index(k)?;
    let bin = acc.nonempty_bin(n)?;
    let cells = &bin.two[w * BATCHES..(w + 1) * BATCHES];
    let s = sum_fixed(cells);
    let nf = n as f64;
    let denom = nf * bin.total() as f64;
    let re: Vec<f64> = cells.iter().map(|c| from_fixed(c.re)).collect();
    let im: Vec<f64> = cells.iter().map(|c| from_fixed(c.im)).collect();
    let counts: Vec<f64> = bin.count.iter().map(|&c| nf * c as f64).collect();
    Ok(ComplexEstimate {
        value: Complex64::new(from_fixed(s.re) / denom, from_fixed(s.im) / denom),
        stderr: complex_stderr(&re, &im, &counts),
    })
}

/// `τ̂⁽³⁾(k,l;n) = (1/N) Σ_{|C|=n} (Σ_x e^{ik·x})(Σ_y e^{il·y})`.
pub fn estimate_tau3_hat(
    acc: &EstimatorAccumulator,
    k: &WaveVector,
    l: &WaveVector,
    n: usize,
) -> Result<ComplexEstimate> {
    let p = acc.pair_index(k, l)?;
    let bin = acc.nonempty_bin(n)?;
    let cells = &bin.three[p * BATCHES..(p + 1) * BATCHES];
    let s = sum_fixed(cells);
    let scale = FIX_SCALE * FIX_SCALE;
    let total = acc.total_samples() as f64;
    let re: Vec<f64> = cells.iter().map(|c| c.re as f64 / scale).collect();
    let im: Vec<f64> = cells.iter().map(|c| c.im as f64 / scale).collect();
    Ok(ComplexEstimate {
        value: Complex64::new(s.re as f64 / scale, s.im as f64 / scale) / total,
        stderr: complex_stderr(&re, &im, &acc.batch_denominators()),
    })
}

/// Observable tracked by a [`ZWeightedAccumulator`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Probe {
    /// `Σ_{x∈C} e^{ik·x}`.
    Wave(WaveVector),
    /// `(1/d) Σ_i Σ_{x∈C} cos(k x_i)`.
    AxisMean(f64),
}

impl Probe {
    pub fn evaluate(&self, c: &Cluster) -> Result<Complex64> {
        match self {
            Probe::Wave(k) => fourier_sum(c, k),
            Probe::AxisMean(k) => Ok(Complex64::new(axis_mean_cos_sum(c, *k), 0.0)),
        }
    }
}

/// Per-cluster features shared by several [`ZWeightedAccumulator`]s.
#[derive(Clone, Debug)]
pub struct ClusterFeatures {
    pub size: usize,
    pub truncated: bool,
    pub probes: Vec<Complex64>,
    /// `(1/d) Σ_x |x|²`.
    pub second_moment: f64,
    /// Largest colour uniform over the cluster's sites; the cluster is green
    /// free at `z` exactly when this is below `z`.
    pub max_colour: Option<f64>,
}

impl ClusterFeatures {
    pub fn compute(c: &Cluster, probes: &[Probe], max_colour: Option<f64>) -> Result<Self> {
        Ok(Self {
            size: c.size(),
            truncated: c.is_truncated(),
            probes: probes.iter().map(|p| p.evaluate(c)).collect::<Result<_>>()?,
            second_moment: axis_mean_second_moment(c),
            max_colour,
        })
    }
}

/// Sums of `z^{|C|} F(C)` (reweighted) and `1[C green free] F(C)` (explicit
/// green sites) per probe and batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZWeightedAccumulator {
    z: f64,
    probes: Vec<Probe>,
    reweighted: Vec<Complex64>,
    green: Vec<Complex64>,
    moment: Vec<f64>,
    batch_samples: Vec<u64>,
    green_samples: Vec<u64>,
    truncated: u64,
}

impl ZWeightedAccumulator {
    pub fn new(z: f64, probes: Vec<Probe>) -> Result<Self> {
        if !(0.0..1.0).contains(&z) {
            return Err(Error::InvalidArgument(format!("z = {z} must lie in [0, 1)")));
        }
        let n = probes.len() * BATCHES;
        Ok(Self {
            z,
            probes,
            reweighted: vec![Complex64::new(0.0, 0.0); n],
            green: vec![Complex64::new(0.0, 0.0); n],
            moment: vec![0.0; BATCHES],
            batch_samples: vec![0; BATCHES],
            green_samples: vec![0; BATCHES],
            truncated: 0,
        })
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn probes(&self) -> &[Probe] {
        &self.probes
    }

    pub fn total_samples(&self) -> u64 {
        self.batch_samples.iter().sum()
    }

    pub fn truncated(&self) -> u64 {
        self.truncated
    }

    /// Adds one sample; `features.probes` must follow `self.probes`.
    /// Truncated clusters carry weight at most `z^{cap+1}` and are dropped.
    pub fn add_features(&mut self, f: &ClusterFeatures, stream_index: u64) -> Result<()> {
        if f.probes.len() != self.probes.len() {
            return Err(Error::LengthMismatch(self.probes.len(), f.probes.len()));
        }
        let b = (stream_index % BATCHES as u64) as usize;
        self.batch_samples[b] += 1;
        if f.max_colour.is_some() {
            self.green_samples[b] += 1;
        }
        if f.truncated {
            self.truncated += 1;
            return Ok(());
        }
        let w = self.z.powi(f.size as i32);
        let free = f.max_colour.is_some_and(|u| u < self.z);
        for (i, v) in f.probes.iter().enumerate() {
            self.reweighted[i * BATCHES + b] += v * w;
            if free {
                self.green[i * BATCHES + b] += v;
            }
        }
        self.moment[b] += w * f.second_moment;
        Ok(())
    }

    pub fn add(&mut self, c: &Cluster, stream_index: u64, max_colour: Option<f64>) -> Result<()> {
        let f = ClusterFeatures::compute(c, &self.probes, max_colour)?;
        self.add_features(&f, stream_index)
    }

    pub fn merge(mut self, o: &ZWeightedAccumulator) -> Result<Self> {
        if self.z != o.z || self.probes != o.probes {
            return Err(Error::InvalidArgument(
                "accumulators track different observables".into(),
            ));
        }
        for (a, b) in self.reweighted.iter_mut().zip(&o.reweighted) {
            *a += b;
        }
        for (a, b) in self.green.iter_mut().zip(&o.green) {
            *a += b;
        }
        for (a, b) in self.moment.iter_mut().zip(&o.moment) {
            *a += b;
        }
        for (a, b) in self.batch_samples.iter_mut().zip(&o.batch_samples) {
            *a += b;
        }
        for (a, b) in self.green_samples.iter_mut().zip(&o.green_samples) {
            *a += b;
        }
        self.truncated += o.truncated;
        Ok(self)
    }

    fn probe_index(&self, p: &Probe) -> Result<usize> {
        self.probes
            .iter()
            .position(|q| q == p)
            .ok_or_else(|| Error::InvalidArgument("probe is not tracked by this accumulator".into()))
    }

    /// `E[z^{|C|} (1/d) Σ_x |x|²]`.
    pub fn second_moment(&self) -> Result<Estimate> {
        let n = self.total_samples();
        if n == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let den: Vec<f64> = self.batch_samples.iter().map(|&v| v as f64).collect();
        Ok(Estimate {
            value: self.moment.iter().sum::<f64>() / n as f64,
            stderr: ratio_stderr(&self.moment, &den),
        })
    }
}

fn z_estimate(cells: &[Complex64], samples: &[u64]) -> Result<ComplexEstimate> {
    let n: u64 = samples.iter().sum();
    if n == 0 {
        return Err(Error::EmptyAccumulator);
    }
    let den: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
    let re: Vec<f64> = cells.iter().map(|c| c.re).collect();
    let im: Vec<f64> = cells.iter().map(|c| c.im).collect();
    Ok(ComplexEstimate {
        value: cells.iter().sum::<Complex64>() / n as f64,
        stderr: complex_stderr(&re, &im, &den),
    })
}

/// `τ̂_z = (1/N) Σ z^{|C|} F(C)`, by reweighting every sampled cluster.
pub fn estimate_tau_z_hat(acc: &ZWeightedAccumulator, probe: &Probe) -> Result<ComplexEstimate> {
    if acc.z >= 1.0 {
        return Err(Error::InvalidArgument("z must be below 1".into()));
    }
    let i = acc.probe_index(probe)?;
    z_estimate(&acc.reweighted[i * BATCHES..(i + 1) * BATCHES], &acc.batch_samples)
}

/// `τ̂_z` from clusters free of green sites, each site being green with
/// probability `1 − z` independently.
pub fn estimate_tau_z_hat_green(acc: &ZWeightedAccumulator, probe: &Probe) -> Result<ComplexEstimate> {
    let i = acc.probe_index(probe)?;
    z_estimate(&acc.green[i * BATCHES..(i + 1) * BATCHES], &acc.green_samples)
}

/// Coefficient-wise check of `z d/dz τ̂_z(k) = τ̂⁽³⁾_z(k,0)`: entry `i` of
/// each slice is the coefficient of `z^{i+1}`. Returns
/// `max_n |n τ̂(k;n) − τ̂⁽³⁾(k,0;n)| zⁿ`.
pub fn check_derivative_identity(tau: &[Complex64], tau3: &[Complex64], z: f64) -> Result<f64> {
    if tau.len() != tau3.len() {
        return Err(Error::LengthMismatch(tau.len(), tau3.len()));
    }
    if !(0.0..=1.0).contains(&z) {
        return Err(Error::InvalidArgument(format!("z = {z} must lie in [0, 1]")));
    }
    Ok(tau
        .iter()
        .zip(tau3)
        .enumerate()
        .map(|(i, (a, b))| {
            let n = (i + 1) as f64;
            (a * n - b).norm() * z.powi(i as i32 + 1)
        })
        .fold(0.0, f64::max))
}

/// Axis-averaged `q̂` on a uniform grid of scaled arguments `u`, pooled over
/// dyadic size bins `[2^j, 2^{j+1})`: a size-`m` cluster contributes
/// `(1/(m d)) Σ_i Σ_{x∈C} cos(u m^{−1/4} x_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingProfile {
    dim: usize,
    u_step: f64,
    u_points: usize,
    bins: Vec<u32>,
    counts: Vec<u64>,
    sums: Vec<f64>,
}

impl ScalingProfile {
    pub fn new(dim: usize, bins: Vec<u32>, u_max: f64, u_points: usize) -> Result<Self> {
        if u_points < 2 || !(u_max > 0.0 && u_max.is_finite()) {
            return Err(Error::InvalidArgument(
                "need a positive u range and at least two points".into(),
            ));
        }
        let nb = bins.len();
        Ok(Self {
            dim,
            u_step: u_max / (u_points - 1) as f64,
            u_points,
            bins,
            counts: vec![0; nb * BATCHES],
            sums: vec![0.0; nb * BATCHES * u_points],
        })
    }

    pub fn bins(&self) -> &[u32] {
        &self.bins
    }

    pub fn u_max(&self) -> f64 {
        self.u_step * (self.u_points - 1) as f64
    }

    pub fn add(&mut self, c: &Cluster, stream_index: u64) {
        if c.is_truncated() {
            return;
        }
        let m = c.size();
        let j = usize::BITS - 1 - m.leading_zeros();
        let Some(slot) = self.bins.iter().position(|&b| b == j) else {
            return;
        };
        // histogram of |x_i| over sites and axes
        let mut hist: Vec<u64> = Vec::new();
        for x in c.sites() {
            for &v in x {
                let a = v.unsigned_abs() as usize;
                if a >= hist.len() {
                    hist.resize(a + 1, 0);
                }
                hist[a] += 1;
            }
        }
        let b = (stream_index % BATCHES as u64) as usize;
        let row = (slot * BATCHES + b) * self.u_points;
        let norm = 1.0 / (m * self.dim) as f64;
        let scale = self.u_step * (m as f64).powf(-0.25);
        let out = &mut self.sums[row..row + self.u_points];
        for (v, &h) in hist.iter().enumerate() {
            if h == 0 {
                continue;
            }
            let w = h as f64 * norm;
            // cos(i φ) by the Chebyshev recurrence
            let phi = scale * v as f64;
            let two_cos = 2.0 * phi.cos();
            let (mut prev, mut cur) = (phi.cos(), 1.0);
            for o in out.iter_mut() {
                *o += w * cur;
                let next = two_cos * cur - prev;
                prev = cur;
                cur = next;
            }
        }
        self.counts[slot * BATCHES + b] += 1;
    }

    pub fn merge(mut self, o: &ScalingProfile) -> Result<Self> {
        if self.dim != o.dim || self.bins != o.bins || self.u_points != o.u_points || self.u_step != o.u_step {
            return Err(Error::InvalidArgument("profiles use different grids".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&o.counts) {
            *a += b;
        }
        for (a, b) in self.sums.iter_mut().zip(&o.sums) {
            *a += b;
        }
        Ok(self)
    }

    pub fn clusters(&self, j: u32) -> Result<u64> {
        let slot = self.slot(j)?;
        Ok(self.counts[slot * BATCHES..(slot + 1) * BATCHES].iter().sum())
    }

    fn slot(&self, j: u32) -> Result<usize> {
        self.bins
            .iter()
            .position(|&b| b == j)
            .ok_or_else(|| Error::InvalidArgument(format!("dyadic bin {j} is not profiled")))
    }

    fn grid_estimate(&self, slot: usize, i: usize) -> Estimate {
        let counts: Vec<f64> = self.counts[slot * BATCHES..(slot + 1) * BATCHES]
            .iter()
            .map(|&c| c as f64)
            .collect();
        let sums: Vec<f64> = (0..BATCHES)
            .map(|b| self.sums[(slot * BATCHES + b) * self.u_points + i])
            .collect();
        let total: f64 = counts.iter().sum();
        Estimate {
            value: sums.iter().sum::<f64>() / total,
            stderr: ratio_stderr(&sums, &counts),
        }
    }

    /// Bin-pooled `q̂(u m^{−1/4})`, linearly interpolated in `u`.
    pub fn q_at(&self, j: u32, u: f64) -> Result<Estimate> {
        let slot = self.slot(j)?;
        if self.clusters(j)? == 0 {
            return Err(Error::EmptyBin(1usize << j));
        }
        let u = u.abs();
        let pos = u / self.u_step;
        if pos > (self.u_points - 1) as f64 {
            return Err(Error::InvalidArgument(format!("u = {u} beyond the profiled range")));
        }
        let i = (pos.floor() as usize).min(self.u_points - 2);
        let t = pos - i as f64;
        let (a, b) = (self.grid_estimate(slot, i), self.grid_estimate(slot, i + 1));
        Ok(Estimate {
            value: a.value * (1.0 - t) + b.value * t,
            stderr: a.stderr.max(b.stderr),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{LatticePoint, ModelSpec};
    use crate::rng::RngStreamSpec;
    use crate::sampler::{grow_cluster, ClusterGrower};
    use std::f64::consts::PI;

    fn pt(c: &[i64]) -> LatticePoint {
        LatticePoint::new(c.to_vec()).unwrap()
    }

    fn waves2() -> Vec<WaveVector> {
        [0.0, PI / 2.0, PI]
            .iter()
            .map(|&k| WaveVector::lattice(vec![k, 0.0]).unwrap())
            .collect()
    }

    fn run(
        m: &ModelSpec,
        seed: u64,
        count: u64,
        waves: Vec<WaveVector>,
        pairs: Vec<(usize, usize)>,
    ) -> EstimatorAccumulator {
        let mut acc = EstimatorAccumulator::new(m.dimension(), waves, pairs).unwrap();
        let mut g = ClusterGrower::new();
        for s in 0..count {
            let c = g.grow(m, RngStreamSpec::new(seed, s), 64, false);
            acc.add(c, s).unwrap();
        }
        acc
    }

    #[test]
    fn wave_vector_validation() {
        assert!(WaveVector::lattice(vec![4.0]).is_err());
        assert!(WaveVector::new(vec![4.0]).is_ok());
        assert!(WaveVector::new(vec![f64::NAN]).is_err());
        assert!(WaveVector::new(vec![]).is_err());
        assert!(WaveVector::along_axis(2, 2, 1.0).is_err());
    }

    #[test]
    fn fourier_sum_of_small_cluster() {
        let c = Cluster::from_parts(&[pt(&[0]), pt(&[1])], &[(pt(&[0]), pt(&[1]))]).unwrap();
        let v = fourier_sum(&c, &WaveVector::new(vec![PI]).unwrap()).unwrap();
        assert!(v.re.abs() < 1e-15 && v.im.abs() < 1e-15);
        assert_eq!(axis_mean_cos_sum(&c, 0.0), 2.0);
        assert_eq!(axis_mean_second_moment(&c), 1.0);
    }

    #[test]
    fn d1_pair_probability() {
        let m = ModelSpec::nearest_neighbour(1, 0.5).unwrap();
        let acc = run(&m, 11, 100_000, vec![WaveVector::zero(1)], vec![]);
        let p = estimate_size_distribution(&acc).unwrap();
        let e = p[&2];
        assert!((e.value - 0.25).abs() < 3.0 * e.stderr, "{e:?}");
        assert!(p.values().map(|e| e.value).sum::<f64>() <= 1.0);
    }

    #[test]
    fn exact_estimator_identities() {
        let m = ModelSpec::nearest_neighbour(2, 0.4).unwrap();
        let w = waves2();
        let acc = run(&m, 3, 20_000, w.clone(), vec![(0, 0), (1, 0), (2, 0), (1, 2)]);
        let sizes = estimate_size_distribution(&acc).unwrap();
        let zero = &w[0];
        for (n, cnt) in acc.sizes().collect::<Vec<_>>() {
            let nf = n as f64;
            // accumulator level, bit exact
            let s3 = acc.three_point_sum(zero, zero, n).unwrap();
            assert_eq!(s3.re, (n * n) as i128 * cnt as i128 * (1i128 << 64));
            for k in &w {
                let s2 = acc.two_point_sum(k, n).unwrap();
                let s3 = acc.three_point_sum(k, zero, n).unwrap();
                assert_eq!(s3.re, s2.re * nf as i128 * (1i128 << 32));
                assert_eq!(s3.im, s2.im * nf as i128 * (1i128 << 32));
            }
            let q0 = estimate_qn_hat(&acc, zero, n).unwrap();
            assert_eq!(q0.value, Complex64::new(1.0, 0.0));
            let t0 = estimate_tau_hat(&acc, zero, n).unwrap().value.re;
            assert!((t0 - nf * sizes[&n].value).abs() <= 1e-15 * t0);
            let t3 = estimate_tau3_hat(&acc, zero, zero, n).unwrap().value.re;
            assert!((t3 - nf * nf * sizes[&n].value).abs() <= 1e-15 * t3);
            for k in &w {
                assert!(estimate_qn_hat(&acc, k, n).unwrap().value.norm() <= 1.0 + 1e-9);
            }
        }
        let t1 = estimate_tau_hat(&acc, &w[2], 1).unwrap().value;
        assert_eq!(t1, Complex64::new(sizes[&1].value, 0.0));
        assert!(matches!(estimate_tau_hat(&acc, zero, 10_000), Err(Error::EmptyBin(_))));
    }

    #[test]
    fn merge_is_exact() {
        let m = ModelSpec::nearest_neighbour(2, 0.45).unwrap();
        let w = waves2();
        let pairs = vec![(1, 2), (2, 2)];
        let make = |range: std::ops::Range<u64>| {
            let mut acc = EstimatorAccumulator::new(2, w.clone(), pairs.clone()).unwrap();
            for s in range {
                let c = grow_cluster(&m, RngStreamSpec::new(5, s), 200).unwrap();
                acc.add(&c, s).unwrap();
            }
            acc
        };
        let (a, b, c) = (make(0..300), make(300..700), make(700..1000));
        let left = a.clone().merge(&b).unwrap().merge(&c).unwrap();
        let right = a.clone().merge(&b.clone().merge(&c).unwrap()).unwrap();
        let swapped = c.clone().merge(&a).unwrap().merge(&b).unwrap();
        assert_eq!(left, right);
        assert_eq!(left, swapped);
        assert_eq!(left, make(0..1000));
    }

    #[test]
    fn conjugate_symmetry() {
        let m = ModelSpec::nearest_neighbour(2, 0.4).unwrap();
        let k = WaveVector::lattice(vec![0.7, -0.3]).unwrap();
        let mk = k.scaled(-1.0).unwrap();
        let acc = run(&m, 8, 5_000, vec![k.clone(), mk.clone()], vec![]);
        for (n, _) in acc.sizes() {
            let a = estimate_tau_hat(&acc, &k, n).unwrap().value;
            let b = estimate_tau_hat(&acc, &mk, n).unwrap().value;
            assert!((a - b.conj()).norm() < 1e-9);
        }
    }

    #[test]
    fn z_weighted_limits() {
        assert!(ZWeightedAccumulator::new(1.0, vec![]).is_err());
        let m = ModelSpec::nearest_neighbour(1, 0.5).unwrap();
        let probe = Probe::Wave(WaveVector::zero(1));
        let mut acc = ZWeightedAccumulator::new(0.0, vec![probe.clone()]).unwrap();
        for s in 0..100 {
            let c = grow_cluster(&m, RngStreamSpec::new(1, s), 100).unwrap();
            acc.add(&c, s, None).unwrap();
        }
        assert_eq!(
            estimate_tau_z_hat(&acc, &probe).unwrap().value,
            Complex64::new(0.0, 0.0)
        );
    }

    #[test]
    fn z_weighted_one_dimensional_closed_form() {
        // τ̂_z(0) = Σ n² p^{n−1} (1−p)² zⁿ = (1−p)² z (1 + pz) / (1 − pz)³
        let (p, z): (f64, f64) = (0.5, 0.8);
        let exact = (1.0 - p) * (1.0 - p) * z * (1.0 + p * z) / (1.0 - p * z).powi(3);
        let m = ModelSpec::nearest_neighbour(1, p).unwrap();
        let probe = Probe::Wave(WaveVector::zero(1));
        let mut acc = ZWeightedAccumulator::new(z, vec![probe.clone()]).unwrap();
        let mut g = ClusterGrower::new();
        for s in 0..100_000 {
            let spec = RngStreamSpec::new(21, s);
            let c = g.grow(&m, spec, 200, false);
            let mut colours = spec.aux_rng();
            let top = (0..c.size()).map(|_| colours.uniform()).fold(0.0, f64::max);
            acc.add(c, s, Some(top)).unwrap();
        }
        let r = estimate_tau_z_hat(&acc, &probe).unwrap();
        let g = estimate_tau_z_hat_green(&acc, &probe).unwrap();
        assert!((r.value.re - exact).abs() < 3.0 * r.stderr, "{r:?} vs {exact}");
        assert!((g.value.re - exact).abs() < 3.0 * g.stderr, "{g:?} vs {exact}");
    }

    #[test]
    fn derivative_identity_checks_lengths() {
        let a = vec![Complex64::new(0.25, 0.0), Complex64::new(0.1, 0.0)];
        let b = vec![Complex64::new(0.25, 0.0), Complex64::new(0.2, 0.0)];
        assert_eq!(check_derivative_identity(&a, &b, 0.5).unwrap(), 0.0);
        assert!(check_derivative_identity(&a, &b[..1], 0.5).is_err());
    }

    #[test]
    fn scaling_profile_matches_direct_sum() {
        let m = ModelSpec::nearest_neighbour(3, 0.24).unwrap();
        let mut prof = ScalingProfile::new(3, vec![3, 4, 5], 4.0, 401).unwrap();
        let mut direct = vec![(0.0, 0u64); 3];
        let us = [0.0, 1.0, 2.5];
        let mut g = ClusterGrower::new();
        for s in 0..3000 {
            let c = g.grow(&m, RngStreamSpec::new(2, s), 200, false);
            prof.add(c, s);
            if c.size() >= 16 && c.size() < 32 {
                let mf = c.size() as f64;
                for (slot, &u) in direct.iter_mut().zip(&us) {
                    slot.0 += axis_mean_cos_sum(c, u * mf.powf(-0.25)) / mf;
                }
                direct[0].1 += 1;
            }
        }
        let n = direct[0].1 as f64;
        assert!(n > 10.0);
        for (i, &u) in us.iter().enumerate() {
            let q = prof.q_at(4, u).unwrap().value;
            assert!((q - direct[i].0 / n).abs() < 1e-10, "u={u}: {q}");
        }
        assert!((prof.q_at(4, 0.0).unwrap().value - 1.0).abs() < 1e-14);
        assert!(prof.q_at(4, 5.0).is_err());
        assert!(prof.q_at(7, 1.0).is_err());
    }
}
