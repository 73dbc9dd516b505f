//! Scientific runs: `p_c` bisection, the size-distribution exponent, the
//! constants `C` and `D`, the `q̂ₙ` scaling trend, the generating-function
//! shape check and the backbone probe.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::{num, ExperimentConfig, FitSettings, PcSettings, Table, Theorem3Settings};
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_qn_hat, estimate_size_distribution, estimate_tau3_hat, estimate_tau_hat, estimate_tau_z_hat,
    estimate_tau_z_hat_green, ClusterFeatures, ComplexEstimate, Estimate, EstimatorAccumulator, Probe, ScalingProfile,
    WaveVector, ZWeightedAccumulator,
};
use crate::ise::two_point_hat_closed_form;
use crate::lambda::TWO_THREE_HALVES;
use crate::lattice::{LatticePoint, ModelSpec};
use crate::oracle::{exact_cluster_law, EnumerationDomain};
use crate::sampler::{backbone_indices, fold_batch, BatchPlan};

/// Outcome of an acceptance-tagged check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// Cluster sizes of a batch; `counts[n]` clusters had exactly `n` sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeHistogram {
    pub cap: usize,
    pub counts: Vec<u64>,
    pub truncated: u64,
    pub samples: u64,
}

impl SizeHistogram {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            counts: vec![0; cap + 1],
            truncated: 0,
            samples: 0,
        }
    }

    pub fn record(&mut self, size: usize, truncated: bool) {
        self.samples += 1;
        if truncated {
            self.truncated += 1;
        } else {
            self.counts[size] += 1;
        }
    }

    pub fn merge(mut self, o: SizeHistogram) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&o.counts) {
            *a += b;
        }
        self.truncated += o.truncated;
        self.samples += o.samples;
        self
    }

    /// Clusters with at least `n` sites (truncated ones included).
    pub fn tail(&self, n: usize) -> u64 {
        self.counts.iter().skip(n).sum::<u64>() + self.truncated
    }

    /// Clusters with size in `[lo, hi)`; `hi` must not exceed `cap + 1`.
    pub fn in_range(&self, lo: usize, hi: usize) -> u64 {
        self.counts[lo.min(self.counts.len())..hi.min(self.counts.len())]
            .iter()
            .sum()
    }
}

pub fn sample_sizes(
    m: &ModelSpec,
    seed: u64,
    first_stream: u64,
    count: u64,
    cap: usize,
    workers: Option<usize>,
) -> Result<SizeHistogram> {
    let plan = BatchPlan {
        seed,
        first_stream,
        count,
        workers,
    };
    fold_batch(
        plan,
        || SizeHistogram::new(cap),
        |h, g, spec| {
            let c = g.grow(m, spec, cap, false);
            h.record(c.size(), c.is_truncated());
        },
        SizeHistogram::merge,
    )
}

/// One bisection probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcProbe {
    pub p: f64,
    /// Quadratic coefficient of `log₂ P̂(|C| ≥ 2^j)` in `j`; positive means
    /// supercritical.
    pub curvature: f64,
    pub overflow_fraction: f64,
    pub samples: u64,
    pub aborted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPointEstimate {
    pub p_hat: f64,
    pub interval: (f64, f64),
    pub window: [u32; 2],
    pub samples_per_probe: u64,
    pub seed: u64,
    pub probes: Vec<PcProbe>,
    /// Adjacent probes (ordered by `p`) whose curvature decreases.
    pub monotonicity_violations: usize,
    /// Set when no transition was found below `p = 1`.
    pub boundary: bool,
}

impl CriticalPointEstimate {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["p", "curvature", "overflow_fraction", "samples", "aborted"]);
        for pr in &self.probes {
            t.push(vec![
                num(pr.p),
                num(pr.curvature),
                num(pr.overflow_fraction),
                pr.samples.to_string(),
                pr.aborted.to_string(),
            ]);
        }
        t
    }
}

/// Curvature of `y_j = log₂ tail_j` on equally spaced `j`, by projection on
/// the centred quadratic (orthogonal to constants and the linear term).
fn tail_curvature(h: &SizeHistogram, window: [u32; 2]) -> f64 {
    let n = h.samples as f64;
    let js: Vec<f64> = (window[0]..=window[1]).map(|j| j as f64).collect();
    let ys: Vec<f64> = (window[0]..=window[1])
        .map(|j| {
            let t = h.tail(1usize << j) as f64;
            (t.max(0.5) / n).log2()
        })
        .collect();
    let mean_j = js.iter().sum::<f64>() / js.len() as f64;
    let t2: Vec<f64> = js.iter().map(|j| (j - mean_j).powi(2)).collect();
    let mean_t2 = t2.iter().sum::<f64>() / t2.len() as f64;
    let basis: Vec<f64> = t2.iter().map(|v| v - mean_t2).collect();
    let num: f64 = basis.iter().zip(&ys).map(|(b, y)| b * y).sum();
    let den: f64 = basis.iter().map(|b| b * b).sum();
    num / den
}

fn probe_pc(m: &ModelSpec, s: &PcSettings, seed: u64, workers: Option<usize>) -> Result<PcProbe> {
    let cap = 1usize << s.window[1];
    // first wave alone, to stop early on clearly supercritical densities
    let first = s.samples.min(8192);
    let mut h = sample_sizes(m, seed, 0, first, cap, workers)?;
    let frac = h.truncated as f64 / h.samples as f64;
    if frac > s.overflow_abort {
        return Ok(PcProbe {
            p: m.bond_density(),
            curvature: f64::INFINITY,
            overflow_fraction: frac,
            samples: h.samples,
            aborted: true,
        });
    }
    if s.samples > first {
        h = h.merge(sample_sizes(m, seed, first, s.samples - first, cap, workers)?);
    }
    Ok(PcProbe {
        p: m.bond_density(),
        curvature: tail_curvature(&h, s.window),
        overflow_fraction: h.truncated as f64 / h.samples as f64,
        samples: h.samples,
        aborted: false,
    })
}

/// Bisection on the sign of the tail curvature. Every probe reuses the same
/// seed and streams, so neighbouring probes see common random numbers.
///
/// The search starts from `[1/(z−1), min(1, 2/(z−1))]` (`z` the coordination
/// number; `1/(z−1)` is a rigorous lower bound on `p_c`) and doubles the
/// upper end until it probes supercritical.
pub fn estimate_pc(m: &ModelSpec, s: &PcSettings, seed: u64, workers: Option<usize>) -> Result<CriticalPointEstimate> {
    if s.samples < 100_000 {
        return Err(Error::InvalidArgument("p_c probes need at least 1e5 clusters".into()));
    }
    if !(s.width > 0.0) {
        return Err(Error::InvalidArgument("interval width must be positive".into()));
    }
    if s.window[0] >= s.window[1] || s.window[1] - s.window[0] < 2 {
        return Err(Error::InvalidArgument(
            "fit window must span at least three exponents".into(),
        ));
    }
    let mut probes = Vec::new();
    let probe = |p: f64, probes: &mut Vec<PcProbe>| -> Result<bool> {
        if probes.len() >= s.max_probes {
            return Err(Error::BudgetExhausted(format!(
                "{} probes used before reaching width {}",
                probes.len(),
                s.width
            )));
        }
        let r = probe_pc(&m.with_bond_density(p)?, s, seed, workers)?;
        let supercritical = r.curvature > 0.0;
        probes.push(r);
        Ok(supercritical)
    };
    let z = m.coordination() as f64;
    let mut lo = (1.0 / (z - 1.0)).min(1.0);
    let mut boundary = false;
    let mut hi = lo;
    if lo < 1.0 {
        hi = (2.0 * lo).min(1.0);
        loop {
            if probe(hi, &mut probes)? {
                break;
            }
            if hi >= 1.0 {
                boundary = true;
                lo = 1.0;
                break;
            }
            lo = hi;
            hi = (2.0 * hi).min(1.0);
        }
    } else {
        boundary = true;
    }
    while !boundary && hi - lo > s.width {
        let mid = 0.5 * (lo + hi);
        if probe(mid, &mut probes)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut sorted: Vec<&PcProbe> = probes.iter().collect();
    sorted.sort_by(|a, b| a.p.total_cmp(&b.p));
    let monotonicity_violations = sorted.windows(2).filter(|w| w[1].curvature < w[0].curvature).count();
    let (p_hat, interval) = if boundary {
        (1.0, (1.0, 1.0))
    } else {
        (0.5 * (lo + hi), (lo, hi))
    };
    Ok(CriticalPointEstimate {
        p_hat,
        interval,
        window: s.window,
        samples_per_probe: s.samples,
        seed,
        probes,
        monotonicity_violations,
        boundary,
    })
}

/// Sizes plus the `q̂` scaling profile of a run at fixed `p`.
#[derive(Clone, Debug)]
pub struct ScalingRun {
    pub p: f64,
    pub sizes: SizeHistogram,
    pub profile: ScalingProfile,
}

pub fn scaling_run(m: &ModelSpec, cfg: &ExperimentConfig) -> Result<ScalingRun> {
    let f = &cfg.fit;
    let mut bins: Vec<u32> = f
        .constant_windows
        .iter()
        .flat_map(|w| w[0]..w[1])
        .chain(f.trend_sizes.iter().map(|&n| dyadic(n)))
        .collect();
    bins.sort_unstable();
    bins.dedup();
    let template = ScalingProfile::new(m.dimension(), bins, f.u_max, f.u_points)?;
    let cap = cfg.size_cap;
    let (sizes, profile) = fold_batch(
        BatchPlan::new(cfg.seed, cfg.samples).with_workers(cfg.workers),
        || (SizeHistogram::new(cap), template.clone()),
        |(h, prof), g, spec| {
            let c = g.grow(m, spec, cap, false);
            h.record(c.size(), c.is_truncated());
            prof.add(c, spec.stream_index);
        },
        |(h1, p1), (h2, p2)| (h1.merge(h2), p1.merge(&p2).expect("profiles share a grid")),
    )?;
    Ok(ScalingRun {
        p: m.bond_density(),
        sizes,
        profile,
    })
}

fn dyadic(n: usize) -> u32 {
    usize::BITS - 1 - n.max(1).leading_zeros()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentEstimate {
    pub name: String,
    /// Fitted slope (for `delta`, of `log P̂(|C|=n)` against `log n`).
    pub slope: f64,
    pub stderr: f64,
    /// Exponent implied by the slope.
    pub value: f64,
    pub window: [u32; 2],
    /// `(bin centre, mean P̂(|C|=n) over the bin, clusters)`.
    pub points: Vec<(f64, f64, u64)>,
}

/// Weighted least squares of `y` on `x`: `(intercept, slope, se(slope))`.
fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((a, c), b)| b * (a - mx) * (c - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let resid: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((a, c), b)| b * (c - intercept - slope * a).powi(2))
        .sum();
    let dof = (x.len() as f64 - 2.0).max(1.0);
    // scale by the observed scatter, but never below the nominal weights
    let scale = (resid / dof).max(1.0);
    (intercept, slope, (scale / sxx).sqrt())
}

/// Slope of `log P̂(|C|=n)` over dyadic bins `[2^j, 2^{j+1})`, `j` in the
/// window; the mean-field prediction is `−3/2`, i.e. `δ = 2`.
pub fn check_delta(sizes: &SizeHistogram, window: [u32; 2]) -> Result<ExponentEstimate> {
    if window[1] < window[0] + 3 {
        return Err(Error::InvalidArgument(
            "fit window must span at least three dyadic bins".into(),
        ));
    }
    if (1usize << window[1]) > sizes.cap + 1 {
        return Err(Error::InvalidArgument("fit window extends beyond the size cap".into()));
    }
    let n = sizes.samples as f64;
    let (mut x, mut y, mut w, mut points) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for j in window[0]..window[1] {
        let (lo, hi) = (1usize << j, 1usize << (j + 1));
        let count = sizes.in_range(lo, hi);
        if count == 0 {
            return Err(Error::InsufficientData(format!("dyadic bin {j} is empty")));
        }
        let density = count as f64 / n / (hi - lo) as f64;
        let centre = ((lo * (hi - 1)) as f64).sqrt();
        x.push(centre.ln());
        y.push(density.ln());
        w.push(count as f64);
        points.push((centre, density, count));
    }
    let (_, slope, stderr) = weighted_line(&x, &y, &w);
    Ok(ExponentEstimate {
        name: "delta".into(),
        slope,
        stderr,
        value: -1.0 / (1.0 + slope),
        window,
        points,
    })
}

/// Constants fitted on one dyadic window `[2^{j_lo}, 2^{j_hi})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowFit {
    pub window: [u32; 2],
    pub c: f64,
    pub c_stderr: f64,
    pub d: f64,
    /// `(k, q̂(k/D̂) − Â⁽²⁾(k))`.
    pub residuals: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub c: f64,
    pub d: f64,
    pub windows: Vec<WindowFit>,
    /// `(z, ε₁(z))`.
    pub eps1: Vec<(f64, f64)>,
    /// `(k, ε₂(k))`.
    pub eps2: Vec<(f64, f64)>,
    pub notes: Vec<String>,
}

/// Bin-pooled `q̂` at scaled argument `u`, weighting bins by their counts.
fn pooled_q(profile: &ScalingProfile, window: [u32; 2], u: f64) -> Result<Estimate> {
    let mut total = 0.0;
    let mut value = 0.0;
    let mut var = 0.0;
    for j in window[0]..window[1] {
        let w = profile.clusters(j)? as f64;
        if w == 0.0 {
            continue;
        }
        let e = profile.q_at(j, u)?;
        value += w * e.value;
        var += (w * e.stderr).powi(2);
        total += w;
    }
    if total == 0.0 {
        return Err(Error::InsufficientData(format!("no clusters in window {window:?}")));
    }
    Ok(Estimate {
        value: value / total,
        stderr: var.sqrt() / total,
    })
}

fn collapse_sse(profile: &ScalingProfile, window: [u32; 2], ks: &[f64], d: f64) -> Result<f64> {
    let mut sse = 0.0;
    for &k in ks {
        let q = pooled_q(profile, window, k / d)?.value;
        sse += (q - two_point_hat_closed_form(k)).powi(2);
    }
    Ok(sse)
}

/// `D̂` minimising `Σ_k (q̂(k/D) − Â⁽²⁾(k))²`: a logarithmic scan followed
/// by golden-section refinement.
fn fit_d(profile: &ScalingProfile, window: [u32; 2], ks: &[f64]) -> Result<f64> {
    let ks: Vec<f64> = ks.iter().copied().filter(|&k| k != 0.0).map(f64::abs).collect();
    let k_max = ks.iter().copied().fold(0.0, f64::max);
    if k_max == 0.0 {
        return Err(Error::InvalidArgument("k-grid needs a nonzero entry to fit D".into()));
    }
    let d_min = k_max / profile.u_max();
    let d_max = d_min * 1e4;
    let steps = 400;
    let grid: Vec<f64> = (0..=steps)
        .map(|i| d_min * (d_max / d_min).powf(i as f64 / steps as f64))
        .collect();
    let mut best = (f64::INFINITY, 0);
    for (i, &d) in grid.iter().enumerate() {
        let v = collapse_sse(profile, window, &ks, d)?;
        if v < best.0 {
            best = (v, i);
        }
    }
    let (mut a, mut b) = (grid[best.1.saturating_sub(1)], grid[(best.1 + 1).min(steps)]);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (
        collapse_sse(profile, window, &ks, c)?,
        collapse_sse(profile, window, &ks, d)?,
    );
    for _ in 0..80 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = collapse_sse(profile, window, &ks, c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = collapse_sse(profile, window, &ks, d)?;
        }
    }
    Ok(0.5 * (a + b))
}

/// `Ĉ` and `D̂` on every configured window; the last window supplies the
/// reported constants.
///
/// `Ĉ = √(8π) P̂(2^{j_lo} ≤ |C| < 2^{j_hi}) / Σ_{n in window} n^{−3/2}`.
pub fn fit_constants(run: &ScalingRun, ks: &[f64], f: &FitSettings) -> Result<ScalingFit> {
    if f.constant_windows.is_empty() {
        return Err(Error::InvalidArgument("no fit windows configured".into()));
    }
    let n = run.sizes.samples as f64;
    let mut windows = Vec::new();
    let mut notes = Vec::new();
    for &w in &f.constant_windows {
        let (lo, hi) = (1usize << w[0], 1usize << w[1]);
        if hi > run.sizes.cap + 1 {
            return Err(Error::InvalidArgument(format!(
                "window {w:?} extends beyond the size cap"
            )));
        }
        let count = run.sizes.in_range(lo, hi);
        if count == 0 {
            return Err(Error::InsufficientData(format!("window {w:?} is empty")));
        }
        let norm: f64 = (lo..hi).map(|m| (m as f64).powf(-1.5)).sum();
        let scale = (8.0 * std::f64::consts::PI).sqrt() / norm;
        let p = count as f64 / n;
        let c = scale * p;
        let c_stderr = scale * (p * (1.0 - p) / n).sqrt();
        let d = match fit_d(&run.profile, w, ks) {
            Ok(d) => d,
            Err(e) => {
                notes.push(format!("collapse on window {w:?} failed: {e}"));
                f64::NAN
            }
        };
        let mut residuals = Vec::new();
        for &k in ks {
            let r = if k == 0.0 {
                // q̂(0) = 1 = Â⁽²⁾(0) identically
                0.0
            } else if d.is_finite() {
                pooled_q(&run.profile, w, k / d)?.value - two_point_hat_closed_form(k)
            } else {
                f64::NAN
            };
            residuals.push((k, r));
        }
        windows.push(WindowFit {
            window: w,
            c,
            c_stderr,
            d,
            residuals,
        });
    }
    let last = windows.last().expect("at least one window");
    Ok(ScalingFit {
        c: last.c,
        d: last.d,
        eps1: Vec::new(),
        eps2: Vec::new(),
        windows: windows.clone(),
        notes,
    })
}

/// `sup_k |q̂(k/D̂) − Â⁽²⁾(k)|` on the dyadic bin holding each size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub bin: u32,
    pub clusters: u64,
    pub discrepancy: f64,
    /// Largest standard error among the grid points.
    pub stderr: f64,
}

pub fn qn_convergence(run: &ScalingRun, d_hat: f64, ks: &[f64], sizes: &[usize]) -> Result<Vec<ConvergenceRow>> {
    let mut rows = Vec::new();
    for &n in sizes {
        let j = dyadic(n);
        let clusters = run.profile.clusters(j)?;
        if clusters == 0 {
            return Err(Error::InsufficientData(format!("no clusters near n = {n}")));
        }
        let mut disc: f64 = 0.0;
        let mut se: f64 = 0.0;
        for &k in ks {
            let q = run.profile.q_at(j, k / d_hat)?;
            disc = disc.max((q.value - two_point_hat_closed_form(k)).abs());
            se = se.max(q.stderr);
        }
        rows.push(ConvergenceRow {
            n,
            bin: j,
            clusters,
            discrepancy: disc,
            stderr: se,
        });
    }
    Ok(rows)
}

/// Everything `fit` reports.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub p: f64,
    pub delta: ExponentEstimate,
    pub constants: ScalingFit,
    pub convergence: Vec<ConvergenceRow>,
    pub checks: Vec<Check>,
}

pub fn run_fit(m: &ModelSpec, cfg: &ExperimentConfig) -> Result<FitReport> {
    let run = scaling_run(m, cfg)?;
    let delta = check_delta(&run.sizes, cfg.fit.delta_window)?;
    let constants = fit_constants(&run, &cfg.k_grid, &cfg.fit)?;
    let convergence = qn_convergence(&run, constants.d, &cfg.k_grid, &cfg.fit.trend_sizes)?;
    let slope_ok = (delta.slope - cfg.fit.slope_target).abs() <= cfg.fit.slope_tolerance;
    let trend_ok = convergence.windows(2).all(|w| w[1].discrepancy <= w[0].discrepancy);
    let checks = vec![
        Check::new(
            "delta-slope",
            slope_ok,
            format!(
                "slope {:.4} ± {:.4}, target {} ± {}",
                delta.slope, delta.stderr, cfg.fit.slope_target, cfg.fit.slope_tolerance
            ),
        ),
        Check::new(
            "qn-trend",
            trend_ok,
            convergence
                .iter()
                .map(|r| format!("n={}: {:.5}", r.n, r.discrepancy))
                .collect::<Vec<_>>()
                .join(", "),
        ),
    ];
    Ok(FitReport {
        p: m.bond_density(),
        delta,
        constants,
        convergence,
        checks,
    })
}

impl FitReport {
    pub fn tables(&self) -> Vec<(&'static str, Table)> {
        let mut delta = Table::new(["n_centre", "p_hat_density", "clusters"]);
        for &(c, d, k) in &self.delta.points {
            delta.push(vec![num(c), num(d), k.to_string()]);
        }
        let mut consts = Table::new(["j_lo", "j_hi", "C", "C_stderr", "D", "k", "residual"]);
        for w in &self.constants.windows {
            for &(k, r) in &w.residuals {
                consts.push(vec![
                    w.window[0].to_string(),
                    w.window[1].to_string(),
                    num(w.c),
                    num(w.c_stderr),
                    num(w.d),
                    num(k),
                    num(r),
                ]);
            }
        }
        let mut conv = Table::new(["n", "bin", "clusters", "discrepancy", "stderr"]);
        for r in &self.convergence {
            conv.push(vec![
                r.n.to_string(),
                r.bin.to_string(),
                r.clusters.to_string(),
                num(r.discrepancy),
                num(r.stderr),
            ]);
        }
        vec![
            ("delta.csv", delta),
            ("constants.csv", consts),
            ("convergence.csv", conv),
        ]
    }
}

/// `Λ_z(k)` for real `z < 1`.
fn lambda_real(z: f64, k: f64) -> f64 {
    1.0 / (k * k + TWO_THREE_HALVES * (1.0 - z).sqrt())
}

/// Tabulated `τ̂_z` for the shape fit: `tau[i][j]` at `z_grid[i]` and
/// `k_grid[j]` (axis-averaged), `tau0[i]` at `k = 0`, and the z-weighted
/// second moment `E[z^{|C|} (1/d) Σ_x |x|²]` on the fit row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Data {
    pub z_grid: Vec<f64>,
    pub k_grid: Vec<f64>,
    pub tau0: Vec<Estimate>,
    pub tau: Vec<Vec<Estimate>>,
    pub z_row: f64,
    pub second_moment: f64,
}

/// Fits `τ̂_z(k) ≈ C Λ_z(Dk)`.
///
/// * `Ĉ`: intercept of the least-squares line of `τ̂_z(0)/Λ_z(0)` against
///   `√(1−z)` over the z-grid; `ε₁(z) = |τ̂_z(0)/(Ĉ Λ_z(0)) − 1|`.
/// * `D̂`: matches the small-`k` curvature on the fit row,
///   `D̂² = m² E[z^{|C|} Σ_x x₁²] / (2 τ̂_z(0))` with `m² = 2^{3/2}√(1−z)`;
///   `ε₂(k) = |[τ̂_z(k)/τ̂_z(0)] / [Λ_z(D̂k)/Λ_z(0)] − 1|`.
pub fn fit_theorem3(data: &Theorem3Data) -> Result<ScalingFit> {
    if data.z_grid.len() < 2 {
        return Err(Error::InvalidArgument("need at least two z values".into()));
    }
    let row = data
        .z_grid
        .iter()
        .position(|&z| z == data.z_row)
        .ok_or_else(|| Error::InvalidArgument("fit row is not on the z-grid".into()))?;
    let s: Vec<f64> = data.z_grid.iter().map(|z| (1.0 - z).sqrt()).collect();
    let r: Vec<f64> = data
        .z_grid
        .iter()
        .zip(&data.tau0)
        .map(|(&z, t)| t.value / lambda_real(z, 0.0))
        .collect();
    let (c, _, _) = weighted_line(&s, &r, &vec![1.0; s.len()]);
    if !(c > 0.0) {
        return Err(Error::InsufficientData(format!("fitted C = {c} is not positive")));
    }
    let eps1 = data
        .z_grid
        .iter()
        .zip(&r)
        .map(|(&z, ri)| (z, (ri / c - 1.0).abs()))
        .collect();
    let z = data.z_row;
    let m2 = TWO_THREE_HALVES * (1.0 - z).sqrt();
    let t0 = data.tau0[row].value;
    let d = (m2 * data.second_moment / (2.0 * t0)).sqrt();
    let eps2 = data
        .k_grid
        .iter()
        .zip(&data.tau[row])
        .map(|(&k, t)| {
            let model = lambda_real(z, d * k) / lambda_real(z, 0.0);
            (k, ((t.value / t0) / model - 1.0).abs())
        })
        .collect();
    Ok(ScalingFit {
        c,
        d,
        windows: Vec::new(),
        eps1,
        eps2,
        notes: Vec::new(),
    })
}

#[derive(Clone, Debug)]
pub struct Theorem3Report {
    pub p: f64,
    pub data: Theorem3Data,
    pub fit: ScalingFit,
    pub checks: Vec<Check>,
}

/// Samples at `p`, tabulates axis-averaged `τ̂_z(k)` and fits the shape.
pub fn check_theorem3_shape(m: &ModelSpec, cfg: &ExperimentConfig, s: &Theorem3Settings) -> Result<Theorem3Report> {
    let mut probes = vec![Probe::AxisMean(0.0)];
    probes.extend(s.k_grid.iter().map(|&k| Probe::AxisMean(k)));
    let accs: Vec<ZWeightedAccumulator> = cfg
        .z_grid
        .iter()
        .map(|&z| ZWeightedAccumulator::new(z, probes.clone()))
        .collect::<Result<_>>()?;
    let cap = cfg.size_cap;
    let accs = fold_batch(
        BatchPlan::new(cfg.seed, cfg.samples).with_workers(cfg.workers),
        || accs.clone(),
        |accs, g, spec| {
            let c = g.grow(m, spec, cap, false);
            let f = ClusterFeatures::compute(c, &probes, None).expect("probes match the dimension");
            for a in accs.iter_mut() {
                a.add_features(&f, spec.stream_index)
                    .expect("features match the probes");
            }
        },
        |a, b| {
            a.into_iter()
                .zip(&b)
                .map(|(x, y)| x.merge(y).expect("same observables"))
                .collect()
        },
    )?;
    let real = |e: crate::estimators::ComplexEstimate| Estimate {
        value: e.value.re,
        stderr: e.stderr,
    };
    let mut tau0 = Vec::new();
    let mut tau = Vec::new();
    for a in &accs {
        tau0.push(real(estimate_tau_z_hat(a, &probes[0])?));
        tau.push(
            probes[1..]
                .iter()
                .map(|p| estimate_tau_z_hat(a, p).map(real))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let row = cfg
        .z_grid
        .iter()
        .position(|&z| z == s.z_row)
        .ok_or_else(|| Error::InvalidArgument("theorem3 z-row must be on the z-grid".into()))?;
    let data = Theorem3Data {
        z_grid: cfg.z_grid.clone(),
        k_grid: s.k_grid.clone(),
        tau0,
        tau,
        z_row: s.z_row,
        second_moment: accs[row].second_moment()?.value,
    };
    let fit = fit_theorem3(&data)?;
    let mut checks = Vec::new();
    let trend_z: Vec<(f64, f64)> = fit.eps1.iter().copied().filter(|&(z, _)| z <= s.z_row).collect();
    checks.push(Check::new(
        "eps1-decreasing",
        trend_z.windows(2).all(|w| w[1].1 < w[0].1),
        format!("{trend_z:?}"),
    ));
    let mut by_k = fit.eps2.clone();
    by_k.sort_by(|a, b| b.0.total_cmp(&a.0));
    checks.push(Check::new(
        "eps2-decreasing",
        by_k.windows(2).all(|w| w[1].1 < w[0].1),
        format!("{by_k:?}"),
    ));
    Ok(Theorem3Report {
        p: m.bond_density(),
        data,
        fit,
        checks,
    })
}

impl Theorem3Report {
    pub fn tables(&self) -> Vec<(&'static str, Table)> {
        let mut t = Table::new(["z", "k", "tau_z_hat", "stderr", "C_Lambda", "relative_error"]);
        let (c, d) = (self.fit.c, self.fit.d);
        for (i, &z) in self.data.z_grid.iter().enumerate() {
            let mut row = |k: f64, e: &Estimate| {
                let model = c * lambda_real(z, d * k);
                t.push(vec![
                    num(z),
                    num(k),
                    num(e.value),
                    num(e.stderr),
                    num(model),
                    num(e.value / model - 1.0),
                ]);
            };
            row(0.0, &self.data.tau0[i]);
            for (j, &k) in self.data.k_grid.iter().enumerate() {
                row(k, &self.data.tau[i][j]);
            }
        }
        let mut eps = Table::new(["kind", "argument", "residual"]);
        for &(z, e) in &self.fit.eps1 {
            eps.push(vec!["eps1".into(), num(z), num(e)]);
        }
        for &(k, e) in &self.fit.eps2 {
            eps.push(vec!["eps2".into(), num(k), num(e)]);
        }
        vec![("theorem3.csv", t), ("residuals.csv", eps)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneRow {
    pub bin: u32,
    pub clusters: u64,
    pub mean_size: f64,
    pub mean_backbone: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneTable {
    pub rows: Vec<BackboneRow>,
    /// Slope of `log mean backbone` against `log mean size`.
    pub exponent: f64,
    pub exponent_stderr: f64,
}

#[derive(Clone)]
struct BackboneBin {
    clusters: u64,
    size: f64,
    backbone: f64,
    backbone_sq: f64,
}

/// Mean backbone between the origin and a uniformly chosen site, per
/// dyadic size bin. Exploratory: no pass/fail.
pub fn backbone_scaling_probe(m: &ModelSpec, cfg: &ExperimentConfig) -> Result<BackboneTable> {
    let cap = cfg.size_cap;
    let bins = dyadic(cap) as usize + 1;
    let empty = BackboneBin {
        clusters: 0,
        size: 0.0,
        backbone: 0.0,
        backbone_sq: 0.0,
    };
    let acc = fold_batch(
        BatchPlan::new(cfg.seed, cfg.samples).with_workers(cfg.workers),
        || vec![empty.clone(); bins],
        |acc, g, spec| {
            let c = g.grow(m, spec, cap, true);
            if c.is_truncated() {
                return;
            }
            let target = spec.aux_rng().below(c.size() as u64) as usize;
            let b = backbone_indices(c, 0, target)
                .expect("origin and target share the cluster")
                .len() as f64;
            let slot = &mut acc[dyadic(c.size()) as usize];
            slot.clusters += 1;
            slot.size += c.size() as f64;
            slot.backbone += b;
            slot.backbone_sq += b * b;
        },
        |mut a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                x.clusters += y.clusters;
                x.size += y.size;
                x.backbone += y.backbone;
                x.backbone_sq += y.backbone_sq;
            }
            a
        },
    )?;
    let mut rows = Vec::new();
    for (j, b) in acc.iter().enumerate() {
        if b.clusters == 0 {
            continue;
        }
        let k = b.clusters as f64;
        let mean = b.backbone / k;
        let var = if b.clusters > 1 {
            (b.backbone_sq / k - mean * mean).max(0.0) * k / (k - 1.0)
        } else {
            0.0
        };
        rows.push(BackboneRow {
            bin: j as u32,
            clusters: b.clusters,
            mean_size: b.size / k,
            mean_backbone: mean,
            stderr: (var / k).sqrt(),
        });
    }
    // fit on bins with enough clusters and nontrivial size
    let fit: Vec<&BackboneRow> = rows.iter().filter(|r| r.bin >= 2 && r.clusters >= 10).collect();
    let (exponent, exponent_stderr) = if fit.len() >= 3 {
        let x: Vec<f64> = fit.iter().map(|r| r.mean_size.ln()).collect();
        let y: Vec<f64> = fit.iter().map(|r| r.mean_backbone.ln()).collect();
        let w: Vec<f64> = fit
            .iter()
            .map(|r| {
                let rel = r.stderr / r.mean_backbone;
                if rel > 0.0 {
                    1.0 / (rel * rel)
                } else {
                    r.clusters as f64
                }
            })
            .collect();
        let (_, s, se) = weighted_line(&x, &y, &w);
        (s, se)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(BackboneTable {
        rows,
        exponent,
        exponent_stderr,
    })
}

impl BackboneTable {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["bin", "clusters", "mean_size", "mean_backbone", "stderr"]);
        for r in &self.rows {
            t.push(vec![
                r.bin.to_string(),
                r.clusters.to_string(),
                num(r.mean_size),
                num(r.mean_backbone),
                num(r.stderr),
            ]);
        }
        t
    }
}

/// Backbone size of the path `0, 1, …, len−1` between its ends, for the
/// d = 1 sanity fixture.
pub fn path_backbone_size(len: usize) -> Result<usize> {
    use crate::sampler::{extract_backbone, Cluster};
    let sites: Vec<LatticePoint> = (0..len as i64).map(|i| LatticePoint::from(&[i][..])).collect();
    let bonds: Vec<(LatticePoint, LatticePoint)> = sites.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
    let c = Cluster::from_parts(&sites, &bonds)?;
    Ok(extract_backbone(&c, &sites[0], &sites[len - 1])?.size())
}

/// Wave vectors and the index pairs used for three-point sums.
pub type Observables = (Vec<WaveVector>, Vec<(usize, usize)>);

/// Wave vectors `{0} ∪ {k e₁ : k ∈ ks, k ≠ 0}` with the pairs `(k, 0)` and
/// `(k, k)`, the default observables of `estimate`.
pub fn axis_observables(d: usize, ks: &[f64]) -> Result<Observables> {
    let mut waves = vec![WaveVector::zero(d)];
    for &k in ks.iter().filter(|&&k| k != 0.0) {
        waves.push(WaveVector::along_axis(d, 0, k)?);
    }
    let mut pairs: Vec<(usize, usize)> = (0..waves.len()).flat_map(|i| [(i, 0), (i, i)]).collect();
    pairs.dedup();
    Ok((waves, pairs))
}

pub fn accumulate(
    m: &ModelSpec,
    plan: BatchPlan,
    cap: usize,
    waves: Vec<WaveVector>,
    pairs: Vec<(usize, usize)>,
) -> Result<EstimatorAccumulator> {
    let template = EstimatorAccumulator::new(m.dimension(), waves, pairs)?;
    fold_batch(
        plan,
        || Ok(template.clone()),
        |acc: &mut Result<EstimatorAccumulator>, g, spec| {
            if let Ok(a) = acc {
                if let Err(e) = a.add(g.grow(m, spec, cap, false), spec.stream_index) {
                    *acc = Err(e);
                }
            }
        },
        |a, b| a?.merge(&b?),
    )?
}

/// Long-format table of `P̂`, `τ̂`, `q̂` and `τ̂⁽³⁾` for `n ≤ max_n`.
pub fn estimates_table(cfg: &ExperimentConfig, p: f64, acc: &EstimatorAccumulator, max_n: usize) -> Result<Table> {
    let d = acc.dim();
    let mut header: Vec<String> = ["d", "model", "L", "p", "quantity", "n_bin"].map(String::from).to_vec();
    header.extend((1..=d).map(|i| format!("k{i}")));
    header.extend((1..=d).map(|i| format!("l{i}")));
    header.extend(["re", "im", "stderr", "samples"].map(String::from));
    let mut t = Table::new(header);
    let samples = acc.total_samples().to_string();
    let blank = || vec![String::new(); d];
    let comps = |w: &WaveVector| w.components().iter().map(|&v| num(v)).collect::<Vec<_>>();
    let mut row = |q: &str, n: usize, k: Vec<String>, l: Vec<String>, re: f64, im: f64, se: f64| {
        let mut r = vec![
            d.to_string(),
            cfg.model_label().to_string(),
            cfg.range().to_string(),
            num(p),
            q.to_string(),
            n.to_string(),
        ];
        r.extend(k);
        r.extend(l);
        r.extend([num(re), num(im), num(se), samples.clone()]);
        t.push(r);
    };
    for (&n, e) in estimate_size_distribution(acc)?.iter().filter(|(&n, _)| n <= max_n) {
        row("P", n, blank(), blank(), e.value, 0.0, e.stderr);
        for w in acc.waves() {
            for (q, e) in [
                ("tau", estimate_tau_hat(acc, w, n)?),
                ("q", estimate_qn_hat(acc, w, n)?),
            ] {
                row(q, n, comps(w), blank(), e.value.re, e.value.im, e.stderr);
            }
        }
        for &(i, j) in acc.pairs() {
            let (k, l) = (&acc.waves()[i], &acc.waves()[j]);
            let e = estimate_tau3_hat(acc, k, l, n)?;
            row("tau3", n, comps(k), comps(l), e.value.re, e.value.im, e.stderr);
        }
    }
    Ok(t)
}

/// Monte Carlo against exact enumeration for `n ≤ n_max` on `Z^d`, `d ≤ 2`,
/// with wave vectors `{0, π/2, π} × {0}` and all pairs of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub comparisons: usize,
    pub within: usize,
    /// Largest `|estimate − exact| / stderr` seen.
    pub worst_z: f64,
}

impl OracleComparison {
    pub fn pass_rate(&self) -> f64 {
        self.within as f64 / self.comparisons as f64
    }
}

pub fn oracle_equivalence(
    d: usize,
    p: f64,
    n_max: usize,
    seeds: &[u64],
    samples: u64,
    workers: Option<usize>,
) -> Result<OracleComparison> {
    let law = exact_cluster_law(&EnumerationDomain::new(d, n_max)?, p)?;
    let m = ModelSpec::nearest_neighbour(d, p)?;
    let raw: Vec<Vec<f64>> = [0.0, std::f64::consts::FRAC_PI_2, std::f64::consts::PI]
        .iter()
        .map(|&k| {
            let mut v = vec![0.0; d];
            v[0] = k;
            v
        })
        .collect();
    let waves = raw
        .iter()
        .map(|v| WaveVector::new(v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, usize)> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
    let exact_p = law.size_distribution();
    let mut out = OracleComparison {
        comparisons: 0,
        within: 0,
        worst_z: 0.0,
    };
    let mut compare = |est: Complex64, se: f64, exact: Complex64| {
        let dev = (est - exact).norm();
        out.comparisons += 1;
        if dev <= 3.0 * se {
            out.within += 1;
        }
        if se > 0.0 {
            out.worst_z = out.worst_z.max(dev / se);
        } else if dev > 0.0 {
            out.worst_z = f64::INFINITY;
        }
    };
    for &seed in seeds {
        let plan = BatchPlan::new(seed, samples).with_workers(workers);
        // clusters above n_max are only counted, so growth can stop there
        let acc = accumulate(&m, plan, n_max, waves.clone(), pairs.clone())?;
        let sizes = estimate_size_distribution(&acc)?;
        for n in 1..=n_max {
            let e = sizes.get(&n).copied().unwrap_or(Estimate {
                value: 0.0,
                stderr: 0.0,
            });
            compare(Complex64::new(e.value, 0.0), e.stderr, Complex64::new(exact_p[n], 0.0));
            for (w, k) in waves.iter().zip(&raw) {
                let e = estimate_tau_hat(&acc, w, n)?;
                compare(e.value, e.stderr, law.tau_hat(k, n)?);
            }
            for &(i, j) in &pairs {
                let e = estimate_tau3_hat(&acc, &waves[i], &waves[j], n)?;
                compare(e.value, e.stderr, law.tau3_hat(&raw[i], &raw[j], n)?);
            }
        }
    }
    Ok(out)
}

/// `τ̂_z` for one probe, by reweighting and from green-free clusters, on the
/// same samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreenComparison {
    pub reweighted: ComplexEstimate,
    pub green: ComplexEstimate,
}

impl GreenComparison {
    /// `|reweighted − green|` in units of the combined standard error.
    pub fn z_score(&self) -> f64 {
        let se = self.reweighted.stderr.hypot(self.green.stderr);
        (self.reweighted.value - self.green.value).norm() / se
    }
}

pub fn green_cross_check(m: &ModelSpec, z: f64, probe: Probe, plan: BatchPlan, cap: usize) -> Result<GreenComparison> {
    let template = ZWeightedAccumulator::new(z, vec![probe.clone()])?;
    let acc = fold_batch(
        plan,
        || Ok(template.clone()),
        |acc: &mut Result<ZWeightedAccumulator>, g, spec| {
            if let Ok(a) = acc {
                let c = g.grow(m, spec, cap, false);
                let mut colours = spec.aux_rng();
                let top = (0..c.size()).map(|_| colours.uniform()).fold(0.0, f64::max);
                if let Err(e) = a.add(c, spec.stream_index, Some(top)) {
                    *acc = Err(e);
                }
            }
        },
        |a, b| a?.merge(&b?),
    )??;
    Ok(GreenComparison {
        reweighted: estimate_tau_z_hat(&acc, &probe)?,
        green: estimate_tau_z_hat_green(&acc, &probe)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curvature_sign() {
        let mut h = SizeHistogram::new(1 << 10);
        // exact power-law tail: zero curvature
        h.samples = 1 << 20;
        for j in 0..=10u32 {
            let n = 1usize << j;
            let tail = |m: usize| ((1u64 << 20) as f64 / (m as f64).sqrt()) as u64;
            let next = if j < 10 { tail(n * 2) } else { 0 };
            if j < 10 {
                h.counts[n] = tail(n) - next;
            } else {
                h.truncated = tail(n);
            }
        }
        assert!(tail_curvature(&h, [2, 10]).abs() < 1e-3);
    }

    #[test]
    fn one_dimensional_pc_is_the_boundary() {
        let m = ModelSpec::nearest_neighbour(1, 0.5).unwrap();
        let est = estimate_pc(&m, &PcSettings::default(), 1, None).unwrap();
        assert!(est.boundary);
        assert_eq!(est.p_hat, 1.0);
        assert!(est.probes.is_empty());
    }

    #[test]
    fn delta_slope_of_exact_power_law() {
        let mut h = SizeHistogram::new(1 << 13);
        h.samples = 1 << 40;
        for n in 1..=(1usize << 13) {
            h.counts[n] = ((1u64 << 40) as f64 * 0.3 * (n as f64).powf(-1.5)) as u64;
        }
        let e = check_delta(&h, [7, 13]).unwrap();
        assert!((e.slope + 1.5).abs() < 0.01, "{}", e.slope);
        assert!((e.value - 2.0).abs() < 0.1);
        assert!(check_delta(&h, [7, 9]).is_err());
        assert!(check_delta(&h, [7, 14]).is_err());
    }

    #[test]
    fn theorem3_fit_on_exact_model() {
        // data generated from C Λ_z(Dk) exactly: zero residuals
        let (c, d) = (1.7, 0.8);
        let z_grid = vec![0.9, 0.95, 0.98, 0.99];
        let k_grid = vec![0.4, 0.2];
        let e = |v| Estimate { value: v, stderr: 0.0 };
        let tau0 = z_grid.iter().map(|&z| e(c * lambda_real(z, 0.0))).collect();
        let tau = z_grid
            .iter()
            .map(|&z| k_grid.iter().map(|&k| e(c * lambda_real(z, d * k))).collect())
            .collect();
        let z: f64 = 0.98;
        let m2 = TWO_THREE_HALVES * (1.0 - z).sqrt();
        let t0 = c * lambda_real(z, 0.0);
        let data = Theorem3Data {
            z_grid,
            k_grid,
            tau0,
            tau,
            z_row: z,
            second_moment: 2.0 * t0 * d * d / m2,
        };
        let fit = fit_theorem3(&data).unwrap();
        assert!((fit.c - c).abs() < 1e-12);
        assert!((fit.d - d).abs() < 1e-12);
        assert!(fit.eps1.iter().all(|e| e.1 < 1e-12));
        assert!(fit.eps2.iter().all(|e| e.1 < 1e-12));
    }

    #[test]
    fn path_backbones() {
        for len in 1..8 {
            assert_eq!(path_backbone_size(len).unwrap(), len);
        }
    }
}
