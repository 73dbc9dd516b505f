use num_complex::Complex64;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use iicperc::estimators::{self as est, WaveVector};
use iicperc::experiments;
use iicperc::lattice::{self, LatticePoint};
use iicperc::quadrature::IseEvalConfig;
use iicperc::rng::RngStreamSpec;
use iicperc::{config, ise, lambda, oracle, sampler};

fn err(e: iicperc::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn point(x: Vec<i64>) -> PyResult<LatticePoint> {
    LatticePoint::new(x).map_err(err)
}

fn wave(k: Vec<f64>) -> PyResult<WaveVector> {
    WaveVector::new(k).map_err(err)
}

#[pyclass(name = "ModelSpec", frozen)]
struct PyModelSpec(lattice::ModelSpec);

#[pymethods]
impl PyModelSpec {
    #[staticmethod]
    fn nearest_neighbour(d: usize, p: f64) -> PyResult<Self> {
        lattice::ModelSpec::nearest_neighbour(d, p).map(Self).map_err(err)
    }

    #[staticmethod]
    fn spread_out(d: usize, range: u32, p: f64) -> PyResult<Self> {
        lattice::ModelSpec::spread_out(d, range, p).map(Self).map_err(err)
    }

    #[getter]
    fn dimension(&self) -> usize {
        self.0.dimension()
    }

    #[getter]
    fn bond_density(&self) -> f64 {
        self.0.bond_density()
    }

    #[getter]
    fn coordination(&self) -> usize {
        self.0.coordination()
    }

    #[getter]
    fn range(&self) -> u32 {
        self.0.range()
    }

    fn with_bond_density(&self, p: f64) -> PyResult<Self> {
        self.0.with_bond_density(p).map(Self).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

#[pyclass(name = "Cluster", frozen)]
struct PyCluster(sampler::Cluster);

#[pymethods]
impl PyCluster {
    #[getter]
    fn size(&self) -> usize {
        self.0.size()
    }

    #[getter]
    fn truncated(&self) -> bool {
        self.0.is_truncated()
    }

    fn sites(&self) -> Vec<Vec<i64>> {
        self.0.sites().map(<[i64]>::to_vec).collect()
    }

    /// Occupied bonds found during growth, as pairs of sites.
    fn bonds(&self) -> Vec<(Vec<i64>, Vec<i64>)> {
        self.0
            .occupied_bonds()
            .iter()
            .map(|b| {
                let (x, y) = b.endpoints();
                (x.coords().to_vec(), y.coords().to_vec())
            })
            .collect()
    }

    fn fingerprint(&self) -> u64 {
        self.0.fingerprint()
    }

    fn to_json(&self) -> String {
        self.0.to_json_line()
    }

    fn fourier_sum(&self, k: Vec<f64>) -> PyResult<Complex64> {
        est::fourier_sum(&self.0, &wave(k)?).map_err(err)
    }

    /// Sites on edge-disjoint routes from `x` to `y`.
    fn backbone(&self, x: Vec<i64>, y: Vec<i64>) -> PyResult<Vec<Vec<i64>>> {
        let b = sampler::extract_backbone(&self.0, &point(x)?, &point(y)?).map_err(err)?;
        Ok(b.sites.into_iter().map(LatticePoint::into_coords).collect())
    }

    fn __len__(&self) -> usize {
        self.0.size()
    }
}

#[pyfunction]
#[pyo3(signature = (model, seed, stream, size_cap, record_bonds = true))]
fn grow_cluster(
    model: &PyModelSpec,
    seed: u64,
    stream: u64,
    size_cap: usize,
    record_bonds: bool,
) -> PyResult<PyCluster> {
    if size_cap == 0 {
        return Err(PyValueError::new_err("size_cap must be at least 1"));
    }
    let mut g = sampler::ClusterGrower::new();
    Ok(PyCluster(
        g.grow(&model.0, RngStreamSpec::new(seed, stream), size_cap, record_bonds)
            .clone(),
    ))
}

#[pyfunction]
#[pyo3(signature = (model, seed, count, size_cap, workers = None))]
fn sample_batch(
    py: Python<'_>,
    model: &PyModelSpec,
    seed: u64,
    count: u64,
    size_cap: usize,
    workers: Option<usize>,
) -> PyResult<Vec<PyCluster>> {
    let m = model.0.clone();
    let cs = py
        .detach(move || sampler::sample_batch(&m, seed, size_cap, count, workers))
        .map_err(err)?;
    Ok(cs.into_iter().map(PyCluster).collect())
}

/// Size-conditioned two- and three-point sums over sampled clusters.
#[pyclass(name = "EstimatorAccumulator")]
struct PyAccumulator(est::EstimatorAccumulator);

#[pymethods]
impl PyAccumulator {
    #[new]
    fn new(d: usize, waves: Vec<Vec<f64>>, pairs: Vec<(usize, usize)>) -> PyResult<Self> {
        let waves = waves.into_iter().map(wave).collect::<PyResult<Vec<_>>>()?;
        est::EstimatorAccumulator::new(d, waves, pairs).map(Self).map_err(err)
    }

    /// Grows and adds clusters for streams `first..first+count`.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (model, seed, count, size_cap, first = 0, workers = None))]
    fn sample(
        &mut self,
        py: Python<'_>,
        model: &PyModelSpec,
        seed: u64,
        count: u64,
        size_cap: usize,
        first: u64,
        workers: Option<usize>,
    ) -> PyResult<()> {
        let m = model.0.clone();
        let waves = self.0.waves().to_vec();
        let pairs = self.0.pairs().to_vec();
        let plan = sampler::BatchPlan {
            seed,
            first_stream: first,
            count,
            workers,
        };
        let fresh = py
            .detach(move || experiments::accumulate(&m, plan, size_cap, waves, pairs))
            .map_err(err)?;
        self.0 = self.0.clone().merge(&fresh).map_err(err)?;
        Ok(())
    }

    fn add(&mut self, cluster: &PyCluster, stream: u64) -> PyResult<()> {
        self.0.add(&cluster.0, stream).map_err(err)
    }

    fn merge(&self, other: &PyAccumulator) -> PyResult<Self> {
        self.0.clone().merge(&other.0).map(Self).map_err(err)
    }

    #[getter]
    fn total_samples(&self) -> u64 {
        self.0.total_samples()
    }

    #[getter]
    fn truncated(&self) -> u64 {
        self.0.truncated()
    }

    /// `(n, P̂(|C|=n), stderr)` for every observed size.
    fn size_distribution(&self) -> PyResult<Vec<(usize, f64, f64)>> {
        Ok(est::estimate_size_distribution(&self.0)
            .map_err(err)?
            .into_iter()
            .map(|(n, e)| (n, e.value, e.stderr))
            .collect())
    }

    fn tau_hat(&self, k: Vec<f64>, n: usize) -> PyResult<(Complex64, f64)> {
        let e = est::estimate_tau_hat(&self.0, &wave(k)?, n).map_err(err)?;
        Ok((e.value, e.stderr))
    }

    fn qn_hat(&self, k: Vec<f64>, n: usize) -> PyResult<(Complex64, f64)> {
        let e = est::estimate_qn_hat(&self.0, &wave(k)?, n).map_err(err)?;
        Ok((e.value, e.stderr))
    }

    fn tau3_hat(&self, k: Vec<f64>, l: Vec<f64>, n: usize) -> PyResult<(Complex64, f64)> {
        let e = est::estimate_tau3_hat(&self.0, &wave(k)?, &wave(l)?, n).map_err(err)?;
        Ok((e.value, e.stderr))
    }
}

#[pyclass(name = "ClusterLaw", frozen)]
struct PyClusterLaw(oracle::ClusterLaw);

#[pymethods]
impl PyClusterLaw {
    #[getter]
    fn shapes(&self) -> usize {
        self.0.shapes.len()
    }

    fn size_distribution(&self) -> Vec<f64> {
        self.0.size_distribution()
    }

    fn overflow(&self) -> f64 {
        self.0.overflow()
    }

    fn tau(&self, x: Vec<i64>, n: usize) -> PyResult<f64> {
        self.0.tau(&point(x)?, n).map_err(err)
    }

    fn tau_hat(&self, k: Vec<f64>, n: usize) -> PyResult<Complex64> {
        self.0.tau_hat(&k, n).map_err(err)
    }

    fn tau3_hat(&self, k: Vec<f64>, l: Vec<f64>, n: usize) -> PyResult<Complex64> {
        self.0.tau3_hat(&k, &l, n).map_err(err)
    }
}

/// Exact law of `C(0)` up to `n_max` sites on `Z^d`, `d ≤ 2`.
#[pyfunction]
fn exact_cluster_law(d: usize, n_max: usize, p: f64) -> PyResult<PyClusterLaw> {
    let dom = oracle::EnumerationDomain::new(d, n_max).map_err(err)?;
    oracle::exact_cluster_law(&dom, p).map(PyClusterLaw).map_err(err)
}

#[pyfunction]
fn two_point_hat(k: f64) -> PyResult<f64> {
    ise::two_point_hat(k, &IseEvalConfig::default()).map_err(err)
}

#[pyfunction]
fn two_point_hat_closed_form(k: f64) -> f64 {
    ise::two_point_hat_closed_form(k)
}

#[pyfunction]
fn three_point_hat(k: Vec<f64>, l: Vec<f64>) -> PyResult<f64> {
    ise::three_point_hat(&k, &l, &IseEvalConfig::default()).map_err(err)
}

#[pyfunction]
fn lambda_at(z: Complex64, k: f64) -> PyResult<Complex64> {
    lambda::lambda_at(z, k).map_err(err)
}

/// Coefficients `λ₀..λ_{n_max}` of `Λ_z(k)` in powers of `z`.
#[pyfunction]
#[pyo3(signature = (k, n_max, method = "recursion", radius = 0.5, points = 800))]
fn lambda_coefficients(k: f64, n_max: usize, method: &str, radius: f64, points: usize) -> PyResult<Vec<f64>> {
    match method {
        "recursion" => Ok(lambda::coefficients_by_recursion(k, n_max).coeffs),
        "contour" => Ok(lambda::coefficients_by_contour(k, n_max, radius, points)
            .map_err(err)?
            .coeffs),
        other => Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    }
}

/// Critical-density bisection; returns `(p_hat, lo, hi)`.
#[allow(clippy::too_many_arguments)]
#[pyfunction]
#[pyo3(signature = (model, seed, samples = 100_000, window = (4, 13), width = 5e-4, overflow_abort = 0.5, workers = None))]
fn estimate_pc(
    py: Python<'_>,
    model: &PyModelSpec,
    seed: u64,
    samples: u64,
    window: (u32, u32),
    width: f64,
    overflow_abort: f64,
    workers: Option<usize>,
) -> PyResult<(f64, f64, f64)> {
    let s = config::PcSettings {
        seed: Some(seed),
        samples,
        window: [window.0, window.1],
        width,
        overflow_abort,
        ..config::PcSettings::default()
    };
    let m = model.0.clone();
    let e = py
        .detach(move || experiments::estimate_pc(&m, &s, seed, workers))
        .map_err(err)?;
    Ok((e.p_hat, e.interval.0, e.interval.1))
}

#[pymodule]
fn pyiicperc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelSpec>()?;
    m.add_class::<PyCluster>()?;
    m.add_class::<PyAccumulator>()?;
    m.add_class::<PyClusterLaw>()?;
    m.add_function(wrap_pyfunction!(grow_cluster, m)?)?;
    m.add_function(wrap_pyfunction!(sample_batch, m)?)?;
    m.add_function(wrap_pyfunction!(exact_cluster_law, m)?)?;
    m.add_function(wrap_pyfunction!(two_point_hat, m)?)?;
    m.add_function(wrap_pyfunction!(two_point_hat_closed_form, m)?)?;
    m.add_function(wrap_pyfunction!(three_point_hat, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_at, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_pc, m)?)?;
    Ok(())
}
