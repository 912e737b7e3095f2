//! Python bindings. Permutations are exposed as 0-based rank lists: entry
//! `i` is the rank of the eigenvalue sitting in diagonal slot `i`.

use isoflow::adjacency::{build_graph, verify_adjacency, TraceConfig};
use isoflow::critical::enumerate_catalog;
use isoflow::empath::{self, EmpConfig};
use isoflow::flow::{self, FlowConfig, TerminalLabel};
use isoflow::manifold::{self, SymState};
use isoflow::perm::Permutation;
use isoflow::spectra::{self, DEFAULT_CAP};
use isoflow::stochastic::{self, SdeConfig};
use isoflow::IsoflowError;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

/// Two index lists with equal means.
type Witness = (Vec<usize>, Vec<usize>);
/// `(from, to, rank, barrier)`.
type Edge = (Vec<usize>, Vec<usize>, usize, f64);

fn err(e: IsoflowError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Spectrum {
    inner: spectra::Spectrum,
}

#[pymethods]
impl Spectrum {
    /// Sorts the values and certifies strong disjointness.
    #[new]
    fn new(values: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: spectra::Spectrum::certified(values).map_err(err)?,
        })
    }

    #[staticmethod]
    fn random(n: usize, scale: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: spectra::Spectrum::random(n, scale, seed).map_err(err)?,
        })
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn min_gap(&self) -> f64 {
        self.inner.min_gap()
    }

    fn __repr__(&self) -> String {
        format!("Spectrum({:?})", self.inner.values())
    }
}

/// `(strongly_disjoint, witness)`; the witness is two index lists with
/// equal means, or `None`.
#[pyfunction]
fn check_strongly_disjoint(values: Vec<f64>) -> PyResult<(bool, Option<Witness>)> {
    let s = spectra::Spectrum::new(values).map_err(err)?;
    let check = spectra::check_strongly_disjoint(&s);
    Ok((check.strongly_disjoint, check.witness))
}

#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct State {
    inner: SymState,
}

#[pymethods]
impl State {
    #[staticmethod]
    fn random(spectrum: &Spectrum, seed: u64) -> Self {
        Self {
            inner: manifold::random_state(&spectrum.inner, seed),
        }
    }

    #[staticmethod]
    fn diagonal(spectrum: &Spectrum, ranks: Vec<usize>) -> PyResult<Self> {
        let sigma = Permutation::new(ranks).map_err(err)?;
        Ok(Self {
            inner: SymState::diagonal(spectrum.inner.clone(), &sigma),
        })
    }

    /// Row-major nested lists.
    fn matrix(&self) -> Vec<Vec<f64>> {
        let m = self.inner.matrix();
        (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect()
    }

    #[getter]
    fn potential(&self) -> f64 {
        self.inner.potential()
    }

    #[getter]
    fn off_diagonal_mass(&self) -> f64 {
        self.inner.off_diagonal_mass()
    }

    #[getter]
    fn spectrum_error(&self) -> f64 {
        self.inner.spectrum_error()
    }

    /// One step of the isospectral integrator.
    fn step(&self, h: f64) -> Self {
        Self {
            inner: flow::step(&self.inner, h),
        }
    }
}

#[pyclass(frozen, get_all)]
struct FlowResult {
    /// Ranks of the terminal diagonal state, or `None` if the flow stopped
    /// elsewhere.
    label: Option<Vec<usize>>,
    converged: bool,
    steps: usize,
    final_time: f64,
    potential: Vec<f64>,
    state: State,
}

#[pyfunction]
#[pyo3(signature = (state, h=None, max_time=None))]
fn integrate(
    py: Python<'_>,
    state: &State,
    h: Option<f64>,
    max_time: Option<f64>,
) -> PyResult<FlowResult> {
    let defaults = FlowConfig::for_spectrum(state.inner.spectrum());
    let cfg = FlowConfig {
        step_size: h.unwrap_or(defaults.step_size),
        max_time: max_time.unwrap_or(defaults.max_time),
        ..defaults
    };
    let start = state.inner.clone();
    let record = py.detach(|| flow::integrate(&start, &cfg)).map_err(err)?;
    let label = match &record.terminal_label {
        TerminalLabel::Stable { permutation } => Some(permutation.ranks().to_vec()),
        _ => None,
    };
    Ok(FlowResult {
        label,
        converged: record.converged(),
        steps: record.steps,
        final_time: record.times.last().copied().unwrap_or(0.0),
        potential: record.potential_values,
        state: State {
            inner: record.terminal_state,
        },
    })
}

#[pyclass(frozen, get_all)]
struct Manifold {
    blocks: Vec<Vec<usize>>,
    placement: Vec<usize>,
    dim: usize,
    index: usize,
    coindex: usize,
    canonical: bool,
    l_eigenvalues: Vec<f64>,
}

#[pyfunction]
#[pyo3(signature = (spectrum, cap=DEFAULT_CAP))]
fn catalog(py: Python<'_>, spectrum: &Spectrum, cap: usize) -> PyResult<Vec<Manifold>> {
    let s = spectrum.inner.clone();
    let list = py.detach(|| enumerate_catalog(&s, cap)).map_err(err)?;
    Ok(list
        .into_iter()
        .map(|cm| Manifold {
            blocks: cm.partition.blocks,
            placement: cm.placement,
            dim: cm.dim,
            index: cm.index,
            coindex: cm.coindex,
            canonical: cm.canonical,
            l_eigenvalues: cm.l_eigenvalues,
        })
        .collect())
}

/// Edges `(from, to, rank, barrier)` of the adjacency graph.
#[pyfunction]
fn adjacency_edges(spectrum: &Spectrum) -> PyResult<Vec<Edge>> {
    let g = build_graph(&spectrum.inner, DEFAULT_CAP).map_err(err)?;
    Ok(g.edges
        .into_iter()
        .map(|e| {
            (
                e.from.ranks().to_vec(),
                e.to.ranks().to_vec(),
                e.rank,
                e.barrier,
            )
        })
        .collect())
}

/// Traces every co-index-1 saddle; returns `(edges, confirmed, mismatches)`.
#[pyfunction]
fn verify_edges(py: Python<'_>, spectrum: &Spectrum) -> PyResult<(usize, usize, usize)> {
    let s = spectrum.inner.clone();
    let report = py
        .detach(|| verify_adjacency(&s, &TraceConfig::for_spectrum(&s)))
        .map_err(err)?;
    Ok((report.edges, report.confirmed, report.mismatches.len()))
}

#[pyclass(frozen, get_all)]
struct Markov {
    /// Ranks of each state, in lexicographic order.
    states: Vec<Vec<usize>>,
    counts: Vec<Vec<u64>>,
    dwell_times: Vec<f64>,
    transitions: u64,
    adjacency_dominance: f64,
}

/// Runs `paths` noisy paths from random starts and estimates the chain of
/// visited diagonal states.
#[pyfunction]
#[pyo3(signature = (spectrum, epsilon, h, horizon, paths, seed=0))]
fn simulate(
    py: Python<'_>,
    spectrum: &Spectrum,
    epsilon: f64,
    h: f64,
    horizon: f64,
    paths: usize,
    seed: u64,
) -> PyResult<Markov> {
    let s = spectrum.inner.clone();
    let cfg = SdeConfig::new(&s, epsilon, h, horizon, seed);
    let m = py
        .detach(|| {
            let records =
                stochastic::simulate_paths(&stochastic::random_starts(&s, paths, seed), &cfg)?;
            stochastic::estimate_markov(&records)
        })
        .map_err(err)?;
    Ok(Markov {
        states: m.states.iter().map(|p| p.ranks().to_vec()).collect(),
        counts: m.counts,
        dwell_times: m.dwell_times,
        transitions: m.transitions,
        adjacency_dominance: m.adjacency_dominance,
    })
}

#[pyclass(frozen, get_all)]
struct EmpPath {
    times: Vec<f64>,
    theta: Vec<f64>,
    control: Vec<f64>,
    energy: f64,
    terminal_error: f64,
}

/// Minimum-energy crossing for one eigenvalue gap, by collocation.
#[pyfunction]
#[pyo3(signature = (gap, epsilon, horizon, intervals=400))]
fn min_energy_path(gap: f64, epsilon: f64, horizon: f64, intervals: usize) -> PyResult<EmpPath> {
    let cfg = EmpConfig {
        intervals,
        ..EmpConfig::default()
    };
    let r = empath::scalar_emp(gap, epsilon, horizon, &cfg).map_err(err)?;
    Ok(EmpPath {
        times: r.times,
        theta: r.theta,
        control: r.control,
        energy: r.energy,
        terminal_error: r.terminal_error,
    })
}

/// Grid dynamic-programming value of the same problem.
#[pyfunction]
#[pyo3(signature = (gap, epsilon, horizon, theta_points=400, time_steps=400))]
fn grid_energy(
    gap: f64,
    epsilon: f64,
    horizon: f64,
    theta_points: usize,
    time_steps: usize,
) -> PyResult<f64> {
    empath::dp_oracle(gap, epsilon, horizon, theta_points, time_steps).map_err(err)
}

/// Row-stochastic predicted transition matrix over states in lexicographic
/// order.
#[pyfunction]
fn predicted_matrix(spectrum: &Spectrum, epsilon: f64, horizon: f64) -> PyResult<Vec<Vec<f64>>> {
    let p = empath::predicted_transitions(&spectrum.inner, epsilon, horizon, &EmpConfig::default())
        .map_err(err)?;
    Ok(p.matrix)
}

#[pymodule]
pub fn pyisoflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Spectrum>()?;
    m.add_class::<State>()?;
    m.add_class::<FlowResult>()?;
    m.add_class::<Manifold>()?;
    m.add_class::<Markov>()?;
    m.add_class::<EmpPath>()?;
    m.add_function(wrap_pyfunction!(check_strongly_disjoint, m)?)?;
    m.add_function(wrap_pyfunction!(integrate, m)?)?;
    m.add_function(wrap_pyfunction!(catalog, m)?)?;
    m.add_function(wrap_pyfunction!(adjacency_edges, m)?)?;
    m.add_function(wrap_pyfunction!(verify_edges, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(min_energy_path, m)?)?;
    m.add_function(wrap_pyfunction!(grid_energy, m)?)?;
    m.add_function(wrap_pyfunction!(predicted_matrix, m)?)?;
    Ok(())
}
