use std::path::{Path, PathBuf};

use microgrid_reconfig::feeder_file::{parse_feeder, serialize_feeder};
use microgrid_reconfig::grid::FeederModel;
use microgrid_reconfig::reconfig::{self, CostSpec, ReconfigSolution};
use microgrid_reconfig::scenario::{self, parse_scenario_spec, sample_bounds, NetInjectionBounds};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A validated feeder model.
#[pyclass(frozen)]
struct Feeder {
    model: FeederModel,
    dir: PathBuf,
}

#[pymethods]
impl Feeder {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| value_err(format!("{}: {e}", path.display())))?;
        let model = parse_feeder(&text).map_err(value_err)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Feeder { model, dir })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Feeder {
            model: parse_feeder(text).map_err(value_err)?,
            dir: PathBuf::from("."),
        })
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.model.nodes().len()
    }

    #[getter]
    fn line_count(&self) -> usize {
        self.model.lines().len()
    }

    #[getter]
    fn dg_count(&self) -> usize {
        self.model.dg_count()
    }

    #[getter]
    fn line_phase_count(&self) -> usize {
        self.model.line_phase_count()
    }

    /// Labels ("m-n") of the switchable lines.
    fn switchable_lines(&self) -> Vec<String> {
        self.model
            .switchable_lines()
            .into_iter()
            .map(|l| label(&self.model, l))
            .collect()
    }

    fn to_toml(&self) -> String {
        serialize_feeder(&self.model)
    }

    /// Net-injection bounds: forecasts when `scenario` is None, otherwise the
    /// minimum over `samples` draws (default: the sample-size bound at `rho`, `beta`).
    #[pyo3(signature = (scenario=None, rho=0.01, beta=0.05, samples=None, seed=0))]
    fn bounds<'py>(
        &self,
        py: Python<'py>,
        scenario: Option<PathBuf>,
        rho: f64,
        beta: f64,
        samples: Option<usize>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let b = self.make_bounds(scenario, rho, beta, samples, seed)?;
        let d = PyDict::new(py);
        let pairs: Vec<(u32, String)> = b.pairs.iter().map(|(n, p)| (n.0, p.to_string())).collect();
        d.set_item("pairs", pairs)?;
        d.set_item("p_bound", b.p_bound)?;
        d.set_item("q_bound", b.q_bound)?;
        Ok(d)
    }

    /// Centralized solve; returns a dict describing the solution.
    #[pyo3(signature = (lam, scenario=None, rho=0.01, beta=0.05, samples=None, seed=0, loss_weight=1.0, op_weight=1.0))]
    #[allow(clippy::too_many_arguments)]
    fn solve<'py>(
        &self,
        py: Python<'py>,
        lam: f64,
        scenario: Option<PathBuf>,
        rho: f64,
        beta: f64,
        samples: Option<usize>,
        seed: u64,
        loss_weight: f64,
        op_weight: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let b = self.make_bounds(scenario, rho, beta, samples, seed)?;
        let cost = CostSpec::weighted(loss_weight, op_weight);
        let settings = reconfig::default_settings();
        let s = py
            .detach(|| reconfig::solve(&self.model, &b, &cost, lam, &settings))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        solution_dict(py, &self.model, &s)
    }

    /// λ sweep with warm starts; infeasible points map to None.
    #[pyo3(signature = (lams, scenario=None, rho=0.01, beta=0.05, samples=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn sweep<'py>(
        &self,
        py: Python<'py>,
        lams: Vec<f64>,
        scenario: Option<PathBuf>,
        rho: f64,
        beta: f64,
        samples: Option<usize>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyList>> {
        let b = self.make_bounds(scenario, rho, beta, samples, seed)?;
        let cost = CostSpec::weighted(1.0, 1.0);
        let settings = reconfig::default_settings();
        let pts = py
            .detach(|| reconfig::sweep_lambda(&self.model, &b, &cost, &lams, &settings))
            .map_err(value_err)?;
        let out = PyList::empty(py);
        for p in pts {
            match &p.outcome {
                Ok(s) => out.append(solution_dict(py, &self.model, s)?)?,
                Err(_) => out.append(py.None())?,
            }
        }
        Ok(out)
    }
}

impl Feeder {
    fn make_bounds(
        &self,
        scenario: Option<PathBuf>,
        rho: f64,
        beta: f64,
        samples: Option<usize>,
        seed: u64,
    ) -> PyResult<NetInjectionBounds> {
        let Some(path) = scenario else {
            return Ok(NetInjectionBounds::forecast(&self.model));
        };
        let path = if path.is_relative() {
            self.dir.join(path)
        } else {
            path
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| value_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let (spec, corr) = parse_scenario_spec(&text, &self.model, base).map_err(value_err)?;
        let k = match samples {
            Some(k) => k,
            None => scenario::min_sample_size_mr3(
                rho,
                beta,
                self.model.dg_count() as u64,
                self.model.line_phase_count() as u64,
            )
            .map_err(value_err)? as usize,
        };
        sample_bounds(&self.model, &spec, &corr, k, seed).map_err(value_err)
    }
}

fn label(model: &FeederModel, line: usize) -> String {
    let l = &model.lines()[line];
    format!("{}-{}", l.from, l.to)
}

fn solution_dict<'py>(
    py: Python<'py>,
    model: &FeederModel,
    s: &ReconfigSolution,
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("status", format!("{:?}", s.status).to_lowercase())?;
    d.set_item("lambda", s.lambda)?;
    d.set_item("objective", s.objective)?;
    d.set_item("cost", s.cost)?;
    let open: Vec<String> = s.open_lines.iter().map(|&l| label(model, l)).collect();
    d.set_item("open_switches", open)?;
    d.set_item("radial", s.radial)?;
    d.set_item("iterations", s.iterations)?;
    d.set_item("max_violation", s.max_violation)?;
    let mags = PyDict::new(py);
    for (l, m) in s.line_current_mag.iter().enumerate() {
        mags.set_item(label(model, l), m)?;
    }
    d.set_item("line_current", mags)?;
    d.set_item("xi", s.xi.clone())?;
    Ok(d)
}

/// `⌈2ρ⁻¹ ln β⁻¹ + 2m + 2mρ⁻¹ ln(2ρ⁻¹)⌉`.
#[pyfunction]
fn min_sample_size(rho: f64, beta: f64, m: u64) -> PyResult<u64> {
    scenario::min_sample_size(rho, beta, m).map_err(value_err)
}

/// The same bound with `m = 2(n_dg + line_phase_count)`.
#[pyfunction]
fn min_sample_size_mr3(rho: f64, beta: f64, n_dg: u64, line_phase_count: u64) -> PyResult<u64> {
    scenario::min_sample_size_mr3(rho, beta, n_dg, line_phase_count).map_err(value_err)
}

/// Runs the command-line tool in-process, e.g. `run_cli(["solve", "--config", "run.toml"])`.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("mgreconfig".to_string())
        .chain(args)
        .collect();
    py.detach(|| microgrid_reconfig::cli::main_with_args(argv))
}

#[pymodule]
fn mgreconfig(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Feeder>()?;
    m.add_function(wrap_pyfunction!(min_sample_size, m)?)?;
    m.add_function(wrap_pyfunction!(min_sample_size_mr3, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
