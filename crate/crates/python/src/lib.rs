//! Python bindings: jets, expression tapes, block diagrams, simulation,
//! sensitivities, implicit solves and the numeric tables.

use std::collections::BTreeMap;
use std::fmt::Display;

use hybrid_ad::diagram::{agdm_diff, derivative_output_name, parse_diagram, Diagram};
use hybrid_ad::optimize::{optimize as run_optimize, CostSpec, Jacobian, OptimizeConfig};
use hybrid_ad::sim::{flatten, integrate, sensitivity_extend_many, SimConfig, Trajectory};
use hybrid_ad::solvers::{implicit_jet, newton, ImplicitSystem};
use hybrid_ad::tape::{forward_gradient, hessian, reverse_gradient, tape_jet_eval};
use hybrid_ad::{models, tables, ElementaryFn, Jet, ParamExpr, Tape};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(hybrid_ad_py, HybridAdError, PyException);

fn err(e: impl Display) -> PyErr {
    HybridAdError::new_err(e.to_string())
}

#[pyclass(name = "Jet", module = "hybrid_ad_py", skip_from_py_object)]
#[derive(Clone)]
struct PyJet {
    inner: Jet,
}

impl PyJet {
    fn operand(&self, other: &Bound<'_, PyAny>) -> PyResult<Jet> {
        if let Ok(j) = other.extract::<PyRef<PyJet>>() {
            return Ok(j.inner.clone());
        }
        let c: f64 = other.extract()?;
        Jet::constant(c, self.inner.order()).map_err(err)
    }
}

fn wrap(r: Result<Jet, impl Display>) -> PyResult<PyJet> {
    r.map(|inner| PyJet { inner }).map_err(err)
}

#[pymethods]
impl PyJet {
    /// Truncated Taylor series of order `order`; the identity `t -> value + t`
    /// when `var` is true, a constant otherwise.
    #[new]
    #[pyo3(signature = (value, order, var = true))]
    fn new(value: f64, order: usize, var: bool) -> PyResult<PyJet> {
        wrap(if var { Jet::var(value, order) } else { Jet::constant(value, order) })
    }

    #[staticmethod]
    fn from_coeffs(coeffs: Vec<f64>) -> PyResult<PyJet> {
        wrap(Jet::from_coeffs(coeffs))
    }

    #[getter]
    fn value(&self) -> f64 {
        self.inner.value()
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    #[getter]
    fn coeffs(&self) -> Vec<f64> {
        self.inner.coeffs().to_vec()
    }

    /// Derivatives `f, f', ..., f^(order)`.
    #[getter]
    fn derivatives(&self) -> Vec<f64> {
        self.inner.derivatives()
    }

    /// Apply an elementary function by name (`exp`, `sin`, `sqrt`, `pow(1.5)`, ...).
    fn apply(&self, f: &str) -> PyResult<PyJet> {
        let f: ElementaryFn = f.parse().map_err(err)?;
        wrap(self.inner.apply(f))
    }

    fn __add__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyJet> {
        wrap(self.inner.add(&self.operand(o)?))
    }

    fn __radd__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyJet> {
        wrap(self.operand(o)?.add(&self.inner))
    }

    fn __sub__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyJet> {
        wrap(self.inner.sub(&self.operand(o)?))
    }

    fn __rsub__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyJet> {
        wrap(self.operand(o)?.sub(&self.inner))
    }

    fn __mul__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyJet> {
        wrap(self.inner.mul(&self.operand(o)?))
    }

    fn __rmul__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyJet> {
        wrap(self.operand(o)?.mul(&self.inner))
    }

    fn __truediv__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyJet> {
        wrap(self.inner.div(&self.operand(o)?))
    }

    fn __rtruediv__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyJet> {
        wrap(self.operand(o)?.div(&self.inner))
    }

    fn __neg__(&self) -> PyJet {
        PyJet { inner: self.inner.neg() }
    }

    fn __repr__(&self) -> String {
        format!("Jet({:?})", self.inner.coeffs())
    }
}

/// Straight-line program compiled from an expression over named inputs.
#[pyclass(name = "Tape", module = "hybrid_ad_py")]
struct PyTape {
    inner: Tape,
    inputs: Vec<String>,
}

fn compile(exprs: &[String], inputs: &[String]) -> PyResult<Tape> {
    let mut b = hybrid_ad::TapeBuilder::new(inputs.len());
    let nodes: Vec<_> = (0..inputs.len()).map(|i| b.input(i)).collect();
    let lookup = |n: &str| inputs.iter().position(|s| s == n).map(|i| nodes[i]);
    let mut outs = vec![];
    for e in exprs {
        let e: ParamExpr = e.parse().map_err(err)?;
        outs.push(e.compile(&mut b, &lookup).map_err(err)?);
    }
    Ok(b.finish(outs))
}

#[pymethods]
impl PyTape {
    #[new]
    fn new(exprs: Vec<String>, inputs: Vec<String>) -> PyResult<PyTape> {
        Ok(PyTape { inner: compile(&exprs, &inputs)?, inputs })
    }

    #[getter]
    fn inputs(&self) -> Vec<String> {
        self.inputs.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn eval(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.eval(&x).map_err(err)
    }

    /// Jacobian rows, one per output.
    #[pyo3(signature = (x, mode = "forward"))]
    fn jacobian(&self, x: Vec<f64>, mode: &str) -> PyResult<Vec<Vec<f64>>> {
        match mode {
            "forward" => forward_gradient(&self.inner, &x).map_err(err),
            "reverse" => (0..self.inner.outputs().len())
                .map(|k| reverse_gradient(&self.inner, &x, k).map_err(err))
                .collect(),
            _ => Err(err(format!("unknown mode `{mode}` (forward|reverse)"))),
        }
    }

    #[pyo3(signature = (x, output = 0))]
    fn hessian(&self, x: Vec<f64>, output: usize) -> PyResult<Vec<Vec<f64>>> {
        hessian(&self.inner, &x, output).map_err(err)
    }

    fn jet_eval(&self, x: Vec<PyRef<PyJet>>) -> PyResult<Vec<PyJet>> {
        let x: Vec<Jet> = x.iter().map(|j| j.inner.clone()).collect();
        let y = tape_jet_eval(&self.inner, &x).map_err(err)?;
        Ok(y.into_iter().map(|inner| PyJet { inner }).collect())
    }
}

#[pyclass(name = "Diagram", module = "hybrid_ad_py")]
struct PyDiagram {
    inner: Diagram,
}

#[allow(clippy::too_many_arguments)]
fn sim_config(step: f64, t0: f64, tf: f64, method: &str, event_tol: f64, heaviside_a: f64) -> PyResult<SimConfig> {
    Ok(SimConfig {
        method: method.parse().map_err(err)?,
        step,
        t0,
        tf,
        event_tol,
        heaviside_a,
        ..SimConfig::default()
    })
}

fn columns<'py>(py: Python<'py>, names: &[String], rows: &[Vec<f64>]) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (j, n) in names.iter().enumerate() {
        d.set_item(n, rows.iter().map(|r| r[j]).collect::<Vec<f64>>())?;
    }
    Ok(d)
}

fn trajectory<'py>(py: Python<'py>, tr: &Trajectory) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("t", tr.times.clone())?;
    d.set_item("states", columns(py, &tr.state_names, &tr.states)?)?;
    d.set_item("outputs", columns(py, &tr.output_names, &tr.outputs)?)?;
    let ev: Vec<(f64, String)> = tr.events.iter().map(|e| (e.time, e.name.clone())).collect();
    d.set_item("events", ev)?;
    Ok(d)
}

#[pymethods]
impl PyDiagram {
    #[staticmethod]
    fn from_json(doc: &str) -> PyResult<PyDiagram> {
        Ok(PyDiagram { inner: parse_diagram(doc).map_err(err)? })
    }

    /// `first_order`, `second_order` or `discrete_loop`.
    #[staticmethod]
    fn example(name: &str) -> PyResult<PyDiagram> {
        let inner = match name {
            "first_order" => models::first_order(1.0, 0.5),
            "second_order" => models::second_order(0.1),
            "discrete_loop" => models::discrete_loop(),
            _ => return Err(err(format!("unknown example `{name}`"))),
        };
        Ok(PyDiagram { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn params(&self) -> BTreeMap<String, f64> {
        self.inner.params.clone()
    }

    #[getter]
    fn outputs(&self) -> Vec<String> {
        self.inner.outputs.iter().map(|o| o.name.clone()).collect()
    }

    fn with_param(&self, name: &str, value: f64) -> PyResult<PyDiagram> {
        self.inner.require_param(name).map_err(err)?;
        let mut inner = self.inner.clone();
        inner.params.insert(name.to_string(), value);
        Ok(PyDiagram { inner })
    }

    /// Diagram extended with blocks computing the derivative of every output.
    fn diff(&self, theta: &str) -> PyResult<PyDiagram> {
        Ok(PyDiagram { inner: agdm_diff(&self.inner, theta).map_err(err)? })
    }

    #[pyo3(signature = (step = 1e-3, t0 = 0.0, tf = 1.0, method = "rk4", event_tol = 1e-10, heaviside_a = 1e3))]
    fn simulate<'py>(
        &self,
        py: Python<'py>,
        step: f64,
        t0: f64,
        tf: f64,
        method: &str,
        event_tol: f64,
        heaviside_a: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = sim_config(step, t0, tf, method, event_tol, heaviside_a)?;
        let m = flatten(&self.inner).map_err(err)?;
        trajectory(py, &integrate(&m, &cfg).map_err(err)?)
    }

    /// Outputs and `dy/dθ` columns, by the sensitivity equations (`sensode`)
    /// or by simulating the transformed diagram (`agdm`).
    #[pyo3(signature = (thetas, route = "sensode", step = 1e-3, t0 = 0.0, tf = 1.0, method = "rk4"))]
    #[allow(clippy::too_many_arguments)]
    fn sensitivities<'py>(
        &self,
        py: Python<'py>,
        thetas: Vec<String>,
        route: &str,
        step: f64,
        t0: f64,
        tf: f64,
        method: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = sim_config(step, t0, tf, method, 1e-10, 1e3)?;
        let d = PyDict::new(py);
        match route {
            "sensode" => {
                let refs: Vec<&str> = thetas.iter().map(String::as_str).collect();
                let m = sensitivity_extend_many(&flatten(&self.inner).map_err(err)?, &refs).map_err(err)?;
                let tr = integrate(&m, &cfg).map_err(err)?;
                d.set_item("t", tr.times.clone())?;
                for (j, n) in tr.output_names.iter().enumerate() {
                    d.set_item(n, tr.outputs.iter().map(|r| r[j]).collect::<Vec<f64>>())?;
                }
            }
            "agdm" => {
                for th in &thetas {
                    let dd = agdm_diff(&self.inner, th).map_err(err)?;
                    let tr = integrate(&flatten(&dd).map_err(err)?, &cfg).map_err(err)?;
                    d.set_item("t", tr.times.clone())?;
                    for o in &self.inner.outputs {
                        for n in [o.name.clone(), derivative_output_name(&o.name, th)] {
                            d.set_item(&n, tr.output(&n).ok_or_else(|| err(format!("missing output {n}")))?)?;
                        }
                    }
                }
            }
            _ => return Err(err(format!("unknown route `{route}` (agdm|sensode)"))),
        }
        Ok(d)
    }

    /// Minimize the cost over `theta`; returns `(theta_opt, cost, iterations)`.
    #[pyo3(signature = (theta, theta0, integrand, accumulator = None, jacobian = "ad", decimate = None, step = 1e-3, tf = 1.0))]
    #[allow(clippy::too_many_arguments)]
    fn optimize(
        &self,
        theta: &str,
        theta0: f64,
        integrand: String,
        accumulator: Option<String>,
        jacobian: &str,
        decimate: Option<f64>,
        step: f64,
        tf: f64,
    ) -> PyResult<(f64, f64, usize)> {
        let m = flatten(&self.inner).map_err(err)?;
        let sim = SimConfig { step, tf, ..SimConfig::default() };
        let mut cfg = OptimizeConfig::new(theta, theta0, CostSpec { integrand, accumulator, decimate }, sim);
        cfg.jacobian = jacobian.parse::<Jacobian>().map_err(err)?;
        let r = run_optimize(&m, &cfg).map_err(err)?;
        Ok((r.theta, r.cost, r.iterations))
    }

    fn __repr__(&self) -> String {
        format!("Diagram({:?}, {} blocks, {} links)", self.inner.name, self.inner.blocks.len(), self.inner.links.len())
    }
}

/// Root of `residual(x, theta) = 0` in `x` by Newton, and the derivatives
/// `x, dx/dθ, ..., d^order x/dθ^order` of the root by implicit differentiation.
#[pyfunction]
#[pyo3(signature = (residual, theta, x0, tol = 1e-14, order = 2, max_iter = 100))]
fn solve(residual: &str, theta: f64, x0: f64, tol: f64, order: usize, max_iter: usize) -> PyResult<(f64, Vec<f64>)> {
    let tape = compile(&[residual.to_string()], &["x".into(), "theta".into()])?;
    let s = ImplicitSystem::new(tape, 1).map_err(err)?;
    let root = newton(&s, &[x0], &[theta], tol, max_iter).map_err(err)?;
    let jet = implicit_jet(&s, &root.x, &[theta], &[1.0], order).map_err(err)?;
    Ok((root.x[0], jet[0].derivatives()))
}

/// One of `rk4-derivs`, `newton-sqrt`, `sequence`, `warmstart`.
#[pyfunction]
fn table(which: &str) -> PyResult<String> {
    tables::table(which).map_err(err)
}

#[pymodule]
fn hybrid_ad_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyJet>()?;
    m.add_class::<PyTape>()?;
    m.add_class::<PyDiagram>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(table, m)?)?;
    m.add("HybridAdError", m.py().get_type::<HybridAdError>())?;
    Ok(())
}
