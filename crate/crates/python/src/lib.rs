//! Python bindings: configuration, the simulator, the odometry engine, plane
//! fitting, trajectory scoring and the verification suite.
//!
//! Vectors cross the boundary as 3-element sequences, matrices as nested lists
//! (row-major), poses as [`Pose`] objects.

use nalgebra::{Matrix2, Matrix3, Vector3};
use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use voxlio_core::config::RunConfig;
use voxlio_core::kinematics::{ImuSample, Pose as CorePose, State as CoreState, Tangent, STATE_DIM};
use voxlio_core::manifold::{Rotation, UnitBearing};
use voxlio_core::pipeline::{self, Dataset as CoreDataset, Odometry as CoreOdometry, ScanResult as CoreScanResult};
use voxlio_core::sim;
use voxlio_core::uncertainty::{self, LidarRay, PlaneFit, PlaneFitConfig, WorldPoint};
use voxlio_core::verify;
use voxlio_core::Error;

type Vec3 = Vector3<f64>;
type Mat3 = Matrix3<f64>;
/// One return as `(t, bearing, depth)`.
type Return = (f64, [f64; 3], f64);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::DimensionMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn arr3(v: &Vec3) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

fn m3(a: [[f64; 3]; 3]) -> Mat3 {
    Mat3::from_fn(|i, j| a[i][j])
}

fn rows3(m: &Mat3) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn rows<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> Vec<Vec<f64>> {
    (0..R).map(|i| (0..C).map(|j| m[(i, j)]).collect()).collect()
}

fn rotation_from(m: [[f64; 3]; 3]) -> PyResult<Rotation> {
    Rotation::from_matrix(m3(m), 1e-6).ok_or_else(|| PyValueError::new_err("matrix is not a rotation"))
}

/// Run configuration: every tunable of the filter, map, pipeline and simulator.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    /// Defaults, or a `section.key = value` file when `path` is given.
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<std::path::PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => RunConfig::load(&p).map_err(to_py)?,
            None => RunConfig::default(),
        };
        Ok(Config { inner })
    }

    #[staticmethod]
    fn from_document(text: &str) -> PyResult<Self> {
        RunConfig::from_document(text).map(|inner| Config { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        RunConfig::keys()
    }

    /// Sets one key from its text form, e.g. `cfg.set("map.max_depth", "2")`.
    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let text = match value.extract::<bool>() {
            Ok(b) => b.to_string(),
            Err(_) => value.str()?.to_string(),
        };
        self.inner.set(key, &text).map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn to_document(&self) -> String {
        self.inner.to_document()
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.inner.sim.noise.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.sim.noise.seed = seed;
        self.inner.verify.seed = seed;
    }

    #[getter]
    fn get_output_dir(&self) -> std::path::PathBuf {
        self.inner.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: std::path::PathBuf) {
        self.inner.output_dir = dir;
    }

    /// Points `run_odometry` at `imu.txt` and `scans.txt` inside `dir`.
    fn set_input_dir(&mut self, dir: std::path::PathBuf) {
        self.inner.imu_path = Some(dir.join("imu.txt"));
        self.inner.scan_path = Some(dir.join("scans.txt"));
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, output_dir={:?})", self.inner.sim.noise.seed, self.inner.output_dir)
    }
}

/// Rigid transform `p -> R p + t`.
#[pyclass(name = "Pose", from_py_object)]
#[derive(Clone, Copy)]
struct Pose {
    inner: CorePose,
}

#[pymethods]
impl Pose {
    #[new]
    #[pyo3(signature = (rotation=None, translation=[0.0; 3]))]
    fn new(rotation: Option<[[f64; 3]; 3]>, translation: [f64; 3]) -> PyResult<Self> {
        let rot = match rotation {
            Some(m) => rotation_from(m)?,
            None => Rotation::identity(),
        };
        Ok(Pose { inner: CorePose::new(rot, v3(translation)) })
    }

    /// Rotation from a rotation vector (axis times angle), plus a translation.
    #[staticmethod]
    #[pyo3(signature = (rotvec, translation=[0.0; 3]))]
    fn from_rotvec(rotvec: [f64; 3], translation: [f64; 3]) -> Self {
        Pose { inner: CorePose::new(Rotation::exp(&v3(rotvec)), v3(translation)) }
    }

    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        rows3(self.inner.rot.matrix())
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        arr3(&self.inner.trans)
    }

    /// `[x, y, z, w]`.
    #[getter]
    fn quaternion(&self) -> [f64; 4] {
        self.inner.rot.to_quaternion()
    }

    fn rotvec(&self) -> PyResult<[f64; 3]> {
        self.inner.rot.log().map(|r| arr3(&r)).map_err(to_py)
    }

    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        arr3(&self.inner.apply(&v3(p)))
    }

    fn compose(&self, other: &Pose) -> Pose {
        Pose { inner: self.inner.compose(&other.inner) }
    }

    fn inverse(&self) -> Pose {
        Pose { inner: self.inner.inverse() }
    }

    fn __repr__(&self) -> String {
        let t = self.inner.trans;
        let q = self.inner.rot.to_quaternion();
        format!(
            "Pose(t=[{:.6}, {:.6}, {:.6}], q=[{:.6}, {:.6}, {:.6}, {:.6}])",
            t[0], t[1], t[2], q[0], q[1], q[2], q[3]
        )
    }
}

/// Filter state: attitude, position, velocity, gyro bias, accel bias, gravity.
#[pyclass(name = "State", from_py_object)]
#[derive(Clone, Copy)]
struct State {
    inner: CoreState,
}

#[pymethods]
impl State {
    #[new]
    fn new() -> Self {
        State { inner: CoreState::default() }
    }

    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        rows3(self.inner.rot.matrix())
    }

    #[getter]
    fn position(&self) -> [f64; 3] {
        arr3(&self.inner.pos)
    }

    #[getter]
    fn velocity(&self) -> [f64; 3] {
        arr3(&self.inner.vel)
    }

    #[getter]
    fn gyro_bias(&self) -> [f64; 3] {
        arr3(&self.inner.bg)
    }

    #[getter]
    fn acc_bias(&self) -> [f64; 3] {
        arr3(&self.inner.ba)
    }

    #[getter]
    fn gravity(&self) -> [f64; 3] {
        arr3(&self.inner.grav)
    }

    fn pose(&self) -> Pose {
        Pose { inner: self.inner.pose() }
    }

    /// Applies an 18-element tangent increment in the order
    /// `[rotation, position, velocity, gyro bias, accel bias, gravity]`.
    fn boxplus(&self, delta: Vec<f64>) -> PyResult<State> {
        if delta.len() != STATE_DIM {
            return Err(to_py(Error::DimensionMismatch { expected: STATE_DIM, got: delta.len() }));
        }
        Ok(State { inner: self.inner.boxplus(&Tangent::from_column_slice(&delta)) })
    }

    /// Tangent `u` with `other ⊞ u = self`.
    fn boxminus(&self, other: &State) -> PyResult<Vec<f64>> {
        self.inner.boxminus(&other.inner).map(|u| u.iter().copied().collect()).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let p = self.inner.pos;
        format!("State(position=[{:.6}, {:.6}, {:.6}])", p[0], p[1], p[2])
    }
}

#[pyfunction]
fn so3_exp(rotvec: [f64; 3]) -> [[f64; 3]; 3] {
    rows3(Rotation::exp(&v3(rotvec)).matrix())
}

#[pyfunction]
fn so3_log(matrix: [[f64; 3]; 3]) -> PyResult<[f64; 3]> {
    rotation_from(matrix)?.log().map(|r| arr3(&r)).map_err(to_py)
}

/// A simulated run held in memory, with its ground truth.
#[pyclass(name = "Dataset", frozen)]
struct Dataset {
    inner: CoreDataset,
    config: RunConfig,
}

#[pymethods]
impl Dataset {
    #[getter]
    fn scan_count(&self) -> usize {
        self.inner.scans.len()
    }

    #[getter]
    fn imu_count(&self) -> usize {
        self.inner.imu.samples.len()
    }

    #[getter]
    fn mean_hit_ratio(&self) -> f64 {
        self.inner.mean_hit_ratio()
    }

    /// `(t, gyro, acc)` per IMU sample.
    fn imu(&self) -> Vec<(f64, [f64; 3], [f64; 3])> {
        self.inner.imu.samples.iter().map(|s| (s.t, arr3(&s.gyro), arr3(&s.acc))).collect()
    }

    /// End time and `(t, bearing, depth)` per return of scan `index`.
    fn scan(&self, index: usize) -> PyResult<(f64, Vec<Return>)> {
        let s = self.inner.scans.get(index).ok_or_else(|| PyIndexError::new_err("scan index out of range"))?;
        Ok((s.t_end, s.rays.iter().map(|r| (r.t, arr3(r.bearing.as_vec()), r.depth)).collect()))
    }

    /// True IMU pose at `t`.
    fn ground_truth(&self, t: f64) -> Pose {
        Pose { inner: self.config.sim.trajectory_spec().pose(t) }
    }
}

#[pyfunction]
fn simulate(config: &Config) -> PyResult<Dataset> {
    let inner = pipeline::simulate_dataset(&config.inner).map_err(to_py)?;
    Ok(Dataset { inner, config: config.inner.clone() })
}

/// Outcome of one scan.
#[pyclass(name = "ScanResult", frozen)]
struct ScanResult {
    inner: CoreScanResult,
}

#[pymethods]
impl ScanResult {
    #[getter]
    fn index(&self) -> usize {
        self.inner.index
    }

    #[getter]
    fn t(&self) -> f64 {
        self.inner.t
    }

    /// `"init"`, `"ok"` or `"no_matches"`.
    #[getter]
    fn status(&self) -> &'static str {
        self.inner.status.as_str()
    }

    #[getter]
    fn state(&self) -> State {
        State { inner: self.inner.state }
    }

    #[getter]
    fn pose(&self) -> Pose {
        Pose { inner: self.inner.pose() }
    }

    /// 18x18 posterior covariance.
    #[getter]
    fn covariance(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.cov)
    }

    #[getter]
    fn points(&self) -> usize {
        self.inner.points
    }

    #[getter]
    fn gate_inliers(&self) -> usize {
        self.inner.gate_inliers
    }

    /// Iterations, convergence and residual count of the update, if one ran.
    fn update<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyDict>>> {
        let Some(u) = &self.inner.update else { return Ok(None) };
        let d = PyDict::new(py);
        d.set_item("iterations", u.iterations)?;
        d.set_item("converged", u.converged)?;
        d.set_item("residuals", u.residuals)?;
        d.set_item("mean_normalized_residual", u.mean_normalized_residual)?;
        d.set_item("condition_number", u.condition_number)?;
        Ok(Some(d))
    }

    fn diagnostics_line(&self) -> String {
        self.inner.diagnostics_line()
    }
}

/// The odometry engine, fed one scan at a time.
#[pyclass(name = "Odometry", unsendable)]
struct Odometry {
    inner: CoreOdometry,
    imu: Vec<ImuSample>,
    /// Range and bearing standard deviations applied to `process_scan` returns.
    noise: (f64, f64),
}

fn imu_samples(imu: Vec<(f64, [f64; 3], [f64; 3])>) -> Vec<ImuSample> {
    imu.into_iter().map(|(t, g, a)| ImuSample::new(t, v3(g), v3(a))).collect()
}

#[pymethods]
impl Odometry {
    /// Initializes from the stationary start of `imu`, a list of `(t, gyro, acc)`.
    #[new]
    fn new(config: &Config, imu: Vec<(f64, [f64; 3], [f64; 3])>) -> PyResult<Self> {
        let imu = imu_samples(imu);
        Odometry::build(&config.inner, imu)
    }

    /// Builds an engine over a simulated dataset's IMU stream.
    #[staticmethod]
    fn for_dataset(config: &Config, dataset: &Dataset) -> PyResult<Self> {
        let imu = dataset.inner.imu.samples.clone();
        Odometry::build(&config.inner, imu)
    }

    /// Processes returns given as `(t, bearing, depth)` with the configured LiDAR noise.
    fn process_scan(&mut self, returns: Vec<Return>, t_end: f64) -> PyResult<ScanResult> {
        let noise = self.noise;
        let mut rays = Vec::with_capacity(returns.len());
        for (t, b, depth) in returns {
            let bearing =
                UnitBearing::new(v3(b)).ok_or_else(|| PyValueError::new_err("bearing must be a unit vector"))?;
            rays.push(LidarRay {
                bearing,
                depth,
                t,
                range_var: noise.0 * noise.0,
                bearing_cov: Matrix2::identity() * noise.1 * noise.1,
            });
        }
        let inner = self.inner.process_scan(&rays, t_end, &self.imu).map_err(to_py)?;
        Ok(ScanResult { inner })
    }

    /// Processes scan `index` of `dataset` with the simulator's own noise model.
    fn process_dataset_scan(&mut self, dataset: &Dataset, index: usize) -> PyResult<ScanResult> {
        let scan = dataset.inner.scans.get(index).ok_or_else(|| PyIndexError::new_err("scan index out of range"))?;
        let inner = self.inner.process_scan(&scan.rays, scan.t_end, &self.imu).map_err(to_py)?;
        Ok(ScanResult { inner })
    }

    #[getter]
    fn scans_processed(&self) -> usize {
        self.inner.scans_processed()
    }

    #[getter]
    fn failures(&self) -> usize {
        self.inner.failures()
    }

    #[getter]
    fn estimation_failed(&self) -> bool {
        self.inner.estimation_failed()
    }

    /// Plane leaves as dicts with `depth`, `center`, `half_size`, `normal`, `converged`.
    fn planes<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .map()
            .planes()
            .iter()
            .map(|p| {
                let d = PyDict::new(py);
                d.set_item("depth", p.depth)?;
                d.set_item("center", arr3(&p.center))?;
                d.set_item("half_size", p.half_size)?;
                d.set_item("normal", arr3(&p.plane.normal))?;
                d.set_item("converged", p.converged)?;
                Ok(d)
            })
            .collect()
    }

    fn map_stats(&self) -> String {
        self.inner.map().dump_stats()
    }
}

impl Odometry {
    fn build(cfg: &RunConfig, imu: Vec<ImuSample>) -> PyResult<Self> {
        let inner = CoreOdometry::from_imu(cfg.clone(), &imu).map_err(to_py)?;
        let noise = (cfg.lidar_noise.range_std, cfg.lidar_noise.bearing_std);
        Ok(Odometry { inner, imu, noise })
    }
}

/// Total-least-squares plane with propagated covariance, or `None` when the points
/// are not planar. `sigma` is the isotropic standard deviation of every point.
#[pyfunction]
#[pyo3(signature = (points, viewpoint, sigma=0.01))]
fn fit_plane<'py>(
    py: Python<'py>,
    points: Vec<[f64; 3]>,
    viewpoint: [f64; 3],
    sigma: f64,
) -> PyResult<Option<Bound<'py, PyDict>>> {
    let pts: Vec<WorldPoint> =
        points.iter().map(|p| WorldPoint::new(v3(*p), Mat3::identity() * sigma * sigma)).collect();
    match uncertainty::fit_plane(&pts, &v3(viewpoint), &PlaneFitConfig::default()).map_err(to_py)? {
        PlaneFit::NotPlanar(_) => Ok(None),
        PlaneFit::Plane(p) => {
            let d = PyDict::new(py);
            d.set_item("normal", arr3(&p.normal))?;
            d.set_item("center", arr3(&p.center))?;
            d.set_item("covariance", rows(&p.cov))?;
            d.set_item("eigenvalues", arr3(&p.eigenvalues))?;
            Ok(Some(d))
        }
    }
}

/// Absolute trajectory error of `(t, Pose)` lists; the reference is interpolated.
#[pyfunction]
fn evaluate_ate<'py>(
    py: Python<'py>,
    estimated: Vec<(f64, Pose)>,
    truth: Vec<(f64, Pose)>,
) -> PyResult<Bound<'py, PyDict>> {
    let conv = |s: Vec<(f64, Pose)>| s.into_iter().map(|(t, p)| (t, p.inner)).collect::<Vec<_>>();
    let r = sim::evaluate_ate(&conv(estimated), &conv(truth)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("rmse", r.rmse)?;
    d.set_item("max_translation_error", r.max_translation_error)?;
    d.set_item("max_rotation_error", r.max_rotation_error)?;
    d.set_item("count", r.count)?;
    Ok(d)
}

/// Runs odometry on the configured input files and writes the outputs.
#[pyfunction]
fn run_odometry<'py>(py: Python<'py>, config: &Config) -> PyResult<Bound<'py, PyDict>> {
    let r = py.detach(|| pipeline::run_odometry(&config.inner)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("scans", r.scans)?;
    d.set_item("failures", r.failures)?;
    d.set_item("estimation_failed", r.estimation_failed)?;
    Ok(d)
}

/// Writes a simulated dataset with ground truth to the output directory.
#[pyfunction]
fn run_simulate<'py>(py: Python<'py>, config: &Config) -> PyResult<Bound<'py, PyDict>> {
    let r = py.detach(|| pipeline::run_simulate(&config.inner)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("scans", r.scans)?;
    d.set_item("imu_samples", r.imu_samples)?;
    d.set_item("mean_hit_ratio", r.mean_hit_ratio)?;
    d.set_item("min_hit_ratio", r.min_hit_ratio)?;
    Ok(d)
}

/// Runs the oracle checks; one `(name, passed, value, tol)` per check.
#[pyfunction]
#[pyo3(signature = (config=None, names=None))]
fn run_verify(
    py: Python<'_>,
    config: Option<&Config>,
    names: Option<Vec<String>>,
) -> PyResult<Vec<(String, bool, f64, f64)>> {
    let cfg = config.map(|c| c.inner.verify).unwrap_or_default();
    let results = py.detach(|| match &names {
        None => Ok(verify::run_verify(&cfg).checks),
        Some(list) => list
            .iter()
            .map(|n| verify::run_check(n, &cfg).ok_or_else(|| format!("unknown check '{n}'")))
            .collect::<Result<Vec<_>, _>>(),
    });
    let results = results.map_err(PyValueError::new_err)?;
    Ok(results.into_iter().map(|c| (c.name.to_string(), c.passed, c.value, c.tol)).collect())
}

#[pyfunction]
fn check_names() -> Vec<&'static str> {
    verify::check_names()
}

#[pymodule]
fn voxlio(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Pose>()?;
    m.add_class::<State>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<ScanResult>()?;
    m.add_class::<Odometry>()?;
    m.add_function(wrap_pyfunction!(so3_exp, m)?)?;
    m.add_function(wrap_pyfunction!(so3_log, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_plane, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_ate, m)?)?;
    m.add_function(wrap_pyfunction!(run_odometry, m)?)?;
    m.add_function(wrap_pyfunction!(run_simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    m.add_function(wrap_pyfunction!(check_names, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
