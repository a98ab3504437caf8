//! Python module `kpgen`: shape generation, geometry utilities, training,
//! detection and metrics over plain Python lists.

use pyo3::prelude::*;

#[pymodule]
pub mod kpgen {
    use std::path::PathBuf;

    use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
    use pyo3::prelude::*;

    use kpgen_core::config::{BetaPrior, RunConfig};
    use kpgen_core::datagen::{downsample, generate as gen_shape, Family, ShapeSpec};
    use kpgen_core::geometry::{self, ply, random_rotation, Point};
    use kpgen_core::metrics::{self, DetectOptions, DetectionResult};
    use kpgen_core::model::{sample_beta_prior, Model as CoreModel};
    use kpgen_core::{train as core_train, Error};

    fn py_err(e: Error) -> PyErr {
        match e {
            Error::Io { .. } => PyIOError::new_err(e.to_string()),
            Error::Config(_) | Error::Dimension(_) | Error::Parse { .. } | Error::Geometry(_) | Error::Metric(_) => {
                PyValueError::new_err(e.to_string())
            }
            _ => PyRuntimeError::new_err(e.to_string()),
        }
    }

    /// An unordered point set with optional annotations.
    #[pyclass(name = "PointCloud", from_py_object)]
    #[derive(Clone)]
    pub struct PyPointCloud {
        pub inner: geometry::PointCloud,
    }

    #[pymethods]
    impl PyPointCloud {
        #[new]
        fn new(points: Vec<[f32; 3]>) -> PyResult<Self> {
            let inner = geometry::PointCloud::new(points);
            inner.validate().map_err(py_err)?;
            Ok(PyPointCloud { inner })
        }

        #[staticmethod]
        fn read_ply(path: PathBuf) -> PyResult<Self> {
            Ok(PyPointCloud {
                inner: ply::read_ply(&path).map_err(py_err)?,
            })
        }

        fn write_ply(&self, path: PathBuf) -> PyResult<()> {
            ply::write_ply(&path, &self.inner).map_err(py_err)
        }

        fn __len__(&self) -> usize {
            self.inner.len()
        }

        #[getter]
        fn points(&self) -> Vec<[f32; 3]> {
            self.inner.points.clone()
        }

        #[getter]
        fn part_labels(&self) -> Option<Vec<i32>> {
            self.inner.part_labels.clone()
        }

        #[getter]
        fn gt_keypoints(&self) -> Option<Vec<usize>> {
            self.inner.gt_keypoints.clone()
        }

        #[getter]
        fn correspondence_ids(&self) -> Option<Vec<i32>> {
            self.inner.correspondence_ids.clone()
        }

        /// Copy rotated by the seeded uniform rotation.
        fn rotated(&self, seed: u64) -> Self {
            PyPointCloud {
                inner: self.inner.rotated(&random_rotation(seed)),
            }
        }

        fn normalized(&self) -> PyResult<Self> {
            Ok(PyPointCloud {
                inner: geometry::normalize_cloud(&self.inner).map_err(py_err)?,
            })
        }

        fn downsample(&self, m: usize, seed: u64) -> PyResult<Self> {
            Ok(PyPointCloud {
                inner: downsample(&self.inner, m, seed).map_err(py_err)?,
            })
        }

        /// Index pairs mirrored across the annotated symmetry plane.
        fn symmetric_pairs(&self, tol: f32) -> PyResult<Vec<(usize, usize)>> {
            let plane = self
                .inner
                .symmetry_plane
                .as_ref()
                .ok_or_else(|| PyValueError::new_err("cloud has no symmetry plane"))?;
            Ok(geometry::symmetric_pairs(&self.inner, plane, tol))
        }

        fn __repr__(&self) -> String {
            format!("PointCloud({} points)", self.inner.len())
        }
    }

    /// Samples a synthetic shape: rectangle, box, table or chair.
    #[pyfunction]
    #[pyo3(signature = (family, n_points = 2048, jitter = 0.002, seed = 0))]
    fn generate(family: &str, n_points: usize, jitter: f64, seed: u64) -> PyResult<PyPointCloud> {
        let family: Family = family.parse().map_err(py_err)?;
        let inner = gen_shape(&ShapeSpec::random(family, n_points, jitter, seed)).map_err(py_err)?;
        Ok(PyPointCloud { inner })
    }

    #[pyfunction]
    fn chamfer_distance(a: Vec<Point>, b: Vec<Point>) -> PyResult<f64> {
        geometry::chamfer_distance(&a, &b).map_err(py_err)
    }

    /// Greedy non-maximum suppression; indices in descending score order.
    #[pyfunction]
    #[pyo3(signature = (points, scores, radius = 0.1, threshold = 0.5))]
    fn nms(points: Vec<Point>, scores: Vec<f32>, radius: f32, threshold: f32) -> PyResult<Vec<usize>> {
        if points.len() != scores.len() {
            return Err(PyValueError::new_err("one score per point required"));
        }
        Ok(geometry::nms(&points, &scores, radius, threshold))
    }

    /// Shortest-path distances from `source` over the k-nearest-neighbor graph.
    #[pyfunction]
    #[pyo3(signature = (cloud, source, k = geometry::GEODESIC_K))]
    fn geodesic_distances(cloud: &PyPointCloud, source: usize, k: usize) -> PyResult<Vec<f64>> {
        if source >= cloud.inner.len() {
            return Err(PyValueError::new_err("source index out of range"));
        }
        Ok(geometry::geodesic_distances(&cloud.inner, source, k))
    }

    #[pyfunction]
    fn rotation(seed: u64) -> [[f64; 3]; 3] {
        random_rotation(seed)
    }

    #[pyfunction]
    #[pyo3(signature = (n, alpha = 0.01, beta = 0.05, seed = 0))]
    fn sample_beta(n: usize, alpha: f64, beta: f64, seed: u64) -> PyResult<Vec<f32>> {
        sample_beta_prior(&BetaPrior { alpha, beta }, n, seed).map_err(py_err)
    }

    /// Training and model hyperparameters as `key = value` entries.
    #[pyclass(name = "Config", from_py_object)]
    #[derive(Clone)]
    pub struct PyConfig {
        pub inner: RunConfig,
    }

    #[pymethods]
    impl PyConfig {
        /// Preset `full`, `desk` or `tiny`.
        #[new]
        #[pyo3(signature = (preset = "full"))]
        fn new(preset: &str) -> PyResult<Self> {
            let inner = match preset {
                "full" => RunConfig::default(),
                "desk" => RunConfig::desk(),
                "tiny" => RunConfig::tiny(),
                other => return Err(PyValueError::new_err(format!("unknown preset '{other}'"))),
            };
            Ok(PyConfig { inner })
        }

        fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
            self.inner.set(key, value).map_err(py_err)
        }

        fn ablate(&mut self, name: &str) -> PyResult<()> {
            self.inner.apply_ablation(name).map_err(py_err)
        }

        fn entries(&self) -> Vec<(String, String)> {
            self.inner.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
        }

        fn to_text(&self) -> String {
            self.inner.to_text()
        }
    }

    /// A keypoint detector: trained or freshly initialized parameters plus configuration.
    #[pyclass(name = "Model")]
    pub struct PyModel {
        pub inner: CoreModel,
        /// Per-epoch `(epoch, l_recon, l_total)` of the last training run.
        pub history: Vec<(usize, f32, f32)>,
    }

    #[pymethods]
    impl PyModel {
        #[new]
        #[pyo3(signature = (config, seed = 0))]
        fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
            Ok(PyModel {
                inner: CoreModel::new(config.inner.clone(), seed).map_err(py_err)?,
                history: Vec::new(),
            })
        }

        /// Trains on the given clouds; `out_dir` receives per-epoch checkpoints and the log.
        #[staticmethod]
        #[pyo3(signature = (clouds, config, out_dir = None))]
        fn train(clouds: Vec<PyPointCloud>, config: &PyConfig, out_dir: Option<PathBuf>) -> PyResult<Self> {
            let clouds: Vec<_> = clouds.into_iter().map(|c| c.inner).collect();
            let out = out_dir.map(|dir| core_train::OutputDir { dir });
            let outcome = core_train::train(&clouds, &config.inner, out.as_ref()).map_err(py_err)?;
            let history = outcome
                .log
                .iter()
                .filter(|r| outcome.log.iter().rev().find(|x| x.epoch == r.epoch).map(|x| x.step) == Some(r.step))
                .map(|r| (r.epoch, r.l_recon, r.l_total))
                .collect();
            Ok(PyModel {
                inner: outcome.model,
                history,
            })
        }

        #[staticmethod]
        fn load(path: PathBuf) -> PyResult<Self> {
            Ok(PyModel {
                inner: CoreModel::load(&path).map_err(py_err)?,
                history: Vec::new(),
            })
        }

        fn save(&self, path: PathBuf) -> PyResult<()> {
            self.inner.save(&path).map_err(py_err)
        }

        #[getter]
        fn history(&self) -> Vec<(usize, f32, f32)> {
            self.history.clone()
        }

        #[getter]
        fn config(&self) -> PyConfig {
            PyConfig {
                inner: self.inner.config.clone(),
            }
        }

        /// Per-point keypoint probability Φ.
        fn saliency(&self, cloud: &PyPointCloud) -> PyResult<Vec<f32>> {
            Ok(metrics::score_cloud(&self.inner, &cloud.inner).map_err(py_err)?.phi)
        }

        /// `(indices, scores)` after suppression and thresholding.
        #[pyo3(signature = (cloud, nms_radius = 0.1, threshold = 0.5, top_k = None))]
        fn detect(
            &self,
            cloud: &PyPointCloud,
            nms_radius: f32,
            threshold: f32,
            top_k: Option<usize>,
        ) -> PyResult<(Vec<usize>, Vec<f32>)> {
            let opts = DetectOptions {
                nms_radius,
                threshold,
                top_k,
                with_embeddings: false,
            };
            let r = metrics::detect(&self.inner, &cloud.inner, "cloud", &opts).map_err(py_err)?;
            Ok((r.keypoint_indices, r.scores))
        }

        /// Best `k` keypoints after suppression, ignoring the threshold.
        #[pyo3(signature = (cloud, k, nms_radius = 0.1))]
        fn top_k(&self, cloud: &PyPointCloud, k: usize, nms_radius: f32) -> PyResult<Vec<usize>> {
            top_k(&self.inner, &cloud.inner, k, nms_radius).map_err(py_err)
        }

        /// Percentage of top-`k` keypoints re-detected within `dist_threshold` under random rotations.
        #[pyo3(signature = (cloud, k = 4, dist_threshold = 0.1, rotations = 20, seed = 0, nms_radius = 0.1))]
        fn repeatability(
            &self,
            cloud: &PyPointCloud,
            k: usize,
            dist_threshold: f32,
            rotations: usize,
            seed: u64,
            nms_radius: f32,
        ) -> PyResult<f64> {
            metrics::rotation_repeatability(
                |pc| top_k(&self.inner, pc, k, nms_radius),
                &cloud.inner,
                k,
                dist_threshold,
                rotations,
                seed,
            )
            .map_err(py_err)
        }
    }

    fn top_k(model: &CoreModel, pc: &geometry::PointCloud, k: usize, nms_radius: f32) -> kpgen_core::Result<Vec<usize>> {
        let s = metrics::score_cloud(model, pc)?;
        metrics::top_k_by_score(&pc.points, &s.phi, Some(&s.logits), &s.valid, k, nms_radius)
    }

    /// Keypoint mIoU against ground truth at a geodesic threshold.
    #[pyfunction]
    #[pyo3(signature = (detected, gt, cloud, threshold = 0.1))]
    fn keypoint_miou(detected: Vec<usize>, gt: Vec<usize>, cloud: &PyPointCloud, threshold: f64) -> PyResult<f64> {
        metrics::keypoint_miou(&detected, &gt, &cloud.inner, threshold).map_err(py_err)
    }

    /// Fraction of `a` with a point of `b` closer than `threshold`.
    #[pyfunction]
    fn repeatability_fraction(a: Vec<Point>, b: Vec<Point>, threshold: f32) -> PyResult<f64> {
        metrics::repeatability_fraction(&a, &b, threshold).map_err(py_err)
    }

    /// Overlap (%) of two keypoint sets through the clouds' correspondence ids.
    #[pyfunction]
    #[pyo3(signature = (a, cloud_a, b, cloud_b, dice = false))]
    fn correspondence_iou(
        a: Vec<usize>,
        cloud_a: &PyPointCloud,
        b: Vec<usize>,
        cloud_b: &PyPointCloud,
        dice: bool,
    ) -> PyResult<f64> {
        let ids = |c: &PyPointCloud| {
            c.inner
                .correspondence_ids
                .clone()
                .ok_or_else(|| PyValueError::new_err("cloud has no correspondence ids"))
        };
        let (na, nb) = (a.len(), b.len());
        let ra = DetectionResult::new("a", a, vec![1.0; na]);
        let rb = DetectionResult::new("b", b, vec![1.0; nb]);
        metrics::correspondence_iou(&ra, &ids(cloud_a)?, &rb, &ids(cloud_b)?, dice).map_err(py_err)
    }
}
