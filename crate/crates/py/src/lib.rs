//! Python bindings: images, metrics, checkpoints, stage training and the enhancement pipeline.

use std::collections::HashMap;

use kind_lce::checkpoint::{self, Stage};
use kind_lce::curve::{self, CurveMode};
use kind_lce::decomposition;
use kind_lce::metrics;
use kind_lce::pipeline::{self, EnhanceOptions};
use kind_lce::train::{self, PairDataset, TrainConfig, Upstream};
use kind_lce::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::Dependency(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for kind_lce::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Planar float image with values in [0, 1].
#[pyclass(module = "kind_lce_py", frozen, from_py_object)]
#[derive(Clone)]
pub struct Image {
    inner: kind_lce::Image,
}

impl From<kind_lce::Image> for Image {
    fn from(inner: kind_lce::Image) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl Image {
    /// Builds an image from flat channel-major data.
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(kind_lce::Image::new(height, width, channels, data).py()?.into())
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(kind_lce::Image::load_ppm(path).py()?.into())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save_ppm(path).py()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.channels(), self.inner.height(), self.inner.width())
    }

    fn to_list(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn synth_darken(&self, gamma: f64, noise_sigma: f64, seed: u64) -> PyResult<Image> {
        Ok(self.inner.synth_darken(gamma, noise_sigma, seed).py()?.into())
    }

    fn resize(&self, height: usize, width: usize) -> PyResult<Image> {
        Ok(self.inner.resize_bilinear(height, width).py()?.into())
    }

    fn __repr__(&self) -> String {
        format!(
            "Image(channels={}, height={}, width={})",
            self.inner.channels(),
            self.inner.height(),
            self.inner.width()
        )
    }
}

/// `{"psnr", "ssim", "mae", "mse"}` on the 8-bit scale.
#[pyfunction]
fn evaluate(reference: &Image, test: &Image) -> PyResult<HashMap<&'static str, f64>> {
    let r = metrics::evaluate(&reference.inner, &test.inner).py()?;
    Ok(HashMap::from([("psnr", r.psnr), ("ssim", r.ssim), ("mae", r.mae), ("mse", r.mse)]))
}

/// Max-channel illumination and the matching reflectance, as `(illumination, reflectance)`.
#[pyfunction]
#[pyo3(signature = (img, eps = decomposition::RETINEX_EPS))]
fn classical_decompose(img: &Image, eps: f64) -> PyResult<(Image, Image)> {
    let d = decomposition::classical_decompose(&img.inner, eps).py()?;
    Ok((d.illumination.into(), d.reflectance.into()))
}

#[pyfunction]
fn curve_value(x: f64, alpha: f64) -> f64 {
    curve::curve_value(x, alpha)
}

/// `[(low, normal), ...]` of seeded synthetic pairs.
#[pyfunction]
fn synthetic_pairs(n: usize, size: usize, seed: u64) -> PyResult<Vec<(Image, Image)>> {
    let set = train::make_synthetic_pairs(n, size, seed).py()?;
    Ok(set.pairs.into_iter().map(|p| (p.low.into(), p.normal.into())).collect())
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().py()
}

#[pyclass(module = "kind_lce_py", frozen, from_py_object)]
#[derive(Clone)]
pub struct Checkpoint {
    inner: checkpoint::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: checkpoint::load_checkpoint(path).py()? })
    }

    /// Freshly initialised weights for `stage` (`decom`, `restore` or `illum`).
    #[staticmethod]
    fn random(stage: &str, seed: u64) -> PyResult<Self> {
        let stage: Stage = parse(stage)?;
        Ok(Self { inner: checkpoint::Checkpoint::new(stage, stage.init_params(seed)) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save_checkpoint(&self.inner, path).py()
    }

    #[getter]
    fn stage(&self) -> String {
        self.inner.stage.to_string()
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    /// `(illumination, reflectance)` from a decomposition checkpoint.
    fn decompose(&self, img: &Image) -> PyResult<(Image, Image)> {
        let p = self.inner.expect_stage(Stage::Decom).py()?;
        let d = decomposition::decompose(p, &img.inner).py()?;
        Ok((d.illumination.into(), d.reflectance.into()))
    }
}

/// Trains one stage; returns the checkpoint and the per-step losses.
///
/// `pairs` is a list of `(low, normal)` images. Restore and illum stages need `decom`.
#[pyfunction]
#[pyo3(signature = (stage, pairs, steps = 2000, lr = 1e-3, batch = 4, seed = 0, decom = None, curve_mode = "iterative", illum_tv_weight = 1.0))]
#[allow(clippy::too_many_arguments)]
fn train_stage(
    py: Python<'_>,
    stage: &str,
    pairs: Vec<(Image, Image)>,
    steps: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    decom: Option<Checkpoint>,
    curve_mode: &str,
    illum_tv_weight: f64,
) -> PyResult<(Checkpoint, Vec<f64>)> {
    let config = TrainConfig {
        steps,
        lr,
        batch,
        seed,
        curve_mode: parse::<CurveMode>(curve_mode)?,
        illum_tv_weight,
        ..TrainConfig::new(parse(stage)?)
    };
    let data = PairDataset {
        pairs: pairs
            .into_iter()
            .map(|(l, n)| train::Pair { low: l.inner, normal: n.inner })
            .collect(),
        provenance: train::Provenance::Directory,
    };
    let decom = decom.map(|c| c.inner);
    let out = py
        .detach(|| train::train_stage(&config, &data, Upstream { decom: decom.as_ref() }))
        .py()?;
    Ok((Checkpoint { inner: out.checkpoint }, out.losses))
}

#[pyclass(module = "kind_lce_py", frozen)]
pub struct Pipeline {
    inner: pipeline::Pipeline,
}

fn options(target_mean: f64, crop_fraction: f64, curve_mode: &str) -> PyResult<EnhanceOptions> {
    Ok(EnhanceOptions {
        target_mean,
        crop_fraction,
        curve_mode: parse(curve_mode)?,
        ..EnhanceOptions::default()
    })
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (decom, restore, illum, target_mean = 0.5, crop_fraction = 0.5, curve_mode = "iterative"))]
    fn new(
        decom: &Checkpoint,
        restore: &Checkpoint,
        illum: &Checkpoint,
        target_mean: f64,
        crop_fraction: f64,
        curve_mode: &str,
    ) -> PyResult<Self> {
        let opts = options(target_mean, crop_fraction, curve_mode)?;
        let inner = pipeline::Pipeline::from_checkpoints(&decom.inner, &restore.inner, &illum.inner, opts);
        Ok(Self { inner: inner.py()? })
    }

    /// Untrained pipeline, useful for smoke tests and benchmarks.
    #[staticmethod]
    #[pyo3(signature = (seed = 0, target_mean = 0.5, crop_fraction = 0.5, curve_mode = "iterative"))]
    fn random(seed: u64, target_mean: f64, crop_fraction: f64, curve_mode: &str) -> PyResult<Self> {
        let opts = options(target_mean, crop_fraction, curve_mode)?;
        Ok(Self { inner: pipeline::Pipeline::random(seed, opts) })
    }

    fn enhance(&self, py: Python<'_>, img: &Image) -> PyResult<Image> {
        let out = py.detach(|| self.inner.enhance(&img.inner)).py()?;
        Ok(out.output.into())
    }

    /// All intermediate maps keyed by name.
    fn enhance_maps(&self, py: Python<'_>, img: &Image) -> PyResult<HashMap<&'static str, Image>> {
        let e = py.detach(|| self.inner.enhance(&img.inner)).py()?;
        Ok(HashMap::from([
            ("i_low", e.i_low.into()),
            ("r_low", e.r_low.into()),
            ("r_out", e.r_out.into()),
            ("i_out", e.i_out.into()),
            ("output", e.output.into()),
        ]))
    }
}

#[pymodule]
fn kind_lce_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Image>()?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(classical_decompose, m)?)?;
    m.add_function(wrap_pyfunction!(curve_value, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(train_stage, m)?)?;
    Ok(())
}
