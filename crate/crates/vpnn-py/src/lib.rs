//! Python bindings: the model and dataset types plus training, evaluation,
//! gradient checking, volume checking, and learning profiles.
//!
//! Build with `cargo build --release -p vpnn-py`; `python/smoke_test.py`
//! shows how to load the resulting cdylib without any packaging tooling.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use vpnn::data;
use vpnn::diagnostics;
use vpnn::optim::{self, TrainConfig};
use vpnn::rng::SeededRng;
use vpnn::{Error, ModelConfig, Variant};

/// One per-epoch record: (epoch, mean loss, test accuracy, seconds).
type EpochRow = (usize, f64, f64, f64);

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Format { .. } | Error::CorruptModel(_) | Error::Csv(_) => {
            PyIOError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_variant(name: &str) -> PyResult<Variant> {
    Variant::parse(name).ok_or_else(|| {
        PyValueError::new_err(format!(
            "unknown variant '{name}' (expected vpnn, vpnn1.3, vpnnt, s-relu, mixed1, mixed2)"
        ))
    })
}

/// A preprocessed dataset (even width, inputs scaled by 1/sqrt(n_in)).
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Seeded Gaussian blobs around random unit centers, preprocessed.
    #[staticmethod]
    #[pyo3(signature = (n_per_class, dim, classes, separation, seed))]
    fn blobs(
        n_per_class: usize,
        dim: usize,
        classes: usize,
        separation: f64,
        seed: u64,
    ) -> PyResult<Self> {
        Ok(Self {
            inner: data::synthetic_blobs(n_per_class, dim, classes, separation, seed)
                .map_err(to_py_err)?,
        })
    }

    /// CSV interchange format: header `label,f0,f1,...`, features in [0,1].
    #[staticmethod]
    fn from_csv(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::preprocess(data::load_csv(&path).map_err(to_py_err)?),
        })
    }

    /// MNIST IDX pair (big-endian, magics 2051/2049).
    #[staticmethod]
    fn mnist(images: std::path::PathBuf, labels: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::preprocess(data::load_mnist_idx(&images, &labels).map_err(to_py_err)?),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    fn input(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        Ok(self.inner.input(i).to_vec())
    }

    fn label(&self, i: usize) -> PyResult<usize> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        Ok(self.inner.label(i))
    }

    /// (head, tail) with the last `fraction` of records held out.
    fn split_tail(&self, fraction: f64) -> (PyDataset, PyDataset) {
        let (head, tail) = self.inner.split_tail(fraction);
        (PyDataset { inner: head }, PyDataset { inner: tail })
    }

    /// The first n records.
    fn take(&self, n: usize) -> PyDataset {
        PyDataset {
            inner: self.inner.take(n),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name='{}', len={}, width={}, classes={})",
            self.inner.name(),
            self.inner.len(),
            self.inner.width(),
            self.inner.n_classes()
        )
    }
}

/// A VPNN (or baseline) network.
#[pyclass(name = "Model")]
struct PyModel {
    inner: vpnn::Model,
}

#[pymethods]
impl PyModel {
    /// Builds a model from a seed; identical arguments give bit-identical
    /// models.
    #[staticmethod]
    #[pyo3(signature = (variant, n_in, n_out, layers, seed, k=None, cheb_m=None))]
    fn build(
        variant: &str,
        n_in: usize,
        n_out: usize,
        layers: usize,
        seed: u64,
        k: Option<usize>,
        cheb_m: Option<f64>,
    ) -> PyResult<Self> {
        let mut config = ModelConfig::new(parse_variant(variant)?, n_in, n_out, layers, seed);
        if let Some(k) = k {
            config = config.with_k(k);
        }
        if let Some(m) = cheb_m {
            config = config.with_cheb_m(m);
        }
        Ok(Self {
            inner: config.build().map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: vpnn::Model::load(&path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant().name()
    }

    #[getter]
    fn n_in(&self) -> usize {
        self.inner.n_in()
    }

    #[getter]
    fn n_out(&self) -> usize {
        self.inner.n_out()
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.depth()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    /// (per_layer, hidden_layers, total) trainable parameter counts.
    fn param_count(&self) -> (usize, usize, usize) {
        let c = self.inner.param_count();
        (c.per_layer, c.hidden_layers, c.total)
    }

    /// Raw network output Z a^(L-1).
    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.raw_output(&x).map_err(to_py_err)
    }

    /// Argmax class (ties toward the lowest index).
    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        self.inner.predict(&x).map_err(to_py_err)
    }

    /// Per-layer ||dE/dz|| for one (input, target) pair.
    fn delta_norms(&self, x: Vec<f64>, target: usize) -> PyResult<Vec<f64>> {
        let (cache, _) = self.inner.forward(&x).map_err(to_py_err)?;
        let grads = self.inner.backward(&cache, target).map_err(to_py_err)?;
        Ok(grads.delta_norms().to_vec())
    }

    /// Trains in place with SGD momentum and the two-phase learning-rate
    /// schedule. Returns (final_accuracy, [(epoch, loss, test_accuracy,
    /// seconds), ...]).
    #[pyo3(signature = (
        train_data, test_data, epochs, lr,
        lr_late=0.01, switch_fraction=0.5, momentum=0.9, batch=100, seed=1, threads=1
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        train_data: &PyDataset,
        test_data: &PyDataset,
        epochs: usize,
        lr: f64,
        lr_late: f64,
        switch_fraction: f64,
        momentum: f64,
        batch: usize,
        seed: u64,
        threads: usize,
    ) -> PyResult<(f64, Vec<EpochRow>)> {
        let cfg = TrainConfig {
            lr_initial: lr,
            lr_late,
            switch_fraction,
            momentum,
            batch_size: batch,
            epochs,
            seed,
            threads,
        };
        let report = optim::train(&mut self.inner, &train_data.inner, &test_data.inner, &cfg)
            .map_err(to_py_err)?;
        let rows = report
            .epochs
            .iter()
            .map(|r| (r.epoch, r.loss, r.test_accuracy, r.seconds))
            .collect();
        Ok((report.final_accuracy, rows))
    }

    /// Fraction of samples classified correctly.
    fn evaluate(&self, data: &PyDataset) -> PyResult<f64> {
        optim::evaluate(&self.inner, &data.inner).map_err(to_py_err)
    }

    /// Compares hand-derived gradients against central finite differences
    /// for every trainable parameter. Returns (pass, max_rel_error).
    #[pyo3(signature = (samples=2, tol=1e-5, seed=1))]
    fn grad_check(&self, samples: usize, tol: f64, seed: u64) -> PyResult<(bool, f64)> {
        let report = diagnostics::grad_check(&self.inner, samples, tol, seed).map_err(to_py_err)?;
        Ok((report.pass, report.max_rel_error))
    }

    /// |det J| of the hidden map at a random numerically safe point.
    #[pyo3(signature = (seed=1))]
    fn volume_check(&self, seed: u64) -> PyResult<f64> {
        let mut rng = SeededRng::new(seed);
        let point = diagnostics::smooth_input(&self.inner, &mut rng).map_err(to_py_err)?;
        diagnostics::model_volume_check(&self.inner, &point, 1e-6).map_err(to_py_err)
    }

    /// Trains briefly at a fixed learning rate and reports mean per-layer
    /// delta norms. Returns (delta_norms, y_log10, slope).
    #[pyo3(signature = (data, epochs=3, lr=0.01, batch=100, seed=1, threads=1))]
    fn learning_profile(
        &mut self,
        data: &PyDataset,
        epochs: usize,
        lr: f64,
        batch: usize,
        seed: u64,
        threads: usize,
    ) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
        let profile = diagnostics::learning_profile(
            &mut self.inner,
            &data.inner,
            epochs,
            lr,
            batch,
            seed,
            threads,
        )
        .map_err(to_py_err)?;
        Ok((profile.delta_norms, profile.y_log10, profile.slope))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant='{}', n_in={}, n_out={}, layers={}, k={}, seed={})",
            self.inner.variant().name(),
            self.inner.n_in(),
            self.inner.n_out(),
            self.inner.depth(),
            self.inner.k(),
            self.inner.seed()
        )
    }
}

/// Trainable parameters per hidden layer without building the model.
#[pyfunction]
#[pyo3(signature = (variant, n_in, k=None))]
fn params_per_layer(variant: &str, n_in: usize, k: Option<usize>) -> PyResult<usize> {
    let variant = parse_variant(variant)?;
    let k = k.unwrap_or_else(|| vpnn::model::default_k(n_in));
    Ok(variant.params_per_layer(n_in, k))
}

#[pymodule]
fn vpnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(params_per_layer, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
