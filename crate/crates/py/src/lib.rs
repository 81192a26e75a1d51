//! Python bindings: waveforms, STFT, the affinity objective, clustering, scoring, trained
//! models and the full experiment.

use std::path::PathBuf;

use blindsep::cluster::{kmeans_cosine, separate};
use blindsep::container::{network_from_container, ModelContainer};
use blindsep::dsp::{istft, stft, NormalizationStats, Spectrogram};
use blindsep::net::{
    affinity_loss as loss, AffinityTarget, BinMask, EmbeddingMatrix, NetworkParameters,
};
use blindsep::pipeline::{self, generate_corpus, run_experiment};
use blindsep::Error;
use ndarray::Array2;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingDependency(_) => PyFileNotFoundError::new_err(e.to_string()),
        Error::Numeric(_) | Error::Io(_) | Error::Wav(_) | Error::Json(_) | Error::Container(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(
        Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
            .expect("checked shape"),
    )
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Mono audio with samples in [-1, 1).
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Waveform {
    inner: blindsep::dsp::Waveform,
}

#[pymethods]
impl Waveform {
    #[new]
    #[pyo3(signature = (samples, sample_rate=8000))]
    fn new(samples: Vec<f64>, sample_rate: u32) -> PyResult<Self> {
        Ok(Self {
            inner: blindsep::dsp::Waveform::new(samples, sample_rate).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn read_wav(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: blindsep::dsp::Waveform::read_wav(path).map_err(py_err)?,
        })
    }

    fn write_wav(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_wav(path).map_err(py_err)
    }

    #[getter]
    fn samples(&self) -> Vec<f64> {
        self.inner.samples().to_vec()
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.sample_rate()
    }

    fn energy(&self) -> f64 {
        self.inner.energy()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn waves(ws: &[Waveform]) -> Vec<blindsep::dsp::Waveform> {
    ws.iter().map(|w| w.inner.clone()).collect()
}

fn wrap(ws: Vec<blindsep::dsp::Waveform>) -> Vec<Waveform> {
    ws.into_iter().map(|inner| Waveform { inner }).collect()
}

#[pyclass(name = "Spectrogram")]
struct PySpectrogram {
    inner: Spectrogram,
}

#[pymethods]
impl PySpectrogram {
    /// `(frames, freq_bins)`; the Nyquist bin is kept separately.
    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.n_frames(), self.inner.freq_bins())
    }

    fn magnitudes(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.magnitudes())
    }

    fn istft(&self) -> PyResult<Waveform> {
        Ok(Waveform {
            inner: istft(&self.inner).map_err(py_err)?,
        })
    }
}

#[pyfunction(name = "stft")]
#[pyo3(signature = (wave, window_len=512, hop=128))]
fn py_stft(wave: &Waveform, window_len: usize, hop: usize) -> PyResult<PySpectrogram> {
    Ok(PySpectrogram {
        inner: stft(&wave.inner, window_len, hop).map_err(py_err)?,
    })
}

/// Returns `(mixture, scaled_a, scaled_b)` with `a` `snr_db` above `b`.
#[pyfunction]
fn mix_at_snr(a: &Waveform, b: &Waveform, snr_db: f64) -> PyResult<(Waveform, Waveform, Waveform)> {
    let m = blindsep::dsp::mix_at_snr(&a.inner, &b.inner, snr_db).map_err(py_err)?;
    Ok((
        Waveform { inner: m.mixture },
        Waveform { inner: m.scaled_a },
        Waveform { inner: m.scaled_b },
    ))
}

/// Affinity objective of row-normalized `embeddings` against per-row source labels. Rows
/// labelled `None` are left out.
#[pyfunction]
fn affinity_loss(
    embeddings: Vec<Vec<f64>>,
    labels: Vec<Option<usize>>,
    n_sources: usize,
) -> PyResult<f64> {
    let u = matrix(embeddings)?;
    if u.nrows() != labels.len() {
        return Err(PyValueError::new_err("one label per embedding row"));
    }
    let (v, _) = EmbeddingMatrix::normalize(&u);
    let keep = Array2::from_shape_fn((labels.len(), 1), |(i, _)| labels[i].is_some());
    let y = AffinityTarget::from_labels(labels, n_sources).map_err(py_err)?;
    loss(&v, &y, &BinMask { keep }).map_err(py_err)
}

/// Spherical k-means with restarts; returns `(labels, total_cost)`.
#[pyfunction]
#[pyo3(signature = (points, k, restarts=10, seed=0))]
fn kmeans(
    points: Vec<Vec<f64>>,
    k: usize,
    restarts: usize,
    seed: u64,
) -> PyResult<(Vec<usize>, f64)> {
    let a = kmeans_cosine(matrix(points)?.view(), k, restarts, seed).map_err(py_err)?;
    Ok((a.labels, a.total_cost))
}

#[pyfunction]
fn sdr(estimate: &Waveform, reference: &Waveform) -> PyResult<f64> {
    blindsep::eval::sdr(&estimate.inner, &reference.inner).map_err(py_err)
}

/// Best-permutation SDR and improvement over the mixture, as a dict.
#[pyfunction]
fn sdr_improvement<'py>(
    py: Python<'py>,
    estimates: Vec<Waveform>,
    references: Vec<Waveform>,
    mixture: &Waveform,
) -> PyResult<Bound<'py, PyDict>> {
    let r =
        blindsep::eval::sdr_improvement(&waves(&estimates), &waves(&references), &mixture.inner)
            .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("sdr", r.sdr)?;
    d.set_item("mixture_sdr", r.mixture_sdr)?;
    d.set_item("improvement", r.improvement)?;
    d.set_item("mean_improvement", r.mean_improvement)?;
    d.set_item("permutation", r.permutation)?;
    Ok(d)
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct ExperimentConfig {
    inner: pipeline::ExperimentConfig,
}

#[pymethods]
impl ExperimentConfig {
    /// `desk` or `paper`.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::ExperimentConfig::preset(name).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::ExperimentConfig::from_toml(text).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }
}

/// A trained embedding network with its feature normalization.
#[pyclass]
struct Separator {
    params: NetworkParameters,
    stats: Option<NormalizationStats>,
}

#[pymethods]
impl Separator {
    /// Loads a `network.bsm` container.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = ModelContainer::load(&path).map_err(py_err)?;
        let (params, stats) = network_from_container(&c).map_err(py_err)?;
        Ok(Self { params, stats })
    }

    /// Width of the speaker block the network expects; 0 for a baseline network.
    #[getter]
    fn ivector_width(&self) -> usize {
        self.params.shape.ivector_width
    }

    /// Separates `mixture` into `n_sources` estimates; adapted networks take one speaker vector
    /// per source.
    #[pyo3(signature = (mixture, config, ivectors=None, n_sources=2))]
    fn separate(
        &self,
        mixture: &Waveform,
        config: &ExperimentConfig,
        ivectors: Option<Vec<Vec<f64>>>,
        n_sources: usize,
    ) -> PyResult<Vec<Waveform>> {
        let block = ivectors.map(matrix).transpose()?;
        let s = separate(
            &self.params,
            self.stats.as_ref(),
            &mixture.inner,
            block.as_ref(),
            n_sources,
            &config.inner.separation(),
        )
        .map_err(py_err)?;
        Ok(wrap(s.estimates))
    }
}

/// UBM, total variability model and optional LDA loaded from a `models/speaker` directory.
#[pyclass]
struct SpeakerModels {
    inner: pipeline::SpeakerModels,
}

#[pymethods]
impl SpeakerModels {
    #[staticmethod]
    fn load(dir: PathBuf, config: &ExperimentConfig) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::SpeakerModels::load(&dir, &config.inner.speaker).map_err(py_err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn ivector(&self, wave: &Waveform) -> PyResult<Vec<f64>> {
        Ok(self.inner.ivector(&wave.inner).map_err(py_err)?.to_vec())
    }

    /// Speaker block of a set of estimates in canonical slot order.
    fn ordered_block(&self, estimates: Vec<Waveform>) -> PyResult<Vec<Vec<f64>>> {
        let est = waves(&estimates);
        let ivs = est
            .iter()
            .map(|e| self.inner.ivector(e))
            .collect::<Result<Vec<_>, _>>()
            .map_err(py_err)?;
        Ok(rows(&pipeline::order_ivectors(&est, &ivs).map_err(py_err)?))
    }
}

/// Generates the corpus of `config` and runs every level. Writes all artifacts under `work`
/// when given; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config, work=None))]
fn experiment(
    py: Python<'_>,
    config: &ExperimentConfig,
    work: Option<PathBuf>,
) -> PyResult<String> {
    let config = config.inner.clone();
    py.detach(move || {
        let corpus = generate_corpus(&config.corpus)?;
        let outcome = run_experiment(&config, &corpus)?;
        if let Some(work) = work {
            outcome.write(&work, &corpus)?;
        }
        Ok(outcome.report.to_json())
    })
    .map_err(py_err)
}

#[pymodule]
#[pyo3(name = "blindsep")]
fn blindsep_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Waveform>()?;
    m.add_class::<PySpectrogram>()?;
    m.add_class::<ExperimentConfig>()?;
    m.add_class::<Separator>()?;
    m.add_class::<SpeakerModels>()?;
    m.add_function(wrap_pyfunction!(py_stft, m)?)?;
    m.add_function(wrap_pyfunction!(mix_at_snr, m)?)?;
    m.add_function(wrap_pyfunction!(affinity_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(sdr, m)?)?;
    m.add_function(wrap_pyfunction!(sdr_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(experiment, m)?)?;
    Ok(())
}
