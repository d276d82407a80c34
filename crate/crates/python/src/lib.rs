//! Python bindings for `hybridflow-core`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use hybridflow_core::energy::{energy_of, EnergyTable};
use hybridflow_core::events::{bin_events, parse_aer, EventStream, EventTensor, ParseOptions};
use hybridflow_core::flow::FlowField;
use hybridflow_core::losses;
use hybridflow_core::network::{Family, HybridConfig, Network, NetworkSpec};
use hybridflow_core::synth::{synthesize_scene, SceneSpec};
use hybridflow_core::train::{Dataset, TrainConfig, Trainer};
use hybridflow_core::{Error, Tensor};

create_exception!(hybridflow, HybridflowError, PyException);

fn err(e: Error) -> PyErr {
    HybridflowError::new_err(e.to_string())
}

/// A time-windowed stream of address events.
#[pyclass(
    name = "EventStream",
    module = "hybridflow",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
struct PyEventStream(EventStream);

#[pymethods]
impl PyEventStream {
    /// Parses CSV (`x,y,t,p`) or EVT0 binary data.
    #[staticmethod]
    #[pyo3(signature = (data, width=None, height=None, strict=false))]
    fn parse(data: &[u8], width: Option<u32>, height: Option<u32>, strict: bool) -> PyResult<Self> {
        let resolution = width.zip(height);
        parse_aer(data, ParseOptions { resolution, strict })
            .map(Self)
            .map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn resolution(&self) -> (u32, u32) {
        (self.0.width(), self.0.height())
    }

    #[getter]
    fn window(&self) -> (u64, u64) {
        self.0.window()
    }

    /// Events as `(x, y, t, p)` tuples.
    fn events(&self) -> Vec<(u16, u16, u64, i8)> {
        self.0
            .events()
            .iter()
            .map(|e| (e.x, e.y, e.t, e.p.sign()))
            .collect()
    }

    fn to_binary<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.to_binary())
    }

    fn to_csv(&self) -> String {
        self.0.to_csv()
    }

    /// Bilinear temporal binning into `[bins, 2, H, W]`.
    fn bin(&self, bins: usize) -> PyResult<PyEventTensor> {
        bin_events(&self.0, bins).map(PyEventTensor).map_err(err)
    }
}

/// Binned events, `[T, 2, H, W]`.
#[pyclass(
    name = "EventTensor",
    module = "hybridflow",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
struct PyEventTensor(EventTensor);

#[pymethods]
impl PyEventTensor {
    #[new]
    fn new(shape: (usize, usize, usize, usize), data: Vec<f32>) -> PyResult<Self> {
        if shape.1 != 2 {
            return Err(err(Error::ShapeMismatch(format!(
                "expected 2 polarity channels, got {}",
                shape.1
            ))));
        }
        let t = Tensor::new(&[shape.0, shape.1, shape.2, shape.3], data).map_err(err)?;
        Ok(Self(EventTensor { data: t }))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.data.shape().to_vec()
    }

    /// Flat row-major values.
    fn data(&self) -> Vec<f32> {
        self.0.data.data().to_vec()
    }

    /// Pixels with at least one event, row-major.
    fn event_mask(&self) -> Vec<bool> {
        self.0.event_mask()
    }
}

/// Dense displacement field in pixels.
#[pyclass(name = "FlowField", module = "hybridflow", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFlowField(FlowField);

#[pymethods]
impl PyFlowField {
    #[new]
    fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> PyResult<Self> {
        let mut data = u;
        data.extend(v);
        let t = Tensor::new(&[2, height, width], data).map_err(err)?;
        FlowField::from_tensor(t).map(Self).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    fn u(&self) -> Vec<f32> {
        self.0.u().to_vec()
    }

    fn v(&self) -> Vec<f32> {
        self.0.v().to_vec()
    }

    fn get(&self, x: usize, y: usize) -> PyResult<(f32, f32)> {
        if x >= self.0.width() || y >= self.0.height() {
            return Err(err(Error::ShapeMismatch(format!(
                "pixel ({x}, {y}) outside the field"
            ))));
        }
        Ok(self.0.get(x, y))
    }
}

/// A synthetic scene: events, ground-truth flow and bracketing frames.
#[pyclass(name = "Scene", module = "hybridflow", frozen, get_all)]
struct PyScene {
    events: PyEventStream,
    flow: PyFlowField,
    frame_start: Vec<f32>,
    frame_end: Vec<f32>,
}

#[pyfunction]
#[pyo3(signature = (width, height, seed, max_speed=4.0, noise_rate=0.02))]
fn synthesize(
    width: usize,
    height: usize,
    seed: u64,
    max_speed: f32,
    noise_rate: f32,
) -> PyResult<PyScene> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spec = SceneSpec::random(width, height, max_speed, noise_rate, &mut rng);
    let s = synthesize_scene(&spec, seed).map_err(err)?;
    Ok(PyScene {
        events: PyEventStream(s.events),
        flow: PyFlowField(s.flow),
        frame_start: s.frame_start.data().to_vec(),
        frame_end: s.frame_end.data().to_vec(),
    })
}

/// EV-FlowNet or FireFlowNet with a per-layer activation choice.
#[pyclass(name = "Network", module = "hybridflow")]
struct PyNetwork(Network);

#[pymethods]
impl PyNetwork {
    /// `spiking` is `none`, `all`, `first`, `rnn` or comma-separated
    /// activation-layer indices.
    #[new]
    #[pyo3(signature = (family="evflownet", k=16, steps=5, spiking="first", seed=0))]
    fn new(family: &str, k: usize, steps: usize, spiking: &str, seed: u64) -> PyResult<Self> {
        let spec = NetworkSpec::new(Family::parse(family).map_err(err)?, k, steps).map_err(err)?;
        let hybrid = HybridConfig::parse(spiking, spec.num_activation_layers()).map_err(err)?;
        hybrid.validate(&spec).map_err(err)?;
        Network::build(&spec, &hybrid, seed).map(Self).map_err(err)
    }

    /// Loads the network stored in a training checkpoint.
    #[staticmethod]
    fn from_checkpoint(path: PathBuf) -> PyResult<Self> {
        Trainer::load(&path).map(|t| Self(t.net)).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.spec().steps
    }

    fn layer_names(&self) -> Vec<String> {
        self.0.spec().layer_names()
    }

    #[getter]
    fn label(&self) -> String {
        self.0.hybrid().label(self.0.spec().num_activation_layers())
    }

    /// `(layer, threshold, leak)` for every spiking layer.
    fn lif_parameters(&self) -> Vec<(String, f32, f32)> {
        self.0.lif_parameters()
    }

    /// Accumulated full-scale flow for each input, in eval mode.
    fn forward(&self, inputs: Vec<PyRef<'_, PyEventTensor>>) -> PyResult<Vec<PyFlowField>> {
        let tensors: Vec<&EventTensor> = inputs.iter().map(|t| &t.0).collect();
        let out = self.0.forward_sequence(&tensors).map_err(err)?;
        Ok(out.flow.into_iter().map(PyFlowField).collect())
    }

    /// Trains in place on a dataset directory written by `hybridflow synth`
    /// and returns one dict per epoch.
    #[pyo3(signature = (data_dir, epochs, batch_size=8, lr0=1e-3, seed=0))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        data_dir: PathBuf,
        epochs: usize,
        batch_size: usize,
        lr0: f32,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let (data, _) = Dataset::load(&data_dir, Some(self.0.spec().steps)).map_err(err)?;
        let cfg = TrainConfig {
            epochs,
            batch_size,
            lr0,
            seed,
            ..Default::default()
        };
        let (tr, val) = data.split(cfg.train_fraction);
        let mut trainer = Trainer::new(self.0.clone(), cfg).map_err(err)?;
        trainer.run_until(&tr, &val, epochs).map_err(err)?;
        self.0 = trainer.net;
        trainer
            .log
            .iter()
            .map(|m| {
                let d = PyDict::new(py);
                d.set_item("epoch", m.epoch)?;
                d.set_item("lr", m.lr)?;
                d.set_item("train_loss", m.train_loss)?;
                d.set_item("val_aee", m.val_aee)?;
                Ok(d)
            })
            .collect()
    }

    /// Per-sample inference energy on `input` under the default table, or
    /// `table` given as a dict of overrides.
    #[pyo3(signature = (input, table=None))]
    fn energy<'py>(
        &self,
        py: Python<'py>,
        input: PyRef<'_, PyEventTensor>,
        table: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut t = EnergyTable::default();
        if let Some(d) = table {
            let mut text = String::new();
            for (k, v) in d.iter() {
                text.push_str(&format!("{} = {}\n", k.extract::<String>()?, v.str()?));
            }
            t = EnergyTable::parse(&text).map_err(err)?;
        }
        let r = energy_of(&self.0, &[&input.0], &t).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("total_mj", r.total_mj())?;
        d.set_item("compute_pj", r.compute_pj())?;
        d.set_item("weight_pj", r.weight_pj())?;
        d.set_item("act_pj", r.act_pj())?;
        d.set_item("membrane_pj", r.membrane_pj())?;
        d.set_item("csv", r.to_csv())?;
        Ok(d)
    }
}

#[pyfunction]
#[pyo3(signature = (x, eta=0.001, r=0.45))]
fn charbonnier(x: f32, eta: f32, r: f32) -> f32 {
    losses::charbonnier_scalar(x, eta, r)
}

/// Average endpoint error over pixels where `mask` is true.
#[pyfunction]
fn aee(pred: PyRef<'_, PyFlowField>, gt: PyRef<'_, PyFlowField>, mask: Vec<bool>) -> PyResult<f32> {
    losses::aee(&pred.0, &gt.0, &mask).map_err(err)
}

#[pymodule]
fn hybridflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HybridflowError", m.py().get_type::<HybridflowError>())?;
    m.add_class::<PyEventStream>()?;
    m.add_class::<PyEventTensor>()?;
    m.add_class::<PyFlowField>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(charbonnier, m)?)?;
    m.add_function(wrap_pyfunction!(aee, m)?)?;
    Ok(())
}
