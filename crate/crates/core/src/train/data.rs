//! Training samples and the on-disk dataset layout.
//!
//! ```text
//! dataset.toml            width, height, steps, duration_us, count
//! 0000.evt                events (EVT0 binary)
//! 0000.flo                ground-truth flow (FLO0)
//! 0000_start.png          16-bit grayscale frames
//! 0000_end.png
//! ```

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{bin_events, parse_aer, EventStream, EventTensor, ParseOptions};
use crate::flow::FlowField;
use crate::synth::SyntheticScene;
use crate::tensor::Tensor;

/// One training example: binned events plus both kinds of labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub events: EventTensor,
    pub flow: FlowField,
    /// Grayscale `[H, W]` frames bracketing the window.
    pub frames: Option<(Tensor, Tensor)>,
}

impl Sample {
    pub fn from_scene(scene: &SyntheticScene, steps: usize) -> Result<Self> {
        Ok(Self {
            events: bin_events(&scene.events, steps)?,
            flow: scene.flow.clone(),
            frames: Some((scene.frame_start.clone(), scene.frame_end.clone())),
        })
    }

    pub fn height(&self) -> usize {
        self.events.height()
    }

    pub fn width(&self) -> usize {
        self.events.width()
    }

    pub fn event_mask(&self) -> Vec<bool> {
        self.events.event_mask()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub width: usize,
    pub height: usize,
    pub steps: usize,
    pub duration_us: u64,
    pub count: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Deterministic 80:20 split: the first `ceil(0.8 n)` samples train.
    pub fn split(&self, train_fraction: f64) -> (Dataset, Dataset) {
        let n_train = ((self.len() as f64 * train_fraction).ceil() as usize).min(self.len());
        (
            Dataset::new(self.samples[..n_train].to_vec()),
            Dataset::new(self.samples[n_train..].to_vec()),
        )
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.height(), s.width()))
    }

    /// Writes scenes in the layout above.
    pub fn write_scenes(
        dir: &Path,
        scenes: &[SyntheticScene],
        steps: usize,
    ) -> Result<DatasetInfo> {
        let first = scenes.first().ok_or(Error::EmptyDataset)?;
        fs::create_dir_all(dir)?;
        let info = DatasetInfo {
            width: first.flow.width(),
            height: first.flow.height(),
            steps,
            duration_us: first.events.window().1 - first.events.window().0,
            count: scenes.len(),
        };
        for (i, s) in scenes.iter().enumerate() {
            fs::write(dir.join(format!("{i:04}.evt")), s.events.to_binary())?;
            fs::write(dir.join(format!("{i:04}.flo")), s.flow.to_bytes())?;
            write_gray16(&dir.join(format!("{i:04}_start.png")), &s.frame_start)?;
            write_gray16(&dir.join(format!("{i:04}_end.png")), &s.frame_end)?;
        }
        let text = toml::to_string(&info).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        fs::write(dir.join("dataset.toml"), text)?;
        Ok(info)
    }

    pub fn read_info(dir: &Path) -> Result<DatasetInfo> {
        let text = fs::read_to_string(dir.join("dataset.toml"))?;
        toml::from_str(&text).map_err(|e| Error::CorruptCheckpoint(format!("dataset.toml: {e}")))
    }

    /// Loads a dataset, binning events into `steps` bins (the dataset's own
    /// `steps` when `None`).
    pub fn load(dir: &Path, steps: Option<usize>) -> Result<(Dataset, DatasetInfo)> {
        let info = Self::read_info(dir)?;
        let steps = steps.unwrap_or(info.steps);
        let mut samples = Vec::with_capacity(info.count);
        for i in 0..info.count {
            let bytes = fs::read(dir.join(format!("{i:04}.evt")))?;
            let opts = ParseOptions {
                resolution: Some((info.width as u32, info.height as u32)),
                strict: false,
            };
            let stream: EventStream = parse_aer(&bytes, opts)?.with_window(0, info.duration_us)?;
            let flow = FlowField::from_bytes(&fs::read(dir.join(format!("{i:04}.flo")))?)?;
            let start = dir.join(format!("{i:04}_start.png"));
            let frames = if start.exists() {
                Some((
                    read_gray16(&start)?,
                    read_gray16(&dir.join(format!("{i:04}_end.png")))?,
                ))
            } else {
                None
            };
            samples.push(Sample {
                events: bin_events(&stream, steps)?,
                flow,
                frames,
            });
        }
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok((Dataset::new(samples), info))
    }
}

pub fn write_gray16(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.dim(image.ndim() - 2), image.dim(image.ndim() - 1));
    let file = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

pub fn read_gray16(path: &Path) -> Result<Tensor> {
    let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(path)?));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::CorruptCheckpoint(format!(
            "{}: expected 16-bit grayscale",
            path.display()
        )));
    }
    let data = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
        .collect();
    Tensor::new(&[info.height as usize, info.width as usize], data)
}
