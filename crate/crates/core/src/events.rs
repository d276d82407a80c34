//! AER event streams: parsing, serialization and temporal binning.
//!
//! Two on-disk formats are supported. CSV has a `x,y,t,p` header and one
//! event per line with `p` in `{1,-1}`. The binary form is
//!
//! ```text
//! "EVT0" | u32 width | u32 height | u32 count | count x (u16 x, u16 y, u32 t, i8 p, 3 pad)
//! ```
//!
//! with all integers little-endian.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BINARY_MAGIC: &[u8; 4] = b"EVT0";
const RECORD_BYTES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    pub fn from_sign(p: i64) -> Option<Self> {
        match p {
            1 => Some(Self::On),
            -1 => Some(Self::Off),
            _ => None,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Self::On => 1,
            Self::Off => -1,
        }
    }

    /// Tensor channel: 0 for positive, 1 for negative events.
    pub fn channel(self) -> usize {
        match self {
            Self::On => 0,
            Self::Off => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Microseconds.
    pub t: u64,
    pub p: Polarity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u32,
    height: u32,
    t_start: u64,
    t_end: u64,
}

impl EventStream {
    /// Builds a stream, sorting events by timestamp (stable) and checking
    /// them against the sensor size and window.
    pub fn new(
        mut events: Vec<Event>,
        width: u32,
        height: u32,
        t_start: u64,
        t_end: u64,
    ) -> Result<Self> {
        for e in &events {
            check_bounds(e.x as u32, e.y as u32, width, height)?;
            if e.t < t_start || e.t > t_end {
                return Err(Error::InvalidSpec(format!(
                    "event at t={} outside window [{t_start}, {t_end}]",
                    e.t
                )));
            }
        }
        events.sort_by_key(|e| e.t);
        Ok(Self {
            events,
            width,
            height,
            t_start,
            t_end,
        })
    }

    /// Stream whose window spans its first to last event (or `[0, 0]` if empty).
    pub fn spanning(events: Vec<Event>, width: u32, height: u32) -> Result<Self> {
        let t_start = events.iter().map(|e| e.t).min().unwrap_or(0);
        let t_end = events.iter().map(|e| e.t).max().unwrap_or(0);
        Self::new(events, width, height, t_start, t_end)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn window(&self) -> (u64, u64) {
        (self.t_start, self.t_end)
    }

    /// Replaces the window bounds, keeping the same events.
    pub fn with_window(self, t_start: u64, t_end: u64) -> Result<Self> {
        Self::new(self.events, self.width, self.height, t_start, t_end)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,t,p\n");
        for e in &self.events {
            let _ = writeln!(out, "{},{},{},{}", e.x, e.y, e.t, e.p.sign());
        }
        out
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + RECORD_BYTES * self.events.len());
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&(self.events.len() as u32).to_le_bytes());
        for e in &self.events {
            out.extend_from_slice(&e.x.to_le_bytes());
            out.extend_from_slice(&e.y.to_le_bytes());
            out.extend_from_slice(&(e.t as u32).to_le_bytes());
            out.push(e.p.sign() as u8);
            out.extend_from_slice(&[0, 0, 0]);
        }
        out
    }
}

fn check_bounds(x: u32, y: u32, width: u32, height: u32) -> Result<()> {
    if x >= width || y >= height {
        return Err(Error::OutOfBounds {
            x,
            y,
            width,
            height,
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ParseOptions {
    /// Sensor size for CSV input; binary input carries its own. When given
    /// for binary input it must match the header.
    pub resolution: Option<(u32, u32)>,
    /// Reject decreasing timestamps instead of sorting them.
    pub strict: bool,
}

/// Parses CSV or binary AER data, picking the format from the magic bytes.
pub fn parse_aer(bytes: &[u8], opts: ParseOptions) -> Result<EventStream> {
    if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(bytes, opts)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::MalformedRecord {
            line: 0,
            reason: format!("not UTF-8: {e}"),
        })?;
        parse_csv(text, opts)
    }
}

fn check_order(index: usize, t: u64, prev: &mut Option<u64>, strict: bool) -> Result<()> {
    if let Some(p) = *prev {
        if strict && t < p {
            return Err(Error::NonMonotonicTime { index, t, prev: p });
        }
    }
    *prev = Some(t);
    Ok(())
}

pub fn parse_csv(text: &str, opts: ParseOptions) -> Result<EventStream> {
    let mut raw = Vec::new();
    let mut prev = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.eq_ignore_ascii_case("x,y,t,p")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::MalformedRecord {
                line: line_no,
                reason: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let num = |idx: usize, name: &str| -> Result<i64> {
            fields[idx]
                .parse::<i64>()
                .map_err(|_| Error::MalformedRecord {
                    line: line_no,
                    reason: format!("field `{name}` is not an integer: {:?}", fields[idx]),
                })
        };
        let (x, y, t, p) = (num(0, "x")?, num(1, "y")?, num(2, "t")?, num(3, "p")?);
        if x < 0
            || y < 0
            || t < 0
            || x > u16::MAX as i64
            || y > u16::MAX as i64
            || t > u32::MAX as i64
        {
            return Err(Error::MalformedRecord {
                line: line_no,
                reason: "field out of range".into(),
            });
        }
        let p = Polarity::from_sign(p).ok_or_else(|| Error::MalformedRecord {
            line: line_no,
            reason: format!("polarity must be 1 or -1, found {p}"),
        })?;
        if let Some((w, h)) = opts.resolution {
            check_bounds(x as u32, y as u32, w, h)?;
        }
        check_order(raw.len(), t as u64, &mut prev, opts.strict)?;
        raw.push(Event {
            x: x as u16,
            y: y as u16,
            t: t as u64,
            p,
        });
    }
    let (w, h) = opts.resolution.unwrap_or_else(|| {
        let w = raw.iter().map(|e| e.x as u32 + 1).max().unwrap_or(0);
        let h = raw.iter().map(|e| e.y as u32 + 1).max().unwrap_or(0);
        (w, h)
    });
    EventStream::spanning(raw, w, h)
}

pub fn parse_binary(bytes: &[u8], opts: ParseOptions) -> Result<EventStream> {
    let bad = |reason: &str| Error::MalformedRecord {
        line: 0,
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != BINARY_MAGIC {
        return Err(bad("missing EVT0 header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let (width, height, count) = (u32_at(4), u32_at(8), u32_at(12) as usize);
    if let Some(res) = opts.resolution {
        if res != (width, height) {
            return Err(bad(&format!(
                "header resolution {width}x{height} differs from expected {}x{}",
                res.0, res.1
            )));
        }
    }
    if bytes.len() != 16 + count * RECORD_BYTES {
        return Err(bad(&format!(
            "expected {count} records, payload has {} bytes",
            bytes.len() - 16
        )));
    }
    let mut raw = Vec::with_capacity(count);
    let mut prev = None;
    for i in 0..count {
        let r = &bytes[16 + i * RECORD_BYTES..16 + (i + 1) * RECORD_BYTES];
        let x = u16::from_le_bytes([r[0], r[1]]);
        let y = u16::from_le_bytes([r[2], r[3]]);
        let t = u32::from_le_bytes([r[4], r[5], r[6], r[7]]) as u64;
        let p = Polarity::from_sign(r[8] as i8 as i64).ok_or_else(|| Error::MalformedRecord {
            line: i + 1,
            reason: format!("bad polarity byte {}", r[8]),
        })?;
        check_bounds(x as u32, y as u32, width, height)?;
        check_order(i, t, &mut prev, opts.strict)?;
        raw.push(Event { x, y, t, p });
    }
    EventStream::spanning(raw, width, height)
}

/// Binned events of shape `[T, 2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventTensor {
    pub data: Tensor,
}

impl EventTensor {
    pub fn bins(&self) -> usize {
        self.data.dim(0)
    }

    pub fn height(&self) -> usize {
        self.data.dim(2)
    }

    pub fn width(&self) -> usize {
        self.data.dim(3)
    }

    /// The `[2, H, W]` slice for bin `t`.
    pub fn slice(&self, t: usize) -> Tensor {
        let per = 2 * self.height() * self.width();
        Tensor::new(
            &[2, self.height(), self.width()],
            self.data.data()[t * per..(t + 1) * per].to_vec(),
        )
        .expect("slice shape")
    }

    /// `[H, W]` mask of pixels that received at least one event.
    pub fn event_mask(&self) -> Vec<bool> {
        let plane = self.height() * self.width();
        let mut mask = vec![false; plane];
        for chunk in self.data.data().chunks(plane) {
            for (m, &v) in mask.iter_mut().zip(chunk) {
                *m |= v > 0.0;
            }
        }
        mask
    }
}

/// Temporal bilinear weight of an event at normalized time `tau` for bin `b`.
pub fn bin_weight(tau: f64, b: usize) -> f64 {
    (1.0 - (tau - b as f64).abs()).max(0.0)
}

/// Spreads every event over the two nearest of `bins` temporal bins.
///
/// An event at `t` maps to `tau = (t - t_start) / (t_end - t_start) * (bins - 1)`
/// and adds `max(0, 1 - |tau - b|)` to bin `b`, in the channel of its polarity.
/// Counts accumulate without clipping.
pub fn bin_events(stream: &EventStream, bins: usize) -> Result<EventTensor> {
    let (t_start, t_end) = stream.window();
    if t_end <= t_start {
        return Err(Error::EmptyWindow { t_start, t_end });
    }
    if bins == 0 {
        return Err(Error::InvalidSpec("bin count must be at least 1".into()));
    }
    let (h, w) = (stream.height() as usize, stream.width() as usize);
    let mut data = vec![0.0f32; bins * 2 * h * w];
    let span = (t_end - t_start) as f64;
    for e in stream.events() {
        let pix = e.p.channel() * h * w + e.y as usize * w + e.x as usize;
        if bins == 1 {
            data[pix] += 1.0;
            continue;
        }
        let tau = (e.t - t_start) as f64 / span * (bins - 1) as f64;
        let lo = tau.floor() as usize;
        for b in [lo, lo + 1] {
            if b < bins {
                let wgt = bin_weight(tau, b);
                if wgt > 0.0 {
                    data[b * 2 * h * w + pix] += wgt as f32;
                }
            }
        }
    }
    Ok(EventTensor {
        data: Tensor::new(&[bins, 2, h, w], data)?,
    })
}
