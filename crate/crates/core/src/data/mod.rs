//! Synthetic MNIST-variant datasets and their on-disk format.

mod generate;
pub mod idx;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::codec::{parse_key_values, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use generate::{arrow_stencil, generate, generate_sample, ARROW_SIZE};
pub use idx::{parse_idx, read_idx, Mnist, MnistSplit, MNIST_FILES};

pub const DATASET_MAGIC: &[u8; 4] = b"LSDS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Cluttered,
    Arrow,
    Rect,
    Sequence,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Cluttered, Task::Arrow, Task::Rect, Task::Sequence];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Task> {
        Task::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Cluttered => "cluttered",
            Task::Arrow => "arrow",
            Task::Rect => "rect",
            Task::Sequence => "sequence",
        }
    }

    /// Labels per image.
    pub fn arity(self) -> usize {
        if self == Task::Sequence {
            3
        } else {
            1
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?} (cluttered, arrow, rect, sequence)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Generation parameters; written verbatim into every dataset header.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub task: Task,
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub canvas: usize,
    pub out_size: usize,
    pub clutter_count: usize,
    pub clutter_size: usize,
    /// Center-to-center digit spacing (sequence task).
    pub step: usize,
}

impl GeneratorConfig {
    pub fn new(task: Task, seed: u64) -> Self {
        let (canvas, clutter_count) = match task {
            Task::Cluttered => (84, 32),
            Task::Arrow | Task::Rect => (84, 0),
            Task::Sequence => (100, 8),
        };
        GeneratorConfig {
            task,
            seed,
            train_count: 10_000,
            test_count: 2_000,
            canvas,
            out_size: 42,
            clutter_count,
            clutter_size: 6,
            step: 34,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Test => self.test_count,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "task={}\nseed={}\ntrain_count={}\ntest_count={}\ncanvas={}\nout_size={}\nclutter_count={}\nclutter_size={}\nstep={}\n",
            self.task,
            self.seed,
            self.train_count,
            self.test_count,
            self.canvas,
            self.out_size,
            self.clutter_count,
            self.clutter_size,
            self.step
        )
    }

    /// Starts from the task defaults and applies every recognised key.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let task: Task = pairs
            .iter()
            .find(|(k, _)| k == "task")
            .ok_or_else(|| Error::Config("generator config lacks task".into()))?
            .1
            .parse()?;
        let mut cfg = GeneratorConfig::new(task, 0);
        for (k, v) in pairs {
            let num = || -> Result<usize> {
                v.parse().map_err(|_| Error::Config(format!("{k}: not an integer: {v:?}")))
            };
            match k.as_str() {
                "task" | "split" => {}
                "seed" => cfg.seed = v.parse().map_err(|_| Error::Config(format!("seed: {v:?}")))?,
                "train_count" => cfg.train_count = num()?,
                "test_count" => cfg.test_count = num()?,
                "canvas" => cfg.canvas = num()?,
                "out_size" => cfg.out_size = num()?,
                "clutter_count" => cfg.clutter_count = num()?,
                "clutter_size" => cfg.clutter_size = num()?,
                "step" => cfg.step = num()?,
                _ => return Err(Error::Config(format!("unknown generator key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fits = self.canvas >= 28 + 4 && self.clutter_size <= 28 && self.clutter_size <= self.canvas;
        if !fits || self.out_size == 0 || self.out_size > self.canvas {
            return Err(Error::Config(format!("inconsistent generator geometry {self:?}")));
        }
        if self.task == Task::Sequence && (self.step == 0 || 28 + 2 * self.step > self.canvas) {
            return Err(Error::Config(format!(
                "three digits with step {} do not fit a {} canvas",
                self.step, self.canvas
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Corner {
    pub const ALL: [Corner; 4] = [Corner::TopLeft, Corner::TopRight, Corner::BottomLeft, Corner::BottomRight];

    pub fn is_left(self) -> bool {
        matches!(self, Corner::TopLeft | Corner::BottomLeft)
    }

    pub fn is_top(self) -> bool {
        matches!(self, Corner::TopLeft | Corner::TopRight)
    }

    fn code(self) -> &'static str {
        match self {
            Corner::TopLeft => "tl",
            Corner::TopRight => "tr",
            Corner::BottomLeft => "bl",
            Corner::BottomRight => "br",
        }
    }
}

/// Intention sign drawn on the canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sign {
    /// Arrow glyph with top-left `(x, y)` pointing at `corner`.
    Arrow { corner: Corner, x: usize, y: usize },
    /// Square outline with top-left `(x, y)` and side `size`.
    Rect { x: usize, y: usize, size: usize },
}

/// Axis-aligned box in canvas pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelBox {
    pub fn digit(x: usize, y: usize) -> Self {
        PixelBox { x, y, w: 28, h: 28 }
    }

    pub fn intersects(&self, o: &PixelBox) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0)
    }

    /// Whether output pixel `(row, col)` lies in this box once the canvas
    /// is scaled by `scale`.
    pub fn contains_scaled(&self, row: usize, col: usize, scale: f64) -> bool {
        let (cy, cx) = ((row as f64 + 0.5) / scale, (col as f64 + 0.5) / scale);
        cx >= self.x as f64 && cx < (self.x + self.w) as f64 && cy >= self.y as f64 && cy < (self.y + self.h) as f64
    }
}

/// Placement record of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    /// Output size over canvas size.
    pub scale: f64,
    /// Digit boxes in canvas pixels. The target comes first for the signed
    /// tasks; for sequences the order matches the labels.
    pub digits: Vec<PixelBox>,
    pub sign: Option<Sign>,
}

impl SampleMeta {
    pub fn to_text(&self) -> String {
        let boxes: Vec<String> = self
            .digits
            .iter()
            .map(|b| format!("{},{},{},{}", b.x, b.y, b.w, b.h))
            .collect();
        let mut s = format!("scale={} digits={}", self.scale, boxes.join(";"));
        match self.sign {
            Some(Sign::Arrow { corner, x, y }) => s += &format!(" arrow={},{},{}", corner.code(), x, y),
            Some(Sign::Rect { x, y, size }) => s += &format!(" rect={x},{y},{size}"),
            None => {}
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed sample meta {text:?}"));
        let ints = |v: &str| -> Result<Vec<usize>> { v.split(',').map(|x| x.parse().map_err(|_| bad())).collect() };
        let mut meta = SampleMeta {
            scale: 0.0,
            digits: Vec::new(),
            sign: None,
        };
        for field in text.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            match k {
                "scale" => meta.scale = v.parse().map_err(|_| bad())?,
                "digits" => {
                    for b in v.split(';').filter(|b| !b.is_empty()) {
                        let &[x, y, w, h] = ints(b)?.as_slice() else { return Err(bad()) };
                        meta.digits.push(PixelBox { x, y, w, h });
                    }
                }
                "arrow" => {
                    let (code, rest) = v.split_once(',').ok_or_else(bad)?;
                    let corner = Corner::ALL.into_iter().find(|c| c.code() == code).ok_or_else(bad)?;
                    let &[x, y] = ints(rest)?.as_slice() else { return Err(bad()) };
                    meta.sign = Some(Sign::Arrow { corner, x, y });
                }
                "rect" => {
                    let &[x, y, size] = ints(v)?.as_slice() else { return Err(bad()) };
                    meta.sign = Some(Sign::Rect { x, y, size });
                }
                _ => return Err(bad()),
            }
        }
        Ok(meta)
    }

    pub fn target(&self) -> Option<&PixelBox> {
        self.digits.first()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[out, out]` in `[0, 1]`.
    pub pixels: Tensor,
    pub labels: Vec<u8>,
    pub meta: SampleMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub split: Split,
    pub samples: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.config.out_size, self.config.out_size)
    }

    /// `[B, 1, H, W]` batch of the given samples.
    pub fn batch_images(&self, indices: &[usize]) -> Tensor {
        let (h, w) = self.image_hw();
        let mut data = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            data.extend_from_slice(self.samples[i].pixels.data());
        }
        Tensor::new(vec![indices.len(), 1, h, w], data).expect("dataset pixels are finite")
    }

    /// Count of each class over all label positions.
    pub fn class_counts(&self) -> [usize; 10] {
        let mut c = [0; 10];
        for s in &self.samples {
            for &l in &s.labels {
                c[l as usize] += 1;
            }
        }
        c
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&[self.config.task.tag()])?;
        let text = format!("{}split={}\n", self.config.to_text(), self.split.name());
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        w.write_all(&(self.samples.len() as u32).to_le_bytes())?;
        for s in &self.samples {
            w.write_all(&[s.labels.len() as u8])?;
            w.write_all(&s.labels)?;
            let meta = s.meta.to_text();
            w.write_all(&(meta.len() as u32).to_le_bytes())?;
            w.write_all(meta.as_bytes())?;
            s.pixels.write_to(w)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(DATASET_MAGIC)?;
        let at = r.offset();
        let task = Task::from_tag(r.u8()?).ok_or_else(|| Error::format(at, "unknown task tag"))?;
        let at = r.offset();
        let len = r.u32_le()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(at, "header is not UTF-8"))?;
        let pairs = parse_key_values(text).map_err(|e| Error::format(at, e.to_string()))?;
        let config = GeneratorConfig::from_pairs(&pairs).map_err(|e| Error::format(at, e.to_string()))?;
        if config.task != task {
            return Err(Error::format(at, format!("task tag {task} disagrees with header {}", config.task)));
        }
        let split = pairs
            .iter()
            .find(|(k, _)| k == "split")
            .ok_or_else(|| Error::format(at, "header lacks split"))?
            .1
            .parse()
            .map_err(|e: Error| Error::format(at, e.to_string()))?;
        let count = r.u32_le()? as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let at = r.offset();
            let n = r.u8()? as usize;
            let labels = r.take(n)?.to_vec();
            if n != task.arity() || labels.iter().any(|&l| l > 9) {
                return Err(Error::format(at, format!("bad labels {labels:?} for task {task}")));
            }
            let at = r.offset();
            let len = r.u32_le()? as usize;
            let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(at, "meta is not UTF-8"))?;
            let meta = SampleMeta::from_text(text).map_err(|e| Error::format(at, e.to_string()))?;
            let at = r.offset();
            let pixels = Tensor::read(&mut r)?;
            if pixels.shape() != [config.out_size, config.out_size] {
                return Err(Error::format(at, format!("sample shape {:?}", pixels.shape())));
            }
            samples.push(LabeledImage { pixels, labels, meta });
        }
        if !r.is_empty() {
            return Err(Error::format(r.offset(), "trailing bytes after dataset"));
        }
        Ok(Dataset { config, split, samples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
