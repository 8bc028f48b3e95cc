//! MNIST IDX files.

use std::path::{Path, PathBuf};

use crate::codec::ByteReader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Parses an IDX image (`[N, rows, cols]`, scaled to `[0, 1]`) or label
/// (`[N]`, raw class values) file.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    let magic = r.u32_be()?;
    let dims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => return Err(Error::format(0, format!("bad IDX magic {other:#010x}"))),
    };
    let mut shape = Vec::with_capacity(dims);
    for _ in 0..dims {
        let at = r.offset();
        let d = r.u32_be()? as usize;
        if d == 0 {
            return Err(Error::format(at, "zero IDX dimension"));
        }
        shape.push(d);
    }
    let n: usize = shape.iter().product();
    let payload = r.take(n)?;
    if !r.is_empty() {
        return Err(Error::format(r.offset(), "trailing bytes after IDX payload"));
    }
    let data = if dims == 3 {
        payload.iter().map(|&b| b as f64 / 255.0).collect()
    } else {
        payload.iter().map(|&b| b as f64).collect()
    };
    Tensor::new(shape, data)
}

pub fn read_idx(path: &Path) -> Result<Tensor> {
    parse_idx(&std::fs::read(path)?)
}

/// One MNIST split with labels and a per-class index.
#[derive(Clone, Debug)]
pub struct MnistSplit {
    /// `[N, 28, 28]` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<u8>,
    by_class: [Vec<usize>; 10],
}

impl MnistSplit {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        let &[n, 28, 28] = images.shape() else {
            return Err(Error::dim(format!("MNIST images must be [N, 28, 28], got {:?}", images.shape())));
        };
        if labels.len() != n {
            return Err(Error::dim(format!("{n} images but {} labels", labels.len())));
        }
        let mut by_class: [Vec<usize>; 10] = Default::default();
        for (i, &l) in labels.iter().enumerate() {
            let slot = by_class
                .get_mut(l as usize)
                .ok_or_else(|| Error::Domain(format!("MNIST label {l} at index {i}")))?;
            slot.push(i);
        }
        if let Some(c) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Domain(format!("no MNIST images of class {c}")));
        }
        Ok(MnistSplit { images, labels, by_class })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images.data()[i * 784..(i + 1) * 784]
    }

    pub fn of_class(&self, class: u8) -> &[usize] {
        &self.by_class[class as usize]
    }
}

#[derive(Clone, Debug)]
pub struct Mnist {
    pub train: MnistSplit,
    pub test: MnistSplit,
}

impl Mnist {
    /// Loads the four standard IDX files from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let paths: Vec<PathBuf> = MNIST_FILES.iter().map(|f| dir.join(f)).collect();
        let missing: Vec<&str> = MNIST_FILES
            .iter()
            .zip(&paths)
            .filter(|(_, p)| !p.is_file())
            .map(|(f, _)| *f)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingData(format!(
                "MNIST directory {} lacks {}; expected uncompressed files {}",
                dir.display(),
                missing.join(", "),
                MNIST_FILES.join(", ")
            )));
        }
        let labels = |p: &Path| -> Result<Vec<u8>> {
            Ok(read_idx(p)?.data().iter().map(|&v| v as u8).collect())
        };
        Ok(Mnist {
            train: MnistSplit::new(read_idx(&paths[0])?, labels(&paths[1])?)?,
            test: MnistSplit::new(read_idx(&paths[2])?, labels(&paths[3])?)?,
        })
    }
}
