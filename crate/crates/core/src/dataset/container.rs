//! S5DS container: a small binary format for patch datasets and named
//! tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "S5DS"            4 bytes magic
//! version           u32
//! header length     u32
//! header            JSON, UTF-8
//! labels            num_images × i32   (-1 = unlabeled)
//! pixels            num_images × H×W×C × f32, image-major, row-major
//! tensors           Σ numel × f64, in header order (optional section)
//! ```
//!
//! The header always carries `num_images`, `height`, `width`, `channels`,
//! `class_names` and `labeled_flag`. A `tensors` list (name and shape per
//! entry) and an `attributes` object appear only when non-empty.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::augment::ImagePatch;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::NamedTensor;

pub const MAGIC: &[u8; 4] = b"S5DS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_names: Vec<String>,
    pub labeled_flag: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub attributes: serde_json::Value,
}

/// Decoded contents of an S5DS file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Header,
    /// `None` marks an unlabeled image.
    pub labels: Vec<Option<usize>>,
    pub images: Vec<ImagePatch>,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let h = &self.header;
        if self.images.len() != h.num_images || self.labels.len() != h.num_images {
            return Err(Error::Format(
                "image/label counts disagree with header".into(),
            ));
        }
        if h.channels != 3 {
            return Err(Error::Format(format!(
                "unsupported channel count {}",
                h.channels
            )));
        }
        if self.tensors.len() != h.tensors.len() {
            return Err(Error::Format("tensor list disagrees with header".into()));
        }
        let json = serde_json::to_vec(h)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for l in &self.labels {
            let v: i32 = match l {
                Some(c) => i32::try_from(*c)
                    .map_err(|_| Error::Format(format!("label {c} exceeds i32")))?,
                None => -1,
            };
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(h.height * h.width * 3 * 4);
        for img in &self.images {
            if img.height() != h.height || img.width() != h.width {
                return Err(Error::Format("image size disagrees with header".into()));
            }
            buf.clear();
            for &p in img.pixels() {
                buf.extend_from_slice(&(p as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        for (entry, t) in h.tensors.iter().zip(&self.tensors) {
            if entry.name != t.name || entry.shape != t.value.shape() {
                return Err(Error::Format(format!(
                    "tensor `{}` disagrees with header",
                    t.name
                )));
            }
            for v in t.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, not an S5DS file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported S5DS version {version}")));
        }
        let len = read_u32(&mut r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.channels != 3 {
            return Err(Error::Format(format!(
                "unsupported channel count {}",
                header.channels
            )));
        }

        let mut labels = Vec::with_capacity(header.num_images);
        for _ in 0..header.num_images {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            let v = i32::from_le_bytes(b);
            labels.push(match v {
                -1 => None,
                v if v >= 0 => Some(v as usize),
                v => return Err(Error::Format(format!("invalid label {v}"))),
            });
        }
        if let Some(Some(bad)) = labels
            .iter()
            .find(|l| l.is_some_and(|c| c >= header.class_names.len()))
        {
            return Err(Error::Format(format!("label {bad} has no class name")));
        }

        let per_image = header.height * header.width * 3;
        let mut raw = vec![0u8; per_image * 4];
        let mut images = Vec::with_capacity(header.num_images);
        for _ in 0..header.num_images {
            r.read_exact(&mut raw)?;
            let pixels: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Format("pixel value outside [0, 1]".into()));
            }
            images.push(ImagePatch::new(header.height, header.width, pixels)?);
        }

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name: entry.name.clone(),
                value: Tensor::new(entry.shape.clone(), data)?,
            });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            header,
            labels,
            images,
            tensors,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    /// A tensor-only container, used for model checkpoints.
    pub fn from_tensors(tensors: Vec<NamedTensor>, attributes: serde_json::Value) -> Self {
        let header = Header {
            num_images: 0,
            height: 1,
            width: 1,
            channels: 3,
            class_names: Vec::new(),
            labeled_flag: false,
            tensors: tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.value.shape().to_vec(),
                })
                .collect(),
            attributes,
        };
        Self {
            header,
            labels: Vec::new(),
            images: Vec::new(),
            tensors,
        }
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
