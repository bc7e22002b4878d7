//! Dataset records, on-disk formats and the synthetic-shapes generator.
//!
//! A dataset directory holds `images/*.dbimg`, `annotations.jsonl` and
//! `meta.json`. DBIMG is a raw little-endian float image:
//!
//! ```text
//! "DBIM"  version:u8=1  H:u32  W:u32  C:u32  payload:f32[C·H·W] (channel-major)
//! ```

mod augment;
mod synth;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::checkpoint::ByteReader;
use crate::tensor::Tensor;

pub use augment::{augment, crop, expand, hflip, photometric, resize_nearest, AugmentConfig};
pub use synth::{generate, generate_record, ShapeClass, SynthConfig};

pub const DBIMG_MAGIC: &[u8; 4] = b"DBIM";
pub const DBIMG_VERSION: u8 = 1;
pub const DBIMG_HEADER_LEN: usize = 17;

/// Minimum side length of a valid ground-truth box, in pixels.
pub const MIN_BOX_SIDE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub gts: Vec<(BBox, usize)>,
    pub id: String,
}

impl DatasetRecord {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(format!("record {}: image shape {shape:?}", self.id)));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract(format!("record {}: pixel outside [0, 1]", self.id)));
        }
        let (w, h) = (self.width() as f64, self.height() as f64);
        for (bx, _) in &self.gts {
            if bx.x1 < 0.0 || bx.y1 < 0.0 || bx.x2 > w || bx.y2 > h {
                return Err(Error::contract(format!("record {}: box {:?} outside image", self.id, bx.coords())));
            }
            if bx.short_side() < MIN_BOX_SIDE {
                return Err(Error::contract(format!("record {}: box {:?} thinner than {MIN_BOX_SIDE}px", self.id, bx.coords())));
            }
        }
        Ok(())
    }
}

pub fn encode_dbimg(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [c, h, w] = image.shape() else {
        return Err(Error::shape(format!("DBIMG needs [C, H, W], got {:?}", image.shape())));
    };
    let mut out = Vec::with_capacity(DBIMG_HEADER_LEN + 4 * image.numel());
    out.extend_from_slice(DBIMG_MAGIC);
    out.push(DBIMG_VERSION);
    for d in [*h, *w, *c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dbimg(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != DBIMG_MAGIC {
        return Err(Error::format(0, "bad DBIMG magic"));
    }
    let version = r.u8()?;
    if version != DBIMG_VERSION {
        return Err(Error::format(4, format!("unsupported DBIMG version {version}")));
    }
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let numel = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::format(5, format!("invalid extents {h}x{w}x{c}")))?;
    let payload = r.take(numel * 4)?;
    if r.pos as usize != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(vec![c, h, w], data)
}

pub fn write_dbimg(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_dbimg(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_dbimg(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dbimg(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationLine {
    pub id: String,
    pub image: String,
    pub boxes: Vec<[f64; 5]>,
}

impl AnnotationLine {
    pub fn from_record(rec: &DatasetRecord) -> Self {
        AnnotationLine {
            id: rec.id.clone(),
            image: format!("images/{}.dbimg", rec.id),
            boxes: rec
                .gts
                .iter()
                .map(|(b, c)| [b.x1, b.y1, b.x2, b.y2, *c as f64])
                .collect(),
        }
    }

    pub fn ground_truth(&self, num_classes: usize) -> Result<Vec<(BBox, usize)>> {
        self.boxes
            .iter()
            .map(|&[x1, y1, x2, y2, c]| {
                if c.fract() != 0.0 || c < 0.0 || c >= num_classes as f64 {
                    return Err(Error::contract(format!(
                        "record {}: class id {c} not an integer below {num_classes}",
                        self.id
                    )));
                }
                Ok((BBox::image(x1, y1, x2, y2)?, c as usize))
            })
            .collect()
    }
}

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const META_FILE: &str = "meta.json";
pub const IMAGES_DIR: &str = "images";

/// Write records into a dataset directory.
pub fn write_dataset(dir: &Path, records: &[DatasetRecord], meta: &SynthConfig) -> Result<()> {
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut ann = Vec::new();
    for rec in records {
        write_dbimg(&images.join(format!("{}.dbimg", rec.id)), &rec.image)?;
        let line = serde_json::to_string(&AnnotationLine::from_record(rec))
            .map_err(|e| Error::contract(format!("serialising annotation: {e}")))?;
        ann.extend_from_slice(line.as_bytes());
        ann.push(b'\n');
    }
    let ann_path = dir.join(ANNOTATIONS_FILE);
    fs::write(&ann_path, ann).map_err(|e| Error::io(&ann_path, e))?;
    let meta_path = dir.join(META_FILE);
    let meta_json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::contract(format!("serialising meta: {e}")))?;
    let mut f = fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    f.write_all(meta_json.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::io(&meta_path, e))
}

pub fn read_annotations(dir: &Path) -> Result<Vec<AnnotationLine>> {
    let path = dir.join(ANNOTATIONS_FILE);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        let len = line.len() as u64 + 1;
        if !line.trim().is_empty() {
            let parsed: AnnotationLine = serde_json::from_str(&line)
                .map_err(|e| Error::format(offset + e.column().saturating_sub(1) as u64, format!("annotation: {e}")))?;
            out.push(parsed);
        }
        offset += len;
    }
    Ok(out)
}

pub fn read_meta(dir: &Path) -> Result<SynthConfig> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(0, format!("meta.json: {e}")))
}

/// Load every record of a dataset directory.
pub fn read_dataset(dir: &Path, num_classes: usize) -> Result<Vec<DatasetRecord>> {
    read_annotations(dir)?
        .into_iter()
        .map(|line| {
            let gts = line.ground_truth(num_classes)?;
            let image = read_dbimg(&dir.join(&line.image))?;
            let rec = DatasetRecord {
                image,
                gts,
                id: line.id,
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(IMAGES_DIR).join(format!("{id}.dbimg"))
}
