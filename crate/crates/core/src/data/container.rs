//! `LMV1` raw dataset container, little-endian throughout:
//!
//! ```text
//! "LMV1"  u32 version  u32 train-count  u32 test-count
//! u16 height  u16 width  u16 channels  u8 pixel-encoding  u8 has-labels
//! u32 classes  u16 name-length  name bytes
//! pixels (train, then test)   labels as u32 (train, then test), if present
//! ```
//!
//! Pixel encoding 0 stores one byte per pixel (`p * 255`), 1 stores `f64`.

use std::io::{Read, Write};

use crate::autodiff::param::CountingReader;
use crate::data::dataset::{ImageShape, TaskDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LMV1";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelEncoding {
    Byte = 0,
    Float = 1,
}

pub fn write_dataset<W: Write>(ds: &TaskDataset, encoding: PixelEncoding, w: &mut W) -> Result<()> {
    let s = ds.shape();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ds.train_len() as u32).to_le_bytes())?;
    w.write_all(&(ds.test_len() as u32).to_le_bytes())?;
    for d in [s.height, s.width, s.channels] {
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&[encoding as u8, ds.has_labels() as u8])?;
    w.write_all(&(ds.classes() as u32).to_le_bytes())?;
    let name = ds.name().as_bytes();
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name)?;
    for x in [ds.train(), ds.test()] {
        match encoding {
            PixelEncoding::Byte => {
                let bytes: Vec<u8> = x.data().iter().map(|p| (p * 255.0).round() as u8).collect();
                w.write_all(&bytes)?;
            }
            PixelEncoding::Float => {
                for p in x.data() {
                    w.write_all(&p.to_le_bytes())?;
                }
            }
        }
    }
    for l in [ds.train_labels(), ds.test_labels()].into_iter().flatten() {
        for &y in l {
            w.write_all(&(y as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn dataset_to_bytes(ds: &TaskDataset, encoding: PixelEncoding) -> Vec<u8> {
    let mut out = Vec::new();
    write_dataset(ds, encoding, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<TaskDataset> {
    let mut rd = CountingReader {
        inner: r,
        offset: 0,
    };
    if &rd.array::<4>()? != MAGIC {
        return Err(Error::format(0, "bad dataset container magic"));
    }
    let version = u32::from_le_bytes(rd.array()?);
    if version != VERSION {
        return Err(Error::format(
            4,
            format!("unsupported dataset container version {version}"),
        ));
    }
    let n_train = u32::from_le_bytes(rd.array()?) as usize;
    let n_test = u32::from_le_bytes(rd.array()?) as usize;
    let h = u16::from_le_bytes(rd.array()?);
    let wd = u16::from_le_bytes(rd.array()?);
    let c = u16::from_le_bytes(rd.array()?);
    let shape = ImageShape::new(h, wd, c);
    let [enc, has_labels] = rd.array::<2>()?;
    let classes = u32::from_le_bytes(rd.array()?) as usize;
    let name_len = u16::from_le_bytes(rd.array()?) as usize;
    let at = rd.offset;
    let name = String::from_utf8(rd.bytes(name_len)?)
        .map_err(|_| Error::format(at, "dataset name is not UTF-8"))?;
    let dim = shape.dim();
    let pixels = |n: usize, rd: &mut CountingReader<'_, R>| -> Result<Tensor> {
        let data: Vec<f64> = match enc {
            0 => rd
                .bytes(n * dim)?
                .into_iter()
                .map(|b| b as f64 / 255.0)
                .collect(),
            1 => (0..n * dim)
                .map(|_| rd.array::<8>().map(f64::from_le_bytes))
                .collect::<Result<_>>()?,
            other => {
                return Err(Error::format(
                    rd.offset,
                    format!("unknown pixel encoding {other}"),
                ))
            }
        };
        Tensor::matrix(n, dim, data)
    };
    let train = pixels(n_train, &mut rd)?;
    let test = pixels(n_test, &mut rd)?;
    let (train_labels, test_labels) = if has_labels != 0 {
        let mut labels = |n: usize| -> Result<Vec<usize>> {
            (0..n)
                .map(|_| Ok(u32::from_le_bytes(rd.array()?) as usize))
                .collect()
        };
        let a = labels(n_train)?;
        (Some(a), Some(labels(n_test)?))
    } else {
        (None, None)
    };
    TaskDataset::new(name, shape, classes, train, test, train_labels, test_labels)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<TaskDataset> {
    read_dataset(&mut &bytes[..])
}
