use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Test-set metrics for one task, measured after `after_task` finished.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub name: String,
    pub after_task: usize,
    /// Training step at which the evaluation ran.
    pub step: u64,
    pub nll: f64,
    pub mse: f64,
    pub psnr: f64,
    pub psnr_exact: bool,
    pub ssim: f64,
    pub accuracy: Option<f64>,
    /// Fraction of test samples routed to the expert that learned the task.
    pub routing_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskMetrics>,
    /// `routing[t][k]`: test samples of task `t` routed to expert `k`.
    pub routing: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn task(&self, task: usize) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|m| m.task == task)
    }

    /// One row per task per metric: `after_task,step,task,name,metric,value`.
    pub fn write_csv<W: Write>(&self, w: W, header: bool) -> Result<()> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        if header {
            out.write_record(["after_task", "step", "task", "name", "metric", "value"])?;
        }
        for m in &self.tasks {
            let mut row = |metric: &str, value: String| -> Result<()> {
                out.write_record([
                    m.after_task.to_string(),
                    m.step.to_string(),
                    m.task.to_string(),
                    m.name.clone(),
                    metric.to_string(),
                    value,
                ])?;
                Ok(())
            };
            row("nll", m.nll.to_string())?;
            row("mse", m.mse.to_string())?;
            row(
                "psnr",
                if m.psnr_exact {
                    "inf".into()
                } else {
                    m.psnr.to_string()
                },
            )?;
            row("ssim", m.ssim.to_string())?;
            if let Some(a) = m.accuracy {
                row("accuracy", a.to_string())?;
            }
            if let Some(r) = m.routing_accuracy {
                row("routing_accuracy", r.to_string())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, true)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is UTF-8")
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for m in &self.tasks {
            let _ = write!(
                s,
                "task {} ({}): nll {:.3}  mse {:.5}  psnr {}  ssim {:.4}",
                m.task,
                m.name,
                m.nll,
                m.mse,
                if m.psnr_exact {
                    "exact".to_string()
                } else {
                    format!("{:.2} dB", m.psnr)
                },
                m.ssim
            );
            if let Some(a) = m.accuracy {
                let _ = write!(s, "  acc {:.2}%", 100.0 * a);
            }
            if let Some(r) = m.routing_accuracy {
                let _ = write!(s, "  routed {:.2}%", 100.0 * r);
            }
            s.push('\n');
        }
        if !self.routing.is_empty() {
            s.push_str("routing (rows: task, cols: expert)\n");
            for (t, row) in self.routing.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
                let _ = writeln!(s, "  {t:>3} {}", cells.join(""));
            }
        }
        s
    }
}

/// Binary PGM (one channel) or PPM (three channels), maxval 255.
pub fn encode_pnm(pixels: &[f64], shape: ImageShape) -> Result<Vec<u8>> {
    if pixels.len() != shape.dim() {
        return Err(Error::dim(format!(
            "{} pixels for a {:?} image",
            pixels.len(),
            shape
        )));
    }
    let magic = match shape.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::contract(format!(
                "PNM output needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", shape.width, shape.height).into_bytes();
    out.extend(
        pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

/// Parses a binary PGM/PPM with maxval 255 back into unit-range pixels.
pub fn decode_pnm(bytes: &[u8]) -> Result<(ImageShape, Vec<f64>)> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(i as u64, "truncated PNM header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..i])
                .map_err(|_| Error::format(start as u64, "bad PNM header"))?,
        );
    }
    i += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::format(0, format!("unsupported PNM magic {m}"))),
    };
    let num = |s: &str| {
        s.parse::<u16>()
            .map_err(|_| Error::format(0, format!("bad PNM header field `{s}`")))
    };
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(Error::format(0, format!("maxval {max} is not 255")));
    }
    let shape = ImageShape::new(h, w, channels);
    let body = bytes
        .get(i..i + shape.dim())
        .ok_or_else(|| Error::format(i as u64, "truncated PNM pixels"))?;
    Ok((shape, body.iter().map(|&b| b as f64 / 255.0).collect()))
}

/// Writes each row of `frames` as `{stem}_{index:03}.pgm|ppm` in `dir`.
pub fn write_frames(
    dir: &Path,
    stem: &str,
    frames: &Tensor,
    shape: ImageShape,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let ext = if shape.channels == 3 { "ppm" } else { "pgm" };
    (0..frames.rows())
        .map(|r| {
            let path = dir.join(format!("{stem}_{r:03}.{ext}"));
            std::fs::write(&path, encode_pnm(frames.row(r), shape)?)?;
            Ok(path)
        })
        .collect()
}

/// Lays frames side by side into one image.
pub fn image_strip(frames: &Tensor, shape: ImageShape) -> Result<(ImageShape, Vec<f64>)> {
    if frames.cols() != shape.dim() {
        return Err(Error::dim(format!(
            "frames of width {} for a {:?} image",
            frames.cols(),
            shape
        )));
    }
    let n = frames.rows();
    let (h, w, c) = (
        shape.height as usize,
        shape.width as usize,
        shape.channels as usize,
    );
    let total_w = w * n;
    let out_shape = ImageShape::new(
        shape.height,
        u16::try_from(total_w).map_err(|_| Error::contract("strip too wide"))?,
        shape.channels,
    );
    let mut out = vec![0.0; h * total_w * c];
    for f in 0..n {
        let src = frames.row(f);
        for r in 0..h {
            let dst = (r * total_w + f * w) * c;
            out[dst..dst + w * c].copy_from_slice(&src[r * w * c..(r + 1) * w * c]);
        }
    }
    Ok((out_shape, out))
}
