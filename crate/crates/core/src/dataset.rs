//! On-disk CSI dataset format, used both for synthetic dumps and for
//! ingesting recorded measurements.
//!
//! Layout: one line of compact JSON (the [`DatasetHeader`]) terminated by
//! `\n`, followed by `sample_count` records. Each record holds
//! `antennas * subcarriers` little-endian `f32` pairs `(re, im)` in
//! antenna-major order, then the ground-truth columns as little-endian `f64`.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::array::TopologyDescriptor;
use crate::channel::{CsiMatrix, LabeledDataset, Sample};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "mimoloc-csi/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub topology: TopologyDescriptor,
    pub frequencies_hz: Vec<f64>,
    pub antennas: usize,
    pub subcarriers: usize,
    pub sample_count: usize,
    pub ground_truth_columns: Vec<String>,
    #[serde(default)]
    pub ue_height_m: f64,
}

pub fn write_dataset<W: Write>(mut w: W, ds: &LabeledDataset) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        topology: TopologyDescriptor::from_topology(&ds.topology),
        frequencies_hz: ds.frequencies.clone(),
        antennas: ds.topology.len(),
        subcarriers: ds.frequencies.len(),
        sample_count: ds.samples.len(),
        ground_truth_columns: vec!["x_m".into(), "y_m".into()],
        ue_height_m: ds.ue_height,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(header.antennas * header.subcarriers * 8 + 16);
    for s in &ds.samples {
        if s.csi.values.dim() != (header.antennas, header.subcarriers) {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", header.antennas, header.subcarriers),
                got: format!("{:?}", s.csi.values.dim()),
            });
        }
        buf.clear();
        for z in s.csi.values.iter() {
            buf.extend_from_slice(&(z.re as f32).to_le_bytes());
            buf.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
        buf.extend_from_slice(&s.position[0].to_le_bytes());
        buf.extend_from_slice(&s.position[1].to_le_bytes());
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Rounds every CSI entry to the `f32` precision of the file format.
pub fn quantize(ds: &mut LabeledDataset) {
    for s in &mut ds.samples {
        s.csi
            .values
            .mapv_inplace(|z| Complex64::new(z.re as f32 as f64, z.im as f32 as f64));
    }
}

/// Reads a dataset. `noise_variance` rescales every entry by
/// `1 / sqrt(noise_variance)` so that `|H|^2` reads as per-entry SNR.
pub fn read_dataset<R: Read>(r: R, noise_variance: Option<f64>) -> Result<LabeledDataset> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("missing header line".into()));
    }
    let header: DatasetHeader = serde_json::from_slice(&line[..line.len() - 1])?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unsupported dataset format `{}`", header.format)));
    }
    if header.frequencies_hz.len() != header.subcarriers {
        return Err(Error::Format("frequency list does not match subcarrier count".into()));
    }
    let topology = header.topology.build()?;
    if topology.len() != header.antennas {
        return Err(Error::Format(format!(
            "topology has {} elements, header says {}",
            topology.len(),
            header.antennas
        )));
    }
    let gt = header.ground_truth_columns.len();
    if gt < 2 {
        return Err(Error::Format("need at least x and y ground-truth columns".into()));
    }
    let gain = match noise_variance {
        Some(v) if v > 0.0 => 1.0 / v.sqrt(),
        Some(_) => return Err(Error::invalid("noise variance must be positive")),
        None => 1.0,
    };
    let (nr, nk) = (header.antennas, header.subcarriers);
    let mut rec = vec![0u8; nr * nk * 8 + gt * 8];
    let mut samples = Vec::with_capacity(header.sample_count);
    for i in 0..header.sample_count {
        r.read_exact(&mut rec)
            .map_err(|e| Error::Format(format!("record {i}: {e}")))?;
        let mut values = Array2::zeros((nr, nk));
        for (j, z) in values.iter_mut().enumerate() {
            let re = f32::from_le_bytes(rec[j * 8..j * 8 + 4].try_into().unwrap());
            let im = f32::from_le_bytes(rec[j * 8 + 4..j * 8 + 8].try_into().unwrap());
            *z = Complex64::new(re as f64 * gain, im as f64 * gain);
        }
        let off = nr * nk * 8;
        let x = f64::from_le_bytes(rec[off..off + 8].try_into().unwrap());
        let y = f64::from_le_bytes(rec[off + 8..off + 16].try_into().unwrap());
        samples.push(Sample {
            csi: CsiMatrix::new(values, header.frequencies_hz.clone())?,
            position: [x, y],
        });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(LabeledDataset {
        topology,
        frequencies: header.frequencies_hz,
        ue_height: header.ue_height_m,
        samples,
    })
}

pub fn save(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path, noise_variance: Option<f64>) -> Result<LabeledDataset> {
    read_dataset(std::fs::File::open(path)?, noise_variance)
}
