//! NKT1 binary tensors and CSV tables.
//!
//! NKT1 layout: magic `4E 4B 54 31`, `u8` version (1), `u8` rank, `rank` dims
//! as little-endian `u64`, little-endian `f64` sampling rate, then the
//! row-major `f64` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::data::MultichannelSeries;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = [0x4E, 0x4B, 0x54, 0x31];
pub const VERSION: u8 = 1;

/// Encodes a tensor and its sampling rate as NKT1 bytes.
pub fn encode_array(tensor: &ArrayD<f64>, fs: f64) -> Vec<u8> {
    let rank = tensor.ndim();
    let mut out = Vec::with_capacity(6 + rank * 8 + 8 + tensor.len() * 8);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(u8::try_from(rank).expect("tensor rank exceeds 255"));
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&fs.to_le_bytes());
    for &v in tensor.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes NKT1 bytes into a tensor and its sampling rate.
pub fn decode_array(bytes: &[u8]) -> Result<(ArrayD<f64>, f64)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not an NKT1 file".into()));
    }
    let version = cur.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported NKT1 version {version}")));
    }
    let rank = cur.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?);
    }
    let fs = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let need = count
        .checked_mul(8)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let payload = cur.take(need)?;
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((tensor, fs))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated file: needed {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }
}

pub fn save_array(path: impl AsRef<Path>, tensor: &ArrayD<f64>, fs: f64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_array(tensor, fs))?;
    w.flush()?;
    Ok(())
}

pub fn load_array(path: impl AsRef<Path>) -> Result<(ArrayD<f64>, f64)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_array(&bytes)
}

pub fn save_series(path: impl AsRef<Path>, series: &MultichannelSeries) -> Result<()> {
    save_array(path, &series.data().clone().into_dyn(), series.fs())
}

/// Loads a rank-2 tensor as a series; rank-1 files load as one channel.
pub fn load_series(path: impl AsRef<Path>) -> Result<MultichannelSeries> {
    let (tensor, fs) = load_array(path)?;
    let data = match tensor.ndim() {
        1 => {
            let n = tensor.len();
            tensor.into_shape_with_order((1, n)).unwrap()
        }
        2 => tensor.into_dimensionality().unwrap(),
        r => return Err(Error::shape(format!("expected a rank-2 series, file has rank {r}"))),
    };
    MultichannelSeries::new(data, fs)
}

/// Writes a CSV table with a header row.
pub fn write_csv<R, I, S>(path: impl AsRef<Path>, header: &[&str], rows: R) -> Result<()>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV table, returning the header and the raw records.
pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_owned).collect());
    }
    Ok((header, rows))
}

/// Reads a two-column `(sample_index, value)` CSV into a dense vector.
///
/// Rows must list consecutive sample indices starting at 0.
pub fn read_index_column(path: impl AsRef<Path>) -> Result<Vec<i64>> {
    let (_, rows) = read_csv(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() < 2 {
            return Err(Error::Format(format!("row {i} has {} fields, expected 2", row.len())));
        }
        let idx: usize = row[0]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("row {i}: bad sample index {:?}", row[0])))?;
        if idx != i {
            return Err(Error::Format(format!("row {i}: sample index {idx} out of sequence")));
        }
        let v: i64 = row[1]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("row {i}: bad value {:?}", row[1])))?;
        out.push(v);
    }
    Ok(out)
}

/// Writes `(sample_index, <name>)` rows.
pub fn write_index_column(path: impl AsRef<Path>, name: &str, values: &[i64]) -> Result<()> {
    write_csv(
        path,
        &["sample_index", name],
        values.iter().enumerate().map(|(i, v)| [i.to_string(), v.to_string()]),
    )
}

/// Shortest round-trip decimal form of an `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}
