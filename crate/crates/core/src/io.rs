//! Dataset files: the `BPCD` binary layout and plain CSV.
//!
//! `BPCD` is `magic | version u32 | count u64 | dim u64 | has-labels u8`
//! followed by the features as little-endian `f64` (row-major) and, when
//! present, the labels as little-endian `i64`. CSV has one row per datum with
//! the features first and an optional trailing integer `label` column.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::models::Dataset;

pub const DATASET_MAGIC: &[u8; 4] = b"BPCD";
pub const DATASET_VERSION: u32 = 1;

pub(crate) fn read_array<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r, what)?))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r, what)?))
}

/// Reads the rest of the stream and checks it holds exactly `expected` bytes.
pub(crate) fn read_payload<R: Read>(r: &mut R, expected: u64) -> Result<Vec<u8>> {
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() as u64 != expected {
        return Err(Error::Integrity(format!(
            "header promises {expected} payload bytes, file holds {}",
            rest.len()
        )));
    }
    Ok(rest)
}

pub(crate) fn f64s_from_le(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

pub fn write_bpcd<W: Write>(mut w: W, data: &Dataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    w.write_all(&(data.dim() as u64).to_le_bytes())?;
    w.write_all(&[u8::from(data.labels.is_some())])?;
    for v in data.features.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(labels) = &data.labels {
        for &l in labels {
            w.write_all(&(l as i64).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_bpcd<R: Read>(mut r: R) -> Result<Dataset> {
    let magic: [u8; 4] = read_array(&mut r, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = read_u64(&mut r, "count")?;
    let dim = read_u64(&mut r, "dim")?;
    let [has_labels]: [u8; 1] = read_array(&mut r, "label flag")?;
    if has_labels > 1 {
        return Err(Error::Format(format!("bad label flag {has_labels}")));
    }
    let n_feat = count
        .checked_mul(dim)
        .ok_or_else(|| Error::Integrity("feature count overflows".into()))?;
    let expected = n_feat * 8 + if has_labels == 1 { count * 8 } else { 0 };
    let payload = read_payload(&mut r, expected)?;
    let (feat, lab) = payload.split_at((n_feat * 8) as usize);
    let features = Tensor::matrix(count as usize, dim as usize, f64s_from_le(feat))?;
    let labels = if has_labels == 1 {
        let mut out = Vec::with_capacity(count as usize);
        for (i, c) in lab.chunks_exact(8).enumerate() {
            let v = i64::from_le_bytes(c.try_into().expect("chunk of 8"));
            if v < 0 {
                return Err(Error::Format(format!("negative label {v} at row {i}")));
            }
            out.push(v as usize);
        }
        Some(out)
    } else {
        None
    };
    Dataset::new(features, labels)
}

pub fn write_csv<W: Write>(mut w: W, data: &Dataset) -> Result<()> {
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    if data.labels.is_some() {
        header.push("label".into());
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..data.len() {
        let mut fields: Vec<String> = data.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = &data.labels {
            fields.push(l[i].to_string());
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads CSV data. A header row is optional; without one the last column is
/// taken as the label.
pub fn read_csv<R: Read>(r: R) -> Result<Dataset> {
    let mut lines = BufReader::new(r).lines().enumerate().peekable();
    let mut labeled = true;
    if let Some((_, Ok(first))) = lines.peek() {
        let cells: Vec<&str> = first.split(',').map(str::trim).collect();
        if cells.iter().any(|c| c.parse::<f64>().is_err()) {
            labeled = cells.last() == Some(&"label");
            lines.next();
        }
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let (feat, label) = if labeled {
            let (l, f) = cells
                .split_last()
                .ok_or_else(|| Error::Format(format!("line {}: empty row", lineno + 1)))?;
            (f, Some(l))
        } else {
            (&cells[..], None)
        };
        let row = feat
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        if let Some(l) = label {
            labels.push(
                l.parse::<usize>()
                    .map_err(|e| Error::Format(format!("line {}: label {l:?}: {e}", lineno + 1)))?,
            );
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("CSV holds no data rows".into()));
    }
    Dataset::from_rows(&rows, labeled.then_some(labels))
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| with_path(path, e))
}

pub fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| with_path(path, e))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Loads a dataset, choosing CSV or `BPCD` by file extension.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = open(path)?;
    if is_csv(path) {
        read_csv(f)
    } else {
        read_bpcd(BufReader::new(f))
    }
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let f = BufWriter::new(create(path)?);
    if is_csv(path) {
        write_csv(f, data)
    } else {
        write_bpcd(f, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        Dataset::from_rows(
            &[vec![0.1, -2.5], vec![1e-300, 3.0], vec![f64::MAX, 0.0]],
            Some(vec![2, 0, 1]),
        )
        .unwrap()
    }

    #[test]
    fn bpcd_round_trip_is_exact() {
        for data in [sample(), Dataset { labels: None, ..sample() }] {
            let mut buf = Vec::new();
            write_bpcd(&mut buf, &data).unwrap();
            assert_eq!(read_bpcd(&buf[..]).unwrap(), data);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        for data in [sample(), Dataset { labels: None, ..sample() }] {
            let mut buf = Vec::new();
            write_csv(&mut buf, &data).unwrap();
            assert_eq!(read_csv(&buf[..]).unwrap(), data);
        }
    }

    #[test]
    fn headerless_csv_takes_last_column_as_label() {
        let d = read_csv("1.0,2.0,1\n3.5,4.0,0\n".as_bytes()).unwrap();
        assert_eq!(d.labels, Some(vec![1, 0]));
        assert_eq!(d.features.data(), &[1.0, 2.0, 3.5, 4.0]);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let mut buf = Vec::new();
        write_bpcd(&mut buf, &sample()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_bpcd(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(read_bpcd(&buf[..10]), Err(Error::Format(_))));
        assert!(matches!(read_bpcd(&buf[..buf.len() - 3]), Err(Error::Integrity(_))));
    }
}
