//! Dense binary matrix files.
//!
//! Layout: an 8-byte little-endian `u64` holding the column count, followed
//! by the entries as row-major little-endian `f64`. The row count is implied
//! by the file length. A `p x p` cost matrix therefore carries `p` in its
//! header; a vector of length `k` is stored as one row with `k` columns.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

pub fn write_matrix<W: Write>(mut w: W, m: ArrayView2<f64>) -> Result<()> {
    let (_, cols) = m.dim();
    w.write_all(&(cols as u64).to_le_bytes())?;
    for row in m.rows() {
        for &x in row {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<Array2<f64>> {
    let mut header = [0u8; 8];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("missing matrix header: {e}")))?;
    let cols = u64::from_le_bytes(header) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "matrix body of {} bytes is not a whole number of f64 entries",
            body.len()
        )));
    }
    let count = body.len() / 8;
    if cols == 0 {
        if count != 0 {
            return Err(Error::Format("zero columns with non-empty body".into()));
        }
        return Ok(Array2::zeros((0, 0)));
    }
    if count % cols != 0 {
        return Err(Error::Format(format!(
            "{count} entries do not fill rows of {cols} columns"
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Array2::from_shape_vec((count / cols, cols), data)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn save_matrix(path: impl AsRef<Path>, m: ArrayView2<f64>) -> Result<()> {
    write_matrix(BufWriter::new(File::create(path)?), m)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    read_matrix(BufReader::new(File::open(path)?))
}

pub fn save_vector(path: impl AsRef<Path>, v: &Array1<f64>) -> Result<()> {
    let row = v.view().insert_axis(ndarray::Axis(0));
    save_matrix(path, row)
}

pub fn load_vector(path: impl AsRef<Path>) -> Result<Array1<f64>> {
    let m = load_matrix(path)?;
    if m.nrows() != 1 {
        return Err(Error::Format(format!(
            "expected a single row, found {}",
            m.nrows()
        )));
    }
    Ok(m.row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn header_is_column_count() {
        let m = array![[0.0, 2.0], [2.0, 0.0]];
        let mut buf = Vec::new();
        write_matrix(&mut buf, m.view()).unwrap();
        assert_eq!(buf.len(), 8 + 4 * 8);
        assert_eq!(&buf[..8], &2u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2.0f64.to_le_bytes());
        assert_eq!(read_matrix(&buf[..]).unwrap(), m);
    }

    #[test]
    fn rejects_ragged_body() {
        let mut buf = 3u64.to_le_bytes().to_vec();
        buf.extend_from_slice(&1.0f64.to_le_bytes());
        assert!(matches!(read_matrix(&buf[..]), Err(Error::Format(_))));
    }
}
