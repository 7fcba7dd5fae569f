//! Row-major nested-list conversions.

use kernel_flows::linalg::{GeneralMatrix, SymmetricMatrix};
use pyo3::exceptions::PyValueError;
use pyo3::PyResult;

pub type Rows = Vec<Vec<f64>>;

/// Rows to a matrix; every row must have the same length.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<GeneralMatrix, String> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix: rows differ in length".to_string());
    }
    Ok(GeneralMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &GeneralMatrix) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> PyResult<GeneralMatrix> {
    matrix_from_rows(rows).map_err(PyValueError::new_err)
}

/// Accepts matrices symmetric up to round-off and returns their exact symmetric part.
pub fn symmetric(rows: &[Vec<f64>]) -> PyResult<SymmetricMatrix> {
    let m = from_rows(rows)?;
    if !m.is_square() {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    SymmetricMatrix::new(m.clone()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(SymmetricMatrix::symmetrize(m))
}
