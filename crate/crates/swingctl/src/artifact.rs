//! Small helpers for on-disk artifacts: JSON read/write and a shape-tagged
//! row-major matrix document shared by every JSON format in the crate.

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major matrix payload with explicit shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixDoc {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixDoc {
    pub fn from_matrix(m: &DMatrix<f64>) -> MatrixDoc {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixDoc {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Parse {
                path: "<matrix doc>".into(),
                message: format!(
                    "shape {}x{} needs {} entries, found {}",
                    self.rows,
                    self.cols,
                    self.rows * self.cols,
                    self.data.len()
                ),
            });
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }

    pub fn from_vector(v: &DVector<f64>) -> MatrixDoc {
        MatrixDoc {
            rows: v.len(),
            cols: 1,
            data: v.as_slice().to_vec(),
        }
    }

    pub fn to_vector(&self) -> Result<DVector<f64>> {
        let m = self.to_matrix()?;
        if m.ncols() != 1 {
            return Err(Error::Parse {
                path: "<matrix doc>".into(),
                message: format!("expected a column vector, found {}x{}", m.nrows(), m.ncols()),
            });
        }
        Ok(m.column(0).into_owned())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: format!("{e} (line {}, column {})", e.line(), e.column()),
    })
}
