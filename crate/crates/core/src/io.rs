//! CSV/JSON helpers shared by the stages and the CLI.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Renders a matrix as CSV with header `m,t0..t{T-1}`; rows are numbered from 1.
pub fn matrix_csv(values: &Array2<f64>) -> String {
    let mut out = String::from("m");
    for t in 0..values.ncols() {
        let _ = write!(out, ",t{t}");
    }
    out.push('\n');
    for (m, row) in values.rows().into_iter().enumerate() {
        let _ = write!(out, "{}", m + 1);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses the output of [`matrix_csv`].
pub fn parse_matrix_csv(text: &str) -> Result<Array2<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Validation("empty matrix csv".into()))?;
    let ncols = header.split(',').count().saturating_sub(1);
    let mut data = Vec::new();
    let mut nrows = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncols + 1 {
            return Err(Error::Dimension(format!(
                "csv row {} has {} values, header declares {}",
                nrows + 1,
                fields.len().saturating_sub(1),
                ncols
            )));
        }
        for f in &fields[1..] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("bad number `{f}` in csv")))?;
            data.push(v);
        }
        nrows += 1;
    }
    Array2::from_shape_vec((nrows, ncols), data).map_err(|e| Error::Dimension(e.to_string()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Mixes a base seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csv_round_trip() {
        let m = array![[0.1, 2.0, 1e-300], [3.5, 0.0, 7.25]];
        let text = matrix_csv(&m);
        assert!(text.starts_with("m,t0,t1,t2\n1,"));
        assert_eq!(parse_matrix_csv(&text).unwrap(), m);
    }

    #[test]
    fn ragged_csv_is_rejected() {
        assert!(parse_matrix_csv("m,t0,t1\n1,0,1\n2,3\n").is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(9, 4), derive_seed(9, 4));
    }
}
