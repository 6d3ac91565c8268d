//! Coordinate-triplet text format: one `row col value` entry per line, 0-based.
//!
//! Blank lines and lines starting with `#` are ignored, except `# dim N`, which
//! fixes the dimension (otherwise it is one more than the largest index).

use super::sparse::SparsePrecision;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn write_triplets<T: Real>(q: &SparsePrecision<T>) -> String {
    let mut out = format!("# dim {}\n", q.dim());
    for i in 0..q.dim() {
        for (j, v) in q.row(i) {
            out.push_str(&format!("{i} {j} {:e}\n", v.to_f64_lossy()));
        }
    }
    out
}

pub fn parse_triplets<T: Real>(text: &str) -> Result<SparsePrecision<T>> {
    let mut dim = None;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(d) = rest.trim().strip_prefix("dim") {
                dim = Some(d.trim().parse::<usize>().map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?);
            }
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(Error::Data(format!("line {}: expected `row col value`", lineno + 1)));
        }
        let bad = |e: String| Error::Data(format!("line {}: {e}", lineno + 1));
        let i: usize = f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
        let j: usize = f[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
        let v: f64 = f[2].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
        entries.push((i, j, T::of(v)));
    }
    let n = dim.unwrap_or_else(|| entries.iter().map(|&(i, j, _)| i.max(j) + 1).max().unwrap_or(0));
    SparsePrecision::from_triplets(n, &entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let q = SparsePrecision::<f64>::from_dense(&[vec![2.0, -0.1], vec![-0.1, 3.25e-7]]).unwrap();
        let text = write_triplets(&q);
        assert_eq!(parse_triplets::<f64>(&text).unwrap(), q);
    }

    #[test]
    fn dimension_inferred_and_errors() {
        let q = parse_triplets::<f64>("0 0 1\n\n# comment\n2 2 1.5\n").unwrap();
        assert_eq!(q.dim(), 3);
        assert!(parse_triplets::<f64>("0 0").is_err());
        assert!(parse_triplets::<f64>("a 0 1").is_err());
    }
}
