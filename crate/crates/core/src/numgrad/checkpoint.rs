//! Text checkpoint format for parameter sets.
//!
//! One record per parameter:
//!
//! ```text
//! checkpoint <param-count>
//! <name> <rank> <dim...> <value...>
//! ```
//!
//! Values are written with 17 significant digits, which round-trips every
//! f64 bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::params::ParamSet;
use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub fn params_to_string(params: &ParamSet) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "checkpoint {}", params.len());
    for (name, tensor) in params.iter() {
        let _ = write!(out, "{} {}", name, tensor.rank());
        for d in tensor.shape() {
            let _ = write!(out, " {d}");
        }
        for v in tensor.data() {
            let _ = write!(out, " {v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn params_from_str(text: &str) -> Result<ParamSet, CheckpointError> {
    let parse_err = |line: usize, msg: String| CheckpointError::Parse { line, msg };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty checkpoint".into()))?;
    let count: usize = header
        .strip_prefix("checkpoint ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| parse_err(1, format!("bad header {header:?}")))?;

    let mut params = ParamSet::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_ascii_whitespace();
        let name = fields
            .next()
            .ok_or_else(|| parse_err(lineno, "missing name".into()))?;
        let rank: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| parse_err(lineno, "missing or invalid rank".into()))?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| parse_err(lineno, "missing or invalid dimension".into()))?;
            shape.push(d);
        }
        let expected: usize = shape.iter().product();
        let mut data = Vec::with_capacity(expected);
        for field in fields {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(lineno, format!("invalid value {field:?}")))?;
            data.push(v);
        }
        if data.len() != expected {
            return Err(parse_err(
                lineno,
                format!("expected {} values for shape {:?}, got {}", expected, shape, data.len()),
            ));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        params
            .insert(name, tensor)
            .map_err(|e| parse_err(lineno, e.to_string()))?;
    }
    if params.len() != count {
        return Err(parse_err(
            1,
            format!("header promises {} parameters, found {}", count, params.len()),
        ));
    }
    Ok(params)
}

pub fn save_params(path: impl AsRef<Path>, params: &ParamSet) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    std::fs::write(path, params_to_string(params)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamSet, CheckpointError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    params_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(
            "layer.weight",
            Tensor::new(vec![2, 2], vec![0.1, -1.0 / 3.0, 2e-300, 1.7976931348623157e308])
                .unwrap(),
        )
        .unwrap();
        p.insert("layer.bias", Tensor::new(vec![2, 1], vec![0.0, -0.25]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let params = sample();
        let text = params_to_string(&params);
        let back = params_from_str(&text).unwrap();
        assert_eq!(params.len(), back.len());
        for (name, t) in params.iter() {
            let r = back.get(name).unwrap();
            assert_eq!(t.shape(), r.shape());
            for (a, b) in t.data().iter().zip(r.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn parse_reports_line_numbers() {
        let text = "checkpoint 1\nw 1 2 0.5 not_a_number\n";
        let err = params_from_str(text).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        let params = sample();
        save_params(&path, &params).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(params_to_string(&params), params_to_string(&back));
    }
}
