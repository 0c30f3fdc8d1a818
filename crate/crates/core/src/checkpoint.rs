//! Versioned text container for named tensors.
//!
//! ```text
//! KGEN-TENSORS 1
//! kind <kind>
//! config <key>=<value>
//! ...
//! tensor <name> <rows> <cols>
//! <rows*cols values, space separated, shortest round-trip exponent form>
//! ...
//! end
//! ```
//!
//! Values use Rust's `{:e}` formatting, which reproduces every `f64` bit-exactly
//! on parse.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

pub const MAGIC: &str = "KGEN-TENSORS";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("unsupported container version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorContainer {
    pub kind: String,
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl TensorContainer {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC} {VERSION}");
        let _ = writeln!(s, "kind {}", self.kind);
        for (k, v) in &self.config {
            let _ = writeln!(s, "config {k}={v}");
        }
        for (name, t) in &self.tensors {
            let _ = writeln!(s, "tensor {name} {} {}", t.nrows(), t.ncols());
            let mut first = true;
            for v in t.iter() {
                if !first {
                    s.push(' ');
                }
                first = false;
                let _ = write!(s, "{v:e}");
            }
            s.push('\n');
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let fmt_err = |line: usize, msg: &str| CheckpointError::Format {
            line,
            msg: msg.to_string(),
        };
        let (ln, header) = lines.next().ok_or_else(|| fmt_err(1, "empty container"))?;
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| fmt_err(ln, "bad header"))?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut out = TensorContainer::default();
        let mut ended = false;
        while let Some((ln, line)) = lines.next() {
            if let Some(kind) = line.strip_prefix("kind ") {
                out.kind = kind.to_string();
            } else if let Some(kv) = line.strip_prefix("config ") {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| fmt_err(ln, "config without '='"))?;
                out.config.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [name, rows, cols] = parts[..] else {
                    return Err(fmt_err(ln, "tensor header needs name rows cols"));
                };
                let rows: usize = rows.parse().map_err(|_| fmt_err(ln, "bad row count"))?;
                let cols: usize = cols.parse().map_err(|_| fmt_err(ln, "bad column count"))?;
                let (vln, values) = lines
                    .next()
                    .ok_or_else(|| fmt_err(ln, "missing tensor values"))?;
                let data: Vec<f64> = values
                    .split_whitespace()
                    .map(|v| v.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| fmt_err(vln, "bad tensor value"))?;
                let t = Array2::from_shape_vec((rows, cols), data)
                    .map_err(|_| fmt_err(vln, "value count does not match shape"))?;
                out.tensors.push((name.to_string(), t));
            } else if line == "end" {
                ended = true;
                break;
            } else if !line.trim().is_empty() {
                return Err(fmt_err(ln, "unrecognized line"));
            }
        }
        if !ended {
            return Err(fmt_err(text.lines().count(), "missing end marker"));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_text()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = TensorContainer::new("test");
        c.config.push(("d_model".into(), "8".into()));
        c.tensors.push((
            "w".into(),
            array![[0.1, -1.0 / 3.0, f64::MIN_POSITIVE], [1e300, -0.0, 2.5]],
        ));
        c.tensors.push(("empty".into(), Array2::zeros((0, 3))));
        let back = TensorContainer::from_text(&c.to_text()).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.config_value("d_model"), Some("8"));
        let (a, b) = (c.tensor("w").unwrap(), back.tensor("w").unwrap());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back.tensor("empty").unwrap().dim(), (0, 3));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TensorContainer::from_text("").is_err());
        assert!(matches!(
            TensorContainer::from_text("KGEN-TENSORS 9\nend\n"),
            Err(CheckpointError::Version(9))
        ));
        assert!(TensorContainer::from_text("KGEN-TENSORS 1\ntensor w 2 2\n1 2 3\nend\n").is_err());
        assert!(TensorContainer::from_text("KGEN-TENSORS 1\nkind x\n").is_err());
    }
}
