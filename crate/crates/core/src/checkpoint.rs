//! Versioned plain-text checkpoints.
//!
//! ```text
//! ocrm-checkpoint 1
//! kind <tag>
//! <key> <value...>
//! layer_dims 2 4 1
//! activations tanh
//! seed 7
//! params 17
//! <17 lines, one f64 each>
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save/load cycle is bit-exact. A vector block is `<name> <len>` followed by
//! `len` single-value lines.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};

pub const MAGIC: &str = "ocrm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct CheckpointWriter {
    buf: String,
}

impl CheckpointWriter {
    pub fn new(kind: &str) -> Self {
        let mut w = CheckpointWriter::default();
        let _ = writeln!(w.buf, "{MAGIC} {VERSION}");
        w.field("kind", kind);
        w
    }

    pub fn field(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.buf, "{key} {value}");
        self
    }

    pub fn vector(&mut self, key: &str, values: &[f64]) -> &mut Self {
        let _ = writeln!(self.buf, "{key} {}", values.len());
        for v in values {
            let _ = writeln!(self.buf, "{v:?}");
        }
        self
    }

    pub fn mlp(&mut self, prefix: &str, net: &Mlp) -> &mut Self {
        let dims: Vec<String> = net.layer_dims().iter().map(ToString::to_string).collect();
        let acts: Vec<String> = net.hidden_activations().iter().map(ToString::to_string).collect();
        self.field(&format!("{prefix}layer_dims"), dims.join(" "));
        let acts = if acts.is_empty() { "-".to_string() } else { acts.join(" ") };
        self.field(&format!("{prefix}activations"), acts);
        self.field(&format!("{prefix}seed"), net.seed());
        self.vector(&format!("{prefix}params"), net.params())
    }

    pub fn finish(&self) -> &str {
        &self.buf
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.buf).map_err(|e| Error::io(path, e))
    }
}

pub struct CheckpointReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line_no: usize,
    kind: String,
}

impl<'a> CheckpointReader<'a> {
    pub fn new(text: &'a str) -> Result<Self> {
        let mut r = CheckpointReader {
            lines: text.lines().enumerate(),
            line_no: 0,
            kind: String::new(),
        };
        let header = r.next_line()?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(r.error(format!("missing `{MAGIC}` header")));
        }
        match parts.next().map(str::parse::<u32>) {
            Some(Ok(VERSION)) => {}
            Some(Ok(v)) => return Err(r.error(format!("unsupported checkpoint version {v}"))),
            _ => return Err(r.error("malformed version")),
        }
        r.kind = r.field("kind")?.to_string();
        Ok(r)
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Parse {
                line: 2,
                message: format!("expected checkpoint kind `{kind}`, found `{}`", self.kind),
            });
        }
        Ok(())
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line_no,
            message: message.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, line)) => {
                self.line_no = i + 1;
                Ok(line)
            }
            None => {
                self.line_no += 1;
                Err(self.error("unexpected end of checkpoint"))
            }
        }
    }

    /// Reads `<key> <rest>` and returns `rest`.
    pub fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next_line()?;
        match line.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest.trim()),
            _ => Err(self.error(format!("expected field `{key}`, found `{line}`"))),
        }
    }

    pub fn parse_field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.field(key)?;
        raw.parse::<T>()
            .map_err(|e| self.error(format!("field `{key}`: {e}")))
    }

    pub fn vector(&mut self, key: &str) -> Result<Vec<f64>> {
        let len: usize = self.parse_field(key)?;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let line = self.next_line()?;
            let v: f64 = line
                .trim()
                .parse()
                .map_err(|e| self.error(format!("bad value in `{key}`: {e}")))?;
            out.push(v);
        }
        Ok(out)
    }

    pub fn mlp(&mut self, prefix: &str) -> Result<Mlp> {
        let dims_raw = self.field(&format!("{prefix}layer_dims"))?;
        let dims = dims_raw
            .split_whitespace()
            .map(str::parse::<usize>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| self.error(format!("layer_dims: {e}")))?;
        let acts_raw = self.field(&format!("{prefix}activations"))?;
        let acts = if acts_raw == "-" {
            Vec::new()
        } else {
            acts_raw
                .split_whitespace()
                .map(str::parse::<Activation>)
                .collect::<Result<Vec<_>>>()?
        };
        let seed: u64 = self.parse_field(&format!("{prefix}seed"))?;
        let params = self.vector(&format!("{prefix}params"))?;
        let line = self.line_no;
        Mlp::from_params(&dims, &acts, params, seed).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })
    }
}

pub fn save_mlp(net: &Mlp, path: &Path) -> Result<()> {
    let mut w = CheckpointWriter::new("mlp");
    w.mlp("", net);
    w.write_to(path)
}

pub fn mlp_from_str(text: &str) -> Result<Mlp> {
    let mut r = CheckpointReader::new(text)?;
    r.expect_kind("mlp")?;
    r.mlp("")
}

pub fn load_mlp(path: &Path) -> Result<Mlp> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    mlp_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_round_trip_is_bit_exact() {
        let net = Mlp::uniform(&[2, 4, 1], Activation::Tanh, 99).unwrap();
        let mut w = CheckpointWriter::new("mlp");
        w.mlp("", &net);
        let back = mlp_from_str(w.finish()).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.seed(), 99);
    }

    #[test]
    fn single_layer_round_trip() {
        let net = Mlp::from_params(&[1, 1], &[], vec![0.1 + 0.2, -0.0], 0).unwrap();
        let mut w = CheckpointWriter::new("mlp");
        w.mlp("", &net);
        assert_eq!(mlp_from_str(w.finish()).unwrap(), net);
    }

    #[test]
    fn truncated_checkpoint_errors() {
        let net = Mlp::uniform(&[2, 4, 1], Activation::Tanh, 1).unwrap();
        let mut w = CheckpointWriter::new("mlp");
        w.mlp("", &net);
        let text = w.finish();
        let cut: String = text.lines().take(8).map(|l| format!("{l}\n")).collect();
        assert!(matches!(mlp_from_str(&cut), Err(Error::Parse { .. })));
    }

    #[test]
    fn wrong_kind_and_version_rejected() {
        assert!(mlp_from_str("ocrm-checkpoint 2\nkind mlp\n").is_err());
        assert!(mlp_from_str("ocrm-checkpoint 1\nkind policy\n").is_err());
        assert!(mlp_from_str("garbage").is_err());
    }
}
