//! Plain-text checkpoint format.
//!
//! ```text
//! multigrain-checkpoint 1
//! activation tanh
//! tensor img.weight 32 16
//! <row-major values, one row per line>
//! ...
//! ```
//!
//! Floats are written with `{:e}`, which round-trips exactly.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{Activation, ModelParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::numeric::FeatureMatrix;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "multigrain-checkpoint";

impl ModelParams {
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC} {CHECKPOINT_FORMAT_VERSION}")?;
        writeln!(w, "activation {}", self.activation.as_str())?;
        for (name, t) in PARAM_NAMES.iter().zip(self.tensors()) {
            writeln!(w, "tensor {name} {} {}", t.rows(), t.cols())?;
            for row in t.iter_rows() {
                let line: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Format(format!("checkpoint truncated before {what}")))
        };

        let header = next("header")?;
        let version = header
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::Format("not a multigrain checkpoint".into()))?;
        if version != CHECKPOINT_FORMAT_VERSION.to_string() {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_FORMAT_VERSION})"
            )));
        }
        let act = next("activation")?;
        let activation = match act.split_whitespace().collect::<Vec<_>>()[..] {
            ["activation", name] => name.parse::<Activation>()?,
            _ => {
                return Err(Error::Format(format!(
                    "expected activation line, got `{act}`"
                )))
            }
        };

        let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
        for expected in PARAM_NAMES {
            let head = next(expected)?;
            let (rows, cols) = match head.split_whitespace().collect::<Vec<_>>()[..] {
                ["tensor", name, r, c] if name == expected => (parse_dim(r)?, parse_dim(c)?),
                _ => {
                    return Err(Error::Format(format!(
                        "expected `tensor {expected} <rows> <cols>`, got `{head}`"
                    )))
                }
            };
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = next(expected)?;
                let before = data.len();
                for tok in line.split_whitespace() {
                    data.push(tok.parse::<f64>().map_err(|e| {
                        Error::Format(format!("bad value `{tok}` in {expected}: {e}"))
                    })?);
                }
                if data.len() - before != cols {
                    return Err(Error::Format(format!(
                        "row of {expected} has {} values, expected {cols}",
                        data.len() - before
                    )));
                }
            }
            tensors.push(FeatureMatrix::from_vec(rows, cols, data)?);
        }
        ModelParams::from_tensors(tensors, activation)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(fs::File::open(path)?)
    }
}

fn parse_dim(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad tensor dimension `{s}`")))
}
