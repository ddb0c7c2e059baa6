//! Flat text checkpoint container.
//!
//! ```text
//! #config
//! key=value
//! #end
//! name<TAB>shape(csv)<TAB>frozen(0|1)
//! v0 v1 v2 ...
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting,
//! so a write/read cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::autograd::{ParamStore, Tensor};
use crate::config_text::ConfigBlock;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub config: ConfigBlock,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(config: ConfigBlock, params: ParamStore) -> Self {
        Self { config, params }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("#config\n");
        out.push_str(&self.config.to_text());
        out.push_str("#end\n");
        for (name, p) in self.params.iter() {
            let shape: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{name}\t{}\t{}", shape.join(","), u8::from(p.frozen));
            let values: Vec<String> = p.value.data().iter().map(f64::to_string).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut config = ConfigBlock::new();
        match lines.next() {
            Some("#config") => {
                loop {
                    match lines.next() {
                        Some("#end") => break,
                        Some(l) => config.parse_line(l)?,
                        None => return Err(Error::parse("unterminated #config block")),
                    }
                }
            }
            _ => return Err(Error::parse("checkpoint must start with #config")),
        }
        let mut params = ParamStore::new();
        while let Some(header) = lines.next() {
            if header.is_empty() {
                continue;
            }
            let fields: Vec<&str> = header.split('\t').collect();
            let [name, shape, frozen] = fields[..] else {
                return Err(Error::parse(format!("bad record header `{header}`")));
            };
            let shape = shape
                .split(',')
                .map(|s| s.parse::<usize>().map_err(|_| Error::parse(format!("bad shape for `{name}`"))))
                .collect::<Result<Vec<_>>>()?;
            let frozen = match frozen {
                "0" => false,
                "1" => true,
                _ => return Err(Error::parse(format!("bad frozen flag for `{name}`"))),
            };
            let values = lines
                .next()
                .ok_or_else(|| Error::parse(format!("missing values for `{name}`")))?
                .split_ascii_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| Error::parse(format!("bad value in `{name}`"))))
                .collect::<Result<Vec<_>>>()?;
            params.insert(name, Tensor::new(shape, values)?, frozen)?;
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Checks that the stored parameter set has exactly the expected names
    /// and shapes.
    pub fn validate(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        if expected.len() != self.params.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} parameters, expected {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks `{name}`")))?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}
