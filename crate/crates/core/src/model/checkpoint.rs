//! Binary checkpoint format.
//!
//! ```text
//! WRFCKPT v1\n
//! <name> <dim> <dim> ...\n      one line per layer, in parameter order
//! \n                            empty line ends the header
//! <f64 little-endian values>    every layer's buffer, in header order
//! ```
//!
//! Values are always stored as 64-bit floats. Trainability is not stored:
//! on load a weight matrix with adapter factors present is frozen, and every
//! other layer is trainable.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::lora_a;
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &str = "WRFCKPT v1";

pub fn write<T: Scalar, W: Write>(params: &ParameterSet<T>, mut out: W) -> Result<()> {
    let mut header = format!("{MAGIC}\n");
    for (name, layer) in params.iter() {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Format(format!("layer name `{name}` cannot be stored")));
        }
        header.push_str(name);
        for d in layer.tensor.shape() {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
    }
    header.push('\n');
    out.write_all(header.as_bytes())?;
    for (_, layer) in params.iter() {
        let mut buf = Vec::with_capacity(layer.tensor.len() * 8);
        for v in layer.tensor.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read<T: Scalar, R: Read>(input: R) -> Result<ParameterSet<T>> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end_matches('\n') != MAGIC {
        return Err(Error::Format(format!("expected `{MAGIC}` header")));
    }
    let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Format("checkpoint header is not terminated".into()));
        }
        let l = line.trim_end_matches('\n');
        if l.is_empty() {
            break;
        }
        let mut parts = l.split(' ');
        let name = parts.next().unwrap_or_default().to_string();
        let shape = parts
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("bad dimension for `{name}`: {e}")))?;
        if name.is_empty() || shape.is_empty() {
            return Err(Error::Format(format!("malformed layer line `{l}`")));
        }
        entries.push((name, shape));
    }
    let mut params = ParameterSet::new();
    let mut word = [0u8; 8];
    for (name, shape) in &entries {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            reader
                .read_exact(&mut word)
                .map_err(|_| Error::Format(format!("truncated data for `{name}`")))?;
            data.push(T::of(f64::from_le_bytes(word)));
        }
        let tensor = Tensor::new(shape.clone(), data)
            .map_err(|e| Error::Format(format!("layer `{name}`: {e}")))?;
        params.insert(name.clone(), tensor, true)?;
    }
    if reader.read(&mut word)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint data".into()));
    }
    let frozen: Vec<String> = params
        .names()
        .filter(|n| n.ends_with(".weight") && params.contains(&lora_a(n)))
        .map(str::to_string)
        .collect();
    for name in frozen {
        params.set_trainable(&name, false)?;
    }
    Ok(params)
}

pub fn save<T: Scalar>(params: &ParameterSet<T>, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    write(params, std::io::BufWriter::new(file))
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParameterSet<T>> {
    read(fs::File::open(path)?)
}
