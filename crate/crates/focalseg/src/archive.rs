//! Named-entry tensor container. Each entry is two text header lines
//! (`entry <name>`, `shape: d0,d1,...`) followed by the flat row-major
//! payload as little-endian f32. Payloads are f32 regardless of the compute
//! precision, so checkpoints and datasets are interchangeable between modes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &str = "tensor-archive v1";

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_graphic())
}

pub fn write<S: Scalar, P: AsRef<Path>>(path: P, entries: &[(String, Tensor<S>)]) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", MAGIC)?;
    for (name, tensor) in entries {
        if !valid_name(name) {
            return Err(Error::Format(format!("invalid entry name {:?}", name)));
        }
        writeln!(w, "entry {}", name)?;
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        writeln!(w, "shape: {}", dims.join(","))?;
        let mut buf = Vec::with_capacity(tensor.numel() * 4);
        for v in tensor.data() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_line<R: Read>(r: &mut R) -> Result<Option<String>> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte)? {
            0 => {
                if line.is_empty() {
                    return Ok(None);
                }
                return Err(Error::Format("truncated header line".into()));
            }
            _ => {
                if byte[0] == b'\n' {
                    return Ok(Some(String::from_utf8(line).map_err(|_| {
                        Error::Format("non-utf8 header line".into())
                    })?));
                }
                line.push(byte[0]);
                if line.len() > 4096 {
                    return Err(Error::Format("header line too long".into()));
                }
            }
        }
    }
}

pub fn read<S: Scalar, P: AsRef<Path>>(path: P) -> Result<Vec<(String, Tensor<S>)>> {
    let file = File::open(path.as_ref())?;
    let mut r = BufReader::new(file);
    match read_line(&mut r)? {
        Some(line) if line == MAGIC => {}
        other => return Err(Error::Format(format!("bad magic line: {:?}", other))),
    }
    let mut entries = Vec::new();
    while let Some(line) = read_line(&mut r)? {
        let name = line
            .strip_prefix("entry ")
            .ok_or_else(|| Error::Format(format!("expected entry line, got {:?}", line)))?
            .to_string();
        if !valid_name(&name) {
            return Err(Error::Format(format!("invalid entry name {:?}", name)));
        }
        let shape_line = read_line(&mut r)?
            .ok_or_else(|| Error::Format("missing shape line".into()))?;
        let dims_str = shape_line
            .strip_prefix("shape: ")
            .ok_or_else(|| Error::Format(format!("expected shape line, got {:?}", shape_line)))?;
        let shape: Vec<usize> = dims_str
            .split(',')
            .map(|d| d.trim().parse::<usize>().map_err(|_| Error::Format(format!("bad dim {:?}", d))))
            .collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload).map_err(|e| {
            Error::Format(format!("payload for {:?} truncated: {}", name, e))
        })?;
        let data: Vec<S> = payload
            .chunks_exact(4)
            .map(|c| S::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    Ok(entries)
}

/// Lookup helper for archives treated as maps.
pub fn find<'a, S: Scalar>(
    entries: &'a [(String, Tensor<S>)],
    name: &str,
) -> Result<&'a Tensor<S>> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("archive entry {:?} not found", name)))
}
