//! Model file format: a text header naming every layer and its shape,
//! followed by the raw little-endian `f64` values in header order.
//!
//! ```text
//! PERFED-MODEL v1
//! input 33
//! hidden 48
//! layer gru.input_weights 33 144
//! ...
//! data 12345
//! <binary>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::params::{Dims, Layer, ModelParams};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "PERFED-MODEL";

fn format_err(reason: impl Into<String>) -> Error {
    Error::ModelFormat {
        expected: FORMAT_VERSION,
        reason: reason.into(),
    }
}

pub fn write_model<W: Write>(mut w: W, params: &ModelParams) -> std::io::Result<()> {
    let dims = params.dims();
    writeln!(w, "{MAGIC} v{FORMAT_VERSION}")?;
    writeln!(w, "input {}", dims.input)?;
    writeln!(w, "hidden {}", dims.hidden)?;
    for layer in Layer::ALL {
        let shape: Vec<String> = layer.shape(dims).iter().map(ToString::to_string).collect();
        writeln!(w, "layer {} {}", layer.name(), shape.join(" "))?;
    }
    writeln!(w, "data {}", params.len())?;
    let mut buf = Vec::with_capacity(params.len() * 8);
    for v in params.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn header_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    let n = r
        .read_line(&mut line)
        .map_err(|e| format_err(e.to_string()))?;
    if n == 0 {
        return Err(format_err("truncated header"));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

fn keyed_usize(line: &str, key: &str) -> Result<usize> {
    line.strip_prefix(key)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| format_err(format!("expected `{key} <int>`, found {line:?}")))
}

pub fn read_model<R: Read>(r: R) -> Result<ModelParams> {
    let mut r = BufReader::new(r);
    let magic = header_line(&mut r)?;
    let version = magic
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| format_err(format!("not a model file (header {magic:?})")))?;
    if version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported format version {version}")));
    }
    let dims = Dims::new(
        keyed_usize(&header_line(&mut r)?, "input")?,
        keyed_usize(&header_line(&mut r)?, "hidden")?,
    );
    for layer in Layer::ALL {
        let line = header_line(&mut r)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some("layer") || parts.next() != Some(layer.name()) {
            return Err(format_err(format!(
                "expected layer {}, found {line:?}",
                layer.name()
            )));
        }
        let shape: Vec<usize> = parts
            .map(|s| {
                s.parse()
                    .map_err(|_| format_err(format!("bad shape in {line:?}")))
            })
            .collect::<Result<_>>()?;
        if shape != layer.shape(dims) {
            return Err(format_err(format!(
                "layer {} has shape {shape:?}, expected {:?}",
                layer.name(),
                layer.shape(dims)
            )));
        }
    }
    let count = keyed_usize(&header_line(&mut r)?, "data")?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| format_err(e.to_string()))?;
    if bytes.len() != count * 8 {
        return Err(format_err(format!(
            "expected {} data bytes, found {}",
            count * 8,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    ModelParams::from_vec(dims, data).map_err(|e| format_err(e.to_string()))
}

pub fn save_model(path: &Path, params: &ModelParams) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_model(&mut w, params).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = ModelParams::init(Dims::new(12, 5), &mut rng::stream(&[8]));
        p.as_mut_slice()[3] = -0.0;
        p.as_mut_slice()[4] = f64::MIN_POSITIVE / 3.0;
        let mut buf = Vec::new();
        write_model(&mut buf, &p).unwrap();
        let q = read_model(buf.as_slice()).unwrap();
        let bits = |m: &ModelParams| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
    }

    #[test]
    fn corrupted_header_names_format_version() {
        let p = ModelParams::zeros(Dims::new(8, 2));
        let mut buf = Vec::new();
        write_model(&mut buf, &p).unwrap();
        buf[0] = b'X';
        let err = read_model(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("format version 1"), "{err}");

        let mut buf = Vec::new();
        write_model(&mut buf, &p).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_model(buf.as_slice()),
            Err(Error::ModelFormat { .. })
        ));

        let text = String::from_utf8_lossy(&buf).replace("v1", "v9");
        assert!(read_model(text.as_bytes())
            .unwrap_err()
            .to_string()
            .contains("version 9"));
    }
}
