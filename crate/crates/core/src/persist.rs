//! Checkpoints and annotation output.
//!
//! A checkpoint is a short text header followed by raw parameters:
//!
//! ```text
//! STRMCHP1
//! version 1
//! input 3 150 150
//! layers 12
//! conv3x3 32 pad=0
//! ...
//! params 3453121
//! end
//! <params × f32 little-endian, layer order, weight before bias>
//! ```

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::datapipe::ChipRecord;
use crate::error::{Error, Result};
use crate::network::{LayerSpec, Network};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &str = "STRMCHP1";
pub const FORMAT_VERSION: u32 = 1;
const END: &str = "end\n";

pub fn checkpoint_header<T: Scalar>(net: &Network<T>) -> String {
    let mut h = String::new();
    let dims: Vec<String> = net.input_shape().iter().map(|d| d.to_string()).collect();
    let _ = writeln!(h, "{MAGIC}");
    let _ = writeln!(h, "version {FORMAT_VERSION}");
    let _ = writeln!(h, "input {}", dims.join(" "));
    let _ = writeln!(h, "layers {}", net.layers().len());
    for layer in net.layers() {
        let _ = writeln!(h, "{layer}");
    }
    let _ = writeln!(h, "params {}", net.param_count());
    h.push_str(END);
    h
}

pub fn checkpoint_bytes<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let header = checkpoint_header(net);
    let mut out = Vec::with_capacity(header.len() + 4 * net.param_count());
    out.extend_from_slice(header.as_bytes());
    for p in net.params() {
        for v in p.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Network<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<Network<f32>> {
    let corrupt = |message: String| Error::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    if !bytes.starts_with(MAGIC.as_bytes()) || bytes.get(MAGIC.len()) != Some(&b'\n') {
        return Err(corrupt(format!("missing {MAGIC} magic")));
    }
    let end = bytes
        .windows(END.len() + 1)
        .position(|w| w[0] == b'\n' && &w[1..] == END.as_bytes())
        .map(|i| i + 1 + END.len())
        .ok_or_else(|| corrupt("header has no end line".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt("header is not UTF-8".into()))?;
    let mut lines = header.lines().skip(1);
    let mut field = |key: &str| -> Result<String> {
        let line = lines.next().unwrap_or("");
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| corrupt(format!("expected `{key} ...`, found {line:?}")))
    };
    let version = field("version")?;
    if version != FORMAT_VERSION.to_string() {
        return Err(corrupt(format!("format version {version} is not supported (expected {FORMAT_VERSION})")));
    }
    let input = field("input")?
        .split_whitespace()
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| corrupt("bad input shape".into()))?;
    let n_layers: usize = field("layers")?.parse().map_err(|_| corrupt("bad layer count".into()))?;
    let body: Vec<&str> = header.lines().collect();
    if body.len() != n_layers + 6 {
        return Err(corrupt(format!("header declares {n_layers} layers but holds {}", body.len().saturating_sub(6))));
    }
    let layers = body[4..4 + n_layers]
        .iter()
        .map(|l| l.parse::<LayerSpec>())
        .collect::<Result<Vec<_>>>()
        .map_err(|e| corrupt(format!("bad layer line: {e}")))?;
    let declared: usize = body[4 + n_layers]
        .strip_prefix("params ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt(format!("expected `params N`, found {:?}", body[4 + n_layers])))?;
    let mut net = Network::<f32>::new(&input, layers).map_err(|e| corrupt(format!("architecture rejected: {e}")))?;
    if declared != net.param_count() {
        return Err(corrupt(format!(
            "header declares {declared} parameters but the architecture has {}",
            net.param_count()
        )));
    }
    let expected = end + 4 * declared;
    if bytes.len() != expected {
        return Err(corrupt(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut values = bytes[end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let params = net
        .params()
        .iter()
        .map(|p| Tensor::from_vec(p.shape(), values.by_ref().take(p.len()).collect()))
        .collect::<Result<Vec<_>>>()?;
    net.set_params(params)?;
    Ok(net)
}

/// `id,lon,lat,probability,predicted_label`; scores at or above the
/// threshold are labelled damaged.
pub fn annotations_csv(rows: &[&ChipRecord], scores: &[f64], threshold: f64) -> Result<String> {
    if rows.len() != scores.len() {
        return Err(Error::validation(format!("{} rows but {} scores", rows.len(), scores.len())));
    }
    let mut out = String::from("id,lon,lat,probability,predicted_label\n");
    for (r, &p) in rows.iter().zip(scores) {
        let label = if p >= threshold { "damaged" } else { "undamaged" };
        let _ = writeln!(out, "{},{},{},{},{}", r.id, r.lon, r.lat, p, label);
    }
    Ok(out)
}

pub fn write_annotations(rows: &[&ChipRecord], scores: &[f64], threshold: f64, path: &Path) -> Result<()> {
    let text = annotations_csv(rows, scores, threshold)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
