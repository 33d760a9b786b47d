use std::path::Path;

use super::params::{Augment, ModelParams, ModelShape};
use crate::corpus::io::{read_lines, write_text};
use crate::corpus::PhoneInventory;
use crate::error::{Error, Result};
use crate::numerics::Mat;

const MAGIC: &str = "MDE-CHECKPOINT";
const VERSION: u32 = 1;

/// Writes a versioned text checkpoint. Floats carry 17 significant digits, which
/// round-trips every `f64` exactly.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("{MAGIC} {VERSION}\n"));
    out.push_str(&format!("inventory {}\n", params.inventory_hash));
    out.push_str(&format!("augment {}\n", params.augment.name()));
    out.push_str(&format!("gamma {:.16e}\n", params.gamma));
    out.push_str(&format!("frames_per_token {:.16e}\n", params.frames_per_token));
    out.push_str(&format!("lambda_decode {:.16e}\n", params.lambda_decode));
    out.push_str(&format!("lambda_mtl {:.16e}\n", params.lambda_mtl));
    let shape: Vec<String> = ModelShape::FIELDS
        .iter()
        .zip(params.shape.values())
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    out.push_str(&format!("shape {}\n", shape.join(" ")));
    for (name, m) in params.tensors.named() {
        out.push_str(&format!("tensor {name} {} {}\n", m.rows(), m.cols()));
        for row in m.row_iter() {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
    }
    out.push_str("end\n");
    write_text(path, &out)
}

struct Lines<'a> {
    path: &'a Path,
    lines: std::vec::IntoIter<String>,
    n: usize,
}

impl Lines<'_> {
    fn next(&mut self) -> Result<String> {
        self.n += 1;
        self.lines
            .next()
            .ok_or_else(|| Error::format(self.path, format!("truncated at line {}", self.n)))
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::format(self.path, format!("line {}: {msg}", self.n))
    }

    fn keyed(&mut self, key: &str) -> Result<String> {
        let line = self.next()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.to_string()),
            _ => Err(self.err(format!("expected `{key}`"))),
        }
    }

    fn float(&mut self, key: &str) -> Result<f64> {
        let v = self.keyed(key)?;
        v.parse().map_err(|_| self.err(format!("bad number {v:?}")))
    }
}

/// Loads a checkpoint and verifies it was trained on `inventory`.
pub fn load_checkpoint(path: &Path, inventory: &PhoneInventory) -> Result<ModelParams> {
    let lines = read_lines(path)?;
    let mut it = Lines {
        path,
        lines: lines.into_iter(),
        n: 0,
    };
    let header = it.next()?;
    match header.split_once(' ') {
        Some((MAGIC, v)) if v == VERSION.to_string() => {}
        Some((MAGIC, v)) => return Err(Error::CheckpointVersion(format!("unsupported version {v}"))),
        _ => return Err(Error::CheckpointVersion(format!("{}: not a checkpoint", path.display()))),
    }
    let inventory_hash = it.keyed("inventory")?;
    if inventory_hash != inventory.hash() {
        return Err(Error::CheckpointMismatch(format!(
            "{}: trained on a different phone inventory",
            path.display()
        )));
    }
    let augment = Augment::parse(&it.keyed("augment")?)?;
    let gamma = it.float("gamma")?;
    let frames_per_token = it.float("frames_per_token")?;
    let lambda_decode = it.float("lambda_decode")?;
    let lambda_mtl = it.float("lambda_mtl")?;

    let shape_line = it.keyed("shape")?;
    let mut values = [0usize; 8];
    let fields: Vec<&str> = shape_line.split(' ').collect();
    if fields.len() != values.len() {
        return Err(it.err("shape header has the wrong number of fields"));
    }
    for ((field, key), slot) in fields.iter().zip(ModelShape::FIELDS).zip(values.iter_mut()) {
        *slot = field
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| it.err(format!("expected {key}=<n>")))?;
    }
    let shape = ModelShape::from_values(values);
    if shape.vocab != inventory.len() {
        return Err(Error::CheckpointMismatch("vocabulary size differs from inventory".into()));
    }

    let mut params = ModelParams {
        shape,
        gamma,
        frames_per_token,
        lambda_decode,
        lambda_mtl,
        augment,
        inventory_hash,
        tensors: placeholder(shape, augment, inventory)?,
    };
    let expected = params.expected_shapes();
    let mut loaded: Vec<Mat> = Vec::with_capacity(expected.len());
    for (name, (rows, cols)) in &expected {
        let line = it.next()?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 4 || parts[0] != "tensor" {
            return Err(it.err(format!("expected tensor {name}")));
        }
        if parts[1] != name {
            return Err(Error::MissingKeys(format!("{}: expected tensor {name}, found {}", path.display(), parts[1])));
        }
        let dims: (usize, usize) = (
            parts[2].parse().map_err(|_| it.err("bad row count"))?,
            parts[3].parse().map_err(|_| it.err("bad column count"))?,
        );
        if dims != (*rows, *cols) {
            return Err(Error::CheckpointMismatch(format!(
                "{name} is {}x{}, shape header implies {rows}x{cols}",
                dims.0, dims.1
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..*rows {
            let line = it.next()?;
            for cell in line.split(' ') {
                data.push(cell.parse::<f64>().map_err(|_| it.err(format!("bad number {cell:?}")))?);
            }
        }
        if data.len() != rows * cols {
            return Err(it.err(format!("{name} has {} values, expected {}", data.len(), rows * cols)));
        }
        loaded.push(Mat::from_vec(*rows, *cols, data)?);
    }
    if it.next()? != "end" {
        return Err(it.err("expected `end`"));
    }
    let mut slots = loaded.into_iter();
    params.tensors.visit_mut(&mut |_, m| *m = slots.next().expect("counted above"));
    if !params.tensors.named().iter().all(|(_, m)| m.is_finite()) {
        return Err(Error::NonFinite("checkpoint weights"));
    }
    Ok(params)
}

fn placeholder(shape: ModelShape, augment: Augment, inventory: &PhoneInventory) -> Result<super::params::ModelTensors> {
    let cfg = super::ModelConfig {
        hidden: shape.hidden,
        att_dim: shape.att_dim,
        embed_dim: shape.embed_dim,
        dec_hidden: shape.dec_hidden,
        conv_filters: shape.conv_filters,
        conv_width: shape.conv_width,
        ..super::ModelConfig::default()
    };
    Ok(ModelParams::init(&cfg, shape.input_dim, inventory, augment, 0)
        .map_err(|e| Error::CheckpointMismatch(format!("invalid shape header: {e}")))?
        .tensors)
}
