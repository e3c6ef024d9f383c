//! Checkpoint files.
//!
//! Layout: one ASCII header line `FEDEMO1 V d layers h C head`, then the
//! canonical flat parameter vector as little-endian f64. Emoji models have
//! `C >= 1, head = 0`; language models have `C = 0, head = 1` and append
//! the tied-softmax projection after the recurrent layers. Server optimizer
//! velocity uses the same scheme under a `FEDVEL1 len` header.

use std::fs;
use std::path::Path;

use super::{LmConfig, LmParameters, ModelConfig, Parameters};
use crate::error::{Error, Result};

const MAGIC: &str = "FEDEMO1";
const VELOCITY_MAGIC: &str = "FEDVEL1";

/// Either kind of model checkpoint.
#[derive(Debug, Clone)]
pub enum AnyCheckpoint {
    Emoji(Parameters),
    Lm(LmParameters),
}

fn encode(header: String, flat: &[f64]) -> Vec<u8> {
    let mut bytes = header.into_bytes();
    bytes.reserve(flat.len() * 8);
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn decode_payload(path: &Path, payload: &[u8]) -> Result<Vec<f64>> {
    if payload.len() % 8 != 0 {
        return Err(Error::InvalidInput(format!(
            "checkpoint {}: payload length {} is not a multiple of 8",
            path.display(),
            payload.len()
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if !flat.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "checkpoint {}: non-finite parameter value",
            path.display()
        )));
    }
    Ok(flat)
}

pub fn write_checkpoint(path: &Path, params: &Parameters) -> Result<()> {
    let c = params.cfg;
    let header = format!(
        "{MAGIC} {} {} {} {} {} 0\n",
        c.vocab_size, c.embed_dim, c.num_layers, c.hidden_dim, c.num_classes
    );
    fs::write(path, encode(header, &params.flatten())).map_err(|e| Error::io(path, e))
}

pub fn write_lm_checkpoint(path: &Path, params: &LmParameters) -> Result<()> {
    let c = params.cfg;
    let header = format!(
        "{MAGIC} {} {} {} {} 0 1\n",
        c.vocab_size, c.embed_dim, c.num_layers, c.hidden_dim
    );
    fs::write(path, encode(header, &params.flatten())).map_err(|e| Error::io(path, e))
}

pub fn read_any_checkpoint(path: &Path) -> Result<AnyCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| {
        Error::InvalidInput(format!("checkpoint {}: missing header", path.display()))
    })?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| {
        Error::InvalidInput(format!("checkpoint {}: malformed header", path.display()))
    })?;
    let corrupt =
        || Error::InvalidInput(format!("checkpoint {}: malformed header", path.display()));

    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 7 || fields[0] != MAGIC {
        return Err(corrupt());
    }
    let nums: Vec<usize> = fields[1..]
        .iter()
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| corrupt())?;
    let (v, d, layers, h, classes, head) =
        (nums[0], nums[1], nums[2], nums[3], nums[4], nums[5]);
    if head > 1 || (head == 1) != (classes == 0) {
        return Err(corrupt());
    }

    let flat = decode_payload(path, &bytes[newline + 1..])?;
    let wrong_len = |want: usize| {
        Error::InvalidInput(format!(
            "checkpoint {}: payload holds {} values, header implies {}",
            path.display(),
            flat.len(),
            want
        ))
    };
    if head == 1 {
        let cfg = LmConfig {
            vocab_size: v,
            embed_dim: d,
            num_layers: layers,
            hidden_dim: h,
        };
        cfg.validate()?;
        if flat.len() != cfg.param_count() {
            return Err(wrong_len(cfg.param_count()));
        }
        Ok(AnyCheckpoint::Lm(LmParameters::from_flat(cfg, &flat)?))
    } else {
        let cfg = ModelConfig {
            vocab_size: v,
            embed_dim: d,
            num_layers: layers,
            hidden_dim: h,
            num_classes: classes,
        };
        cfg.validate()?;
        if flat.len() != cfg.param_count() {
            return Err(wrong_len(cfg.param_count()));
        }
        Ok(AnyCheckpoint::Emoji(Parameters::from_flat(cfg, &flat)?))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Parameters> {
    match read_any_checkpoint(path)? {
        AnyCheckpoint::Emoji(p) => Ok(p),
        AnyCheckpoint::Lm(_) => Err(Error::InvalidInput(format!(
            "checkpoint {}: found a language model, expected an emoji model",
            path.display()
        ))),
    }
}

pub fn read_lm_checkpoint(path: &Path) -> Result<LmParameters> {
    match read_any_checkpoint(path)? {
        AnyCheckpoint::Lm(p) => Ok(p),
        AnyCheckpoint::Emoji(_) => Err(Error::InvalidInput(format!(
            "checkpoint {}: found an emoji model, expected a language model",
            path.display()
        ))),
    }
}

/// Server optimizer velocity, stored beside momentum-rule checkpoints so a
/// resumed run continues bit-identically.
pub fn write_velocity(path: &Path, velocity: &[f64]) -> Result<()> {
    let header = format!("{VELOCITY_MAGIC} {}\n", velocity.len());
    fs::write(path, encode(header, velocity)).map_err(|e| Error::io(path, e))
}

pub fn read_velocity(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt =
        || Error::InvalidInput(format!("velocity file {}: malformed header", path.display()));
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(corrupt)?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| corrupt())?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 2 || fields[0] != VELOCITY_MAGIC {
        return Err(corrupt());
    }
    let len: usize = fields[1].parse().map_err(|_| corrupt())?;
    let flat = decode_payload(path, &bytes[newline + 1..])?;
    if flat.len() != len {
        return Err(Error::InvalidInput(format!(
            "velocity file {}: payload holds {} values, header says {len}",
            path.display(),
            flat.len()
        )));
    }
    Ok(flat)
}
