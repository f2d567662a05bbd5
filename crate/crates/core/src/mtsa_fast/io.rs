//! Flat binary parameter container with a JSON sidecar.
//!
//! Layout: the five magic bytes `MTSA1`, a little-endian `u32` matrix count,
//! one `(u32 rows, u32 cols)` pair per matrix, then every matrix row-major as
//! little-endian floats in declaration order (per head `w_t1 w_t2 w_t3 w_s1
//! b_s1 w_s2 b_s2`, then `w_o`). The float width follows from the payload
//! length and must agree with the sidecar's `dtype`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AttentionConfig, MtsaParams};
use crate::attn_ref::TsaParams;
use crate::masks::MaskKind;
use crate::numkit::{DType, Matrix, Real};
use crate::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 5] = b"MTSA1";

/// Contents of `<params>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsSidecar {
    #[serde(flatten)]
    pub config: AttentionConfig,
    pub masks: Vec<MaskKind>,
    pub dtype: DType,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_params<T: Real>(
    path: &Path,
    params: &MtsaParams<T>,
    cfg: &AttentionConfig,
) -> Result<()> {
    params.validate(cfg)?;
    let mats = params.matrices();
    let mut buf = Vec::with_capacity(
        9 + 8 * mats.len() + params.param_count() * T::DTYPE.byte_width(),
    );
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&(mats.len() as u32).to_le_bytes());
    for m in &mats {
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    }
    for m in &mats {
        for &v in m.as_slice() {
            v.write_le(&mut buf);
        }
    }
    fs::write(path, buf)?;
    let sidecar = ParamsSidecar {
        config: cfg.clone(),
        masks: params.masks.clone(),
        dtype: T::DTYPE,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format("truncated shape table".into()))
}

/// Reads a container and its sidecar, converting the payload to `T`.
pub fn read_params<T: Real>(path: &Path) -> Result<(MtsaParams<T>, AttentionConfig)> {
    let sidecar: ParamsSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    if bytes.len() < 9 || &bytes[..5] != PARAMS_MAGIC {
        return Err(Error::Format("missing MTSA1 magic".into()));
    }
    let count = read_u32(&bytes, 5)? as usize;
    let mut shapes = Vec::with_capacity(count);
    for i in 0..count {
        let r = read_u32(&bytes, 9 + 8 * i)? as usize;
        let c = read_u32(&bytes, 13 + 8 * i)? as usize;
        shapes.push((r, c));
    }
    let header = 9 + 8 * count;
    let floats: usize = shapes.iter().map(|(r, c)| r * c).sum();
    let payload = bytes.len() - header;
    let width = sidecar.dtype.byte_width();
    if payload != floats * width {
        return Err(Error::Format(format!(
            "payload is {payload} bytes, shape table and dtype {} imply {}",
            sidecar.dtype,
            floats * width
        )));
    }
    let cfg = sidecar.config;
    if count != 7 * cfg.heads + 1 {
        return Err(Error::Format(format!(
            "{count} matrices for {} heads, expected {}",
            cfg.heads,
            7 * cfg.heads + 1
        )));
    }
    let mut at = header;
    let mut mats = shapes.into_iter().map(|(r, c)| {
        let data = (0..r * c)
            .map(|_| {
                let chunk = &bytes[at..at + width];
                at += width;
                match sidecar.dtype {
                    DType::F32 => T::of(f32::read_le(chunk) as f64),
                    DType::F64 => T::of(f64::read_le(chunk)),
                }
            })
            .collect();
        Matrix::from_vec(r, c, data).expect("shape from table")
    });
    let mut next = || mats.next().expect("count checked");
    let heads = (0..cfg.heads)
        .map(|_| TsaParams {
            w_t1: next(),
            w_t2: next(),
            w_t3: next(),
            w_s1: next(),
            b_s1: next(),
            w_s2: next(),
            b_s2: next(),
        })
        .collect();
    let params = MtsaParams {
        heads,
        w_o: next(),
        masks: sidecar.masks,
    };
    params.validate(&cfg)?;
    Ok((params, cfg))
}
