//! Estimator exchange format.
//!
//! A fitted surface is shared between cohorts as one JSON document:
//!
//! ```text
//! {
//!   "format": "sitl-estimator",
//!   "format_version": 1,
//!   "label": "source-1",
//!   "n": 1000,
//!   "q": 2,
//!   "bases": [{"order": 4, "n_interior": 4, "domain": {"lo": 0.0, "hi": 1.0}}, ...],
//!   "levels": [0.0, 0.01, ..., 0.8],
//!   "gamma": [[[...], ...], ...],        // [d][j][l], j over all levels incl. 0
//!   "meta": {"label": ..., "n": ..., "events": ..., "diagnostics": [...]},
//!   "checksum": "<sha256 hex of the compact payload without this field>"
//! }
//! ```
//!
//! Unknown top-level fields are ignored with a warning and do not enter the
//! checksum, so newer writers stay readable.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CoefficientSurface, QuantileGrid, SurfaceMeta};
use crate::basis::SplineBasis;
use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "sitl-estimator";
pub const FORMAT_VERSION: u32 = 1;

const KNOWN_FIELDS: [&str; 10] = [
    "format",
    "format_version",
    "label",
    "n",
    "q",
    "bases",
    "levels",
    "gamma",
    "meta",
    "checksum",
];

#[derive(Debug, Serialize, Deserialize)]
struct Payload {
    format: String,
    format_version: u32,
    label: String,
    n: usize,
    q: usize,
    bases: Vec<SplineBasis>,
    levels: QuantileGrid,
    gamma: Vec<Vec<Vec<f64>>>,
    meta: SurfaceMeta,
}

fn checksum(payload: &Payload) -> String {
    let bytes = serde_json::to_vec(payload).expect("payload serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Serializes a surface to the exchange format (pretty-printed JSON).
pub fn export_estimator(fit: &CoefficientSurface) -> Vec<u8> {
    let (bases, grid, gamma, meta) = fit.clone().into_parts();
    let payload = Payload {
        format: FORMAT_NAME.into(),
        format_version: FORMAT_VERSION,
        label: meta.label.clone(),
        n: meta.n,
        q: bases.len(),
        bases,
        levels: grid,
        gamma,
        meta,
    };
    let sum = checksum(&payload);
    let mut value = serde_json::to_value(&payload).expect("payload serializes");
    value
        .as_object_mut()
        .expect("payload is an object")
        .insert("checksum".into(), serde_json::Value::String(sum));
    let mut out = serde_json::to_vec_pretty(&value).expect("value serializes");
    out.push(b'\n');
    out
}

/// Parses and verifies an exchange document.
pub fn import_estimator(bytes: &[u8]) -> Result<CoefficientSurface> {
    let value: serde_json::Value = serde_json::from_slice(bytes)
        .map_err(|e| Error::Format(format!("not a JSON document: {e}")))?;
    let serde_json::Value::Object(mut map) = value else {
        return Err(Error::Format("estimator must be a JSON object".into()));
    };
    match map.get("format").and_then(|v| v.as_str()) {
        Some(FORMAT_NAME) => {}
        other => {
            return Err(Error::Format(format!(
                "expected format `{FORMAT_NAME}`, found {other:?}"
            )))
        }
    }
    match map.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        other => {
            return Err(Error::Format(format!(
                "unsupported format_version {other:?} (this build reads {FORMAT_VERSION})"
            )))
        }
    }
    let stored = match map.remove("checksum") {
        Some(serde_json::Value::String(s)) => s,
        _ => return Err(Error::Format("missing checksum".into())),
    };
    let extra: Vec<String> = map
        .keys()
        .filter(|k| !KNOWN_FIELDS.contains(&k.as_str()))
        .cloned()
        .collect();
    if !extra.is_empty() {
        log::warn!("ignoring unknown estimator fields: {}", extra.join(", "));
        for k in &extra {
            map.remove(k);
        }
    }
    let payload: Payload = serde_json::from_value(serde_json::Value::Object(map))
        .map_err(|e| Error::Format(format!("malformed estimator: {e}")))?;
    let actual = checksum(&payload);
    if actual != stored {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored}, computed {actual}"
        )));
    }
    if payload.q != payload.bases.len() {
        return Err(Error::Format(format!(
            "q = {} but {} bases are listed",
            payload.q,
            payload.bases.len()
        )));
    }
    CoefficientSurface::new(payload.bases, payload.levels, payload.gamma, payload.meta)
}
