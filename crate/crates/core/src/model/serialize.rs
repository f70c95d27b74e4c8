//! Model file: a JSON document with matrices stored row-major and every
//! number printed with 17 significant digits, which round-trips `f64` exactly.

use std::io;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use super::{Covariance, Dims, ModelParams, ValidationError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("malformed model document: {0}")]
    Malformed(String),
    #[error("unsupported model format_version {found} (expected {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("invalid model: {0}")]
    Invalid(#[from] ValidationError),
}

/// A model read back from disk, with the seed that produced it when recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredModel {
    pub params: ModelParams,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum CovMode {
    Isotropic,
    Full,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    format_version: u32,
    dims: Dims,
    #[serde(rename = "A")]
    transition: Vec<f64>,
    #[serde(rename = "V")]
    item_factors: Vec<f64>,
    sigma_u2: f64,
    sigma_q2: f64,
    sigma_r2: f64,
    cov_mode: CovMode,
    #[serde(rename = "Sigma0", default, skip_serializing_if = "Option::is_none")]
    initial: Option<Vec<f64>>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    process: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

fn from_row_major(
    name: &str,
    rows: usize,
    cols: usize,
    data: &[f64],
) -> Result<DMatrix<f64>, FormatError> {
    if data.len() != rows * cols {
        return Err(FormatError::Malformed(format!(
            "{name} has {} entries, expected {rows}x{cols}",
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

/// Pretty JSON, but floats always as `{:.16e}`.
struct SeventeenDigits<'a>(PrettyFormatter<'a>);

impl Formatter for SeventeenDigits<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Render `params` as a model document. `seed` is recorded when given.
pub fn serialize_model(params: &ModelParams, seed: Option<u64>) -> Vec<u8> {
    let (cov_mode, initial, process) = match &params.covariance {
        Covariance::Isotropic => (CovMode::Isotropic, None, None),
        Covariance::Full { initial, process } => (
            CovMode::Full,
            Some(row_major(initial)),
            Some(row_major(process)),
        ),
    };
    let doc = ModelDocument {
        format_version: FORMAT_VERSION,
        dims: params.dims,
        transition: row_major(&params.transition),
        item_factors: row_major(&params.item_factors),
        sigma_u2: params.sigma_u2,
        sigma_q2: params.sigma_q2,
        sigma_r2: params.sigma_r2,
        cov_mode,
        initial,
        process,
        seed,
    };
    let mut out = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut out, SeventeenDigits(PrettyFormatter::new()));
    doc.serialize(&mut ser)
        .expect("serializing to memory cannot fail");
    out.push(b'\n');
    out
}

/// Parse and validate a model document. Nothing is returned on any error.
pub fn deserialize_model(bytes: &[u8]) -> Result<StoredModel, FormatError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| FormatError::Malformed(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| FormatError::Malformed("missing format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(FormatError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let doc: ModelDocument =
        serde_json::from_value(value).map_err(|e| FormatError::Malformed(e.to_string()))?;
    let d = doc.dims;
    let k = d.num_factors;
    let transition = from_row_major("A", k, k, &doc.transition)?;
    let item_factors = from_row_major("V", d.num_items, k, &doc.item_factors)?;
    let covariance = match (doc.cov_mode, doc.initial, doc.process) {
        (CovMode::Isotropic, None, None) => Covariance::Isotropic,
        (CovMode::Full, Some(initial), Some(process)) => Covariance::Full {
            initial: from_row_major("Sigma0", k, k, &initial)?,
            process: from_row_major("Q", k, k, &process)?,
        },
        (CovMode::Isotropic, _, _) => {
            return Err(FormatError::Malformed(
                "isotropic model must not carry Sigma0 or Q".into(),
            ))
        }
        (CovMode::Full, _, _) => {
            return Err(FormatError::Malformed(
                "full-covariance model requires both Sigma0 and Q".into(),
            ))
        }
    };
    let params = ModelParams {
        dims: d,
        transition,
        item_factors,
        sigma_u2: doc.sigma_u2,
        sigma_q2: doc.sigma_q2,
        sigma_r2: doc.sigma_r2,
        covariance,
    };
    params.validate()?;
    Ok(StoredModel {
        params,
        seed: doc.seed,
    })
}
