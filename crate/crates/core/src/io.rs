//! Text and binary file formats.
//!
//! - observations: `user,item,time,rating` (user/item zero-based, time one-based)
//! - states: `user,time,f0..f{K-1}` for `t = 0..=T`
//! - queries: `user,item,time`, predictions append a `prediction` column
//! - dense tensor: 16-byte header (`CKFT`, then N, M, T as little-endian u32)
//!   followed by N·M·T little-endian f64 in `(user, item, time)` row-major order
//!
//! Floats in text files use Rust's shortest round-trip formatting.

use std::io::{self, Read, Write};

use nalgebra::DVector;

use crate::model::{Dims, Observation};

pub const TENSOR_MAGIC: [u8; 4] = *b"CKFT";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Format(String),
}

fn expect_header(rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<(), IoError> {
    let header = rdr.headers()?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(IoError::Format(format!(
            "expected header {:?}, found {:?}",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> Result<T, IoError> {
    let line = record.position().map_or(0, |p| p.line());
    let raw = record
        .get(idx)
        .ok_or_else(|| IoError::Format(format!("line {line}: missing {name}")))?;
    raw.trim()
        .parse()
        .map_err(|_| IoError::Format(format!("line {line}: cannot parse {name} from {raw:?}")))
}

pub fn write_observations<'a, W, I>(mut w: W, observations: I) -> io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Observation>,
{
    writeln!(w, "user,item,time,rating")?;
    for o in observations {
        writeln!(w, "{},{},{},{}", o.user, o.item, o.time, o.rating)?;
    }
    Ok(())
}

/// Raw records; range and uniqueness are checked by `ObservationSet::new`.
pub fn read_observations<R: Read>(r: R) -> Result<Vec<Observation>, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    expect_header(&mut rdr, &["user", "item", "time", "rating"])?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        out.push(Observation::new(
            field(&record, 0, "user")?,
            field(&record, 1, "item")?,
            field(&record, 2, "time")?,
            field(&record, 3, "rating")?,
        ));
    }
    Ok(out)
}

/// Smallest dims containing every observation.
pub fn infer_dims(observations: &[Observation], num_factors: usize) -> Option<Dims> {
    let users = observations.iter().map(|o| o.user).max()? + 1;
    let items = observations.iter().map(|o| o.item).max()? + 1;
    let steps = observations.iter().map(|o| o.time).max()?.max(1);
    Some(Dims {
        num_users: users,
        num_items: items,
        num_steps: steps,
        num_factors,
    })
}

/// `trajectories[user][t]`, `t = 0..=T`.
pub fn write_states<W: Write>(mut w: W, trajectories: &[&[DVector<f64>]]) -> io::Result<()> {
    let k = trajectories
        .first()
        .and_then(|t| t.first())
        .map_or(0, |x| x.len());
    write!(w, "user,time")?;
    for c in 0..k {
        write!(w, ",f{c}")?;
    }
    writeln!(w)?;
    for (user, traj) in trajectories.iter().enumerate() {
        for (t, x) in traj.iter().enumerate() {
            write!(w, "{user},{t}")?;
            for v in x.iter() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Read a states file back into `trajectories[user][t]`. Every user must
/// cover `t = 0..=T` contiguously and in order.
pub fn read_states<R: Read>(r: R) -> Result<Vec<Vec<DVector<f64>>>, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[0] != "user" || cols[1] != "time" {
        return Err(IoError::Format(
            "states header must be user,time,f0..f{K-1}".into(),
        ));
    }
    for (c, name) in cols[2..].iter().enumerate() {
        if *name != format!("f{c}") {
            return Err(IoError::Format(format!(
                "unexpected states column {name:?}"
            )));
        }
    }
    let k = cols.len() - 2;
    let mut out: Vec<Vec<DVector<f64>>> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let user: usize = field(&record, 0, "user")?;
        let time: usize = field(&record, 1, "time")?;
        let mut x = DVector::zeros(k);
        for c in 0..k {
            x[c] = field(&record, c + 2, "factor")?;
        }
        if user == out.len() && time == 0 {
            out.push(vec![x]);
        } else if user + 1 == out.len() && time == out[user].len() {
            out[user].push(x);
        } else {
            return Err(IoError::Format(format!(
                "states out of order at user {user}, time {time}"
            )));
        }
    }
    if let Some(first) = out.first() {
        if out.iter().any(|t| t.len() != first.len()) {
            return Err(IoError::Format(
                "users have different trajectory lengths".into(),
            ));
        }
    }
    Ok(out)
}

/// One prediction query: `(user, item, time)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub user: usize,
    pub item: usize,
    pub time: usize,
}

pub fn read_queries<R: Read>(r: R) -> Result<Vec<Query>, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    expect_header(&mut rdr, &["user", "item", "time"])?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        out.push(Query {
            user: field(&record, 0, "user")?,
            item: field(&record, 1, "item")?,
            time: field(&record, 2, "time")?,
        });
    }
    Ok(out)
}

pub fn write_predictions<W: Write>(mut w: W, rows: &[(Query, f64)]) -> io::Result<()> {
    writeln!(w, "user,item,time,prediction")?;
    for (q, p) in rows {
        writeln!(w, "{},{},{},{}", q.user, q.item, q.time, p)?;
    }
    Ok(())
}

pub fn write_tensor<W: Write>(mut w: W, dims: Dims, values: &[f64]) -> Result<(), IoError> {
    if values.len() != dims.tensor_len() {
        return Err(IoError::Format(format!(
            "tensor has {} values, dims imply {}",
            values.len(),
            dims.tensor_len()
        )));
    }
    let to_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| IoError::Format(format!("dimension {v} exceeds u32")))
    };
    w.write_all(&TENSOR_MAGIC)?;
    for v in [dims.num_users, dims.num_items, dims.num_steps] {
        w.write_all(&to_u32(v)?.to_le_bytes())?;
    }
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Returns `(N, M, T)` and the values.
pub fn read_tensor<R: Read>(mut r: R) -> Result<((usize, usize, usize), Vec<f64>), IoError> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if header[..4] != TENSOR_MAGIC {
        return Err(IoError::Format("bad tensor magic".into()));
    }
    let dim = |i: usize| {
        u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let shape = (dim(0), dim(1), dim(2));
    let len = shape.0 * shape.1 * shape.2;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != len * 8 {
        return Err(IoError::Format(format!(
            "tensor payload has {} bytes, expected {}",
            bytes.len(),
            len * 8
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((shape, values))
}
