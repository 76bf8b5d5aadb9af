//! Ingestion of external charging-session logs.
//!
//! Schema: `timestamp,station_id,ev_id,energy_kwh,duration_min,price_total`
//! with RFC 3339 UTC timestamps and non-negative quantities.

use std::io::Read;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: [&str; 6] = ["timestamp", "station_id", "ev_id", "energy_kwh", "duration_min", "price_total"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub timestamp: DateTime<Utc>,
    pub station_id: String,
    pub ev_id: String,
    pub energy_kwh: f64,
    pub duration_min: f64,
    pub price_total: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejected {
    /// 1-based line number in the input, header included.
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Ingested {
    /// Sorted by timestamp; ties keep input order.
    pub records: Vec<Transaction>,
    pub rejects: Vec<Rejected>,
}

fn parse_quantity(field: &str, name: &str) -> std::result::Result<f64, String> {
    let v: f64 = field.trim().parse().map_err(|_| format!("{name} is not a number: {field:?}"))?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("{name} must be finite and >= 0, got {v}"));
    }
    Ok(v)
}

fn parse_record(rec: &csv::StringRecord) -> std::result::Result<Transaction, String> {
    if rec.len() != HEADER.len() {
        return Err(format!("expected {} fields, found {}", HEADER.len(), rec.len()));
    }
    let timestamp = DateTime::parse_from_rfc3339(rec[0].trim())
        .map_err(|e| format!("bad timestamp {:?}: {e}", &rec[0]))?
        .with_timezone(&Utc);
    let id = |s: &str, name: &str| {
        let s = s.trim();
        if s.is_empty() {
            Err(format!("{name} is empty"))
        } else {
            Ok(s.to_string())
        }
    };
    Ok(Transaction {
        timestamp,
        station_id: id(&rec[1], "station_id")?,
        ev_id: id(&rec[2], "ev_id")?,
        energy_kwh: parse_quantity(&rec[3], "energy_kwh")?,
        duration_min: parse_quantity(&rec[4], "duration_min")?,
        price_total: parse_quantity(&rec[5], "price_total")?,
    })
}

/// Parses a transaction log from any reader.
///
/// Malformed rows are collected in [`Ingested::rejects`]; more than half the
/// rows being malformed is a format error.
pub fn parse_transactions<R: Read>(input: R) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).has_headers(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names.is_empty() || names == [""] {
        return Ok(Ingested::default());
    }
    if names != HEADER {
        return Err(Error::Format(format!("unexpected header {names:?}, expected {HEADER:?}")));
    }
    let mut out = Ingested::default();
    let mut rows = 0usize;
    for (i, rec) in reader.records().enumerate() {
        rows += 1;
        let line = i as u64 + 2;
        let parsed = match rec {
            Ok(rec) => parse_record(&rec),
            Err(e) => Err(e.to_string()),
        };
        match parsed {
            Ok(t) => out.records.push(t),
            Err(reason) => out.rejects.push(Rejected { line, reason }),
        }
    }
    if rows > 0 && 2 * out.rejects.len() > rows {
        return Err(Error::Format(format!("{} of {rows} rows are malformed", out.rejects.len())));
    }
    out.records.sort_by_key(|t| t.timestamp);
    Ok(out)
}

pub fn ingest_transactions(path: impl AsRef<Path>) -> Result<Ingested> {
    let file = std::fs::File::open(path)?;
    parse_transactions(std::io::BufReader::new(file))
}

/// Writes records in the ingestion schema.
pub fn write_transactions<W: std::io::Write>(out: W, records: &[Transaction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for t in records {
        w.write_record([
            t.timestamp.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true),
            t.station_id.clone(),
            t.ev_id.clone(),
            t.energy_kwh.to_string(),
            t.duration_min.to_string(),
            t.price_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
