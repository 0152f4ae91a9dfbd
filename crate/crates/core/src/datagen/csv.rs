//! Tabular CSV interchange for client datasets.
//!
//! Schema: header `client_id,x_0,...,x_{d-1},t,y[,y0,y1]`, UTF-8, `t` in
//! {0,1}, floats in decimal notation. Potential-outcome columns are written
//! only when every client carries them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::ClientDataset;

pub fn write_csv(path: &Path, data: &[ClientDataset]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("write_csv: no clients".into()));
    }
    let d_x = data[0].d_x();
    let with_po = data.iter().all(|c| c.y0.is_some());
    let mut out = String::new();
    out.push_str("client_id");
    for j in 0..d_x {
        out.push_str(&format!(",x_{j}"));
    }
    out.push_str(",t,y");
    if with_po {
        out.push_str(",y0,y1");
    }
    out.push('\n');
    for ds in data {
        if ds.d_x() != d_x {
            return Err(Error::Shape(format!(
                "write_csv: client {} has {} features, expected {d_x}",
                ds.client_id,
                ds.d_x()
            )));
        }
        for i in 0..ds.len() {
            out.push_str(&ds.client_id.to_string());
            for j in 0..d_x {
                out.push(',');
                out.push_str(&format_float(ds.x.get(i, j)));
            }
            out.push(',');
            out.push_str(if ds.t[i] == 1.0 { "1" } else { "0" });
            out.push(',');
            out.push_str(&format_float(ds.y[i]));
            if with_po {
                out.push(',');
                out.push_str(&format_float(ds.y0.as_ref().unwrap()[i]));
                out.push(',');
                out.push_str(&format_float(ds.y1.as_ref().unwrap()[i]));
            }
            out.push('\n');
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Shortest round-trip decimal representation.
fn format_float(v: f64) -> String {
    format!("{v}")
}

struct RawClient {
    x_rows: Vec<Vec<f64>>,
    t: Vec<f64>,
    y: Vec<f64>,
    y0: Vec<f64>,
    y1: Vec<f64>,
}

/// Loads a dataset file, grouping records by `client_id`. Clients come back
/// ordered by id; row order within a client follows the file.
pub fn load_csv(path: &Path) -> Result<Vec<ClientDataset>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Ingest {
        row: 1,
        column: "-".into(),
        reason: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let d_x = parse_header(&cols)?;
    let with_po = cols.len() == d_x + 5;
    let mut clients: BTreeMap<usize, RawClient> = BTreeMap::new();

    for (idx, line) in lines {
        let row = idx + 1; // 1-based, header is row 1
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Ingest {
                row,
                column: "-".into(),
                reason: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let cid: usize = fields[0].parse().map_err(|_| Error::Ingest {
            row,
            column: "client_id".into(),
            reason: format!("not an unsigned integer: {:?}", fields[0]),
        })?;
        let mut xs = Vec::with_capacity(d_x);
        for j in 0..d_x {
            xs.push(parse_cell(fields[1 + j], row, &format!("x_{j}"))?);
        }
        let t = parse_cell(fields[1 + d_x], row, "t")?;
        if t != 0.0 && t != 1.0 {
            return Err(Error::Ingest {
                row,
                column: "t".into(),
                reason: format!("treatment must be 0 or 1, found {t}"),
            });
        }
        let y = parse_cell(fields[2 + d_x], row, "y")?;
        let entry = clients.entry(cid).or_insert_with(|| RawClient {
            x_rows: Vec::new(),
            t: Vec::new(),
            y: Vec::new(),
            y0: Vec::new(),
            y1: Vec::new(),
        });
        if with_po {
            entry.y0.push(parse_cell(fields[3 + d_x], row, "y0")?);
            entry.y1.push(parse_cell(fields[4 + d_x], row, "y1")?);
        }
        entry.x_rows.push(xs);
        entry.t.push(t);
        entry.y.push(y);
    }

    clients
        .into_iter()
        .map(|(cid, raw)| {
            let x = Matrix::from_rows(&raw.x_rows)?;
            ClientDataset::new(
                cid,
                x,
                raw.t,
                raw.y,
                with_po.then_some(raw.y0),
                with_po.then_some(raw.y1),
            )
        })
        .collect()
}

fn parse_header(cols: &[&str]) -> Result<usize> {
    let err = |reason: String| Error::Ingest {
        row: 1,
        column: "-".into(),
        reason,
    };
    if cols.first() != Some(&"client_id") {
        return Err(err("header must start with client_id".into()));
    }
    let mut d_x = 0;
    while 1 + d_x < cols.len() && cols[1 + d_x] == format!("x_{d_x}") {
        d_x += 1;
    }
    if d_x == 0 {
        return Err(err("header must contain x_0,...".into()));
    }
    let rest: Vec<&str> = cols[1 + d_x..].to_vec();
    match rest.as_slice() {
        ["t", "y"] | ["t", "y", "y0", "y1"] => Ok(d_x),
        _ => Err(err(format!(
            "expected trailing columns t,y[,y0,y1], found {rest:?}"
        ))),
    }
}

fn parse_cell(s: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| Error::Ingest {
        row,
        column: column.into(),
        reason: format!("not a number: {s:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Ingest {
            row,
            column: column.into(),
            reason: format!("non-finite value: {s}"),
        });
    }
    Ok(v)
}
