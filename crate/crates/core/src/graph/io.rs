//! CSV formats for distances and adjacency matrices.
//!
//! Distance files carry a `from,to,distance` header; station ids are strings.
//! Adjacency files start with a header row of station ids followed by `n` rows
//! of `n` numbers.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::WeightedGraph;
use crate::error::{input_err, Result, StgcnError};

/// Distance records resolved to dense node indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable {
    pub node_ids: Vec<String>,
    pub records: Vec<(usize, usize, f64)>,
}

fn parse_err(source: &str, line: u64, message: impl Into<String>) -> StgcnError {
    StgcnError::Parse {
        path: source.to_string(),
        line,
        message: message.into(),
    }
}

fn csv_err(source: &str, e: csv::Error) -> StgcnError {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(source, line, e.to_string())
}

/// Reads a distance CSV. With `station_order`, ids map onto that order and
/// unknown ids are rejected; otherwise ids get indices in first-seen order.
pub fn read_distances<R: Read>(
    reader: R,
    source: &str,
    station_order: Option<&[String]>,
) -> Result<DistanceTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_err(source, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["from", "to", "distance"] {
        return Err(parse_err(source, 1, format!("expected header from,to,distance, got {header:?}")));
    }
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut node_ids = Vec::new();
    if let Some(order) = station_order {
        for (i, id) in order.iter().enumerate() {
            index.insert(id.clone(), i);
        }
        node_ids = order.to_vec();
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(source, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let mut resolve = |id: &str| -> Result<usize> {
            if let Some(&i) = index.get(id) {
                return Ok(i);
            }
            if station_order.is_some() {
                return Err(parse_err(source, line, format!("unknown station id {id:?}")));
            }
            index.insert(id.to_string(), node_ids.len());
            node_ids.push(id.to_string());
            Ok(node_ids.len() - 1)
        };
        let from = resolve(&row[0])?;
        let to = resolve(&row[1])?;
        let d: f64 = row[2]
            .parse()
            .map_err(|_| parse_err(source, line, format!("distance {:?} is not a number", &row[2])))?;
        if from == to {
            return Err(parse_err(source, line, format!("self-distance for station {:?}", &row[0])));
        }
        if !(d >= 0.0 && d.is_finite()) {
            return Err(parse_err(source, line, format!("distance {d} must be finite and >= 0")));
        }
        records.push((from, to, d));
    }
    Ok(DistanceTable { node_ids, records })
}

pub fn load_distances(path: &Path, station_order: Option<&[String]>) -> Result<DistanceTable> {
    let file = File::open(path).map_err(|e| StgcnError::io(path, e))?;
    read_distances(file, &path.display().to_string(), station_order)
}

/// Reads an `n×n` adjacency matrix and symmetrizes it.
pub fn read_adjacency<R: Read>(reader: R, source: &str) -> Result<WeightedGraph<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let ids: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(source, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let n = ids.len();
    let mut dense = Vec::with_capacity(n * n);
    let mut rows = 0;
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(source, e))?;
        let line = row.position().map_or(0, |p| p.line());
        for cell in row.iter() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(source, line, format!("weight {cell:?} is not a number")))?;
            dense.push(v);
        }
        rows += 1;
    }
    if rows != n {
        return Err(input_err!("{source}: adjacency has {rows} rows for {n} stations"));
    }
    WeightedGraph::from_dense(ids, &dense)
}

pub fn load_adjacency(path: &Path) -> Result<WeightedGraph<f64>> {
    let file = File::open(path).map_err(|e| StgcnError::io(path, e))?;
    read_adjacency(file, &path.display().to_string())
}

/// Writes the dense adjacency with shortest round-trip float formatting.
pub fn write_adjacency<W: Write>(graph: &WeightedGraph<f64>, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", graph.node_ids().join(","))?;
    let n = graph.n();
    let dense = graph.weights().to_dense();
    for i in 0..n {
        let row: Vec<String> = dense[i * n..(i + 1) * n].iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn save_adjacency(graph: &WeightedGraph<f64>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| StgcnError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_adjacency(graph, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| StgcnError::io(path, e))
}
