use std::io::{BufRead, Write};

use serde::Serialize;

use crate::error::{config_err, Error, Result};
use crate::federation::ServerState;

/// One client's embedding with its synthetic group label.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub client: usize,
    pub z: Vec<f64>,
    pub group: usize,
}

/// Writes `client,z0,...,z{D-1},group`, one row per client. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn export_embeddings<W: Write>(
    server: &ServerState,
    groups: &[usize],
    mut out: W,
) -> Result<()> {
    let Some((_, z)) = server.generator() else {
        return config_err("only the adaptfed strategy has client embeddings");
    };
    if groups.len() != z.rows() {
        return config_err(format!(
            "{} group labels for {} clients",
            groups.len(),
            z.rows()
        ));
    }
    let header: Vec<String> = std::iter::once("client".to_string())
        .chain((0..z.cols()).map(|k| format!("z{k}")))
        .chain(std::iter::once("group".to_string()))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (i, g) in groups.iter().enumerate() {
        let values: Vec<String> = z.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{i},{},{g}", values.join(","))?;
    }
    Ok(())
}

pub fn parse_embeddings<R: BufRead>(input: R) -> Result<Vec<EmbeddingRow>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let cols = header.split(',').count();
    if cols < 3 || !header.starts_with("client,") || !header.ends_with(",group") {
        return config_err(format!("not an embedding CSV header: {header:?}"));
    }
    let bad = |line: usize, what: &str| Error::Config(format!("embedding CSV line {line}: {what}"));
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(bad(
                n + 2,
                &format!("{} fields, expected {cols}", fields.len()),
            ));
        }
        let client = fields[0].parse().map_err(|_| bad(n + 2, "client id"))?;
        let group = fields[cols - 1]
            .parse()
            .map_err(|_| bad(n + 2, "group label"))?;
        let z = fields[1..cols - 1]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad(n + 2, "embedding value")))
            .collect::<Result<_>>()?;
        rows.push(EmbeddingRow { client, z, group });
    }
    Ok(rows)
}

/// Mean pairwise Euclidean distance between embeddings of the same group
/// and of different groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GroupDistances {
    pub within: f64,
    pub across: f64,
}

pub fn group_distances(rows: &[EmbeddingRow]) -> Result<GroupDistances> {
    let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            let d =
                a.z.iter()
                    .zip(&b.z)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
            if a.group == b.group {
                within += d;
                nw += 1;
            } else {
                across += d;
                na += 1;
            }
        }
    }
    if nw == 0 || na == 0 {
        return config_err("group distances need at least two groups and a group with two members");
    }
    Ok(GroupDistances {
        within: within / nw as f64,
        across: across / na as f64,
    })
}
