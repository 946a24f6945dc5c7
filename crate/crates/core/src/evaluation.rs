//! Recall@N under a geographic match radius, per scenario.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event_io::{geo_distance, scenario_of, GeoTag, SampleRecord, MATCH_RADIUS_M};
use crate::model::Model;
use crate::retrieval::{load_input, query, PlaceDatabase, QueryResult};

pub const RECALL_NS: [usize; 6] = [1, 5, 10, 15, 20, 30];
/// Column pooling every query regardless of scenario.
pub const ALL_SCENARIOS: &str = "all";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    RetrievalOnly,
    Hybrid,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::RetrievalOnly => "retrieval",
            Mode::Hybrid => "hybrid",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(Mode::RetrievalOnly),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(Error::invalid(format!(
                "unknown mode {other:?} (retrieval|hybrid)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallTable {
    pub ns: Vec<usize>,
    pub scenarios: Vec<String>,
    /// `values[i][j]` is Recall@`ns[i]` for `scenarios[j]`.
    pub values: Vec<Vec<f64>>,
}

impl RecallTable {
    pub fn get(&self, n: usize, scenario: &str) -> Option<f64> {
        let i = self.ns.iter().position(|&x| x == n)?;
        let j = self.scenarios.iter().position(|s| s == scenario)?;
        Some(self.values[i][j])
    }

    pub fn is_monotone(&self) -> bool {
        (0..self.scenarios.len()).all(|j| self.values.windows(2).all(|w| w[0][j] <= w[1][j]))
    }

    /// Rows `scenario,N,recall` with full-precision values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,N,recall\n");
        for (j, s) in self.scenarios.iter().enumerate() {
            for (i, n) in self.ns.iter().enumerate() {
                out.push_str(&format!("{s},{n},{}\n", self.values[i][j]));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("scenario,N,recall") {
            return Err(Error::invalid(
                "recall CSV must start with scenario,N,recall",
            ));
        }
        let mut cells: BTreeMap<(String, usize), f64> = BTreeMap::new();
        let (mut scenarios, mut ns) = (Vec::new(), BTreeSet::new());
        for (i, line) in lines.enumerate() {
            let bad = || Error::invalid(format!("recall CSV line {}: {line:?}", i + 2));
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            let n: usize = parts[1].parse().map_err(|_| bad())?;
            let v: f64 = parts[2].parse().map_err(|_| bad())?;
            if !scenarios.iter().any(|s| s == parts[0]) {
                scenarios.push(parts[0].to_string());
            }
            ns.insert(n);
            cells.insert((parts[0].to_string(), n), v);
        }
        let ns: Vec<usize> = ns.into_iter().collect();
        let values =
            ns.iter()
                .map(|&n| {
                    scenarios
                        .iter()
                        .map(|s| {
                            cells.get(&(s.clone(), n)).copied().ok_or_else(|| {
                                Error::invalid(format!("recall CSV lacks {s} at N={n}"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ns,
            scenarios,
            values,
        })
    }

    /// Aligned markdown with one row per N and two decimals per value.
    pub fn to_markdown(&self) -> String {
        let mut header = vec!["N".to_string()];
        header.extend(self.scenarios.iter().cloned());
        let rows: Vec<Vec<String>> = self
            .ns
            .iter()
            .zip(&self.values)
            .map(|(n, row)| {
                std::iter::once(n.to_string())
                    .chain(row.iter().map(|v| format!("{v:.2}")))
                    .collect()
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                rows.iter()
                    .map(|r| r[c].len())
                    .chain([header[c].len(), 3])
                    .max()
                    .unwrap()
            })
            .collect();
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect();
            format!("| {} |\n", padded.join(" | "))
        };
        let mut out = line(&header);
        let rule: Vec<String> = widths
            .iter()
            .map(|w| format!("{}:", "-".repeat(w - 1)))
            .collect();
        out.push_str(&format!("| {} |\n", rule.join(" | ")));
        for r in &rows {
            out.push_str(&line(r));
        }
        out
    }
}

/// Recall@N per scenario plus the pooled column: the fraction of queries
/// whose top N final candidates include one within `radius_m` of the query.
pub fn recall_at_n(
    results: &[QueryResult],
    db_geotags: &HashMap<String, GeoTag>,
    query_geotags: &HashMap<String, GeoTag>,
    ns: &[usize],
    radius_m: f64,
) -> Result<RecallTable> {
    // first matching rank per query, None if no candidate matches
    let mut per_scenario: BTreeMap<String, Vec<Option<usize>>> = BTreeMap::new();
    for r in results {
        let q = query_geotags
            .get(&r.query_id)
            .ok_or_else(|| Error::invalid(format!("unknown query id {}", r.query_id)))?;
        let mut first = None;
        for (rank, c) in r.candidates.iter().enumerate() {
            let g = db_geotags
                .get(&c.id)
                .ok_or_else(|| Error::invalid(format!("unknown candidate id {}", c.id)))?;
            if first.is_none() && geo_distance(q, g) < radius_m {
                first = Some(rank);
            }
        }
        per_scenario
            .entry(scenario_of(&r.query_id).to_string())
            .or_default()
            .push(first);
    }
    let pooled: Vec<Option<usize>> = per_scenario.values().flatten().copied().collect();
    let mut columns: Vec<(String, Vec<Option<usize>>)> = per_scenario.into_iter().collect();
    columns.push((ALL_SCENARIOS.to_string(), pooled));
    let values = ns
        .iter()
        .map(|&n| {
            columns
                .iter()
                .map(|(_, hits)| {
                    if hits.is_empty() {
                        return 0.0;
                    }
                    let found = hits.iter().filter(|h| h.is_some_and(|r| r < n)).count();
                    found as f64 / hits.len() as f64
                })
                .collect()
        })
        .collect();
    Ok(RecallTable {
        ns: ns.to_vec(),
        scenarios: columns.into_iter().map(|(s, _)| s).collect(),
        values,
    })
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub mode: Mode,
    pub ns: Vec<usize>,
    pub radius_m: f64,
    pub top_n: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Hybrid,
            ns: RECALL_NS.to_vec(),
            radius_m: MATCH_RADIUS_M,
            top_n: 30,
        }
    }
}

/// Runs every query record against the database and tabulates recall.
pub fn evaluate(
    db: &PlaceDatabase,
    model: &Model,
    queries: &[SampleRecord],
    opts: &EvalOptions,
) -> Result<(RecallTable, Vec<QueryResult>)> {
    db.check_model(model)?;
    if let Some(&max_n) = opts.ns.iter().max() {
        if opts.top_n < max_n {
            return Err(Error::invalid(format!(
                "top_n {} is shallower than Recall@{max_n}",
                opts.top_n
            )));
        }
    }
    let results = queries
        .par_iter()
        .map(|r| {
            let frame = load_input(model, r)?;
            query(
                db,
                model,
                &r.id,
                &frame,
                r.modality,
                opts.top_n,
                opts.mode == Mode::Hybrid,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let db_tags = db
        .entries
        .iter()
        .map(|e| (e.id.clone(), e.geotag))
        .collect();
    let query_tags = queries.iter().map(|r| (r.id.clone(), r.geotag)).collect();
    let table = recall_at_n(&results, &db_tags, &query_tags, &opts.ns, opts.radius_m)?;
    Ok((table, results))
}
