//! CSV panels and tab-separated adjacency files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spatboost::panel::{Covariate, CovariateKind, RateTransform, RawPanel, RawResponse, RawRow};
use spatboost::spatial::{build_graph, AdjacencyGraph, GraphInput};
use spatboost::tree::Dataset;

use crate::error::{CliError, Result};

/// A parsed CSV file; empty fields and `NA` are `None`.
#[derive(Debug, Clone)]
pub struct Table {
    pub path: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Option<String>>>,
    /// 1-based source line of each row.
    pub lines: Vec<u64>,
}

impl Table {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Input(format!("{}: no column named '{name}'", self.path)))
    }

    pub(crate) fn err(&self, row: usize, msg: impl Into<String>) -> CliError {
        CliError::parse(&self.path, self.lines[row], msg)
    }

    pub(crate) fn number(&self, row: usize, col: usize) -> Result<Option<f64>> {
        match &self.rows[row][col] {
            None => Ok(None),
            Some(s) => s
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| {
                    self.err(
                        row,
                        format!("column '{}': '{s}' is not a finite number", self.headers[col]),
                    )
                }),
        }
    }

    pub(crate) fn required(&self, row: usize, col: usize) -> Result<&str> {
        self.rows[row][col]
            .as_deref()
            .ok_or_else(|| self.err(row, format!("column '{}' is empty", self.headers[col])))
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(&display, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(&display, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut seen = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if h.is_empty() {
            return Err(CliError::parse(&display, 1, format!("header field {} is empty", i + 1)));
        }
        if seen.insert(h.as_str(), i).is_some() {
            return Err(CliError::parse(&display, 1, format!("duplicate column '{h}'")));
        }
    }
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(&display, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push(
            rec.iter()
                .map(|s| {
                    if s.is_empty() || s == "NA" {
                        None
                    } else {
                        Some(s.to_string())
                    }
                })
                .collect(),
        );
        lines.push(line);
    }
    if rows.is_empty() {
        return Err(CliError::Input(format!("{display}: no data rows")));
    }
    Ok(Table {
        path: display,
        headers,
        rows,
        lines,
    })
}

fn csv_error(path: &str, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    match e.kind() {
        csv::ErrorKind::Io(_) => CliError::Input(format!("{path}: {e}")),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            CliError::parse(path, line, format!("expected {expected_len} fields, found {len}"))
        }
        _ => CliError::parse(path, line, e.to_string()),
    }
}

/// Where the response comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResponseSpec {
    /// An already transformed response column.
    Column { column: String },
    /// A count and a population column, combined by the rate transform.
    Counts { count: String, population: String },
}

impl ResponseSpec {
    fn columns(&self) -> Vec<&str> {
        match self {
            ResponseSpec::Column { column } => vec![column],
            ResponseSpec::Counts { count, population } => vec![count, population],
        }
    }
}

pub struct PanelColumns<'a> {
    pub tract: &'a str,
    pub time: &'a str,
    pub response: &'a ResponseSpec,
    /// Empty means every remaining column.
    pub covariates: &'a [String],
    pub categorical: &'a [String],
    pub transform: RateTransform,
}

pub fn build_raw_panel(table: &Table, spec: &PanelColumns<'_>) -> Result<RawPanel> {
    let tract = table.column(spec.tract)?;
    let time = table.column(spec.time)?;
    let response_cols: Vec<usize> = spec
        .response
        .columns()
        .into_iter()
        .map(|c| table.column(c))
        .collect::<Result<_>>()?;
    let covariate_names: Vec<String> = if spec.covariates.is_empty() {
        let reserved: Vec<&str> = [spec.tract, spec.time]
            .into_iter()
            .chain(spec.response.columns())
            .collect();
        table
            .headers
            .iter()
            .filter(|h| !reserved.contains(&h.as_str()))
            .cloned()
            .collect()
    } else {
        spec.covariates.to_vec()
    };
    let cov_cols: Vec<usize> = covariate_names.iter().map(|c| table.column(c)).collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(table.rows.len());
    for r in 0..table.rows.len() {
        let id = table.required(r, tract)?.to_string();
        let t = table.required(r, time)?;
        let time_value: i64 = t
            .parse()
            .map_err(|_| table.err(r, format!("column '{}': '{t}' is not an integer", spec.time)))?;
        let response = match spec.response {
            ResponseSpec::Column { .. } => {
                let v = table
                    .number(r, response_cols[0])?
                    .ok_or_else(|| table.err(r, "response is missing"))?;
                RawResponse::Value(v)
            }
            ResponseSpec::Counts { .. } => {
                let count = table
                    .number(r, response_cols[0])?
                    .ok_or_else(|| table.err(r, "count is missing"))?;
                let population = table
                    .number(r, response_cols[1])?
                    .ok_or_else(|| table.err(r, "population is missing"))?;
                if count < 0.0 || population <= 0.0 {
                    return Err(table.err(
                        r,
                        format!("need count >= 0 and population > 0, got {count} and {population}"),
                    ));
                }
                RawResponse::Counts { count, population }
            }
        };
        rows.push(RawRow {
            tract: id,
            time: time_value,
            response,
            covariates: cov_cols.iter().map(|&c| table.rows[r][c].clone()).collect(),
        });
    }
    Ok(RawPanel {
        covariate_names,
        categorical: spec.categorical.to_vec(),
        transform: spec.transform,
        rows,
    })
}

/// Builds the design matrix for a saved model's covariates. Unseen
/// categorical levels become missing; their count is returned.
pub fn dataset_for_covariates(table: &Table, covariates: &[Covariate]) -> Result<(Dataset, usize)> {
    let mut unseen = 0;
    let mut columns = Vec::with_capacity(covariates.len());
    for cov in covariates {
        let c = table.column(&cov.name)?;
        let col: Vec<f64> = match &cov.kind {
            CovariateKind::Quantitative => (0..table.rows.len())
                .map(|r| Ok(table.number(r, c)?.unwrap_or(f64::NAN)))
                .collect::<Result<_>>()?,
            CovariateKind::Categorical { levels } => table
                .rows
                .iter()
                .map(|row| match &row[c] {
                    None => f64::NAN,
                    Some(s) => match levels.iter().position(|l| l == s) {
                        Some(i) => i as f64,
                        None => {
                            unseen += 1;
                            f64::NAN
                        }
                    },
                })
                .collect(),
        };
        columns.push(col);
    }
    let kinds = covariates.iter().map(Covariate::feature_kind).collect();
    Ok((Dataset::new(columns, kinds)?, unseen))
}

/// Reads `tract_a<TAB>tract_b` lines; `#` starts a comment, blank lines are skipped.
pub fn read_adjacency(path: &Path) -> Result<Vec<(String, String, u64)>> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = (i + 1) as u64;
        let content = raw.split('#').next().unwrap_or("").trim_end_matches(['\r', ' ']);
        if content.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split('\t').map(str::trim).collect();
        if fields.len() != 2 || fields.iter().any(|f| f.is_empty()) {
            return Err(CliError::parse(
                &display,
                line,
                format!("expected two tab-separated tract ids, found '{}'", content.trim()),
            ));
        }
        edges.push((fields[0].to_string(), fields[1].to_string(), line));
    }
    if edges.is_empty() {
        return Err(CliError::Input(format!("{display}: no edges")));
    }
    Ok(edges)
}

/// Resolves adjacency lines against the panel's tract registry.
pub fn graph_for(tracts: &[String], edges: &[(String, String, u64)], path: &Path) -> Result<AdjacencyGraph> {
    let display = path.display().to_string();
    for (a, b, line) in edges {
        for id in [a, b] {
            if !tracts.contains(id) {
                return Err(CliError::parse(
                    &display,
                    *line,
                    format!("tract '{id}' does not occur in the data"),
                ));
            }
        }
        if a == b {
            return Err(CliError::parse(&display, *line, format!("self-loop on tract '{a}'")));
        }
    }
    let pairs: Vec<(String, String)> = edges.iter().map(|(a, b, _)| (a.clone(), b.clone())).collect();
    let (g, warnings) = build_graph(tracts, GraphInput::Edges(&pairs))?;
    for w in warnings {
        log::warn!("{display}: {w}");
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn missing_markers_and_line_numbers() {
        let f = file("tract,time,y,x\nA,1,1.5,NA\nB,1,2,\nA,2,oops,3\n");
        let t = read_table(f.path()).unwrap();
        assert_eq!(t.rows[0][3], None);
        assert_eq!(t.rows[1][3], None);
        let spec = ResponseSpec::Column { column: "y".into() };
        let cols = PanelColumns {
            tract: "tract",
            time: "time",
            response: &spec,
            covariates: &[],
            categorical: &[],
            transform: RateTransform::default(),
        };
        let err = build_raw_panel(&t, &cols).unwrap_err().to_string();
        assert!(err.ends_with(":4: column 'y': 'oops' is not a finite number"), "{err}");
    }

    #[test]
    fn ragged_row_is_reported_with_line() {
        let f = file("a,b\n1,2\n3\n");
        let err = read_table(f.path()).unwrap_err().to_string();
        assert!(err.contains(":3: expected 2 fields, found 1"), "{err}");
    }

    #[test]
    fn counts_response_uses_transform() {
        let f = file("tract,time,n,pop\nA,1,10,1000\n");
        let t = read_table(f.path()).unwrap();
        let spec = ResponseSpec::Counts {
            count: "n".into(),
            population: "pop".into(),
        };
        let raw = build_raw_panel(
            &t,
            &PanelColumns {
                tract: "tract",
                time: "time",
                response: &spec,
                covariates: &[],
                categorical: &[],
                transform: RateTransform::default(),
            },
        )
        .unwrap();
        assert!(raw.covariate_names.is_empty());
        assert_eq!(
            raw.rows[0].response,
            RawResponse::Counts {
                count: 10.0,
                population: 1000.0
            }
        );
    }

    #[test]
    fn adjacency_comments_and_errors() {
        let f = file("# header\nA\tB # trailing\n\nB\tC\n");
        let e = read_adjacency(f.path()).unwrap();
        assert_eq!(e, vec![("A".into(), "B".into(), 2), ("B".into(), "C".into(), 4)]);
        let tracts: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let g = graph_for(&tracts, &e, f.path()).unwrap();
        assert_eq!(g.n_edges(), 2);

        let bad = file("A B\n");
        let err = read_adjacency(bad.path()).unwrap_err().to_string();
        assert!(err.contains(":1: expected two tab-separated"), "{err}");
        let unknown = file("A\tB\nB\tZ\n");
        let e = read_adjacency(unknown.path()).unwrap();
        let err = graph_for(&tracts, &e, unknown.path()).unwrap_err().to_string();
        assert!(err.contains(":2: tract 'Z'"), "{err}");
    }
}
