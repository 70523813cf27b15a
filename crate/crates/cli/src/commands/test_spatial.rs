use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use spatboost::spatial::{morans_i_partial, MoranMethod};

use crate::error::{CliError, Result};
use crate::ingest::{graph_for, read_adjacency, read_table};
use crate::output::{num, CsvDoc};

#[derive(Debug, Args)]
pub struct TestSpatialArgs {
    /// Panel CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub adjacency: PathBuf,
    /// Column to test, per time slot.
    #[arg(long)]
    pub column: String,
    #[arg(long, default_value = "tract")]
    pub tract_column: String,
    #[arg(long, default_value = "time")]
    pub time_column: String,
    /// Use a permutation test instead of the normal approximation.
    #[arg(long)]
    pub permutations: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Prints one CSV row per time slot. Slots that cannot be tested get a note, not an error.
pub fn run(args: &TestSpatialArgs) -> Result<i32> {
    let table = read_table(&args.data)?;
    let (ct, cs, cv) = (
        table.column(&args.tract_column)?,
        table.column(&args.time_column)?,
        table.column(&args.column)?,
    );
    let mut tracts: Vec<String> = Vec::new();
    let mut tract_ids: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<(usize, i64, Option<f64>)> = Vec::with_capacity(table.rows.len());
    for r in 0..table.rows.len() {
        let tract = table.required(r, ct)?.to_string();
        let time_text = table.required(r, cs)?;
        let time: i64 = time_text
            .parse()
            .map_err(|_| table.err(r, format!("time '{time_text}' is not an integer")))?;
        let id = *tract_ids.entry(tract.clone()).or_insert_with(|| {
            tracts.push(tract);
            tracts.len() - 1
        });
        cells.push((id, time, table.number(r, cv)?));
    }
    let edges = read_adjacency(&args.adjacency)?;
    let graph = graph_for(&tracts, &edges, &args.adjacency)?;

    let mut slots: BTreeMap<i64, Vec<Option<f64>>> = BTreeMap::new();
    for (r, (id, time, v)) in cells.into_iter().enumerate() {
        let slot = slots.entry(time).or_insert_with(|| vec![None; tracts.len()]);
        if slot[id].is_some() {
            return Err(table.err(r, format!("duplicate (tract, time) = ({}, {time})", tracts[id])));
        }
        slot[id] = v;
    }
    let method = match args.permutations {
        Some(n_perm) => MoranMethod::Permutation {
            n_perm,
            seed: args.seed,
        },
        None => MoranMethod::Normal,
    };

    let mut doc = CsvDoc::new(["slot", "n", "I", "expected", "p_value", "note"]);
    for (time, values) in &slots {
        let n = values.iter().filter(|v| v.is_some()).count();
        match morans_i_partial(values, &graph, method) {
            Ok(m) => doc.row([
                time.to_string(),
                m.n.to_string(),
                num(m.i),
                num(m.expected),
                num(m.p_value),
                String::new(),
            ]),
            Err(e) => doc.row([
                time.to_string(),
                n.to_string(),
                "NA".into(),
                "NA".into(),
                "NA".into(),
                e.to_string(),
            ]),
        }
    }
    std::io::stdout()
        .write_all(&doc.into_bytes())
        .map_err(|e| CliError::io("<stdout>", e))?;
    Ok(0)
}
