use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde_json::json;
use spatboost::panel::{CovValue, CovariateKind};
use spatboost::synth::{generate, SynthSpec};

use crate::config::{resolve, set_path};
use crate::error::{CliError, Result};
use crate::output::{num, write_atomic, CsvDoc};

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub seed: u64,
    /// Output directory for data.csv, adjacency.tsv, truth.csv and spec.json.
    #[arg(long)]
    pub output: PathBuf,
    /// TOML or JSON generator spec; its values override flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Lattice rows (tracts are a rows x cols rook grid).
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub slots: Option<usize>,
    #[arg(long)]
    pub first_time: Option<i64>,
    /// Number of covariates.
    #[arg(long)]
    pub p: Option<usize>,
    /// Trailing covariates that are categorical.
    #[arg(long)]
    pub categorical: Option<usize>,
    /// `linear`, `additive-nonlinear` or `friedman`.
    #[arg(long)]
    pub signal: Option<String>,
    /// 1-based slots with a planted spatial field (default: all).
    #[arg(long, value_delimiter = ',')]
    pub spatial_slots: Option<Vec<usize>>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub missing_rate: Option<f64>,
}

pub fn run(args: &SimulateArgs) -> Result<i32> {
    let mut v = json!({ "seed": args.seed });
    if args.rows.is_some() || args.cols.is_some() {
        set_path(
            &mut v,
            &["graph"],
            json!({"type": "grid", "rows": args.rows.unwrap_or(10), "cols": args.cols.unwrap_or(10)}),
        );
    }
    for (key, val) in [
        ("n_slots", args.slots.map(|x| json!(x))),
        ("first_time", args.first_time.map(|x| json!(x))),
        ("p", args.p.map(|x| json!(x))),
        ("n_categorical", args.categorical.map(|x| json!(x))),
        ("signal", args.signal.as_ref().map(|x| json!(x))),
        ("spatial_slots", args.spatial_slots.as_ref().map(|x| json!(x))),
        ("tau_true", args.tau.map(|x| json!(x))),
        ("sigma2_true", args.sigma2.map(|x| json!(x))),
        ("missing_rate", args.missing_rate.map(|x| json!(x))),
    ] {
        if let Some(val) = val {
            set_path(&mut v, &[key], val);
        }
    }
    let spec: SynthSpec = resolve(v, args.config.as_deref())?;
    let s = generate(&spec)?;
    let panel = &s.panel;
    let out = &args.output;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;

    let mut header = vec!["tract".to_string(), "time".to_string(), "y".to_string()];
    header.extend(panel.covariates().iter().map(|c| c.name.clone()));
    let mut data = CsvDoc::new(&header);
    let mut truth = CsvDoc::new(["tract", "time", "f", "phi", "noise"]);
    for (i, o) in panel.observations().iter().enumerate() {
        let tract = panel.tracts()[o.tract].clone();
        let time = panel.slot_labels()[o.slot].to_string();
        let mut row = vec![tract.clone(), time.clone(), num(o.response)];
        row.extend(
            o.covariates
                .iter()
                .zip(panel.covariates())
                .map(|(v, c)| match (v, &c.kind) {
                    (CovValue::Missing, _) => String::new(),
                    (CovValue::Level(l), CovariateKind::Categorical { levels }) => levels[*l as usize].clone(),
                    (v, _) => num(v.as_f64()),
                }),
        );
        data.row(&row);
        truth.row([
            tract,
            time,
            num(s.truth.f[i]),
            num(s.truth.phi[o.slot][o.tract]),
            num(s.truth.noise[i]),
        ]);
    }
    data.save(&out.join("data.csv"))?;
    truth.save(&out.join("truth.csv"))?;

    let mut adj = String::from("# rook adjacency written by spatboost simulate\n");
    for (a, b) in s.graph.edges() {
        adj.push_str(&format!("{}\t{}\n", s.graph.names()[a], s.graph.names()[b]));
    }
    write_atomic(&out.join("adjacency.tsv"), adj.as_bytes())?;

    let mut text = serde_json::to_string_pretty(&spec).map_err(|e| CliError::Input(e.to_string()))?;
    text.push('\n');
    write_atomic(&out.join("spec.json"), text.as_bytes())?;
    eprintln!(
        "simulated {} observations over {} tracts and {} slots in {}",
        panel.n(),
        panel.n_tracts(),
        panel.n_slots(),
        out.display()
    );
    Ok(0)
}
