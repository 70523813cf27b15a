use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;
use serde_json::{json, Value};
use spatboost::interpret::{default_grid, grid_2d, importance, interaction_strength, partial_dependence};
use spatboost::mart::Ensemble;
use spatboost::panel::{Covariate, CovariateKind};
use spatboost::persist::load_model;
use spatboost::tree::Dataset;

use super::fit::parse_pairs;
use crate::config::{resolve, set_path, ReportConfig};
use crate::error::{CliError, Result};
use crate::ingest::{dataset_for_covariates, read_table};
use crate::output::{file_stem, num, CsvDoc};

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Model file written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    /// Data to average partial dependence over (usually the training CSV).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Config file or a previous run.json; supplies `data`, `seed` and `report`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub pd: Vec<String>,
    #[arg(long)]
    pub pd_pair: Vec<String>,
    #[arg(long)]
    pub pd_points: Option<usize>,
    #[arg(long)]
    pub interactions: bool,
    #[arg(long)]
    pub interaction_perms: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct ReportRun {
    data: PathBuf,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    report: ReportConfig,
}

pub fn run(args: &ReportArgs) -> Result<i32> {
    let mut flags = json!({});
    if let Some(d) = &args.data {
        set_path(&mut flags, &["data"], json!(d));
    }
    if let Some(s) = args.seed {
        set_path(&mut flags, &["seed"], json!(s));
    }
    if !args.pd.is_empty() {
        set_path(&mut flags, &["report", "pd"], json!(args.pd));
    }
    if !args.pd_pair.is_empty() {
        set_path(
            &mut flags,
            &["report", "pd_pairs"],
            Value::Array(parse_pairs(&args.pd_pair)?),
        );
    }
    if let Some(n) = args.pd_points {
        set_path(&mut flags, &["report", "pd_points"], json!(n));
    }
    if args.interactions {
        set_path(&mut flags, &["report", "interactions"], json!(true));
    }
    if let Some(n) = args.interaction_perms {
        set_path(&mut flags, &["report", "interaction_perms"], json!(n));
    }
    if args.config.is_none() && args.data.is_none() {
        return Err(CliError::Config("--data is required without --config".into()));
    }
    // A run.json config carries many fit-only keys; keep the ones we use.
    let flags = match (args.config.as_deref(), flags) {
        (Some(path), flags) => {
            let mut file = crate::config::read_config_file(path)?;
            if let Value::Object(m) = &mut file {
                m.retain(|k, _| matches!(k.as_str(), "data" | "seed" | "report"));
            }
            let mut merged = flags;
            crate::config::deep_merge(&mut merged, file);
            merged
        }
        (None, flags) => flags,
    };
    let cfg: ReportRun = resolve(flags, None)?;

    let model = load_model(&args.model)?;
    let table = read_table(&cfg.data)?;
    let (data, unseen) = dataset_for_covariates(&table, &model.covariates)?;
    if unseen > 0 {
        eprintln!("warning: {unseen} categorical value(s) not seen in training were treated as missing");
    }
    fs::create_dir_all(&args.output).map_err(|e| CliError::io(&args.output, e))?;
    write_interpretation(
        &args.output,
        &model.ensemble,
        &model.covariates,
        &data,
        &cfg.report,
        cfg.seed,
    )?;
    Ok(0)
}

fn index_of(covariates: &[Covariate], name: &str) -> Result<usize> {
    covariates
        .iter()
        .position(|c| c.name == name)
        .ok_or_else(|| CliError::Config(format!("unknown covariate '{name}'")))
}

fn grid_label(cov: &Covariate, v: f64) -> String {
    match &cov.kind {
        _ if v.is_nan() => "NA".into(),
        CovariateKind::Categorical { levels } => levels[v as usize].clone(),
        CovariateKind::Quantitative => num(v),
    }
}

/// Writes importance.csv, the requested partial-dependence files and,
/// when enabled, interactions.csv.
pub fn write_interpretation(
    dir: &Path,
    e: &Ensemble,
    covariates: &[Covariate],
    data: &Dataset,
    report: &ReportConfig,
    seed: u64,
) -> Result<()> {
    let values = if e.trees.is_empty() {
        vec![0.0; covariates.len()]
    } else {
        importance(e)?.values
    };
    let mut order: Vec<usize> = (0..covariates.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut doc = CsvDoc::new(["rank", "covariate", "importance"]);
    for (rank, &j) in order.iter().enumerate() {
        doc.row([(rank + 1).to_string(), covariates[j].name.clone(), num(values[j])]);
    }
    doc.save(&dir.join("importance.csv"))?;

    for name in &report.pd {
        let j = index_of(covariates, name)?;
        let grid: Vec<Vec<f64>> = default_grid(data, j, report.pd_points)?
            .into_iter()
            .map(|v| vec![v])
            .collect();
        let curve = partial_dependence(e, data, &[j], &grid)?;
        let mut doc = CsvDoc::new([name.as_str(), "partial_dependence"]);
        for (g, v) in curve.grid.iter().zip(&curve.values) {
            doc.row([grid_label(&covariates[j], g[0]), num(*v)]);
        }
        doc.save(&dir.join(format!("pd_{}.csv", file_stem(name))))?;
    }
    for (a, b) in &report.pd_pairs {
        let (ja, jb) = (index_of(covariates, a)?, index_of(covariates, b)?);
        let grid = grid_2d(
            &default_grid(data, ja, report.pd_points)?,
            &default_grid(data, jb, report.pd_points)?,
        );
        let curve = partial_dependence(e, data, &[ja, jb], &grid)?;
        let mut doc = CsvDoc::new([a.as_str(), b.as_str(), "partial_dependence"]);
        for (g, v) in curve.grid.iter().zip(&curve.values) {
            doc.row([
                grid_label(&covariates[ja], g[0]),
                grid_label(&covariates[jb], g[1]),
                num(*v),
            ]);
        }
        doc.save(&dir.join(format!("pd2_{}_{}.csv", file_stem(a), file_stem(b))))?;
    }
    if report.interactions {
        let mut doc = CsvDoc::new(["covariate", "statistic", "p_value", "rows_used", "n_perm", "method"]);
        for (j, cov) in covariates.iter().enumerate() {
            let t = interaction_strength(
                e,
                data,
                j,
                report.interaction_perms,
                seed.wrapping_add(j as u64),
                report.interaction_rows,
            )?;
            doc.row([
                cov.name.clone(),
                num(t.statistic),
                num(t.p_value),
                t.rows_used.to_string(),
                t.n_perm.to_string(),
                "approximate permutation screen".to_string(),
            ]);
        }
        doc.save(&dir.join("interactions.csv"))?;
    }
    Ok(())
}
