use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::{json, Value};
use spatboost::backfit::{two_stage_fit, BackfitResult, SlotMoran};
use spatboost::interpret::INTERACTION_METHOD;
use spatboost::panel::{validate_panel, Panel};
use spatboost::persist::{to_json, SavedModel};

use super::report::write_interpretation;
use crate::config::{resolve, set_path, FitConfig};
use crate::error::{CliError, Result};
use crate::ingest::{build_raw_panel, graph_for, read_adjacency, read_table, PanelColumns};
use crate::output::{num, write_atomic, CsvDoc};

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Panel CSV with one row per (tract, time).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Tab-separated tract adjacency edge list.
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    /// Column holding the (already transformed) response.
    #[arg(long, conflicts_with_all = ["count", "population"])]
    pub response: Option<String>,
    /// Count column; the response is ln((count + offset) / population * scale).
    #[arg(long, requires = "population")]
    pub count: Option<String>,
    #[arg(long, requires = "count")]
    pub population: Option<String>,
    #[arg(long)]
    pub rate_offset: Option<f64>,
    #[arg(long)]
    pub rate_scale: Option<f64>,
    #[arg(long)]
    pub tract_column: Option<String>,
    #[arg(long)]
    pub time_column: Option<String>,
    /// Covariate columns (default: every other column).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Columns to treat as categorical even if numeric.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// TOML or JSON config file (or a previous run.json); its values override flags.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Shrinkage.
    #[arg(long)]
    pub nu: Option<f64>,
    /// Maximum number of trees.
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub bag_fraction: Option<f64>,
    #[arg(long)]
    pub min_leaf: Option<usize>,
    /// Choose the number of trees by out-of-bag improvement with this patience.
    #[arg(long)]
    pub oob_patience: Option<usize>,
    #[arg(long, requires = "oob_patience", default_value_t = 50)]
    pub oob_window: usize,

    #[arg(long)]
    pub delta_threshold: Option<f64>,
    #[arg(long)]
    pub p_threshold: Option<f64>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    /// Use a permutation Moran test with this many permutations.
    #[arg(long)]
    pub moran_permutations: Option<usize>,
    /// `marginal` (default) or `joint_icm`.
    #[arg(long)]
    pub car_method: Option<String>,

    /// Covariates to write one-way partial dependence for.
    #[arg(long, value_delimiter = ',')]
    pub pd: Vec<String>,
    /// Covariate pair `a:b` to write two-way partial dependence for (repeatable).
    #[arg(long)]
    pub pd_pair: Vec<String>,
    #[arg(long)]
    pub pd_points: Option<usize>,
    /// Also write interactions.csv.
    #[arg(long)]
    pub interactions: bool,
    #[arg(long)]
    pub interaction_perms: Option<usize>,
}

pub fn parse_pairs(raw: &[String]) -> Result<Vec<Value>> {
    raw.iter()
        .map(|p| match p.split_once(':') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok(json!([a, b])),
            _ => Err(CliError::Config(format!("--pd-pair expects 'a:b', got '{p}'"))),
        })
        .collect()
}

impl FitArgs {
    fn to_value(&self) -> Result<Value> {
        let mut v = json!({ "seed": self.seed });
        let mut put = |path: &[&str], val: Value| set_path(&mut v, path, val);
        if let Some(p) = &self.data {
            put(&["data"], json!(p));
        }
        if let Some(p) = &self.adjacency {
            put(&["adjacency"], json!(p));
        }
        if let Some(c) = &self.response {
            put(&["response"], json!({"type": "column", "column": c}));
        }
        if let (Some(c), Some(p)) = (&self.count, &self.population) {
            put(&["response"], json!({"type": "counts", "count": c, "population": p}));
        }
        if let Some(x) = self.rate_offset {
            put(&["transform", "offset"], json!(x));
        }
        if let Some(x) = self.rate_scale {
            put(&["transform", "scale"], json!(x));
        }
        if let Some(c) = &self.tract_column {
            put(&["tract_column"], json!(c));
        }
        if let Some(c) = &self.time_column {
            put(&["time_column"], json!(c));
        }
        if !self.covariates.is_empty() {
            put(&["covariates"], json!(self.covariates));
        }
        if !self.categorical.is_empty() {
            put(&["categorical"], json!(self.categorical));
        }
        let boost = ["backfit", "boost"];
        for (key, val) in [
            ("nu", self.nu.map(|x| json!(x))),
            ("n_trees", self.trees.map(|x| json!(x))),
            ("max_depth", self.depth.map(|x| json!(x))),
            ("bag_fraction", self.bag_fraction.map(|x| json!(x))),
            ("min_leaf", self.min_leaf.map(|x| json!(x))),
            (
                "selection",
                self.oob_patience
                    .map(|p| json!({"method": "oob", "patience": p, "window": self.oob_window})),
            ),
        ] {
            if let Some(val) = val {
                put(&[boost[0], boost[1], key], val);
            }
        }
        for (key, val) in [
            ("delta_threshold", self.delta_threshold.map(|x| json!(x))),
            ("p_threshold", self.p_threshold.map(|x| json!(x))),
            ("max_outer", self.max_outer.map(|x| json!(x))),
            (
                "moran",
                self.moran_permutations
                    .map(|n| json!({"method": "permutation", "n_perm": n, "seed": self.seed})),
            ),
        ] {
            if let Some(val) = val {
                put(&["backfit", key], val);
            }
        }
        if let Some(m) = &self.car_method {
            put(&["backfit", "car", "method"], json!(m));
        }
        if !self.pd.is_empty() {
            put(&["report", "pd"], json!(self.pd));
        }
        if !self.pd_pair.is_empty() {
            put(&["report", "pd_pairs"], Value::Array(parse_pairs(&self.pd_pair)?));
        }
        if let Some(n) = self.pd_points {
            put(&["report", "pd_points"], json!(n));
        }
        if self.interactions {
            put(&["report", "interactions"], json!(true));
        }
        if let Some(n) = self.interaction_perms {
            put(&["report", "interaction_perms"], json!(n));
        }
        Ok(v)
    }
}

pub fn run(args: &FitArgs) -> Result<i32> {
    let flags = args.to_value()?;
    let missing: Vec<&str> = ["data", "adjacency", "response"]
        .into_iter()
        .filter(|k| flags.get(k).is_none())
        .collect();
    let mut cfg: FitConfig = if args.config.is_none() && !missing.is_empty() {
        return Err(CliError::Config(format!(
            "missing required setting(s): {}",
            missing.join(", ")
        )));
    } else {
        resolve(flags, args.config.as_deref())?
    };
    cfg.propagate_seed();
    cfg.backfit.validate()?;

    let table = read_table(&cfg.data)?;
    let raw = build_raw_panel(
        &table,
        &PanelColumns {
            tract: &cfg.tract_column,
            time: &cfg.time_column,
            response: &cfg.response,
            covariates: &cfg.covariates,
            categorical: &cfg.categorical,
            transform: cfg.transform,
        },
    )?;
    let panel = validate_panel(&raw)?;
    for name in cfg
        .report
        .pd
        .iter()
        .chain(cfg.report.pd_pairs.iter().flat_map(|(a, b)| [a, b]))
    {
        if panel.covariate_index(name).is_none() {
            return Err(CliError::Config(format!(
                "partial dependence requested for unknown covariate '{name}'"
            )));
        }
    }
    let edges = read_adjacency(&cfg.adjacency)?;
    let graph = graph_for(panel.tracts(), &edges, &cfg.adjacency)?;
    log::info!(
        "panel: {} observations, {} tracts, {} slots, {} covariates",
        panel.n(),
        panel.n_tracts(),
        panel.n_slots(),
        panel.p()
    );

    let result = two_stage_fit(&panel, &graph, &cfg.backfit)?;
    let out = &args.output;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;

    let model = SavedModel {
        covariates: panel.covariates().to_vec(),
        tracts: panel.tracts().to_vec(),
        slot_labels: panel.slot_labels().to_vec(),
        ensemble: result.ensemble.clone(),
        field: (!result.field.slots().is_empty()).then(|| result.field.clone()),
    };
    write_atomic(&out.join("model.json"), to_json(&model)?.as_bytes())?;
    write_interpretation(
        out,
        &model.ensemble,
        &model.covariates,
        &panel.design(),
        &cfg.report,
        cfg.seed,
    )?;
    write_morans(out, &panel, &result)?;
    write_phi(out, &panel, &result)?;
    write_residuals(out, &panel, &result)?;
    write_run_json(out, &cfg, &panel, &result)?;

    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    if result.converged {
        Ok(0)
    } else {
        eprintln!(
            "did not converge within {} outer iterations (last delta {}); results written",
            result.iterations,
            result.delta_history.last().copied().unwrap_or(f64::NAN)
        );
        Ok(2)
    }
}

fn moran_cells(m: &SlotMoran) -> [String; 2] {
    match m {
        SlotMoran::Tested(r) => [num(r.i), num(r.p_value)],
        SlotMoran::Untestable { .. } => ["NA".into(), "NA".into()],
    }
}

fn write_morans(out: &Path, panel: &Panel, result: &BackfitResult) -> Result<()> {
    let final_s = result.s_history.last().cloned().unwrap_or_default();
    let mut doc = CsvDoc::new([
        "slot", "I_origin", "p_origin", "I_res1", "p_res1", "I_res2", "p_res2", "note",
    ]);
    for row in &result.moran_table {
        let mut notes = Vec::new();
        if final_s.is_empty() {
            notes.push("S empty: no spatial smoothing".to_string());
        } else if final_s.contains(&row.slot) {
            notes.push("smoothed".to_string());
        } else {
            notes.push("not smoothed".to_string());
        }
        if row.overfit {
            notes.push("overfit".to_string());
        }
        for (name, m) in [("origin", &row.origin), ("res1", &row.res1), ("res2", &row.res2)] {
            if let SlotMoran::Untestable { reason } = m {
                notes.push(format!("{name}: {reason}"));
            }
        }
        let [i0, p0] = moran_cells(&row.origin);
        let [i1, p1] = moran_cells(&row.res1);
        let [i2, p2] = moran_cells(&row.res2);
        doc.row([
            panel.slot_labels()[row.slot].to_string(),
            i0,
            p0,
            i1,
            p1,
            i2,
            p2,
            notes.join("; "),
        ]);
    }
    doc.save(&out.join("morans.csv"))
}

fn write_phi(out: &Path, panel: &Panel, result: &BackfitResult) -> Result<()> {
    let mut doc = CsvDoc::new(["slot", "tract", "phi"]);
    for (t, label) in panel.slot_labels().iter().enumerate() {
        for (j, tract) in panel.tracts().iter().enumerate() {
            doc.row([label.to_string(), tract.clone(), num(result.field.value(t, j))]);
        }
    }
    doc.save(&out.join("phi.csv"))
}

fn write_residuals(out: &Path, panel: &Panel, result: &BackfitResult) -> Result<()> {
    let mut doc = CsvDoc::new(["slot", "tract", "y", "f", "phi", "fitted", "residual"]);
    for (i, o) in panel.observations().iter().enumerate() {
        let phi = result.field.value(o.slot, o.tract);
        doc.row([
            panel.slot_labels()[o.slot].to_string(),
            panel.tracts()[o.tract].clone(),
            num(o.response),
            num(result.fitted[i] - phi),
            num(phi),
            num(result.fitted[i]),
            num(result.residuals[i]),
        ]);
    }
    doc.save(&out.join("residuals.csv"))
}

fn write_run_json(out: &Path, cfg: &FitConfig, panel: &Panel, result: &BackfitResult) -> Result<()> {
    let labels = panel.slot_labels();
    let slot_sets: Vec<Vec<i64>> = result
        .s_history
        .iter()
        .map(|s| s.iter().map(|&t| labels[t]).collect())
        .collect();
    let tau: Vec<Value> = (0..panel.n_slots())
        .filter_map(|t| {
            result.field.tau[t].map(|tau| {
                let start = result
                    .last_car
                    .as_ref()
                    .and_then(|c| c.tau_start.iter().find(|(s, _)| *s == t).map(|(_, v)| *v));
                json!({"slot": labels[t], "tau": tau, "tau_start": start})
            })
        })
        .collect();
    let car = result.last_car.as_ref().map(|c| {
        json!({
            "sweeps": c.sweeps,
            "converged": c.converged,
            "pinned_slots": c.pinned.iter().map(|&t| labels[t]).collect::<Vec<_>>(),
            "sigma2_start": c.sigma2_start,
        })
    });
    let doc = json!({
        "tool": "spatboost",
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "result": {
            "iterations": result.iterations,
            "converged": result.converged,
            "termination": result.termination,
            "delta_history": result.delta_history,
            "slot_sets": slot_sets,
            "n_trees": result.ensemble.m(),
            "sigma2": result.field.sigma2,
            "tau": tau,
            "car": car,
            "warnings": result.warnings,
        },
        "interaction_method": cfg.report.interactions.then_some(INTERACTION_METHOD),
    });
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Input(e.to_string()))?;
    text.push('\n');
    write_atomic(&out.join("run.json"), text.as_bytes())
}
