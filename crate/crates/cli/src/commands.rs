//! The four subcommands. Each returns the report text and an exit status.

use std::fs::File;
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Map, Value};

use elliptrim::ellipsoid::EllipsoidReport;
use elliptrim::error::Error;
use elliptrim::estimators::{fit, EstimatorVariant, FitConfig};
use elliptrim::inference::efficiency_with;
use elliptrim::lab::{run_breakdown, run_consistency, run_rate, BlowupThreshold, ExperimentPlan, ExperimentReport};
use elliptrim::mve::{enlarge, sample_mve, trim, MveConfig};
use elliptrim::params::{vech, ParamsReport};
use elliptrim::probability::McBudget;
use elliptrim::sampling::derive_seed;

use crate::config::{Format, InputError, Result, RunConfig, SimulationMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 2;

pub struct Output {
    pub text: String,
    pub status: i32,
}

/// Numeric table from a headed CSV file.
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<DVector<f64>>,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| InputError(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| InputError(format!("cannot read header: {e}")))?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(InputError("no observations: the file is empty".into()));
    }
    let columns: Vec<String> = headers.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                InputError(format!("row {row}: expected {expected_len} columns, found {len}"))
            }
            _ => InputError(format!("row {row}: {e}")),
        })?;
        let mut x = DVector::zeros(columns.len());
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                InputError(format!("row {row}, column {} ('{}'): cannot parse '{field}' as a number", j + 1, columns[j]))
            })?;
            if !v.is_finite() {
                return Err(InputError(format!("row {row}, column {} ('{}'): value is not finite", j + 1, columns[j])));
            }
            x[j] = v;
        }
        rows.push(x);
    }
    if rows.is_empty() {
        return Err(InputError("no observations: the file has a header but no data rows".into()));
    }
    Ok(Table { columns, rows })
}

fn csv_line(fields: &[String]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(fields).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable report");
    s.push('\n');
    s
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<Output> {
    let path = cfg.input_path.as_deref().ok_or_else(|| InputError("fit needs --input".into()))?;
    let table = read_table(path)?;
    let (n, p) = (table.rows.len(), table.columns.len());
    if n <= p {
        return Err(InputError(format!("need more observations than columns: n = {n}, p = {p}")));
    }
    let mve_cfg = MveConfig { n_subsets: cfg.n_subsets.unwrap_or(500), seed: derive_seed(cfg.seed, 1), ..MveConfig::default() };
    let mve = sample_mve(&table.rows, &mve_cfg)?;
    let region = match cfg.coverage {
        Some(c) => Some(enlarge(&mve, &cfg.family, c)?),
        None => None,
    };
    let sample = trim(&table.rows, region.as_ref().unwrap_or(&mve))?;
    let fit_cfg = FitConfig { seed: derive_seed(cfg.seed, 2), em_mc_draws: cfg.mc_budget, ..FitConfig::default() };
    let mut status = EXIT_OK;
    let mut results = Vec::new();
    for &v in &cfg.variants {
        let alpha = match v {
            EstimatorVariant::R => Some(cfg.alpha_restrict.unwrap_or_else(|| sample.empirical_inside_fraction()).min(1.0 - 1e-9)),
            _ => None,
        };
        let res = fit(v, &sample, &cfg.family, alpha, &fit_cfg);
        match &res {
            Err(Error::NonExistence(_)) => status = EXIT_PARTIAL,
            Err(Error::TooFewPoints { .. } | Error::DegenerateData(_)) => return Err(InputError(res.unwrap_err().to_string())),
            _ => {}
        }
        results.push((v, alpha, res));
    }
    let flagged: Vec<usize> = sample.outside_rows().to_vec();
    let text = match cfg.format {
        Format::Json => {
            let mut variants = Map::new();
            for (v, alpha, res) in &results {
                let entry = match res {
                    Ok(f) => json!({
                        "theta_hat": ParamsReport::from(&f.theta_hat),
                        "pi_hat": f.pi_hat,
                        "loglik": f.loglik,
                        "branch": f.branch,
                        "converged": f.converged,
                        "iterations": f.iterations,
                        "region_probability": f.region_probability,
                        "alpha": alpha,
                        "flagged_outliers": flagged,
                    }),
                    Err(e) => json!({ "error": e.to_string(), "flagged_outliers": flagged }),
                };
                variants.insert(v.to_string(), entry);
            }
            to_json(&json!({
                "columns": table.columns,
                "n": n,
                "family": cfg.family.to_string(),
                "seed": cfg.seed,
                "mve": EllipsoidReport::from(&mve),
                "enlarged_region": region.as_ref().map(EllipsoidReport::from),
                "n_inside": sample.n_inside(),
                "n_outside": sample.n_outside(),
                "variants": Value::Object(variants),
            }))
        }
        Format::Csv => {
            let mut head: Vec<String> =
                ["variant", "status", "branch", "converged", "pi_hat", "loglik", "n_inside", "n_outside"].map(String::from).to_vec();
            head.extend(table.columns.iter().map(|c| format!("mu_{c}")));
            for i in 0..p {
                for j in 0..=i {
                    head.push(format!("sigma_{}_{}", table.columns[i], table.columns[j]));
                }
            }
            let mut out = csv_line(&head);
            for (v, _, res) in &results {
                let mut row = vec![v.to_string()];
                match res {
                    Ok(f) => {
                        let branch = f.branch.map(|b| serde_json::to_value(b).unwrap().as_str().unwrap_or("").to_string());
                        row.extend([
                            "ok".into(),
                            branch.unwrap_or_default(),
                            f.converged.to_string(),
                            opt(f.pi_hat),
                            f.loglik.to_string(),
                            sample.n_inside().to_string(),
                            sample.n_outside().to_string(),
                        ]);
                        row.extend(f.theta_hat.mu().iter().map(|x| x.to_string()));
                        row.extend(vech(f.theta_hat.sigma()).iter().map(|x| x.to_string()));
                    }
                    Err(e) => {
                        row.push(format!("error: {e}"));
                        row.resize(head.len(), String::new());
                    }
                }
                out.push_str(&csv_line(&row));
            }
            out
        }
    };
    for (v, _, res) in &results {
        if let Err(e) = res {
            eprintln!("variant {v}: {e}");
        }
    }
    Ok(Output { text, status })
}

pub fn cmd_efficiency(cfg: &RunConfig) -> Result<Output> {
    let eff = cfg.efficiency.as_ref().expect("efficiency settings");
    let budget = McBudget::new(cfg.mc_budget.unwrap_or(50_000), cfg.seed);
    #[derive(Serialize)]
    struct Row {
        family: String,
        p: usize,
        variant: String,
        alpha: Option<f64>,
        component: String,
        efficiency: f64,
        mc_stderr: f64,
    }
    let mut rows = Vec::new();
    for &v in &cfg.variants {
        for &alpha in &eff.alphas {
            for &c in &eff.components {
                let e = efficiency_with(&cfg.family, eff.p, v, alpha, c, &budget, eff.convention)?;
                rows.push(Row {
                    family: cfg.family.to_string(),
                    p: eff.p,
                    variant: v.to_string(),
                    alpha,
                    component: c.to_string(),
                    efficiency: e.value,
                    mc_stderr: e.std_error,
                });
            }
        }
    }
    let text = match cfg.format {
        Format::Json => to_json(&rows),
        Format::Csv => {
            let mut out = csv_line(&["family", "p", "variant", "alpha", "component", "efficiency", "mc_stderr"].map(String::from));
            for r in &rows {
                out.push_str(&csv_line(&[
                    r.family.clone(),
                    r.p.to_string(),
                    r.variant.clone(),
                    r.alpha.map_or("none".into(), |a| a.to_string()),
                    r.component.clone(),
                    r.efficiency.to_string(),
                    r.mc_stderr.to_string(),
                ]));
            }
            out
        }
    };
    Ok(Output { text, status: EXIT_OK })
}

fn plan(cfg: &RunConfig) -> ExperimentPlan {
    let sim = cfg.simulation.as_ref().expect("simulation settings");
    let mut plan = ExperimentPlan::new(sim.scenario, cfg.family, sim.p, sim.n_grid.clone(), sim.replicates, cfg.seed);
    plan.estimator_variants = cfg.variants.clone();
    plan.coverage = cfg.coverage;
    plan.alpha_restrict = cfg.alpha_restrict;
    plan.mc_draws = cfg.mc_budget;
    plan
}

fn render(cfg: &RunConfig, report: &ExperimentReport) -> String {
    match cfg.format {
        Format::Json => to_json(report),
        Format::Csv => report.to_csv(),
    }
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Output> {
    let plan = plan(cfg);
    let report = match cfg.simulation.as_ref().expect("simulation settings").mode {
        SimulationMode::Consistency => run_consistency(&plan)?,
        SimulationMode::Rate => run_rate(&plan)?,
    };
    Ok(Output { text: render(cfg, &report), status: EXIT_OK })
}

pub fn cmd_breakdown(cfg: &RunConfig) -> Result<Output> {
    let sim = cfg.simulation.as_ref().expect("simulation settings");
    let threshold = BlowupThreshold { location: sim.blowup_location, condition: sim.blowup_condition };
    let report = run_breakdown(&plan(cfg), threshold)?;
    Ok(Output { text: render(cfg, &report), status: EXIT_OK })
}
