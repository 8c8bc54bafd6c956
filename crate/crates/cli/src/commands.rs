use std::fs;
use std::path::Path;
use std::sync::Arc;

use csa2sls::criterion::{default_lambda, oracle_mse, oracle_mse_irrelevant, select_k_with_basis};
use csa2sls::simulation::{DesignGrid, MethodSpec, OneOrMany};
use csa2sls::{
    confidence_interval, csa_2sls, estimate_all, load_csv, preliminary_fit, run_design, CsaConfig,
    DataSet, EstimationResult, InstrumentBasis, Method, OracleInputs, SamplingConfig,
    SimulationReport, SimulationSettings,
};
use log::info;
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::CliError;

const DEFAULT_METHODS: [&str; 4] = ["ols", "2sls", "dn", "csa"];

fn provenance(cfg: &RunConfig) {
    info!(
        "csa2sls {} config {} seed {}",
        env!("CARGO_PKG_VERSION"),
        cfg.hash(),
        cfg.seed()
    );
}

fn set_jobs(jobs: Option<usize>) -> Result<(), CliError> {
    match jobs {
        Some(0) => Err(CliError::Config("--jobs must be positive".into())),
        Some(j) => {
            // A second call in the same process keeps the first pool.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build_global();
            Ok(())
        }
        None => Ok(()),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("cannot write {}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    let out = cfg.require_out()?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    Ok(out)
}

fn load(cfg: &RunConfig) -> Result<DataSet, CliError> {
    let schema = cfg.resolve_schema()?;
    let ds = load_csv(cfg.require_data()?, &schema)?;
    info!(
        "loaded N = {}, {} endogenous, {} exogenous, {} instruments",
        ds.n(),
        ds.d1(),
        ds.d2(),
        ds.instrument_count()
    );
    Ok(ds)
}

fn method_specs(cfg: &RunConfig) -> Result<Vec<MethodSpec>, CliError> {
    let names: Vec<String> = match &cfg.methods {
        Some(m) => m.clone(),
        None => DEFAULT_METHODS.iter().map(|s| s.to_string()).collect(),
    };
    if names.is_empty() {
        return Err(CliError::Config("no methods requested".into()));
    }
    names.iter().map(|s| Ok(s.parse()?)).collect()
}

fn csa_config(cfg: &RunConfig) -> CsaConfig {
    CsaConfig {
        lambda: cfg.lambda.clone().map(DVector::from_vec),
        sampling: SamplingConfig {
            draws: cfg
                .subsets_r
                .map_or(Some(csa2sls::subsets::DEFAULT_DRAWS), |d| d.as_option()),
            seed: cfg.seed(),
            ..Default::default()
        },
        fixed_k: cfg.fixed_k,
        preliminary_k: cfg.preliminary_k,
    }
}

fn level(cfg: &RunConfig) -> Result<f64, CliError> {
    let l = cfg.level.unwrap_or(0.95);
    if l > 0.0 && l < 1.0 {
        Ok(l)
    } else {
        Err(CliError::Config(format!(
            "level must lie in (0, 1), got {l}"
        )))
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn estimate(cfg: &RunConfig) -> Result<(), CliError> {
    provenance(cfg);
    set_jobs(cfg.jobs)?;
    let specs = method_specs(cfg)?;
    let level = level(cfg)?;
    let ds = load(cfg)?;
    let out = out_dir(cfg)?;
    let base = csa_config(cfg);

    // Plain methods share one basis and preliminary fit; `csa.<k>` runs alone.
    let plain: Vec<Method> = specs
        .iter()
        .filter(|s| s.fixed_k.is_none())
        .map(|s| s.method)
        .collect();
    let mut shared = estimate_all(&ds, &plain, &base)?.into_iter();
    let mut results: Vec<(String, EstimationResult)> = Vec::new();
    for spec in &specs {
        let r = match spec.fixed_k {
            None => shared.next().expect("one result per plain method"),
            Some(k) => csa_2sls(
                &ds,
                &CsaConfig {
                    fixed_k: Some(k),
                    ..base.clone()
                },
            )?,
        };
        info!("{}: k_hat = {:?}", spec.label, r.k_hat);
        results.push((spec.label.clone(), r));
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record([
        "method",
        "coefficient",
        "estimate",
        "se",
        "ci_lower",
        "ci_upper",
        "k_hat",
        "subsets_used",
    ])
    .map_err(csv_err)?;
    let mut detail = Vec::new();
    for (label, r) in &results {
        let ci = confidence_interval(r, level)?;
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for (j, name) in r.names.iter().enumerate() {
            let se = r.se.as_ref().map(|s| s[j].to_string()).unwrap_or_default();
            w.write_record([
                label.clone(),
                name.clone(),
                r.beta_hat[j].to_string(),
                se,
                ci[j].lower.to_string(),
                ci[j].upper.to_string(),
                opt(r.k_hat),
                opt(r.subsets_used),
            ])
            .map_err(csv_err)?;
        }
        detail.push(json!({
            "label": label,
            "method": r.method.label(),
            "names": r.names,
            "beta_hat": r.beta_hat.as_slice(),
            "se": r.se.as_ref().map(|s| s.as_slice().to_vec()),
            "vcov": r.vcov.as_ref().map(matrix_rows),
            "k_hat": r.k_hat,
            "subsets_used": r.subsets_used,
            "criterion_curve": r.criterion_curve,
        }));
    }
    let csv_bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&out.join("estimates.csv"), &csv_bytes)?;
    let doc = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": cfg.hash(),
        "seed": cfg.seed(),
        "n": ds.n(),
        "instruments": ds.instrument_count(),
        "level": level,
        "clustered": ds.clusters().is_some(),
        "results": detail,
    });
    write_json(&out.join("estimates.json"), &doc)?;
    print!("{}", String::from_utf8_lossy(&csv_bytes));
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    provenance(cfg);
    set_jobs(cfg.jobs)?;
    let design = cfg.design.clone().ok_or_else(|| {
        CliError::Config("a design is required (config key `design` or --n/--k/...)".into())
    })?;
    let mut grid: DesignGrid = serde_json::from_value(Value::Object(design))
        .map_err(|e| CliError::Config(format!("design: {e}")))?;
    if let Some(r) = cfg.subsets_r {
        grid.subsets_r = OneOrMany::One(r);
    }
    let methods = match &cfg.methods {
        Some(_) => method_specs(cfg)?,
        None => MethodSpec::standard(),
    };
    let reps = cfg.reps.unwrap_or(1000);
    if reps == 0 {
        return Err(CliError::Config("--reps must be positive".into()));
    }
    let level = level(cfg)?;
    let cells = grid.cells();
    for cell in &cells {
        cell.config.validate()?;
    }
    let out = out_dir(cfg)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record(SimulationReport::CSV_HEADER)
        .map_err(csv_err)?;
    let mut text = String::new();
    for (i, cell) in cells.iter().enumerate() {
        let mut config = cell.config;
        config.seed = cfg.seed();
        let settings = SimulationSettings {
            reps,
            jobs: cfg.jobs,
            methods: methods.clone(),
            draws: cell.draws,
            level,
            track_oracle: methods
                .iter()
                .any(|m| m.method == Method::Csa && m.fixed_k.is_none()),
            ..Default::default()
        };
        info!(
            "cell {}/{}: N={} K={} rho_z={} sigma_ueps={} rf2={} signal={} R={}",
            i + 1,
            cells.len(),
            config.n,
            config.k,
            config.rho_z,
            config.sigma_ueps,
            config.rf2,
            config.signal,
            cell.draws
        );
        let report = run_design(&config, &settings)?;
        report.write_csv_rows(&mut w)?;
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&report.text_table());
    }
    let csv_bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&out.join("simulation.csv"), &csv_bytes)?;
    write_file(&out.join("simulation.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

/// Population quantities for the oracle column.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthFile {
    /// Reduced form, one row per observation.
    f: Vec<Vec<f64>>,
    sigma2_eps: f64,
    sigma_ueps: Vec<f64>,
    #[serde(default)]
    relevant: Option<Vec<bool>>,
}

fn read_truth(path: &Path, ds: &DataSet) -> Result<OracleInputs, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read truth {}: {e}", path.display())))?;
    let t: TruthFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("truth {}: {e}", path.display())))?;
    let d = ds.d();
    if t.f.len() != ds.n() || t.f.iter().any(|r| r.len() != d) || t.sigma_ueps.len() != d {
        return Err(CliError::Config(format!(
            "truth {} must hold an {} x {d} reduced form and {d} covariances",
            path.display(),
            ds.n()
        )));
    }
    Ok(OracleInputs {
        f: DMatrix::from_fn(ds.n(), d, |i, j| t.f[i][j]),
        sigma2_eps: t.sigma2_eps,
        sigma_ueps: DVector::from_vec(t.sigma_ueps),
        relevant: t.relevant,
    })
}

pub fn criterion(cfg: &RunConfig) -> Result<(), CliError> {
    provenance(cfg);
    set_jobs(cfg.jobs)?;
    let ds = load(cfg)?;
    let oracle = cfg
        .truth
        .as_deref()
        .map(|p| read_truth(p, &ds))
        .transpose()?;
    let out = out_dir(cfg)?;
    let csa = csa_config(cfg);
    let lambda = csa.lambda.clone().unwrap_or_else(|| default_lambda(ds.d()));
    let basis = Arc::new(InstrumentBasis::new(&ds)?);
    let pre = preliminary_fit(&ds, cfg.preliminary_k)?;
    let sel = select_k_with_basis(&ds, &basis, &pre, &lambda, &csa.sampling)?;
    let curve = &sel.curve;

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Data(e.to_string());
    let mut header = vec!["k", "criterion", "selected"];
    if oracle.is_some() {
        header.push("oracle");
    }
    w.write_record(&header).map_err(csv_err)?;
    for (i, (&k, &v)) in curve.k_grid.iter().zip(&curve.values).enumerate() {
        let mut row = vec![
            k.to_string(),
            v.to_string(),
            u8::from(k == curve.k_hat).to_string(),
        ];
        if let Some(ora) = &oracle {
            let s = match ora.relevant {
                Some(_) => {
                    let plan = csa.sampling.plan(ds.instrument_count(), k)?;
                    oracle_mse_irrelevant(ora, &ds, &plan, &lambda)?
                }
                None => oracle_mse(ora, &sel.projections[i], &lambda, ds.n())?,
            };
            row.push(s.to_string());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let csv_bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&out.join("criterion.csv"), &csv_bytes)?;
    info!("preliminary k = {}, k_hat = {}", pre.mallows_k, curve.k_hat);
    println!("k_hat = {}", curve.k_hat);
    Ok(())
}
