//! Runs one simulation design and prints the summary table.
//!
//! ```text
//! cargo run --release --example monte_carlo -- N K rho_z sigma_ueps rf2 signal reps [R]
//! ```

use std::time::Instant;

use csa2sls::simulation::{FlatNormalization, SimulationSettings, SubsetDraws};
use csa2sls::{run_design, DgpConfig, SignalShape};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 7 {
        eprintln!("usage: monte_carlo N K rho_z sigma_ueps rf2 flat|flat_independent|decreasing|half_zero reps [R|all]");
        std::process::exit(2);
    }
    let signal = match args[5].as_str() {
        "flat" | "flat_independent" => SignalShape::Flat,
        "decreasing" => SignalShape::Decreasing,
        "half_zero" => SignalShape::HalfZero,
        other => return Err(format!("unknown signal {other}").into()),
    };
    let mut cfg = DgpConfig::new(
        args[0].parse()?,
        args[1].parse()?,
        args[2].parse()?,
        args[3].parse()?,
        args[4].parse()?,
        signal,
    );
    if args[5] == "flat_independent" {
        cfg.flat_normalization = FlatNormalization::Independent;
    }
    let draws: SubsetDraws = args
        .get(7)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(SubsetDraws::Count(1000));
    let settings = SimulationSettings {
        reps: args[6].parse()?,
        draws,
        track_oracle: true,
        ..Default::default()
    };
    let start = Instant::now();
    let report = run_design(&cfg, &settings)?;
    print!("{}", report.text_table());
    for r in &report.rows {
        if let Some(ratio) = r.mean_oracle_ratio {
            println!("{}: mean oracle ratio {ratio:.4}", r.method);
        }
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
