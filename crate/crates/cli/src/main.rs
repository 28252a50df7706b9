use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use drift_core::admm::{admm_solve, BeliefState};
use drift_core::gp::{GpDump, GpModel};
use drift_core::path::{solve_equilibrium, ReferenceGenerator};
use drift_core::sim::{self, export, export_sweep, friction_sweep, run_closed_loop, SimConfig};
use drift_core::vehicle::{slip_angles, State};
use rand::SeedableRng;

#[derive(Parser)]
#[command(
    name = "drift",
    version,
    about = "Learning-augmented drift control simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the multi-lap closed-loop experiment.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        laps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Print the default configuration as JSON and exit.
        #[arg(long)]
        print_defaults: bool,
    },
    /// Run the experiment for several plant friction values in parallel.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "1.10,1.05,1.00,0.95,0.90"
        )]
        mu: Vec<f64>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Print the drift equilibrium family as CSV.
    Equilibrium {
        #[arg(long, default_value_t = -20.0, allow_hyphen_values = true)]
        delta_deg: f64,
        /// Radii as start:end:count.
        #[arg(long, default_value = "20:45:26")]
        radius: String,
        /// Trained GP dump whose mean joins the model.
        #[arg(long)]
        gp: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        ts: f64,
    },
    /// Build and fit a GP from an exported trace.
    GpFit {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = drift_core::gp::DEFAULT_CAPACITY)]
        capacity: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Solve a single OCP from a given state and print diagnostics.
    SolveOcp {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Initial state as V,beta,r.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        state: Vec<f64>,
        /// Reference radius (m).
        #[arg(long, default_value_t = 20.0)]
        radius: f64,
        #[arg(long)]
        gp: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<SimConfig> {
    match path {
        Some(p) => SimConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(SimConfig::default()),
    }
}

fn load_gp(path: Option<&PathBuf>) -> Result<Option<GpModel>> {
    path.map(|p| {
        let dump: GpDump = sim::export::read_json(p)?;
        Ok(GpModel::from_dump(&dump)?)
    })
    .transpose()
}

fn parse_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [start, end, count] = parts.as_slice() else {
        bail!("expected start:end:count, got '{spec}'");
    };
    let (start, end): (f64, f64) = (start.parse()?, end.parse()?);
    let count: usize = count.parse()?;
    if count == 0 {
        bail!("count must be positive");
    }
    if count == 1 {
        return Ok(vec![start]);
    }
    Ok((0..count)
        .map(|i| start + (end - start) * i as f64 / (count - 1) as f64)
        .collect())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Simulate {
            config,
            out,
            laps,
            seed,
            print_defaults,
        } => {
            if print_defaults {
                println!("{}", serde_json::to_string_pretty(&SimConfig::default())?);
                return Ok(());
            }
            let mut cfg = load_config(config.as_ref())?;
            if let Some(l) = laps {
                cfg.laps = l;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let result = run_closed_loop(&cfg)?;
            export(&result, &cfg, &out)?;
            for m in &result.laps {
                println!(
                    "lap {}: rmse {:.4} m, max {:.4} m, cost {:.4}, prediction error {:.5}, solve {:.2} ms{}",
                    m.lap,
                    m.rmse_lateral,
                    m.max_lateral,
                    m.avg_cost,
                    m.avg_prediction_error,
                    m.avg_solve_time_ms,
                    if m.failed { " (failed)" } else { "" }
                );
            }
        }
        Command::Sweep { config, mu, out } => {
            let cfg = load_config(config.as_ref())?;
            let scenarios = friction_sweep(&cfg, &mu)?;
            export_sweep(&scenarios, &out)?;
            for s in &scenarios {
                let failed: Vec<usize> =
                    s.laps.iter().filter(|m| m.failed).map(|m| m.lap).collect();
                match &s.error {
                    Some(e) => println!("mu {:.2}: error {e}", s.mu),
                    None => println!(
                        "mu {:.2}: {} laps, failed laps {:?}",
                        s.mu,
                        s.laps.len(),
                        failed
                    ),
                }
            }
        }
        Command::Equilibrium {
            delta_deg,
            radius,
            gp,
            ts,
        } => {
            let p = drift_core::vehicle::VehicleParams::default();
            let gp = load_gp(gp.as_ref())?;
            println!("R,V,beta,r,delta,Fxr,alpha_r,residual");
            for r_eq in parse_range(&radius)? {
                let eq = solve_equilibrium(delta_deg.to_radians(), r_eq, &p, gp.as_ref(), ts)?;
                let (_, alpha_r) = slip_angles(&eq.x_eq, &eq.u_eq, &p)?;
                println!(
                    "{},{},{},{},{},{},{},{:e}",
                    r_eq,
                    eq.x_eq.v,
                    eq.x_eq.beta,
                    eq.x_eq.r,
                    eq.u_eq.delta,
                    eq.u_eq.fxr,
                    alpha_r,
                    eq.residual
                );
            }
        }
        Command::GpFit {
            trace,
            out,
            capacity,
            seed,
        } => {
            let records = sim::read_trace_csv(&trace)?;
            if records.is_empty() {
                bail!("trace {} holds no records", trace.display());
            }
            let mut gp = GpModel::new(capacity);
            for r in &records {
                let nominal = State::new(r.v_nom, r.beta_nom, r.r_nom);
                gp.record_transition(&r.state(), &r.control(), &r.next_state(), &nominal);
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            gp.update(true, &mut rng)?;
            sim::export::write_json(&out, &gp.to_dump())?;
            for (d, dim) in gp.dims.iter().enumerate() {
                println!("dim {d}: {} points, {:?}", dim.dictionary.len(), dim.hyper);
            }
        }
        Command::SolveOcp {
            config,
            state,
            radius,
            gp,
        } => {
            let cfg = load_config(config.as_ref())?;
            let [v, beta, r] = state.as_slice() else {
                bail!("--state expects V,beta,r");
            };
            let gp = load_gp(gp.as_ref())?.unwrap_or_else(|| GpModel::new(cfg.gp_capacity));
            let mut refs_gen = ReferenceGenerator::new(cfg.vehicle, cfg.delta_eq, cfg.ts);
            let reference =
                refs_gen.make_reference(1.0 / radius, gp.is_trained().then_some(&gp))?;
            let refs = vec![reference; cfg.controller.horizon];
            let b0 = BeliefState::certain(State::new(*v, *beta, *r));
            let out = admm_solve(&b0, &refs, &gp, &cfg.vehicle, cfg.ts, &cfg.controller, None)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "control": out.control,
                    "reference": { "x_ref": reference.x_ref, "u_ref": reference.u_ref },
                    "diagnostics": out.diagnostics,
                }))?
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::parse_range;

    #[test]
    fn range_includes_both_ends() {
        assert_eq!(
            parse_range("20:45:6").unwrap(),
            vec![20.0, 25.0, 30.0, 35.0, 40.0, 45.0]
        );
        assert_eq!(parse_range("30:40:1").unwrap(), vec![30.0]);
    }

    #[test]
    fn malformed_range_is_rejected() {
        for bad in ["20:45", "a:b:3", "20:45:0", "1:2:3:4"] {
            assert!(parse_range(bad).is_err(), "{bad}");
        }
    }
}
