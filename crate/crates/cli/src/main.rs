use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use molcomm::chem::ReactionNetwork;
use molcomm::demod::{required_moments, uniform_grid, MomentBank};
use molcomm::filtergen::{generate_filter_spec_with, FilterOptions};
use molcomm::harness::{
    self, measure_label, persist_ser, persist_sweep, rerun_manifest, run_ser, run_sweep, ExperimentConfig, SerOutcome, SweepSpec,
};

mod verify;

#[derive(Parser)]
#[command(name = "molcomm", version, about = "Reaction shift keying receiver experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trajectory and write it with its observed histories.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Symbol to send.
        #[arg(long, default_value_t = 0)]
        symbol: usize,
    },
    /// Generate the filter terms for a circuit and measured species.
    Filtergen {
        /// TOML file with `species`, `reactions` and optional `closed` lists.
        #[arg(long, conflicts_with = "config")]
        network: Option<PathBuf>,
        /// Take the circuit from an experiment config instead.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Measured species, comma separated.
        #[arg(long, required = true)]
        measure: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the symbol-conditioned moment tables.
    Moments {
        #[command(flatten)]
        common: Common,
    },
    /// Symbol error rate Monte Carlo.
    Ser {
        #[command(flatten)]
        common: Common,
    },
    /// Symbol error rate over a range of values of one config field.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted field path, e.g. `receiver.lambdas[2]`.
        #[arg(long)]
        path: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
    },
    /// Re-run the experiment recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle checks on small systems.
    Verify {
        /// A quarter of the runs, for a fast smoke check; sampling noise can
        /// then fail a check that passes at full size.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Measurement choice as a comma-separated species list; repeatable.
    #[arg(long)]
    measure: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut value = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?
            .to_value();
        if let Some(seed) = self.seed {
            harness::set_path(&mut value, "run.seed", toml::Value::Integer(seed as i64))?;
        }
        if let Some(trials) = self.trials {
            harness::set_path(&mut value, "run.trials", toml::Value::Integer(trials as i64))?;
        }
        if !self.measure.is_empty() {
            let lists = self
                .measure
                .iter()
                .map(|m| toml::Value::Array(split_list(m).into_iter().map(toml::Value::String).collect()))
                .collect();
            value["demod"]
                .as_table_mut()
                .expect("demod is a table")
                .insert("measure".into(), toml::Value::Array(lists));
        }
        Ok(ExperimentConfig::from_value(value)?)
    }

    fn out_dir(&self, config: &ExperimentConfig, default: &str) -> PathBuf {
        self.out
            .clone()
            .or_else(|| config.run.out.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(default))
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

fn parse_scalar(s: &str) -> toml::Value {
    if let Ok(i) = s.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = s.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = s.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(s.to_string())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    species: Vec<String>,
    reactions: Vec<String>,
    #[serde(default)]
    closed: Vec<String>,
}

fn print_outcome(outcome: &SerOutcome) {
    println!("{:<20} {:>7} {:>7} {:>8}  95% CI", "measure", "trials", "errors", "SER");
    for m in &outcome.measurements {
        println!(
            "{:<20} {:>7} {:>7} {:>8.4}  [{:.4}, {:.4}]",
            measure_label(&m.measured),
            m.trials,
            m.errors,
            m.ser,
            m.ci.lo,
            m.ci.hi
        );
    }
}

fn report_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn filtergen(network: Option<&Path>, config: Option<&Path>, measure: &str, out: Option<&Path>) -> Result<()> {
    let measured = split_list(measure);
    let (net, closed, totals): (ReactionNetwork, Vec<String>, Option<Vec<u64>>) = match (network, config) {
        (Some(path), _) => {
            let file: NetworkFile = toml::from_str(&fs::read_to_string(path)?).with_context(|| format!("parsing {}", path.display()))?;
            (ReactionNetwork::parse(&file.species, &file.reactions)?, file.closed, None)
        }
        (None, Some(path)) => {
            let config = ExperimentConfig::load(path)?;
            let system = config.build_system()?;
            let init = system.initial_state();
            let totals = (0..system.network().n_species())
                .map(|s| init.count(system.rx_voxel(), molcomm::chem::SpeciesId(s)))
                .collect();
            (system.network().clone(), harness::closed_species(&system), Some(totals))
        }
        (None, None) => bail!("filtergen needs --network or --config"),
    };
    let mut spec = generate_filter_spec_with(&net, &measured, &FilterOptions { closed })?;
    if let Some(totals) = totals {
        spec = spec.bind_totals(|s| totals[s.0]);
    }
    let text = spec.render_text();
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("filter.txt"), &text)?;
        fs::write(dir.join("filter.json"), spec.to_json())?;
        report_files(&[dir.join("filter.txt"), dir.join("filter.json")]);
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { common, symbol } => {
            let config = common.load()?;
            let system = config.build_system()?;
            let traj = system.simulate(symbol, config.demod.horizon, config.run.seed)?;
            let dir = common.out_dir(&config, "out/simulate");
            fs::create_dir_all(&dir)?;
            let mut files = vec![dir.join("trajectory.txt")];
            let mut buf = Vec::new();
            traj.write_text(&system, &mut buf)?;
            fs::write(&files[0], buf)?;
            for m in &config.demod.measure {
                let path = dir.join(format!("observed_{}.csv", measure_label(m)));
                let mut buf = Vec::new();
                system.observe(&traj, m)?.write_csv(&mut buf)?;
                fs::write(&path, buf)?;
                files.push(path);
            }
            println!("{} events over {} s", traj.events.len(), traj.horizon);
            report_files(&files);
        }
        Command::Filtergen {
            network,
            config,
            measure,
            out,
        } => filtergen(network.as_deref(), config.as_deref(), &measure, out.as_deref())?,
        Command::Moments { common } => {
            let config = common.load()?;
            let system = config.build_system()?;
            let mut descriptors = std::collections::BTreeSet::new();
            for m in &config.demod.measure {
                descriptors.extend(required_moments(&harness::filter_spec_for(&system, m)?));
            }
            let descriptors: Vec<_> = descriptors.into_iter().collect();
            let grid = uniform_grid(config.demod.horizon, config.demod.moment_steps);
            let bank = MomentBank::estimate(&system, &descriptors, config.demod.moment_runs, &grid, config.run.seed)?;
            let dir = common.out_dir(&config, "out/moments");
            fs::create_dir_all(&dir)?;
            let mut buf = Vec::new();
            bank.write_csv(system.species(), &mut buf)?;
            fs::write(dir.join("moments.csv"), buf)?;
            report_files(&[dir.join("moments.csv")]);
        }
        Command::Ser { common } => {
            let config = common.load()?;
            let result = run_ser(&config)?;
            print_outcome(&result.outcome);
            println!("runtime {:.2} s", result.runtime.as_secs_f64());
            let files = persist_ser(&config, &result, &common.out_dir(&config, "out/ser"))?;
            report_files(&files);
        }
        Command::Sweep { common, path, values } => {
            let config = common.load()?;
            let sweep = SweepSpec {
                path,
                values: split_list(&values).iter().map(|v| parse_scalar(v)).collect(),
            };
            let results = run_sweep(&config, &sweep)?;
            for (v, r) in sweep.values.iter().zip(&results) {
                println!("{} = {v}", sweep.path);
                print_outcome(&r.outcome);
            }
            let files = persist_sweep(&config, &sweep, &results, &common.out_dir(&config, "out/sweep"))?;
            report_files(&files);
        }
        Command::Rerun { manifest, out } => report_files(&rerun_manifest(&manifest, &out)?),
        Command::Verify { quick, seed } => {
            if !verify::run(quick, seed)? {
                bail!("oracle checks failed");
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalars_and_lists() {
        assert_eq!(parse_scalar("10"), toml::Value::Integer(10));
        assert_eq!(parse_scalar("0.5"), toml::Value::Float(0.5));
        assert_eq!(parse_scalar("absorbing"), toml::Value::String("absorbing".into()));
        assert_eq!(split_list("C1, C2,,C3"), ["C1", "C2", "C3"]);
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["molcomm", "ser", "--config", "c.toml", "--measure", "C1", "--measure", "C1,C2", "--trials", "5"]).unwrap();
        match cli.command {
            Command::Ser { common } => {
                assert_eq!(common.measure, ["C1", "C1,C2"]);
                assert_eq!(common.trials, Some(5));
            }
            _ => panic!(),
        }
    }
}
