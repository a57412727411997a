use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cuspad::classifier::{self, DecisionTree};
use cuspad::dynamics_sim::{self, DatasetManifest, ScenarioCounts};
use cuspad::experiment::{self, ExperimentConfig, PlacementConfig, ReproduceOptions};
use cuspad::features::{self, FeatureMode};
use cuspad::measurement::{self, ChannelErrorModel};
use cuspad::placement::{self, PlacementProblem, SolveMode};
use cuspad::{seed, NetworkModel};

#[derive(Parser)]
#[command(name = "cuspad", version, about = "Islanding detection experiments with AD and CUSPAD features")]
struct Cli {
    /// Experiment config JSON; missing fields take the preset of its network.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ad,
    Cuspad,
}

impl From<Mode> for FeatureMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Ad => FeatureMode::Ad,
            Mode::Cuspad => FeatureMode::Cuspad,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Solver {
    Exact,
    Greedy,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a labeled scenario dataset.
    Generate {
        #[arg(long)]
        network: Option<String>,
        #[arg(long)]
        wind: Option<f64>,
        #[arg(long)]
        islanding: Option<usize>,
        #[arg(long)]
        non_islanding: Option<usize>,
    },
    /// Write corrupted measurements for every record of a dataset.
    Inject {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        instr_range: f64,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Write a feature matrix CSV (clean unless --instr-range is given).
    Features {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        instr_range: Option<f64>,
    },
    /// Train a tree on clean features and write it as JSON.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Accuracy grid over wind fractions, error levels and modes.
    Evaluate {
        /// Cache datasets under this directory.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// DULR placement.
    Place {
        #[arg(long)]
        network: Option<String>,
        #[arg(long, value_enum, default_value = "exact")]
        mode: Solver,
        #[arg(long, default_value_t = 1.0)]
        substation_cost: f64,
        #[arg(long, default_value_t = 0.1)]
        dulr_cost: f64,
        /// Only an endpoint at the bus itself observes it.
        #[arg(long)]
        strict: bool,
    },
    /// CUSPAD accuracy against window size.
    SweepWindow {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Run every experiment and write the report directory.
    Reproduce {
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Run twice and require byte-identical reports.
        #[arg(long)]
        verify: bool,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_json_file(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::net18(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns whether every requested check passed.
fn run(cli: Cli) -> Result<bool> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    let mut cfg = load_config(&cli)?;
    let out = cli.out.clone();
    match cli.cmd {
        Cmd::Generate {
            network,
            wind,
            islanding,
            non_islanding,
        } => {
            if let Some(n) = network {
                cfg.network = n;
            }
            let counts = ScenarioCounts {
                islanding: islanding.unwrap_or(cfg.counts.islanding),
                non_islanding: non_islanding.unwrap_or(cfg.counts.non_islanding),
            };
            cfg.counts = counts;
            let wind = wind.unwrap_or(cfg.wind_fractions[0]);
            let net = NetworkModel::resolve(&cfg.network)?;
            let buses = experiment::resolve_pmu_buses(&cfg, &net)?;
            let records = dynamics_sim::generate_scenarios(&net, &cfg.scenario_config(wind, buses.clone()))?;
            let manifest = DatasetManifest {
                network: net.name.clone(),
                seed: cfg.seed,
                wind_fraction: wind,
                counts,
                non_islanding_mix: vec!["line_trip".into(), "generator_trip".into(), "bus_fault".into()],
                recorded_buses: buses,
                records: records.len(),
                config_hash: experiment::dataset_hash(&cfg, wind, &records[0].traces.keys().copied().collect::<Vec<_>>()),
            };
            dynamics_sim::save_dataset(&out, &manifest, &records)?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Cmd::Inject {
            dataset,
            instr_range,
            sigma,
        } => {
            let (_, records) = dynamics_sim::load_dataset(&dataset)?;
            let model = ChannelErrorModel::new(sigma.unwrap_or(cfg.pmu_sigma), instr_range)?;
            for rec in &records {
                let ms = measurement::inject_errors(rec, &model, classifier::trial_seed(cfg.seed, 0, rec.id));
                measurement::save_measured(&out.join(format!("record_{:05}", rec.id)), &ms, &model)?;
            }
            println!("wrote measurements for {} records to {}", records.len(), out.display());
        }
        Cmd::Features {
            dataset,
            mode,
            window,
            instr_range,
        } => {
            let (_, records) = dynamics_sim::load_dataset(&dataset)?;
            let opts = cfg.feature_options(mode.into(), window.unwrap_or(cfg.window));
            let fvs: Vec<_> = match instr_range {
                None => classifier::clean_features(&records, &opts).0,
                Some(r) => {
                    let model = cfg.error_model(r)?;
                    records
                        .iter()
                        .map(|rec| {
                            let ms = measurement::inject_errors(rec, &model, classifier::trial_seed(cfg.seed, 0, rec.id));
                            features::extract_features(&ms, &opts)
                        })
                        .collect()
                }
            };
            let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
            mkdir(&out)?;
            let path = out.join(format!("features_{}.csv", opts.mode.name().to_lowercase()));
            features::write_feature_csv(&path, &fvs, &labels)?;
            println!("wrote {}", path.display());
        }
        Cmd::Train {
            dataset,
            mode,
            window,
            depth,
        } => {
            let (manifest, records) = dynamics_sim::load_dataset(&dataset)?;
            let opts = cfg.feature_options(mode.into(), window.unwrap_or(cfg.window));
            let mut cfg = cfg.clone();
            if let Some(d) = depth {
                cfg.max_depth = d;
            }
            let tree: DecisionTree =
                experiment::train_trees(&cfg, &records, manifest.wind_fraction, &[opts])?.remove(0);
            let (fvs, labels) = classifier::clean_features(&records, &opts);
            let x: Vec<Vec<f64>> = fvs.iter().map(|f| f.values.clone()).collect();
            mkdir(&out)?;
            let path = out.join(format!("tree_{}.json", opts.mode.name().to_lowercase()));
            dynamics_sim::write_json(&path, &tree)?;
            println!(
                "depth {} leaves {} accuracy on true angles {:.2}% -> {}",
                tree.depth(),
                tree.leaves(),
                100.0 * tree.accuracy(&x, &labels)?,
                path.display()
            );
        }
        Cmd::Evaluate { cache } => {
            let grid = experiment::run_accuracy_grid(&cfg, cache.as_deref())?;
            mkdir(&out)?;
            dynamics_sim::write_json(&out.join("grid.json"), &grid)?;
            for w in grid.wind_fractions() {
                println!("{} wind {w} (config {})", grid.network, grid.config_hash);
                println!("{}", experiment::format_table(&grid, w));
            }
        }
        Cmd::Place {
            network,
            mode,
            substation_cost,
            dulr_cost,
            strict,
        } => {
            let net = NetworkModel::resolve(network.as_deref().unwrap_or(&cfg.network))?;
            let p = PlacementProblem::from_network(&net, substation_cost, dulr_cost, strict)?;
            let sol = match mode {
                Solver::Exact => placement::solve_placement(&p, SolveMode::Exact),
                Solver::Greedy => placement::solve_placement(&p, SolveMode::Greedy),
            };
            let ok = placement::verify_observability(&sol, &p);
            mkdir(&out)?;
            let pc = PlacementConfig {
                substation_cost,
                dulr_cost,
                strict,
                ..PlacementConfig::default()
            };
            let path = out.join(format!("placement_{}.json", net.name));
            dynamics_sim::write_json(
                &path,
                &serde_json::json!({
                    "network": net.name,
                    "config": pc,
                    "observable": ok,
                    "solution": sol,
                }),
            )?;
            println!("{}", placement::summary(&p, &sol));
            println!("PMU buses: {:?}", sol.pmu_buses);
            println!("observable: {ok}");
            return Ok(ok);
        }
        Cmd::SweepWindow { sizes, cache } => {
            let sizes = sizes.unwrap_or_else(|| cfg.window_sweep.clone());
            let sweep = experiment::run_window_sweep(&cfg, &sizes, cache.as_deref())?;
            mkdir(&out)?;
            dynamics_sim::write_json(&out.join("window_sweep.json"), &sweep)?;
            println!("window,mean_accuracy,ci95_halfwidth");
            for (w, r) in &sweep.entries {
                println!("{w},{:.4},{:.4}", r.mean_accuracy, r.ci95_halfwidth);
            }
        }
        Cmd::Reproduce { cache, verify } => {
            let seed_value = cli.seed.unwrap_or(cfg.seed);
            let opts = ReproduceOptions {
                seed: seed_value,
                out: out.clone(),
                cache: cache.clone(),
            };
            let mut progress = |s: &str| eprintln!("reproduce: {s}");
            let outcome = experiment::reproduce_all(&opts, &mut progress)?;
            let mut ok = outcome.all_passed();
            let mut verdict = None;
            if verify {
                let second = out.with_file_name(format!(
                    "{}.verify-{:x}",
                    out.file_name().and_then(|s| s.to_str()).unwrap_or("out"),
                    seed::derive(seed_value, &[]) & 0xffff
                ));
                let again = ReproduceOptions {
                    out: second.clone(),
                    ..opts.clone()
                };
                experiment::reproduce_all(&again, &mut progress)?;
                let same = experiment::snapshot_dir(&out)? == experiment::snapshot_dir(&second)?;
                std::fs::remove_dir_all(&second).ok();
                ok &= same;
                verdict = Some(same);
            }
            for c in &outcome.checks {
                println!("{}", c.line());
            }
            match verdict {
                Some(true) => println!("[PASS] 9. determinism: second run matches the first byte for byte"),
                Some(false) => println!("[FAIL] 9. determinism: second run differs from the first"),
                None => println!("[----] 9. determinism: not run; pass --verify"),
            }
            if !ok {
                report_failures(&outcome);
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn report_failures(outcome: &experiment::ReproduceOutcome) {
    let failed: Vec<String> = outcome
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.id.to_string())
        .collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {}", failed.join(", "));
    }
}
