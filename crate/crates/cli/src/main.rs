//! `skyharvest` — command-line front end for the UAV data-harvesting
//! simulator: scenario generation, policy training, evaluation, standalone
//! localization, and plot-ready exports.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 invariant
//! violation, 1 I/O or other failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use skyharvest_core::channel_model::ChannelNet;
use skyharvest_core::dqn::QNetwork;
use skyharvest_core::localizer::{localize_all, refine_localize, PsoParams};
use skyharvest_core::radio::read_measurements_csv;
use skyharvest_core::scenario::{generate_scenario, GenSpec};
use skyharvest_core::trainer::{
    evaluate_policy, run, write_localization_csv, write_run, Algo, LocalizationRow,
};
use skyharvest_core::{Error, GroundPoint, Result, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "skyharvest",
    version,
    about = "UAV data-harvesting trajectory design: scenario generation, \
             (model-aided) deep Q-learning, evaluation, and exports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario configuration file (city, nodes, mission, training
    /// parameters) from a seed.
    GenScenario {
        /// Master seed; all randomness in the scenario and any later run
        /// derives from it.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Total number of ground nodes.
        #[arg(long, default_value_t = 6)]
        nodes: usize,
        /// Number of anchor nodes (known positions), placed first.
        #[arg(long, default_value_t = 2)]
        anchors: usize,
        /// Output TOML path.
        #[arg(long, default_value = "scenario.toml")]
        out: PathBuf,
    },
    /// Train a trajectory policy and write all run artifacts.
    Train {
        /// Scenario configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Training pipeline: model-aided, baseline, or oracle.
        #[arg(long, default_value = "model-aided")]
        algo: String,
        /// Output directory for the run artifacts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved Q-network with the greedy policy in the real world.
    Evaluate {
        /// Scenario configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Saved Q-network (q_network.json from a run directory).
        #[arg(long)]
        network: PathBuf,
        /// Number of evaluation episodes.
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Optional path for the greedy trajectory JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run node localization on a completed model-aided run: a fresh
    /// full-measurement swarm plus deterministic refinement seeded by the
    /// run's estimate history.
    Localize {
        /// Completed model-aided run directory (needs config.toml,
        /// channel_net.json, measurements.csv).
        run: PathBuf,
        /// Output CSV path (default: <run>/localization_full.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Swarm size.
        #[arg(long)]
        particles: Option<usize>,
        /// Swarm iterations.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Export plot-ready CSVs (learning curves, city, nodes, trajectory)
    /// from one or more completed run directories.
    ExportPlots {
        /// A run directory, or a directory whose children are run
        /// directories.
        dir: PathBuf,
        /// Output directory (default: <dir>/plots).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Domain(_) => 2,
        Error::Invariant(_) => 3,
        Error::Io(_) => 1,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenScenario {
            seed,
            nodes,
            anchors,
            out,
        } => gen_scenario(seed, nodes, anchors, &out),
        Command::Train { config, algo, out } => train(&config, &algo, &out),
        Command::Evaluate {
            config,
            network,
            episodes,
            out,
        } => evaluate(&config, &network, episodes, out.as_deref()),
        Command::Localize {
            run,
            out,
            particles,
            iterations,
        } => localize(&run, out.as_deref(), particles, iterations),
        Command::ExportPlots { dir, out } => export_plots(&dir, out.as_deref()),
    }
}

fn gen_scenario(seed: u64, nodes: usize, anchors: usize, out: &Path) -> Result<()> {
    let spec = GenSpec {
        node_count: nodes,
        anchor_count: anchors,
        ..GenSpec::default()
    };
    let config = generate_scenario(seed, &spec)?;
    config.save(out)?;
    println!(
        "wrote scenario seed={seed} nodes={nodes} anchors={anchors} -> {}",
        out.display()
    );
    Ok(())
}

fn train(config_path: &Path, algo: &str, out: &Path) -> Result<()> {
    let config = ScenarioConfig::load(config_path)?;
    let algo: Algo = algo.parse()?;
    log::info!("training {} on {}", algo.name(), config_path.display());
    let result = run(&config, algo)?;
    write_run(out, &config, &result)?;
    let real = result.real_episodes.len();
    let last_real = result
        .rows
        .iter()
        .rev()
        .find(|r| r.kind == skyharvest_core::trainer::EpisodeKind::Real);
    println!(
        "{}: {} real episodes, {} real transitions, {} simulated transitions, {:.1}s",
        algo.name(),
        real,
        result.real_transitions,
        result.sim_transitions_from_model + result.sim_transitions_from_truth,
        result.wall_seconds
    );
    if let Some(row) = last_real {
        println!(
            "final real episode: collected {:.3}, reward {:.3}",
            row.total_collected, row.total_reward
        );
    }
    println!("artifacts -> {}", out.display());
    Ok(())
}

fn evaluate(config_path: &Path, network: &Path, episodes: usize, out: Option<&Path>) -> Result<()> {
    let config = ScenarioConfig::load(config_path)?;
    let q = QNetwork::load(network)?;
    let (summary, records) = evaluate_policy(&q, &config, episodes)?;
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::config(format!("serializing evaluation summary: {e}")))?;
    println!("{text}");
    if let Some(path) = out {
        let traj = records
            .first()
            .map(|r| r.to_json())
            .unwrap_or(serde_json::Value::Null);
        std::fs::write(path, format!("{:#}\n", traj))?;
        println!("greedy trajectory -> {}", path.display());
    }
    Ok(())
}

fn localize(
    run_dir: &Path,
    out: Option<&Path>,
    particles: Option<usize>,
    iterations: Option<usize>,
) -> Result<()> {
    let config = ScenarioConfig::load(&run_dir.join("config.toml"))?;
    let net = ChannelNet::load(&run_dir.join("channel_net.json"))?;
    let measurements = read_measurements_csv(&run_dir.join("measurements.csv"))?;
    let mut params = PsoParams {
        max_measurements: 0, // full budget: use every measurement
        ..PsoParams::default()
    };
    if let Some(p) = particles {
        params.particles = p;
    }
    if let Some(i) = iterations {
        params.iterations = i;
    }
    let mut by_node: Vec<Vec<_>> = vec![Vec::new(); config.nodes.positions.len()];
    for m in &measurements {
        if !config.nodes.is_anchor(m.node) {
            by_node[m.node].push(m.clone());
        }
    }
    let outcome = localize_all(
        &net,
        &by_node,
        &config.map,
        &config.nodes,
        None,
        config.channel.los.sigma_db,
        config.channel.nlos.sigma_db,
        &params,
        config.seed,
        u64::MAX >> 22, // a round index no training run reaches
    )?;
    // The per-round estimate history (when present) seeds the deterministic
    // refinement: the true-position likelihood minimum is far too narrow for
    // a cold swarm to find reliably, but the training rounds visit it often.
    let history = read_history(&run_dir.join("localization.csv"));
    let mut rows = Vec::new();
    for k in 0..config.nodes.positions.len() {
        let truth = config.nodes.positions[k];
        let mut est = outcome.nodes.positions[k];
        let mut score = outcome.scores[k];
        if !config.nodes.known[k] && !by_node[k].is_empty() {
            let mut candidates: Vec<GroundPoint> =
                history.get(&k).cloned().unwrap_or_default();
            candidates.push(est);
            let (fine, fine_score) = refine_localize(
                &net,
                &by_node[k],
                &config.map,
                &candidates,
                config.channel.los.sigma_db,
                config.channel.nlos.sigma_db,
                &config.hyper.final_refine,
            )?;
            est = fine;
            score = Some(fine_score);
        }
        rows.push(LocalizationRow {
            round: 0,
            node_id: k,
            est_x: est.x,
            est_y: est.y,
            true_x: truth.x,
            true_y: truth.y,
            error_m: est.distance(&truth),
            score,
        });
        if !config.nodes.known[k] {
            println!(
                "node {k}: estimated ({:.1}, {:.1}), true ({:.1}, {:.1}), error {:.1} m",
                est.x, est.y, truth.x, truth.y,
                est.distance(&truth)
            );
        }
    }
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("localization_full.csv"));
    write_localization_csv(&out_path, &rows)?;
    println!("localization -> {}", out_path.display());
    Ok(())
}

/// Per-node estimate history from a run's localization.csv. Missing or
/// malformed files yield an empty history — refinement then starts from the
/// fresh swarm estimate alone.
fn read_history(path: &Path) -> std::collections::HashMap<usize, Vec<GroundPoint>> {
    let mut by_node: std::collections::HashMap<usize, Vec<GroundPoint>> =
        std::collections::HashMap::new();
    let Ok(text) = std::fs::read_to_string(path) else {
        return by_node;
    };
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            continue;
        }
        if let (Ok(node), Ok(x), Ok(y)) = (
            fields[1].parse::<usize>(),
            fields[2].parse::<f64>(),
            fields[3].parse::<f64>(),
        ) {
            by_node.entry(node).or_default().push(GroundPoint { x, y });
        }
    }
    by_node
}

/// A run directory is recognized by its learning_curve.csv.
fn discover_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("learning_curve.csv").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.join("learning_curve.csv").is_file() {
                runs.push(path);
            }
        }
    }
    runs.sort();
    Ok(runs)
}

fn run_algo_name(run: &Path) -> Option<String> {
    let meta = std::fs::read_to_string(run.join("run_meta.json")).ok()?;
    let value: serde_json::Value = serde_json::from_str(&meta).ok()?;
    value["algo"].as_str().map(str::to_owned)
}

fn export_plots(dir: &Path, out: Option<&Path>) -> Result<()> {
    let runs = discover_runs(dir)?;
    if runs.is_empty() {
        return Err(Error::config(format!(
            "{}: no completed run directories found (expected learning_curve.csv)",
            dir.display()
        )));
    }
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join("plots"));
    std::fs::create_dir_all(&out_dir)?;
    let mut complete = true;

    // Pooled learning curves: real-episode axis only.
    let mut curves =
        String::from("run,algo,real_episode_index,total_collected,total_reward\n");
    for run in &runs {
        let name = run
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let algo = run_algo_name(run).unwrap_or_else(|| {
            log::warn!("{}: missing or unreadable run_meta.json", run.display());
            complete = false;
            "unknown".into()
        });
        let text = std::fs::read_to_string(run.join("learning_curve.csv"))?;
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::config(format!(
                    "{}: malformed learning_curve.csv line '{line}'",
                    run.display()
                )));
            }
            if f[1] == "real" {
                curves.push_str(&format!("{name},{algo},{},{},{}\n", f[2], f[3], f[4]));
            }
        }
    }
    std::fs::write(out_dir.join("curves.csv"), curves)?;

    // Per-run overlays (unprefixed names when there is a single run).
    for run in &runs {
        let prefix = if runs.len() == 1 {
            String::new()
        } else {
            format!(
                "{}_",
                run.file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "run".into())
            )
        };
        match ScenarioConfig::load(&run.join("config.toml")) {
            Ok(config) => {
                let mut buildings = String::from("x_min,y_min,x_max,y_max,height\n");
                for b in &config.map.buildings {
                    buildings.push_str(&format!(
                        "{},{},{},{},{}\n",
                        b.x_min, b.y_min, b.x_max, b.y_max, b.height
                    ));
                }
                std::fs::write(out_dir.join(format!("{prefix}buildings.csv")), buildings)?;

                let est_nodes: Option<skyharvest_core::NodeSet> =
                    std::fs::read_to_string(run.join("estimated_nodes.json"))
                        .ok()
                        .and_then(|s| serde_json::from_str(&s).ok());
                let mut nodes = String::from("node_id,known,true_x,true_y,est_x,est_y\n");
                for (k, p) in config.nodes.positions.iter().enumerate() {
                    let (est_x, est_y) = match (&est_nodes, config.nodes.known[k]) {
                        // Estimates are reported only for unknown nodes.
                        (Some(est), false) => (
                            format!("{}", est.positions[k].x),
                            format!("{}", est.positions[k].y),
                        ),
                        _ => (String::new(), String::new()),
                    };
                    nodes.push_str(&format!(
                        "{k},{},{},{},{est_x},{est_y}\n",
                        config.nodes.known[k], p.x, p.y
                    ));
                }
                std::fs::write(out_dir.join(format!("{prefix}nodes.csv")), nodes)?;
            }
            Err(e) => {
                log::warn!("{}: no config.toml ({e}); skipping overlays", run.display());
                complete = false;
            }
        }

        match std::fs::read_to_string(run.join("final_trajectory.json")) {
            Ok(text) => {
                let value: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("final_trajectory.json: {e}")))?;
                let mut traj = String::from("step,x,y,z,battery\n");
                if let Some(states) = value["trajectory"].as_array() {
                    for (i, s) in states.iter().enumerate() {
                        traj.push_str(&format!(
                            "{i},{},{},{},{}\n",
                            s[0], s[1], s[2], s[3]
                        ));
                    }
                }
                std::fs::write(out_dir.join(format!("{prefix}trajectory.csv")), traj)?;
            }
            Err(_) => {
                log::warn!(
                    "{}: no final_trajectory.json; skipping trajectory export",
                    run.display()
                );
                complete = false;
            }
        }
    }

    if complete {
        println!("plots -> {}", out_dir.display());
    } else {
        log::warn!("partial export (some artifacts were missing) -> {}", out_dir.display());
        println!("partial plots -> {}", out_dir.display());
    }
    Ok(())
}
