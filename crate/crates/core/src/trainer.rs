//! Orchestration of the three training pipelines and their persistence:
//!
//! * **model-aided** — per real episode: a greedy real-world rollout that
//!   banks measurements and transitions, a full refresh of the learned radio
//!   environment (channel refit + node localization), then a batch of
//!   ε-greedy episodes inside that learned world with one gradient step per
//!   simulated environment step;
//! * **baseline** — plain deep Q-learning entirely in the real world;
//! * **oracle** — the simulated-training loop handed the true environment
//!   from episode one, an upper reference on what model-aided can reach.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel_model::{
    classify_anchor_measurements, train_channel, ChannelNet, FitReport,
};
use crate::dqn::{
    epsilon, sync_target, train_on_union, HyperParams, InputNorm, QNetwork, ReplayBuffer,
};
use crate::env::{
    run_episode, Agent, EpisodeRecord, Mdp, RealWorld, State, Transition, WorldKind, WorldModel,
};
use crate::error::{Error, Result};
use crate::geom::{GroundPoint, Point3};
use crate::localizer::{localize_all, refine_localize};
use crate::mlp::{Adam, Scratch};
use crate::radio::{collect_measurements, write_measurements_csv, GeometryFeatures, Measurement};
use crate::rng::substream;
use crate::scenario::{CityMap, NodeSet, ScenarioConfig};

/// Training pipeline selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    ModelAided,
    Baseline,
    Oracle,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::ModelAided => "model-aided",
            Algo::Baseline => "baseline",
            Algo::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Algo> {
        match s {
            "model-aided" => Ok(Algo::ModelAided),
            "baseline" => Ok(Algo::Baseline),
            "oracle" => Ok(Algo::Oracle),
            other => Err(Error::usage(format!(
                "unknown algorithm '{other}' (expected model-aided, baseline, or oracle)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeKind {
    Real,
    Simulated,
}

/// One learning-curve row; `t` is the global episode counter shared by real
/// and simulated episodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub t: u64,
    pub kind: EpisodeKind,
    /// 1-based index of the real episode this row belongs to (for simulated
    /// rows: the count of real episodes completed so far).
    pub real_episode_index: u32,
    pub total_collected: f64,
    pub total_reward: f64,
    /// Exploration probability in effect during the episode.
    pub epsilon: f64,
    /// Mean training loss over the episode's gradient steps (absent when no
    /// step trained).
    pub mean_loss: Option<f64>,
}

/// One localization-report row. Anchors appear with their true position and
/// no score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRow {
    pub round: u32,
    pub node_id: usize,
    pub est_x: f64,
    pub est_y: f64,
    pub true_x: f64,
    pub true_y: f64,
    pub error_m: f64,
    pub score: Option<f64>,
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub algo: Algo,
    pub rows: Vec<EpisodeRow>,
    pub real_episodes: Vec<EpisodeRecord>,
    pub q: QNetwork,
    pub channel_net: Option<ChannelNet>,
    pub estimated_nodes: Option<NodeSet>,
    pub localization: Vec<LocalizationRow>,
    pub fit_reports: Vec<FitReport>,
    /// All radio measurements collected in the real world, in order.
    pub measurements: Vec<Measurement>,
    /// Exact real-world sample accounting: Σ real-episode lengths.
    pub real_transitions: u64,
    /// Simulated transitions generated by the learned model.
    pub sim_transitions_from_model: u64,
    /// Simulated transitions generated by the ground-truth world; must stay
    /// zero for the model-aided pipeline.
    pub sim_transitions_from_truth: u64,
    /// Wall-clock duration, for interactive display only — never persisted,
    /// so artifacts stay bit-reproducible.
    pub wall_seconds: f64,
}

/// Simulated-world backend: the learned channel function evaluated at the
/// estimated node positions, with line-of-sight classified through the real
/// map against those estimates.
pub struct LearnedWorld<'a> {
    pub map: &'a CityMap,
    pub channel: ChannelNet,
    pub nodes: NodeSet,
}

impl WorldModel for LearnedWorld<'_> {
    fn num_nodes(&self) -> usize {
        self.nodes.positions.len()
    }

    fn gain_db(&self, node: usize, uav: Point3) -> f64 {
        let est = self.nodes.positions[node];
        let los = self.map.is_los(uav, est.at(0.0));
        let features = GeometryFeatures::between(uav, est);
        self.channel.predict(&features, los)
    }

    fn bounds(&self) -> (f64, f64) {
        (self.map.width, self.map.depth)
    }

    fn kind(&self) -> WorldKind {
        WorldKind::Learned
    }
}

/// Greedy, non-learning agent (used for real-world rollouts of the
/// model-aided pipeline and for evaluation).
struct GreedyAgent<'a> {
    q: &'a QNetwork,
    scratch: Scratch,
}

impl Agent for GreedyAgent<'_> {
    fn act(&mut self, state: &State) -> crate::env::Action {
        self.q.act_greedy(state, &mut self.scratch)
    }

    fn observe(&mut self, _t: &Transition) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// ε-greedy agent that stores every transition and trains on each step from
/// the union of its store and an optional extra buffer.
struct LearningAgent<'a> {
    q: &'a mut QNetwork,
    target: &'a QNetwork,
    adam: &'a mut Adam,
    store: &'a mut ReplayBuffer,
    extra: Option<&'a ReplayBuffer>,
    hyper: &'a HyperParams,
    eps: f64,
    rng: &'a mut ChaCha8Rng,
    scratch: Scratch,
}

impl Agent for LearningAgent<'_> {
    fn act(&mut self, state: &State) -> crate::env::Action {
        self.q.act_eps_greedy(state, self.eps, self.rng, &mut self.scratch)
    }

    fn observe(&mut self, tr: &Transition) -> Result<Option<f64>> {
        self.store.push(*tr);
        let loss = match self.extra {
            Some(extra) => train_on_union(
                self.q,
                self.target,
                self.adam,
                &[extra, &*self.store],
                self.hyper,
                self.rng,
            )?,
            None => train_on_union(
                self.q,
                self.target,
                self.adam,
                &[&*self.store],
                self.hyper,
                self.rng,
            )?,
        };
        Ok(loss)
    }
}

fn no_measurements(_i: u32, _f: Point3, _t: Point3) -> Result<()> {
    Ok(())
}

struct RunState {
    q: QNetwork,
    target: QNetwork,
    adam: Adam,
    explore_rng: ChaCha8Rng,
    t: u64,
    eps: f64,
}

impl RunState {
    fn new(config: &ScenarioConfig) -> Result<RunState> {
        let norm = InputNorm {
            width: config.map.width,
            depth: config.map.depth,
            battery_max: config.mission.battery,
        };
        let mut init_rng = substream(config.seed, "net-init", 0);
        let q = QNetwork::new(norm, &mut init_rng)?;
        let target = q.clone();
        let adam = Adam::new(q.net.params.len());
        let eps = epsilon(0, &config.hyper);
        Ok(RunState {
            q,
            target,
            adam,
            explore_rng: substream(config.seed, "exploration", 0),
            t: 0,
            eps,
        })
    }

    /// Counter/target bookkeeping after an episode on which training ticks.
    fn tick_training_episode(&mut self, hyper: &HyperParams) -> Result<()> {
        self.eps = epsilon(self.t, hyper);
        if self.t % hyper.target_sync_period == 0 {
            sync_target(&self.q, &mut self.target)?;
        }
        Ok(())
    }
}

/// The model-aided pipeline.
pub fn run_model_aided(config: &ScenarioConfig) -> Result<TrainResult> {
    config.validate()?;
    let start = Instant::now();
    let hyper = &config.hyper;
    let real_world = RealWorld {
        map: &config.map,
        channel: &config.channel,
        nodes: &config.nodes,
    };
    let mut rs = RunState::new(config)?;
    let mut b_real = ReplayBuffer::new(hyper.replay_capacity);
    let mut b_sim = ReplayBuffer::new(hyper.replay_capacity);
    let mut shadow_rng = substream(config.seed, "shadowing", 0);
    let mut measurements: Vec<Measurement> = Vec::new();
    let mut rows = Vec::new();
    let mut real_episodes = Vec::new();
    let mut localization = Vec::new();
    let mut fit_reports = Vec::new();
    let mut est_nodes: Option<NodeSet> = None;
    let mut channel_net: Option<ChannelNet> = None;
    let mut real_transitions = 0u64;
    let mut sim_from_model = 0u64;
    let mut sim_from_truth = 0u64;
    let d_scale = (config.map.width * config.map.width
        + config.map.depth * config.map.depth)
        .sqrt();
    let (sigma_los, sigma_nlos) = (config.channel.los.sigma_db, config.channel.nlos.sigma_db);

    for e in 1..=hyper.max_real_episodes as u32 {
        // Phase 1: greedy real-world episode, banking measurements and
        // transitions.
        let mdp = Mdp::new(
            &real_world,
            &config.mission,
            &config.radio,
            hyper.lambda,
            hyper.penalty_on_low_battery,
        );
        let mut agent = GreedyAgent {
            q: &rs.q,
            scratch: Scratch::default(),
        };
        let rec = run_episode(&mdp, &mut agent, |step, from, to| {
            collect_measurements(
                &config.map,
                &config.channel,
                &config.nodes,
                step,
                from,
                to,
                hyper.measurement_spacing,
                &mut shadow_rng,
                &mut measurements,
            );
            Ok(())
        })?;
        for tr in &rec.transitions {
            b_real.push(*tr);
        }
        real_transitions += rec.transitions.len() as u64;
        rs.t += 1;
        rows.push(EpisodeRow {
            t: rs.t,
            kind: EpisodeKind::Real,
            real_episode_index: e,
            total_collected: rec.total_collected,
            total_reward: rec.total_reward,
            epsilon: rs.eps,
            mean_loss: None,
        });
        real_episodes.push(rec);

        // Phase 2: refresh the learned environment from all measurements so
        // far.
        let anchor_meas: Vec<Measurement> = measurements
            .iter()
            .filter(|m| config.nodes.is_anchor(m.node))
            .cloned()
            .collect();
        if anchor_meas.is_empty() {
            return Err(Error::domain(
                "no anchor measurements collected; cannot learn the channel model",
            ));
        }
        let dataset = classify_anchor_measurements(&config.map, &config.nodes, &anchor_meas)?;
        let mut fit_rng = substream(config.seed, "channel-fit", e as u64);
        let (net, report) = train_channel(
            &dataset,
            d_scale,
            sigma_los,
            sigma_nlos,
            &hyper.channel_fit,
            &mut fit_rng,
        )?;
        fit_reports.push(report);

        let mut by_node: Vec<Vec<Measurement>> =
            vec![Vec::new(); config.nodes.positions.len()];
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
            est_nodes.as_ref(),
            sigma_los,
            sigma_nlos,
            &hyper.pso,
            config.seed,
            e as u64,
        )?;
        for k in 0..config.nodes.positions.len() {
            let truth = config.nodes.positions[k];
            let est = outcome.nodes.positions[k];
            localization.push(LocalizationRow {
                round: e,
                node_id: k,
                est_x: est.x,
                est_y: est.y,
                true_x: truth.x,
                true_y: truth.y,
                error_m: est.distance(&truth),
                score: outcome.scores[k],
            });
        }
        est_nodes = Some(outcome.nodes.clone());
        channel_net = Some(net.clone());

        // Phase 3: simulated experience in the refreshed learned world.
        // Simulated transitions produced under the previous model are stale;
        // drop them.
        b_sim.clear();
        let learned = LearnedWorld {
            map: &config.map,
            channel: net,
            nodes: outcome.nodes,
        };
        run_sim_block(
            &learned,
            config,
            &mut rs,
            &mut b_sim,
            Some(&b_real),
            e,
            &mut rows,
            &mut sim_from_model,
            &mut sim_from_truth,
        )?;
    }

    // Final full-accuracy localization: the in-loop passes run a light swarm
    // on a thinned measurement subset, which leaves a variance floor of tens
    // of meters for poorly observed nodes. The deterministic refinement
    // searches fine patches around the whole history of round estimates —
    // which visits the true basin many times — and polishes the winner on
    // every measurement.
    if let (Some(net), Some(prev)) = (&channel_net, &est_nodes) {
        let final_round = hyper.max_real_episodes as u32 + 1;
        let mut by_node: Vec<Vec<Measurement>> =
            vec![Vec::new(); config.nodes.positions.len()];
        for m in &measurements {
            if !config.nodes.is_anchor(m.node) {
                by_node[m.node].push(m.clone());
            }
        }
        let mut refined = prev.clone();
        let mut scores: Vec<Option<f64>> = vec![None; config.nodes.positions.len()];
        for k in 0..config.nodes.positions.len() {
            if config.nodes.is_anchor(k) || by_node[k].is_empty() {
                continue;
            }
            let candidates: Vec<GroundPoint> = localization
                .iter()
                .filter(|row| row.node_id == k)
                .map(|row| GroundPoint { x: row.est_x, y: row.est_y })
                .collect();
            let (est, score) = refine_localize(
                net,
                &by_node[k],
                &config.map,
                &candidates,
                sigma_los,
                sigma_nlos,
                &hyper.final_refine,
            )?;
            refined.positions[k] = est;
            scores[k] = Some(score);
        }
        for k in 0..config.nodes.positions.len() {
            let truth = config.nodes.positions[k];
            let est = refined.positions[k];
            localization.push(LocalizationRow {
                round: final_round,
                node_id: k,
                est_x: est.x,
                est_y: est.y,
                true_x: truth.x,
                true_y: truth.y,
                error_m: est.distance(&truth),
                score: scores[k],
            });
        }
        est_nodes = Some(refined);
    }

    Ok(TrainResult {
        algo: Algo::ModelAided,
        rows,
        real_episodes,
        q: rs.q,
        channel_net,
        estimated_nodes: est_nodes,
        localization,
        fit_reports,
        measurements,
        real_transitions,
        sim_transitions_from_model: sim_from_model,
        sim_transitions_from_truth: sim_from_truth,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs the per-refresh block of simulated ε-greedy episodes, with one
/// training step per simulated environment step and ε/target updates on the
/// shared counter.
#[allow(clippy::too_many_arguments)]
fn run_sim_block(
    world: &dyn WorldModel,
    config: &ScenarioConfig,
    rs: &mut RunState,
    store: &mut ReplayBuffer,
    extra: Option<&ReplayBuffer>,
    real_index: u32,
    rows: &mut Vec<EpisodeRow>,
    sim_from_model: &mut u64,
    sim_from_truth: &mut u64,
) -> Result<()> {
    let hyper = &config.hyper;
    let sim_mdp = Mdp::new(
        world,
        &config.mission,
        &config.radio,
        hyper.lambda,
        hyper.penalty_on_low_battery,
    );
    for _ in 0..hyper.sim_episodes_per_real {
        let eps_used = rs.eps;
        let mut agent = LearningAgent {
            q: &mut rs.q,
            target: &rs.target,
            adam: &mut rs.adam,
            store,
            extra,
            hyper,
            eps: eps_used,
            rng: &mut rs.explore_rng,
            scratch: Scratch::default(),
        };
        let rec = run_episode(&sim_mdp, &mut agent, no_measurements)?;
        match world.kind() {
            WorldKind::Learned => *sim_from_model += rec.transitions.len() as u64,
            WorldKind::Truth => *sim_from_truth += rec.transitions.len() as u64,
        }
        rs.t += 1;
        rows.push(EpisodeRow {
            t: rs.t,
            kind: EpisodeKind::Simulated,
            real_episode_index: real_index,
            total_collected: rec.total_collected,
            total_reward: rec.total_reward,
            epsilon: eps_used,
            mean_loss: rec.mean_loss(),
        });
        rs.tick_training_episode(hyper)?;
    }
    Ok(())
}

/// Plain deep Q-learning in the real world (the sample-efficiency baseline).
pub fn run_baseline_dql(config: &ScenarioConfig) -> Result<TrainResult> {
    config.validate()?;
    let start = Instant::now();
    let hyper = &config.hyper;
    let real_world = RealWorld {
        map: &config.map,
        channel: &config.channel,
        nodes: &config.nodes,
    };
    let mut rs = RunState::new(config)?;
    let mut b_real = ReplayBuffer::new(hyper.replay_capacity);
    let mut rows = Vec::new();
    let mut real_episodes = Vec::new();
    let mut real_transitions = 0u64;

    let mdp = Mdp::new(
        &real_world,
        &config.mission,
        &config.radio,
        hyper.lambda,
        hyper.penalty_on_low_battery,
    );
    for e in 1..=hyper.baseline_episodes as u32 {
        let eps_used = rs.eps;
        let mut agent = LearningAgent {
            q: &mut rs.q,
            target: &rs.target,
            adam: &mut rs.adam,
            store: &mut b_real,
            extra: None,
            hyper,
            eps: eps_used,
            rng: &mut rs.explore_rng,
            scratch: Scratch::default(),
        };
        let rec = run_episode(&mdp, &mut agent, no_measurements)?;
        real_transitions += rec.transitions.len() as u64;
        rs.t += 1;
        rows.push(EpisodeRow {
            t: rs.t,
            kind: EpisodeKind::Real,
            real_episode_index: e,
            total_collected: rec.total_collected,
            total_reward: rec.total_reward,
            epsilon: eps_used,
            mean_loss: rec.mean_loss(),
        });
        real_episodes.push(rec);
        rs.tick_training_episode(hyper)?;
    }

    Ok(TrainResult {
        algo: Algo::Baseline,
        rows,
        real_episodes,
        q: rs.q,
        channel_net: None,
        estimated_nodes: None,
        localization: Vec::new(),
        fit_reports: Vec::new(),
        measurements: Vec::new(),
        real_transitions,
        sim_transitions_from_model: 0,
        sim_transitions_from_truth: 0,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// The model-aided loop handed the ground-truth environment as its
/// "simulated" world from episode one — no channel learning, no
/// localization. An upper reference for the model-aided pipeline.
pub fn run_oracle_dql(config: &ScenarioConfig) -> Result<TrainResult> {
    config.validate()?;
    let start = Instant::now();
    let hyper = &config.hyper;
    let real_world = RealWorld {
        map: &config.map,
        channel: &config.channel,
        nodes: &config.nodes,
    };
    let mut rs = RunState::new(config)?;
    let mut b_real = ReplayBuffer::new(hyper.replay_capacity);
    let mut b_sim = ReplayBuffer::new(hyper.replay_capacity);
    let mut rows = Vec::new();
    let mut real_episodes = Vec::new();
    let mut real_transitions = 0u64;
    let mut sim_from_model = 0u64;
    let mut sim_from_truth = 0u64;

    for e in 1..=hyper.max_real_episodes as u32 {
        let mdp = Mdp::new(
            &real_world,
            &config.mission,
            &config.radio,
            hyper.lambda,
            hyper.penalty_on_low_battery,
        );
        let mut agent = GreedyAgent {
            q: &rs.q,
            scratch: Scratch::default(),
        };
        let rec = run_episode(&mdp, &mut agent, no_measurements)?;
        for tr in &rec.transitions {
            b_real.push(*tr);
        }
        real_transitions += rec.transitions.len() as u64;
        rs.t += 1;
        rows.push(EpisodeRow {
            t: rs.t,
            kind: EpisodeKind::Real,
            real_episode_index: e,
            total_collected: rec.total_collected,
            total_reward: rec.total_reward,
            epsilon: rs.eps,
            mean_loss: None,
        });
        real_episodes.push(rec);

        // The "simulated" world is the truth itself; nothing goes stale, so
        // the simulated buffer persists.
        run_sim_block(
            &real_world,
            config,
            &mut rs,
            &mut b_sim,
            Some(&b_real),
            e,
            &mut rows,
            &mut sim_from_model,
            &mut sim_from_truth,
        )?;
    }

    Ok(TrainResult {
        algo: Algo::Oracle,
        rows,
        real_episodes,
        q: rs.q,
        channel_net: None,
        estimated_nodes: None,
        localization: Vec::new(),
        fit_reports: Vec::new(),
        measurements: Vec::new(),
        real_transitions,
        sim_transitions_from_model: sim_from_model,
        sim_transitions_from_truth: sim_from_truth,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run(config: &ScenarioConfig, algo: Algo) -> Result<TrainResult> {
    match algo {
        Algo::ModelAided => run_model_aided(config),
        Algo::Baseline => run_baseline_dql(config),
        Algo::Oracle => run_oracle_dql(config),
    }
}

/// Greedy-policy evaluation summary over real-world episodes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_collected: f64,
    pub std_collected: f64,
    pub min_collected: f64,
    pub max_collected: f64,
    pub mean_reward: f64,
    /// Every episode ended at the mission end position.
    pub all_reached_goal: bool,
    pub min_final_battery: f64,
    pub any_penalized: bool,
}

/// Runs `episodes` greedy episodes of `q` in the real world; never mutates
/// the network.
pub fn evaluate_policy(
    q: &QNetwork,
    config: &ScenarioConfig,
    episodes: usize,
) -> Result<(EvalSummary, Vec<EpisodeRecord>)> {
    config.validate()?;
    let real_world = RealWorld {
        map: &config.map,
        channel: &config.channel,
        nodes: &config.nodes,
    };
    let mdp = Mdp::new(
        &real_world,
        &config.mission,
        &config.radio,
        config.hyper.lambda,
        config.hyper.penalty_on_low_battery,
    );
    let goal = config.mission.end;
    let mut records = Vec::with_capacity(episodes);
    let mut collected = Vec::with_capacity(episodes);
    let mut rewards = Vec::with_capacity(episodes);
    let mut all_goal = true;
    let mut min_battery = f64::INFINITY;
    let mut any_penalized = false;
    for _ in 0..episodes {
        let mut agent = GreedyAgent {
            q,
            scratch: Scratch::default(),
        };
        let rec = run_episode(&mdp, &mut agent, no_measurements)?;
        let last = rec.final_state();
        all_goal &= (last.pos.x - goal.x).abs() < 1e-6 && (last.pos.y - goal.y).abs() < 1e-6;
        min_battery = min_battery.min(last.battery);
        any_penalized |= rec.penalized.iter().any(|&p| p);
        collected.push(rec.total_collected);
        rewards.push(rec.total_reward);
        records.push(rec);
    }
    let n = episodes.max(1) as f64;
    let mean = collected.iter().sum::<f64>() / n;
    let var = collected.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
    let summary = EvalSummary {
        episodes,
        mean_collected: mean,
        std_collected: var.sqrt(),
        min_collected: collected.iter().copied().fold(f64::INFINITY, f64::min),
        max_collected: collected.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_reward: rewards.iter().sum::<f64>() / n,
        all_reached_goal: all_goal,
        min_final_battery: if min_battery.is_finite() { min_battery } else { 0.0 },
        any_penalized,
    };
    Ok((summary, records))
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Writes the learning curve CSV (deterministic bytes for a deterministic
/// run).
pub fn write_learning_curve(path: &Path, rows: &[EpisodeRow]) -> Result<()> {
    let mut out = String::from(
        "t,episode_kind,real_episode_index,total_collected,total_reward,epsilon,mean_loss\n",
    );
    for r in rows {
        let kind = match r.kind {
            EpisodeKind::Real => "real",
            EpisodeKind::Simulated => "simulated",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.t,
            kind,
            r.real_episode_index,
            r.total_collected,
            r.total_reward,
            r.epsilon,
            fmt_opt(r.mean_loss)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_localization_csv(path: &Path, rows: &[LocalizationRow]) -> Result<()> {
    let mut out = String::from("round,node_id,est_x,est_y,true_x,true_y,error_m,score\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.round,
            r.node_id,
            r.est_x,
            r.est_y,
            r.true_x,
            r.true_y,
            r.error_m,
            fmt_opt(r.score)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Persists a complete training run into `out_dir`:
/// `config.toml`, `learning_curve.csv`, `q_network.json`,
/// `final_trajectory.json`, `run_meta.json`, per-real-episode trajectory
/// JSONs under `episodes/`, and — for the model-aided pipeline —
/// `channel_net.json`, `estimated_nodes.json`, `localization.csv`, and
/// `measurements.csv`. No timing data is written, so identical runs produce
/// identical trees.
pub fn write_run(out_dir: &Path, config: &ScenarioConfig, result: &TrainResult) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    config.save(&out_dir.join("config.toml"))?;
    write_learning_curve(&out_dir.join("learning_curve.csv"), &result.rows)?;
    result.q.save(&out_dir.join("q_network.json"))?;
    if let Some(net) = &result.channel_net {
        net.save(&out_dir.join("channel_net.json"))?;
    }
    if let Some(nodes) = &result.estimated_nodes {
        let text = serde_json::to_string_pretty(nodes)
            .map_err(|e| Error::config(format!("serializing node estimates: {e}")))?;
        std::fs::write(out_dir.join("estimated_nodes.json"), text)?;
    }
    if !result.localization.is_empty() {
        write_localization_csv(&out_dir.join("localization.csv"), &result.localization)?;
    }
    if !result.measurements.is_empty() {
        write_measurements_csv(&out_dir.join("measurements.csv"), &result.measurements)?;
    }
    let ep_dir = out_dir.join("episodes");
    std::fs::create_dir_all(&ep_dir)?;
    for (i, rec) in result.real_episodes.iter().enumerate() {
        let path = ep_dir.join(format!("real_{:04}.json", i + 1));
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &rec.to_json())
            .map_err(|e| Error::config(format!("serializing episode record: {e}")))?;
        f.write_all(b"\n")?;
    }
    // Final greedy trajectory and run metadata.
    let (eval, eval_records) = evaluate_policy(&result.q, config, 1)?;
    let mut f = std::fs::File::create(out_dir.join("final_trajectory.json"))?;
    serde_json::to_writer_pretty(&mut f, &eval_records[0].to_json())
        .map_err(|e| Error::config(format!("serializing final trajectory: {e}")))?;
    f.write_all(b"\n")?;
    let meta = serde_json::json!({
        "algo": result.algo.name(),
        "seed": config.seed,
        "real_episodes": result.real_episodes.len(),
        "real_transitions": result.real_transitions,
        "sim_transitions_from_model": result.sim_transitions_from_model,
        "sim_transitions_from_truth": result.sim_transitions_from_truth,
        "rows": result.rows.len(),
        "final_eval": eval,
    });
    let mut f = std::fs::File::create(out_dir.join("run_meta.json"))?;
    serde_json::to_writer_pretty(&mut f, &meta)
        .map_err(|e| Error::config(format!("serializing run metadata: {e}")))?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::GroundPoint;
    use crate::radio::{ChannelParams, RadioParams};
    use crate::scenario::{Building, MissionSpec};

    /// A small, fast scenario for smoke tests: 300×300 m, two buildings,
    /// three nodes (one anchor), a 4-step mission with battery 6.
    fn tiny_config(seed: u64) -> ScenarioConfig {
        let map = CityMap::new(
            300.0,
            300.0,
            vec![
                Building {
                    x_min: 80.0,
                    y_min: 80.0,
                    x_max: 130.0,
                    y_max: 130.0,
                    height: 30.0,
                },
                Building {
                    x_min: 180.0,
                    y_min: 160.0,
                    x_max: 240.0,
                    y_max: 220.0,
                    height: 25.0,
                },
            ],
        );
        let nodes = NodeSet {
            positions: vec![
                GroundPoint { x: 60.0, y: 150.0 },
                GroundPoint { x: 150.0, y: 60.0 },
                GroundPoint { x: 250.0, y: 120.0 },
            ],
            known: vec![true, false, false],
        };
        let mission = MissionSpec {
            start: Point3::new(50.0, 50.0, 60.0),
            end: Point3::new(150.0, 150.0, 60.0),
            altitude: 60.0,
            step: 50.0,
            max_steps: 8,
            battery: 6.0,
        };
        let hyper = HyperParams {
            sim_episodes_per_real: 2,
            max_real_episodes: 2,
            baseline_episodes: 3,
            batch_size: 16,
            replay_capacity: 4096,
            channel_fit: crate::channel_model::ChannelFitSettings {
                max_epochs: 15,
                batch_size: 32,
                patience: 15,
                max_samples: 400,
                ..Default::default()
            },
            pso: crate::localizer::PsoParams {
                particles: 15,
                iterations: 8,
                max_measurements: 24,
                ..Default::default()
            },
            final_refine: crate::localizer::RefineParams {
                patch_half_width: 4.0,
                patch_spacing: 2.0,
                score_cap: 48,
                dedupe_radius: 4.0,
                ..Default::default()
            },
            ..HyperParams::default()
        };
        ScenarioConfig {
            seed,
            map,
            nodes,
            mission,
            channel: ChannelParams::default(),
            radio: RadioParams {
                node_count: 3,
                ..RadioParams::default()
            },
            hyper,
        }
    }

    #[test]
    fn model_aided_smoke_run_has_expected_shape() {
        let config = tiny_config(31);
        let result = run_model_aided(&config).unwrap();
        // 2 real + 2×2 simulated rows, strictly ordered by t.
        assert_eq!(result.rows.len(), 6);
        for (i, r) in result.rows.iter().enumerate() {
            assert_eq!(r.t, i as u64 + 1);
        }
        let real_rows: Vec<_> = result
            .rows
            .iter()
            .filter(|r| r.kind == EpisodeKind::Real)
            .collect();
        assert_eq!(real_rows.len(), 2);
        assert!(real_rows.iter().all(|r| r.mean_loss.is_none()));
        let sim_rows: Vec<_> = result
            .rows
            .iter()
            .filter(|r| r.kind == EpisodeKind::Simulated)
            .collect();
        assert_eq!(sim_rows.len(), 4);
        assert!(sim_rows.iter().all(|r| r.mean_loss.is_some()));

        // Provenance: simulated experience comes only from the model.
        assert_eq!(result.sim_transitions_from_truth, 0);
        assert!(result.sim_transitions_from_model > 0);

        // Exact sample accounting.
        let total: u64 = result
            .real_episodes
            .iter()
            .map(|r| r.transitions.len() as u64)
            .sum();
        assert_eq!(result.real_transitions, total);

        // Environment artifacts present.
        assert!(result.channel_net.is_some());
        let est = result.estimated_nodes.as_ref().unwrap();
        assert_eq!(est.positions[0], config.nodes.positions[0], "anchor passes through");
        // Two in-loop rounds plus the final full-accuracy pass.
        assert_eq!(result.localization.len(), (2 + 1) * 3);
        assert_eq!(result.localization.last().unwrap().round, 3);
        assert_eq!(result.fit_reports.len(), 2);
        assert!(!result.measurements.is_empty());
        // Real episodes end at the goal with empty battery.
        for rec in &result.real_episodes {
            let last = rec.final_state();
            assert_eq!(
                (last.pos.x, last.pos.y),
                (config.mission.end.x, config.mission.end.y)
            );
            assert_eq!(last.battery, 0.0);
        }
    }

    #[test]
    fn baseline_smoke_run_is_all_real_and_trains() {
        let config = tiny_config(32);
        let result = run_baseline_dql(&config).unwrap();
        assert_eq!(result.rows.len(), 3);
        assert!(result.rows.iter().all(|r| r.kind == EpisodeKind::Real));
        assert!(result.rows.iter().all(|r| r.mean_loss.is_some()));
        assert_eq!(result.sim_transitions_from_model, 0);
        assert_eq!(result.sim_transitions_from_truth, 0);
        assert!(result.channel_net.is_none());
        // ε decays across episodes.
        assert!(result.rows[2].epsilon < result.rows[0].epsilon);
    }

    #[test]
    fn oracle_smoke_run_draws_simulated_experience_from_truth() {
        let config = tiny_config(33);
        let result = run_oracle_dql(&config).unwrap();
        assert_eq!(result.rows.len(), 6);
        assert!(result.sim_transitions_from_truth > 0);
        assert_eq!(result.sim_transitions_from_model, 0);
        assert!(result.channel_net.is_none());
        assert!(result.localization.is_empty());
    }

    #[test]
    fn identical_configs_reproduce_bitwise() {
        let config = tiny_config(34);
        let a = run_model_aided(&config).unwrap();
        let b = run_model_aided(&config).unwrap();
        assert_eq!(a.q.net.params, b.q.net.params);
        assert_eq!(a.rows, b.rows);
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.csv");
        let pb = dir.path().join("b.csv");
        write_learning_curve(&pa, &a.rows).unwrap();
        write_learning_curve(&pb, &b.rows).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn evaluation_is_deterministic_and_read_only() {
        let config = tiny_config(35);
        let result = run_baseline_dql(&config).unwrap();
        let before = result.q.net.params.clone();
        let (summary, records) = evaluate_policy(&result.q, &config, 5).unwrap();
        assert_eq!(result.q.net.params, before);
        assert_eq!(summary.episodes, 5);
        assert_eq!(records.len(), 5);
        assert_eq!(summary.std_collected, 0.0, "greedy + noiseless ⇒ zero variance");
        assert!(summary.all_reached_goal);
        assert!(summary.min_final_battery >= 0.0);
    }

    #[test]
    fn write_run_produces_the_expected_tree() {
        let config = tiny_config(36);
        let result = run_model_aided(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        write_run(&out, &config, &result).unwrap();
        for name in [
            "config.toml",
            "learning_curve.csv",
            "q_network.json",
            "channel_net.json",
            "estimated_nodes.json",
            "localization.csv",
            "measurements.csv",
            "final_trajectory.json",
            "run_meta.json",
        ] {
            assert!(out.join(name).exists(), "missing {name}");
        }
        assert!(out.join("episodes/real_0001.json").exists());
        assert!(out.join("episodes/real_0002.json").exists());

        let curve = std::fs::read_to_string(out.join("learning_curve.csv")).unwrap();
        let mut lines = curve.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,episode_kind,real_episode_index,total_collected,total_reward,epsilon,mean_loss"
        );
        assert_eq!(lines.count(), result.rows.len());

        // The config snapshot reloads to an identical config.
        let reloaded = ScenarioConfig::load(&out.join("config.toml")).unwrap();
        assert_eq!(reloaded, config);

        // Metadata carries the provenance counters and no timing fields.
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("run_meta.json")).unwrap())
                .unwrap();
        assert_eq!(meta["sim_transitions_from_truth"], 0);
        assert!(meta.get("wall_seconds").is_none());
        assert!(meta.get("duration").is_none());
    }

    #[test]
    fn algo_names_parse_and_print() {
        assert_eq!("model-aided".parse::<Algo>().unwrap(), Algo::ModelAided);
        assert_eq!("baseline".parse::<Algo>().unwrap(), Algo::Baseline);
        assert_eq!("oracle".parse::<Algo>().unwrap(), Algo::Oracle);
        assert!("dyna".parse::<Algo>().is_err());
        assert_eq!(Algo::ModelAided.name(), "model-aided");
    }
}
