//! The mission MDP: lattice motion, battery dynamics, the safety controller,
//! and data-collection rewards, generic over a [`WorldModel`] backend so the
//! same episode machinery runs against the real radio environment or a
//! learned stand-in.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::radio::{throughput, RadioParams};
use crate::scenario::MissionSpec;

/// Tolerance for lattice comparisons; positions are exact multiples of the
/// step length, so this only absorbs benign accumulated arithmetic.
const POS_EPS: f64 = 1e-6;

/// Movement actions. `Hover` stays in place at half battery cost; the four
/// moves translate by one step length along an axis at full cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Hover,
    Right,
    Left,
    Up,
    Down,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Hover,
        Action::Right,
        Action::Left,
        Action::Up,
        Action::Down,
    ];

    pub const COUNT: usize = 5;

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Action::Hover => 0,
            Action::Right => 1,
            Action::Left => 2,
            Action::Up => 3,
            Action::Down => 4,
        }
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::usage(format!("action index {i} out of range")))
    }

    /// Ground-plane displacement for step length `c`.
    #[inline]
    pub fn displacement(self, c: f64) -> (f64, f64) {
        match self {
            Action::Hover => (0.0, 0.0),
            Action::Right => (c, 0.0),
            Action::Left => (-c, 0.0),
            Action::Up => (0.0, c),
            Action::Down => (0.0, -c),
        }
    }

    /// Battery drained by the action: 0.5 hovering, 1 moving.
    #[inline]
    pub fn battery_cost(self) -> f64 {
        match self {
            Action::Hover => 0.5,
            _ => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Hover => "hover",
            Action::Right => "right",
            Action::Left => "left",
            Action::Up => "up",
            Action::Down => "down",
        }
    }
}

/// UAV state: position (always at mission altitude) and remaining battery.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub pos: Point3,
    pub battery: f64,
}

impl State {
    /// An episode is over once the battery is exhausted; the safety
    /// controller guarantees this only happens at the terminal position.
    #[inline]
    pub fn is_terminal(&self) -> bool {
        self.battery <= 0.0
    }
}

/// One environment interaction, stored for experience replay. `action` is the
/// action the agent *proposed*; if the safety controller substituted another
/// one, the substitution (and its penalty) is already folded into `reward`
/// and `next`, so the agent learns the consequences of its own choice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: State,
    pub action: Action,
    pub reward: f64,
    pub next: State,
    pub terminal: bool,
}

/// Which backend produced an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorldKind {
    /// Ground-truth radio environment (real measurement campaigns).
    Truth,
    /// Learned channel model plus estimated node positions.
    Learned,
}

/// Radio backend the MDP collects data from. Implementations answer with the
/// *expected* (shadowing-free) channel gain; rewards are computed from these,
/// while noisy measurements are drawn separately by the learning pipeline.
pub trait WorldModel {
    fn num_nodes(&self) -> usize;
    /// Expected channel gain in dB between `uav` and node `node`.
    fn gain_db(&self, node: usize, uav: Point3) -> f64;
    /// Map extent `(width, depth)` in meters, used for boundary clamping.
    fn bounds(&self) -> (f64, f64);
    fn kind(&self) -> WorldKind;
}

/// Ground-truth backend: true node positions, true channel parameters, and
/// map-based line-of-sight classification.
pub struct RealWorld<'a> {
    pub map: &'a crate::scenario::CityMap,
    pub channel: &'a crate::radio::ChannelParams,
    pub nodes: &'a crate::scenario::NodeSet,
}

impl WorldModel for RealWorld<'_> {
    fn num_nodes(&self) -> usize {
        self.nodes.positions.len()
    }

    fn gain_db(&self, node: usize, uav: Point3) -> f64 {
        crate::radio::expected_gain_db(self.channel, self.map, uav, self.nodes.positions[node]).0
    }

    fn bounds(&self) -> (f64, f64) {
        (self.map.width, self.map.depth)
    }

    fn kind(&self) -> WorldKind {
        WorldKind::Truth
    }
}

/// Result of one environment step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: State,
    /// Action actually executed after boundary clamping and the safety
    /// controller (equals the proposal when no intervention happened).
    pub executed: Action,
    /// Data collected this step: sum over nodes of per-node throughput at the
    /// end-of-step position.
    pub collected: f64,
    /// Reward: `collected - lambda` when penalized, else `collected`.
    pub reward: f64,
    pub penalized: bool,
    pub terminal: bool,
}

/// The MDP: world backend plus mission/radio parameters and reward settings.
pub struct Mdp<'a> {
    pub world: &'a dyn WorldModel,
    pub mission: &'a MissionSpec,
    pub radio: &'a RadioParams,
    /// Penalty weight subtracted from the reward on safety intervention.
    pub lambda: f64,
    /// When true, the penalty fires whenever the battery is at the
    /// shortest-path minimum (the low-battery condition itself), even if the
    /// proposed action needed no correction. Default semantics penalize only
    /// actual overrides.
    pub penalty_on_low_battery: bool,
}

impl<'a> Mdp<'a> {
    pub fn new(
        world: &'a dyn WorldModel,
        mission: &'a MissionSpec,
        radio: &'a RadioParams,
        lambda: f64,
        penalty_on_low_battery: bool,
    ) -> Mdp<'a> {
        Mdp {
            world,
            mission,
            radio,
            lambda,
            penalty_on_low_battery,
        }
    }

    pub fn initial_state(&self) -> State {
        State {
            pos: self.mission.start,
            battery: self.mission.battery,
        }
    }

    /// Minimum battery needed to reach the end position from `pos`: the
    /// Manhattan step count (each move costs 1).
    pub fn min_battery_to_goal(&self, pos: &Point3) -> f64 {
        let end = self.mission.end;
        let c = self.mission.step;
        ((pos.x - end.x).abs() + (pos.y - end.y).abs()) / c
    }

    fn at_goal(&self, pos: &Point3) -> bool {
        let end = self.mission.end;
        (pos.x - end.x).abs() < POS_EPS && (pos.y - end.y).abs() < POS_EPS
    }

    /// First move of the x-then-y shortest path toward the end position, or
    /// `None` when already there.
    fn first_path_move(&self, pos: &Point3) -> Option<Action> {
        let end = self.mission.end;
        if end.x - pos.x > POS_EPS {
            Some(Action::Right)
        } else if pos.x - end.x > POS_EPS {
            Some(Action::Left)
        } else if end.y - pos.y > POS_EPS {
            Some(Action::Up)
        } else if pos.y - end.y > POS_EPS {
            Some(Action::Down)
        } else {
            None
        }
    }

    /// Map-boundary clamp: an action whose target leaves the map degrades to
    /// hovering (no penalty; the boundary is part of the dynamics, not the
    /// safety controller).
    pub fn clamp_to_bounds(&self, pos: &Point3, action: Action) -> Action {
        let (w, d) = self.world.bounds();
        let (dx, dy) = action.displacement(self.mission.step);
        let (nx, ny) = (pos.x + dx, pos.y + dy);
        if nx < -POS_EPS || nx > w + POS_EPS || ny < -POS_EPS || ny > d + POS_EPS {
            Action::Hover
        } else {
            action
        }
    }

    fn position_after(&self, pos: &Point3, action: Action) -> Point3 {
        let (dx, dy) = action.displacement(self.mission.step);
        Point3 {
            x: pos.x + dx,
            y: pos.y + dy,
            z: pos.z,
        }
    }

    /// Would executing `action` keep the mission completable? True when the
    /// battery remaining after the action still covers the shortest path home
    /// from the resulting position.
    fn is_safe(&self, state: &State, action: Action) -> bool {
        let after = self.position_after(&state.pos, action);
        let b_after = state.battery - action.battery_cost();
        b_after + POS_EPS >= self.min_battery_to_goal(&after)
    }

    /// The safety controller. Returns the action to execute and whether the
    /// step is penalized.
    ///
    /// The proposal (after boundary clamping) is executed unchanged whenever
    /// the battery left after it still covers the shortest path to the end
    /// position from wherever it lands. Otherwise the first shortest-path
    /// move is substituted (hovering once at the end position, where no move
    /// remains) and the step is penalized. The check is forward-looking on
    /// purpose: vetoing every action that would drop the battery below the
    /// path minimum is exactly what makes "battery ≥ shortest-path cost" an
    /// invariant of the closed loop, for any policy.
    ///
    /// With `penalty_on_low_battery`, the penalty instead fires whenever the
    /// pre-step battery is at the shortest-path minimum, override or not.
    pub fn safety_filter(&self, state: &State, proposed: Action) -> Result<(Action, bool)> {
        let b_sc = self.min_battery_to_goal(&state.pos);
        if state.battery + POS_EPS < b_sc {
            return Err(Error::invariant(format!(
                "battery {} below shortest-path minimum {} at ({}, {})",
                state.battery, b_sc, state.pos.x, state.pos.y
            )));
        }
        let clamped = self.clamp_to_bounds(&state.pos, proposed);
        let (executed, overridden) = if self.is_safe(state, clamped) {
            (clamped, false)
        } else {
            let fallback = self.first_path_move(&state.pos).unwrap_or(Action::Hover);
            // A substitution that coincides with the proposal is no override.
            (fallback, fallback != clamped)
        };
        let penalized = if self.penalty_on_low_battery {
            state.battery <= b_sc + POS_EPS
        } else {
            overridden
        };
        Ok((executed, penalized))
    }

    /// Advances the MDP by one step.
    pub fn step(&self, state: &State, proposed: Action) -> Result<StepOutcome> {
        if state.is_terminal() {
            return Err(Error::usage("attempted to step a terminal state"));
        }
        let (executed, penalized) = self.safety_filter(state, proposed)?;
        let next_pos = self.position_after(&state.pos, executed);
        let next_battery = state.battery - executed.battery_cost();
        let next_state = State {
            pos: next_pos,
            battery: next_battery,
        };
        let terminal = next_state.is_terminal();
        if terminal && !self.at_goal(&next_pos) {
            return Err(Error::invariant(format!(
                "battery exhausted away from the end position, at ({}, {})",
                next_pos.x, next_pos.y
            )));
        }
        if next_battery + POS_EPS < self.min_battery_to_goal(&next_pos) {
            return Err(Error::invariant(
                "safety controller admitted a battery-stranding action",
            ));
        }
        let mut collected = 0.0;
        for k in 0..self.world.num_nodes() {
            collected += throughput(self.radio, self.world.gain_db(k, next_pos));
        }
        let reward = if penalized {
            collected - self.lambda
        } else {
            collected
        };
        Ok(StepOutcome {
            next_state,
            executed,
            collected,
            reward,
            penalized,
            terminal,
        })
    }
}

/// A decision-maker driving episodes. `observe` sees every transition right
/// after it happens and may train on it, returning the training loss.
pub trait Agent {
    fn act(&mut self, state: &State) -> Action;
    fn observe(&mut self, transition: &Transition) -> Result<Option<f64>>;
}

/// Wraps a plain policy function as a non-learning agent.
pub struct PolicyAgent<F: FnMut(&State) -> Action>(pub F);

impl<F: FnMut(&State) -> Action> Agent for PolicyAgent<F> {
    fn act(&mut self, state: &State) -> Action {
        (self.0)(state)
    }

    fn observe(&mut self, _transition: &Transition) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Complete record of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub world: WorldKind,
    /// Visited states, starting with the initial one; length = steps + 1.
    pub trajectory: Vec<State>,
    pub proposed: Vec<Action>,
    pub executed: Vec<Action>,
    pub rewards: Vec<f64>,
    pub collected: Vec<f64>,
    pub penalized: Vec<bool>,
    pub transitions: Vec<Transition>,
    /// Losses reported by the agent's `observe` calls (only steps on which it
    /// actually trained).
    pub losses: Vec<f64>,
    pub total_reward: f64,
    pub total_collected: f64,
}

impl EpisodeRecord {
    pub fn steps(&self) -> usize {
        self.proposed.len()
    }

    pub fn final_state(&self) -> &State {
        self.trajectory.last().unwrap()
    }

    pub fn mean_loss(&self) -> Option<f64> {
        if self.losses.is_empty() {
            None
        } else {
            Some(self.losses.iter().sum::<f64>() / self.losses.len() as f64)
        }
    }

    /// JSON export with the trajectory as `[x, y, z, battery]` rows.
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "world": match self.world { WorldKind::Truth => "truth", WorldKind::Learned => "learned" },
            "trajectory": self
                .trajectory
                .iter()
                .map(|s| json!([s.pos.x, s.pos.y, s.pos.z, s.battery]))
                .collect::<Vec<_>>(),
            "proposed_actions": self.proposed.iter().map(|a| a.name()).collect::<Vec<_>>(),
            "executed_actions": self.executed.iter().map(|a| a.name()).collect::<Vec<_>>(),
            "rewards": self.rewards,
            "collected": self.collected,
            "penalized": self.penalized,
            "total_reward": self.total_reward,
            "total_collected": self.total_collected,
        })
    }
}

/// Rolls out one full episode from the initial state until the battery is
/// exhausted, which the safety controller guarantees happens exactly at the
/// end position.
///
/// `on_segment(step_index, from, to)` fires after every executed step; the
/// caller uses it to collect radio measurements along real-world segments
/// (and passes a no-op for simulated worlds).
pub fn run_episode(
    mdp: &Mdp,
    agent: &mut dyn Agent,
    mut on_segment: impl FnMut(u32, Point3, Point3) -> Result<()>,
) -> Result<EpisodeRecord> {
    let mut state = mdp.initial_state();
    let mut record = EpisodeRecord {
        world: mdp.world.kind(),
        trajectory: vec![state],
        proposed: Vec::new(),
        executed: Vec::new(),
        rewards: Vec::new(),
        collected: Vec::new(),
        penalized: Vec::new(),
        transitions: Vec::new(),
        losses: Vec::new(),
        total_reward: 0.0,
        total_collected: 0.0,
    };
    // Battery drops by at least 0.5 per step, so this bound is unreachable
    // unless the dynamics are broken.
    let max_steps = (mdp.mission.battery * 2.0).ceil() as usize + 1;
    let mut step_index = 0u32;
    while !state.is_terminal() {
        if record.proposed.len() >= max_steps {
            return Err(Error::invariant("episode exceeded the battery step bound"));
        }
        let proposed = agent.act(&state);
        let outcome = mdp.step(&state, proposed)?;
        let transition = Transition {
            state,
            action: proposed,
            reward: outcome.reward,
            next: outcome.next_state,
            terminal: outcome.terminal,
        };
        on_segment(step_index, state.pos, outcome.next_state.pos)?;
        if let Some(loss) = agent.observe(&transition)? {
            record.losses.push(loss);
        }
        record.trajectory.push(outcome.next_state);
        record.proposed.push(proposed);
        record.executed.push(outcome.executed);
        record.rewards.push(outcome.reward);
        record.collected.push(outcome.collected);
        record.penalized.push(outcome.penalized);
        record.transitions.push(transition);
        record.total_reward += outcome.reward;
        record.total_collected += outcome.collected;
        state = outcome.next_state;
        step_index += 1;
    }
    Ok(record)
}
