//! City maps, node placement, mission geometry, and the scenario config file.
//!
//! The city is a Manhattan grid: rectangular blocks separated by streets, one
//! building per block, heights drawn from a clipped Rayleigh distribution.
//! Everything is deterministic given the same seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dqn::HyperParams;
use crate::env::Action;
use crate::error::{Error, Result};
use crate::geom::{GroundPoint, Point3};
use crate::radio::{ChannelParams, RadioParams};
use crate::rng;

/// Ground-projection sampling resolution of the line-of-sight test (metres).
pub const LOS_RESOLUTION: f64 = 1.0;

/// Comparison slack for lattice-alignment checks (metres).
const LATTICE_EPS: f64 = 1e-9;

/// An axis-aligned building with a flat roof.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Building {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub height: f64,
}

impl Building {
    /// Whether the ground point lies inside the footprint (closed rectangle).
    pub fn contains_ground(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// Height field at [`LOS_RESOLUTION`] used by the line-of-sight test: each
/// cell stores the tallest building overlapping it (0 on streets).
#[derive(Clone, Debug, Default)]
struct Raster {
    cols: usize,
    rows: usize,
    heights: Vec<f64>,
    max_height: f64,
}

impl Raster {
    fn build(width: f64, depth: f64, buildings: &[Building]) -> Raster {
        let cols = (width / LOS_RESOLUTION).ceil().max(1.0) as usize;
        let rows = (depth / LOS_RESOLUTION).ceil().max(1.0) as usize;
        let mut heights: Vec<f64> = vec![0.0; cols * rows];
        let mut max_height: f64 = 0.0;
        for b in buildings {
            max_height = max_height.max(b.height);
            let i0 = (b.x_min.floor().max(0.0) as usize).min(cols - 1);
            let i1 = (b.x_max.ceil().max(0.0) as usize).min(cols);
            let j0 = (b.y_min.floor().max(0.0) as usize).min(rows - 1);
            let j1 = (b.y_max.ceil().max(0.0) as usize).min(rows);
            for j in j0..j1 {
                // Skip cells that only touch the footprint along an edge.
                if (j + 1) as f64 <= b.y_min || (j as f64) >= b.y_max {
                    continue;
                }
                for i in i0..i1 {
                    if (i + 1) as f64 <= b.x_min || (i as f64) >= b.x_max {
                        continue;
                    }
                    let cell = &mut heights[j * cols + i];
                    *cell = (*cell).max(b.height);
                }
            }
        }
        Raster {
            cols,
            rows,
            heights,
            max_height,
        }
    }

    #[inline]
    fn height_at(&self, x: f64, y: f64) -> f64 {
        let i = (x.floor() as i64).clamp(0, self.cols as i64 - 1) as usize;
        let j = (y.floor() as i64).clamp(0, self.rows as i64 - 1) as usize;
        self.heights[j * self.cols + i]
    }
}

/// The city: map extent plus building list. The serialized form carries only
/// the logical fields; the internal height raster is rebuilt on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "RawCityMap", into = "RawCityMap")]
pub struct CityMap {
    pub width: f64,
    pub depth: f64,
    pub buildings: Vec<Building>,
    #[serde(skip)]
    raster: Raster,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCityMap {
    width: f64,
    depth: f64,
    #[serde(default)]
    buildings: Vec<Building>,
}

impl From<RawCityMap> for CityMap {
    fn from(raw: RawCityMap) -> Self {
        CityMap::new(raw.width, raw.depth, raw.buildings)
    }
}

impl From<CityMap> for RawCityMap {
    fn from(map: CityMap) -> Self {
        RawCityMap {
            width: map.width,
            depth: map.depth,
            buildings: map.buildings,
        }
    }
}

impl PartialEq for CityMap {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width && self.depth == other.depth && self.buildings == other.buildings
    }
}

impl CityMap {
    pub fn new(width: f64, depth: f64, buildings: Vec<Building>) -> CityMap {
        let raster = Raster::build(width, depth, &buildings);
        CityMap {
            width,
            depth,
            buildings,
            raster,
        }
    }

    /// Tallest building on the map (0 for an empty map).
    pub fn max_building_height(&self) -> f64 {
        self.raster.max_height
    }

    /// Whether a ground point lies inside any building footprint (exact
    /// closed-rectangle test; used for placement, not for LoS).
    pub fn contains_building(&self, x: f64, y: f64) -> bool {
        self.buildings.iter().any(|b| b.contains_ground(x, y))
    }

    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && x <= self.width && y >= 0.0 && y <= self.depth
    }

    /// Line-of-sight between two points, sampling the segment at
    /// [`LOS_RESOLUTION`] along its ground projection against the rasterized
    /// height field. A sample strictly below a roof blocks the link; grazing
    /// a roof exactly does not. Endpoints are not sampled.
    pub fn is_los(&self, a: Point3, b: Point3) -> bool {
        let (lo, hi) = if a.z <= b.z { (a, b) } else { (b, a) };
        let dbar = lo.ground_distance(&hi);
        let samples = (dbar / LOS_RESOLUTION).ceil() as i64 - 1;
        if samples < 1 {
            return true;
        }
        let dz = hi.z - lo.z;
        let inv = 1.0 / dbar;
        let (ux, uy) = ((hi.x - lo.x) * inv, (hi.y - lo.y) * inv);
        let max_h = self.raster.max_height;
        for i in 1..=samples {
            let off = i as f64 * LOS_RESOLUTION;
            let z = lo.z + dz * off * inv;
            // The segment only rises with offset; nothing above the tallest
            // roof can be occluded.
            if z >= max_h {
                break;
            }
            if self.raster.height_at(lo.x + ux * off, lo.y + uy * off) > z {
                return false;
            }
        }
        true
    }
}

/// Shape parameters for the generated Manhattan-grid city.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockSpec {
    pub blocks_x: usize,
    pub blocks_y: usize,
    /// Street width between adjacent building footprints (metres).
    pub street_width: f64,
    /// Rayleigh scale of the building-height draw.
    pub height_scale: f64,
    pub height_min: f64,
    pub height_max: f64,
}

impl Default for BlockSpec {
    fn default() -> Self {
        BlockSpec {
            blocks_x: 4,
            blocks_y: 4,
            street_width: 60.0,
            height_scale: 18.0,
            height_min: 5.0,
            height_max: 40.0,
        }
    }
}

/// Generates the Manhattan-grid city: one building per block, inset from the
/// block edges by half the street width, heights Rayleigh-drawn and clipped.
pub fn generate_city(
    width: f64,
    depth: f64,
    spec: &BlockSpec,
    rng: &mut ChaCha8Rng,
) -> Result<CityMap> {
    if width <= 0.0 || depth <= 0.0 {
        return Err(Error::config("map extent must be positive"));
    }
    if spec.blocks_x == 0 || spec.blocks_y == 0 {
        return Err(Error::config("block counts must be at least 1"));
    }
    let pitch_x = width / spec.blocks_x as f64;
    let pitch_y = depth / spec.blocks_y as f64;
    if spec.street_width <= 0.0 || spec.street_width >= pitch_x.min(pitch_y) {
        return Err(Error::config(format!(
            "street width {} must lie in (0, {})",
            spec.street_width,
            pitch_x.min(pitch_y)
        )));
    }
    if spec.height_min > spec.height_max || spec.height_min < 0.0 {
        return Err(Error::config("invalid building height range"));
    }
    let inset = spec.street_width / 2.0;
    let mut buildings = Vec::with_capacity(spec.blocks_x * spec.blocks_y);
    for by in 0..spec.blocks_y {
        for bx in 0..spec.blocks_x {
            let height = rng::rayleigh(rng, spec.height_scale)
                .clamp(spec.height_min, spec.height_max);
            buildings.push(Building {
                x_min: bx as f64 * pitch_x + inset,
                y_min: by as f64 * pitch_y + inset,
                x_max: (bx + 1) as f64 * pitch_x - inset,
                y_max: (by + 1) as f64 * pitch_y - inset,
                height,
            });
        }
    }
    Ok(CityMap::new(width, depth, buildings))
}

/// The IoT nodes: ground positions plus a flag per node marking whether its
/// position is known to the agent (anchor) or must be estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSet {
    pub positions: Vec<GroundPoint>,
    pub known: Vec<bool>,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_anchor(&self, node: usize) -> bool {
        self.known[node]
    }

    pub fn anchor_count(&self) -> usize {
        self.known.iter().filter(|&&k| k).count()
    }

    pub fn anchors(&self) -> impl Iterator<Item = (usize, GroundPoint)> + '_ {
        self.positions
            .iter()
            .enumerate()
            .filter(|(i, _)| self.known[*i])
            .map(|(i, p)| (i, *p))
    }

    pub fn unknowns(&self) -> impl Iterator<Item = (usize, GroundPoint)> + '_ {
        self.positions
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.known[*i])
            .map(|(i, p)| (i, *p))
    }

    pub fn validate(&self, map: &CityMap) -> Result<()> {
        if self.positions.len() != self.known.len() {
            return Err(Error::config(format!(
                "nodes: {} positions but {} known flags",
                self.positions.len(),
                self.known.len()
            )));
        }
        if self.positions.is_empty() {
            return Err(Error::config("nodes: at least one node is required"));
        }
        if self.anchor_count() == 0 {
            return Err(Error::config("nodes: at least one anchor is required"));
        }
        for (i, p) in self.positions.iter().enumerate() {
            if !map.in_bounds(p.x, p.y) {
                return Err(Error::config(format!(
                    "nodes: node {i} at ({}, {}) lies outside the map",
                    p.x, p.y
                )));
            }
            if map.contains_building(p.x, p.y) {
                return Err(Error::config(format!(
                    "nodes: node {i} at ({}, {}) lies inside a building footprint",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }
}

/// Places nodes uniformly on open ground. When a mission is given, placement
/// is additionally restricted to positions a battery-feasible trajectory can
/// detour past, so every node is physically reachable by the UAV.
pub fn place_nodes(
    map: &CityMap,
    count: usize,
    anchors: usize,
    mission: Option<&MissionSpec>,
    rng: &mut ChaCha8Rng,
) -> Result<NodeSet> {
    if count == 0 {
        return Err(Error::config("node count must be at least 1"));
    }
    if anchors == 0 || anchors > count {
        return Err(Error::config(format!(
            "anchor count {anchors} must lie in 1..={count}"
        )));
    }
    let budget = mission.map(|m| {
        let s = m.start.ground();
        let e = m.end.ground();
        (s, e, m.battery * m.step)
    });
    let mut positions = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while positions.len() < count {
        attempts += 1;
        if attempts > 1000 * count {
            return Err(Error::config(
                "node placement failed: no open ground satisfying the constraints",
            ));
        }
        let p = GroundPoint::new(
            rng.gen::<f64>() * map.width,
            rng.gen::<f64>() * map.depth,
        );
        if map.contains_building(p.x, p.y) {
            continue;
        }
        if let Some((s, e, max_detour)) = budget {
            let detour = (p.x - s.x).abs()
                + (p.y - s.y).abs()
                + (p.x - e.x).abs()
                + (p.y - e.y).abs();
            if detour > max_detour {
                continue;
            }
        }
        positions.push(p);
    }
    let known = (0..count).map(|i| i < anchors).collect();
    Ok(NodeSet { positions, known })
}

/// Mission geometry and resources: start/end waypoints on the flight lattice,
/// altitude, lattice step, nominal horizon, and the battery budget (in units
/// of one move; hovering costs half a unit).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissionSpec {
    pub start: Point3,
    pub end: Point3,
    pub altitude: f64,
    /// Lattice step c (metres per move).
    pub step: f64,
    /// Nominal mission horizon in time steps; the battery is the binding
    /// resource, this is kept for reporting.
    pub max_steps: u32,
    /// Battery budget b_max in move units.
    pub battery: f64,
}

impl MissionSpec {
    pub fn validate(&self, map: &CityMap) -> Result<()> {
        if self.step <= 0.0 {
            return Err(Error::config("mission: lattice step must be positive"));
        }
        if self.battery <= 0.0 {
            return Err(Error::config("mission: battery budget must be positive"));
        }
        if self.altitude <= map.max_building_height() {
            return Err(Error::config(format!(
                "mission: altitude {} must exceed the tallest building ({})",
                self.altitude,
                map.max_building_height()
            )));
        }
        for (name, p) in [("start", self.start), ("end", self.end)] {
            if p.z != self.altitude {
                return Err(Error::config(format!(
                    "mission: {name} altitude {} differs from mission altitude {}",
                    p.z, self.altitude
                )));
            }
            if !map.in_bounds(p.x, p.y) {
                return Err(Error::config(format!(
                    "mission: {name} lies outside the map"
                )));
            }
            if map.contains_building(p.x, p.y) {
                return Err(Error::config(format!(
                    "mission: {name} lies inside a building footprint"
                )));
            }
        }
        let steps = manhattan_steps(&self.start, &self.end, self.step)?;
        if (steps as f64) > self.battery {
            return Err(Error::config(format!(
                "mission: end is {steps} moves away but the battery holds {}",
                self.battery
            )));
        }
        Ok(())
    }
}

/// Number of lattice moves between two waypoints. Errors if the points are
/// not lattice-aligned or differ in altitude.
pub fn manhattan_steps(from: &Point3, to: &Point3, step: f64) -> Result<u32> {
    if (from.z - to.z).abs() > LATTICE_EPS {
        return Err(Error::usage(format!(
            "waypoints differ in altitude: {} vs {}",
            from.z, to.z
        )));
    }
    let mut total = 0u32;
    for (d, axis) in [(to.x - from.x, "x"), (to.y - from.y, "y")] {
        let n = d / step;
        if (n - n.round()).abs() > LATTICE_EPS {
            return Err(Error::usage(format!(
                "waypoints are not lattice-aligned along {axis}: offset {d} at step {step}"
            )));
        }
        total += n.round().abs() as u32;
    }
    Ok(total)
}

/// The canonical minimal move sequence between two lattice points: all x
/// moves first, then all y moves. Returns the moves and their count; the cost
/// of the path in battery units equals its length.
pub fn shortest_path(from: &Point3, to: &Point3, step: f64) -> Result<(Vec<Action>, u32)> {
    let total = manhattan_steps(from, to, step)?;
    let mut path = Vec::with_capacity(total as usize);
    let nx = ((to.x - from.x) / step).round() as i64;
    let ny = ((to.y - from.y) / step).round() as i64;
    let x_action = if nx >= 0 { Action::Right } else { Action::Left };
    let y_action = if ny >= 0 { Action::Up } else { Action::Down };
    path.extend(std::iter::repeat(x_action).take(nx.unsigned_abs() as usize));
    path.extend(std::iter::repeat(y_action).take(ny.unsigned_abs() as usize));
    Ok((path, total))
}

/// The complete scenario: everything a training run needs, serialized as a
/// sectioned TOML file (see the repository README for the schema).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub map: CityMap,
    pub nodes: NodeSet,
    pub mission: MissionSpec,
    pub channel: ChannelParams,
    pub radio: RadioParams,
    pub hyper: HyperParams,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.map.width <= 0.0 || self.map.depth <= 0.0 {
            return Err(Error::config("map extent must be positive"));
        }
        for (i, b) in self.map.buildings.iter().enumerate() {
            if b.x_min >= b.x_max || b.y_min >= b.y_max || b.height <= 0.0 {
                return Err(Error::config(format!("map: degenerate building {i}")));
            }
        }
        self.nodes.validate(&self.map)?;
        self.mission.validate(&self.map)?;
        self.channel.validate()?;
        self.radio.validate()?;
        if self.radio.node_count != self.nodes.len() {
            return Err(Error::config(format!(
                "radio: node_count {} does not match the {} configured nodes",
                self.radio.node_count,
                self.nodes.len()
            )));
        }
        self.hyper.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("serializing scenario: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<ScenarioConfig> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("parsing scenario: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// Knobs for [`generate_scenario`].
#[derive(Clone, Debug)]
pub struct GenSpec {
    pub width: f64,
    pub depth: f64,
    pub blocks: BlockSpec,
    pub node_count: usize,
    pub anchor_count: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            width: 500.0,
            depth: 500.0,
            blocks: BlockSpec::default(),
            node_count: 6,
            anchor_count: 2,
        }
    }
}

/// Builds the default urban scenario for a seed: generated city, uniformly
/// placed nodes, and the default mission, channel, radio, and training
/// parameters. Deterministic: the same seed always yields the same config.
pub fn generate_scenario(seed: u64, spec: &GenSpec) -> Result<ScenarioConfig> {
    let mut city_rng = rng::substream(seed, "city", 0);
    let map = generate_city(spec.width, spec.depth, &spec.blocks, &mut city_rng)?;
    let mission = MissionSpec {
        start: Point3::new(100.0, 100.0, 60.0),
        end: Point3::new(300.0, 400.0, 60.0),
        altitude: 60.0,
        step: 50.0,
        max_steps: 20,
        battery: 20.0,
    };
    let mut node_rng = rng::substream(seed, "nodes", 0);
    let nodes = place_nodes(
        &map,
        spec.node_count,
        spec.anchor_count,
        Some(&mission),
        &mut node_rng,
    )?;
    let cfg = ScenarioConfig {
        seed,
        map,
        nodes,
        mission,
        channel: ChannelParams::default(),
        radio: RadioParams {
            node_count: spec.node_count,
            ..RadioParams::default()
        },
        hyper: HyperParams::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Convenience: the default scenario at default shape for a seed.
pub fn default_scenario(seed: u64) -> ScenarioConfig {
    generate_scenario(seed, &GenSpec::default())
        .expect("the default scenario parameters are valid")
}
