//! Ground-truth radio channel and measurement collection.
//!
//! The air-to-ground channel is segmented log-distance: a link is LoS or NLoS
//! depending on city geometry, and the gain in dB is
//! `g = beta - 10 * alpha * log10(d) + eta` with `eta ~ N(0, sigma^2)` drawn
//! per segment class. Rewards use the noiseless (expected) gain; shadowing
//! enters only the measurements the agent records.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{GroundPoint, Point3};
use crate::rng;
use crate::scenario::{CityMap, NodeSet};

/// Log-distance parameters of one propagation class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentParams {
    /// Path-loss exponent.
    pub alpha: f64,
    /// Gain offset at 1 m (dB).
    pub beta_db: f64,
    /// Shadowing standard deviation (dB).
    pub sigma_db: f64,
}

/// The two-class channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    pub los: SegmentParams,
    pub nlos: SegmentParams,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            los: SegmentParams {
                alpha: 2.3,
                beta_db: -35.0,
                sigma_db: 2.0,
            },
            nlos: SegmentParams {
                alpha: 3.3,
                beta_db: -40.0,
                sigma_db: 5.0,
            },
        }
    }
}

impl ChannelParams {
    pub fn segment(&self, los: bool) -> &SegmentParams {
        if los {
            &self.los
        } else {
            &self.nlos
        }
    }

    pub fn sigma_db(&self, los: bool) -> f64 {
        self.segment(los).sigma_db
    }

    /// Expected (noiseless) gain at distance `d` for a class.
    pub fn expected_gain_db(&self, distance: f64, los: bool) -> f64 {
        let p = self.segment(los);
        p.beta_db - 10.0 * p.alpha * distance.log10()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("los", self.los), ("nlos", self.nlos)] {
            if p.alpha <= 0.0 || p.sigma_db <= 0.0 {
                return Err(Error::config(format!(
                    "channel.{name}: alpha and sigma_db must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Link-budget constants of the uplink.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioParams {
    /// Node transmit power P (watts).
    pub tx_power_w: f64,
    /// Receiver noise power (watts).
    pub noise_power_w: f64,
    /// Number of nodes K sharing the TDMA frame.
    pub node_count: usize,
}

impl Default for RadioParams {
    fn default() -> Self {
        // Sized so a 100 m LoS link under the default channel sits at 30 dB SNR.
        RadioParams {
            tx_power_w: 10f64.powf(-1.9),
            noise_power_w: 1e-13,
            node_count: 6,
        }
    }
}

impl RadioParams {
    pub fn validate(&self) -> Result<()> {
        if self.tx_power_w <= 0.0 || self.noise_power_w <= 0.0 {
            return Err(Error::config("radio: powers must be positive"));
        }
        if self.node_count == 0 {
            return Err(Error::config("radio: node_count must be at least 1"));
        }
        Ok(())
    }

    /// Linear SNR of a link with channel gain `gain_db`.
    pub fn snr(&self, gain_db: f64) -> f64 {
        self.tx_power_w * 10f64.powf(gain_db / 10.0) / self.noise_power_w
    }
}

/// Per-step throughput of one node's uplink under equal TDMA time sharing:
/// `(1/K) * log2(1 + SNR)` (bits per channel use, scaled by the frame share).
pub fn throughput(radio: &RadioParams, gain_db: f64) -> f64 {
    radio.snr(gain_db).ln_1p() / std::f64::consts::LN_2 / radio.node_count as f64
}

/// Link geometry between the UAV and a ground node.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryFeatures {
    /// 3-D link distance d.
    pub distance: f64,
    /// Ground-projection distance.
    pub ground_distance: f64,
    /// Elevation angle in radians: `asin(height_difference / d)`, in [0, pi/2].
    pub elevation: f64,
}

impl GeometryFeatures {
    pub fn between(uav: Point3, node: GroundPoint) -> GeometryFeatures {
        let n3 = node.at(0.0);
        let ground = uav.ground_distance(&n3);
        let distance = uav.distance(&n3);
        let elevation = if distance > 0.0 {
            (uav.z / distance).clamp(-1.0, 1.0).asin()
        } else {
            0.0
        };
        GeometryFeatures {
            distance,
            ground_distance: ground,
            elevation,
        }
    }
}

/// Expected gain of the link from `node` to the UAV at `uav`, with its LoS
/// classification from the city geometry.
pub fn expected_gain_db(
    channel: &ChannelParams,
    map: &CityMap,
    uav: Point3,
    node: GroundPoint,
) -> (f64, bool) {
    let los = map.is_los(uav, node.at(0.0));
    let d = uav.distance(&node.at(0.0));
    (channel.expected_gain_db(d, los), los)
}

/// One draw of the link gain including shadowing noise (i.i.d. per call).
pub fn sampled_gain_db(
    channel: &ChannelParams,
    map: &CityMap,
    uav: Point3,
    node: GroundPoint,
    rng: &mut ChaCha8Rng,
) -> (f64, bool) {
    let (mean, los) = expected_gain_db(channel, map, uav, node);
    (mean + rng::normal(rng, 0.0, channel.sigma_db(los)), los)
}

/// One recorded RSS measurement. The LoS flag is filled in only once the
/// measurement has been classified (anchors against the map; candidate
/// positions per localization hypothesis); collection leaves it empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Mission time step during which the measurement was taken.
    pub step: u32,
    /// UAV position at the sampling point.
    pub uav: Point3,
    /// Transmitting node id.
    pub node: usize,
    /// Measured channel gain (dB), including shadowing.
    pub gain_db: f64,
    /// LoS classification, if assigned.
    pub los: Option<bool>,
}

/// Samples the radio environment along one traversed segment: positions every
/// `spacing` metres from just after `from` up to and including `to`, one
/// measurement per node at each position. A hover (zero-length segment)
/// yields exactly one sampling position. Shadowing draws are i.i.d. across
/// positions, nodes, and calls.
#[allow(clippy::too_many_arguments)]
pub fn collect_measurements(
    map: &CityMap,
    channel: &ChannelParams,
    nodes: &NodeSet,
    step: u32,
    from: Point3,
    to: Point3,
    spacing: f64,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Measurement>,
) {
    debug_assert!(spacing > 0.0);
    let length = from.distance(&to);
    let mut positions = Vec::new();
    if length < spacing * 1e-9 {
        positions.push(to);
    } else {
        let inner = (length / spacing - 1e-9).ceil() as usize - 1;
        for i in 1..=inner {
            let t = i as f64 * spacing / length;
            positions.push(Point3::new(
                from.x + (to.x - from.x) * t,
                from.y + (to.y - from.y) * t,
                from.z + (to.z - from.z) * t,
            ));
        }
        positions.push(to);
    }
    for pos in positions {
        for (node, p) in nodes.positions.iter().enumerate() {
            let (gain_db, _) = sampled_gain_db(channel, map, pos, *p, rng);
            out.push(Measurement {
                step,
                uav: pos,
                node,
                gain_db,
                los: None,
            });
        }
    }
}

/// Writes measurements as CSV: `step,x,y,z,node_id,gain_db,los_flag` with an
/// empty flag for unclassified rows.
pub fn write_measurements_csv(path: &Path, measurements: &[Measurement]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,x,y,z,node_id,gain_db,los_flag")?;
    for m in measurements {
        let flag = match m.los {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            m.step, m.uav.x, m.uav.y, m.uav.z, m.node, m.gain_db, flag
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a measurement CSV written by [`write_measurements_csv`].
pub fn read_measurements_csv(path: &Path) -> Result<Vec<Measurement>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::config(format!("{}: empty measurement file", path.display())))?;
    if header != "step,x,y,z,node_id,gain_db,los_flag" {
        return Err(Error::config(format!(
            "{}: unexpected measurement header '{header}'",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::config(format!(
                "{}: line {}: expected 7 fields, found {}",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                Error::config(format!(
                    "{}: line {}: invalid {what} '{s}'",
                    path.display(),
                    i + 2
                ))
            })
        };
        let step: u32 = fields[0].parse().map_err(|_| {
            Error::config(format!(
                "{}: line {}: invalid step '{}'",
                path.display(),
                i + 2,
                fields[0]
            ))
        })?;
        let node: usize = fields[4].parse().map_err(|_| {
            Error::config(format!(
                "{}: line {}: invalid node id '{}'",
                path.display(),
                i + 2,
                fields[4]
            ))
        })?;
        let los = match fields[6] {
            "" => None,
            "1" => Some(true),
            "0" => Some(false),
            other => {
                return Err(Error::config(format!(
                    "{}: line {}: invalid los flag '{other}'",
                    path.display(),
                    i + 2
                )))
            }
        };
        out.push(Measurement {
            step,
            uav: Point3 {
                x: parse_f(fields[1], "x")?,
                y: parse_f(fields[2], "y")?,
                z: parse_f(fields[3], "z")?,
            },
            node,
            gain_db: parse_f(fields[5], "gain")?,
            los,
        });
    }
    Ok(out)
}
