//! Estimates unknown node positions from the UAV's RSS measurements: every
//! candidate ground point is scored by the measurement log-likelihood under
//! the learned channel (classifying each measurement as LoS/NLoS via the 3D
//! map *for that candidate*), and a particle swarm searches the map for the
//! minimizer. Each node is localized independently.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel_model::ChannelNet;
use crate::error::{Error, Result};
use crate::geom::GroundPoint;
use crate::mlp::Scratch;
use crate::radio::{GeometryFeatures, Measurement};
use crate::rng::substream;
use crate::scenario::{CityMap, NodeSet};

/// Particle-swarm settings. Defaults are the full-strength budget for
/// standalone localization; the training loop ships a lighter override.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsoParams {
    /// Swarm size C.
    pub particles: usize,
    /// Iteration count τ.
    pub iterations: usize,
    /// Inertia weight on the previous velocity.
    pub inertia: f64,
    /// Pull toward the particle's own best position.
    pub cognitive: f64,
    /// Pull toward the swarm's best position.
    pub social: f64,
    /// Maximum velocity magnitude in meters per iteration.
    pub velocity_cap: f64,
    /// Upper bound on measurements scored per node (0 = all); beyond it the
    /// list is thinned evenly.
    pub max_measurements: usize,
}

impl Default for PsoParams {
    fn default() -> PsoParams {
        PsoParams {
            particles: 300,
            iterations: 100,
            inertia: 0.72,
            cognitive: 1.49,
            social: 1.49,
            velocity_cap: 50.0,
            max_measurements: 0,
        }
    }
}

impl PsoParams {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 || self.iterations == 0 {
            return Err(Error::config("PSO needs at least one particle and one iteration"));
        }
        if self.inertia < 0.0 || self.cognitive < 0.0 || self.social < 0.0 {
            return Err(Error::config("PSO coefficients must be non-negative"));
        }
        if !(self.velocity_cap > 0.0) {
            return Err(Error::config("PSO velocity cap must be positive"));
        }
        Ok(())
    }
}

fn likelihood_scratch(
    net: &ChannelNet,
    measurements: &[Measurement],
    candidate: GroundPoint,
    map: &CityMap,
    sigma_los: f64,
    sigma_nlos: f64,
    scratch: &mut Scratch,
) -> f64 {
    let ground = candidate.at(0.0);
    let w_los = 1.0 / (sigma_los * sigma_los);
    let w_nlos = 1.0 / (sigma_nlos * sigma_nlos);
    let mut quad = 0.0;
    let mut n_los = 0usize;
    for m in measurements {
        let los = map.is_los(m.uav, ground);
        let features = GeometryFeatures::between(m.uav, candidate);
        let r = m.gain_db - net.predict_with(&features, los, scratch);
        if los {
            n_los += 1;
            quad += w_los * r * r;
        } else {
            quad += w_nlos * r * r;
        }
    }
    ((sigma_los * sigma_los) / (sigma_nlos * sigma_nlos)).ln() * n_los as f64 + quad
}

/// Negative log-likelihood (up to a candidate-independent constant) that the
/// node sits at `candidate`, given the measurements taken for it. Lower is
/// better. Each measurement is LoS/NLoS-classified against `candidate`
/// through the map; an empty list scores 0.
pub fn particle_likelihood(
    net: &ChannelNet,
    measurements: &[Measurement],
    candidate: GroundPoint,
    map: &CityMap,
    sigma_los: f64,
    sigma_nlos: f64,
) -> f64 {
    if measurements.is_empty() {
        log::warn!("scoring a candidate with no measurements; likelihood is degenerate");
        return 0.0;
    }
    let mut scratch = Scratch::default();
    likelihood_scratch(net, measurements, candidate, map, sigma_los, sigma_nlos, &mut scratch)
}

fn sample_outdoor_point<R: Rng>(map: &CityMap, rng: &mut R) -> GroundPoint {
    for _ in 0..1000 {
        let p = GroundPoint {
            x: rng.gen::<f64>() * map.width,
            y: rng.gen::<f64>() * map.depth,
        };
        if !map.contains_building(p.x, p.y) {
            return p;
        }
    }
    // Pathological map (almost fully built over): accept anything in bounds.
    GroundPoint {
        x: rng.gen::<f64>() * map.width,
        y: rng.gen::<f64>() * map.depth,
    }
}

/// Canonical global-best particle swarm minimizing `f` over the map
/// rectangle. Initial particles are drawn uniformly over the outdoor area
/// (nodes are street-level devices); `warm`, when given, replaces the first
/// particle's start. Returns the best position with its score, plus the
/// per-iteration global-best trace (index 0 is the post-initialization
/// best), which is non-increasing by construction.
pub fn pso_minimize_traced<F: FnMut(GroundPoint) -> f64>(
    mut f: F,
    map: &CityMap,
    params: &PsoParams,
    warm: Option<GroundPoint>,
    rng: &mut ChaCha8Rng,
) -> (GroundPoint, f64, Vec<f64>) {
    let c = params.particles;
    let mut pos: Vec<GroundPoint> = (0..c).map(|_| sample_outdoor_point(map, rng)).collect();
    if let Some(w) = warm {
        pos[0] = GroundPoint {
            x: w.x.clamp(0.0, map.width),
            y: w.y.clamp(0.0, map.depth),
        };
    }
    let mut vel = vec![(0.0f64, 0.0f64); c];
    let mut best_pos = pos.clone();
    let mut best_score: Vec<f64> = pos.iter().map(|p| f(*p)).collect();
    let mut g_idx = 0;
    for j in 1..c {
        if best_score[j] < best_score[g_idx] {
            g_idx = j;
        }
    }
    let mut g_pos = best_pos[g_idx];
    let mut g_score = best_score[g_idx];
    let mut trace = Vec::with_capacity(params.iterations + 1);
    trace.push(g_score);

    for _iter in 0..params.iterations {
        for j in 0..c {
            let (r1x, r1y) = (rng.gen::<f64>(), rng.gen::<f64>());
            let (r2x, r2y) = (rng.gen::<f64>(), rng.gen::<f64>());
            let mut vx = params.inertia * vel[j].0
                + params.cognitive * r1x * (best_pos[j].x - pos[j].x)
                + params.social * r2x * (g_pos.x - pos[j].x);
            let mut vy = params.inertia * vel[j].1
                + params.cognitive * r1y * (best_pos[j].y - pos[j].y)
                + params.social * r2y * (g_pos.y - pos[j].y);
            let speed = (vx * vx + vy * vy).sqrt();
            if speed > params.velocity_cap {
                let s = params.velocity_cap / speed;
                vx *= s;
                vy *= s;
            }
            vel[j] = (vx, vy);
            pos[j] = GroundPoint {
                x: (pos[j].x + vx).clamp(0.0, map.width),
                y: (pos[j].y + vy).clamp(0.0, map.depth),
            };
            let score = f(pos[j]);
            if score < best_score[j] {
                best_score[j] = score;
                best_pos[j] = pos[j];
                if score < g_score {
                    g_score = score;
                    g_pos = pos[j];
                }
            }
        }
        trace.push(g_score);
    }
    (g_pos, g_score, trace)
}

/// [`pso_minimize_traced`] without the trace.
pub fn pso_minimize<F: FnMut(GroundPoint) -> f64>(
    f: F,
    map: &CityMap,
    params: &PsoParams,
    warm: Option<GroundPoint>,
    rng: &mut ChaCha8Rng,
) -> (GroundPoint, f64) {
    let (p, s, _) = pso_minimize_traced(f, map, params, warm, rng);
    (p, s)
}

fn thin_measurements(measurements: &[Measurement], cap: usize) -> Vec<Measurement> {
    if cap == 0 || measurements.len() <= cap {
        measurements.to_vec()
    } else {
        (0..cap)
            .map(|i| measurements[i * measurements.len() / cap].clone())
            .collect()
    }
}

/// Localizes one node by particle swarm over its measurement likelihood.
pub fn pso_localize(
    net: &ChannelNet,
    measurements: &[Measurement],
    map: &CityMap,
    sigma_los: f64,
    sigma_nlos: f64,
    params: &PsoParams,
    warm: Option<GroundPoint>,
    rng: &mut ChaCha8Rng,
) -> (GroundPoint, f64) {
    if measurements.is_empty() {
        log::warn!("particle swarm launched with no measurements; result is arbitrary");
    }
    let thinned = thin_measurements(measurements, params.max_measurements);
    let mut scratch = Scratch::default();
    pso_minimize(
        |p| likelihood_scratch(net, &thinned, p, map, sigma_los, sigma_nlos, &mut scratch),
        map,
        params,
        warm,
        rng,
    )
}

/// Settings for the deterministic refinement pass run once after training.
///
/// With many measurements the likelihood minimum at the true node position
/// becomes extremely narrow (a couple of meters) while spurious local minima
/// of comparable depth dot the rest of the map, so a cold global swarm finds
/// it only by luck. The refinement pass instead scans a fine grid of
/// candidate patches centered on the estimates produced across the training
/// rounds — which in practice visit the true basin many times — and then
/// polishes the best grid point with a shrinking-step pattern search on the
/// full measurement set. No randomness is involved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineParams {
    /// Half-width of the square patch scanned around each candidate, meters.
    pub patch_half_width: f64,
    /// Grid spacing inside a patch, meters. Must be fine enough to land
    /// inside the narrow true basin (about 1.5 m in practice).
    pub patch_spacing: f64,
    /// Measurement cap while scoring grid points (0 = all); the polish step
    /// always uses every measurement.
    pub score_cap: usize,
    /// Candidates closer than this to an already-kept one are dropped.
    pub dedupe_radius: f64,
    /// Upper bound on deduplicated patch centers per node.
    pub max_centers: usize,
}

impl Default for RefineParams {
    fn default() -> RefineParams {
        RefineParams {
            patch_half_width: 12.0,
            patch_spacing: 1.2,
            score_cap: 768,
            dedupe_radius: 8.0,
            max_centers: 12,
        }
    }
}

impl RefineParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.patch_half_width > 0.0) || !(self.patch_spacing > 0.0) {
            return Err(Error::config("refinement patch extent and spacing must be positive"));
        }
        if self.patch_spacing > 2.0 * self.patch_half_width {
            return Err(Error::config("refinement spacing exceeds the patch size"));
        }
        if !(self.dedupe_radius >= 0.0) {
            return Err(Error::config("refinement dedupe radius must be non-negative"));
        }
        if self.max_centers == 0 {
            return Err(Error::config("refinement needs at least one patch center"));
        }
        Ok(())
    }
}

/// Shrinking-step pattern search: probes the 8-neighborhood at the current
/// step size, moves while improving, halves the step when stuck. Positions
/// are clamped to the map rectangle. Deterministic.
fn pattern_polish<F: FnMut(GroundPoint) -> f64>(
    mut f: F,
    start: GroundPoint,
    start_step: f64,
    min_step: f64,
    map: &CityMap,
) -> (GroundPoint, f64) {
    let clamp = |p: GroundPoint| GroundPoint {
        x: p.x.clamp(0.0, map.width),
        y: p.y.clamp(0.0, map.depth),
    };
    let mut best = clamp(start);
    let mut best_score = f(best);
    let mut step = start_step;
    while step >= min_step {
        let mut moved = false;
        for (dx, dy) in [
            (1.0, 0.0),
            (-1.0, 0.0),
            (0.0, 1.0),
            (0.0, -1.0),
            (1.0, 1.0),
            (1.0, -1.0),
            (-1.0, 1.0),
            (-1.0, -1.0),
        ] {
            let p = clamp(GroundPoint {
                x: best.x + step * dx,
                y: best.y + step * dy,
            });
            let s = f(p);
            if s < best_score {
                best = p;
                best_score = s;
                moved = true;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (best, best_score)
}

/// Deterministic full-accuracy localization of one node from a set of
/// candidate positions (typically the estimates of every training round).
/// Scores a fine grid patch around each deduplicated candidate on a capped
/// measurement subset, then pattern-polishes the winner against the full
/// set. Returns the refined position with its full-measurement score.
pub fn refine_localize(
    net: &ChannelNet,
    measurements: &[Measurement],
    map: &CityMap,
    candidates: &[GroundPoint],
    sigma_los: f64,
    sigma_nlos: f64,
    params: &RefineParams,
) -> Result<(GroundPoint, f64)> {
    params.validate()?;
    if measurements.is_empty() || candidates.is_empty() {
        return Err(Error::usage(
            "refinement needs at least one measurement and one candidate",
        ));
    }
    let capped = thin_measurements(measurements, params.score_cap);
    let mut scratch = Scratch::default();
    let mut score_capped = |p: GroundPoint| {
        likelihood_scratch(net, &capped, p, map, sigma_los, sigma_nlos, &mut scratch)
    };

    // Rank candidates by capped score, then keep spatially distinct ones.
    let mut ranked: Vec<(f64, GroundPoint)> =
        candidates.iter().map(|&c| (score_capped(c), c)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut centers: Vec<GroundPoint> = Vec::new();
    for (_, c) in &ranked {
        if centers.len() >= params.max_centers {
            break;
        }
        if centers
            .iter()
            .all(|k| (k.x - c.x).hypot(k.y - c.y) >= params.dedupe_radius)
        {
            centers.push(*c);
        }
    }

    let mut best = ranked[0].1;
    let mut best_score = ranked[0].0;
    let steps = (params.patch_half_width / params.patch_spacing).floor() as i64;
    for center in &centers {
        for i in -steps..=steps {
            for j in -steps..=steps {
                let p = GroundPoint {
                    x: (center.x + params.patch_spacing * i as f64).clamp(0.0, map.width),
                    y: (center.y + params.patch_spacing * j as f64).clamp(0.0, map.depth),
                };
                if map.contains_building(p.x, p.y) {
                    continue;
                }
                let s = score_capped(p);
                if s < best_score {
                    best = p;
                    best_score = s;
                }
            }
        }
    }

    // Polish on the full measurement set, starting one spacing out so the
    // search can leave the grid plane in any direction.
    let mut scratch_full = Scratch::default();
    let polished = pattern_polish(
        |p| likelihood_scratch(net, measurements, p, map, sigma_los, sigma_nlos, &mut scratch_full),
        best,
        params.patch_spacing,
        0.05,
        map,
    );
    Ok(polished)
}

/// Result of a full localization pass.
#[derive(Clone, Debug)]
pub struct LocalizeOutcome {
    /// Anchor positions passed through verbatim; unknown nodes estimated.
    pub nodes: NodeSet,
    /// Swarm score per node; `None` for anchors and fallback estimates.
    pub scores: Vec<Option<f64>>,
}

/// Localizes every unknown node independently. Anchors keep their true
/// positions. A node with no measurements yet keeps its previous estimate
/// (or starts at the map center); previous estimates also warm-start the
/// swarm as one injected particle. Per-node random streams are derived from
/// `(seed, round, node)` so results are independent of processing order.
#[allow(clippy::too_many_arguments)]
pub fn localize_all(
    net: &ChannelNet,
    by_node: &[Vec<Measurement>],
    map: &CityMap,
    true_nodes: &NodeSet,
    prev: Option<&NodeSet>,
    sigma_los: f64,
    sigma_nlos: f64,
    params: &PsoParams,
    seed: u64,
    round: u64,
) -> Result<LocalizeOutcome> {
    if by_node.len() != true_nodes.positions.len() {
        return Err(Error::usage(format!(
            "measurement groups for {} nodes but the scenario has {}",
            by_node.len(),
            true_nodes.positions.len()
        )));
    }
    params.validate()?;
    let mut positions = Vec::with_capacity(by_node.len());
    let mut scores = Vec::with_capacity(by_node.len());
    for k in 0..by_node.len() {
        if true_nodes.is_anchor(k) {
            positions.push(true_nodes.positions[k]);
            scores.push(None);
            continue;
        }
        let warm = prev.map(|p| p.positions[k]);
        if by_node[k].is_empty() {
            log::warn!("node {k} has no measurements yet; keeping previous estimate");
            positions.push(warm.unwrap_or(GroundPoint {
                x: map.width / 2.0,
                y: map.depth / 2.0,
            }));
            scores.push(None);
            continue;
        }
        let mut rng = substream(seed, "pso", (round << 20) | k as u64);
        let (est, score) = pso_localize(
            net,
            &by_node[k],
            map,
            sigma_los,
            sigma_nlos,
            params,
            warm,
            &mut rng,
        );
        positions.push(est);
        scores.push(Some(score));
    }
    Ok(LocalizeOutcome {
        nodes: NodeSet {
            positions,
            known: true_nodes.known.clone(),
        },
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::{train_channel, ChannelFitSettings, ClassifiedSample};
    use crate::geom::Point3;

    fn empty_map() -> CityMap {
        CityMap::new(500.0, 500.0, Vec::new())
    }

    /// A net that predicts `value` everywhere.
    fn constant_net(value: f64) -> ChannelNet {
        let mut rng = substream(1, "net-init", 0);
        let mut net = ChannelNet::new(700.0, &mut rng).unwrap();
        for p in net.net.params.iter_mut() {
            *p = 0.0;
        }
        net.out_shift = value;
        net.out_scale = 1.0;
        net
    }

    fn meas(x: f64, y: f64, z: f64, gain: f64) -> Measurement {
        Measurement {
            step: 0,
            uav: Point3 { x, y, z },
            node: 0,
            gain_db: gain,
            los: None,
        }
    }

    #[test]
    fn empty_measurements_score_zero() {
        let net = constant_net(-70.0);
        let map = empty_map();
        let s = particle_likelihood(&net, &[], GroundPoint { x: 10.0, y: 10.0 }, &map, 2.0, 5.0);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn single_zero_residual_los_measurement_scores_the_constant_term() {
        let net = constant_net(-70.0);
        let map = empty_map();
        let m = meas(100.0, 100.0, 60.0, -70.0);
        let s = particle_likelihood(&net, &[m], GroundPoint { x: 150.0, y: 150.0 }, &map, 2.0, 5.0);
        let expected = (4.0f64 / 25.0).ln();
        assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
    }

    #[test]
    fn doubling_residuals_quadruples_the_quadratic_part() {
        let net = constant_net(-70.0);
        let map = empty_map();
        let constant = (4.0f64 / 25.0).ln() * 3.0;
        let ms: Vec<Measurement> = (0..3)
            .map(|i| meas(50.0 + 100.0 * i as f64, 80.0, 60.0, -70.0 + 2.0))
            .collect();
        let ms2: Vec<Measurement> = (0..3)
            .map(|i| meas(50.0 + 100.0 * i as f64, 80.0, 60.0, -70.0 + 4.0))
            .collect();
        let cand = GroundPoint { x: 250.0, y: 250.0 };
        let s1 = particle_likelihood(&net, &ms, cand, &map, 2.0, 5.0) - constant;
        let s2 = particle_likelihood(&net, &ms2, cand, &map, 2.0, 5.0) - constant;
        assert!((s2 - 4.0 * s1).abs() < 1e-9, "{s2} vs 4*{s1}");
    }

    #[test]
    fn likelihood_is_permutation_invariant() {
        let net = constant_net(-75.0);
        let map = empty_map();
        let mut ms: Vec<Measurement> = (0..20)
            .map(|i| meas(25.0 * i as f64, 10.0 + 20.0 * i as f64, 60.0, -80.0 + i as f64))
            .collect();
        let cand = GroundPoint { x: 200.0, y: 300.0 };
        let a = particle_likelihood(&net, &ms, cand, &map, 2.0, 5.0);
        ms.reverse();
        let b = particle_likelihood(&net, &ms, cand, &map, 2.0, 5.0);
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn swarm_converges_on_a_convex_quadratic() {
        let map = empty_map();
        let target = GroundPoint { x: 210.3, y: 140.7 };
        let params = PsoParams::default();
        let mut hits = 0;
        for trial in 0..20 {
            let mut rng = substream(42, "pso", trial);
            let (best, score) = pso_minimize(
                |p| (p.x - target.x).powi(2) + (p.y - target.y).powi(2),
                &map,
                &params,
                None,
                &mut rng,
            );
            if best.distance(&target) < 1.0 {
                hits += 1;
            }
            assert!(score >= 0.0);
        }
        assert!(hits >= 19, "only {hits}/20 runs reached the analytic minimum");
    }

    #[test]
    fn global_best_is_monotone_non_increasing() {
        let map = empty_map();
        // Bumpy multimodal surface.
        let f = |p: GroundPoint| {
            ((p.x / 37.0).sin() + (p.y / 23.0).cos()) * 10.0
                + ((p.x - 300.0) / 150.0).powi(2)
                + ((p.y - 200.0) / 150.0).powi(2)
        };
        let params = PsoParams {
            particles: 40,
            iterations: 60,
            ..PsoParams::default()
        };
        let mut rng = substream(7, "pso", 0);
        let (_p, s, trace) = pso_minimize_traced(f, &map, &params, None, &mut rng);
        assert_eq!(trace.len(), 61);
        assert_eq!(*trace.last().unwrap(), s);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn same_seed_gives_identical_estimates() {
        let net = constant_net(-70.0);
        let map = empty_map();
        let ms: Vec<Measurement> = (0..10)
            .map(|i| meas(40.0 * i as f64, 30.0 * i as f64, 60.0, -72.0))
            .collect();
        let params = PsoParams {
            particles: 30,
            iterations: 20,
            ..PsoParams::default()
        };
        let run = |seed: u64| {
            let mut rng = substream(seed, "pso", 3);
            pso_localize(&net, &ms, &map, 2.0, 5.0, &params, None, &mut rng)
        };
        let (p1, s1) = run(9);
        let (p2, s2) = run(9);
        assert_eq!((p1.x, p1.y, s1), (p2.x, p2.y, s2));
        let (p3, _s3) = run(10);
        assert!(p1.x != p3.x || p1.y != p3.y);
    }

    #[test]
    fn single_warm_particle_at_the_optimum_stays_there() {
        // Measurements generated by the net itself at the true position, on
        // an empty map: the candidate equal to the truth has zero residuals
        // and the LoS-count term is position-independent, so it is globally
        // minimal; a lone particle started there must not move.
        let mut rng = substream(3, "net-init", 1);
        let net = ChannelNet::new(700.0, &mut rng).unwrap();
        let map = empty_map();
        let truth = GroundPoint { x: 260.0, y: 310.0 };
        let ms: Vec<Measurement> = (0..12)
            .map(|i| {
                let uav = Point3 {
                    x: 40.0 * i as f64,
                    y: 15.0 + 35.0 * i as f64,
                    z: 60.0,
                };
                let features = GeometryFeatures::between(uav, truth);
                Measurement {
                    step: i as u32,
                    uav,
                    node: 0,
                    gain_db: net.predict(&features, true),
                    los: None,
                }
            })
            .collect();
        let params = PsoParams {
            particles: 1,
            iterations: 25,
            ..PsoParams::default()
        };
        let mut rng = substream(3, "pso", 0);
        let (est, score) = pso_localize(&net, &ms, &map, 2.0, 5.0, &params, Some(truth), &mut rng);
        assert_eq!((est.x, est.y), (truth.x, truth.y));
        let direct = particle_likelihood(&net, &ms, truth, &map, 2.0, 5.0);
        assert!((score - direct).abs() < 1e-12);
    }

    /// End-to-end: fit a channel net to a clean log-distance law, then
    /// recover a node position from noiseless measurements of that law.
    #[test]
    fn learned_channel_recovers_a_node_within_ten_meters() {
        let law = |d: f64| -30.0 - 20.0 * d.log10();
        // Train on samples spanning the distance range seen below.
        let train_data: Vec<ClassifiedSample> = (0..400)
            .map(|i| {
                let x = 40.0 + 500.0 * (i as f64 / 399.0);
                let uav = Point3 { x, y: 0.0, z: 60.0 };
                let features =
                    GeometryFeatures::between(uav, GroundPoint { x: 0.0, y: 0.0 });
                ClassifiedSample {
                    features,
                    los: true,
                    gain_db: law(features.distance),
                }
            })
            .collect();
        let settings = ChannelFitSettings {
            max_epochs: 400,
            patience: 400,
            batch_size: 32,
            ..ChannelFitSettings::default()
        };
        let mut rng = substream(5, "channel-fit", 0);
        let (net, _report) =
            train_channel(&train_data, 700.0, 2.0, 5.0, &settings, &mut rng).unwrap();

        let map = empty_map();
        let truth = GroundPoint { x: 180.0, y: 305.0 };
        // Two perpendicular transects: measurements taken along a single
        // straight line leave a mirror ambiguity, so the path needs a corner.
        let ms: Vec<Measurement> = (0..26)
            .map(|i| {
                let uav = if i < 13 {
                    Point3 {
                        x: 40.0 * i as f64,
                        y: 400.0,
                        z: 60.0,
                    }
                } else {
                    Point3 {
                        x: 460.0,
                        y: 400.0 - 30.0 * (i - 13) as f64,
                        z: 60.0,
                    }
                };
                let d = GeometryFeatures::between(uav, truth).distance;
                Measurement {
                    step: i as u32,
                    uav,
                    node: 0,
                    gain_db: law(d),
                    los: None,
                }
            })
            .collect();
        let params = PsoParams {
            particles: 150,
            iterations: 60,
            ..PsoParams::default()
        };
        let mut rng = substream(5, "pso", 1);
        let (est, score) = pso_localize(&net, &ms, &map, 2.0, 5.0, &params, None, &mut rng);
        let err = est.distance(&truth);
        assert!(err < 10.0, "localization error {err:.1} m");

        // The deterministic refinement should tighten the swarm estimate and
        // shrug off a decoy candidate on the far side of the map.
        let candidates = vec![GroundPoint { x: 470.0, y: 30.0 }, est];
        let refine = RefineParams {
            patch_half_width: 12.0,
            patch_spacing: 1.5,
            score_cap: 0,
            ..RefineParams::default()
        };
        let (fine, fine_score) =
            refine_localize(&net, &ms, &map, &candidates, 2.0, 5.0, &refine).unwrap();
        // The likelihood minimum sits a few meters off truth here because the
        // fitted net only approximates the law; refinement finds that minimum.
        let fine_err = fine.distance(&truth);
        assert!(fine_err < 4.0, "refined error {fine_err:.2} m");
        assert!(fine_score <= score + 1e-9);
        let (again, again_score) =
            refine_localize(&net, &ms, &map, &candidates, 2.0, 5.0, &refine).unwrap();
        assert_eq!((fine.x, fine.y, fine_score), (again.x, again.y, again_score));
    }

    #[test]
    fn refinement_rejects_bad_parameters_and_empty_inputs() {
        let net = constant_net(-70.0);
        let map = empty_map();
        let ms = vec![meas(100.0, 100.0, 60.0, -70.0)];
        let cands = vec![GroundPoint { x: 50.0, y: 50.0 }];
        let bad = RefineParams { patch_spacing: 0.0, ..RefineParams::default() };
        assert!(refine_localize(&net, &ms, &map, &cands, 2.0, 5.0, &bad).is_err());
        let ok = RefineParams::default();
        assert!(refine_localize(&net, &[], &map, &cands, 2.0, 5.0, &ok).is_err());
        assert!(refine_localize(&net, &ms, &map, &[], 2.0, 5.0, &ok).is_err());
    }

    #[test]
    fn localize_all_passes_anchors_and_falls_back_without_measurements() {
        let net = constant_net(-70.0);
        let map = empty_map();
        let truth = NodeSet {
            positions: vec![
                GroundPoint { x: 100.0, y: 100.0 },
                GroundPoint { x: 400.0, y: 150.0 },
                GroundPoint { x: 250.0, y: 350.0 },
            ],
            known: vec![true, false, false],
        };
        let ms: Vec<Measurement> = (0..8)
            .map(|i| Measurement {
                node: 1,
                ..meas(60.0 * i as f64, 30.0 + 50.0 * i as f64, 60.0, -71.0)
            })
            .collect();
        let by_node = vec![Vec::new(), ms.clone(), Vec::new()];
        let params = PsoParams {
            particles: 25,
            iterations: 15,
            ..PsoParams::default()
        };
        let out = localize_all(&net, &by_node, &map, &truth, None, 2.0, 5.0, &params, 11, 0)
            .unwrap();
        // Anchor verbatim.
        assert_eq!(out.nodes.positions[0], truth.positions[0]);
        assert!(out.scores[0].is_none());
        // Unknown with measurements: estimated with a score.
        assert!(out.scores[1].is_some());
        // Unknown without measurements: map center on the first round...
        assert_eq!(out.nodes.positions[2], GroundPoint { x: 250.0, y: 250.0 });
        assert!(out.scores[2].is_none());
        assert_eq!(out.nodes.known, truth.known);

        // ...and the previous estimate afterwards.
        let prev = out.nodes.clone();
        let out2 = localize_all(
            &net, &by_node, &map, &truth, Some(&prev), 2.0, 5.0, &params, 11, 1,
        )
        .unwrap();
        assert_eq!(out2.nodes.positions[2], prev.positions[2]);

        // Per-node independence: node 1 alone gets the same estimate.
        let solo = vec![Vec::new(), ms, Vec::new()];
        let out3 =
            localize_all(&net, &solo, &map, &truth, None, 2.0, 5.0, &params, 11, 0).unwrap();
        assert_eq!(out3.nodes.positions[1], out.nodes.positions[1]);

        // Group-count mismatch is rejected.
        assert!(localize_all(
            &net,
            &[Vec::new(), Vec::new()],
            &map,
            &truth,
            None,
            2.0,
            5.0,
            &params,
            11,
            0
        )
        .is_err());
    }
}
