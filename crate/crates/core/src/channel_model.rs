//! Learns the segmented (LoS/NLoS) channel gain function from anchor-node
//! measurements. Measurements are classified against the 3D map, turned into
//! geometry features, and fitted by a small network whose weighted
//! least-squares objective is the measurement log-likelihood with the
//! classification fixed by the map (the variance terms are then constants).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{Activation, Adam, ForwardTrace, Mlp, Scratch};
use crate::radio::{GeometryFeatures, Measurement};
use crate::scenario::{CityMap, NodeSet};

/// One anchor measurement with geometry features and its map-derived
/// line-of-sight class.
#[derive(Clone, Copy, Debug)]
pub struct ClassifiedSample {
    pub features: GeometryFeatures,
    pub los: bool,
    pub gain_db: f64,
}

pub type ClassifiedDataset = Vec<ClassifiedSample>;

/// Training settings for the channel network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelFitSettings {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of samples held out for early stopping.
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Upper bound on samples used per fit (0 = unlimited); beyond it the
    /// dataset is thinned evenly. Keeps refit cost bounded as measurement
    /// history grows across training rounds.
    pub max_samples: usize,
}

impl Default for ChannelFitSettings {
    fn default() -> ChannelFitSettings {
        ChannelFitSettings {
            max_epochs: 500,
            batch_size: 128,
            learning_rate: 1e-3,
            val_fraction: 0.1,
            patience: 50,
            max_samples: 6000,
        }
    }
}

impl ChannelFitSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::config(
                "channel fit epochs, batch size, and patience must be at least 1",
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("channel fit learning rate must be positive"));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return Err(Error::config("channel fit val_fraction must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

/// The learned gain predictor: distance (normalized by `d_scale`), elevation
/// angle, and the 0/1 line-of-sight flag in; expected gain in dB out.
///
/// The inner network works in standardized target units; `out_shift` and
/// `out_scale` (the training targets' mean and spread) map its output back
/// to raw dB. Without this the optimizer would spend its whole budget
/// drifting the output level from 0 down to the −80 dB range.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChannelNet {
    pub net: Mlp,
    /// Distance normalizer, the map diagonal.
    pub d_scale: f64,
    pub out_shift: f64,
    pub out_scale: f64,
}

impl ChannelNet {
    pub const HIDDEN: [usize; 2] = [60, 30];

    pub fn new<R: Rng>(d_scale: f64, rng: &mut R) -> Result<ChannelNet> {
        if !(d_scale > 0.0) {
            return Err(Error::usage("d_scale must be positive"));
        }
        let net = Mlp::new(
            &[3, Self::HIDDEN[0], Self::HIDDEN[1], 1],
            &[Activation::Tanh, Activation::Relu, Activation::Identity],
            rng,
        )?;
        Ok(ChannelNet {
            net,
            d_scale,
            out_shift: 0.0,
            out_scale: 1.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.net.input_size() != 3 || self.net.output_size() != 1 {
            return Err(Error::config("channel network must map 3 features to 1 gain"));
        }
        if !(self.d_scale > 0.0) {
            return Err(Error::config("channel network d_scale must be positive"));
        }
        if !(self.out_scale > 0.0) || !self.out_shift.is_finite() {
            return Err(Error::config("channel network output transform is malformed"));
        }
        Ok(())
    }

    #[inline]
    fn inputs(&self, features: &GeometryFeatures, los: bool) -> [f64; 3] {
        [
            features.distance / self.d_scale,
            features.elevation,
            if los { 1.0 } else { 0.0 },
        ]
    }

    /// Deterministic shadowing-free gain estimate in dB.
    pub fn predict_with(
        &self,
        features: &GeometryFeatures,
        los: bool,
        scratch: &mut Scratch,
    ) -> f64 {
        let raw = self.net.forward_scratch(&self.inputs(features, los), scratch)[0];
        raw * self.out_scale + self.out_shift
    }

    pub fn predict(&self, features: &GeometryFeatures, los: bool) -> f64 {
        let mut scratch = Scratch::default();
        self.predict_with(features, los, &mut scratch)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::config(format!("serializing channel network: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<ChannelNet> {
        let text = std::fs::read_to_string(path)?;
        let net: ChannelNet = serde_json::from_str(&text).map_err(|e| {
            Error::config(format!("parsing channel network from {}: {e}", path.display()))
        })?;
        net.validate()?;
        Ok(net)
    }
}

/// Attaches geometry features and the map-derived LoS class to anchor
/// measurements. Rejects measurements from non-anchor nodes — only anchors
/// have known positions to classify against.
pub fn classify_anchor_measurements(
    map: &CityMap,
    nodes: &NodeSet,
    raw: &[Measurement],
) -> Result<ClassifiedDataset> {
    let mut out = Vec::with_capacity(raw.len());
    for m in raw {
        if !nodes.is_anchor(m.node) {
            return Err(Error::usage(format!(
                "measurement references node {} which is not an anchor",
                m.node
            )));
        }
        let node_pos = nodes.positions[m.node];
        let features = GeometryFeatures::between(m.uav, node_pos);
        let los = map.is_los(m.uav, node_pos.at(0.0));
        out.push(ClassifiedSample {
            features,
            los,
            gain_db: m.gain_db,
        });
    }
    Ok(out)
}

/// Per-variance weights for the weighted least-squares objective.
fn weight(sigma_los: f64, sigma_nlos: f64, los: bool) -> f64 {
    let s = if los { sigma_los } else { sigma_nlos };
    1.0 / (s * s)
}

/// Mean weighted squared residual of `net` over `data`.
pub fn dataset_loss(
    net: &ChannelNet,
    data: &[ClassifiedSample],
    sigma_los: f64,
    sigma_nlos: f64,
) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut scratch = Scratch::default();
    let mut total = 0.0;
    for s in data {
        let pred = net.predict_with(&s.features, s.los, &mut scratch);
        let r = pred - s.gain_db;
        total += weight(sigma_los, sigma_nlos, s.los) * r * r;
    }
    total / data.len() as f64
}

/// Root-mean-square residual per class `(los, nlos)`; `None` where a class
/// has no samples.
pub fn per_class_rmse(
    net: &ChannelNet,
    data: &[ClassifiedSample],
) -> (Option<f64>, Option<f64>) {
    let mut scratch = Scratch::default();
    let mut acc = [(0.0f64, 0usize); 2];
    for s in data {
        let pred = net.predict_with(&s.features, s.los, &mut scratch);
        let r = pred - s.gain_db;
        let slot = if s.los { 0 } else { 1 };
        acc[slot].0 += r * r;
        acc[slot].1 += 1;
    }
    let rmse = |(sum, n): (f64, usize)| {
        if n == 0 {
            None
        } else {
            Some((sum / n as f64).sqrt())
        }
    };
    (rmse(acc[0]), rmse(acc[1]))
}

/// Statistics from one channel fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs_run: usize,
    /// Per-epoch training loss (mean weighted squared residual); guaranteed
    /// non-increasing.
    pub train_curve: Vec<f64>,
    pub best_val_loss: Option<f64>,
    pub n_train: usize,
    pub n_val: usize,
    /// RMSE over the whole dataset per class with the returned parameters.
    pub rmse_los: Option<f64>,
    pub rmse_nlos: Option<f64>,
}

/// Fits a fresh channel network to the classified dataset by mini-batch
/// descent on the weighted squared residuals.
///
/// Two safeguards shape the schedule: validation-plateau early stopping
/// (returning the best-validation parameters), and an epoch-level rollback —
/// an epoch that raises the training loss is undone and retried at a halved
/// step size, which makes the reported training curve non-increasing.
pub fn train_channel<R: Rng>(
    dataset: &ClassifiedDataset,
    d_scale: f64,
    sigma_los: f64,
    sigma_nlos: f64,
    settings: &ChannelFitSettings,
    rng: &mut R,
) -> Result<(ChannelNet, FitReport)> {
    if dataset.is_empty() {
        return Err(Error::usage("cannot fit a channel model to an empty dataset"));
    }
    if !(sigma_los > 0.0 && sigma_nlos > 0.0) {
        return Err(Error::usage("shadowing deviations must be positive"));
    }
    settings.validate()?;
    let has_los = dataset.iter().any(|s| s.los);
    let has_nlos = dataset.iter().any(|s| !s.los);
    if !(has_los && has_nlos) {
        log::warn!(
            "channel dataset contains only {} samples; the other class is unconstrained",
            if has_los { "line-of-sight" } else { "non-line-of-sight" }
        );
    }

    // Even thinning keeps the fit cost bounded without biasing toward any
    // stretch of the mission history.
    let mut data: Vec<ClassifiedSample> =
        if settings.max_samples > 0 && dataset.len() > settings.max_samples {
            (0..settings.max_samples)
                .map(|i| dataset[i * dataset.len() / settings.max_samples])
                .collect()
        } else {
            dataset.clone()
        };

    // Shuffle, then split off validation from the tail.
    for i in (1..data.len()).rev() {
        data.swap(i, rng.gen_range(0..=i));
    }
    let n_val = if data.len() >= 10 {
        ((data.len() as f64 * settings.val_fraction).round() as usize).min(data.len() - 1)
    } else {
        0
    };
    let n_train = data.len() - n_val;
    let (train, val) = data.split_at(n_train);

    let mut net = ChannelNet::new(d_scale, rng)?;
    // Standardize targets so the network starts at the right output level.
    let mean = train.iter().map(|s| s.gain_db).sum::<f64>() / n_train as f64;
    let var = train
        .iter()
        .map(|s| (s.gain_db - mean) * (s.gain_db - mean))
        .sum::<f64>()
        / n_train as f64;
    net.out_shift = mean;
    net.out_scale = var.sqrt().max(1e-6);
    let mut adam = Adam::new(net.net.params.len());
    let mut lr = settings.learning_rate;

    let mut order: Vec<usize> = (0..n_train).collect();
    let mut trace = ForwardTrace::default();
    let mut grad = vec![0.0; net.net.params.len()];

    let mut train_curve = Vec::with_capacity(settings.max_epochs);
    let mut last_train = dataset_loss(&net, train, sigma_los, sigma_nlos);
    let mut best_val = if n_val > 0 {
        Some(dataset_loss(&net, val, sigma_los, sigma_nlos))
    } else {
        None
    };
    let mut best_params = net.net.params.clone();
    let mut stall = 0usize;
    let mut epochs_run = 0usize;

    for _epoch in 0..settings.max_epochs {
        epochs_run += 1;
        let params_before = net.net.params.clone();
        let adam_before = adam.clone();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(settings.batch_size) {
            for g in grad.iter_mut() {
                *g = 0.0;
            }
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let s = &train[i];
                net.net.forward_trace(&net.inputs(&s.features, s.los), &mut trace);
                let raw = net.net.trace_output(&trace)[0];
                let err = raw * net.out_scale + net.out_shift - s.gain_db;
                let w = weight(sigma_los, sigma_nlos, s.los);
                net.net
                    .backward(&trace, &[2.0 * w * err * net.out_scale * inv], &mut grad);
            }
            adam.step(&mut net.net.params, &grad, lr);
        }
        let train_loss = dataset_loss(&net, train, sigma_los, sigma_nlos);
        if train_loss > last_train + 1e-9 {
            // Undo the epoch and retry more cautiously.
            net.net.params = params_before;
            adam = adam_before;
            lr *= 0.5;
            train_curve.push(last_train);
            if lr < 1e-8 {
                break;
            }
        } else {
            train_curve.push(train_loss);
            last_train = train_loss;
        }

        // Early stopping watches validation loss (training loss when there
        // is no holdout).
        let watched = if n_val > 0 {
            dataset_loss(&net, val, sigma_los, sigma_nlos)
        } else {
            last_train
        };
        let improved = match best_val {
            Some(b) => watched < b - 1e-12,
            None => true,
        };
        if improved || best_val.is_none() {
            if n_val > 0 {
                best_val = Some(watched);
            }
            best_params.copy_from_slice(&net.net.params);
            stall = 0;
        } else {
            stall += 1;
            if stall >= settings.patience {
                break;
            }
        }
    }

    net.net.params = best_params;
    let (rmse_los, rmse_nlos) = per_class_rmse(&net, &data);
    let report = FitReport {
        epochs_run,
        train_curve,
        best_val_loss: best_val,
        n_train,
        n_val,
        rmse_los,
        rmse_nlos,
    };
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{GroundPoint, Point3};
    use crate::rng::substream;
    use crate::scenario::{Building, CityMap};

    fn empty_map() -> CityMap {
        CityMap::new(500.0, 500.0, Vec::new())
    }

    fn synthetic_log_distance(n: usize) -> ClassifiedDataset {
        // g = -30 - 20*log10(d) sampled along a line of UAV positions.
        (0..n)
            .map(|i| {
                let x = 40.0 + 420.0 * (i as f64 / (n - 1) as f64);
                let uav = Point3 { x, y: 0.0, z: 60.0 };
                let node = GroundPoint { x: 0.0, y: 0.0 };
                let features = GeometryFeatures::between(uav, node);
                ClassifiedSample {
                    features,
                    los: true,
                    gain_db: -30.0 - 20.0 * features.distance.log10(),
                }
            })
            .collect()
    }

    #[test]
    fn classification_attaches_geometry_and_los() {
        let map = empty_map();
        let nodes = crate::scenario::NodeSet {
            positions: vec![GroundPoint { x: 100.0, y: 100.0 }, GroundPoint { x: 400.0, y: 400.0 }],
            known: vec![true, false],
        };
        let m = Measurement {
            step: 3,
            uav: Point3 { x: 130.0, y: 140.0, z: 60.0 },
            node: 0,
            gain_db: -77.0,
            los: None,
        };
        let ds = classify_anchor_measurements(&map, &nodes, &[m]).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds[0].los, "empty map must classify as line-of-sight");
        assert!((ds[0].features.ground_distance - 50.0).abs() < 1e-12);
        assert!((ds[0].features.distance - (50.0f64 * 50.0 + 3600.0).sqrt()).abs() < 1e-12);
        assert_eq!(ds[0].gain_db, -77.0);

        // Unknown-node measurements are rejected.
        let bad = Measurement { node: 1, ..m };
        assert!(classify_anchor_measurements(&map, &nodes, &[bad]).is_err());
    }

    #[test]
    fn walled_in_anchor_classifies_non_line_of_sight() {
        // Four 40 m walls ring the anchor; a distant low UAV cannot see in.
        let walls = vec![
            Building { x_min: 230.0, y_min: 230.0, x_max: 270.0, y_max: 234.0, height: 40.0 },
            Building { x_min: 230.0, y_min: 266.0, x_max: 270.0, y_max: 270.0, height: 40.0 },
            Building { x_min: 230.0, y_min: 234.0, x_max: 234.0, y_max: 266.0, height: 40.0 },
            Building { x_min: 266.0, y_min: 234.0, x_max: 270.0, y_max: 266.0, height: 40.0 },
        ];
        let map = CityMap::new(500.0, 500.0, walls);
        let nodes = crate::scenario::NodeSet {
            positions: vec![GroundPoint { x: 250.0, y: 250.0 }],
            known: vec![true],
        };
        let m = Measurement {
            step: 0,
            uav: Point3 { x: 20.0, y: 250.0, z: 25.0 },
            node: 0,
            gain_db: -100.0,
            los: None,
        };
        let ds = classify_anchor_measurements(&map, &nodes, &[m]).unwrap();
        assert!(!ds[0].los);
        // Straight overhead clears the walls.
        let above = Measurement {
            uav: Point3 { x: 250.0, y: 250.0, z: 60.0 },
            ..m
        };
        let ds = classify_anchor_measurements(&map, &nodes, &[above]).unwrap();
        assert!(ds[0].los);
    }

    #[test]
    fn noiseless_log_distance_law_is_recovered() {
        let data = synthetic_log_distance(400);
        let mut rng = substream(21, "channel-fit", 0);
        let settings = ChannelFitSettings {
            max_epochs: 400,
            patience: 400,
            batch_size: 32,
            ..ChannelFitSettings::default()
        };
        let (net, report) =
            train_channel(&data, 500.0 * 2f64.sqrt(), 2.0, 5.0, &settings, &mut rng).unwrap();
        let rmse = report.rmse_los.unwrap();
        assert!(rmse < 0.5, "train RMSE {rmse} dB too high for noiseless data");
        // Pointwise within 1 dB across the sampled distance range.
        for i in 0..60 {
            let x = 60.0 + 380.0 * (i as f64 / 59.0);
            let uav = Point3 { x, y: 0.0, z: 60.0 };
            let features = GeometryFeatures::between(uav, GroundPoint { x: 0.0, y: 0.0 });
            let truth = -30.0 - 20.0 * features.distance.log10();
            let pred = net.predict(&features, true);
            assert!(
                (pred - truth).abs() < 1.0,
                "at d = {:.1}: predicted {pred:.2}, law {truth:.2}",
                features.distance
            );
        }
    }

    #[test]
    fn training_curve_is_non_increasing() {
        let data = synthetic_log_distance(200);
        let mut rng = substream(22, "channel-fit", 0);
        let settings = ChannelFitSettings {
            max_epochs: 120,
            ..ChannelFitSettings::default()
        };
        let (_net, report) =
            train_channel(&data, 700.0, 2.0, 5.0, &settings, &mut rng).unwrap();
        for w in report.train_curve.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-6,
                "training loss increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn fit_is_deterministic_in_seed_and_inputs() {
        let data = synthetic_log_distance(150);
        let settings = ChannelFitSettings {
            max_epochs: 60,
            ..ChannelFitSettings::default()
        };
        let run = || {
            let mut rng = substream(23, "channel-fit", 7);
            train_channel(&data, 700.0, 2.0, 5.0, &settings, &mut rng).unwrap()
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a.net.params, b.net.params);
        assert_eq!(ra.train_curve, rb.train_curve);
        let mut other = substream(24, "channel-fit", 7);
        let (c, _) = train_channel(&data, 700.0, 2.0, 5.0, &settings, &mut other).unwrap();
        assert_ne!(a.net.params, c.net.params);
    }

    #[test]
    fn equal_sigmas_reduce_to_unweighted_mse() {
        let data = synthetic_log_distance(50);
        let mut rng = substream(25, "channel-fit", 0);
        let net = ChannelNet::new(700.0, &mut rng).unwrap();
        let weighted = dataset_loss(&net, &data, 3.0, 3.0);
        let mut scratch = Scratch::default();
        let mse: f64 = data
            .iter()
            .map(|s| {
                let r = net.predict_with(&s.features, s.los, &mut scratch) - s.gain_db;
                r * r
            })
            .sum::<f64>()
            / data.len() as f64;
        assert!((weighted - mse / 9.0).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_rejected_and_single_class_trains() {
        let mut rng = substream(26, "channel-fit", 0);
        let empty: ClassifiedDataset = Vec::new();
        assert!(train_channel(&empty, 700.0, 2.0, 5.0, &ChannelFitSettings::default(), &mut rng)
            .is_err());
        // Single-class data trains (with a warning) and reports only that
        // class's RMSE.
        let data = synthetic_log_distance(60);
        let settings = ChannelFitSettings {
            max_epochs: 30,
            ..ChannelFitSettings::default()
        };
        let (_net, report) = train_channel(&data, 700.0, 2.0, 5.0, &settings, &mut rng).unwrap();
        assert!(report.rmse_los.is_some());
        assert!(report.rmse_nlos.is_none());
    }

    #[test]
    fn thinning_caps_the_fitted_sample_count() {
        let data = synthetic_log_distance(300);
        let mut rng = substream(27, "channel-fit", 0);
        let settings = ChannelFitSettings {
            max_epochs: 5,
            max_samples: 100,
            ..ChannelFitSettings::default()
        };
        let (_net, report) = train_channel(&data, 700.0, 2.0, 5.0, &settings, &mut rng).unwrap();
        assert_eq!(report.n_train + report.n_val, 100);
    }

    #[test]
    fn prediction_is_deterministic_and_serializes() {
        let mut rng = substream(28, "channel-fit", 0);
        let net = ChannelNet::new(700.0, &mut rng).unwrap();
        let features = GeometryFeatures::between(
            Point3 { x: 100.0, y: 200.0, z: 60.0 },
            GroundPoint { x: 250.0, y: 250.0 },
        );
        assert_eq!(net.predict(&features, true), net.predict(&features, true));
        assert_ne!(net.predict(&features, true), net.predict(&features, false));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("channel.json");
        net.save(&path).unwrap();
        let back = ChannelNet::load(&path).unwrap();
        assert_eq!(net.predict(&features, false), back.predict(&features, false));
    }
}
