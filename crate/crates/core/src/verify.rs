//! Field verification: per-channel MSE of normalized fields, cos-latitude
//! weighted RMSE in physical units, and anomaly correlation against the
//! climatological mean.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::rollout::Trajectory;
use crate::schema::GridGeometry;
use crate::tensorio::{ChannelStats, NormStats, StateTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    MseNormalized,
    RmseWeighted,
    AnomalyCorrelation,
}

impl Metric {
    /// Label written in the channel column for the across-channel aggregate.
    pub fn aggregate_label(&self) -> &'static str {
        match self {
            Metric::MseNormalized => "all_channels_unweighted_mean",
            Metric::RmseWeighted => "all_channels_rms",
            Metric::AnomalyCorrelation => "all_channels_unweighted_mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub metric: Metric,
    pub per_channel: Vec<(String, f64)>,
    pub aggregate: f64,
    pub lead_time_hours: i64,
    pub n_cells: usize,
}

impl ScoreReport {
    pub fn score(&self, channel: &str) -> Option<f64> {
        self.per_channel.iter().find(|(n, _)| n == channel).map(|&(_, s)| s)
    }

    fn with_lead(mut self, lead_time_hours: i64) -> Self {
        self.lead_time_hours = lead_time_hours;
        self
    }
}

fn check_pair(pred: &StateTensor, truth: &StateTensor) -> Result<()> {
    if pred.valid_time() != truth.valid_time() {
        return Err(Error::TimeMismatch(format!(
            "prediction valid at {}, truth at {}",
            pred.valid_time(),
            truth.valid_time()
        )));
    }
    if !pred.schema().same_names(truth.schema()) {
        return Err(Error::SchemaMismatch("prediction and truth have different channels".into()));
    }
    if pred.geom() != truth.geom() {
        return Err(Error::SchemaMismatch(format!(
            "prediction grid {}x{} differs from truth grid {}x{}",
            pred.geom().n_lat(),
            pred.geom().n_lon(),
            truth.geom().n_lat(),
            truth.geom().n_lon()
        )));
    }
    if pred.is_normalized() != truth.is_normalized() {
        return Err(Error::StateFlag("prediction and truth are in different units".into()));
    }
    Ok(())
}

/// Per-row weights proportional to cos(latitude) at cell centres, scaled so
/// that every cell of row `i` carries `w[i] / n_lon` and all cells sum to 1.
pub fn latitude_weights(geom: &GridGeometry) -> Result<Vec<f64>> {
    let raw: Vec<f64> = (0..geom.n_lat()).map(|i| geom.cell_center_lat(i).to_radians().cos().max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Mean over cells of `(norm(pred) - norm(truth))²` per channel; the aggregate
/// is the unweighted mean over channels. States already flagged as
/// normalized are compared as they are.
pub fn mse_normalized(pred: &StateTensor, truth: &StateTensor, stats: &NormStats) -> Result<ScoreReport> {
    check_pair(pred, truth)?;
    let ordered = stats.ordered_for(pred.schema())?;
    let n_cells = pred.geom().cells();
    let per_channel: Vec<(String, f64)> = pred
        .schema()
        .names()
        .zip(&ordered)
        .enumerate()
        .map(|(c, (name, s))| {
            let ChannelStats { mean, std } =
                if pred.is_normalized() { ChannelStats { mean: 0.0, std: 1.0 } } else { *s };
            let sum: f64 = pred
                .channel(c)
                .iter()
                .zip(truth.channel(c))
                .map(|(&p, &t)| {
                    let d = (p as f64 - mean) / std - (t as f64 - mean) / std;
                    d * d
                })
                .sum();
            (name.to_string(), sum / n_cells as f64)
        })
        .collect();
    let aggregate = per_channel.iter().map(|(_, s)| s).sum::<f64>() / per_channel.len() as f64;
    Ok(ScoreReport { metric: Metric::MseNormalized, per_channel, aggregate, lead_time_hours: 0, n_cells })
}

fn weighted_sq_error(pred: &[f32], truth: &[f32], geom: &GridGeometry, w: &[f64]) -> f64 {
    let n_lon = geom.n_lon();
    w.iter()
        .enumerate()
        .map(|(i, &wi)| {
            let row: f64 = pred[i * n_lon..(i + 1) * n_lon]
                .iter()
                .zip(&truth[i * n_lon..(i + 1) * n_lon])
                .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
                .sum();
            wi * row / n_lon as f64
        })
        .sum()
}

/// `sqrt(Σ w·(pred - truth)²)` for one channel with cos-latitude weights.
pub fn rmse_weighted(pred: &StateTensor, truth: &StateTensor, channel: &str) -> Result<ScoreReport> {
    rmse_weighted_channels(pred, truth, &[channel])
}

/// Weighted RMSE for several channels; the aggregate is the root of the mean
/// squared per-channel RMSE.
pub fn rmse_weighted_channels<S: AsRef<str>>(
    pred: &StateTensor,
    truth: &StateTensor,
    channels: &[S],
) -> Result<ScoreReport> {
    check_pair(pred, truth)?;
    let w = latitude_weights(pred.geom())?;
    let mut per_channel = Vec::with_capacity(channels.len());
    for name in channels {
        let name = name.as_ref();
        let c = pred.schema().channel_index(name)?;
        let mse = weighted_sq_error(pred.channel(c), truth.channel(c), pred.geom(), &w);
        per_channel.push((name.to_string(), mse.sqrt()));
    }
    if per_channel.is_empty() {
        return Err(Error::SchemaMismatch("no channels to score".into()));
    }
    let aggregate = (per_channel.iter().map(|(_, r)| r * r).sum::<f64>() / per_channel.len() as f64).sqrt();
    Ok(ScoreReport {
        metric: Metric::RmseWeighted,
        per_channel,
        aggregate,
        lead_time_hours: 0,
        n_cells: pred.geom().cells(),
    })
}

/// Cos-latitude weighted anomaly correlation per channel, with anomalies
/// taken against the statistics mean. Scores lie in [-1, 1].
pub fn anomaly_correlation(pred: &StateTensor, truth: &StateTensor, stats: &NormStats) -> Result<ScoreReport> {
    check_pair(pred, truth)?;
    if pred.is_normalized() {
        return Err(Error::StateFlag("anomaly correlation expects physical units".into()));
    }
    let ordered = stats.ordered_for(pred.schema())?;
    let geom = pred.geom();
    let w = latitude_weights(geom)?;
    let n_lon = geom.n_lon();
    let mut per_channel = Vec::with_capacity(ordered.len());
    for (c, (name, s)) in pred.schema().names().zip(&ordered).enumerate() {
        let (p, t) = (pred.channel(c), truth.channel(c));
        let (mut pt, mut pp, mut tt) = (0.0f64, 0.0f64, 0.0f64);
        for (i, &wi) in w.iter().enumerate() {
            for k in i * n_lon..(i + 1) * n_lon {
                let a = p[k] as f64 - s.mean;
                let b = t[k] as f64 - s.mean;
                pt += wi * a * b;
                pp += wi * a * a;
                tt += wi * b * b;
            }
        }
        if !(pp > 0.0 && tt > 0.0) {
            return Err(Error::InvalidData(format!("channel '{name}' has zero anomaly variance")));
        }
        per_channel.push((name.to_string(), pt / (pp * tt).sqrt()));
    }
    let aggregate = per_channel.iter().map(|(_, s)| s).sum::<f64>() / per_channel.len() as f64;
    Ok(ScoreReport {
        metric: Metric::AnomalyCorrelation,
        per_channel,
        aggregate,
        lead_time_hours: 0,
        n_cells: geom.cells(),
    })
}

fn check_trajectories(pred: &Trajectory, truth: &Trajectory) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::TrajectoryMismatch(format!(
            "prediction has {} states, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(k) = (0..pred.len()).find(|&k| pred.valid_times()[k] != truth.valid_times()[k]) {
        return Err(Error::TrajectoryMismatch(format!(
            "state {k}: prediction valid at {}, truth at {}",
            pred.valid_times()[k],
            truth.valid_times()[k]
        )));
    }
    Ok(())
}

fn score_each(
    pred: &Trajectory,
    truth: &Trajectory,
    score: impl Fn(&StateTensor, &StateTensor) -> Result<ScoreReport>,
) -> Result<Vec<ScoreReport>> {
    check_trajectories(pred, truth)?;
    let t0 = pred.valid_times().first().copied().unwrap_or(0);
    (0..pred.len())
        .map(|k| {
            let (p, t) = (pred.state(k)?, truth.state(k)?);
            Ok(score(&p, &t)?.with_lead((pred.valid_times()[k] - t0) / 3600))
        })
        .collect()
}

/// Normalized MSE at every lead time.
pub fn score_trajectory(pred: &Trajectory, truth: &Trajectory, stats: &NormStats) -> Result<Vec<ScoreReport>> {
    score_each(pred, truth, |p, t| mse_normalized(p, t, stats))
}

pub fn score_trajectory_rmse(pred: &Trajectory, truth: &Trajectory, channel: &str) -> Result<Vec<ScoreReport>> {
    score_each(pred, truth, |p, t| rmse_weighted(p, t, channel))
}

/// `lead_hours,channel,score`, one row per channel and lead, plus an
/// aggregate row per lead when more than one channel was scored.
pub fn write_scores_csv(reports: &[ScoreReport], destination: impl AsRef<Path>) -> Result<()> {
    let destination = destination.as_ref();
    let mut out = String::from("lead_hours,channel,score\n");
    for r in reports {
        for (name, s) in &r.per_channel {
            out.push_str(&format!("{},{},{}\n", r.lead_time_hours, name, s));
        }
        if r.per_channel.len() > 1 {
            out.push_str(&format!("{},{},{}\n", r.lead_time_hours, r.metric.aggregate_label(), r.aggregate));
        }
    }
    let mut f = File::create(destination).at(destination)?;
    f.write_all(out.as_bytes()).at(destination)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ChannelSchema;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn stats() -> NormStats {
        let mut s = NormStats::new();
        s.insert("z500", 54_000.0, 3_300.0).unwrap();
        s.insert("u10", -0.5, 5.0).unwrap();
        s
    }

    fn random_state(rng: &mut StdRng, geom: GridGeometry, t: i64) -> StateTensor {
        let schema = ChannelSchema::from_names(&["z500", "u10"]).unwrap();
        let mut data: Vec<f32> = (0..geom.cells()).map(|_| rng.gen_range(48_000.0..60_000.0)).collect();
        data.extend((0..geom.cells()).map(|_| rng.gen_range(-30.0..30.0f32)));
        StateTensor::new(schema, geom, t, data).unwrap()
    }

    #[test]
    fn identical_states_score_zero() {
        let mut rng = StdRng::seed_from_u64(1);
        let g = GridGeometry::global(8, 16).unwrap();
        let s = random_state(&mut rng, g, 0);
        let r = mse_normalized(&s, &s, &stats()).unwrap();
        assert!(r.per_channel.iter().all(|(_, v)| *v == 0.0));
        assert_eq!(r.aggregate, 0.0);
        assert_eq!(r.n_cells, 128);
        assert_eq!(rmse_weighted(&s, &s, "u10").unwrap().aggregate, 0.0);
    }

    #[test]
    fn one_sigma_offset_gives_unit_mse() {
        let g = GridGeometry::global(8, 16).unwrap();
        let schema = ChannelSchema::from_names(&["z500", "u10"]).unwrap();
        let truth = StateTensor::filled(schema.clone(), g, 0, &[54_000.0, 2.0]).unwrap();
        let pred = StateTensor::filled(schema, g, 0, &[57_300.0, 2.0]).unwrap();
        let r = mse_normalized(&pred, &truth, &stats()).unwrap();
        assert_eq!(r.score("z500"), Some(1.0));
        assert_eq!(r.score("u10"), Some(0.0));
        assert_eq!(r.aggregate, 0.5);
    }

    #[test]
    fn mismatches_rejected() {
        let mut rng = StdRng::seed_from_u64(2);
        let g = GridGeometry::global(8, 16).unwrap();
        let a = random_state(&mut rng, g, 0);
        let b = random_state(&mut rng, g, 21_600);
        assert!(matches!(mse_normalized(&a, &b, &stats()), Err(Error::TimeMismatch(_))));
        let other =
            StateTensor::filled(ChannelSchema::from_names(&["z500", "v10"]).unwrap(), g, 0, &[0.0, 0.0]).unwrap();
        assert!(matches!(mse_normalized(&a, &other, &stats()), Err(Error::SchemaMismatch(_))));
        assert!(matches!(rmse_weighted(&a, &a, "t2"), Err(Error::ChannelNotFound(_))));
    }

    #[test]
    fn weights_on_small_grid() {
        let g = GridGeometry::global(4, 8).unwrap();
        let w = latitude_weights(&g).unwrap();
        // cell centres at 67.5, 22.5, -22.5, -67.5
        let (a, b) = (67.5f64.to_radians().cos(), 22.5f64.to_radians().cos());
        let total = 2.0 * (a + b);
        let expect = [a / total, b / total, b / total, a / total];
        for (x, y) in w.iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let canon = latitude_weights(&GridGeometry::canonical()).unwrap();
        assert!((canon.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(canon.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn constant_error_rmse_is_that_error() {
        let g = GridGeometry::global(4, 8).unwrap();
        let schema = ChannelSchema::from_names(&["u10"]).unwrap();
        let truth = StateTensor::filled(schema.clone(), g, 0, &[3.0]).unwrap();
        let pred = StateTensor::filled(schema, g, 0, &[4.0]).unwrap();
        assert!((rmse_weighted(&pred, &truth, "u10").unwrap().aggregate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn northern_row_error_hand_computed() {
        let g = GridGeometry::global(4, 8).unwrap();
        let schema = ChannelSchema::from_names(&["u10"]).unwrap();
        let truth = StateTensor::filled(schema.clone(), g, 0, &[0.0]).unwrap();
        let mut pred = truth.clone();
        pred.data_mut()[..8].fill(2.0);
        let r = rmse_weighted(&pred, &truth, "u10").unwrap();
        // weight of the top row is cos(67.5°) / (2·(cos 67.5° + cos 22.5°))
        let (a, b) = (0.38268343236508984_f64, 0.9238795325112867_f64);
        let expect = (4.0 * a / (2.0 * (a + b))).sqrt();
        assert!((r.aggregate - expect).abs() < 1e-12, "{} vs {expect}", r.aggregate);
    }

    #[test]
    fn anomaly_correlation_bounds() {
        let mut rng = StdRng::seed_from_u64(4);
        let g = GridGeometry::global(8, 16).unwrap();
        let a = random_state(&mut rng, g, 0);
        let b = random_state(&mut rng, g, 0);
        let same = anomaly_correlation(&a, &a, &stats()).unwrap();
        assert!(same.per_channel.iter().all(|(_, v)| (v - 1.0).abs() < 1e-12));
        let r = anomaly_correlation(&a, &b, &stats()).unwrap();
        assert!(r.per_channel.iter().all(|(_, v)| (-1.0..=1.0).contains(v)));
        // negated anomalies correlate at -1
        let mut neg = a.clone();
        for (c, s) in [(0, 54_000.0f64), (1, -0.5)] {
            for v in neg.channel_mut(c) {
                *v = (2.0 * s - *v as f64) as f32;
            }
        }
        let r = anomaly_correlation(&neg, &a, &stats()).unwrap();
        assert!(r.per_channel.iter().all(|(_, v)| (v + 1.0).abs() < 1e-6));
    }

    #[test]
    fn trajectory_scores_grow_with_linear_drift() {
        let g = GridGeometry::global(8, 16).unwrap();
        let schema = ChannelSchema::from_names(&["z500", "u10"]).unwrap();
        let s0 = StateTensor::filled(schema.clone(), g, 0, &[54_000.0, 1.0]).unwrap();
        let persistence: Vec<_> = (0..6).map(|k| s0.clone().with_valid_time(k * 21_600).unwrap()).collect();
        let truth: Vec<_> = (0..6)
            .map(|k| {
                StateTensor::filled(schema.clone(), g, k * 21_600, &[54_000.0 + 100.0 * k as f32, 1.0 + 0.5 * k as f32])
                    .unwrap()
            })
            .collect();
        let pred = Trajectory::from_states(persistence, 6).unwrap();
        let truth = Trajectory::from_states(truth, 6).unwrap();
        let self_scores = score_trajectory(&pred, &pred, &stats()).unwrap();
        assert!(self_scores.iter().all(|r| r.aggregate == 0.0));
        let scores = score_trajectory(&pred, &truth, &stats()).unwrap();
        let leads: Vec<i64> = scores.iter().map(|r| r.lead_time_hours).collect();
        assert_eq!(leads, [0, 6, 12, 18, 24, 30]);
        assert!(scores.windows(2).all(|w| w[1].aggregate >= w[0].aggregate));
        assert!(scores[5].aggregate > 0.0);

        let short = Trajectory::from_states(vec![s0], 6).unwrap();
        assert!(matches!(score_trajectory(&short, &truth, &stats()), Err(Error::TrajectoryMismatch(_))));
    }

    #[test]
    fn scores_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridGeometry::global(4, 8).unwrap();
        let schema = ChannelSchema::from_names(&["z500", "u10"]).unwrap();
        let truth = StateTensor::filled(schema.clone(), g, 0, &[54_000.0, 2.0]).unwrap();
        let pred = StateTensor::filled(schema, g, 0, &[57_300.0, 2.0]).unwrap();
        let r = mse_normalized(&pred, &truth, &stats()).unwrap();
        let path = dir.path().join("s.csv");
        write_scores_csv(&[r.with_lead(6)], &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "lead_hours,channel,score\n6,z500,1\n6,u10,0\n6,all_channels_unweighted_mean,0.5\n"
        );
    }

    proptest! {
        #[test]
        fn mse_symmetric_and_scales_with_std(seed in any::<u64>(), a in 0.1f64..10.0) {
            let mut rng = StdRng::seed_from_u64(seed);
            let g = GridGeometry::global(8, 16).unwrap();
            let p = random_state(&mut rng, g, 0);
            let t = random_state(&mut rng, g, 0);
            let base = mse_normalized(&p, &t, &stats()).unwrap();
            let swapped = mse_normalized(&t, &p, &stats()).unwrap();
            for ((_, x), (_, y)) in base.per_channel.iter().zip(&swapped.per_channel) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
            }
            let mut scaled = NormStats::new();
            scaled.insert("z500", 54_000.0, 3_300.0 * a).unwrap();
            scaled.insert("u10", -0.5, 5.0).unwrap();
            let s = mse_normalized(&p, &t, &scaled).unwrap();
            let (x, y) = (base.score("z500").unwrap(), s.score("z500").unwrap());
            prop_assert!((y - x / (a * a)).abs() <= 1e-9 * x / (a * a));
            prop_assert_eq!(s.score("u10"), base.score("u10"));
        }
    }
}
