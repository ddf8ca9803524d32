//! Tropical-cyclone eye tracking on sea-level pressure.
//!
//! The eye at each step is the grid cell of minimum pressure. The first fix
//! is searched inside a user-supplied seed box; later fixes are searched
//! among cells within a continuity gate (great-circle radius) of the previous
//! fix. Ties go to the smallest `(row, column)` index. Positions are reported
//! at grid resolution.

use std::fs::File;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};

use crate::error::{Error, IoContext, Result};
use crate::rollout::Trajectory;
use crate::schema::{ChannelSchema, GridGeometry, Region};
use crate::tensorio::{NormStats, StateTensor};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
/// Maximum eye displacement per 6 hours.
pub const DEFAULT_GATE_KM: f64 = 750.0;
/// Fixes outside this pressure band (Pa) are rejected as implausible.
pub const PLAUSIBLE_PRESSURE_PA: (f64, f64) = (80_000.0, 110_000.0);

/// Great-circle distance in km between two `(lat, lon)` points in degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let s_lat = ((lat2 - lat1) / 2.0).sin();
    let s_lon = ((lon2 - lon1) / 2.0).sin();
    let h = s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon;
    2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EyeFix {
    pub valid_time: i64,
    pub lat: f64,
    pub lon: f64,
    /// Pa
    pub min_pressure: f64,
}

impl EyeFix {
    pub fn position(&self) -> (f64, f64) {
        (self.lat, self.lon)
    }

    fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(0.0..360.0).contains(&self.lon) {
            return Err(Error::TrackFormat(format!("fix at ({}, {}) is off the globe", self.lat, self.lon)));
        }
        let (lo, hi) = PLAUSIBLE_PRESSURE_PA;
        if !(self.min_pressure > lo && self.min_pressure < hi) {
            return Err(Error::ImplausiblePressure(self.min_pressure));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CycloneTrack {
    fixes: Vec<EyeFix>,
}

impl CycloneTrack {
    pub fn new(fixes: Vec<EyeFix>) -> Result<Self> {
        for f in &fixes {
            f.validate()?;
        }
        if let Some(w) = fixes.windows(2).find(|w| w[1].valid_time <= w[0].valid_time) {
            return Err(Error::TrackFormat(format!(
                "fix times must strictly increase ({} then {})",
                w[0].valid_time, w[1].valid_time
            )));
        }
        Ok(Self { fixes })
    }

    pub fn fixes(&self) -> &[EyeFix] {
        &self.fixes
    }

    pub fn len(&self) -> usize {
        self.fixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub seed_region: Region,
    /// Continuity gate in km per 6 hours, scaled linearly for other step
    /// lengths. `None` searches the seed region at every step.
    pub gate_km: Option<f64>,
    pub pressure_channel: String,
    /// Apply a 3×3 box filter to the pressure field before the argmin.
    pub smooth: bool,
}

impl TrackerConfig {
    pub fn new(seed_region: Region) -> Self {
        Self { seed_region, gate_km: Some(DEFAULT_GATE_KM), pressure_channel: "msl".to_string(), smooth: false }
    }

    fn validate(&self) -> Result<()> {
        if let Some(g) = self.gate_km {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::InvalidTracker(format!("gate must be positive, got {g} km")));
            }
        }
        Ok(())
    }

    fn gate_for(&self, dt_hours: u32) -> Option<f64> {
        self.gate_km.map(|g| g * dt_hours as f64 / 6.0)
    }
}

enum Search<'a> {
    Region(&'a Region),
    Gate { center: (f64, f64), radius_km: f64 },
}

struct Located {
    fix: EyeFix,
    /// The argmin touches a cell outside the gate, so the true minimum may
    /// lie beyond it.
    on_gate_edge: bool,
}

/// 3×3 box mean; wraps in longitude on global grids, shrinks the window at
/// the top and bottom rows.
pub fn box_filter_3x3(field: &[f32], geom: &GridGeometry) -> Vec<f32> {
    let (n_lat, n_lon) = (geom.n_lat(), geom.n_lon());
    let wraps = geom.wraps_lon();
    let mut out = vec![0.0f32; field.len()];
    for i in 0..n_lat {
        for j in 0..n_lon {
            let mut sum = 0.0f64;
            let mut n = 0u32;
            for di in -1i64..=1 {
                let ii = i as i64 + di;
                if ii < 0 || ii >= n_lat as i64 {
                    continue;
                }
                for dj in -1i64..=1 {
                    let mut jj = j as i64 + dj;
                    if wraps {
                        jj = jj.rem_euclid(n_lon as i64);
                    } else if jj < 0 || jj >= n_lon as i64 {
                        continue;
                    }
                    sum += field[ii as usize * n_lon + jj as usize] as f64;
                    n += 1;
                }
            }
            out[i * n_lon + j] = (sum / n as f64) as f32;
        }
    }
    out
}

fn locate(state: &StateTensor, cfg: &TrackerConfig, search: Search<'_>) -> Result<Located> {
    let raw = state.field(&cfg.pressure_channel)?;
    let geom = state.geom();
    let smoothed;
    let field: &[f32] = if cfg.smooth {
        smoothed = box_filter_3x3(raw, geom);
        &smoothed
    } else {
        raw
    };
    let (n_lat, n_lon) = (geom.n_lat(), geom.n_lon());

    let in_set = |i: usize, j: usize| -> bool {
        match &search {
            Search::Region(r) => r.contains(geom.lat(i), geom.lon(j)),
            Search::Gate { center, radius_km } => haversine_km(*center, (geom.lat(i), geom.lon(j))) <= *radius_km,
        }
    };
    // Great-circle distance is at least the meridional separation, so whole
    // rows can be skipped outside the gate's latitude band.
    let row_may_hit = |i: usize| -> bool {
        match &search {
            Search::Region(r) => r.contains_lat(geom.lat(i)),
            Search::Gate { center, radius_km } => {
                (geom.lat(i) - center.0).abs().to_radians() * EARTH_RADIUS_KM <= *radius_km + 1e-9
            }
        }
    };

    let mut best: Option<(usize, usize, f32)> = None;
    for i in (0..n_lat).filter(|&i| row_may_hit(i)) {
        let row = &field[i * n_lon..(i + 1) * n_lon];
        for (j, &v) in row.iter().enumerate() {
            if best.is_some_and(|(_, _, b)| v >= b) || !in_set(i, j) {
                continue;
            }
            best = Some((i, j, v));
        }
    }
    let (i, j, _) = best.ok_or(Error::EmptySearchRegion)?;

    let on_gate_edge = matches!(search, Search::Gate { .. }) && {
        let mut edge = false;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let ii = i as i64 + di;
                let jj = (j as i64 + dj).rem_euclid(n_lon as i64);
                if (0..n_lat as i64).contains(&ii) && !in_set(ii as usize, jj as usize) {
                    edge = true;
                }
            }
        }
        edge
    };

    let fix = EyeFix {
        valid_time: state.valid_time(),
        lat: geom.lat(i),
        lon: geom.lon(j),
        min_pressure: raw[i * n_lon + j] as f64,
    };
    fix.validate()?;
    Ok(Located { fix, on_gate_edge })
}

/// Locates the eye in one state: the minimum-pressure cell of the seed region
/// when `prev` is `None` (or gating is off), otherwise of all cells within the
/// gate distance of `prev`.
pub fn detect_eye(state: &StateTensor, cfg: &TrackerConfig, prev: Option<&EyeFix>) -> Result<EyeFix> {
    cfg.validate()?;
    let search = match (prev, cfg.gate_km) {
        (Some(p), Some(radius_km)) => Search::Gate { center: p.position(), radius_km },
        _ => Search::Region(&cfg.seed_region),
    };
    locate(state, cfg, search).map(|l| l.fix)
}

/// One fix per state, chained through the continuity gate.
///
/// The track is lost at step `k` when no cell lies within the gate, or when
/// the gated minimum sits on the gate's edge (the pressure keeps falling
/// outside the gate, so the eye has left it).
pub fn extract_track(traj: &Trajectory, cfg: &TrackerConfig) -> Result<CycloneTrack> {
    cfg.validate()?;
    if traj.is_empty() {
        return Err(Error::TrajectoryMismatch("trajectory is empty".into()));
    }
    let gate = cfg.gate_for(traj.dt_hours());
    let mut fixes: Vec<EyeFix> = Vec::with_capacity(traj.len());
    for (k, state) in traj.states().enumerate() {
        let state = state?;
        let search = match (fixes.last(), gate) {
            (Some(p), Some(radius_km)) => Search::Gate { center: p.position(), radius_km },
            _ => Search::Region(&cfg.seed_region),
        };
        let located = match locate(&state, cfg, search) {
            Err(Error::EmptySearchRegion) if k > 0 => return Err(Error::TrackLost(k)),
            other => other?,
        };
        if located.on_gate_edge {
            return Err(Error::TrackLost(k));
        }
        fixes.push(located.fix);
    }
    CycloneTrack::new(fixes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackError {
    pub per_step_km: Vec<f64>,
    pub mean_km: f64,
}

/// Element-wise great-circle distance between two tracks with identical times.
pub fn track_error(pred: &CycloneTrack, truth: &CycloneTrack) -> Result<TrackError> {
    if pred.len() != truth.len() {
        return Err(Error::TrackTimeMismatch(format!(
            "predicted track has {} fixes, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::TrackTimeMismatch("tracks are empty".into()));
    }
    let mut per_step_km = Vec::with_capacity(pred.len());
    for (k, (p, t)) in pred.fixes().iter().zip(truth.fixes()).enumerate() {
        if p.valid_time != t.valid_time {
            return Err(Error::TrackTimeMismatch(format!(
                "fix {k}: predicted at {}, truth at {}",
                format_time(p.valid_time),
                format_time(t.valid_time)
            )));
        }
        per_step_km.push(haversine_km(p.position(), t.position()));
    }
    let mean_km = per_step_km.iter().sum::<f64>() / per_step_km.len() as f64;
    Ok(TrackError { per_step_km, mean_km })
}

/// A synthetic storm: a Gaussian sea-level-pressure depression on a uniform
/// background, centred on one position per step.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCyclone {
    pub start_time: i64,
    pub dt_hours: u32,
    /// `(lat, lon)` of the centre at each step.
    pub centers: Vec<(f64, f64)>,
    pub background_hpa: f64,
    pub depth_hpa: f64,
    /// Gaussian e-folding scale: pressure deficit is `depth·exp(-d²/(2r²))`
    /// with `d` the great-circle angle to the centre in degrees.
    pub radius_deg: f64,
    pub pressure_channel: String,
}

impl SynthCyclone {
    /// Centres moving by `(dlat, dlon)` degrees per step from `start`.
    pub fn linear(start: (f64, f64), step: (f64, f64), n_steps: usize) -> Vec<(f64, f64)> {
        (0..=n_steps)
            .map(|k| (start.0 + k as f64 * step.0, crate::schema::wrap_lon(start.1 + k as f64 * step.1)))
            .collect()
    }

    /// The fixes the generator plants, for scoring a tracker against.
    pub fn truth_track(&self) -> Result<CycloneTrack> {
        let p = (self.background_hpa - self.depth_hpa) * 100.0;
        CycloneTrack::new(
            self.centers
                .iter()
                .enumerate()
                .map(|(k, &(lat, lon))| EyeFix {
                    valid_time: self.start_time + k as i64 * self.dt_hours as i64 * 3600,
                    lat,
                    lon: crate::schema::wrap_lon(lon),
                    min_pressure: p,
                })
                .collect(),
        )
    }
}

/// Builds an in-memory trajectory whose pressure channel holds the synthetic
/// storm. Other channels are filled with their mean from `stats`, or zero.
pub fn synth_cyclone(
    spec: &SynthCyclone,
    geom: &GridGeometry,
    schema: &ChannelSchema,
    stats: Option<&NormStats>,
) -> Result<Trajectory> {
    let cell = geom.lat_step().abs().max(geom.lon_step());
    if spec.radius_deg.is_nan() || spec.radius_deg < cell {
        return Err(Error::DegenerateVortex(format!(
            "radius {}° is smaller than one {cell}° grid cell",
            spec.radius_deg
        )));
    }
    if spec.depth_hpa.is_nan() || spec.depth_hpa < 0.0 || spec.background_hpa.is_nan() || spec.background_hpa <= 0.0 {
        return Err(Error::DegenerateVortex("depth must be >= 0 and background > 0".into()));
    }
    if spec.centers.is_empty() {
        return Err(Error::DegenerateVortex("no storm centres given".into()));
    }
    if spec.dt_hours == 0 {
        return Err(Error::DegenerateVortex("dt_hours must be at least 1".into()));
    }
    for &(lat, lon) in &spec.centers {
        if geom.nearest_cell(lat, lon).is_none() {
            return Err(Error::DegenerateVortex(format!("centre ({lat}, {lon}) lies outside the grid")));
        }
    }
    let c_p = schema.channel_index(&spec.pressure_channel)?;
    let fill: Vec<f32> = match stats {
        Some(s) => s.ordered_for(schema)?.iter().map(|c| c.mean as f32).collect(),
        None => vec![0.0; schema.len()],
    };

    let lats: Vec<f64> = (0..geom.n_lat()).map(|i| geom.lat(i)).collect();
    let lons: Vec<f64> = (0..geom.n_lon()).map(|j| geom.lon(j)).collect();
    let two_r2 = 2.0 * spec.radius_deg * spec.radius_deg;
    let mut states = Vec::with_capacity(spec.centers.len());
    for (k, &center) in spec.centers.iter().enumerate() {
        let t = spec.start_time + k as i64 * spec.dt_hours as i64 * 3600;
        let mut state = StateTensor::filled(schema.clone(), *geom, t, &fill)?;
        let field = state.channel_mut(c_p);
        for (i, &lat) in lats.iter().enumerate() {
            for (j, &lon) in lons.iter().enumerate() {
                let d_deg = (haversine_km(center, (lat, lon)) / EARTH_RADIUS_KM).to_degrees();
                let hpa = spec.background_hpa - spec.depth_hpa * (-d_deg * d_deg / two_r2).exp();
                field[i * lons.len() + j] = (hpa * 100.0) as f32;
            }
        }
        states.push(state);
    }
    Trajectory::from_states(states, spec.dt_hours)
}

pub fn format_time(t: i64) -> String {
    DateTime::<Utc>::from_timestamp(t, 0)
        .map(|d| d.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| t.to_string())
}

pub fn parse_time(s: &str) -> Result<i64> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|d| d.timestamp())
        .map_err(|e| Error::TrackFormat(format!("bad timestamp '{s}': {e}")))
}

pub const TRACK_CSV_HEADER: [&str; 5] = ["step", "valid_time_iso8601", "lat_deg", "lon_deg", "min_slp_pa"];

pub fn write_track_csv(track: &CycloneTrack, destination: impl AsRef<Path>) -> Result<()> {
    let destination = destination.as_ref();
    let file = File::create(destination).at(destination)?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    let csv_err = |e: csv::Error| Error::TrackFormat(e.to_string());
    w.write_record(TRACK_CSV_HEADER).map_err(csv_err)?;
    for (k, f) in track.fixes().iter().enumerate() {
        w.write_record([
            k.to_string(),
            format_time(f.valid_time),
            f.lat.to_string(),
            f.lon.to_string(),
            f.min_pressure.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().at(destination)
}

pub fn read_track_csv(source: impl AsRef<Path>) -> Result<CycloneTrack> {
    let source = source.as_ref();
    let file = File::open(source).at(source)?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let bad = |msg: String| Error::TrackFormat(format!("{}: {msg}", source.display()));
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().map(str::trim).ne(TRACK_CSV_HEADER) {
        return Err(bad(format!("header must be `{}`", TRACK_CSV_HEADER.join(","))));
    }
    let mut fixes = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |idx: usize| -> Result<f64> {
            rec.get(idx)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| bad(format!("row {}: bad {}", k + 2, TRACK_CSV_HEADER[idx])))
        };
        fixes.push(EyeFix {
            valid_time: parse_time(rec.get(1).unwrap_or(""))?,
            lat: num(2)?,
            lon: num(3)?,
            min_pressure: num(4)?,
        });
    }
    CycloneTrack::new(fixes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(geom: GridGeometry, data: Vec<f32>) -> StateTensor {
        StateTensor::new(ChannelSchema::from_names(&["msl"]).unwrap(), geom, 0, data).unwrap()
    }

    #[test]
    fn haversine_examples() {
        assert_eq!(haversine_km((12.5, 33.0), (12.5, 33.0)), 0.0);
        let quarter = std::f64::consts::PI * 6371.0 / 2.0;
        assert!((haversine_km((90.0, 0.0), (0.0, 0.0)) - quarter).abs() < 1e-9);
        assert!((quarter - 10007.54).abs() < 0.01);
        // 0.25° of meridian
        let d = haversine_km((30.0, 280.0), (30.25, 280.0));
        assert!((d - 6371.0 * 0.25f64.to_radians()).abs() < 1e-9);
        // across the dateline / prime meridian
        assert!((haversine_km((0.0, 359.0), (0.0, 1.0)) - haversine_km((0.0, 0.0), (0.0, 2.0))).abs() < 1e-9);
    }

    #[test]
    fn uniform_field_picks_first_cell_of_region() {
        let g = GridGeometry::global(16, 32).unwrap();
        let s = single(g, vec![101_300.0; g.cells()]);
        let region = Region::new(20.0, 50.0, 90.0, 180.0).unwrap();
        let fix = detect_eye(&s, &TrackerConfig::new(region), None).unwrap();
        // first row with lat <= 50 and > 20 is 45.0, first column >= 90 is 90.0
        assert_eq!((fix.lat, fix.lon), (45.0, 90.0));
    }

    #[test]
    fn ties_resolved_lexicographically() {
        let g = GridGeometry::global(16, 32).unwrap();
        let mut data = vec![101_300.0; g.cells()];
        let (i, j) = (5, 7);
        data[i * 32 + j] = 95_000.0;
        data[i * 32 + j + 5] = 95_000.0;
        let fix = detect_eye(&single(g, data), &TrackerConfig::new(Region::global()), None).unwrap();
        assert_eq!((fix.lat, fix.lon), g.latlon_of(i, j).unwrap());
        assert_eq!(fix.min_pressure, 95_000.0);
    }

    #[test]
    fn channel_and_region_errors() {
        let g = GridGeometry::global(16, 32).unwrap();
        let s = single(g, vec![101_300.0; g.cells()]);
        let mut cfg = TrackerConfig::new(Region::global());
        cfg.pressure_channel = "sp".into();
        assert!(matches!(detect_eye(&s, &cfg, None), Err(Error::ChannelNotFound(_))));
        // a box narrower than one 11.25° column holds no cells
        let cfg = TrackerConfig::new(Region::new(10.0, 30.0, 1.0, 5.0).unwrap());
        assert!(matches!(detect_eye(&s, &cfg, None), Err(Error::EmptySearchRegion)));
        let mut cfg = TrackerConfig::new(Region::global());
        cfg.gate_km = Some(-1.0);
        assert!(matches!(detect_eye(&s, &cfg, None), Err(Error::InvalidTracker(_))));
    }

    #[test]
    fn implausible_pressure_rejected() {
        let g = GridGeometry::global(4, 8).unwrap();
        let s = single(g, vec![1013.0; g.cells()]);
        assert!(matches!(
            detect_eye(&s, &TrackerConfig::new(Region::global()), None),
            Err(Error::ImplausiblePressure(_))
        ));
    }

    #[test]
    fn gated_search_stays_near_previous_fix() {
        let g = GridGeometry::global(72, 144).unwrap();
        let mut data = vec![101_300.0; g.cells()];
        let near = g.nearest_cell(30.0, 280.0).unwrap();
        let far = g.nearest_cell(-30.0, 100.0).unwrap();
        data[near.0 * 144 + near.1] = 99_000.0;
        data[far.0 * 144 + far.1] = 95_000.0;
        let s = single(g, data);
        let prev = EyeFix { valid_time: 0, lat: 27.5, lon: 277.5, min_pressure: 99_000.0 };
        let cfg = TrackerConfig::new(Region::global());
        let fix = detect_eye(&s, &cfg, Some(&prev)).unwrap();
        assert_eq!((fix.lat, fix.lon), (30.0, 280.0));
        let mut no_gate = cfg.clone();
        no_gate.gate_km = None;
        let fix = detect_eye(&s, &no_gate, Some(&prev)).unwrap();
        assert_eq!((fix.lat, fix.lon), (-30.0, 100.0));
    }

    #[test]
    fn box_filter_averages_neighbours() {
        let g = GridGeometry::global(4, 8).unwrap();
        let mut f = vec![0.0f32; 32];
        f[8 + 7] = 9.0; // row 1, last column: wraps to column 0
        let sm = box_filter_3x3(&f, &g);
        assert_eq!(sm[8], 1.0);
        assert_eq!(sm[16], 1.0);
        assert_eq!(sm[0], 9.0 / 6.0); // top row uses a 2x3 window
        assert_eq!(sm[8 + 3], 0.0);
    }

    #[test]
    fn smoothing_suppresses_single_cell_noise() {
        let g = GridGeometry::global(36, 72).unwrap();
        let spec = SynthCyclone {
            start_time: 0,
            dt_hours: 6,
            centers: vec![(30.0, 280.0)],
            background_hpa: 1013.0,
            depth_hpa: 30.0,
            radius_deg: 15.0,
            pressure_channel: "msl".into(),
        };
        let schema = ChannelSchema::from_names(&["msl"]).unwrap();
        let traj = synth_cyclone(&spec, &g, &schema, None).unwrap();
        let mut s = traj.state(0).unwrap().into_owned();
        let spike = g.nearest_cell(-40.0, 40.0).unwrap();
        s.data_mut()[spike.0 * 72 + spike.1] = 97_000.0;
        let mut cfg = TrackerConfig::new(Region::global());
        assert_eq!(detect_eye(&s, &cfg, None).unwrap().position(), (-40.0, 40.0));
        cfg.smooth = true;
        let fix = detect_eye(&s, &cfg, None).unwrap();
        assert_eq!(fix.position(), (30.0, 280.0));
        assert_eq!(fix.min_pressure, 98_300.0, "reported pressure is the raw field value");
    }

    fn synth(centers: Vec<(f64, f64)>, geom: GridGeometry) -> (SynthCyclone, Trajectory) {
        let spec = SynthCyclone {
            start_time: 1_536_796_800,
            dt_hours: 6,
            centers,
            background_hpa: 1013.0,
            depth_hpa: 50.0,
            radius_deg: 3.0,
            pressure_channel: "msl".into(),
        };
        let schema = ChannelSchema::from_names(&["msl", "u10"]).unwrap();
        let traj = synth_cyclone(&spec, &geom, &schema, None).unwrap();
        (spec, traj)
    }

    #[test]
    fn synthetic_minimum_at_centre() {
        let g = GridGeometry::global(180, 360).unwrap();
        let (_, traj) = synth(vec![(33.0, 282.0)], g);
        let s = traj.state(0).unwrap();
        let msl = s.field("msl").unwrap();
        let (argmin, min) =
            msl.iter().enumerate().fold((0, f32::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        assert_eq!(min, 96_300.0);
        assert_eq!(g.latlon_of(argmin / 360, argmin % 360).unwrap(), (33.0, 282.0));
        assert!(s.field("u10").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn off_grid_centre_found_at_nearest_cell() {
        let g = GridGeometry::global(180, 360).unwrap();
        let (_, traj) = synth(vec![(33.3, 281.8)], g);
        let fix = detect_eye(&traj.state(0).unwrap(), &TrackerConfig::new(Region::global()), None).unwrap();
        // brute-force oracle: cell of least great-circle distance
        let mut best = ((0.0, 0.0), f64::INFINITY);
        for i in 0..180 {
            for j in 0..360 {
                let p = g.latlon_of(i, j).unwrap();
                let d = haversine_km(p, (33.3, 281.8));
                if d < best.1 {
                    best = (p, d);
                }
            }
        }
        assert_eq!(fix.position(), best.0);
    }

    #[test]
    fn zero_depth_is_uniform_and_small_radius_rejected() {
        let g = GridGeometry::global(36, 72).unwrap();
        let schema = ChannelSchema::from_names(&["msl"]).unwrap();
        let mut spec = SynthCyclone {
            start_time: 0,
            dt_hours: 6,
            centers: vec![(10.0, 10.0)],
            background_hpa: 1013.0,
            depth_hpa: 0.0,
            radius_deg: 10.0,
            pressure_channel: "msl".into(),
        };
        let t = synth_cyclone(&spec, &g, &schema, None).unwrap();
        assert!(t.state(0).unwrap().data().iter().all(|&v| v == 101_300.0));
        spec.radius_deg = 4.0;
        assert!(matches!(synth_cyclone(&spec, &g, &schema, None), Err(Error::DegenerateVortex(_))));
        spec.radius_deg = 10.0;
        spec.centers = vec![(95.0, 0.0)];
        assert!(synth_cyclone(&spec, &g, &schema, None).is_err());
    }

    #[test]
    fn synth_fills_other_channels_with_means() {
        let g = GridGeometry::global(36, 72).unwrap();
        let schema = ChannelSchema::from_names(&["msl", "t2"]).unwrap();
        let mut stats = NormStats::new();
        stats.insert("msl", 101_000.0, 1_000.0).unwrap();
        stats.insert("t2", 278.5, 20.0).unwrap();
        let spec = SynthCyclone {
            start_time: 0,
            dt_hours: 6,
            centers: vec![(10.0, 10.0)],
            background_hpa: 1013.0,
            depth_hpa: 20.0,
            radius_deg: 10.0,
            pressure_channel: "msl".into(),
        };
        let t = synth_cyclone(&spec, &g, &schema, Some(&stats)).unwrap();
        assert!(t.state(0).unwrap().field("t2").unwrap().iter().all(|&v| v == 278.5));
    }

    #[test]
    fn stationary_track_is_constant() {
        let g = GridGeometry::global(180, 360).unwrap();
        let (_, traj) = synth(vec![(25.0, 300.0); 5], g);
        let cfg = TrackerConfig::new(Region::new(15.0, 35.0, 290.0, 310.0).unwrap());
        let track = extract_track(&traj, &cfg).unwrap();
        assert_eq!(track.len(), 5);
        assert!(track.fixes().iter().all(|f| f.position() == (25.0, 300.0)));
    }

    #[test]
    fn moving_storm_tracked() {
        let g = GridGeometry::global(180, 360).unwrap();
        let centers = SynthCyclone::linear((20.0, 300.0), (1.0, -1.0), 10);
        let (spec, traj) = synth(centers, g);
        let cfg = TrackerConfig::new(Region::new(15.0, 25.0, 295.0, 305.0).unwrap());
        let track = extract_track(&traj, &cfg).unwrap();
        let err = track_error(&track, &spec.truth_track().unwrap()).unwrap();
        assert!(err.per_step_km.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn jump_beyond_gate_loses_track() {
        let g = GridGeometry::global(180, 360).unwrap();
        // 20° of longitude at 25°N is ~2000 km
        let (_, traj) = synth(vec![(25.0, 300.0), (25.0, 300.0), (25.0, 320.0)], g);
        let cfg = TrackerConfig::new(Region::new(15.0, 35.0, 290.0, 310.0).unwrap());
        assert!((haversine_km((25.0, 300.0), (25.0, 320.0)) - 2000.0).abs() < 25.0);
        assert!(matches!(extract_track(&traj, &cfg), Err(Error::TrackLost(2))));
        let mut no_gate = cfg.clone();
        no_gate.gate_km = None;
        // without a gate the seed box keeps being searched and the storm has left it
        let t = extract_track(&traj, &no_gate).unwrap();
        assert_eq!(t.len(), 3);
    }

    #[test]
    fn track_error_examples() {
        let mk = |dlat: f64, n: usize| {
            CycloneTrack::new(
                (0..n)
                    .map(|k| EyeFix {
                        valid_time: k as i64 * 21_600,
                        lat: 25.0 + k as f64 + dlat,
                        lon: 300.0 - k as f64,
                        min_pressure: 96_300.0,
                    })
                    .collect(),
            )
            .unwrap()
        };
        let a = mk(0.0, 6);
        let e = track_error(&a, &a).unwrap();
        assert!(e.per_step_km.iter().all(|&d| d == 0.0) && e.mean_km == 0.0);
        let shifted = track_error(&a, &mk(0.25, 6)).unwrap();
        let expect = 6371.0 * 0.25f64.to_radians();
        assert!((expect - 27.8).abs() < 0.01);
        assert!(shifted.per_step_km.iter().all(|&d| (d - expect).abs() < 1e-9));
        assert!(matches!(track_error(&mk(0.0, 5), &a), Err(Error::TrackTimeMismatch(_))));
    }

    #[test]
    fn track_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let t = CycloneTrack::new(vec![
            EyeFix { valid_time: 1_536_796_800, lat: 24.5, lon: 303.25, min_pressure: 95_412.5 },
            EyeFix { valid_time: 1_536_818_400, lat: 25.0, lon: 302.0, min_pressure: 95_100.0 },
        ])
        .unwrap();
        write_track_csv(&t, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "step,valid_time_iso8601,lat_deg,lon_deg,min_slp_pa\n0,2018-09-13T00:00:00Z,24.5,303.25,95412.5\n"
        ));
        assert_eq!(read_track_csv(&path).unwrap(), t);
    }

    #[test]
    fn track_validation() {
        let f = |t: i64| EyeFix { valid_time: t, lat: 0.0, lon: 0.0, min_pressure: 100_000.0 };
        assert!(CycloneTrack::new(vec![f(0), f(0)]).is_err());
        assert!(CycloneTrack::new(vec![f(3600), f(0)]).is_err());
        let mut bad = f(0);
        bad.lon = 360.0;
        assert!(CycloneTrack::new(vec![bad]).is_err());
    }

    proptest! {
        #[test]
        fn haversine_metric_properties(
            a in (-90.0f64..=90.0, 0.0f64..360.0),
            b in (-90.0f64..=90.0, 0.0f64..360.0),
            c in (-90.0f64..=90.0, 0.0f64..360.0),
        ) {
            let ab = haversine_km(a, b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, haversine_km(b, a));
            prop_assert!(ab <= haversine_km(a, c) + haversine_km(c, b) + 1e-6);
            prop_assert!(haversine_km(a, a) < 1e-9);
        }

        #[test]
        fn argmin_invariant_under_monotone_transform(seed in any::<u64>()) {
            use rand::prelude::*;
            let mut rng = StdRng::seed_from_u64(seed);
            let g = GridGeometry::global(16, 32).unwrap();
            let data: Vec<f32> = (0..g.cells()).map(|_| rng.gen_range(95_000.0..103_000.0f32).round()).collect();
            // strictly increasing map back into the plausible band
            let warped: Vec<f32> = data.iter().map(|&v| {
                let x = v as f64 - 95_000.0;
                (90_000.0 + x + x * x / 8_000.0) as f32
            }).collect();
            let cfg = TrackerConfig::new(Region::global());
            let a = detect_eye(&single(g, data), &cfg, None).unwrap();
            let b = detect_eye(&single(g, warped), &cfg, None).unwrap();
            prop_assert_eq!(a.position(), b.position());
        }
    }
}
