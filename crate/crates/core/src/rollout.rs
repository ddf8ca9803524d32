//! The autoregressive forecast loop and the on-disk trajectory layout.
//!
//! A trajectory directory holds `step_0000.wxs` (the initial condition)
//! through `step_NNNN.wxs` plus `manifest.json`, which records the schema,
//! geometry, step length, stepper and a SHA-256 digest of every step's
//! payload. The manifest is rewritten after each completed step so an
//! interrupted run can be resumed from the last step whose digest checks out.

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::normalize::{denormalize, normalize};
use crate::schema::{ChannelSchema, GridGeometry};
use crate::stepper::{Stepper, StepperSpec, DEFAULT_DT_HOURS};
use crate::tensorio::{read_state, write_state, NormStats, StateTensor};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "wx-trajectory/1";

pub fn step_file_name(k: usize) -> String {
    format!("step_{k:04}.wxs")
}

fn parse_step_file_name(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("step_")?.strip_suffix(".wxs")?;
    (digits.len() >= 4 && digits.bytes().all(|b| b.is_ascii_digit())).then(|| digits.parse().ok()).flatten()
}

#[derive(Debug, Clone)]
pub struct RolloutConfig {
    pub stepper: StepperSpec,
    pub n_steps: usize,
    pub dt_hours: u32,
    pub out_dir: PathBuf,
    /// Carry the state in normalized units between steps of a stepper that
    /// expects normalized input, instead of denormalizing and renormalizing
    /// around every call. Files on disk are always in physical units.
    pub keep_normalized: bool,
    /// Continue from the last step in `out_dir` whose digest matches the manifest.
    pub resume: bool,
    /// Parent directory for external-stepper scratch space.
    pub scratch_dir: PathBuf,
}

impl RolloutConfig {
    pub fn new(stepper: StepperSpec, n_steps: usize, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            stepper,
            n_steps,
            dt_hours: DEFAULT_DT_HOURS,
            out_dir: out_dir.into(),
            keep_normalized: false,
            resume: false,
            scratch_dir: std::env::temp_dir(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidRollout("n_steps must be at least 1".into()));
        }
        if self.dt_hours == 0 {
            return Err(Error::InvalidRollout("dt_hours must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryRecord {
    pub n_lat: usize,
    pub n_lon: usize,
    pub lat_start: f64,
    pub lat_step: f64,
    pub lon_start: f64,
    pub lon_step: f64,
}

impl From<&GridGeometry> for GeometryRecord {
    fn from(g: &GridGeometry) -> Self {
        Self {
            n_lat: g.n_lat(),
            n_lon: g.n_lon(),
            lat_start: g.lat_start(),
            lat_step: g.lat_step(),
            lon_start: g.lon_start(),
            lon_step: g.lon_step(),
        }
    }
}

impl GeometryRecord {
    pub fn to_geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(self.n_lat, self.n_lon, self.lat_start, self.lat_step, self.lon_start, self.lon_step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub file: String,
    pub valid_time: i64,
    pub sha256: String,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub step: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub schema_id: String,
    pub channels: Vec<String>,
    pub geometry: GeometryRecord,
    pub dt_hours: u32,
    pub n_steps: usize,
    pub stepper: String,
    pub initial_valid_time: i64,
    pub status: RunStatus,
    pub steps: Vec<StepRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureRecord>,
}

impl Manifest {
    fn for_initial(initial: &StateTensor, dt_hours: u32, n_steps: usize, stepper: String) -> Self {
        Self {
            format: MANIFEST_FORMAT.to_string(),
            schema_id: initial.schema().schema_id().to_string(),
            channels: initial.schema().names().map(String::from).collect(),
            geometry: initial.geom().into(),
            dt_hours,
            n_steps,
            stepper,
            initial_valid_time: initial.valid_time(),
            status: RunStatus::Running,
            steps: Vec::new(),
            failure: None,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).at(&path)?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::ManifestMismatch(format!("{}: {e}", path.display())))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::ManifestMismatch(format!("unsupported manifest format '{}'", manifest.format)));
        }
        Ok(manifest)
    }

    /// Atomically replaces the manifest in `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_NAME);
        let tmp = dir.join(format!(".{MANIFEST_NAME}.partial"));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        {
            use std::io::Write;
            let mut f = std::fs::File::create(&tmp).at(&tmp)?;
            f.write_all(text.as_bytes()).at(&tmp)?;
            f.write_all(b"\n").at(&tmp)?;
            f.sync_all().at(&tmp)?;
        }
        std::fs::rename(&tmp, &path).at(&path)
    }

    fn schema(&self) -> Result<ChannelSchema> {
        ChannelSchema::from_names(&self.channels)
    }

    fn expected_time(&self, k: usize) -> i64 {
        self.initial_valid_time + k as i64 * self.dt_hours as i64 * 3600
    }
}

#[derive(Debug, Clone)]
enum Storage {
    Memory(Vec<StateTensor>),
    Disk { dir: PathBuf, files: Vec<String> },
}

/// An ordered sequence of states at fixed spacing; index 0 is the initial
/// condition. States are held in memory or read lazily from a trajectory
/// directory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    schema: ChannelSchema,
    geom: GridGeometry,
    dt_hours: u32,
    valid_times: Vec<i64>,
    wall_seconds: Vec<f64>,
    stepper: Option<String>,
    storage: Storage,
}

impl Trajectory {
    /// Wraps in-memory states, checking the shared schema/geometry and the
    /// `t0 + k·dt` time spacing.
    pub fn from_states(states: Vec<StateTensor>, dt_hours: u32) -> Result<Self> {
        let first = states.first().ok_or_else(|| Error::TrajectoryMismatch("trajectory has no states".into()))?;
        if dt_hours == 0 {
            return Err(Error::TrajectoryMismatch("dt_hours must be at least 1".into()));
        }
        let t0 = first.valid_time();
        for (k, s) in states.iter().enumerate() {
            if !s.schema().same_names(first.schema()) || s.geom() != first.geom() {
                return Err(Error::TrajectoryMismatch(format!("state {k} has a different schema or grid")));
            }
            let expected = t0 + k as i64 * dt_hours as i64 * 3600;
            if s.valid_time() != expected {
                return Err(Error::TrajectoryMismatch(format!(
                    "state {k} valid at {}, expected {expected}",
                    s.valid_time()
                )));
            }
        }
        Ok(Self {
            schema: first.schema().clone(),
            geom: *first.geom(),
            dt_hours,
            valid_times: states.iter().map(StateTensor::valid_time).collect(),
            wall_seconds: vec![0.0; states.len()],
            stepper: None,
            storage: Storage::Memory(states),
        })
    }

    fn from_manifest(dir: &Path, manifest: &Manifest) -> Result<Self> {
        Ok(Self {
            schema: manifest.schema()?,
            geom: manifest.geometry.to_geometry()?,
            dt_hours: manifest.dt_hours,
            valid_times: manifest.steps.iter().map(|s| s.valid_time).collect(),
            wall_seconds: manifest.steps.iter().map(|s| s.wall_seconds).collect(),
            stepper: Some(manifest.stepper.clone()),
            storage: Storage::Disk {
                dir: dir.to_path_buf(),
                files: manifest.steps.iter().map(|s| s.file.clone()).collect(),
            },
        })
    }

    /// Number of states (steps + 1).
    pub fn len(&self) -> usize {
        self.valid_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_times.is_empty()
    }

    pub fn schema(&self) -> &ChannelSchema {
        &self.schema
    }

    pub fn geom(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn dt_hours(&self) -> u32 {
        self.dt_hours
    }

    pub fn valid_times(&self) -> &[i64] {
        &self.valid_times
    }

    /// Wall-clock seconds spent producing each state (0 for the initial condition).
    pub fn wall_seconds(&self) -> &[f64] {
        &self.wall_seconds
    }

    /// The stepper that produced the trajectory, when known.
    pub fn stepper(&self) -> Option<&str> {
        self.stepper.as_deref()
    }

    /// Hours between state `k` and the initial condition.
    pub fn lead_hours(&self, k: usize) -> i64 {
        (self.valid_times[k] - self.valid_times[0]) / 3600
    }

    /// Directory backing this trajectory, if it lives on disk.
    pub fn dir(&self) -> Option<&Path> {
        match &self.storage {
            Storage::Disk { dir, .. } => Some(dir),
            Storage::Memory(_) => None,
        }
    }

    pub fn state(&self, k: usize) -> Result<Cow<'_, StateTensor>> {
        if k >= self.len() {
            return Err(Error::TrajectoryMismatch(format!("state {k} out of range (len {})", self.len())));
        }
        match &self.storage {
            Storage::Memory(states) => Ok(Cow::Borrowed(&states[k])),
            Storage::Disk { dir, files } => read_state(dir.join(&files[k])).map(Cow::Owned),
        }
    }

    pub fn states(&self) -> impl Iterator<Item = Result<Cow<'_, StateTensor>>> + '_ {
        (0..self.len()).map(move |k| self.state(k))
    }
}

/// Writes every state of `traj` into `dir` with a complete manifest.
pub fn write_trajectory(traj: &Trajectory, dir: impl AsRef<Path>, stepper: &str) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).at(dir)?;
    remove_step_files(dir, 0)?;
    let first = traj.state(0)?;
    let mut manifest = Manifest::for_initial(&first, traj.dt_hours(), traj.len() - 1, stepper.to_string());
    drop(first);
    for (k, state) in traj.states().enumerate() {
        let state = state?;
        let file = step_file_name(k);
        write_state(&state, dir.join(&file))?;
        manifest.steps.push(StepRecord {
            index: k,
            file,
            valid_time: state.valid_time(),
            sha256: state.payload_digest(),
            wall_seconds: traj.wall_seconds()[k],
        });
    }
    manifest.status = RunStatus::Complete;
    manifest.save(dir)?;
    Ok(manifest)
}

fn remove_step_files(dir: &Path, from: usize) -> Result<()> {
    for entry in std::fs::read_dir(dir).at(dir)? {
        let entry = entry.at(dir)?;
        if let Some(k) = entry.file_name().to_str().and_then(parse_step_file_name) {
            if k >= from {
                std::fs::remove_file(entry.path()).at(entry.path())?;
            }
        }
    }
    Ok(())
}

fn step_indices_on_disk(dir: &Path) -> Result<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    for entry in std::fs::read_dir(dir).at(dir)? {
        let entry = entry.at(dir)?;
        if let Some(k) = entry.file_name().to_str().and_then(parse_step_file_name) {
            out.insert(k);
        }
    }
    Ok(out)
}

/// Reads and checks step `k` of a directory against its manifest record.
fn load_checked(dir: &Path, manifest: &Manifest, k: usize) -> Result<StateTensor> {
    let rec = &manifest.steps[k];
    if rec.index != k || rec.file != step_file_name(k) {
        return Err(Error::ManifestMismatch(format!("entry {k} names {} (index {})", rec.file, rec.index)));
    }
    let state = read_state(dir.join(&rec.file))?;
    let expected = manifest.expected_time(k);
    if state.valid_time() != expected || rec.valid_time != expected {
        return Err(Error::ManifestMismatch(format!(
            "{}: valid time {} (manifest {}), expected {expected}",
            rec.file,
            state.valid_time(),
            rec.valid_time
        )));
    }
    if !state.schema().names().eq(manifest.channels.iter().map(String::as_str)) {
        return Err(Error::ManifestMismatch(format!("{}: channel table differs from manifest", rec.file)));
    }
    if GeometryRecord::from(state.geom()) != manifest.geometry {
        return Err(Error::ManifestMismatch(format!("{}: grid differs from manifest", rec.file)));
    }
    if state.payload_digest() != rec.sha256 {
        return Err(Error::ManifestMismatch(format!("{}: payload digest differs from manifest", rec.file)));
    }
    Ok(state)
}

/// Opens a complete trajectory directory, verifying every step file
/// against the manifest. States are then read lazily.
pub fn read_trajectory(dir: impl AsRef<Path>) -> Result<Trajectory> {
    let dir = dir.as_ref();
    let manifest = Manifest::load(dir)?;
    let on_disk = step_indices_on_disk(dir)?;
    let claimed = manifest.steps.len();

    let missing: Vec<usize> = (0..claimed).filter(|k| !on_disk.contains(k)).collect();
    if let Some(&first_missing) = missing.first() {
        if on_disk.iter().any(|&k| k > first_missing) {
            return Err(Error::TrajectoryGap(format!(
                "{} is missing but later steps exist",
                step_file_name(first_missing)
            )));
        }
        return Err(Error::ManifestMismatch(format!(
            "manifest lists {claimed} step files but only {} exist",
            on_disk.len()
        )));
    }
    if let Some(extra) = on_disk.iter().find(|&&k| k >= claimed) {
        return Err(Error::ManifestMismatch(format!(
            "{} exists but the manifest lists only {claimed} files",
            step_file_name(*extra)
        )));
    }
    if claimed != manifest.n_steps + 1 {
        return Err(Error::ManifestMismatch(format!(
            "manifest claims {} steps but records {} files",
            manifest.n_steps, claimed
        )));
    }
    for k in 0..claimed {
        load_checked(dir, &manifest, k)?;
    }
    Trajectory::from_manifest(dir, &manifest)
}

/// Decides where a resumed run picks up: the number of leading steps whose
/// files validate against an existing, compatible manifest.
fn resumable_prefix(dir: &Path, fresh: &Manifest, initial: &StateTensor) -> Result<Option<(Manifest, StateTensor)>> {
    if !dir.join(MANIFEST_NAME).exists() {
        return Ok(None);
    }
    let old = Manifest::load(dir)?;
    let compatible = old.channels == fresh.channels
        && old.geometry == fresh.geometry
        && old.dt_hours == fresh.dt_hours
        && old.stepper == fresh.stepper
        && old.initial_valid_time == fresh.initial_valid_time
        && old.steps.first().is_some_and(|s| s.sha256 == initial.payload_digest());
    if !compatible {
        return Err(Error::ManifestMismatch(
            "existing run in the output directory was produced from a different configuration".into(),
        ));
    }
    let mut last = None;
    for k in 0..old.steps.len() {
        match load_checked(dir, &old, k) {
            Ok(state) => last = Some(state),
            Err(e) => {
                log::warn!("resume: step {k} does not validate ({e}); recomputing from step {k}");
                break;
            }
        }
    }
    let Some(last) = last else { return Ok(None) };
    let mut manifest = old;
    let done = last.valid_time() - manifest.initial_valid_time;
    let k = (done / (manifest.dt_hours as i64 * 3600)) as usize;
    manifest.steps.truncate(k + 1);
    Ok(Some((manifest, last)))
}

/// Rolls `initial` forward `cfg.n_steps` times, writing every state (the
/// initial condition included) into `cfg.out_dir`.
pub fn run_rollout(initial: &StateTensor, cfg: &RolloutConfig, stats: Option<&NormStats>) -> Result<Trajectory> {
    cfg.validate()?;
    if initial.is_normalized() {
        return Err(Error::StateFlag("initial condition must be in physical units".into()));
    }
    if cfg.stepper.expects_normalized() && stats.is_none() {
        return Err(Error::InvalidRollout("stepper expects normalized input; statistics are required".into()));
    }
    initial.validate()?;
    let dir = cfg.out_dir.as_path();
    std::fs::create_dir_all(dir).at(dir)?;

    let fresh = Manifest::for_initial(initial, cfg.dt_hours, cfg.n_steps, cfg.stepper.to_string());
    let resumed = if cfg.resume { resumable_prefix(dir, &fresh, initial)? } else { None };

    let (mut manifest, mut current) = match resumed {
        Some((mut m, last)) => {
            log::info!("resuming after step {}", m.steps.len() - 1);
            m.n_steps = cfg.n_steps;
            m.status = RunStatus::Running;
            m.failure = None;
            remove_step_files(dir, m.steps.len())?;
            (m, last)
        }
        None => {
            remove_step_files(dir, 0)?;
            let mut m = fresh;
            let file = step_file_name(0);
            write_state(initial, dir.join(&file))?;
            m.steps.push(StepRecord {
                index: 0,
                file,
                valid_time: initial.valid_time(),
                sha256: initial.payload_digest(),
                wall_seconds: 0.0,
            });
            (m, initial.clone())
        }
    };
    manifest.save(dir)?;

    let carry_normalized = cfg.keep_normalized && cfg.stepper.expects_normalized();
    if carry_normalized {
        current = normalize(&current, stats.unwrap())?;
    }
    let mut stepper = Stepper::new(cfg.stepper.clone(), stats.cloned(), &cfg.scratch_dir)?;

    for k in manifest.steps.len()..=cfg.n_steps {
        let started = Instant::now();
        let produced = stepper.step(&current, cfg.dt_hours, k - 1).and_then(|next| {
            let physical = if next.is_normalized() {
                Cow::Owned(denormalize(&next, stats.unwrap())?)
            } else {
                Cow::Borrowed(&next)
            };
            let file = step_file_name(k);
            write_state(&physical, dir.join(&file))?;
            let rec = StepRecord {
                index: k,
                file,
                valid_time: physical.valid_time(),
                sha256: physical.payload_digest(),
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            Ok((next, rec))
        });
        match produced {
            Ok((next, rec)) => {
                log::info!("step {k}/{} done in {:.3} s", cfg.n_steps, rec.wall_seconds);
                manifest.steps.push(rec);
                manifest.save(dir)?;
                current = next;
            }
            Err(e) => {
                manifest.status = RunStatus::Failed;
                manifest.failure = Some(FailureRecord { step: k, error: e.to_string() });
                if let Err(save_err) = manifest.save(dir) {
                    log::error!("could not record failure in manifest: {save_err}");
                }
                return Err(e);
            }
        }
    }
    manifest.steps.truncate(cfg.n_steps + 1);
    manifest.status = RunStatus::Complete;
    manifest.save(dir)?;
    Trajectory::from_manifest(dir, &manifest)
}
