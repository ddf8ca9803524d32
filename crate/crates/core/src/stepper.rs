//! Forecast steppers: map a state valid at `t` to one valid at `t + dt`.
//!
//! Two built-in steppers exist for testing the harness (persistence and
//! rigid zonal advection). The external stepper hosts any real model as a
//! subprocess using file exchange:
//!
//! 1. the harness writes the input state to `{in}` in a scratch directory,
//! 2. substitutes `{in}`, `{out}`, `{dt_hours}` and `{step_index}` into the
//!    command template and runs it with `sh -c`, also exporting
//!    `WX_DT_HOURS` and `WX_STEP_INDEX`,
//! 3. the command must write a state file to `{out}` and exit 0,
//! 4. the harness reads `{out}` back and checks the step contract.

use std::fmt;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, IoContext, Result};
use crate::normalize::{denormalize, normalize};
use crate::tensorio::{read_state, write_state, NormStats, StateTensor};

/// Forecast step length used throughout: a 6-hourly subsample of hourly data.
pub const DEFAULT_DT_HOURS: u32 = 6;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(3600);

// Stderr kept from a failed external stepper.
const STDERR_TAIL: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalSpec {
    command_template: String,
    timeout: Duration,
    expects_normalized: bool,
}

impl ExternalSpec {
    pub fn new(command_template: impl Into<String>, timeout: Duration, expects_normalized: bool) -> Result<Self> {
        let command_template = command_template.into();
        for placeholder in ["{in}", "{out}"] {
            let n = command_template.matches(placeholder).count();
            if n != 1 {
                return Err(Error::InvalidStepper(format!(
                    "command template must contain {placeholder} exactly once (found {n})"
                )));
            }
        }
        if timeout.is_zero() {
            return Err(Error::InvalidStepper("timeout must be positive".into()));
        }
        Ok(Self { command_template, timeout, expects_normalized })
    }

    pub fn command_template(&self) -> &str {
        &self.command_template
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn expects_normalized(&self) -> bool {
        self.expects_normalized
    }

    /// The command line with every placeholder substituted. Paths are
    /// single-quoted for the shell.
    pub fn render_command(&self, input: &Path, output: &Path, dt_hours: u32, step_index: usize) -> String {
        self.command_template
            .replace("{in}", &shell_quote(&input.to_string_lossy()))
            .replace("{out}", &shell_quote(&output.to_string_lossy()))
            .replace("{dt_hours}", &dt_hours.to_string())
            .replace("{step_index}", &step_index.to_string())
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepperSpec {
    Persistence,
    ZonalAdvection { shift_cells_per_step: i64 },
    External(ExternalSpec),
}

impl StepperSpec {
    pub fn expects_normalized(&self) -> bool {
        matches!(self, StepperSpec::External(e) if e.expects_normalized)
    }

    pub fn is_builtin(&self) -> bool {
        !matches!(self, StepperSpec::External(_))
    }
}

/// `persistence`, `zonal:<k>` or `exec:<template>`; external steppers get the
/// default timeout and physical-unit exchange.
impl FromStr for StepperSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "persistence" {
            return Ok(StepperSpec::Persistence);
        }
        if let Some(k) = s.strip_prefix("zonal:") {
            let shift = k.trim().parse().map_err(|_| Error::InvalidStepper(format!("bad zonal shift '{k}'")))?;
            return Ok(StepperSpec::ZonalAdvection { shift_cells_per_step: shift });
        }
        if let Some(template) = s.strip_prefix("exec:") {
            return Ok(StepperSpec::External(ExternalSpec::new(template, DEFAULT_TIMEOUT, false)?));
        }
        Err(Error::InvalidStepper(format!(
            "unknown stepper '{s}' (expected persistence, zonal:<k> or exec:<template>)"
        )))
    }
}

impl fmt::Display for StepperSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepperSpec::Persistence => f.write_str("persistence"),
            StepperSpec::ZonalAdvection { shift_cells_per_step } => write!(f, "zonal:{shift_cells_per_step}"),
            StepperSpec::External(e) => write!(f, "exec:{}", e.command_template),
        }
    }
}

/// Checks that `output` is a valid successor of `input` after `dt_hours`.
/// All violations are reported together.
pub fn validate_step_contract(input: &StateTensor, output: &StateTensor, dt_hours: u32) -> Result<()> {
    let mut problems = Vec::new();
    if !input.schema().same_names(output.schema()) {
        problems.push(format!(
            "channels: expected {} ({}), got {} ({})",
            input.n_channels(),
            input.schema().schema_id(),
            output.n_channels(),
            output.schema().schema_id()
        ));
    }
    if input.geom() != output.geom() {
        problems.push(format!(
            "grid: expected {}x{}, got {}x{}",
            input.geom().n_lat(),
            input.geom().n_lon(),
            output.geom().n_lat(),
            output.geom().n_lon()
        ));
    }
    let expected_time = input.valid_time() + dt_hours as i64 * 3600;
    if output.valid_time() != expected_time {
        problems.push(format!(
            "valid_time: expected {expected_time} (+{dt_hours} h), got {} ({:+} h)",
            output.valid_time(),
            (output.valid_time() - input.valid_time()) as f64 / 3600.0
        ));
    }
    if let Err(e) = output.validate() {
        problems.push(format!("payload: {e}"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::StepperContractViolation(problems.join("; ")))
    }
}

fn advance(state: &StateTensor, dt_hours: u32) -> Result<StateTensor> {
    state.clone().with_valid_time(state.valid_time() + dt_hours as i64 * 3600)
}

/// Circularly shifts every channel `shift` columns eastward
/// (column `j` moves to `j + shift mod n_lon`).
pub fn shift_zonal(state: &StateTensor, shift: i64) -> Result<StateTensor> {
    let geom = *state.geom();
    if !geom.wraps_lon() {
        return Err(Error::InvalidStepper("zonal advection needs a grid that wraps in longitude".into()));
    }
    let n_lon = geom.n_lon();
    let k = shift.rem_euclid(n_lon as i64) as usize;
    let mut out = state.clone();
    for (dst, src) in out.data_mut().chunks_exact_mut(n_lon).zip(state.data().chunks_exact(n_lon)) {
        dst[k..].copy_from_slice(&src[..n_lon - k]);
        dst[..k].copy_from_slice(&src[n_lon - k..]);
    }
    Ok(out)
}

/// Runs one stepper across the steps of a rollout. External steps share one
/// per-run scratch directory which is deleted when the stepper is dropped,
/// unless a step failed, in which case it is kept for inspection.
pub struct Stepper {
    spec: StepperSpec,
    stats: Option<NormStats>,
    scratch_root: PathBuf,
    run_dir: Option<tempfile::TempDir>,
    kept_dir: Option<PathBuf>,
}

impl Stepper {
    pub fn new(spec: StepperSpec, stats: Option<NormStats>, scratch_root: impl Into<PathBuf>) -> Result<Self> {
        if spec.expects_normalized() && stats.is_none() {
            return Err(Error::InvalidStepper("stepper expects normalized input but no statistics were given".into()));
        }
        Ok(Self { spec, stats, scratch_root: scratch_root.into(), run_dir: None, kept_dir: None })
    }

    pub fn spec(&self) -> &StepperSpec {
        &self.spec
    }

    /// Scratch directory retained after a failed external step, if any.
    pub fn retained_scratch(&self) -> Option<&Path> {
        self.kept_dir.as_deref()
    }

    /// Advances `state` by `dt_hours`. The result is in the same units
    /// (physical or normalized) as the input.
    pub fn step(&mut self, state: &StateTensor, dt_hours: u32, step_index: usize) -> Result<StateTensor> {
        if dt_hours == 0 {
            return Err(Error::InvalidStepper("dt_hours must be at least 1".into()));
        }
        let out = match &self.spec {
            StepperSpec::Persistence => advance(state, dt_hours)?,
            StepperSpec::ZonalAdvection { shift_cells_per_step } => {
                advance(&shift_zonal(state, *shift_cells_per_step)?, dt_hours)?
            }
            StepperSpec::External(ext) => {
                let ext = ext.clone();
                self.step_external(&ext, state, dt_hours, step_index)?
            }
        };
        validate_step_contract(state, &out, dt_hours)?;
        Ok(out)
    }

    fn step_external(
        &mut self,
        ext: &ExternalSpec,
        state: &StateTensor,
        dt_hours: u32,
        step_index: usize,
    ) -> Result<StateTensor> {
        // Bring the input into the units the model exchanges.
        let exchange = match (ext.expects_normalized, state.is_normalized()) {
            (true, false) => normalize(state, self.stats()?)?,
            (false, true) => denormalize(state, self.stats()?)?,
            _ => state.clone(),
        };

        let step_dir = self.step_dir(step_index)?;
        let result = self.exchange(ext, &exchange, &step_dir, dt_hours, step_index);
        match result {
            Ok(out) => {
                let _ = std::fs::remove_dir_all(&step_dir);
                let out = if ext.expects_normalized { crate::normalize::assume_normalized(out) } else { out };
                match (ext.expects_normalized, state.is_normalized()) {
                    (true, false) => denormalize(&out, self.stats()?),
                    (false, true) => normalize(&out, self.stats()?),
                    _ => Ok(out),
                }
            }
            Err(e) => {
                if let Some(dir) = self.run_dir.take() {
                    let kept = dir.keep();
                    log::warn!("external stepper failed; scratch files kept in {}", kept.display());
                    self.kept_dir = Some(kept);
                }
                Err(e)
            }
        }
    }

    fn stats(&self) -> Result<&NormStats> {
        self.stats.as_ref().ok_or_else(|| Error::InvalidStepper("normalization statistics required".into()))
    }

    fn step_dir(&mut self, step_index: usize) -> Result<PathBuf> {
        if self.run_dir.is_none() {
            std::fs::create_dir_all(&self.scratch_root).at(&self.scratch_root)?;
            let dir =
                tempfile::Builder::new().prefix("wx-run-").tempdir_in(&self.scratch_root).at(&self.scratch_root)?;
            self.run_dir = Some(dir);
        }
        let dir = self.run_dir.as_ref().unwrap().path().join(format!("step_{step_index:04}"));
        std::fs::create_dir_all(&dir).at(&dir)?;
        Ok(dir)
    }

    fn exchange(
        &self,
        ext: &ExternalSpec,
        input: &StateTensor,
        dir: &Path,
        dt_hours: u32,
        step_index: usize,
    ) -> Result<StateTensor> {
        let in_path = dir.join("in.wxs");
        let out_path = dir.join("out.wxs");
        write_state(input, &in_path)?;
        let command = ext.render_command(&in_path, &out_path, dt_hours, step_index);
        log::debug!("step {step_index}: {command}");
        run_with_timeout(&command, dt_hours, step_index, ext.timeout, dir)?;
        if !out_path.exists() {
            return Err(Error::StepperNoOutput(out_path));
        }
        read_state(&out_path).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::StepperContractViolation(format!("output file: {other}")),
        })
    }
}

fn run_with_timeout(command: &str, dt_hours: u32, step_index: usize, timeout: Duration, dir: &Path) -> Result<()> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .current_dir(dir)
        .env("WX_DT_HOURS", dt_hours.to_string())
        .env("WX_STEP_INDEX", step_index.to_string())
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        // own process group so a timeout can kill the whole command tree
        .process_group(0)
        .spawn()
        .at(dir)?;

    let stdout = child.stdout.take().unwrap();
    let stderr = child.stderr.take().unwrap();
    let out_reader = thread::spawn(move || drain(stdout));
    let err_reader = thread::spawn(move || drain(stderr));

    let started = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait().at(dir)? {
            break status;
        }
        if started.elapsed() > timeout {
            // SAFETY: killpg on the group we created; no memory is touched.
            unsafe {
                libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
            }
            let _ = child.wait();
            return Err(Error::StepperTimeout(timeout.as_secs()));
        }
        thread::sleep(Duration::from_millis(10));
    };

    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    for line in String::from_utf8_lossy(&stdout).lines() {
        log::info!("[stepper] {line}");
    }
    if !status.success() {
        let text = String::from_utf8_lossy(&stderr);
        let text = text.trim();
        let tail = match text.char_indices().rev().nth(STDERR_TAIL) {
            Some((i, _)) => &text[i..],
            None => text,
        };
        return Err(Error::StepperFailed { code: status.code(), stderr: tail.to_string() });
    }
    Ok(())
}

fn drain(mut r: impl Read) -> Vec<u8> {
    let mut buf = Vec::new();
    let _ = r.read_to_end(&mut buf);
    buf
}

/// One step with a throwaway [`Stepper`] using the system temp directory and
/// no normalization statistics.
pub fn step(spec: &StepperSpec, state: &StateTensor, dt_hours: u32, step_index: usize) -> Result<StateTensor> {
    Stepper::new(spec.clone(), None, std::env::temp_dir())?.step(state, dt_hours, step_index)
}
