//! The `wx` command line.
//!
//! Exit codes: 0 on success, 1 on a domain error (one `error: ...` line on
//! stderr), 2 on a usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cyclone::{self, SynthCyclone, TrackerConfig};
use crate::error::{Error, IoContext, Result};
use crate::normalize::{assume_normalized, denormalize, normalize};
use crate::render::{self, Colormap, Projection, RenderSpec};
use crate::rollout::{self, RolloutConfig};
use crate::schema::{build_schema, format_schema_table, ChannelSchema, GridGeometry, Region, SchemaId};
use crate::stepper::{self, ExternalSpec, StepperSpec, DEFAULT_DT_HOURS};
use crate::tensorio::{read_state, read_stats, write_state, StateTensor};
use crate::verify;

/// Filename suffix marking a state file stored in normalized units.
pub const NORM_SUFFIX: &str = ".norm.wxs";

#[derive(Debug, Parser)]
#[command(name = "wx", version, about = "Autoregressive weather-forecast harness")]
pub struct Cli {
    /// Parent directory for stepper scratch space [default: system temp dir]
    #[arg(long, global = true, env = "WX_SCRATCH", value_name = "DIR")]
    pub scratch_dir: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    pub log_level: LogLevel,

    /// Require every input state to be the 73-channel schema on the 720x1440 grid
    #[arg(long, global = true)]
    pub strict_era5: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LogLevel {
    Off,
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl From<LogLevel> for log::LevelFilter {
    fn from(l: LogLevel) -> Self {
        match l {
            LogLevel::Off => log::LevelFilter::Off,
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
            LogLevel::Trace => log::LevelFilter::Trace,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print or check channel schemas
    #[command(subcommand)]
    Schema(SchemaCmd),
    /// Standardize a state with per-channel statistics, or undo it
    Normalize(NormalizeArgs),
    /// Roll a state forward with a stepper, writing every step
    Rollout(RolloutArgs),
    /// Extract a cyclone track from a trajectory
    Track(TrackArgs),
    /// Write a trajectory containing a synthetic cyclone
    Synth(SynthArgs),
    /// Score forecasts against truth
    #[command(subcommand)]
    Verify(VerifyCmd),
    /// Render one channel of a state as a PPM image
    Render(RenderArgs),
    /// Advance one state with a built-in stepper (usable as an external stepper)
    ReferenceStep(ReferenceStepArgs),
}

#[derive(Debug, Subcommand)]
pub enum SchemaCmd {
    /// One line per channel: index, name, units, level
    Print {
        /// fcnv2-73 or fcn-20
        id: String,
    },
    /// Read a state file and report its schema and grid
    Validate {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Require this schema id
        #[arg(long)]
        schema: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// CSV with header `channel,mean,std`
    #[arg(long, value_name = "FILE")]
    pub stats: PathBuf,
    /// Output file; must end in .norm.wxs unless --invert
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Convert a .norm.wxs file back to physical units
    #[arg(long)]
    pub invert: bool,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    /// Initial condition
    #[arg(long, value_name = "FILE")]
    pub init: PathBuf,
    /// persistence, zonal:<k> or exec:<template with {in} and {out}>
    #[arg(long)]
    pub stepper: String,
    #[arg(long, value_name = "N")]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_DT_HOURS)]
    pub dt_hours: u32,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Statistics for steppers that exchange normalized states
    #[arg(long, value_name = "FILE")]
    pub stats: Option<PathBuf>,
    /// Continue from the last valid step in --out-dir
    #[arg(long)]
    pub resume: bool,
    /// Seconds allowed per external stepper call
    #[arg(long, default_value_t = 3600)]
    pub timeout: u64,
    /// The external stepper reads and writes normalized states
    #[arg(long, requires = "stats")]
    pub expects_normalized: bool,
    /// Keep the state normalized between external calls
    #[arg(long, requires = "expects_normalized")]
    pub keep_normalized: bool,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long, value_name = "DIR")]
    pub traj_dir: PathBuf,
    /// Seed box lat_min,lat_max,lon_min,lon_max
    #[arg(long, allow_hyphen_values = true)]
    pub region: Region,
    /// Continuity gate in km per 6 h
    #[arg(long, default_value_t = cyclone::DEFAULT_GATE_KM, conflicts_with = "no_gate")]
    pub gate_km: f64,
    /// Search the seed box at every step instead of gating
    #[arg(long)]
    pub no_gate: bool,
    #[arg(long, default_value = "msl")]
    pub channel: String,
    /// Apply a 3x3 box filter before locating the minimum
    #[arg(long)]
    pub smooth: bool,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Initial valid time (RFC 3339)
    #[arg(long, default_value = "2018-09-13T00:00:00Z")]
    pub start: String,
    #[arg(long, default_value_t = 17)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_DT_HOURS)]
    pub dt_hours: u32,
    #[arg(long, default_value_t = 20.0, allow_hyphen_values = true)]
    pub lat0: f64,
    #[arg(long, default_value_t = 300.0, allow_hyphen_values = true)]
    pub lon0: f64,
    /// Degrees of latitude moved per step
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub dlat: f64,
    /// Degrees of longitude moved per step
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub dlon: f64,
    #[arg(long, default_value_t = 50.0)]
    pub depth_hpa: f64,
    #[arg(long, default_value_t = 1013.0)]
    pub background_hpa: f64,
    #[arg(long, default_value_t = 3.0)]
    pub radius_deg: f64,
    /// Global grid as ROWSxCOLS
    #[arg(long, default_value = "720x1440", value_parser = parse_grid)]
    pub grid: GridGeometry,
    /// Schema id or comma-separated channel names
    #[arg(long, default_value = "msl")]
    pub schema: String,
    /// Fill non-pressure channels with these means instead of zero
    #[arg(long, value_name = "FILE")]
    pub stats: Option<PathBuf>,
    /// Also write the planted track as CSV
    #[arg(long, value_name = "FILE")]
    pub track_out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum VerifyCmd {
    /// Per-channel MSE of normalized fields at every lead
    Mse {
        #[arg(long, value_name = "DIR")]
        pred_dir: PathBuf,
        #[arg(long, value_name = "DIR")]
        truth_dir: PathBuf,
        #[arg(long, value_name = "FILE")]
        stats: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Latitude-weighted RMSE of one channel at every lead
    Rmse {
        #[arg(long, value_name = "DIR")]
        pred_dir: PathBuf,
        #[arg(long, value_name = "DIR")]
        truth_dir: PathBuf,
        #[arg(long)]
        channel: String,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Great-circle distance between two track CSV files
    Track {
        #[arg(long, value_name = "FILE")]
        pred: PathBuf,
        #[arg(long, value_name = "FILE")]
        truth: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long)]
    pub channel: String,
    #[arg(long, default_value = "robinson")]
    pub projection: Projection,
    #[arg(long, default_value_t = 180.0, allow_hyphen_values = true)]
    pub central_meridian: f64,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Crop to lat_min,lat_max,lon_min,lon_max before rendering
    #[arg(long, allow_hyphen_values = true)]
    pub region: Option<Region>,
    /// Colour scale limits as min,max
    #[arg(long, allow_hyphen_values = true, value_parser = parse_range)]
    pub range: Option<(f64, f64)>,
    /// Graticule spacing in degrees (0 for none)
    #[arg(long, default_value_t = 30.0)]
    pub graticule: f64,
    #[arg(long, default_value_t = 1440)]
    pub width: usize,
    /// diverging or sequential [default: diverging for winds]
    #[arg(long)]
    pub colormap: Option<Colormap>,
}

#[derive(Debug, Args)]
pub struct ReferenceStepArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DT_HOURS)]
    pub dt_hours: u32,
    #[arg(long, default_value_t = 0)]
    pub step_index: usize,
    /// persistence or zonal:<k>
    #[arg(long, default_value = "persistence")]
    pub stepper: String,
}

fn parse_grid(s: &str) -> std::result::Result<GridGeometry, String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected ROWSxCOLS")?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad row count '{h}'"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad column count '{w}'"))?;
    GridGeometry::global(h, w).map_err(|e| e.to_string())
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected min,max")?;
    let a: f64 = a.trim().parse().map_err(|_| format!("bad number '{a}'"))?;
    let b: f64 = b.trim().parse().map_err(|_| format!("bad number '{b}'"))?;
    if a.is_nan() || b.is_nan() || a >= b {
        return Err(format!("range min {a} must be below max {b}"));
    }
    Ok((a, b))
}

fn is_norm_path(p: &Path) -> bool {
    p.to_string_lossy().ends_with(NORM_SUFFIX)
}

struct Context {
    scratch_dir: PathBuf,
    strict_era5: bool,
}

impl Context {
    fn load_state(&self, path: &Path) -> Result<StateTensor> {
        let state = read_state(path)?;
        if self.strict_era5 {
            if state.schema().schema_id() != SchemaId::Fcnv2_73 {
                return Err(Error::InvalidSchema(format!(
                    "{}: --strict-era5 requires the fcnv2-73 channels",
                    path.display()
                )));
            }
            if !state.geom().is_canonical() {
                return Err(Error::InvalidGeometry(format!(
                    "{}: --strict-era5 requires the 720x1440 grid, got {}x{}",
                    path.display(),
                    state.geom().n_lat(),
                    state.geom().n_lon()
                )));
            }
        }
        Ok(if is_norm_path(path) { assume_normalized(state) } else { state })
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::new().filter_level(cli.log_level.into()).format_timestamp(None).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let scratch_dir = cli.scratch_dir.unwrap_or_else(std::env::temp_dir);
    let ctx = Context { scratch_dir, strict_era5: cli.strict_era5 };
    match cli.command {
        Command::Schema(cmd) => schema_cmd(&ctx, cmd),
        Command::Normalize(a) => normalize_cmd(&ctx, a),
        Command::Rollout(a) => rollout_cmd(&ctx, a),
        Command::Track(a) => track_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Verify(cmd) => verify_cmd(cmd),
        Command::Render(a) => render_cmd(&ctx, a),
        Command::ReferenceStep(a) => reference_step_cmd(&ctx, a),
    }
}

fn schema_cmd(ctx: &Context, cmd: SchemaCmd) -> Result<()> {
    match cmd {
        SchemaCmd::Print { id } => {
            print!("{}", format_schema_table(&build_schema(&id)?));
        }
        SchemaCmd::Validate { input, schema } => {
            let s = ctx.load_state(&input)?;
            if let Some(id) = schema {
                let want = build_schema(&id)?;
                if !want.same_names(s.schema()) {
                    return Err(Error::SchemaMismatch(format!(
                        "{} does not carry the {id} channels in order",
                        input.display()
                    )));
                }
            }
            let g = s.geom();
            println!(
                "{}: {} channels ({}), {}x{} grid{}, valid {}",
                input.display(),
                s.n_channels(),
                s.schema().schema_id(),
                g.n_lat(),
                g.n_lon(),
                if g.is_canonical() { " (canonical)" } else { "" },
                cyclone::format_time(s.valid_time())
            );
        }
    }
    Ok(())
}

fn normalize_cmd(ctx: &Context, a: NormalizeArgs) -> Result<()> {
    let state = ctx.load_state(&a.input)?;
    let stats = read_stats(&a.stats, state.schema())?;
    let out = if a.invert {
        if !state.is_normalized() {
            return Err(Error::StateFlag(format!("--invert expects a {NORM_SUFFIX} input, got {}", a.input.display())));
        }
        if is_norm_path(&a.out) {
            return Err(Error::StateFlag(format!("physical-unit output must not end in {NORM_SUFFIX}")));
        }
        denormalize(&state, &stats)?
    } else {
        if !is_norm_path(&a.out) {
            return Err(Error::StateFlag(format!("normalized output must end in {NORM_SUFFIX}")));
        }
        normalize(&state, &stats)?
    };
    write_state(&out, &a.out)
}

fn rollout_cmd(ctx: &Context, a: RolloutArgs) -> Result<()> {
    let init = ctx.load_state(&a.init)?;
    let mut spec: StepperSpec = a.stepper.parse()?;
    if let StepperSpec::External(e) = &spec {
        spec = StepperSpec::External(ExternalSpec::new(
            e.command_template(),
            Duration::from_secs(a.timeout),
            a.expects_normalized,
        )?);
    } else if a.expects_normalized {
        return Err(Error::InvalidStepper("--expects-normalized applies to exec: steppers only".into()));
    }
    let stats = a.stats.as_deref().map(|p| read_stats(p, init.schema())).transpose()?;
    let mut cfg = RolloutConfig::new(spec, a.steps, &a.out_dir);
    cfg.dt_hours = a.dt_hours;
    cfg.resume = a.resume;
    cfg.keep_normalized = a.keep_normalized;
    cfg.scratch_dir = ctx.scratch_dir.clone();
    std::fs::create_dir_all(&cfg.scratch_dir).at(&cfg.scratch_dir)?;
    let traj = rollout::run_rollout(&init, &cfg, stats.as_ref())?;
    println!("wrote {} states to {} spanning {} h", traj.len(), a.out_dir.display(), traj.lead_hours(traj.len() - 1));
    Ok(())
}

fn track_cmd(a: TrackArgs) -> Result<()> {
    let traj = rollout::read_trajectory(&a.traj_dir)?;
    let mut cfg = TrackerConfig::new(a.region);
    cfg.gate_km = (!a.no_gate).then_some(a.gate_km);
    cfg.pressure_channel = a.channel;
    cfg.smooth = a.smooth;
    let track = cyclone::extract_track(&traj, &cfg)?;
    cyclone::write_track_csv(&track, &a.out)?;
    let min = track.fixes().iter().map(|f| f.min_pressure).fold(f64::INFINITY, f64::min);
    println!("{} fixes, deepest {:.1} hPa", track.len(), min / 100.0);
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let schema = match build_schema(&a.schema) {
        Ok(s) => s,
        Err(Error::UnknownSchema(_)) => {
            let names: Vec<&str> = a.schema.split(',').map(str::trim).collect();
            ChannelSchema::from_names(&names)?
        }
        Err(e) => return Err(e),
    };
    let stats = a.stats.as_deref().map(|p| read_stats(p, &schema)).transpose()?;
    let spec = SynthCyclone {
        start_time: cyclone::parse_time(&a.start)?,
        dt_hours: a.dt_hours,
        centers: SynthCyclone::linear((a.lat0, a.lon0), (a.dlat, a.dlon), a.steps),
        background_hpa: a.background_hpa,
        depth_hpa: a.depth_hpa,
        radius_deg: a.radius_deg,
        pressure_channel: "msl".into(),
    };
    let traj = cyclone::synth_cyclone(&spec, &a.grid, &schema, stats.as_ref())?;
    rollout::write_trajectory(&traj, &a.out_dir, "synthetic-cyclone")?;
    if let Some(p) = &a.track_out {
        cyclone::write_track_csv(&spec.truth_track()?, p)?;
    }
    println!("wrote {} states to {}", traj.len(), a.out_dir.display());
    Ok(())
}

fn verify_cmd(cmd: VerifyCmd) -> Result<()> {
    match cmd {
        VerifyCmd::Mse { pred_dir, truth_dir, stats, out } => {
            let pred = rollout::read_trajectory(&pred_dir)?;
            let truth = rollout::read_trajectory(&truth_dir)?;
            let stats = read_stats(&stats, pred.schema())?;
            let reports = verify::score_trajectory(&pred, &truth, &stats)?;
            verify::write_scores_csv(&reports, &out)?;
            if let Some(last) = reports.last() {
                println!("mse at +{} h: {:.6} (unweighted channel mean)", last.lead_time_hours, last.aggregate);
            }
        }
        VerifyCmd::Rmse { pred_dir, truth_dir, channel, out } => {
            let pred = rollout::read_trajectory(&pred_dir)?;
            let truth = rollout::read_trajectory(&truth_dir)?;
            let reports = verify::score_trajectory_rmse(&pred, &truth, &channel)?;
            verify::write_scores_csv(&reports, &out)?;
            if let Some(last) = reports.last() {
                println!("{channel} rmse at +{} h: {:.6}", last.lead_time_hours, last.aggregate);
            }
        }
        VerifyCmd::Track { pred, truth } => {
            let err = cyclone::track_error(&cyclone::read_track_csv(&pred)?, &cyclone::read_track_csv(&truth)?)?;
            for (k, d) in err.per_step_km.iter().enumerate() {
                println!("step {k}: {d:.1} km");
            }
            println!("mean track error: {:.1} km", err.mean_km);
        }
    }
    Ok(())
}

fn render_cmd(ctx: &Context, a: RenderArgs) -> Result<()> {
    let mut state = ctx.load_state(&a.input)?;
    if let Some(r) = &a.region {
        state = render::subset_region(&state, r)?;
    }
    let mut spec = RenderSpec::new(&a.channel, a.projection);
    spec.central_meridian = a.central_meridian;
    spec.value_range = a.range;
    spec.graticule_deg = a.graticule;
    spec.width_px = a.width;
    if let Some(c) = a.colormap {
        spec.colormap = c;
    }
    render::render_field(&state, &spec, &a.out)
}

fn reference_step_cmd(ctx: &Context, a: ReferenceStepArgs) -> Result<()> {
    let spec: StepperSpec = a.stepper.parse()?;
    if !spec.is_builtin() {
        return Err(Error::InvalidStepper("reference-step runs built-in steppers only".into()));
    }
    let state = ctx.load_state(&a.input)?;
    let next = stepper::step(&spec, &state, a.dt_hours, a.step_index)?;
    write_state(&next, &a.out)
}
