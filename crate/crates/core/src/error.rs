use std::path::PathBuf;

/// Errors raised anywhere in the harness.
///
/// Variants are grouped by the subsystem that produces them; the CLI prints
/// the `Display` form as a one-line diagnostic.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    // schema
    #[error("unknown schema '{0}' (expected fcnv2-73 or fcn-20)")]
    UnknownSchema(String),
    #[error("channel '{0}' not found in schema")]
    ChannelNotFound(String),
    #[error("index ({i_lat}, {i_lon}) out of range for {n_lat}x{n_lon} grid")]
    IndexOutOfRange { i_lat: usize, i_lon: usize, n_lat: usize, n_lon: usize },
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    // tensorio
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("normalization statistics incomplete: {0}")]
    StatsIncomplete(String),
    #[error("invalid normalization statistics: {0}")]
    InvalidStats(String),
    #[error("duplicate statistics row for channel '{0}'")]
    DuplicateStats(String),

    // normalize
    #[error("state flag error: {0}")]
    StateFlag(String),

    // stepper
    #[error("invalid stepper configuration: {0}")]
    InvalidStepper(String),
    #[error("external stepper exited with code {code:?}: {stderr}")]
    StepperFailed { code: Option<i32>, stderr: String },
    #[error("external stepper produced no output file at {0}")]
    StepperNoOutput(PathBuf),
    #[error("stepper contract violation: {0}")]
    StepperContractViolation(String),
    #[error("external stepper exceeded timeout of {0} s")]
    StepperTimeout(u64),

    // rollout
    #[error("invalid rollout configuration: {0}")]
    InvalidRollout(String),
    #[error("trajectory gap: {0}")]
    TrajectoryGap(String),
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    // cyclone
    #[error("invalid tracker configuration: {0}")]
    InvalidTracker(String),
    #[error("search region contains no grid cells")]
    EmptySearchRegion,
    #[error("track lost at step {0}: no grid cells within the continuity gate")]
    TrackLost(usize),
    #[error("track time mismatch: {0}")]
    TrackTimeMismatch(String),
    #[error("degenerate vortex: {0}")]
    DegenerateVortex(String),
    #[error("implausible eye pressure {0} Pa (expected within 80000..110000)")]
    ImplausiblePressure(f64),
    #[error("malformed track file: {0}")]
    TrackFormat(String),

    // verify
    #[error("valid time mismatch: {0}")]
    TimeMismatch(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("latitude weights sum to zero")]
    DegenerateWeights,
    #[error("trajectory mismatch: {0}")]
    TrajectoryMismatch(String),

    // render
    #[error("region does not intersect the grid: {0}")]
    EmptyRegion(String),
    #[error("invalid render specification: {0}")]
    InvalidRender(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Attaches a path to `std::io::Result`s.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
