//! Grid geometry and channel schemas.
//!
//! The canonical grid is the 0.25° ERA5 lat-lon grid cropped to 720 rows:
//! latitudes +90.0 down to -89.75 (the -90.0 row is dropped) and longitudes
//! 0.0 east to 359.75.
//!
//! The 73-channel schema orders the eight single-level fields first, then the
//! five pressure-level variables variable-major (z50 … z1000, t50 … t1000, …,
//! r50 … r1000). The 100 m winds are named `u100m`/`v100m` so that they do not
//! collide with the u/v components at 100 hPa (`u100`/`v100`).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Pressure levels (hPa) carried by the 73-channel schema, top of atmosphere first.
pub const PRESSURE_LEVELS: [u16; 13] = [50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000];

/// Letter prefixes of the pressure-level variables, in schema order.
pub const LEVEL_PREFIXES: [char; 5] = ['z', 't', 'u', 'v', 'r'];

/// Single-level fields of the 73-channel schema, in order.
pub const SINGLE_LEVEL: [&str; 8] = ["u10", "u100m", "v10", "v100m", "t2", "sp", "msl", "tcwv"];

/// Canonical ERA5 row count after dropping the south-pole row.
pub const ERA5_N_LAT: usize = 720;
pub const ERA5_N_LON: usize = 1440;

const FCN20_TABLE: &str = include_str!("../data/fcn20_channels.txt");

// Tolerance used when comparing grid coordinates that are multiples of the step.
const COORD_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    n_lat: usize,
    n_lon: usize,
    lat_start: f64,
    lat_step: f64,
    lon_start: f64,
    lon_step: f64,
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self::canonical()
    }
}

impl GridGeometry {
    pub fn new(
        n_lat: usize,
        n_lon: usize,
        lat_start: f64,
        lat_step: f64,
        lon_start: f64,
        lon_step: f64,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidGeometry(msg));
        if n_lat < 2 || n_lon < 2 {
            return bad(format!("grid must be at least 2x2, got {n_lat}x{n_lon}"));
        }
        if !(lat_step.is_finite() && lat_step != 0.0) {
            return bad(format!("latitude step must be nonzero, got {lat_step}"));
        }
        if !(lon_step.is_finite() && lon_step > 0.0) {
            return bad(format!("longitude step must be positive, got {lon_step}"));
        }
        let lat_end = lat_start + (n_lat - 1) as f64 * lat_step;
        for lat in [lat_start, lat_end] {
            if !(-90.0 - COORD_EPS..=90.0 + COORD_EPS).contains(&lat) {
                return bad(format!("latitude {lat} outside [-90, 90]"));
            }
        }
        if !(0.0..360.0).contains(&lon_start) {
            return bad(format!("longitude start {lon_start} outside [0, 360)"));
        }
        if n_lon as f64 * lon_step > 360.0 + COORD_EPS {
            return bad(format!("{n_lon} columns of {lon_step}° exceed 360°"));
        }
        Ok(Self { n_lat, n_lon, lat_start, lat_step, lon_start, lon_step })
    }

    /// The 720×1440 quarter-degree grid.
    pub fn canonical() -> Self {
        Self::global(ERA5_N_LAT, ERA5_N_LON).expect("canonical grid is valid")
    }

    /// A regular global grid with the same conventions as the canonical one:
    /// first row at +90°, `n_lat` rows spanning 180°, first column at 0°E.
    pub fn global(n_lat: usize, n_lon: usize) -> Result<Self> {
        Self::new(n_lat, n_lon, 90.0, -180.0 / n_lat as f64, 0.0, 360.0 / n_lon.max(1) as f64)
    }

    pub fn n_lat(&self) -> usize {
        self.n_lat
    }

    pub fn n_lon(&self) -> usize {
        self.n_lon
    }

    pub fn lat_start(&self) -> f64 {
        self.lat_start
    }

    pub fn lat_step(&self) -> f64 {
        self.lat_step
    }

    pub fn lon_start(&self) -> f64 {
        self.lon_start
    }

    pub fn lon_step(&self) -> f64 {
        self.lon_step
    }

    /// Number of cells in one 2-D field.
    pub fn cells(&self) -> usize {
        self.n_lat * self.n_lon
    }

    /// True when the columns wrap all the way around the globe.
    pub fn wraps_lon(&self) -> bool {
        (self.n_lon as f64 * self.lon_step - 360.0).abs() < COORD_EPS
    }

    /// True when this geometry is exactly what [`GridGeometry::global`] yields for its dims.
    pub fn is_implied_global(&self) -> bool {
        GridGeometry::global(self.n_lat, self.n_lon).is_ok_and(|g| g == *self)
    }

    pub fn is_canonical(&self) -> bool {
        *self == Self::canonical()
    }

    /// Latitude of row `i` (no bounds check).
    pub fn lat(&self, i_lat: usize) -> f64 {
        self.lat_start + i_lat as f64 * self.lat_step
    }

    /// Longitude of column `j` wrapped into [0, 360) (no bounds check).
    pub fn lon(&self, i_lon: usize) -> f64 {
        wrap_lon(self.lon_start + i_lon as f64 * self.lon_step)
    }

    pub fn latlon_of(&self, i_lat: usize, i_lon: usize) -> Result<(f64, f64)> {
        if i_lat >= self.n_lat || i_lon >= self.n_lon {
            return Err(Error::IndexOutOfRange { i_lat, i_lon, n_lat: self.n_lat, n_lon: self.n_lon });
        }
        Ok((self.lat(i_lat), self.lon(i_lon)))
    }

    /// Nearest grid cell to a coordinate, or `None` when it falls more than
    /// half a cell outside a non-wrapping grid.
    pub fn nearest_cell(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        let fi = ((lat - self.lat_start) / self.lat_step).round();
        if fi < 0.0 || fi > (self.n_lat - 1) as f64 {
            return None;
        }
        let offset = (lon - self.lon_start).rem_euclid(360.0);
        let mut fj = (offset / self.lon_step).round();
        if self.wraps_lon() {
            fj = fj.rem_euclid(self.n_lon as f64);
        } else if fj > (self.n_lon - 1) as f64 {
            return None;
        }
        Some((fi as usize, fj as usize))
    }

    /// Latitude of the center of row `i`'s cell: half a step from the row
    /// coordinate toward the next row.
    pub fn cell_center_lat(&self, i_lat: usize) -> f64 {
        (self.lat(i_lat) + 0.5 * self.lat_step).clamp(-90.0, 90.0)
    }
}

/// Wraps a longitude into [0, 360).
pub fn wrap_lon(lon: f64) -> f64 {
    let w = lon.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// A lat-lon box. A row belongs to the box when `lat_min < lat <= lat_max`;
/// a column when its longitude lies in `[lon_min, lon_max)` measured
/// eastward, so `lon_min > lon_max` (e.g. 350 → 10) wraps across 0°E.
/// `(-90, 90, 0, 360)` covers the whole globe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Region {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let r = Self { lat_min, lat_max, lon_min, lon_max };
        if ![lat_min, lat_max, lon_min, lon_max].iter().all(|v| v.is_finite()) {
            return Err(Error::EmptyRegion(format!("{r} has non-finite bounds")));
        }
        if lat_min >= lat_max || lat_max < -90.0 || lat_min > 90.0 {
            return Err(Error::EmptyRegion(format!("{r} has an empty latitude range")));
        }
        if lon_min == lon_max || (lon_max - lon_min).abs() > 360.0 {
            return Err(Error::EmptyRegion(format!("{r} has an invalid longitude range")));
        }
        Ok(r)
    }

    pub fn global() -> Self {
        Self { lat_min: -90.0, lat_max: 90.0, lon_min: 0.0, lon_max: 360.0 }
    }

    /// Eastward extent in degrees, in (0, 360].
    pub fn lon_span(&self) -> f64 {
        let span = (self.lon_max - self.lon_min).rem_euclid(360.0);
        if span == 0.0 {
            360.0
        } else {
            span
        }
    }

    pub fn contains_lat(&self, lat: f64) -> bool {
        self.lat_min < lat && lat <= self.lat_max
    }

    pub fn contains_lon(&self, lon: f64) -> bool {
        (lon - self.lon_min).rem_euclid(360.0) < self.lon_span()
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        self.contains_lat(lat) && self.contains_lon(lon)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.lat_min, self.lat_max, self.lon_min, self.lon_max)
    }
}

/// `lat_min,lat_max,lon_min,lon_max` in degrees.
impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::EmptyRegion(format!("cannot parse region '{s}'")))?;
        match parts[..] {
            [a, b, c, d] => Region::new(a, b, c, d),
            _ => Err(Error::EmptyRegion(format!("region '{s}' needs four comma-separated values"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelDescriptor {
    pub name: String,
    pub long_name: String,
    pub pressure_level: Option<u16>,
    pub units: String,
}

impl ChannelDescriptor {
    /// Builds the descriptor for a channel name, recognising the single-level
    /// fields and `<prefix><level>` pressure-level names. Unknown names get an
    /// empty unit string and their own name as long name.
    pub fn describe(name: &str) -> Self {
        let single = |long: &str, units: &str| ChannelDescriptor {
            name: name.to_string(),
            long_name: long.to_string(),
            pressure_level: None,
            units: units.to_string(),
        };
        match name {
            "u10" => single("10 metre u wind component", "m s-1"),
            "v10" => single("10 metre v wind component", "m s-1"),
            "u100m" => single("100 metre u wind component", "m s-1"),
            "v100m" => single("100 metre v wind component", "m s-1"),
            "t2" => single("2 metre temperature", "K"),
            "sp" => single("Surface pressure", "Pa"),
            "msl" => single("Mean sea level pressure", "Pa"),
            "tcwv" => single("Total column vertically-integrated water vapour", "kg m-2"),
            _ => match parse_level_name(name) {
                Some((prefix, level)) => {
                    let (long, units) = match prefix {
                        'z' => ("Geopotential", "m2 s-2"),
                        't' => ("Temperature", "K"),
                        'u' => ("U component of wind", "m s-1"),
                        'v' => ("V component of wind", "m s-1"),
                        _ => ("Relative humidity", "%"),
                    };
                    ChannelDescriptor {
                        name: name.to_string(),
                        long_name: format!("{long} at {level} hPa"),
                        pressure_level: Some(level),
                        units: units.to_string(),
                    }
                }
                None => single(name, ""),
            },
        }
    }
}

/// Name of a pressure-level channel, e.g. `level_name('z', 500) == "z500"`.
pub fn level_name(prefix: char, level: u16) -> String {
    format!("{prefix}{level}")
}

/// Inverse of [`level_name`]; only recognises the five level prefixes and the
/// thirteen schema levels.
pub fn parse_level_name(name: &str) -> Option<(char, u16)> {
    let mut chars = name.chars();
    let prefix = chars.next()?;
    if !LEVEL_PREFIXES.contains(&prefix) {
        return None;
    }
    let digits = chars.as_str();
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
        return None;
    }
    let level: u16 = digits.parse().ok()?;
    PRESSURE_LEVELS.contains(&level).then_some((prefix, level))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemaId {
    Fcnv2_73,
    Fcn20,
    Custom,
}

impl SchemaId {
    pub fn as_str(&self) -> &'static str {
        match self {
            SchemaId::Fcnv2_73 => "fcnv2-73",
            SchemaId::Fcn20 => "fcn-20",
            SchemaId::Custom => "custom",
        }
    }
}

impl fmt::Display for SchemaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemaId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcnv2-73" => Ok(SchemaId::Fcnv2_73),
            "fcn-20" => Ok(SchemaId::Fcn20),
            "custom" => Ok(SchemaId::Custom),
            other => Err(Error::UnknownSchema(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSchema {
    schema_id: SchemaId,
    channels: Vec<ChannelDescriptor>,
}

impl ChannelSchema {
    /// Builds a schema from an ordered name list. The id is `fcnv2-73` or
    /// `fcn-20` when the names match a canonical schema exactly (same order),
    /// `custom` otherwise.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidSchema("schema has no channels".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in names {
            let n = n.as_ref();
            if n.is_empty() {
                return Err(Error::InvalidSchema("empty channel name".into()));
            }
            if !seen.insert(n) {
                return Err(Error::InvalidSchema(format!("duplicate channel name '{n}'")));
            }
        }
        let channels: Vec<_> = names.iter().map(|n| ChannelDescriptor::describe(n.as_ref())).collect();
        let schema_id = [SchemaId::Fcnv2_73, SchemaId::Fcn20]
            .into_iter()
            .find(|id| canonical_names(*id).iter().map(String::as_str).eq(names.iter().map(AsRef::as_ref)))
            .unwrap_or(SchemaId::Custom);
        Ok(Self { schema_id, channels })
    }

    pub fn schema_id(&self) -> SchemaId {
        self.schema_id
    }

    pub fn channels(&self) -> &[ChannelDescriptor] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.channels.iter().map(|c| c.name.as_str())
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channels.iter().position(|c| c.name == name).ok_or_else(|| Error::ChannelNotFound(name.to_string()))
    }

    /// True when both schemas list the same names in the same order.
    pub fn same_names(&self, other: &ChannelSchema) -> bool {
        self.names().eq(other.names())
    }
}

fn canonical_names(id: SchemaId) -> Vec<String> {
    match id {
        SchemaId::Fcnv2_73 => {
            let mut names: Vec<String> = SINGLE_LEVEL.iter().map(|s| s.to_string()).collect();
            for prefix in LEVEL_PREFIXES {
                names.extend(PRESSURE_LEVELS.iter().map(|&l| level_name(prefix, l)));
            }
            names
        }
        SchemaId::Fcn20 => FCN20_TABLE
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect(),
        SchemaId::Custom => Vec::new(),
    }
}

/// Returns the canonical schema for `"fcnv2-73"` or `"fcn-20"`.
pub fn build_schema(schema_id: &str) -> Result<ChannelSchema> {
    let id: SchemaId = schema_id.parse()?;
    if id == SchemaId::Custom {
        return Err(Error::UnknownSchema(schema_id.to_string()));
    }
    ChannelSchema::from_names(&canonical_names(id))
}

/// One text line per channel: index, name, units, level.
pub fn format_schema_table(schema: &ChannelSchema) -> String {
    let mut out = String::new();
    for (i, c) in schema.channels().iter().enumerate() {
        let level = c.pressure_level.map_or_else(|| "-".to_string(), |l| l.to_string());
        let units = if c.units.is_empty() { "-" } else { c.units.as_str() };
        out.push_str(&format!("{i:>3} {:<8} {:<8} {level}\n", c.name, units));
    }
    out
}
