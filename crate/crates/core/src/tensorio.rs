//! Atmospheric state snapshots and their on-disk exchange format.
//!
//! A state file (`.wxs`) holds exactly one snapshot. All integers are
//! little-endian:
//!
//! ```text
//! magic       8 bytes  "WXSTATE1"
//! version     u32      1
//! C, H, W     u32 × 3  channels, latitude rows, longitude columns
//! valid_time  i64      Unix seconds, UTC
//! channels    C × (u16 byte length, UTF-8 name)
//! payload     C·H·W × f32, order [c][lat][lon]
//! ```
//!
//! Row 0 is the northernmost latitude and column 0 is 0°E; the grid geometry
//! is therefore implied by (H, W) through [`GridGeometry::global`].
//!
//! Normalization statistics travel as a CSV file with header
//! `channel,mean,std` and one row per channel.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::schema::{ChannelSchema, GridGeometry};

pub const MAGIC: &[u8; 8] = b"WXSTATE1";
pub const VERSION: u32 = 1;
/// Upper bound on each of C, H and W accepted from a file header.
pub const MAX_DIM: u32 = 16384;
/// Size of the fixed part of the header, before the channel table.
pub const FIXED_HEADER_LEN: usize = 8 + 4 + 3 * 4 + 8;

const SECONDS_PER_HOUR: i64 = 3600;

/// One global atmospheric snapshot: C×H×W `f32` values plus the valid time.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    schema: ChannelSchema,
    geom: GridGeometry,
    valid_time: i64,
    data: Vec<f32>,
    normalized: bool,
}

impl StateTensor {
    /// Validates and wraps a payload laid out as `[channel][lat][lon]`.
    pub fn new(schema: ChannelSchema, geom: GridGeometry, valid_time: i64, data: Vec<f32>) -> Result<Self> {
        let expected = schema.len() * geom.cells();
        if data.len() != expected {
            return Err(Error::InvalidData(format!(
                "payload has {} values, expected {}x{}x{} = {expected}",
                data.len(),
                schema.len(),
                geom.n_lat(),
                geom.n_lon()
            )));
        }
        check_valid_time(valid_time)?;
        check_finite(&data)?;
        Ok(Self { schema, geom, valid_time, data, normalized: false })
    }

    /// A state with every cell of channel `c` set to `fill[c]`.
    pub fn filled(schema: ChannelSchema, geom: GridGeometry, valid_time: i64, fill: &[f32]) -> Result<Self> {
        if fill.len() != schema.len() {
            return Err(Error::InvalidData(format!("{} fill values for {} channels", fill.len(), schema.len())));
        }
        let cells = geom.cells();
        let data = fill.iter().flat_map(|&v| std::iter::repeat_n(v, cells)).collect();
        Self::new(schema, geom, valid_time, data)
    }

    pub fn schema(&self) -> &ChannelSchema {
        &self.schema
    }

    pub fn geom(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn valid_time(&self) -> i64 {
        self.valid_time
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable payload access. Finiteness is re-checked when the state is written.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn n_channels(&self) -> usize {
        self.schema.len()
    }

    /// The 2-D field of channel `c` in row-major `[lat][lon]` order.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.geom.cells();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.geom.cells();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn field(&self, name: &str) -> Result<&[f32]> {
        Ok(self.channel(self.schema.channel_index(name)?))
    }

    pub fn with_valid_time(mut self, valid_time: i64) -> Result<Self> {
        check_valid_time(valid_time)?;
        self.valid_time = valid_time;
        Ok(self)
    }

    pub(crate) fn with_normalized(mut self, normalized: bool) -> Self {
        self.normalized = normalized;
        self
    }

    /// Replaces the payload and geometry together (used for crops).
    pub(crate) fn with_geom_data(mut self, geom: GridGeometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != self.schema.len() * geom.cells() {
            return Err(Error::InvalidData("cropped payload length mismatch".into()));
        }
        self.geom = geom;
        self.data = data;
        Ok(self)
    }

    /// Checks every payload value is finite.
    pub fn validate(&self) -> Result<()> {
        check_valid_time(self.valid_time)?;
        check_finite(&self.data)
    }

    /// Payload as it is stored on disk: little-endian `f32`.
    pub fn payload_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Hex SHA-256 of [`StateTensor::payload_bytes`].
    pub fn payload_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Total file size in bytes that [`write_state`] produces for this state.
    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER_LEN + self.schema.names().map(|n| 2 + n.len()).sum::<usize>() + self.data.len() * 4
    }
}

fn check_valid_time(valid_time: i64) -> Result<()> {
    if valid_time.rem_euclid(SECONDS_PER_HOUR) != 0 {
        return Err(Error::InvalidData(format!("valid time {valid_time} is not a whole hour")));
    }
    Ok(())
}

fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidData(format!("non-finite value {} at flat index {i}", data[i]))),
        None => Ok(()),
    }
}

fn encode_header(state: &StateTensor) -> Result<Vec<u8>> {
    let dims = [state.n_channels(), state.geom.n_lat(), state.geom.n_lon()];
    let mut out = Vec::with_capacity(state.encoded_len() - state.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims {
        match u32::try_from(d) {
            Ok(d) if d <= MAX_DIM => out.extend_from_slice(&d.to_le_bytes()),
            _ => return Err(Error::Format(format!("dimension {d} exceeds {MAX_DIM}"))),
        }
    }
    out.extend_from_slice(&state.valid_time.to_le_bytes());
    for name in state.schema.names() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("channel name of {} bytes is too long", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    Ok(out)
}

/// Writes `state` to `destination`. The file is written under a temporary
/// name, synced, then renamed into place, so a partially written file is
/// never visible under the final name.
pub fn write_state(state: &StateTensor, destination: impl AsRef<Path>) -> Result<()> {
    let destination = destination.as_ref();
    state.validate()?;
    if !state.geom.is_implied_global() {
        return Err(Error::Format("state files carry only global grids (row 0 at +90°, column 0 at 0°E)".into()));
    }
    let header = encode_header(state)?;

    let file_name = destination
        .file_name()
        .ok_or_else(|| Error::Format(format!("{} is not a file path", destination.display())))?;
    let tmp = destination.with_file_name(format!(".{}.partial", file_name.to_string_lossy()));
    {
        let file = File::create(&tmp).at(&tmp)?;
        let mut w = BufWriter::with_capacity(1 << 20, file);
        w.write_all(&header).at(&tmp)?;
        for chunk in state.data.chunks(1 << 16) {
            let bytes: Vec<u8> = chunk.iter().flat_map(|v| v.to_le_bytes()).collect();
            w.write_all(&bytes).at(&tmp)?;
        }
        let file = w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
        file.sync_all().at(&tmp)?;
    }
    std::fs::rename(&tmp, destination).at(destination)?;
    Ok(())
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::CorruptFile(format!("file ends inside {what}")))?;
    let out = &buf[*pos..end];
    *pos = end;
    Ok(out)
}

fn u32_at(buf: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, pos, 4, what)?.try_into().unwrap()))
}

/// Reads and validates a state file. The channel-name table becomes the
/// schema and the geometry is the implied global grid.
pub fn read_state(source: impl AsRef<Path>) -> Result<StateTensor> {
    let source = source.as_ref();
    let mut file = File::open(source).at(source)?;
    let file_len = file.metadata().at(source)?.len();

    let mut fixed = [0u8; FIXED_HEADER_LEN];
    let got = read_up_to(&mut file, &mut fixed).at(source)?;
    if got < MAGIC.len() || &fixed[..8] != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", source.display())));
    }
    if got < FIXED_HEADER_LEN {
        return Err(Error::CorruptFile(format!("{}: truncated header", source.display())));
    }
    let mut pos = 8;
    let version = u32_at(&fixed, &mut pos, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("{}: unsupported version {version}", source.display())));
    }
    let c = u32_at(&fixed, &mut pos, "C")?;
    let h = u32_at(&fixed, &mut pos, "H")?;
    let w = u32_at(&fixed, &mut pos, "W")?;
    for (label, d) in [("C", c), ("H", h), ("W", w)] {
        if d == 0 || d > MAX_DIM {
            return Err(Error::CorruptFile(format!("{}: {label} = {d} outside 1..={MAX_DIM}", source.display())));
        }
    }
    let valid_time = i64::from_le_bytes(take(&fixed, &mut pos, 8, "valid_time")?.try_into().unwrap());

    // The channel table is at most C·(2 + 65535) bytes; read it incrementally
    // so a hostile C cannot force a large allocation.
    let mut names = Vec::with_capacity(c as usize);
    let mut table_len = 0u64;
    for k in 0..c {
        let mut len = [0u8; 2];
        file.read_exact(&mut len)
            .map_err(|_| Error::CorruptFile(format!("{}: truncated channel table at entry {k}", source.display())))?;
        let len = u16::from_le_bytes(len) as usize;
        let mut name = vec![0u8; len];
        file.read_exact(&mut name)
            .map_err(|_| Error::CorruptFile(format!("{}: truncated channel name {k}", source.display())))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::CorruptFile(format!("{}: channel name {k} is not UTF-8", source.display())))?;
        names.push(name);
        table_len += 2 + len as u64;
    }

    let n_values = c as u64 * h as u64 * w as u64;
    let remaining = file_len - FIXED_HEADER_LEN as u64 - table_len;
    if remaining != n_values * 4 {
        return Err(Error::CorruptFile(format!(
            "{}: header declares {c}x{h}x{w} payload ({} bytes) but {remaining} bytes follow",
            source.display(),
            n_values * 4
        )));
    }
    let mut payload = vec![0u8; (n_values * 4) as usize];
    file.read_exact(&mut payload)
        .map_err(|_| Error::CorruptFile(format!("{}: truncated payload", source.display())))?;
    let data: Vec<f32> = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    drop(payload);

    let schema = ChannelSchema::from_names(&names)?;
    let geom = GridGeometry::global(h as usize, w as usize)?;
    StateTensor::new(schema, geom, valid_time, data).map_err(|e| match e {
        Error::InvalidData(msg) => Error::InvalidData(format!("{}: {msg}", source.display())),
        other => other,
    })
}

fn read_up_to(file: &mut File, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match file.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-channel mean and standard deviation keyed by channel name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormStats {
    entries: BTreeMap<String, ChannelStats>,
}

impl NormStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one channel. Rejects duplicates and non-positive or non-finite std.
    pub fn insert(&mut self, name: impl Into<String>, mean: f64, std: f64) -> Result<()> {
        let name = name.into();
        if !mean.is_finite() {
            return Err(Error::InvalidStats(format!("{name}: mean {mean} is not finite")));
        }
        if !(std.is_finite() && std > 0.0) {
            return Err(Error::InvalidStats(format!("{name}: std {std} must be positive")));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateStats(name));
        }
        self.entries.insert(name, ChannelStats { mean, std });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<ChannelStats> {
        self.entries.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ChannelStats)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Checks the key set equals the schema's names exactly.
    pub fn check_schema(&self, schema: &ChannelSchema) -> Result<()> {
        let missing: Vec<&str> = schema.names().filter(|n| !self.entries.contains_key(*n)).collect();
        if !missing.is_empty() {
            return Err(Error::StatsIncomplete(format!("missing channels: {}", missing.join(", "))));
        }
        if self.entries.len() != schema.len() {
            let extra: Vec<&str> =
                self.entries.keys().map(String::as_str).filter(|k| schema.channel_index(k).is_err()).collect();
            return Err(Error::StatsIncomplete(format!("channels not in schema: {}", extra.join(", "))));
        }
        Ok(())
    }

    /// Stats in schema order; fails unless bound exactly to `schema`.
    pub fn ordered_for(&self, schema: &ChannelSchema) -> Result<Vec<ChannelStats>> {
        self.check_schema(schema)?;
        Ok(schema.names().map(|n| self.entries[n]).collect())
    }
}

/// Reads a `channel,mean,std` CSV and binds it to `schema`.
pub fn read_stats(source: impl AsRef<Path>, schema: &ChannelSchema) -> Result<NormStats> {
    let source = source.as_ref();
    let file = File::open(source).at(source)?;
    parse_stats(file, schema).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", source.display())),
        other => other,
    })
}

pub(crate) fn parse_stats(input: impl Read, schema: &ChannelSchema) -> Result<NormStats> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if headers.iter().map(str::trim).ne(["channel", "mean", "std"]) {
        return Err(Error::Format("stats header must be `channel,mean,std`".into()));
    }
    let mut stats = NormStats::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(e.to_string()))?;
        if record.len() != 3 {
            return Err(Error::Format(format!("row {} has {} fields", line + 2, record.len())));
        }
        let name = record[0].trim();
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::Format(format!("row {}: bad {what} '{s}'", line + 2)))
        };
        let mean = num(&record[1], "mean")?;
        let std = num(&record[2], "std")?;
        if schema.channel_index(name).is_err() {
            return Err(Error::StatsIncomplete(format!("channel '{name}' is not in the schema")));
        }
        stats.insert(name, mean, std)?;
    }
    stats.check_schema(schema)?;
    Ok(stats)
}

/// Writes stats in schema order with the standard header.
pub fn write_stats(stats: &NormStats, schema: &ChannelSchema, destination: impl AsRef<Path>) -> Result<()> {
    let destination = destination.as_ref();
    let ordered = stats.ordered_for(schema)?;
    let mut text = String::from("channel,mean,std\n");
    for (name, s) in schema.names().zip(ordered) {
        text.push_str(&format!("{name},{},{}\n", s.mean, s.std));
    }
    std::fs::write(destination, text).at(destination)
}
