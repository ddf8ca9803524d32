//! Map rendering of a single channel to a binary PPM (P6) raster, in
//! equirectangular or Robinson projection, plus regional crops.
//!
//! Grid values are sampled nearest-neighbour; no interpolation is applied.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, IoContext, Result};
use crate::schema::{wrap_lon, ChannelDescriptor, GridGeometry, Region};
use crate::tensorio::StateTensor;

/// Robinson X (parallel length) and Y (distance from equator) at 0°, 5°, …, 90°.
pub const ROBINSON_X: [f64; 19] = [
    1.0000, 0.9986, 0.9954, 0.9900, 0.9822, 0.9730, 0.9600, 0.9427, 0.9216, 0.8962, 0.8679, 0.8350, 0.7986, 0.7597,
    0.7186, 0.6732, 0.6213, 0.5722, 0.5322,
];
pub const ROBINSON_Y: [f64; 19] = [
    0.0000, 0.0620, 0.1240, 0.1860, 0.2480, 0.3100, 0.3720, 0.4340, 0.4958, 0.5571, 0.6176, 0.6769, 0.7346, 0.7903,
    0.8435, 0.8936, 0.9394, 0.9761, 1.0000,
];
pub const ROBINSON_XSCALE: f64 = 0.8487;
pub const ROBINSON_YSCALE: f64 = 1.3523;

fn table_interp(table: &[f64; 19], abs_lat: f64) -> f64 {
    let t = (abs_lat.clamp(0.0, 90.0)) / 5.0;
    let k = (t.floor() as usize).min(17);
    let f = t - k as f64;
    table[k] + f * (table[k + 1] - table[k])
}

/// Longitude offset from `central` wrapped into [-180, 180), in degrees.
fn lon_offset(lon: f64, central: f64) -> f64 {
    (lon - central + 180.0).rem_euclid(360.0) - 180.0
}

/// Robinson map coordinates of a point, with the central meridian at x = 0.
pub fn robinson_project(lat: f64, lon: f64, central_meridian: f64) -> (f64, f64) {
    let a = lat.abs();
    let x = ROBINSON_XSCALE * table_interp(&ROBINSON_X, a) * lon_offset(lon, central_meridian).to_radians();
    let y = ROBINSON_YSCALE * lat.signum() * table_interp(&ROBINSON_Y, a);
    (x, if lat == 0.0 { 0.0 } else { y })
}

/// Inverse of [`robinson_project`], or `None` outside the map outline.
pub fn robinson_unproject(x: f64, y: f64, central_meridian: f64) -> Option<(f64, f64)> {
    let yn = y.abs() / ROBINSON_YSCALE;
    if yn > 1.0 {
        return None;
    }
    let k = ROBINSON_Y.partition_point(|&v| v <= yn).clamp(1, 18) - 1;
    let f = (yn - ROBINSON_Y[k]) / (ROBINSON_Y[k + 1] - ROBINSON_Y[k]);
    let abs_lat = 5.0 * (k as f64 + f);
    let dlon = (x / (ROBINSON_XSCALE * table_interp(&ROBINSON_X, abs_lat))).to_degrees();
    if dlon.abs() > 180.0 {
        return None;
    }
    Some((abs_lat.copysign(y), central_meridian + dlon))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Equirect,
    Robinson,
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equirect" => Ok(Projection::Equirect),
            "robinson" => Ok(Projection::Robinson),
            _ => Err(Error::InvalidRender(format!("unknown projection '{s}' (equirect or robinson)"))),
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Projection::Equirect => "equirect",
            Projection::Robinson => "robinson",
        })
    }
}

/// Piecewise-linear colour maps.
///
/// * diverging: `#2166ac` → `#f7f7f7` → `#b2182b`
/// * sequential: `#440154` → `#3b528b` → `#21918c` → `#5ec962` → `#fde725`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Colormap {
    Diverging,
    Sequential,
}

const DIVERGING: [[u8; 3]; 3] = [[33, 102, 172], [247, 247, 247], [178, 24, 43]];
const SEQUENTIAL: [[u8; 3]; 5] = [[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]];

impl Colormap {
    fn stops(&self) -> &'static [[u8; 3]] {
        match self {
            Colormap::Diverging => &DIVERGING,
            Colormap::Sequential => &SEQUENTIAL,
        }
    }

    /// Colour at position `t` in [0, 1] (clamped).
    pub fn color(&self, t: f64) -> [u8; 3] {
        let stops = self.stops();
        let t = if t.is_nan() { 0.5 } else { t.clamp(0.0, 1.0) };
        let pos = t * (stops.len() - 1) as f64;
        let k = (pos.floor() as usize).min(stops.len() - 2);
        let f = pos - k as f64;
        let mut rgb = [0u8; 3];
        for (c, out) in rgb.iter_mut().enumerate() {
            let (a, b) = (stops[k][c] as f64, stops[k + 1][c] as f64);
            *out = (a + f * (b - a)).round() as u8;
        }
        rgb
    }

    /// Winds are diverging, everything else sequential.
    pub fn for_channel(name: &str) -> Self {
        if ChannelDescriptor::describe(name).units == "m s-1" {
            Colormap::Diverging
        } else {
            Colormap::Sequential
        }
    }
}

impl FromStr for Colormap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diverging" => Ok(Colormap::Diverging),
            "sequential" => Ok(Colormap::Sequential),
            _ => Err(Error::InvalidRender(format!("unknown colormap '{s}' (diverging or sequential)"))),
        }
    }
}

pub const BACKGROUND: [u8; 3] = [255, 255, 255];
pub const GRATICULE: [u8; 3] = [64, 64, 64];
pub const MIN_WIDTH_PX: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSpec {
    pub channel: String,
    pub projection: Projection,
    pub central_meridian: f64,
    pub colormap: Colormap,
    pub value_range: Option<(f64, f64)>,
    pub width_px: usize,
    /// Graticule spacing in degrees; 0 draws none.
    pub graticule_deg: f64,
}

impl RenderSpec {
    pub fn new(channel: &str, projection: Projection) -> Self {
        Self {
            channel: channel.to_string(),
            projection,
            central_meridian: 180.0,
            colormap: Colormap::for_channel(channel),
            value_range: None,
            width_px: 1440,
            graticule_deg: 30.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidRender(m));
        if self.width_px < MIN_WIDTH_PX {
            return bad(format!("width must be at least {MIN_WIDTH_PX} px, got {}", self.width_px));
        }
        if let Some((lo, hi)) = self.value_range {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("value range needs min < max, got ({lo}, {hi})"));
            }
        }
        if !(self.graticule_deg.is_finite() && self.graticule_deg >= 0.0) {
            return bad(format!("graticule spacing must be >= 0, got {}", self.graticule_deg));
        }
        if !self.central_meridian.is_finite() {
            return bad("central meridian must be finite".into());
        }
        Ok(())
    }

    fn resolve_range(&self, field: &[f32]) -> (f64, f64) {
        if let Some(r) = self.value_range {
            return r;
        }
        match self.colormap {
            Colormap::Diverging => {
                let m = field.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
                if m > 0.0 {
                    (-m, m)
                } else {
                    (-1.0, 1.0)
                }
            }
            Colormap::Sequential => {
                let (lo, hi) = field
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
                if hi > lo {
                    (lo, hi)
                } else {
                    (lo, lo + 1.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl Raster {
    fn new(width: usize, height: usize) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&BACKGROUND);
        }
        Self { width, height, pixels }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let k = 3 * (y * self.width + x);
        [self.pixels[k], self.pixels[k + 1], self.pixels[k + 2]]
    }

    fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let k = 3 * (y * self.width + x);
        self.pixels[k..k + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// A pixel grid in which every pixel knows its (lat, lon) and data cell.
struct Sampling {
    width: usize,
    height: usize,
    /// Per pixel: `(lat, unwrapped lon, flat cell index)`, `None` for background.
    at: Vec<Option<(f64, f64, usize)>>,
}

fn equirect_sampling(geom: &GridGeometry, spec: &RenderSpec) -> Sampling {
    let (n_lat, n_lon) = (geom.n_lat(), geom.n_lon());
    let width = spec.width_px;
    let height = ((width * n_lat) as f64 / n_lon as f64).round().max(1.0) as usize;
    // Only global grids can be recentred.
    let shift = if geom.wraps_lon() {
        ((spec.central_meridian - 180.0 - geom.lon_start()) / geom.lon_step()).round() as i64
    } else {
        0
    };
    let mut at = Vec::with_capacity(width * height);
    for py in 0..height {
        let i = (2 * py + 1) * n_lat / (2 * height);
        let lat = geom.lat_start() + ((py as f64 + 0.5) * n_lat as f64 / height as f64 - 0.5) * geom.lat_step();
        for px in 0..width {
            let jc = ((2 * px + 1) * n_lon / (2 * width)) as i64 + shift;
            let j = jc.rem_euclid(n_lon as i64) as usize;
            let lon = geom.lon_start()
                + ((px as f64 + 0.5) * n_lon as f64 / width as f64 - 0.5 + shift as f64) * geom.lon_step();
            at.push(Some((lat, lon, i * n_lon + j)));
        }
    }
    Sampling { width, height, at }
}

fn robinson_sampling(geom: &GridGeometry, spec: &RenderSpec) -> Sampling {
    let width = spec.width_px;
    let x_max = ROBINSON_XSCALE * std::f64::consts::PI;
    let height = (width as f64 * ROBINSON_YSCALE / x_max).round() as usize;
    let mut at = Vec::with_capacity(width * height);
    for py in 0..height {
        let y = ROBINSON_YSCALE * (1.0 - 2.0 * (py as f64 + 0.5) / height as f64);
        for px in 0..width {
            let x = x_max * (2.0 * (px as f64 + 0.5) / width as f64 - 1.0);
            let cell = robinson_unproject(x, y, spec.central_meridian).and_then(|(lat, lon)| {
                geom.nearest_cell(lat, wrap_lon(lon)).map(|(i, j)| (lat, lon, i * geom.n_lon() + j))
            });
            at.push(cell);
        }
    }
    Sampling { width, height, at }
}

fn band(v: f64, g: f64) -> i64 {
    (v / g).floor() as i64
}

/// Renders one channel into an in-memory raster.
pub fn render_raster(state: &StateTensor, spec: &RenderSpec) -> Result<Raster> {
    spec.validate()?;
    let field = state.field(&spec.channel)?;
    let geom = state.geom();
    let (lo, hi) = spec.resolve_range(field);
    let sampling = match spec.projection {
        Projection::Equirect => equirect_sampling(geom, spec),
        Projection::Robinson => robinson_sampling(geom, spec),
    };
    let Sampling { width, height, at } = sampling;
    let mut raster = Raster::new(width, height);
    for py in 0..height {
        for px in 0..width {
            if let Some((_, _, k)) = at[py * width + px] {
                raster.set(px, py, spec.colormap.color((field[k] as f64 - lo) / (hi - lo)));
            }
        }
    }

    let g = spec.graticule_deg;
    let is_robinson = spec.projection == Projection::Robinson;
    for py in 0..height {
        for px in 0..width {
            let Some((lat, lon, _)) = at[py * width + px] else {
                continue;
            };
            let right = (px + 1 < width).then(|| at[py * width + px + 1]);
            let below = (py + 1 < height).then(|| at[(py + 1) * width + px]);
            let mut line = false;
            for n in [right, below].into_iter().flatten() {
                match n {
                    Some((nlat, nlon, _)) => {
                        if g > 0.0 && (band(lat, g) != band(nlat, g) || band(lon, g) != band(nlon, g)) {
                            line = true;
                        }
                    }
                    None => line |= is_robinson,
                }
            }
            // outline where the map meets background on the left or above
            if is_robinson
                && ((px > 0 && at[py * width + px - 1].is_none())
                    || (py > 0 && at[(py - 1) * width + px].is_none())
                    || px == 0
                    || py == 0
                    || px + 1 == width
                    || py + 1 == height)
            {
                line = true;
            }
            if line {
                raster.set(px, py, GRATICULE);
            }
        }
    }
    Ok(raster)
}

/// Renders one channel and writes it as binary PPM.
pub fn render_field(state: &StateTensor, spec: &RenderSpec, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    let bytes = render_raster(state, spec)?.to_ppm();
    let mut f = File::create(out).at(out)?;
    f.write_all(&bytes).at(out)
}

/// Crops a state to the cells inside `region`. Longitude ranges crossing the
/// grid seam are reassembled into contiguous columns starting at `lon_min`.
pub fn subset_region(state: &StateTensor, region: &Region) -> Result<StateTensor> {
    let geom = state.geom();
    let rows: Vec<usize> = (0..geom.n_lat()).filter(|&i| region.contains_lat(geom.lat(i))).collect();
    let mut cols: Vec<usize> = (0..geom.n_lon()).filter(|&j| region.contains_lon(geom.lon(j))).collect();
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::EmptyRegion(format!("{region} holds no cells of the grid")));
    }
    let offset = |j: usize| (geom.lon(j) - region.lon_min).rem_euclid(360.0);
    cols.sort_by(|&a, &b| offset(a).total_cmp(&offset(b)));
    // A grid that does not wrap may still be entered mid-way: start at the
    // first column after a gap.
    if !geom.wraps_lon() {
        if let Some(k) = cols.windows(2).position(|w| w[1] != w[0] + 1) {
            cols.rotate_left(k + 1);
        }
    }
    if cols.windows(2).any(|w| (w[1] + geom.n_lon() - w[0]) % geom.n_lon() != 1) {
        return Err(Error::EmptyRegion(format!("{region} does not select contiguous columns")));
    }
    let sub = GridGeometry::new(
        rows.len(),
        cols.len(),
        geom.lat(rows[0]),
        geom.lat_step(),
        geom.lon(cols[0]),
        geom.lon_step(),
    )
    .map_err(|e| Error::EmptyRegion(format!("{region}: {e}")))?;
    let mut data = Vec::with_capacity(state.n_channels() * sub.cells());
    for c in 0..state.n_channels() {
        let ch = state.channel(c);
        for &i in &rows {
            let row = &ch[i * geom.n_lon()..(i + 1) * geom.n_lon()];
            data.extend(cols.iter().map(|&j| row[j]));
        }
    }
    state.clone().with_geom_data(sub, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ChannelSchema;
    use proptest::prelude::*;

    fn single(geom: GridGeometry, data: Vec<f32>) -> StateTensor {
        StateTensor::new(ChannelSchema::from_names(&["u10"]).unwrap(), geom, 0, data).unwrap()
    }

    #[test]
    fn table_nodes_reproduced() {
        for k in 0..19 {
            let lat = 5.0 * k as f64;
            let (x, y) = robinson_project(lat, 180.0 + 90.0, 180.0);
            assert!((x - ROBINSON_XSCALE * ROBINSON_X[k] * std::f64::consts::FRAC_PI_2).abs() < 1e-12);
            assert!((y - ROBINSON_YSCALE * ROBINSON_Y[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_symmetries() {
        for lon in [0.0, 45.0, 179.0, 181.0, 359.9] {
            assert_eq!(robinson_project(0.0, lon, 180.0).1, 0.0);
        }
        for lat in [-90.0, -33.3, 0.0, 12.0, 90.0] {
            assert_eq!(robinson_project(lat, 180.0, 180.0).0, 0.0);
            assert_eq!(robinson_project(lat, 20.0, 20.0).0, 0.0);
        }
        let (x, y) = robinson_project(40.0, 200.0, 180.0);
        let (x2, y2) = robinson_project(-40.0, 200.0, 180.0);
        assert_eq!((x, -y), (x2, y2));
        // Pacific-centred: 170°E and 170°W straddle x = 0
        let (a, _) = robinson_project(0.0, 170.0, 180.0);
        let (b, _) = robinson_project(0.0, 190.0, 180.0);
        assert!(a < 0.0 && b > 0.0 && (a + b).abs() < 1e-12);
    }

    #[test]
    fn unproject_inverts_project() {
        for lat in [-89.0, -60.0, -2.5, 0.0, 7.0, 45.0, 88.0] {
            for lon in [1.0, 100.0, 180.0, 250.0, 355.0] {
                let (x, y) = robinson_project(lat, lon, 180.0);
                let (la, lo) = robinson_unproject(x, y, 180.0).unwrap();
                assert!((la - lat).abs() < 1e-9, "{la} vs {lat}");
                assert!((wrap_lon(lo) - lon).abs() < 1e-9);
            }
        }
        assert!(robinson_unproject(0.0, 1.5, 180.0).is_none());
        assert!(robinson_unproject(2.7, 1.3, 180.0).is_none());
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(Colormap::Diverging.color(0.0), [33, 102, 172]);
        assert_eq!(Colormap::Diverging.color(0.5), [247, 247, 247]);
        assert_eq!(Colormap::Diverging.color(2.0), [178, 24, 43]);
        assert_eq!(Colormap::Sequential.color(0.25), [59, 82, 139]);
        assert_eq!(Colormap::for_channel("u10"), Colormap::Diverging);
        assert_eq!(Colormap::for_channel("msl"), Colormap::Sequential);
    }

    #[test]
    fn spec_validation() {
        let mut s = RenderSpec::new("u10", Projection::Robinson);
        s.width_px = 63;
        assert!(matches!(s.validate(), Err(Error::InvalidRender(_))));
        s.width_px = 64;
        s.value_range = Some((1.0, 1.0));
        assert!(s.validate().is_err());
        let g = GridGeometry::global(8, 16).unwrap();
        let mut s = RenderSpec::new("t2", Projection::Equirect);
        s.width_px = 64;
        assert!(matches!(render_raster(&single(g, vec![0.0; 128]), &s), Err(Error::ChannelNotFound(_))));
    }

    #[test]
    fn checkerboard_upscale_is_exact() {
        let g = GridGeometry::global(36, 72).unwrap();
        let data: Vec<f32> = (0..g.cells()).map(|k| if (k / 72 + k % 72) % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let mut spec = RenderSpec::new("u10", Projection::Equirect);
        spec.width_px = 144;
        spec.graticule_deg = 0.0;
        let r = render_raster(&single(g, data.clone()), &spec).unwrap();
        assert_eq!((r.width, r.height), (144, 72));
        let lo = Colormap::Diverging.color(0.0);
        let hi = Colormap::Diverging.color(1.0);
        for py in 0..72 {
            for px in 0..144 {
                let v = data[(py / 2) * 72 + px / 2];
                assert_eq!(r.pixel(px, py), if v < 0.0 { lo } else { hi }, "pixel ({px}, {py})");
            }
        }
    }

    #[test]
    fn central_meridian_shifts_columns() {
        let g = GridGeometry::global(4, 8).unwrap();
        let data: Vec<f32> = (0..32).map(|k| (k % 8) as f32).collect();
        let mut spec = RenderSpec::new("u10", Projection::Equirect);
        spec.width_px = 64;
        spec.graticule_deg = 0.0;
        spec.colormap = Colormap::Sequential;
        spec.value_range = Some((0.0, 7.0));
        let a = render_raster(&single(g, data.clone()), &spec).unwrap();
        spec.central_meridian = 0.0;
        let b = render_raster(&single(g, data), &spec).unwrap();
        // with 0° in the middle the first pixel column shows 180°E (column 4)
        assert_eq!(a.pixel(0, 0), Colormap::Sequential.color(0.0));
        assert_eq!(b.pixel(0, 0), Colormap::Sequential.color(4.0 / 7.0));
    }

    #[test]
    fn constant_field_has_uniform_interior_and_same_graticule() {
        let g = GridGeometry::global(36, 72).unwrap();
        let mut spec = RenderSpec::new("u10", Projection::Robinson);
        spec.width_px = 200;
        spec.value_range = Some((-10.0, 10.0));
        let a = render_raster(&single(g, vec![3.0; g.cells()]), &spec).unwrap();
        let b = render_raster(&single(g, vec![-7.0; g.cells()]), &spec).unwrap();
        let fill_a = Colormap::Diverging.color(0.65);
        let mut n_line = 0;
        for y in 0..a.height {
            for x in 0..a.width {
                let (pa, pb) = (a.pixel(x, y), b.pixel(x, y));
                assert_eq!(pa == GRATICULE, pb == GRATICULE);
                assert_eq!(pa == BACKGROUND, pb == BACKGROUND);
                assert!(pa == GRATICULE || pa == BACKGROUND || pa == fill_a);
                n_line += (pa == GRATICULE) as usize;
            }
        }
        assert!(n_line > 0);
        // corners fall outside the outline
        assert_eq!(a.pixel(0, 0), BACKGROUND);
        assert_eq!(a.pixel(a.width / 2, a.height / 2 + 3), fill_a);
        assert_eq!(a.to_ppm(), render_raster(&single(g, vec![3.0; g.cells()]), &spec).unwrap().to_ppm());
        assert!(a.to_ppm().starts_with(format!("P6\n200 {}\n255\n", a.height).as_bytes()));
    }

    #[test]
    fn equirect_graticule_lines_at_spacing() {
        let g = GridGeometry::global(36, 72).unwrap();
        let mut spec = RenderSpec::new("u10", Projection::Equirect);
        spec.width_px = 144;
        spec.graticule_deg = 90.0;
        let r = render_raster(&single(g, vec![0.0; g.cells()]), &spec).unwrap();
        // pixel centres sit at grid points, so the first column straddles 0°E
        // and the first row straddles 90°N
        let line_cols: Vec<usize> = (0..144).filter(|&x| r.pixel(x, 1) == GRATICULE).collect();
        assert_eq!(line_cols, [0, 36, 72, 108]);
        let line_rows: Vec<usize> = (0..72).filter(|&y| r.pixel(1, y) == GRATICULE).collect();
        assert_eq!(line_rows, [0, 36]);
    }

    #[test]
    fn subset_examples() {
        let g = GridGeometry::canonical();
        let s = StateTensor::filled(ChannelSchema::from_names(&["u10"]).unwrap(), g, 0, &[1.0]).unwrap();
        let v = subset_region(&s, &Region::new(-20.0, -13.0, 166.0, 171.0).unwrap()).unwrap();
        assert_eq!((v.geom().n_lat(), v.geom().n_lon()), (28, 20));
        assert_eq!((v.geom().lat_start(), v.geom().lon_start()), (-13.0, 166.0));
        let w = subset_region(&s, &Region::new(-10.0, 10.0, 350.0, 10.0).unwrap()).unwrap();
        assert_eq!(w.geom().n_lon(), 80);
        assert_eq!(w.geom().lon_start(), 350.0);
        assert!(matches!(subset_region(&s, &Region::new(10.0, 10.1, 0.0, 0.1).unwrap()), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn wrapped_subset_values_and_identity() {
        let g = GridGeometry::global(8, 16).unwrap();
        let data: Vec<f32> = (0..g.cells()).map(|k| k as f32).collect();
        let s = single(g, data);
        assert_eq!(subset_region(&s, &Region::global()).unwrap(), s);
        let w = subset_region(&s, &Region::new(-90.0, 90.0, 290.0, 60.0).unwrap()).unwrap();
        // 292.5, 315, 337.5, 0, 22.5, 45 → columns 13, 14, 15, 0, 1, 2
        assert_eq!(w.geom().n_lon(), 6);
        assert_eq!(&w.data()[..6], &[13.0, 14.0, 15.0, 0.0, 1.0, 2.0]);
        for j in 0..6 {
            let (lat, lon) = w.geom().latlon_of(0, j).unwrap();
            let (i0, j0) = g.nearest_cell(lat, lon).unwrap();
            assert_eq!(w.data()[j], s.data()[i0 * 16 + j0]);
        }
    }

    #[test]
    fn canonical_render_within_budget() {
        let g = GridGeometry::canonical();
        let data: Vec<f32> = (0..g.cells()).map(|k| ((k % 1440) as f32 / 100.0).sin() * 20.0).collect();
        let s = single(g, data);
        let spec = RenderSpec::new("u10", Projection::Robinson);
        let t = std::time::Instant::now();
        let r = render_raster(&s, &spec).unwrap();
        assert_eq!(r.width, 1440);
        assert!(t.elapsed().as_secs_f64() < 5.0, "{:?}", t.elapsed());
    }

    proptest! {
        #[test]
        fn robinson_monotone(lat in 0.0f64..90.0, d in 0.001f64..5.0, lon in 0.5f64..359.0) {
            let (x1, y1) = robinson_project(lat, lon, 180.0);
            let (_, y2) = robinson_project((lat + d).min(90.0), lon, 180.0);
            prop_assert!(y2 >= y1);
            let (x3, _) = robinson_project(lat, lon + 0.5, 180.0);
            if lat < 89.9 && lon + 0.5 < 360.0 && !(lon < 180.0 && lon + 0.5 >= 180.0) {
                prop_assert!(x3 > x1);
            }
        }

        #[test]
        fn nested_subsets_compose(a in 0usize..6, b in 0usize..6, c in 0usize..12, d in 1usize..12) {
            let g = GridGeometry::global(16, 32).unwrap();
            let data: Vec<f32> = (0..g.cells()).map(|k| k as f32).collect();
            let s = single(g, data);
            let lat_lo = -80.0 + 11.25 * a as f64;
            let lon_lo = 30.0 * c as f64;
            let outer = Region::new(lat_lo, lat_lo + 90.0, lon_lo, wrap_lon(lon_lo + 200.0)).unwrap();
            let inner = Region::new(lat_lo + 11.25 * b as f64, lat_lo + 80.0, wrap_lon(lon_lo + 10.0 * d as f64), wrap_lon(lon_lo + 150.0)).unwrap();
            let twice = subset_region(&subset_region(&s, &outer).unwrap(), &inner);
            let once = subset_region(&s, &inner);
            match (twice, once) {
                (Ok(x), Ok(y)) => {
                    prop_assert_eq!(x.data(), y.data());
                    prop_assert_eq!(x.geom(), y.geom());
                }
                (Err(_), Err(_)) => {}
                (x, y) => prop_assert!(false, "{:?} vs {:?}", x.map(|_| ()), y.map(|_| ())),
            }
        }
    }
}
