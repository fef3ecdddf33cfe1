//! Geographic primitives and the base-map data model.
//!
//! A [`BaseMap`] holds every location of one city together with full,
//! possibly asymmetric, distance and duration matrices. Matrices are kept
//! normalised to `[0, 1]` (reachable entries) with the divisor recorded so
//! the raw scale can be recovered.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

/// Mean Earth radius used by every spherical computation in the crate.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Raw matrix entry marking an unreachable origin/destination pair.
pub const UNREACHABLE: f64 = f64::INFINITY;

/// Nearest-rank percentile above which reachable entries are clipped.
pub const CLIP_PERCENTILE: f64 = 0.995;

/// Multiplier applied to the largest finite entry to stand in for unreachable pairs.
pub const UNREACHABLE_FACTOR: f64 = 2.0;

const MAGIC: &[u8; 4] = b"RRNC";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("invalid point (lat {lat}, lon {lon})")]
    InvalidPoint { lat: f64, lon: f64 },
    #[error("bounding box centre latitude {0} is too close to a pole")]
    PolarDegeneracy(f64),
    #[error("side length must be finite and non-negative, got {0}")]
    InvalidSide(f64),
    #[error("a base map needs at least 2 locations, got {0}")]
    TooFewLocations(usize),
    #[error("matrix shape mismatch: expected {expected}x{expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("{0} matrix has no reachable off-diagonal entry")]
    AllUnreachable(&'static str),
    #[error("{which} matrix has a negative entry at ({i}, {j})")]
    NegativeEntry {
        which: &'static str,
        i: usize,
        j: usize,
    },
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a base-map container (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("container truncated while reading {section}")]
    Truncated { section: &'static str },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("map name is not valid UTF-8")]
    BadName,
    #[error("decoded base map is invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let p = Self { lat, lon };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(GeoError::InvalidPoint { lat, lon })
        }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BBox {
    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.lat_min..=self.lat_max).contains(&p.lat)
            && (self.lon_min..=self.lon_max).contains(&p.lon)
    }
}

/// Great-circle distance in kilometres.
pub fn haversine(p1: GeoPoint, p2: GeoPoint, radius_km: f64) -> f64 {
    let (phi1, phi2) = (p1.lat.to_radians(), p2.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (p2.lon - p1.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    // rounding can push h marginally above 1 for antipodal points
    2.0 * radius_km * h.sqrt().min(1.0).asin()
}

/// Kilometres per degree along a meridian for the given radius.
pub fn km_per_degree(radius_km: f64) -> f64 {
    2.0 * PI * radius_km / 360.0
}

/// Square box of `side_km` centred on `center`, on the default Earth radius.
pub fn bbox_for_area(center: GeoPoint, side_km: f64) -> Result<BBox, GeoError> {
    if !center.is_valid() {
        return Err(GeoError::InvalidPoint {
            lat: center.lat,
            lon: center.lon,
        });
    }
    if center.lat.abs() >= 89.0 {
        return Err(GeoError::PolarDegeneracy(center.lat));
    }
    if !(side_km.is_finite() && side_km >= 0.0) {
        return Err(GeoError::InvalidSide(side_km));
    }
    let half = side_km / 2.0;
    let dlat = half / km_per_degree(EARTH_RADIUS_KM);
    let dlon = dlat / center.lat.to_radians().cos();
    Ok(BBox {
        lat_min: center.lat - dlat,
        lat_max: center.lat + dlat,
        lon_min: center.lon - dlon,
        lon_max: center.lon + dlon,
    })
}

/// Planar angle matrix of normalised coordinates, scaled to `(-1, 1]`.
///
/// `coords[i] = [x, y]`; entry `(i, j)` is `atan2(y_j - y_i, x_j - x_i) / pi`,
/// with the diagonal fixed at 0.
pub fn angle_matrix(coords: &[[f64; 2]]) -> Matrix<f64> {
    Matrix::from_fn(coords.len(), |i, j| {
        if i == j {
            0.0
        } else {
            let dy = coords[j][1] - coords[i][1];
            let dx = coords[j][0] - coords[i][0];
            dy.atan2(dx) / PI
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseMap {
    pub name: String,
    pub center: GeoPoint,
    /// Raw locations, `(lat, lon)` in degrees.
    pub coords_raw: Vec<GeoPoint>,
    /// Min-max normalised `[x, y] = [lon, lat]` per location.
    pub coords_norm: Vec<[f32; 2]>,
    pub dist: Matrix<f32>,
    pub dur: Matrix<f32>,
    /// Metres per normalised distance unit.
    pub dist_scale: f64,
    /// Seconds per normalised duration unit.
    pub dur_scale: f64,
    pub unreachable: Matrix<bool>,
}

impl BaseMap {
    pub fn n_tot(&self) -> usize {
        self.coords_raw.len()
    }

    pub fn coords_norm_f64(&self) -> Vec<[f64; 2]> {
        self.coords_norm
            .iter()
            .map(|c| [f64::from(c[0]), f64::from(c[1])])
            .collect()
    }

    /// Checks every structural invariant of a base map.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.n_tot();
        if n < 2 {
            return Err(format!("n_tot {n} < 2"));
        }
        if self.coords_norm.len() != n
            || self.dist.n() != n
            || self.dur.n() != n
            || self.unreachable.n() != n
        {
            return Err("inconsistent sizes".into());
        }
        for (name, m) in [("dist", &self.dist), ("dur", &self.dur)] {
            for i in 0..n {
                if m.get(i, i) != 0.0 {
                    return Err(format!("{name} diagonal ({i},{i}) is not 0"));
                }
                for j in 0..n {
                    let v = m.get(i, j);
                    if !v.is_finite() || v < 0.0 {
                        return Err(format!("{name}[{i}][{j}] = {v}"));
                    }
                    if !self.unreachable.get(i, j) && v > 1.0 {
                        return Err(format!("{name}[{i}][{j}] = {v} > 1 but reachable"));
                    }
                }
            }
        }
        for axis in 0..2 {
            let (lo, hi) = self
                .coords_norm
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), c| {
                    (lo.min(c[axis]), hi.max(c[axis]))
                });
            if lo < 0.0 || hi > 1.0 {
                return Err(format!("coords_norm axis {axis} outside [0,1]"));
            }
            let raw_varies = self.coords_raw.windows(2).any(|w| {
                if axis == 0 {
                    w[0].lon != w[1].lon
                } else {
                    w[0].lat != w[1].lat
                }
            });
            if raw_varies && (lo != 0.0 || hi != 1.0) {
                return Err(format!("coords_norm axis {axis} does not span [0,1]"));
            }
        }
        Ok(())
    }
}

/// Nearest-rank percentile of an unsorted sample (`q` in `(0, 1]`).
fn nearest_rank(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = (q * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// Normalises one raw matrix. Returns the scaled matrix, its divisor, and
/// the sentinel mask.
fn normalize_matrix(raw: &Matrix<f64>, which: &'static str) -> Result<(Matrix<f64>, f64, Matrix<bool>), GeoError> {
    let n = raw.n();
    let mut mask = Matrix::zeros(n);
    let mut finite = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let v = raw.get(i, j);
            if v.is_finite() {
                if v < 0.0 {
                    return Err(GeoError::NegativeEntry { which, i, j });
                }
                finite.push(v);
            } else {
                mask.set(i, j, true);
            }
        }
    }
    if finite.is_empty() {
        return Err(GeoError::AllUnreachable(which));
    }
    let max_raw = finite.iter().copied().fold(0.0, f64::max);
    let clip = nearest_rank(&mut finite, CLIP_PERCENTILE);
    let substitute = UNREACHABLE_FACTOR * max_raw;
    let any_unreachable = mask.as_slice().iter().any(|&b| b);

    let clipped = Matrix::from_fn(n, |i, j| {
        if i == j {
            0.0
        } else if mask.get(i, j) {
            substitute
        } else {
            raw.get(i, j).min(clip)
        }
    });
    let mut scale = if any_unreachable { substitute } else { clip };
    if scale <= 0.0 {
        // every pair coincides; keep the zeros as they are
        scale = 1.0;
    }
    Ok((clipped.map(|v| v / scale), scale, mask))
}

/// Builds a [`BaseMap`] from raw metre / second matrices.
///
/// Unreachable entries (non-finite, see [`UNREACHABLE`]) become twice the
/// largest finite entry of their matrix and are flagged; reachable entries
/// above the 99.5th nearest-rank percentile are clipped to it; each matrix is
/// then divided by its own maximum.
pub fn normalize_basemap(
    name: &str,
    center: GeoPoint,
    raw_dist: &Matrix<f64>,
    raw_dur: &Matrix<f64>,
    coords_raw: &[GeoPoint],
) -> Result<BaseMap, GeoError> {
    let n = coords_raw.len();
    if n < 2 {
        return Err(GeoError::TooFewLocations(n));
    }
    for m in [raw_dist, raw_dur] {
        if m.n() != n {
            return Err(GeoError::ShapeMismatch {
                expected: n,
                got: m.n(),
            });
        }
    }
    if let Some(p) = coords_raw.iter().find(|p| !p.is_valid()) {
        return Err(GeoError::InvalidPoint { lat: p.lat, lon: p.lon });
    }
    let (dist, dist_scale, dist_mask) = normalize_matrix(raw_dist, "distance")?;
    let (dur, dur_scale, dur_mask) = normalize_matrix(raw_dur, "duration")?;
    let unreachable = Matrix::from_fn(n, |i, j| dist_mask.get(i, j) || dur_mask.get(i, j));

    Ok(BaseMap {
        name: name.to_string(),
        center,
        coords_raw: coords_raw.to_vec(),
        coords_norm: min_max_normalize(coords_raw),
        dist: dist.map(|v| v as f32),
        dur: dur.map(|v| v as f32),
        dist_scale,
        dur_scale,
        unreachable,
    })
}

fn min_max_normalize(coords: &[GeoPoint]) -> Vec<[f32; 2]> {
    let xs: Vec<[f64; 2]> = coords.iter().map(|p| [p.lon, p.lat]).collect();
    normalize_unit_square(&xs)
        .into_iter()
        .map(|c| [c[0] as f32, c[1] as f32])
        .collect()
}

/// Per-axis min-max normalisation to `[0, 1]`; a constant axis maps to 0.
pub fn normalize_unit_square(coords: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in coords {
        for a in 0..2 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    coords
        .iter()
        .map(|c| {
            let mut out = [0.0; 2];
            for a in 0..2 {
                let span = hi[a] - lo[a];
                out[a] = if span > 0.0 {
                    ((c[a] - lo[a]) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
            out
        })
        .collect()
}

/// Serialises a base map into its little-endian container bytes.
pub fn encode_basemap(map: &BaseMap) -> Vec<u8> {
    let n = map.n_tot();
    let mut out = Vec::with_capacity(64 + n * 16 + n * 8 + n * n * 8 + n * n / 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(map.name.len() as u32).to_le_bytes());
    out.extend_from_slice(map.name.as_bytes());
    out.extend_from_slice(&map.center.lat.to_le_bytes());
    out.extend_from_slice(&map.center.lon.to_le_bytes());
    out.extend_from_slice(&map.dist_scale.to_le_bytes());
    out.extend_from_slice(&map.dur_scale.to_le_bytes());
    for p in &map.coords_raw {
        out.extend_from_slice(&p.lat.to_le_bytes());
        out.extend_from_slice(&p.lon.to_le_bytes());
    }
    for c in &map.coords_norm {
        out.extend_from_slice(&c[0].to_le_bytes());
        out.extend_from_slice(&c[1].to_le_bytes());
    }
    for m in [&map.dist, &map.dur] {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut byte = 0u8;
    for (k, &flag) in map.unreachable.as_slice().iter().enumerate() {
        if flag {
            byte |= 1 << (k % 8);
        }
        if k % 8 == 7 {
            out.push(byte);
            byte = 0;
        }
    }
    if (n * n) % 8 != 0 {
        out.push(byte);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, section: &'static str) -> Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or(ContainerError::Truncated { section })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn f64(&mut self, section: &'static str) -> Result<f64, ContainerError> {
        Ok(f64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize, section: &'static str) -> Result<Vec<f32>, ContainerError> {
        let bytes = self.take(count.checked_mul(4).ok_or(ContainerError::Truncated { section })?, section)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_basemap(buf: &[u8]) -> Result<BaseMap, ContainerError> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(ContainerError::VersionMismatch { found: version });
    }
    let n = r.u32("n_tot")? as usize;
    let name_len = r.u32("name length")? as usize;
    let name = std::str::from_utf8(r.take(name_len, "name")?)
        .map_err(|_| ContainerError::BadName)?
        .to_string();
    let center = GeoPoint {
        lat: r.f64("center")?,
        lon: r.f64("center")?,
    };
    let dist_scale = r.f64("dist_scale")?;
    let dur_scale = r.f64("dur_scale")?;
    let mut coords_raw = Vec::with_capacity(n.min(buf.len()));
    for _ in 0..n {
        coords_raw.push(GeoPoint {
            lat: r.f64("coords_raw")?,
            lon: r.f64("coords_raw")?,
        });
    }
    let norm = r.f32s(2 * n, "coords_norm")?;
    let coords_norm = norm.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let dist = Matrix::from_vec(n, r.f32s(n * n, "dist matrix")?).expect("length checked");
    let dur = Matrix::from_vec(n, r.f32s(n * n, "dur matrix")?).expect("length checked");
    let bits = r.take((n * n).div_ceil(8), "unreachable mask")?;
    let unreachable = Matrix::from_fn(n, |i, j| {
        let k = i * n + j;
        bits[k / 8] >> (k % 8) & 1 == 1
    });
    if r.pos != buf.len() {
        return Err(ContainerError::TrailingBytes(buf.len() - r.pos));
    }
    Ok(BaseMap {
        name,
        center,
        coords_raw,
        coords_norm,
        dist,
        dur,
        dist_scale,
        dur_scale,
        unreachable,
    })
}

pub fn write_basemap(map: &BaseMap, path: impl AsRef<Path>) -> Result<(), ContainerError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_basemap(map))?;
    Ok(())
}

pub fn read_basemap(path: impl AsRef<Path>) -> Result<BaseMap, ContainerError> {
    decode_basemap(&fs::read(path)?)
}
