//! Base-map ingestion: OSRM table service client and synthetic topologies.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodata::{self, bbox_for_area, BaseMap, GeoError, GeoPoint, UNREACHABLE};
use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("HTTP request failed after {attempts} attempt(s): {message}")]
    Http { attempts: u32, message: String },
    #[error("malformed table response: {0}")]
    MalformedJson(String),
    #[error("OSRM answered with code {code:?}: {message}")]
    Service { code: String, message: String },
    #[error("response dimensions {got_rows}x{got_cols} do not match request {want_rows}x{want_cols}")]
    DimensionMismatch {
        want_rows: usize,
        want_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("no recorded fixture for {0}")]
    MissingFixture(String),
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("points file line {line}: {message}")]
    PointsFile { line: usize, message: String },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsrmEndpoint {
    pub base_url: String,
    pub max_table_size: usize,
    pub timeout_s: f64,
}

impl OsrmEndpoint {
    pub fn new(base_url: impl Into<String>) -> Result<Self, IngestError> {
        let ep = Self {
            base_url: base_url.into(),
            max_table_size: 500,
            timeout_s: 60.0,
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn with_max_table_size(mut self, size: usize) -> Result<Self, IngestError> {
        self.max_table_size = size;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), IngestError> {
        if self.base_url.is_empty() {
            return Err(IngestError::InvalidEndpoint("empty base url".into()));
        }
        if self.max_table_size < 2 {
            return Err(IngestError::InvalidEndpoint("max_table_size must be >= 2".into()));
        }
        if !(self.timeout_s > 0.0) {
            return Err(IngestError::InvalidEndpoint("timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Something that can answer a table GET request with a response body.
pub trait TableTransport: Sync {
    fn get(&self, url: &str) -> Result<String, IngestError>;
}

/// Blocking HTTP transport with exponential-backoff retries.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    retries: u32,
    backoff: Duration,
}

impl HttpTransport {
    pub fn new(timeout_s: f64) -> Result<Self, IngestError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(timeout_s))
            .build()
            .map_err(|e| IngestError::Http {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            client,
            retries: 3,
            backoff: Duration::from_millis(500),
        })
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    fn attempt(&self, url: &str) -> Result<String, String> {
        let resp = self.client.get(url).send().map_err(|e| e.to_string())?;
        let status = resp.status();
        let body = resp.text().map_err(|e| e.to_string())?;
        // OSRM reports semantic failures (e.g. NoTable) as 4xx with a JSON body
        if status.is_server_error() {
            return Err(format!("status {status}"));
        }
        Ok(body)
    }
}

impl TableTransport for HttpTransport {
    fn get(&self, url: &str) -> Result<String, IngestError> {
        let mut delay = self.backoff;
        let mut last = String::new();
        let attempts = self.retries + 1;
        for attempt in 0..attempts {
            match self.attempt(url) {
                Ok(body) => return Ok(body),
                Err(e) => {
                    log::warn!("table request attempt {} failed: {e}", attempt + 1);
                    last = e;
                    if attempt + 1 < attempts {
                        thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(IngestError::Http {
            attempts,
            message: last,
        })
    }
}

/// Serves recorded responses: one file per request, the URL on the first
/// line and the verbatim body after it.
pub struct FixtureTransport {
    bodies: HashMap<String, String>,
}

impl FixtureTransport {
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, IngestError> {
        let mut bodies = HashMap::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for path in entries {
            let (url, body) = parse_fixture(&fs::read_to_string(&path)?);
            bodies.insert(url, body);
        }
        Ok(Self { bodies })
    }

    /// Builds a transport from fixture texts (URL line, then body).
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            bodies: texts.into_iter().map(parse_fixture).collect(),
        }
    }
}

fn parse_fixture(text: &str) -> (String, String) {
    match text.split_once('\n') {
        Some((url, body)) => (url.trim_end_matches('\r').to_string(), body.to_string()),
        None => (text.to_string(), String::new()),
    }
}

/// Writes a fixture file in the format read by [`FixtureTransport`].
pub fn write_fixture(path: impl AsRef<Path>, url: &str, body: &str) -> std::io::Result<()> {
    fs::write(path, format!("{url}\n{body}"))
}

impl TableTransport for FixtureTransport {
    fn get(&self, url: &str) -> Result<String, IngestError> {
        self.bodies
            .get(url)
            .cloned()
            .ok_or_else(|| IngestError::MissingFixture(url.to_string()))
    }
}

/// Forwards to an inner transport and records each exchange as a fixture.
pub struct RecordingTransport<T> {
    inner: T,
    dir: PathBuf,
}

impl<T: TableTransport> RecordingTransport<T> {
    pub fn new(inner: T, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }
}

impl<T: TableTransport> TableTransport for RecordingTransport<T> {
    fn get(&self, url: &str) -> Result<String, IngestError> {
        let body = self.inner.get(url)?;
        let name = format!("{:016x}.txt", crate::derive_seed(0, fnv1a(url.as_bytes())));
        write_fixture(self.dir.join(name), url, &body)?;
        Ok(body)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Raw table in metres and seconds; unreachable pairs hold [`UNREACHABLE`].
#[derive(Debug, Clone, PartialEq)]
pub struct RawTables {
    pub dist: Matrix<f64>,
    pub dur: Matrix<f64>,
}

#[derive(Debug, Deserialize)]
struct TableResponse {
    code: String,
    #[serde(default)]
    message: Option<String>,
    #[serde(default)]
    durations: Option<Vec<Vec<Option<f64>>>>,
    #[serde(default)]
    distances: Option<Vec<Vec<Option<f64>>>>,
}

/// One request of the chunked assembly: global source and destination indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TableBlock {
    pub sources: Vec<usize>,
    pub destinations: Vec<usize>,
}

/// Row-major blocks of at most `size` sources by `size` destinations.
pub fn plan_blocks(n: usize, size: usize) -> Vec<TableBlock> {
    let ranges: Vec<Vec<usize>> = (0..n)
        .step_by(size)
        .map(|s| (s..(s + size).min(n)).collect())
        .collect();
    let mut blocks = Vec::with_capacity(ranges.len() * ranges.len());
    for src in &ranges {
        for dst in &ranges {
            blocks.push(TableBlock {
                sources: src.clone(),
                destinations: dst.clone(),
            });
        }
    }
    blocks
}

fn join_indices(it: impl Iterator<Item = usize>) -> String {
    it.map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

/// Builds the table URL for one block. Coordinates carried are the block's
/// sources followed by its destinations, or just the sources when both sets
/// coincide.
pub fn block_url(base_url: &str, points: &[GeoPoint], block: &TableBlock) -> String {
    let shared = block.sources == block.destinations;
    let mut coords: Vec<GeoPoint> = block.sources.iter().map(|&i| points[i]).collect();
    let dst_offset = if shared {
        0
    } else {
        coords.extend(block.destinations.iter().map(|&i| points[i]));
        block.sources.len()
    };
    let coord_str = coords
        .iter()
        .map(|p| format!("{},{}", p.lon, p.lat))
        .collect::<Vec<_>>()
        .join(";");
    format!(
        "{}/table/v1/driving/{}?sources={}&destinations={}&annotations=duration,distance",
        base_url.trim_end_matches('/'),
        coord_str,
        join_indices(0..block.sources.len()),
        join_indices(dst_offset..dst_offset + block.destinations.len()),
    )
}

fn parse_grid(
    grid: Option<Vec<Vec<Option<f64>>>>,
    which: &str,
    rows: usize,
    cols: usize,
) -> Result<Vec<Vec<Option<f64>>>, IngestError> {
    let grid = grid.ok_or_else(|| IngestError::MalformedJson(format!("missing \"{which}\"")))?;
    let got_cols = grid.first().map_or(0, Vec::len);
    if grid.len() != rows || grid.iter().any(|r| r.len() != cols) {
        return Err(IngestError::DimensionMismatch {
            want_rows: rows,
            want_cols: cols,
            got_rows: grid.len(),
            got_cols,
        });
    }
    Ok(grid)
}

/// Parses one table response body for a `rows x cols` request.
pub fn parse_table_body(
    body: &str,
    rows: usize,
    cols: usize,
) -> Result<(Vec<Vec<Option<f64>>>, Vec<Vec<Option<f64>>>), IngestError> {
    let resp: TableResponse =
        serde_json::from_str(body).map_err(|e| IngestError::MalformedJson(e.to_string()))?;
    if resp.code != "Ok" {
        return Err(IngestError::Service {
            code: resp.code,
            message: resp.message.unwrap_or_default(),
        });
    }
    let dist = parse_grid(resp.distances, "distances", rows, cols)?;
    let dur = parse_grid(resp.durations, "durations", rows, cols)?;
    Ok((dist, dur))
}

pub struct OsrmClient<T> {
    endpoint: OsrmEndpoint,
    transport: T,
}

impl OsrmClient<HttpTransport> {
    pub fn http(endpoint: OsrmEndpoint) -> Result<Self, IngestError> {
        let transport = HttpTransport::new(endpoint.timeout_s)?;
        Ok(Self { endpoint, transport })
    }
}

impl<T: TableTransport> OsrmClient<T> {
    pub fn with_transport(endpoint: OsrmEndpoint, transport: T) -> Self {
        Self { endpoint, transport }
    }

    pub fn endpoint(&self) -> &OsrmEndpoint {
        &self.endpoint
    }

    /// Fetches full `N x N` distance and duration tables, issuing block
    /// requests concurrently. Null entries become [`UNREACHABLE`]; the
    /// diagonal is forced to 0.
    pub fn fetch_table(&self, points: &[GeoPoint]) -> Result<RawTables, IngestError> {
        let n = points.len();
        if n < 2 {
            return Err(IngestError::TooFewPoints(n));
        }
        let blocks = plan_blocks(n, self.endpoint.max_table_size);
        let answers: Vec<_> = blocks
            .par_iter()
            .map(|b| {
                let url = block_url(&self.endpoint.base_url, points, b);
                let body = self.transport.get(&url)?;
                parse_table_body(&body, b.sources.len(), b.destinations.len())
            })
            .collect::<Result<_, _>>()?;

        let mut dist = Matrix::zeros(n);
        let mut dur = Matrix::zeros(n);
        for (block, (d, t)) in blocks.iter().zip(answers) {
            for (bi, &i) in block.sources.iter().enumerate() {
                for (bj, &j) in block.destinations.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    dist.set(i, j, d[bi][bj].unwrap_or(UNREACHABLE));
                    dur.set(i, j, t[bi][bj].unwrap_or(UNREACHABLE));
                }
            }
        }
        Ok(RawTables { dist, dur })
    }

    /// Fetches tables and normalises them into a [`BaseMap`] centred on the
    /// points' mean position.
    pub fn fetch_basemap(&self, name: &str, points: &[GeoPoint]) -> Result<BaseMap, IngestError> {
        let raw = self.fetch_table(points)?;
        let n = points.len() as f64;
        let center = GeoPoint::new(
            points.iter().map(|p| p.lat).sum::<f64>() / n,
            points.iter().map(|p| p.lon).sum::<f64>() / n,
        )?;
        Ok(geodata::normalize_basemap(name, center, &raw.dist, &raw.dur, points)?)
    }
}

/// Reads `lat,lon` pairs, one per line. Blank lines, `#` comments and a
/// non-numeric header line are skipped.
pub fn read_points(path: impl AsRef<Path>) -> Result<Vec<GeoPoint>, IngestError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |message: String| IngestError::PointsFile { line: k + 1, message };
        if fields.len() < 2 {
            return Err(bad("expected `lat,lon`".into()));
        }
        match (fields[0].parse::<f64>(), fields[1].parse::<f64>()) {
            (Ok(lat), Ok(lon)) => out.push(GeoPoint::new(lat, lon).map_err(|e| bad(e.to_string()))?),
            _ if out.is_empty() && k == 0 => continue,
            _ => return Err(bad(format!("cannot parse {line:?}"))),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub asymmetry: f64,
    pub detour_factor: f64,
    pub speed_kmh: f64,
}

impl SynthConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            asymmetry: 0.5,
            detour_factor: 1.3,
            speed_kmh: 30.0,
        }
    }

    fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::InvalidConfig(m.to_string()));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.asymmetry) {
            return bad("asymmetry must lie in [0, 1]");
        }
        if !(self.detour_factor >= 1.0) {
            return bad("detour_factor must be >= 1");
        }
        if !(self.speed_kmh > 0.0) {
            return bad("speed_kmh must be positive");
        }
        Ok(())
    }
}

/// Side of the synthetic service area, matching the 3 km city boxes.
const SYNTH_SIDE_KM: f64 = 3.0;

/// Generates a synthetic asymmetric base map.
///
/// Points are uniform in a 3 km box at the origin; the distance from `i` to
/// `j` is `detour * planar(i, j) * (1 + asymmetry * u_ij)` with an
/// independent `u_ij ~ U[0, 1]` per ordered pair.
pub fn synth_basemap(cfg: &SynthConfig) -> Result<BaseMap, IngestError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let center = GeoPoint { lat: 0.0, lon: 0.0 };
    let bbox = bbox_for_area(center, SYNTH_SIDE_KM)?;
    let points: Vec<GeoPoint> = (0..cfg.n)
        .map(|_| GeoPoint {
            lat: rng.gen_range(bbox.lat_min..=bbox.lat_max),
            lon: rng.gen_range(bbox.lon_min..=bbox.lon_max),
        })
        .collect();

    // equirectangular projection to metres; exact enough at city scale
    let m_per_deg = geodata::km_per_degree(geodata::EARTH_RADIUS_KM) * 1000.0;
    let planar = |a: GeoPoint, b: GeoPoint| {
        let dx = (b.lon - a.lon) * m_per_deg * center.lat.to_radians().cos();
        let dy = (b.lat - a.lat) * m_per_deg;
        dx.hypot(dy)
    };
    let speed_ms = cfg.speed_kmh / 3.6;
    let mut dist = Matrix::zeros(cfg.n);
    let mut dur = Matrix::zeros(cfg.n);
    for i in 0..cfg.n {
        for j in 0..cfg.n {
            let u: f64 = rng.gen();
            if i == j {
                continue;
            }
            let d = cfg.detour_factor * planar(points[i], points[j]) * (1.0 + cfg.asymmetry * u);
            dist.set(i, j, d);
            dur.set(i, j, d / speed_ms);
        }
    }
    let name = format!("synthetic-{}", cfg.seed);
    Ok(geodata::normalize_basemap(&name, center, &dist, &dur, &points)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_plan_covers_every_pair_once() {
        for (n, size) in [(5, 2), (7, 3), (10, 10), (3, 500)] {
            let mut seen = vec![0; n * n];
            for b in plan_blocks(n, size) {
                assert!(b.sources.len() <= size && b.destinations.len() <= size);
                for &i in &b.sources {
                    for &j in &b.destinations {
                        seen[i * n + j] += 1;
                    }
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn url_format() {
        let pts = [GeoPoint { lat: 1.5, lon: 2.0 }, GeoPoint { lat: -3.0, lon: 4.25 }];
        let full = TableBlock {
            sources: vec![0, 1],
            destinations: vec![0, 1],
        };
        assert_eq!(
            block_url("http://h:5000/", &pts, &full),
            "http://h:5000/table/v1/driving/2,1.5;4.25,-3?sources=0;1&destinations=0;1&annotations=duration,distance"
        );
        let split = TableBlock {
            sources: vec![1],
            destinations: vec![0],
        };
        assert_eq!(
            block_url("http://h", &pts, &split),
            "http://h/table/v1/driving/4.25,-3;2,1.5?sources=0&destinations=1&annotations=duration,distance"
        );
    }

    #[test]
    fn parse_errors_are_distinct() {
        assert!(matches!(parse_table_body("{not json", 1, 1), Err(IngestError::MalformedJson(_))));
        let wrong = r#"{"code":"Ok","distances":[[0,1]],"durations":[[0,1]]}"#;
        assert!(matches!(
            parse_table_body(wrong, 2, 2),
            Err(IngestError::DimensionMismatch { .. })
        ));
        let svc = r#"{"code":"NoTable","message":"nope"}"#;
        assert!(matches!(parse_table_body(svc, 2, 2), Err(IngestError::Service { .. })));
    }

    #[test]
    fn synth_symmetric_without_asymmetry() {
        let mut cfg = SynthConfig::new(30, 4);
        cfg.asymmetry = 0.0;
        let m = synth_basemap(&cfg).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                assert_eq!(m.dist.get(i, j), m.dist.get(j, i));
            }
        }
        m.validate().unwrap();
    }

    #[test]
    fn synth_is_deterministic_and_asymmetric() {
        let mut cfg = SynthConfig::new(50, 9);
        cfg.asymmetry = 1.0;
        let a = synth_basemap(&cfg).unwrap();
        assert_eq!(a, synth_basemap(&cfg).unwrap());
        let asym = (0..50).any(|i| (0..50).any(|j| a.dist.get(i, j) != a.dist.get(j, i)));
        assert!(asym);
    }

    #[test]
    fn synth_rejects_bad_config() {
        assert!(synth_basemap(&SynthConfig::new(1, 0)).is_err());
        let mut cfg = SynthConfig::new(5, 0);
        cfg.detour_factor = 0.5;
        assert!(synth_basemap(&cfg).is_err());
    }
}
