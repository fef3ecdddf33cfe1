use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rrnco_core::ingest::{
    read_points, FixtureTransport, HttpTransport, IngestError, OsrmClient, OsrmEndpoint, RecordingTransport,
    TableTransport,
};
use rrnco_core::GeoPoint;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/osrm3")
}

/// Answers any table URL with values computed from the coordinates in it.
struct MockTable {
    calls: AtomicUsize,
}

fn arc_value(a: (f64, f64), b: (f64, f64), salt: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    ((a.0 - b.0).abs() * 7919.0 + (a.1 - b.1).abs() * 104_729.0 + a.0 * 3.0 + salt).round() / 10.0
}

impl TableTransport for MockTable {
    fn get(&self, url: &str) -> Result<String, IngestError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let rest = url.split("/table/v1/driving/").nth(1).unwrap();
        let (coords, query) = rest.split_once('?').unwrap();
        let pts: Vec<(f64, f64)> = coords
            .split(';')
            .map(|c| {
                let (lon, lat) = c.split_once(',').unwrap();
                (lon.parse().unwrap(), lat.parse().unwrap())
            })
            .collect();
        let list = |key: &str| -> Vec<usize> {
            let part = query.split('&').find(|p| p.starts_with(key)).unwrap();
            part[key.len() + 1..].split(';').map(|x| x.parse().unwrap()).collect()
        };
        let (src, dst) = (list("sources"), list("destinations"));
        let grid = |salt: f64| -> Vec<Vec<f64>> {
            src.iter()
                .map(|&i| dst.iter().map(|&j| arc_value(pts[i], pts[j], salt)).collect())
                .collect()
        };
        Ok(serde_json::json!({"code": "Ok", "distances": grid(0.0), "durations": grid(5.0)}).to_string())
    }
}

fn grid_points(n: usize) -> Vec<GeoPoint> {
    (0..n)
        .map(|k| GeoPoint::new(48.1 + 0.003 * k as f64, 11.5 + 0.0021 * ((k * 7) % n) as f64).unwrap())
        .collect()
}

#[test]
fn fixture_fetch_reproduces_recorded_tables() {
    let points = read_points(fixture_dir().join("points.csv")).unwrap();
    assert_eq!(points.len(), 3);
    let transport = FixtureTransport::from_dir(fixture_dir().join("responses")).unwrap();
    let client = OsrmClient::with_transport(OsrmEndpoint::new("http://osrm.test").unwrap(), transport);
    let raw = client.fetch_table(&points).unwrap();
    let dist = [[0.0, 2712.4, 2455.8], [2801.3, 0.0, 1604.9], [2390.6, 1571.2, 0.0]];
    let dur = [[0.0, 412.3, 389.9], [430.1, 0.0, 301.7], [377.4, 288.2, 0.0]];
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(raw.dist.get(i, j).to_bits(), f64::to_bits(dist[i][j]));
            assert_eq!(raw.dur.get(i, j).to_bits(), f64::to_bits(dur[i][j]));
        }
    }
    let map = client.fetch_basemap("berlin", &points).unwrap();
    map.validate().unwrap();
    assert_eq!(map.dist_scale, 2801.3);
    assert_eq!(map.dist.get(1, 0), 1.0);
}

#[test]
fn chunked_assembly_equals_single_call() {
    let points = grid_points(7);
    let single = OsrmClient::with_transport(
        OsrmEndpoint::new("http://mock").unwrap(),
        MockTable {
            calls: AtomicUsize::new(0),
        },
    );
    let whole = single.fetch_table(&points).unwrap();
    for size in [2, 3, 4, 6] {
        let mock = MockTable {
            calls: AtomicUsize::new(0),
        };
        let ep = OsrmEndpoint::new("http://mock").unwrap().with_max_table_size(size).unwrap();
        let client = OsrmClient::with_transport(ep, mock);
        let chunked = client.fetch_table(&points).unwrap();
        assert_eq!(chunked, whole, "size {size}");
    }
}

#[test]
fn recording_round_trips_through_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let points = grid_points(5);
    let ep = OsrmEndpoint::new("http://mock").unwrap().with_max_table_size(3).unwrap();
    let rec = RecordingTransport::new(
        MockTable {
            calls: AtomicUsize::new(0),
        },
        dir.path(),
    )
    .unwrap();
    let live = OsrmClient::with_transport(ep.clone(), rec).fetch_table(&points).unwrap();
    let replay = OsrmClient::with_transport(ep, FixtureTransport::from_dir(dir.path()).unwrap())
        .fetch_table(&points)
        .unwrap();
    assert_eq!(live, replay);
}

#[test]
fn missing_fixture_is_reported() {
    let transport = FixtureTransport::from_dir(fixture_dir().join("responses")).unwrap();
    let client = OsrmClient::with_transport(OsrmEndpoint::new("http://osrm.test").unwrap(), transport);
    let err = client.fetch_table(&grid_points(3)).unwrap_err();
    assert!(matches!(err, IngestError::MissingFixture(_)));
}

/// Minimal HTTP/1.1 server: answers the first `failures` requests with 500.
fn serve(body: String, failures: usize) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let k = counter.fetch_add(1, Ordering::SeqCst);
            let (status, payload) = if k < failures {
                ("500 Internal Server Error", "oops".to_string())
            } else {
                ("200 OK", body.clone())
            };
            let resp = format!(
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
            let _ = reader.read(&mut [0u8; 0]);
        }
    });
    (format!("http://{addr}"), hits)
}

#[test]
fn http_transport_retries_server_errors() {
    let text = std::fs::read_to_string(fixture_dir().join("responses/table.txt")).unwrap();
    let body = text.split_once('\n').unwrap().1.to_string();
    let (base, hits) = serve(body, 2);
    let transport = HttpTransport::new(5.0).unwrap().with_retries(3, Duration::from_millis(10));
    let client = OsrmClient::with_transport(OsrmEndpoint::new(base).unwrap(), transport);
    let points = read_points(fixture_dir().join("points.csv")).unwrap();
    let raw = client.fetch_table(&points).unwrap();
    assert_eq!(raw.dist.get(0, 1), 2712.4);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn http_transport_gives_up() {
    let (base, hits) = serve(String::new(), usize::MAX);
    let transport = HttpTransport::new(5.0).unwrap().with_retries(1, Duration::from_millis(1));
    let err = transport.get(&format!("{base}/table/v1/driving/0,0;1,1")).unwrap_err();
    assert!(matches!(err, IngestError::Http { attempts: 2, .. }));
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}
