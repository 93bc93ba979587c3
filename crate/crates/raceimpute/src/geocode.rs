//! Address to census tract resolution through the Census Geocoder
//! `geographies/onelineaddress` endpoint, with a persistent cache and an
//! offline mode that never touches the network.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use raceimpute_core::data::Geoid;
use serde::Serialize;

pub const DEFAULT_ENDPOINT: &str = "https://geocoding.geo.census.gov/geocoder/geographies/onelineaddress";
pub const DEFAULT_BENCHMARK: &str = "Public_AR_Current";
pub const DEFAULT_VINTAGE: &str = "Current_Current";
/// Setting this variable to anything but `0` or an empty string forces offline mode.
pub const OFFLINE_ENV: &str = "RACEIMPUTE_GEOCODE_OFFLINE";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GeocodeError {
    #[error("network error: {0}")]
    Network(String),
    #[error("rate limited by the geocoder (HTTP 429)")]
    RateLimited,
    #[error("unexpected geocoder response: {0}")]
    ApiFormat(String),
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("empty address")]
    EmptyAddress,
    #[error("cache: {0}")]
    Cache(String),
}

impl GeocodeError {
    fn retryable(&self) -> bool {
        match self {
            GeocodeError::Network(_) | GeocodeError::RateLimited => true,
            GeocodeError::Status(code) => *code >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// One blocking HTTP GET. Implementations must be shareable across threads.
pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> Result<HttpResponse, GeocodeError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        UreqTransport {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(30))
    }
}

impl Transport for UreqTransport {
    fn get(&self, url: &str) -> Result<HttpResponse, GeocodeError> {
        match self.agent.get(url).call() {
            Ok(resp) => {
                let status = resp.status();
                let body = resp.into_string().map_err(|e| GeocodeError::Network(e.to_string()))?;
                Ok(HttpResponse { status, body })
            }
            Err(ureq::Error::Status(status, resp)) => Ok(HttpResponse {
                status,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(e) => Err(GeocodeError::Network(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Api,
    Cache,
    OfflineTable,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Api => "api",
            Source::Cache => "cache",
            Source::OfflineTable => "offline-table",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeocodeResult {
    pub input: String,
    pub matched: bool,
    pub geoid: Option<Geoid>,
    pub match_quality: String,
    pub source: Source,
}

/// Upper-case, strip punctuation other than `#`, collapse whitespace.
pub fn normalize_address(address: &str) -> String {
    let cleaned: String = address
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '#' {
                c.to_ascii_uppercase()
            } else if c.is_whitespace() || c.is_ascii_punctuation() {
                ' '
            } else {
                c
            }
        })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct CacheEntry {
    geoid: Option<Geoid>,
}

/// Tab-separated cache: `normalized address, matched (0/1), geoid, unix
/// timestamp`, one line per lookup; later lines win.
pub struct GeocodeCache {
    path: Option<PathBuf>,
    entries: HashMap<String, CacheEntry>,
}

impl GeocodeCache {
    pub fn in_memory() -> Self {
        GeocodeCache {
            path: None,
            entries: HashMap::new(),
        }
    }

    pub fn open(path: &Path) -> Result<Self, GeocodeError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| GeocodeError::Cache(format!("{}: {e}", path.display())))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split('\t').collect();
                let bad = || GeocodeError::Cache(format!("{}: malformed line {}", path.display(), i + 1));
                if fields.len() != 4 {
                    return Err(bad());
                }
                let geoid = match fields[1] {
                    "1" => Some(Geoid::parse(fields[2]).map_err(|_| bad())?),
                    "0" => None,
                    _ => return Err(bad()),
                };
                entries.insert(fields[0].to_string(), CacheEntry { geoid });
            }
        }
        Ok(GeocodeCache {
            path: Some(path.to_path_buf()),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn get(&self, key: &str) -> Option<&CacheEntry> {
        self.entries.get(key)
    }

    fn put(&mut self, key: &str, geoid: Option<Geoid>) -> Result<(), GeocodeError> {
        if let Some(path) = &self.path {
            let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            let line = format!(
                "{key}\t{}\t{}\t{ts}\n",
                u8::from(geoid.is_some()),
                geoid.as_ref().map(|g| g.as_str()).unwrap_or("")
            );
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| GeocodeError::Cache(e.to_string()))?;
            }
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| GeocodeError::Cache(format!("{}: {e}", path.display())))?;
            f.write_all(line.as_bytes()).map_err(|e| GeocodeError::Cache(e.to_string()))?;
        }
        self.entries.insert(key.to_string(), CacheEntry { geoid });
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientOptions {
    pub endpoint: String,
    pub benchmark: String,
    pub vintage: String,
    pub offline: bool,
    pub max_attempts: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff: Duration,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            endpoint: DEFAULT_ENDPOINT.into(),
            benchmark: DEFAULT_BENCHMARK.into(),
            vintage: DEFAULT_VINTAGE.into(),
            offline: offline_from_env(),
            max_attempts: 3,
            backoff: Duration::from_millis(500),
        }
    }
}

pub fn offline_from_env() -> bool {
    std::env::var(OFFLINE_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

pub struct GeocodeClient {
    transport: Box<dyn Transport>,
    cache: Mutex<GeocodeCache>,
    options: ClientOptions,
}

impl GeocodeClient {
    pub fn new(transport: Box<dyn Transport>, cache: GeocodeCache, options: ClientOptions) -> Self {
        GeocodeClient {
            transport,
            cache: Mutex::new(cache),
            options,
        }
    }

    pub fn options(&self) -> &ClientOptions {
        &self.options
    }

    pub fn request_url(&self, address: &str) -> String {
        url::Url::parse_with_params(
            &self.options.endpoint,
            &[
                ("address", address),
                ("benchmark", self.options.benchmark.as_str()),
                ("vintage", self.options.vintage.as_str()),
                ("format", "json"),
            ],
        )
        .map(String::from)
        .unwrap_or_else(|_| self.options.endpoint.clone())
    }

    fn cached(&self, key: &str) -> Option<Option<Geoid>> {
        let cache = self.cache.lock().expect("cache lock");
        cache.get(key).map(|e| e.geoid.clone())
    }

    fn fetch(&self, address: &str) -> Result<Option<Geoid>, GeocodeError> {
        let url = self.request_url(address);
        let mut delay = self.options.backoff;
        let mut attempt = 1;
        loop {
            let outcome = self.transport.get(&url).and_then(|resp| match resp.status {
                200 => parse_response(&resp.body),
                429 => Err(GeocodeError::RateLimited),
                s => Err(GeocodeError::Status(s)),
            });
            match outcome {
                Err(e) if e.retryable() && attempt < self.options.max_attempts.max(1) => {
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    /// Cache first; on a miss one request (with retries), and the answer,
    /// matched or not, is cached.
    pub fn geocode_one(&self, address: &str) -> Result<GeocodeResult, GeocodeError> {
        let key = normalize_address(address);
        if key.is_empty() {
            return Err(GeocodeError::EmptyAddress);
        }
        let result = |geoid: Option<Geoid>, source| GeocodeResult {
            input: address.to_string(),
            matched: geoid.is_some(),
            match_quality: if geoid.is_some() { "Match" } else { "No_Match" }.into(),
            geoid,
            source,
        };
        if let Some(geoid) = self.cached(&key) {
            return Ok(result(geoid, Source::Cache));
        }
        if self.options.offline {
            return Ok(result(None, Source::OfflineTable));
        }
        let geoid = self.fetch(address)?;
        self.cache.lock().expect("cache lock").put(&key, geoid.clone())?;
        Ok(result(geoid, Source::Api))
    }

    /// Resolves every address with at most `limit` requests in flight.
    /// Addresses that normalize alike share one lookup; output order
    /// follows input order.
    pub fn geocode_batch(&self, addresses: &[String], limit: usize) -> Vec<Result<GeocodeResult, GeocodeError>> {
        let limit = limit.max(1);
        let mut first_of: BTreeMap<String, usize> = BTreeMap::new();
        let mut unique: Vec<usize> = Vec::new();
        for (i, a) in addresses.iter().enumerate() {
            let key = normalize_address(a);
            if let std::collections::btree_map::Entry::Vacant(e) = first_of.entry(key) {
                e.insert(i);
                unique.push(i);
            }
        }

        let slots: Vec<Mutex<Option<Result<GeocodeResult, GeocodeError>>>> =
            unique.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        thread::scope(|s| {
            for _ in 0..limit.min(unique.len()) {
                s.spawn(|| loop {
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&idx) = unique.get(k) else { break };
                    let r = self.geocode_one(&addresses[idx]);
                    *slots[k].lock().expect("slot lock") = Some(r);
                });
            }
        });
        let resolved: HashMap<usize, Result<GeocodeResult, GeocodeError>> = unique
            .iter()
            .zip(slots)
            .map(|(&i, slot)| (i, slot.into_inner().expect("slot lock").expect("every slot filled")))
            .collect();

        addresses
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let owner = first_of[&normalize_address(a)];
                resolved[&owner].clone().map(|mut r| {
                    r.input = a.clone();
                    if owner != i && r.source == Source::Api {
                        r.source = Source::Cache;
                    }
                    r
                })
            })
            .collect()
    }
}

/// Pulls `result.addressMatches[0].geographies["Census Tracts"][0].GEOID`;
/// an empty match list is a clean no-match.
pub fn parse_response(body: &str) -> Result<Option<Geoid>, GeocodeError> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| GeocodeError::ApiFormat(e.to_string()))?;
    let matches = v
        .pointer("/result/addressMatches")
        .and_then(|m| m.as_array())
        .ok_or_else(|| GeocodeError::ApiFormat("missing result.addressMatches".into()))?;
    let Some(first) = matches.first() else {
        return Ok(None);
    };
    let geoid = first
        .pointer("/geographies/Census Tracts/0/GEOID")
        .and_then(|g| g.as_str())
        .ok_or_else(|| GeocodeError::ApiFormat("match without a Census Tracts GEOID".into()))?;
    Geoid::parse(geoid)
        .map(Some)
        .map_err(|_| GeocodeError::ApiFormat(format!("GEOID {geoid:?} is not 11 digits")))
}
