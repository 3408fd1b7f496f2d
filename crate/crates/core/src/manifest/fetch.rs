use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use super::{ImageRecord, Source};

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("record '{id}': download failed after {attempts} attempt(s): {message}")]
    Network {
        id: String,
        attempts: u32,
        message: String,
    },
    #[error("record '{id}': server returned HTTP {status}")]
    Status { id: String, status: u16 },
    #[error("record '{id}': content-length mismatch (expected {expected} bytes, received {received})")]
    LengthMismatch {
        id: String,
        expected: u64,
        received: u64,
    },
    #[error("cache directory {path} is not writable: {source}")]
    CacheDir {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug)]
pub struct FetchOptions {
    pub cache_dir: PathBuf,
    /// Total attempts per URL, including the first.
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl FetchOptions {
    pub fn new(cache_dir: impl Into<PathBuf>) -> Self {
        FetchOptions {
            cache_dir: cache_dir.into(),
            attempts: 3,
            initial_backoff: Duration::from_millis(250),
            timeout: Duration::from_secs(30),
        }
    }
}

/// Resolves a record to a local file, downloading URL sources into the cache once.
///
/// Local sources are returned unchanged. Cached downloads are keyed by record id and
/// written via a temporary file plus rename, so concurrent calls for distinct records
/// never observe partial files.
pub fn fetch_remote(record: &ImageRecord, options: &FetchOptions) -> Result<PathBuf, FetchError> {
    let url = match &record.source {
        Source::Local(path) => return Ok(path.clone()),
        Source::Url(url) => url,
    };
    let target = cache_path(&record.id, url, &options.cache_dir);
    if target.is_file() {
        return Ok(target);
    }
    std::fs::create_dir_all(&options.cache_dir).map_err(|e| FetchError::CacheDir {
        path: options.cache_dir.clone(),
        source: e,
    })?;

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(options.timeout))
        .build()
        .into();
    let attempts = options.attempts.max(1);
    let mut backoff = options.initial_backoff;
    let mut last = String::new();
    for attempt in 1..=attempts {
        match download(&agent, url, &record.id) {
            Ok(bytes) => {
                write_atomic(&options.cache_dir, &target, &bytes)?;
                return Ok(target);
            }
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Retry(message)) => {
                log::warn!("record '{}': attempt {attempt}/{attempts} failed: {message}", record.id);
                last = message;
                if attempt < attempts {
                    thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
    }
    Err(FetchError::Network {
        id: record.id.clone(),
        attempts,
        message: last,
    })
}

/// Location a URL source is cached at.
pub fn cache_path(id: &str, url: &str, cache_dir: &Path) -> PathBuf {
    cache_dir.join(format!("{id}.{}", url_extension(url)))
}

enum Attempt {
    Retry(String),
    Fatal(FetchError),
}

fn download(agent: &ureq::Agent, url: &str, id: &str) -> Result<Vec<u8>, Attempt> {
    let mut response = match agent.get(url).call() {
        Ok(r) => r,
        Err(ureq::Error::StatusCode(status)) if status >= 500 => {
            return Err(Attempt::Retry(format!("HTTP {status}")))
        }
        Err(ureq::Error::StatusCode(status)) => {
            return Err(Attempt::Fatal(FetchError::Status {
                id: id.to_owned(),
                status,
            }))
        }
        Err(e) => return Err(Attempt::Retry(e.to_string())),
    };
    let expected = response
        .headers()
        .get("content-length")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let mut bytes = Vec::new();
    response
        .body_mut()
        .as_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| Attempt::Retry(e.to_string()))?;
    if let Some(expected) = expected {
        if expected != bytes.len() as u64 {
            return Err(Attempt::Fatal(FetchError::LengthMismatch {
                id: id.to_owned(),
                expected,
                received: bytes.len() as u64,
            }));
        }
    }
    Ok(bytes)
}

fn write_atomic(dir: &Path, target: &Path, bytes: &[u8]) -> Result<(), FetchError> {
    let cache_err = |e: std::io::Error| FetchError::CacheDir {
        path: dir.to_path_buf(),
        source: e,
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(cache_err)?;
    tmp.write_all(bytes).map_err(cache_err)?;
    tmp.persist(target).map_err(|e| cache_err(e.error))?;
    Ok(())
}

fn url_extension(url: &str) -> &str {
    let path = url.split(['?', '#']).next().unwrap_or(url);
    let last = path.rsplit('/').next().unwrap_or("");
    match last.rsplit_once('.') {
        Some((stem, ext))
            if !stem.is_empty() && !ext.is_empty() && ext.len() <= 5 && ext.chars().all(|c| c.is_ascii_alphanumeric()) =>
        {
            ext
        }
        _ => "img",
    }
}
