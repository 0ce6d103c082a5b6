use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{debug, warn};

use super::markdown::html_to_markdown;
use crate::cache::SingleFlight;

pub const DEFAULT_MAX_BODY_BYTES: usize = 2 * 1024 * 1024;
pub const DEFAULT_MAX_REDIRECTS: usize = 5;
pub const DEFAULT_USER_AGENT: &str = concat!("committee/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageContent {
    pub url: String,
    pub final_url: String,
    /// HTTP status, or 0 for transport failure.
    pub http_status: u16,
    pub markdown: String,
    pub fetched_at: DateTime<Utc>,
    pub truncated: bool,
}

impl PageContent {
    pub fn failed(url: &str) -> Self {
        Self {
            url: url.to_string(),
            final_url: url.to_string(),
            http_status: 0,
            markdown: String::new(),
            fetched_at: Utc::now(),
            truncated: false,
        }
    }

    /// Status ≥ 400, transport failure, or nothing readable.
    pub fn is_unusable(&self) -> bool {
        self.http_status == 0 || self.http_status >= 400 || self.markdown.trim().is_empty()
    }
}

#[derive(Debug, Clone)]
pub enum FetchMode {
    Live,
    /// Serve pages from a snapshot directory written by an earlier run.
    Replay(PathBuf),
}

#[derive(Debug, Clone)]
pub struct FetchConfig {
    pub user_agent: String,
    /// Minimum spacing between request starts to one host.
    pub politeness_delay: Duration,
    pub max_redirects: usize,
    pub max_body_bytes: usize,
    pub request_timeout: Duration,
    /// Host → address overrides (bypasses DNS for those hosts).
    pub resolve: Vec<(String, SocketAddr)>,
    pub mode: FetchMode,
    /// Where raw HTML and converted markdown are written, if anywhere.
    pub snapshot_dir: Option<PathBuf>,
}

impl Default for FetchConfig {
    fn default() -> Self {
        Self {
            user_agent: DEFAULT_USER_AGENT.to_string(),
            politeness_delay: Duration::from_secs(1),
            max_redirects: DEFAULT_MAX_REDIRECTS,
            max_body_bytes: DEFAULT_MAX_BODY_BYTES,
            request_timeout: Duration::from_secs(30),
            resolve: Vec::new(),
            mode: FetchMode::Live,
            snapshot_dir: None,
        }
    }
}

/// One actual network (or replay) fetch, as recorded in the transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchRecord {
    pub url: String,
    pub final_url: String,
    pub http_status: u16,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotMeta {
    url: String,
    final_url: String,
    http_status: u16,
    truncated: bool,
    fetched_at: DateTime<Utc>,
}

/// Run-scoped page fetcher with per-URL single-flight caching and per-host politeness.
pub struct Fetcher {
    client: reqwest::Client,
    config: FetchConfig,
    pages: SingleFlight<String, Arc<PageContent>>,
    hosts: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Option<Instant>>>>>,
    transcript: Mutex<Vec<FetchRecord>>,
}

pub fn snapshot_stem(url: &str) -> String {
    let digest = Sha256::digest(url.as_bytes());
    hex::encode(&digest[..12])
}

impl Fetcher {
    pub fn new(config: FetchConfig) -> Self {
        let mut builder = reqwest::Client::builder()
            .user_agent(config.user_agent.clone())
            .redirect(reqwest::redirect::Policy::limited(config.max_redirects))
            .timeout(config.request_timeout);
        for (host, addr) in &config.resolve {
            builder = builder.resolve(host, *addr);
        }
        // Overridden hosts are local fixtures; never route them through a proxy.
        if !config.resolve.is_empty() {
            builder = builder.no_proxy();
        }
        let client = builder.build().expect("http client configuration");
        Self {
            client,
            config,
            pages: SingleFlight::new(),
            hosts: Mutex::new(HashMap::new()),
            transcript: Mutex::new(Vec::new()),
        }
    }

    pub fn config(&self) -> &FetchConfig {
        &self.config
    }

    /// Fetches `url` once per run; failures are encoded in the returned page.
    pub async fn fetch_page(&self, url: &str) -> Arc<PageContent> {
        let page = self
            .pages
            .get_or_init(url.to_string(), || async { Arc::new(self.fetch_uncached(url).await) })
            .await;
        if page.final_url != url {
            self.pages.insert_if_absent(page.final_url.clone(), page.clone());
        }
        page
    }

    pub fn transcript(&self) -> Vec<FetchRecord> {
        self.transcript.lock().expect("transcript poisoned").clone()
    }

    pub fn fetch_count(&self) -> usize {
        self.transcript.lock().expect("transcript poisoned").len()
    }

    async fn fetch_uncached(&self, url: &str) -> PageContent {
        let (page, raw) = match &self.config.mode {
            FetchMode::Live => self.fetch_live(url).await,
            FetchMode::Replay(dir) => (replay(dir, url), None),
        };
        self.transcript.lock().expect("transcript poisoned").push(FetchRecord {
            url: page.url.clone(),
            final_url: page.final_url.clone(),
            http_status: page.http_status,
        });
        if let (Some(dir), FetchMode::Live) = (&self.config.snapshot_dir, &self.config.mode) {
            if let Err(e) = write_snapshot(dir, &page, raw.as_deref()) {
                warn!(url, error = %e, "failed to write page snapshot");
            }
        }
        page
    }

    async fn wait_for_host(&self, host: &str) {
        if self.config.politeness_delay.is_zero() {
            return;
        }
        let slot = {
            let mut hosts = self.hosts.lock().expect("hosts poisoned");
            hosts.entry(host.to_string()).or_default().clone()
        };
        let mut last = slot.lock().await;
        if let Some(prev) = *last {
            let ready = prev + self.config.politeness_delay;
            let now = Instant::now();
            if ready > now {
                tokio::time::sleep(ready - now).await;
            }
        }
        *last = Some(Instant::now());
    }

    async fn fetch_live(&self, url: &str) -> (PageContent, Option<String>) {
        let Ok(parsed) = url::Url::parse(url) else {
            return (PageContent::failed(url), None);
        };
        if let Some(host) = parsed.host_str() {
            self.wait_for_host(host).await;
        }
        debug!(url, "fetching");
        let mut resp = match self.client.get(parsed).send().await {
            Ok(r) => r,
            Err(e) => {
                debug!(url, error = %e, "fetch failed");
                return (PageContent::failed(url), None);
            }
        };
        let status = resp.status().as_u16();
        let final_url = resp.url().to_string();
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_ascii_lowercase);

        let mut body = Vec::new();
        let mut truncated = false;
        loop {
            match resp.chunk().await {
                Ok(Some(chunk)) => {
                    let room = self.config.max_body_bytes - body.len();
                    if chunk.len() > room {
                        body.extend_from_slice(&chunk[..room]);
                        truncated = true;
                        break;
                    }
                    body.extend_from_slice(&chunk);
                }
                Ok(None) => break,
                Err(_) => {
                    if body.is_empty() {
                        return (PageContent::failed(url), None);
                    }
                    truncated = true;
                    break;
                }
            }
        }
        let html = String::from_utf8_lossy(&body).into_owned();
        let is_html = match &content_type {
            Some(ct) => ct.contains("html"),
            None => html.trim_start().starts_with('<'),
        };
        let markdown = if status < 400 && is_html {
            html_to_markdown(&html)
        } else {
            String::new()
        };
        (
            PageContent {
                url: url.to_string(),
                final_url,
                http_status: status,
                markdown,
                fetched_at: Utc::now(),
                truncated,
            },
            Some(html),
        )
    }
}

/// Writes `page` (and the raw HTML, if any) in the layout replay mode reads.
pub fn write_snapshot(dir: &Path, page: &PageContent, raw: Option<&str>) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let stem = snapshot_stem(&page.url);
    if let Some(raw) = raw {
        std::fs::write(dir.join(format!("{stem}.html")), raw)?;
    }
    std::fs::write(dir.join(format!("{stem}.md")), &page.markdown)?;
    let meta = SnapshotMeta {
        url: page.url.clone(),
        final_url: page.final_url.clone(),
        http_status: page.http_status,
        truncated: page.truncated,
        fetched_at: page.fetched_at,
    };
    std::fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_vec_pretty(&meta).map_err(std::io::Error::other)?,
    )
}

fn replay(dir: &Path, url: &str) -> PageContent {
    let stem = snapshot_stem(url);
    let meta: Option<SnapshotMeta> = std::fs::read(dir.join(format!("{stem}.json")))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    let Some(meta) = meta else {
        return PageContent::failed(url);
    };
    let markdown = std::fs::read_to_string(dir.join(format!("{stem}.md"))).unwrap_or_default();
    PageContent {
        url: meta.url,
        final_url: meta.final_url,
        http_status: meta.http_status,
        markdown,
        fetched_at: meta.fetched_at,
        truncated: meta.truncated,
    }
}
