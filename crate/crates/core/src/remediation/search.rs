//! Search adapters: query text in, ranked result URLs out.

use std::collections::BTreeMap;
use std::path::Path;

use async_trait::async_trait;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search transport error: {0}")]
    Transport(String),
    #[error("search endpoint returned status {0}")]
    Status(u16),
    #[error("search response malformed: {0}")]
    Payload(String),
    #[error("search credential missing: set {0}")]
    MissingCredential(String),
    #[error("search fixture unreadable: {0}")]
    Fixture(String),
}

#[async_trait]
pub trait SearchProvider: Send + Sync {
    async fn search(&self, query: &str) -> Result<Vec<String>, SearchError>;
}

fn norm_query(q: &str) -> String {
    q.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// File-backed search: a JSON object mapping query text to a URL list.
/// Queries compare case- and whitespace-insensitively; `"*"` is the fallback.
#[derive(Debug, Clone, Default)]
pub struct FixtureSearch {
    results: BTreeMap<String, Vec<String>>,
}

impl FixtureSearch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, query: &str, urls: &[&str]) -> Self {
        self.results
            .insert(norm_query(query), urls.iter().map(|u| u.to_string()).collect());
        self
    }

    pub fn from_json(doc: &Value) -> Result<Self, SearchError> {
        let obj = doc
            .as_object()
            .ok_or_else(|| SearchError::Fixture("expected an object of query → URL list".into()))?;
        let mut out = Self::new();
        for (query, urls) in obj {
            let urls = urls
                .as_array()
                .ok_or_else(|| SearchError::Fixture(format!("results for {query:?} must be a list")))?
                .iter()
                .map(|u| {
                    u.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| SearchError::Fixture(format!("non-string URL for {query:?}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            out.results.insert(norm_query(query), urls);
        }
        Ok(out)
    }

    pub fn from_file(path: &Path) -> Result<Self, SearchError> {
        let text = std::fs::read_to_string(path).map_err(|e| SearchError::Fixture(e.to_string()))?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| SearchError::Fixture(e.to_string()))?;
        Self::from_json(&doc)
    }
}

#[async_trait]
impl SearchProvider for FixtureSearch {
    async fn search(&self, query: &str) -> Result<Vec<String>, SearchError> {
        Ok(self
            .results
            .get(&norm_query(query))
            .or_else(|| self.results.get("*"))
            .cloned()
            .unwrap_or_default())
    }
}

/// Generic JSON web-search endpoint.
///
/// `url_template` contains `{query}` and optionally `{key}`; the key is read
/// from `credential_env` at call time. Result URLs are read from the array
/// at `results_pointer`, field `url_field` of each item.
#[derive(Debug, Clone)]
pub struct WebSearchConfig {
    pub url_template: String,
    pub credential_env: Option<String>,
    pub results_pointer: String,
    pub url_field: String,
}

impl WebSearchConfig {
    pub fn new(url_template: impl Into<String>) -> Self {
        Self {
            url_template: url_template.into(),
            credential_env: None,
            results_pointer: "/items".into(),
            url_field: "link".into(),
        }
    }
}

pub struct WebSearch {
    client: reqwest::Client,
    config: WebSearchConfig,
}

impl WebSearch {
    pub fn new(config: WebSearchConfig, client: reqwest::Client) -> Self {
        Self { client, config }
    }

    fn request_url(&self, query: &str) -> Result<String, SearchError> {
        let encode = |s: &str| url::form_urlencoded::byte_serialize(s.as_bytes()).collect::<String>();
        let mut url = self.config.url_template.replace("{query}", &encode(query));
        if url.contains("{key}") {
            let var = self
                .config
                .credential_env
                .clone()
                .unwrap_or_else(|| "SEARCH_API_KEY".into());
            let key = std::env::var(&var).map_err(|_| SearchError::MissingCredential(var))?;
            url = url.replace("{key}", &encode(&key));
        }
        Ok(url)
    }
}

#[async_trait]
impl SearchProvider for WebSearch {
    async fn search(&self, query: &str) -> Result<Vec<String>, SearchError> {
        let url = self.request_url(query)?;
        let resp = self
            .client
            .get(url)
            .send()
            .await
            .map_err(|e| SearchError::Transport(e.without_url().to_string()))?;
        if !resp.status().is_success() {
            return Err(SearchError::Status(resp.status().as_u16()));
        }
        let doc: Value = resp.json().await.map_err(|e| SearchError::Payload(e.without_url().to_string()))?;
        let items = match doc.pointer(&self.config.results_pointer) {
            Some(Value::Array(items)) => items,
            None => return Ok(Vec::new()),
            Some(_) => return Err(SearchError::Payload(format!("{} is not a list", self.config.results_pointer))),
        };
        Ok(items
            .iter()
            .filter_map(|it| it.get(&self.config.url_field).and_then(Value::as_str))
            .map(str::to_string)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[tokio::test]
    async fn fixture_lookup_is_normalized() {
        let s = FixtureSearch::from_json(&json!({
            "Population of  Ouest department": ["http://stats.test/ouest", "http://stats.test/other"],
            "*": []
        }))
        .unwrap();
        assert_eq!(s.search("population of ouest DEPARTMENT").await.unwrap().len(), 2);
        assert!(s.search("unknown").await.unwrap().is_empty());
        assert!(FixtureSearch::from_json(&json!({"q": "x"})).is_err());
    }

    #[test]
    fn web_search_url_encodes_query_and_requires_key() {
        let mut cfg = WebSearchConfig::new("http://search.test/s?q={query}&key={key}");
        cfg.credential_env = Some("COMMITTEE_TEST_UNSET_SEARCH_KEY".into());
        let ws = WebSearch::new(cfg, reqwest::Client::new());
        assert!(matches!(ws.request_url("a b"), Err(SearchError::MissingCredential(_))));
        let ws = WebSearch::new(WebSearchConfig::new("http://search.test/s?q={query}"), reqwest::Client::new());
        assert_eq!(ws.request_url("population & size").unwrap(), "http://search.test/s?q=population+%26+size");
    }
}
