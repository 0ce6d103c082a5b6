//! Source page retrieval, layout classification and reading hints.

mod fetch;
mod markdown;

pub use fetch::{
    snapshot_stem, write_snapshot, FetchConfig, FetchMode, FetchRecord, Fetcher, PageContent, DEFAULT_MAX_BODY_BYTES,
    DEFAULT_MAX_REDIRECTS, DEFAULT_USER_AGENT,
};
pub use markdown::html_to_markdown;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::gateway::{fit_to_budget, prompts, AgentKind, FieldKind, Gateway, GatewayError, ResponseShape};

/// Characters of page markdown shown to the layout classifier.
pub const LAYOUT_EXCERPT_CHARS: usize = 8_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LayoutClass {
    Article,
    DirectoryListing,
    SearchResults,
    Homepage,
    ErrorPage,
    Other,
}

impl LayoutClass {
    pub const ALL: [LayoutClass; 6] = [
        LayoutClass::Article,
        LayoutClass::DirectoryListing,
        LayoutClass::SearchResults,
        LayoutClass::Homepage,
        LayoutClass::ErrorPage,
        LayoutClass::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutClass::Article => "ARTICLE",
            LayoutClass::DirectoryListing => "DIRECTORY_LISTING",
            LayoutClass::SearchResults => "SEARCH_RESULTS",
            LayoutClass::Homepage => "HOMEPAGE",
            LayoutClass::ErrorPage => "ERROR_PAGE",
            LayoutClass::Other => "OTHER",
        }
    }
}

impl FromStr for LayoutClass {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace([' ', '-'], "_");
        Self::ALL.into_iter().find(|c| c.as_str() == norm).ok_or(())
    }
}

impl fmt::Display for LayoutClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn layout_shape() -> ResponseShape {
    ResponseShape::new()
        .field("layout", FieldKind::Text)
        .optional("rationale", FieldKind::Text)
}

pub fn layout_prompt(page: &PageContent) -> String {
    let labels = LayoutClass::ALL.map(LayoutClass::as_str).join(", ");
    let (excerpt, _) = fit_to_budget(&page.markdown, LAYOUT_EXCERPT_CHARS);
    prompts::render(
        prompts::LAYOUT,
        &[
            ("url", &page.final_url),
            ("labels", &labels),
            ("page", &excerpt),
            ("shape", &layout_shape().describe()),
        ],
    )
}

/// Classifies the page. Unusable pages short-circuit to ERROR_PAGE without a model call.
pub async fn classify_layout(page: &PageContent, gateway: &Gateway) -> Result<(LayoutClass, String), GatewayError> {
    if page.is_unusable() {
        let why = if page.http_status == 0 {
            "page could not be fetched".to_string()
        } else if page.http_status >= 400 {
            format!("HTTP status {}", page.http_status)
        } else {
            "page has no readable content".to_string()
        };
        return Ok((LayoutClass::ErrorPage, why));
    }
    let prompt = layout_prompt(page);
    match gateway
        .complete_structured(AgentKind::Layout, &page.url, &prompt, &layout_shape())
        .await
    {
        Ok((value, _)) => {
            let label = value["layout"].as_str().unwrap_or_default();
            let rationale = value["rationale"].as_str().unwrap_or_default().to_string();
            Ok((label.parse().unwrap_or(LayoutClass::Other), rationale))
        }
        Err(e) if e.is_parse_exhausted() => {
            Ok((LayoutClass::Other, "unparseable classification".to_string()))
        }
        Err(e) => Err(e),
    }
}

/// The fixed reading instruction injected into the fact checker's prompt.
pub fn analysis_hint(layout: LayoutClass) -> &'static str {
    match layout {
        LayoutClass::Article => {
            "The page is an article. Read the running prose closely: the facts of the data point \
             must be stated in the body text, not merely implied by the headline, captions or \
             related-story links."
        }
        LayoutClass::DirectoryListing => {
            "The page is a directory listing. Do not dismiss the page as purely navigational: \
             treat the text within list items and table rows as potential data points, and check \
             whether one of them states the data point."
        }
        LayoutClass::SearchResults => {
            "The page is a list of search results. Snippets may be truncated or refer to other \
             pages; only rely on statements that are complete within a result."
        }
        LayoutClass::Homepage => {
            "The page is a site homepage made mostly of navigation and teasers. Rely only on \
             teaser text that explicitly states the facts of the data point."
        }
        LayoutClass::ErrorPage => {
            "The page has no usable content (error, missing or blocked page); it cannot support \
             any claim."
        }
        LayoutClass::Other => {
            "The page structure is unclassified. Read all content carefully and rely only on \
             explicit statements."
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayConfig, ScriptedProvider};
    use serde_json::json;
    use std::sync::Arc;

    fn page(status: u16, md: &str) -> PageContent {
        PageContent {
            url: "https://site.test/p".into(),
            final_url: "https://site.test/p".into(),
            http_status: status,
            markdown: md.into(),
            fetched_at: chrono::Utc::now(),
            truncated: false,
        }
    }

    fn gateway(fixture: serde_json::Value) -> Gateway {
        Gateway::new(Arc::new(ScriptedProvider::from_json(&fixture).unwrap()), GatewayConfig::default())
    }

    #[tokio::test]
    async fn error_pages_short_circuit_without_a_call() {
        let gw = gateway(json!({}));
        for p in [page(500, "x"), page(404, ""), page(200, "  "), page(0, "")] {
            assert_eq!(classify_layout(&p, &gw).await.unwrap().0, LayoutClass::ErrorPage);
        }
        assert_eq!(gw.ledger().count(AgentKind::Layout), 0);
    }

    #[tokio::test]
    async fn scripted_labels_and_unknown_label() {
        let gw = gateway(json!({
            "LAYOUT:https://site.test/p": {"layout": "DIRECTORY_LISTING", "rationale": "list"}
        }));
        assert_eq!(
            classify_layout(&page(200, "- a\n- b"), &gw).await.unwrap().0,
            LayoutClass::DirectoryListing
        );
        let gw = gateway(json!({"LAYOUT:*": {"layout": "BLOG"}}));
        assert_eq!(classify_layout(&page(200, "text"), &gw).await.unwrap().0, LayoutClass::Other);
        let gw = gateway(json!({"LAYOUT:*": "I think it's an article"}));
        let (class, why) = classify_layout(&page(200, "text"), &gw).await.unwrap();
        assert_eq!((class, why.as_str()), (LayoutClass::Other, "unparseable classification"));
    }

    #[test]
    fn label_membership() {
        for c in LayoutClass::ALL {
            assert_eq!(c.as_str().parse::<LayoutClass>(), Ok(c));
        }
        assert_eq!("directory listing".parse::<LayoutClass>(), Ok(LayoutClass::DirectoryListing));
        assert!("BLOG".parse::<LayoutClass>().is_err());
    }

    #[test]
    fn hints_are_fixed_per_class() {
        let dir = analysis_hint(LayoutClass::DirectoryListing);
        assert!(dir.contains("not to dismiss the page as purely navigational") || dir.contains("Do not dismiss the page as purely navigational"));
        assert!(dir.contains("list items"));
        assert!(analysis_hint(LayoutClass::ErrorPage).contains("no usable content"));
        assert!(analysis_hint(LayoutClass::Article).contains("prose"));
        assert_eq!(analysis_hint(LayoutClass::Article), analysis_hint(LayoutClass::Article));
    }
}
