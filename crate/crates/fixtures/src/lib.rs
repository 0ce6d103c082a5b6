//! Disaster-events fixture used by the end-to-end tests: a local page server
//! answering for a handful of `.test` hosts, plus the matching input CSV,
//! scripted model replies, search results and ground truth.
//!
//! Traced outcome of a default committee run (11 input rows):
//!
//! | row | page                 | outcome                                        |
//! |-----|----------------------|------------------------------------------------|
//! | r1  | news.test/haiti-quake | ACCEPT                                        |
//! | r2  | news.test/ahr-flood  | ACCEPT                                         |
//! | r3  | gov.test/disasters   | ACCEPT (directory page, yields d1)             |
//! | r4  | news.test/evia-fires | ACCEPT (month precision)                       |
//! | r5  | gov.test/kenya-drought | ACCEPT (year precision)                      |
//! | r6  | news.test/haiyan     | ACCEPT                                         |
//! | r7  | news.test/haiti-2010 | REMEDIATED by direct replacement of location   |
//! | r8  | news.test/dadu-floods | REMEDIATED by calculation, population looked up on stats.test |
//! | r9  | news.test/gossip     | REJECT NOT_RELEVANT, never fetched             |
//! | r10 | news.test/stub       | REJECT NO_MEANINGFUL_CONTENT                   |
//! | r11 | blog.test/mayfield   | REJECT UNRELIABLE_SOURCE                       |
//! | d1  | gov.test/disasters   | DISCOVERED                                     |

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde_json::{json, Value};
use tokio::sync::oneshot;

pub const SCHEMA: &str = "event_type,country,location,affected:int,date";
pub const DESCRIPTION: &str = "Natural disasters with the number of people affected";
pub const HOSTS: [&str; 4] = ["news.test", "gov.test", "blog.test", "stats.test"];
pub const INPUT_ROWS: usize = 11;

/// Rates for the scripted model so runs have a non-zero cost.
pub const PRICING_TOML: &str = "[models.scripted]\ninput_cost_per_1k = \"0.0015\"\noutput_cost_per_1k = \"0.002\"\n";

fn pages() -> HashMap<(&'static str, &'static str), &'static str> {
    HashMap::from([
        (
            ("news.test", "/haiti-quake"),
            "<html><head><title>Earthquake strikes southwestern Haiti</title></head><body>\
             <h1>Magnitude 7.2 earthquake strikes southwestern Haiti</h1>\
             <p>The earthquake struck near Les Cayes on 14 August 2021. Officials estimate that \
             650,000 people were affected across the southern peninsula.</p></body></html>",
        ),
        (
            ("news.test", "/ahr-flood"),
            "<html><body><h1>Floods devastate the Ahr valley</h1>\
             <p>Flash floods on 15 July 2021 affected about 42,000 residents of the Ahr valley \
             in Germany.</p></body></html>",
        ),
        (
            ("news.test", "/evia-fires"),
            "<html><body><h1>Wildfires on Evia</h1>\
             <p>During August 2021 wildfires on the Greek island of Evia forced roughly 3,000 \
             people from their homes.</p></body></html>",
        ),
        (
            ("news.test", "/haiyan"),
            "<html><body><h1>Typhoon Haiyan makes landfall</h1>\
             <p>Typhoon Haiyan hit Tacloban on 8 November 2013. Around 4.1 million people were \
             affected.</p></body></html>",
        ),
        (
            ("news.test", "/haiti-2010"),
            "<html><body><h1>Earthquake destroys much of Port-au-Prince</h1>\
             <p>The 12 January 2010 earthquake centred near Port-au-Prince affected 130,000 \
             people in the capital.</p></body></html>",
        ),
        (
            ("news.test", "/dadu-floods"),
            "<html><body><h1>Monsoon floods in Dadu district</h1>\
             <p>Floods that peaked on 25 August 2022 affected 12% of the district's population, \
             according to the provincial authority.</p></body></html>",
        ),
        (
            ("news.test", "/gossip"),
            "<html><body><h1>Stars gather for a Paris concert</h1>\
             <p>Two hundred guests attended.</p></body></html>",
        ),
        (
            ("news.test", "/stub"),
            "<html><body><p>Subscribe to continue reading.</p></body></html>",
        ),
        (
            ("gov.test", "/disasters"),
            "<html><body><h1>Disaster response register</h1><table>\
             <tr><th>Event</th><th>Country</th><th>Location</th><th>Affected</th><th>Date</th></tr>\
             <tr><td>Cyclone Idai</td><td>Mozambique</td><td>Beira</td><td>1,850,000</td><td>2019-03-14</td></tr>\
             <tr><td>Cyclone Freddy</td><td>Malawi</td><td>Blantyre</td><td>2,267,000</td><td>2023-03-13</td></tr>\
             </table></body></html>",
        ),
        (
            ("gov.test", "/kenya-drought"),
            "<html><body><h1>Drought bulletin</h1>\
             <p>In 2022 the drought in Turkana county affected 900,000 people.</p></body></html>",
        ),
        (
            ("blog.test", "/mayfield"),
            "<html><body><h1>My thoughts on the Mayfield tornado</h1>\
             <p>Heard that 5,000 people were affected on 10 December 2021.</p></body></html>",
        ),
        (
            ("stats.test", "/dadu"),
            "<html><body><h1>Dadu district</h1><p>Population: 4,000,000</p></body></html>",
        ),
    ])
}

#[derive(Clone)]
struct ServerState {
    pages: Arc<HashMap<(&'static str, &'static str), &'static str>>,
    delay: Duration,
    hits: Arc<AtomicUsize>,
}

async fn serve_page(State(state): State<ServerState>, headers: HeaderMap, uri: Uri) -> Response {
    state.hits.fetch_add(1, Ordering::SeqCst);
    if !state.delay.is_zero() {
        tokio::time::sleep(state.delay).await;
    }
    let host = headers
        .get(header::HOST)
        .and_then(|h| h.to_str().ok())
        .unwrap_or_default();
    let host = host.split(':').next().unwrap_or_default();
    match state.pages.iter().find(|((h, p), _)| *h == host && *p == uri.path()) {
        Some((_, body)) => ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], *body).into_response(),
        None => (StatusCode::NOT_FOUND, "not found").into_response(),
    }
}

/// Page server on 127.0.0.1 running on its own thread, so it works from
/// blocking tests as well as async ones. Stops when dropped.
pub struct PageServer {
    addr: SocketAddr,
    hits: Arc<AtomicUsize>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl PageServer {
    pub fn start() -> Self {
        Self::with_delay(Duration::ZERO)
    }

    /// Every response is held back by `delay`.
    pub fn with_delay(delay: Duration) -> Self {
        let hits = Arc::new(AtomicUsize::new(0));
        let state = ServerState {
            pages: Arc::new(pages()),
            delay,
            hits: hits.clone(),
        };
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("page server runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind page server");
                addr_tx.send(listener.local_addr().expect("local addr")).expect("report address");
                let app = Router::new().fallback(serve_page).with_state(state);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = stop_rx.await;
                    })
                    .await
                    .expect("page server");
            });
        });
        let addr = addr_rx.recv().expect("page server address");
        Self {
            addr,
            hits,
            shutdown: Some(stop_tx),
            thread: Some(thread),
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    /// Requests served so far, including 404s.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    /// Host overrides pointing every fixture host at this server.
    pub fn resolve(&self) -> Vec<(String, SocketAddr)> {
        HOSTS.iter().map(|h| (h.to_string(), self.addr)).collect()
    }

    /// `HOST=IP:PORT` arguments for the command line.
    pub fn resolve_args(&self) -> Vec<String> {
        HOSTS.iter().map(|h| format!("{h}={}", self.addr)).collect()
    }

    pub fn url(&self, host: &str, path: &str) -> String {
        url(self.port(), host, path)
    }
}

impl Drop for PageServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn url(port: u16, host: &str, path: &str) -> String {
    format!("http://{host}:{port}{path}")
}

pub fn input_csv(port: u16) -> String {
    let u = |h: &str, p: &str| url(port, h, p);
    let rows = [
        format!("Earthquake,Haiti,Les Cayes,650000,2021-08-14,{}", u("news.test", "/haiti-quake")),
        format!("Flood,Germany,Ahr valley,\"42,000\",15 July 2021,{}", u("news.test", "/ahr-flood")),
        format!("Cyclone,Mozambique,Beira,1850000,2019-03-14,{}", u("gov.test", "/disasters")),
        format!("Wildfire,Greece,Evia,3000,August 2021,{}", u("news.test", "/evia-fires")),
        format!("Drought,Kenya,Turkana,900000,2022,{}", u("gov.test", "/kenya-drought")),
        format!("Typhoon,Philippines,Tacloban,4100000,2013-11-08,{}", u("news.test", "/haiyan")),
        format!("Earthquake,Haiti,Pétion-Ville,130000,2010-01-12,{}", u("news.test", "/haiti-2010")),
        format!("Flood,Pakistan,Dadu,5000000,2022-08-25,{}", u("news.test", "/dadu-floods")),
        format!("Concert,France,Paris,200,2021-06-01,{}", u("news.test", "/gossip")),
        format!("Landslide,Nepal,Sindhupalchok,1200,2021-06-15,{}", u("news.test", "/stub")),
        format!("Tornado,United States,Mayfield,5000,2021-12-10,{}", u("blog.test", "/mayfield")),
    ];
    let mut out = String::from("event_type,country,location,affected,date,source_url\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn field_context(entity: &str, temporal: Option<&str>, negatives: &[&str]) -> Value {
    let mut v = json!({"entity_description": entity, "negative_examples": negatives});
    if let Some(t) = temporal {
        v["temporal_description"] = json!(t);
    }
    v
}

/// Scripted replies for every agent, keyed as the pipeline keys its calls.
pub fn scripted_fixture(port: u16) -> Value {
    let u = |h: &str, p: &str| url(port, h, p);
    let mut doc = json!({
        "CONTEXT_GENERATOR:context": {
            "fields": {
                "event_type": field_context("the kind of natural hazard", None, &["a human-caused incident", "a generic word like disaster"]),
                "country": field_context("the sovereign country where the event happened", None, &["a region or province", "a continent"]),
                "location": field_context("the most specific affected place named by the source", None, &["the country itself", "a place only mentioned in passing"]),
                "affected": field_context("the number of people affected by this event", None, &["deaths only", "a percentage instead of a count"]),
                "date": field_context("the day the event started", Some("the onset date, not the report date"), &["the publication date", "the end of a relief operation"])
            },
            "fallacy_examples": [
                {"scenario": "The page names Haiti and an earthquake, so any Haitian earthquake row is treated as supported.",
                 "why_wrong": "A different year or location is a different event."},
                {"scenario": "A province population is used as the affected count.",
                 "why_wrong": "Population is not the number of people affected."}
            ]
        },
        "RELEVANCY:*": {"is_relevant": true, "reason": "a natural disaster with an affected count"},
        "RELEVANCY:r9": {"is_relevant": false, "reason": "a concert is not a natural disaster"},
        "LAYOUT:*": {"layout": "ARTICLE", "rationale": "single news story"},
        "SOURCE_SCRUTINY:*": {"source_type": "unknown", "reliability": "MEDIUM"},
        "SOURCE_SCRUTINY:news.test": {"source_type": "news outlet", "reliability": "HIGH"},
        "SOURCE_SCRUTINY:gov.test": {"source_type": "government agency", "reliability": "VERY_HIGH"},
        "SOURCE_SCRUTINY:blog.test": {"source_type": "personal blog", "reliability": "LOW", "notes": "anonymous author"},
        "FACT_CHECK:*": {"has_meaningful_content": true, "supports_claims": true, "notes": "the page states the event and the affected count"},
        "FACT_CHECK:r7": {"has_meaningful_content": true, "supports_claims": false,
                          "notes": "the page places the damage in Port-au-Prince, not Pétion-Ville"},
        "FACT_CHECK:r8": {"has_meaningful_content": true, "supports_claims": false,
                          "notes": "the page gives 12% of the district population, not 5,000,000"},
        "FACT_CHECK:r10": {"has_meaningful_content": false, "supports_claims": false, "notes": "paywall stub"},
        "REMEDIATION_ANALYST:*": {"strategy": "UNFIXABLE", "justification": "the page offers no correction"},
        "REMEDIATION_ANALYST:r7": {
            "strategy": "DIRECT_REPLACEMENT",
            "replacements": {"location": "Port-au-Prince"},
            "justification": "the article names Port-au-Prince as the affected city"
        },
        "REMEDIATION_ANALYST:r8": {
            "strategy": "CALCULATION",
            "target_fields": ["affected"],
            "formula": "0.12 * population",
            "lookups": [{"operand": "population", "query": "Dadu district population"}],
            "justification": "12% of the district population was affected"
        },
        "FACT_LOOKUP_EXTRACT:*": {"found": false},
        "FACT_LOOKUP_EXTRACT:r8:population:1": {"found": true, "value": 4000000, "excerpt": "Population: 4,000,000"},
        "REMEDIATION_AUDIT:*": {"approved": true, "notes": "correction matches the source"},
        "DISCOVERY:*": {"records": []},
        "INTEGRITY:*": {"findings": []},
        "MONOLITH:*": {"verdict": "ACCEPT", "corrected_values": {}, "notes": "consistent with the page"}
    });
    let obj = doc.as_object_mut().expect("object");
    obj.insert(
        format!("LAYOUT:{}", u("gov.test", "/disasters")),
        json!({"layout": "DIRECTORY_LISTING", "rationale": "a register table"}),
    );
    obj.insert(
        format!("DISCOVERY:{}", u("gov.test", "/disasters")),
        json!({"records": [{
            "event_type": "Cyclone", "country": "Malawi", "location": "Blantyre",
            "affected": 2267000, "date": "2023-03-13"
        }]}),
    );
    doc
}

pub fn search_fixture(port: u16) -> Value {
    json!({"Dadu district population": [url(port, "stats.test", "/dadu")]})
}

/// Cleaned reference: the nine records a correct run keeps. `remediable`
/// names the input rows whose values were wrong but fixable.
pub fn ground_truth_csv() -> String {
    "event_type,country,location,affected,date,remediable\n\
     Earthquake,Haiti,Les Cayes,650000,2021-08-14,\n\
     Flood,Germany,Ahr valley,42000,2021-07-15,\n\
     Cyclone,Mozambique,Beira,1850000,2019-03-14,\n\
     Wildfire,Greece,Evia,3000,2021-08,\n\
     Drought,Kenya,Turkana,900000,2022,\n\
     Typhoon,Philippines,Tacloban,4100000,2013-11-08,\n\
     Earthquake,Haiti,Port-au-Prince,130000,2010-01-12,r7\n\
     Flood,Pakistan,Dadu,480000,2022-08-25,r8\n\
     Cyclone,Malawi,Blantyre,2267000,2023-03-13,\n"
        .to_string()
}

pub const OUTPUT_HEADER: &str = "event_type,country,location,affected,date,origin,source_url";

/// Data lines of the final CSV of a default committee run, sorted.
pub fn expected_output_lines(port: u16) -> Vec<String> {
    let u = |h: &str, p: &str| url(port, h, p);
    let mut lines = vec![
        format!("Earthquake,Haiti,Les Cayes,650000,2021-08-14,INITIAL,{}", u("news.test", "/haiti-quake")),
        format!("Flood,Germany,Ahr valley,42000,2021-07-15,INITIAL,{}", u("news.test", "/ahr-flood")),
        format!("Cyclone,Mozambique,Beira,1850000,2019-03-14,INITIAL,{}", u("gov.test", "/disasters")),
        format!("Wildfire,Greece,Evia,3000,2021-08,INITIAL,{}", u("news.test", "/evia-fires")),
        format!("Drought,Kenya,Turkana,900000,2022,INITIAL,{}", u("gov.test", "/kenya-drought")),
        format!("Typhoon,Philippines,Tacloban,4100000,2013-11-08,INITIAL,{}", u("news.test", "/haiyan")),
        format!("Earthquake,Haiti,Port-au-Prince,130000,2010-01-12,REMEDIATED,{}", u("news.test", "/haiti-2010")),
        format!("Flood,Pakistan,Dadu,480000,2022-08-25,REMEDIATED,{}", u("news.test", "/dadu-floods")),
        format!("Cyclone,Malawi,Blantyre,2267000,2023-03-13,DISCOVERED,{}", u("gov.test", "/disasters")),
    ];
    lines.sort();
    lines
}

/// Paths of the fixture files written by [`write_files`].
#[derive(Debug, Clone)]
pub struct FixtureFiles {
    pub input: PathBuf,
    pub scripted: PathBuf,
    pub search: PathBuf,
    pub ground_truth: PathBuf,
    pub pricing: PathBuf,
}

pub fn write_files(dir: &Path, port: u16) -> std::io::Result<FixtureFiles> {
    std::fs::create_dir_all(dir)?;
    let files = FixtureFiles {
        input: dir.join("input.csv"),
        scripted: dir.join("scripted.json"),
        search: dir.join("search.json"),
        ground_truth: dir.join("ground_truth.csv"),
        pricing: dir.join("pricing.toml"),
    };
    std::fs::write(&files.input, input_csv(port))?;
    std::fs::write(&files.scripted, serde_json::to_string_pretty(&scripted_fixture(port))?)?;
    std::fs::write(&files.search, serde_json::to_string_pretty(&search_fixture(port))?)?;
    std::fs::write(&files.ground_truth, ground_truth_csv())?;
    std::fs::write(&files.pricing, PRICING_TOML)?;
    Ok(files)
}

/// Sorted data lines of a CSV document, header removed.
pub fn sorted_data_lines(csv: &str) -> Vec<String> {
    let mut lines: Vec<String> = csv.lines().skip(1).map(str::to_string).collect();
    lines.sort();
    lines
}
