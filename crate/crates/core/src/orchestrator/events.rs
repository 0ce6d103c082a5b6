use std::fmt;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use futures::Stream;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use crate::gateway::CallUsage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RowStatus {
    Processing,
    Accept,
    Reject,
    Remediated,
    Discovered,
}

impl RowStatus {
    pub fn is_terminal(self) -> bool {
        self != RowStatus::Processing
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RowStatus::Processing => "PROCESSING",
            RowStatus::Accept => "ACCEPT",
            RowStatus::Reject => "REJECT",
            RowStatus::Remediated => "REMEDIATED",
            RowStatus::Discovered => "DISCOVERED",
        }
    }
}

impl fmt::Display for RowStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fixed stage vocabulary of the event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Queued,
    Relevancy,
    Fetch,
    Layout,
    SourceScrutiny,
    FactCheck,
    Arbiter,
    Formatter,
    RemediationAnalyst,
    FactLookup,
    RemediationAudit,
    Discovery,
    Monolith,
    Rules,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Queued => "QUEUED",
            Stage::Relevancy => "RELEVANCY",
            Stage::Fetch => "FETCH",
            Stage::Layout => "LAYOUT",
            Stage::SourceScrutiny => "SOURCE_SCRUTINY",
            Stage::FactCheck => "FACT_CHECK",
            Stage::Arbiter => "ARBITER",
            Stage::Formatter => "FORMATTER",
            Stage::RemediationAnalyst => "REMEDIATION_ANALYST",
            Stage::FactLookup => "FACT_LOOKUP",
            Stage::RemediationAudit => "REMEDIATION_AUDIT",
            Stage::Discovery => "DISCOVERY",
            Stage::Monolith => "MONOLITH",
            Stage::Rules => "RULES",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowEvent {
    /// Position in the run's event log, from 0.
    pub seq: u64,
    pub row_id: String,
    pub stage: Stage,
    pub status: RowStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage_delta: Option<CallUsage>,
}

impl RowEvent {
    /// One human-readable status line.
    pub fn status_line(&self) -> String {
        let mut line = format!("[{}] {:<6} {:<20} {}", self.seq, self.row_id, self.stage, self.status);
        if let Some(r) = &self.reason {
            line.push_str(" - ");
            line.push_str(r);
        }
        line
    }
}

#[derive(Default)]
struct Inner {
    events: Vec<RowEvent>,
    closed: bool,
}

/// Append-only, multi-subscriber event sequence for one run.
pub struct EventLog {
    inner: Mutex<Inner>,
    version: watch::Sender<u64>,
}

impl EventLog {
    pub fn new() -> Arc<Self> {
        Arc::new(Self {
            inner: Mutex::new(Inner::default()),
            version: watch::channel(0).0,
        })
    }

    pub fn push(
        &self,
        row_id: &str,
        stage: Stage,
        status: RowStatus,
        reason: Option<String>,
        usage_delta: Option<CallUsage>,
    ) -> RowEvent {
        let event = {
            let mut inner = self.inner.lock().expect("event log poisoned");
            assert!(!inner.closed, "event pushed after the log was closed");
            let event = RowEvent {
                seq: inner.events.len() as u64,
                row_id: row_id.to_string(),
                stage,
                status,
                reason,
                timestamp: Utc::now(),
                usage_delta,
            };
            inner.events.push(event.clone());
            event
        };
        self.version.send_modify(|v| *v += 1);
        event
    }

    /// Marks the end of the stream; subscribers finish after draining.
    pub fn close(&self) {
        self.inner.lock().expect("event log poisoned").closed = true;
        self.version.send_modify(|v| *v += 1);
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().expect("event log poisoned").closed
    }

    pub fn snapshot(&self) -> Vec<RowEvent> {
        self.inner.lock().expect("event log poisoned").events.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("event log poisoned").events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Replays every past event, then follows new ones until the log is closed.
    pub fn subscribe(self: &Arc<Self>) -> impl Stream<Item = RowEvent> + Send + 'static {
        let rx = self.version.subscribe();
        futures::stream::unfold((self.clone(), rx, 0usize), |(log, mut rx, next)| async move {
            loop {
                rx.borrow_and_update();
                {
                    let inner = log.inner.lock().expect("event log poisoned");
                    if let Some(e) = inner.events.get(next) {
                        let e = e.clone();
                        drop(inner);
                        return Some((e, (log, rx, next + 1)));
                    }
                    if inner.closed {
                        return None;
                    }
                }
                if rx.changed().await.is_err() {
                    return None;
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use futures::StreamExt;

    #[tokio::test]
    async fn late_and_early_subscribers_see_the_same_sequence() {
        let log = EventLog::new();
        let early = tokio::spawn({
            let s = log.subscribe();
            async move { s.collect::<Vec<_>>().await }
        });
        log.push("r1", Stage::Queued, RowStatus::Processing, None, None);
        let writer = {
            let log = log.clone();
            tokio::spawn(async move {
                for i in 0..50 {
                    log.push(&format!("r{i}"), Stage::Relevancy, RowStatus::Processing, None, None);
                    tokio::task::yield_now().await;
                }
                log.push("r1", Stage::Arbiter, RowStatus::Accept, Some("ok".into()), None);
                log.close();
            })
        };
        let mid = tokio::spawn({
            let s = log.subscribe();
            async move { s.collect::<Vec<_>>().await }
        });
        writer.await.unwrap();
        let late: Vec<RowEvent> = log.subscribe().collect().await;
        let early = early.await.unwrap();
        let mid = mid.await.unwrap();
        assert_eq!(late.len(), 52);
        assert_eq!(early, late);
        assert_eq!(mid, late);
        assert!(late.iter().enumerate().all(|(i, e)| e.seq == i as u64));
    }

    #[test]
    fn terminal_statuses() {
        assert!(!RowStatus::Processing.is_terminal());
        for s in [RowStatus::Accept, RowStatus::Reject, RowStatus::Remediated, RowStatus::Discovered] {
            assert!(s.is_terminal());
        }
        let json = serde_json::to_string(&Stage::SourceScrutiny).unwrap();
        assert_eq!(json, "\"SOURCE_SCRUTINY\"");
    }
}
