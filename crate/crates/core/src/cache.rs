//! Run-scoped single-flight memoization: concurrent requests for one key
//! coalesce into a single computation whose result every waiter receives.

use std::collections::HashMap;
use std::future::Future;
use std::hash::Hash;
use std::sync::{Arc, Mutex};

use tokio::sync::OnceCell;

pub struct SingleFlight<K, V> {
    cells: Mutex<HashMap<K, Arc<OnceCell<V>>>>,
}

impl<K, V> Default for SingleFlight<K, V> {
    fn default() -> Self {
        Self {
            cells: Mutex::new(HashMap::new()),
        }
    }
}

impl<K: Eq + Hash + Clone, V: Clone> SingleFlight<K, V> {
    pub fn new() -> Self {
        Self::default()
    }

    fn cell(&self, key: &K) -> Arc<OnceCell<V>> {
        let mut cells = self.cells.lock().expect("cache poisoned");
        cells.entry(key.clone()).or_default().clone()
    }

    pub async fn get_or_init<F, Fut>(&self, key: K, init: F) -> V
    where
        F: FnOnce() -> Fut,
        Fut: Future<Output = V>,
    {
        self.cell(&key).get_or_init(init).await.clone()
    }

    /// Errors are returned to the caller that hit them and are not cached.
    pub async fn get_or_try_init<E, F, Fut>(&self, key: K, init: F) -> Result<V, E>
    where
        F: FnOnce() -> Fut,
        Fut: Future<Output = Result<V, E>>,
    {
        self.cell(&key).get_or_try_init(init).await.cloned()
    }

    pub fn get(&self, key: &K) -> Option<V> {
        let cells = self.cells.lock().expect("cache poisoned");
        cells.get(key).and_then(|c| c.get().cloned())
    }

    /// Seeds `key` with an already computed value if it has none yet.
    pub fn insert_if_absent(&self, key: K, value: V) {
        let cell = self.cell(&key);
        let _ = cell.set(value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn concurrent_callers_share_one_computation() {
        let sf = Arc::new(SingleFlight::<String, usize>::new());
        let calls = Arc::new(AtomicUsize::new(0));
        let mut handles = Vec::new();
        for _ in 0..16 {
            let sf = sf.clone();
            let calls = calls.clone();
            handles.push(tokio::spawn(async move {
                sf.get_or_init("k".to_string(), || async {
                    tokio::time::sleep(Duration::from_millis(20)).await;
                    calls.fetch_add(1, Ordering::SeqCst) + 100
                })
                .await
            }));
        }
        for h in handles {
            assert_eq!(h.await.unwrap(), 100);
        }
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[tokio::test]
    async fn errors_are_not_cached() {
        let sf = SingleFlight::<u8, u8>::new();
        let r: Result<u8, &str> = sf.get_or_try_init(1, || async { Err("boom") }).await;
        assert!(r.is_err());
        let r: Result<u8, &str> = sf.get_or_try_init(1, || async { Ok(5) }).await;
        assert_eq!(r, Ok(5));
        assert_eq!(sf.get(&1), Some(5));
    }
}
