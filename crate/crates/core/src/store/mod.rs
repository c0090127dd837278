//! Versioned transactional key-value store.
//!
//! Every successful commit advances a global version counter by one; each
//! key written by that commit takes the new version. Past versions are kept
//! so a snapshot at any watermark can be read back consistently, which the
//! reservation path relies on and audits use to replay a key's history.
//!
//! Commits are optimistic: a transaction carries the versions it observed and
//! is rejected with [`CommitError::Conflict`] if any of them has moved.

mod journal;
mod txn;

pub use txn::Txn;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use journal::Journal;

/// Observed version of a key that has never been written.
pub const ABSENT: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionedCell {
    pub key: String,
    pub value: Vec<u8>,
    pub version: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum CommitError {
    #[error("conflict on {0}")]
    Conflict(String),
    #[error("journal: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("journal: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt journal: {0}")]
    Corrupt(String),
    #[error("record {key}: {source}")]
    Decode {
        key: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Record {
    version: u64,
    value: Option<Vec<u8>>,
}

#[derive(Debug, Default)]
struct Inner {
    version: u64,
    cells: BTreeMap<String, Vec<Record>>,
}

impl Inner {
    fn record_at(&self, key: &str, watermark: u64) -> Option<&Record> {
        let hist = self.cells.get(key)?;
        let idx = hist.partition_point(|r| r.version <= watermark);
        idx.checked_sub(1).map(|i| &hist[i])
    }

    fn current_version(&self, key: &str) -> u64 {
        self.cells
            .get(key)
            .and_then(|h| h.last())
            .map_or(ABSENT, |r| r.version)
    }

    fn apply(&mut self, version: u64, writes: impl IntoIterator<Item = (String, Option<Vec<u8>>)>) {
        for (key, value) in writes {
            self.cells
                .entry(key)
                .or_default()
                .push(Record { version, value });
        }
        self.version = version;
    }
}

/// The set of reads a transaction depends on and the writes it applies.
#[derive(Debug, Clone, Default)]
pub struct Transaction {
    reads: BTreeMap<String, u64>,
    writes: BTreeMap<String, Option<Vec<u8>>>,
}

impl Transaction {
    pub fn new() -> Self {
        Self::default()
    }

    /// Requires `key` to still be at `version` when the commit is applied.
    pub fn read(&mut self, key: impl Into<String>, version: u64) -> &mut Self {
        self.reads.entry(key.into()).or_insert(version);
        self
    }

    pub fn put(&mut self, key: impl Into<String>, value: Vec<u8>) -> &mut Self {
        self.writes.insert(key.into(), Some(value));
        self
    }

    pub fn put_json<T: Serialize>(&mut self, key: impl Into<String>, value: &T) -> &mut Self {
        let bytes = serde_json::to_vec(value).expect("store values serialize");
        self.put(key, bytes)
    }

    pub fn delete(&mut self, key: impl Into<String>) -> &mut Self {
        self.writes.insert(key.into(), None);
        self
    }

    pub fn is_read_only(&self) -> bool {
        self.writes.is_empty()
    }
}

/// Reads through a fixed watermark.
#[derive(Clone, Copy)]
pub struct Snapshot<'a> {
    store: &'a Store,
    watermark: u64,
}

impl<'a> Snapshot<'a> {
    pub fn watermark(&self) -> u64 {
        self.watermark
    }

    pub fn get(&self, key: &str) -> Option<VersionedCell> {
        let inner = self.store.inner.read();
        let rec = inner.record_at(key, self.watermark)?;
        rec.value.as_ref().map(|v| VersionedCell {
            key: key.to_string(),
            value: v.clone(),
            version: rec.version,
        })
    }

    /// Version of `key` at this watermark, counting deletions; [`ABSENT`] if never written.
    pub fn version_of(&self, key: &str) -> u64 {
        let inner = self.store.inner.read();
        inner.record_at(key, self.watermark).map_or(ABSENT, |r| r.version)
    }

    pub fn get_json<T: DeserializeOwned>(&self, key: &str) -> Result<Option<(T, u64)>, StoreError> {
        match self.get(key) {
            None => Ok(None),
            Some(cell) => serde_json::from_slice(&cell.value)
                .map(|v| Some((v, cell.version)))
                .map_err(|source| StoreError::Decode {
                    key: key.to_string(),
                    source,
                }),
        }
    }

    /// All live cells under `prefix`, in key order.
    pub fn scan(&self, prefix: &str) -> Vec<VersionedCell> {
        let inner = self.store.inner.read();
        inner
            .cells
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .filter_map(|(k, _)| {
                let rec = inner.record_at(k, self.watermark)?;
                rec.value.as_ref().map(|v| VersionedCell {
                    key: k.clone(),
                    value: v.clone(),
                    version: rec.version,
                })
            })
            .collect()
    }

    pub fn scan_json<T: DeserializeOwned>(&self, prefix: &str) -> Result<Vec<(String, T, u64)>, StoreError> {
        self.scan(prefix)
            .into_iter()
            .map(|c| {
                serde_json::from_slice(&c.value)
                    .map(|v| (c.key.clone(), v, c.version))
                    .map_err(|source| StoreError::Decode { key: c.key, source })
            })
            .collect()
    }
}

/// The store. Safe to share between threads; [`Store::commit`] is the only mutation path.
#[derive(Debug, Default)]
pub struct Store {
    inner: RwLock<Inner>,
    journal: Option<Mutex<Journal>>,
}

impl Store {
    /// An in-memory store without persistence.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a journal-backed store, replaying committed history.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let (journal, commits) = Journal::open(path.as_ref())?;
        let mut inner = Inner::default();
        for (version, writes) in commits {
            if version <= inner.version {
                return Err(StoreError::Corrupt(format!(
                    "version {version} after {}",
                    inner.version
                )));
            }
            inner.apply(version, writes);
        }
        Ok(Store {
            inner: RwLock::new(inner),
            journal: Some(Mutex::new(journal)),
        })
    }

    pub fn version(&self) -> u64 {
        self.inner.read().version
    }

    pub fn snapshot(&self) -> Snapshot<'_> {
        Snapshot {
            store: self,
            watermark: self.version(),
        }
    }

    /// A snapshot at an earlier watermark. Clamped to the current version.
    pub fn snapshot_at(&self, watermark: u64) -> Snapshot<'_> {
        Snapshot {
            store: self,
            watermark: watermark.min(self.version()),
        }
    }

    /// Applies `tx` atomically. Returns the commit version, or the current
    /// version for a read-only transaction.
    pub fn commit(&self, tx: Transaction) -> Result<u64, CommitError> {
        let mut inner = self.inner.write();
        for (key, observed) in &tx.reads {
            if inner.current_version(key) != *observed {
                return Err(CommitError::Conflict(key.clone()));
            }
        }
        if tx.writes.is_empty() {
            return Ok(inner.version);
        }
        let version = inner.version + 1;
        if let Some(j) = &self.journal {
            j.lock().append(version, &tx.writes)?;
        }
        inner.apply(version, tx.writes);
        Ok(version)
    }

    /// Every recorded version of `key`, oldest first; `None` marks a deletion.
    pub fn history(&self, key: &str) -> Vec<(u64, Option<Vec<u8>>)> {
        self.inner
            .read()
            .cells
            .get(key)
            .map(|h| h.iter().map(|r| (r.version, r.value.clone())).collect())
            .unwrap_or_default()
    }

    /// Keys under `prefix` that have ever been written, live or not.
    pub fn keys_ever(&self, prefix: &str) -> Vec<String> {
        self.inner
            .read()
            .cells
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// Retry schedule for conflicting commits.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub cap: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 10,
            base: Duration::from_micros(200),
            cap: Duration::from_millis(20),
        }
    }
}

/// Outcome of one optimistic attempt.
pub enum Attempt<T, E> {
    Done(T),
    Failed(E),
    Conflict(String),
}

/// Runs `f` until it finishes without conflict or retries are exhausted,
/// sleeping a jittered exponential backoff between attempts. The last
/// conflicting key is handed to `on_exhausted`.
pub fn with_retry<T, E>(
    policy: &RetryPolicy,
    mut f: impl FnMut() -> Attempt<T, E>,
    on_exhausted: impl FnOnce(String) -> E,
) -> Result<T, E> {
    let mut rng = rand::thread_rng();
    let mut attempt = 0u32;
    loop {
        match f() {
            Attempt::Done(v) => return Ok(v),
            Attempt::Failed(e) => return Err(e),
            Attempt::Conflict(key) => {
                if attempt >= policy.max_retries {
                    return Err(on_exhausted(key));
                }
                let exp = policy.base.saturating_mul(1u32 << attempt.min(16));
                let ceiling = exp.min(policy.cap).as_micros().max(1) as u64;
                std::thread::sleep(Duration::from_micros(rng.gen_range(0..=ceiling)));
                attempt += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Arc, Barrier};

    #[test]
    fn snapshot_watermarks() {
        let s = Store::in_memory();
        assert_eq!(s.snapshot().watermark(), 0);
        for i in 0..3 {
            let mut t = Transaction::new();
            t.put(format!("k{i}"), b"v".to_vec());
            s.commit(t).unwrap();
        }
        let a = s.snapshot().watermark();
        assert!(a >= 3);
        assert_eq!(a, s.snapshot().watermark());
    }

    #[test]
    fn fresh_key_and_stale_read() {
        let s = Store::in_memory();
        let mut t = Transaction::new();
        t.put("a", b"1".to_vec());
        let v1 = s.commit(t).unwrap();
        let mut stale = Transaction::new();
        stale.read("a", ABSENT).put("a", b"2".to_vec());
        assert!(matches!(s.commit(stale), Err(CommitError::Conflict(k)) if k == "a"));
        let mut fresh = Transaction::new();
        fresh.read("a", v1).put("a", b"2".to_vec());
        assert!(s.commit(fresh).unwrap() > v1);
    }

    #[test]
    fn conflicts_apply_nothing() {
        let s = Store::in_memory();
        let mut t = Transaction::new();
        t.put("x", b"1".to_vec());
        s.commit(t).unwrap();
        let before = s.version();
        let mut bad = Transaction::new();
        bad.put("y", b"1".to_vec()).read("x", ABSENT);
        assert!(s.commit(bad).is_err());
        assert_eq!(s.version(), before);
        assert!(s.snapshot().get("y").is_none());
    }

    #[test]
    fn old_snapshots_stay_consistent() {
        let s = Store::in_memory();
        let mut t = Transaction::new();
        t.put("a", b"1".to_vec());
        let v1 = s.commit(t).unwrap();
        let mut t = Transaction::new();
        t.delete("a").put("b", b"2".to_vec());
        s.commit(t).unwrap();
        let old = s.snapshot_at(v1);
        assert_eq!(old.get("a").unwrap().value, b"1");
        assert!(old.get("b").is_none());
        let now = s.snapshot();
        assert!(now.get("a").is_none());
        assert_eq!(now.version_of("a"), v1 + 1);
        assert_eq!(s.history("a").len(), 2);
    }

    #[test]
    fn scan_prefix() {
        let s = Store::in_memory();
        assert!(s.snapshot().scan("sb/").is_empty());
        let mut t = Transaction::new();
        for k in ["sb/e/1", "sb/e/2", "sb/e/3", "sc/x", "sa"] {
            t.put(k, b"{}".to_vec());
        }
        s.commit(t).unwrap();
        let cells = s.snapshot().scan("sb/");
        assert_eq!(cells.len(), 3);
        assert!(cells.iter().all(|c| c.key.starts_with("sb/")));
    }

    #[test]
    fn same_version_race_has_one_winner() {
        let s = Arc::new(Store::in_memory());
        for trial in 0..1000 {
            let key = format!("k{trial}");
            let observed = s.snapshot().version_of(&key);
            let barrier = Arc::new(Barrier::new(2));
            let wins = Arc::new(AtomicUsize::new(0));
            let handles: Vec<_> = (0..2)
                .map(|i| {
                    let (s, barrier, wins, key) = (s.clone(), barrier.clone(), wins.clone(), key.clone());
                    std::thread::spawn(move || {
                        let mut t = Transaction::new();
                        t.read(key.clone(), observed).put(key, vec![i]);
                        barrier.wait();
                        if s.commit(t).is_ok() {
                            wins.fetch_add(1, Ordering::SeqCst);
                        }
                    })
                })
                .collect();
            for h in handles {
                h.join().unwrap();
            }
            assert_eq!(wins.load(Ordering::SeqCst), 1, "trial {trial}");
        }
    }

    #[test]
    fn bank_transfers_conserve_total() {
        const ACCOUNTS: usize = 8;
        let s = Arc::new(Store::in_memory());
        let mut t = Transaction::new();
        for i in 0..ACCOUNTS {
            t.put_json(format!("acct/{i}"), &100i64);
        }
        s.commit(t).unwrap();
        let handles: Vec<_> = (0..8)
            .map(|w| {
                let s = s.clone();
                std::thread::spawn(move || {
                    let mut rng = rand::thread_rng();
                    for _ in 0..300 {
                        let a = rng.gen_range(0..ACCOUNTS);
                        let b = (a + 1 + rng.gen_range(0..ACCOUNTS - 1)) % ACCOUNTS;
                        let policy = RetryPolicy {
                            max_retries: 1000,
                            ..RetryPolicy::default()
                        };
                        with_retry(
                            &policy,
                            || {
                                let snap = s.snapshot();
                                let (ka, kb) = (format!("acct/{a}"), format!("acct/{b}"));
                                let (va, xa) = snap.get_json::<i64>(&ka).unwrap().unwrap();
                                let (vb, xb) = snap.get_json::<i64>(&kb).unwrap().unwrap();
                                let amount = (w as i64 % 5) + 1;
                                let mut t = Transaction::new();
                                t.read(ka.clone(), xa).read(kb.clone(), xb);
                                t.put_json(ka, &(va - amount)).put_json(kb, &(vb + amount));
                                match s.commit(t) {
                                    Ok(_) => Attempt::Done(()),
                                    Err(CommitError::Conflict(k)) => Attempt::Conflict(k),
                                    Err(e) => Attempt::Failed(e.to_string()),
                                }
                            },
                            |k| k,
                        )
                        .unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let snap = s.snapshot();
        let total: i64 = snap
            .scan_json::<i64>("acct/")
            .unwrap()
            .into_iter()
            .map(|(_, v, _)| v)
            .sum();
        assert_eq!(total, 100 * ACCOUNTS as i64);
    }

    #[test]
    fn journal_restores_watermark() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.journal");
        let (watermark, history) = {
            let s = Store::open(&path).unwrap();
            for i in 0..5u8 {
                let mut t = Transaction::new();
                t.put("a", vec![i]).put(format!("k{i}"), vec![i]);
                if i == 3 {
                    t.delete("k1");
                }
                s.commit(t).unwrap();
            }
            (s.version(), s.history("a"))
        };
        let s = Store::open(&path).unwrap();
        assert_eq!(s.version(), watermark);
        assert_eq!(s.history("a"), history);
        assert!(s.snapshot().get("k1").is_none());
        assert_eq!(s.snapshot().get("k4").unwrap().value, vec![4]);
        let mut t = Transaction::new();
        t.put("z", vec![]);
        assert_eq!(s.commit(t).unwrap(), watermark + 1);
        drop(s);
        assert_eq!(Store::open(&path).unwrap().version(), watermark + 1);
    }

    #[test]
    fn truncated_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j");
        {
            let s = Store::open(&path).unwrap();
            for i in 0..3u8 {
                let mut t = Transaction::new();
                t.put("a", vec![i]);
                s.commit(t).unwrap();
            }
        }
        let len = std::fs::metadata(&path).unwrap().len();
        let f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 3).unwrap();
        let s = Store::open(&path).unwrap();
        assert_eq!(s.version(), 2);
    }
}
