use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{CommitError, Snapshot, Store, StoreError, Transaction};

/// A transaction under construction over a snapshot, with read-your-writes.
///
/// Every key read through it lands in the read set at the snapshot version,
/// so the commit fails if anything it looked at has since changed.
pub struct Txn<'a> {
    snap: Snapshot<'a>,
    tx: Transaction,
    pending: BTreeMap<String, Option<Vec<u8>>>,
}

impl<'a> Txn<'a> {
    pub fn new(snap: Snapshot<'a>) -> Self {
        Txn {
            snap,
            tx: Transaction::new(),
            pending: BTreeMap::new(),
        }
    }

    pub fn snapshot(&self) -> Snapshot<'a> {
        self.snap
    }

    /// Adds `key` to the read set without fetching it.
    pub fn guard(&mut self, key: &str) {
        if !self.pending.contains_key(key) {
            self.tx.read(key, self.snap.version_of(key));
        }
    }

    pub fn get(&mut self, key: &str) -> Option<Vec<u8>> {
        if let Some(p) = self.pending.get(key) {
            return p.clone();
        }
        self.tx.read(key, self.snap.version_of(key));
        self.snap.get(key).map(|c| c.value)
    }

    /// Like [`Txn::get`] but leaves the read set alone.
    pub fn peek(&self, key: &str) -> Option<Vec<u8>> {
        match self.pending.get(key) {
            Some(p) => p.clone(),
            None => self.snap.get(key).map(|c| c.value),
        }
    }

    pub fn get_json<T: DeserializeOwned>(&mut self, key: &str) -> Result<Option<T>, StoreError> {
        self.get(key)
            .map(|v| {
                serde_json::from_slice(&v).map_err(|source| StoreError::Decode {
                    key: key.to_string(),
                    source,
                })
            })
            .transpose()
    }

    /// Live keys under `prefix`, including pending writes. Only the keys
    /// themselves are returned; none are added to the read set.
    pub fn keys(&self, prefix: &str) -> Vec<String> {
        let mut keys: BTreeMap<String, bool> = self
            .snap
            .scan(prefix)
            .into_iter()
            .map(|c| (c.key, true))
            .collect();
        for (k, v) in self.pending.range(prefix.to_string()..) {
            if !k.starts_with(prefix) {
                break;
            }
            keys.insert(k.clone(), v.is_some());
        }
        keys.into_iter().filter(|(_, live)| *live).map(|(k, _)| k).collect()
    }

    pub fn put_json<T: Serialize>(&mut self, key: &str, value: &T) {
        let bytes = serde_json::to_vec(value).expect("store values serialize");
        self.pending.insert(key.to_string(), Some(bytes.clone()));
        self.tx.put(key, bytes);
    }

    pub fn delete(&mut self, key: &str) {
        self.pending.insert(key.to_string(), None);
        self.tx.delete(key);
    }

    pub fn into_transaction(self) -> Transaction {
        self.tx
    }

    pub fn commit(self, store: &Store) -> Result<u64, CommitError> {
        store.commit(self.tx)
    }
}
