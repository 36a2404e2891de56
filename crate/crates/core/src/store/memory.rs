use std::collections::BTreeMap;

use parking_lot::RwLock;

use super::{RecordStore, StoreError};

/// Non-durable store for tests and simulations.
#[derive(Debug, Default)]
pub struct MemoryStore {
    records: RwLock<BTreeMap<(String, String), String>>,
}

impl RecordStore for MemoryStore {
    fn put(&self, collection: &str, key: &str, value: &str) -> Result<(), StoreError> {
        self.records.write().insert((collection.to_owned(), key.to_owned()), value.to_owned());
        Ok(())
    }

    fn delete(&self, collection: &str, key: &str) -> Result<(), StoreError> {
        self.records.write().remove(&(collection.to_owned(), key.to_owned()));
        Ok(())
    }

    fn get(&self, collection: &str, key: &str) -> Result<Option<String>, StoreError> {
        Ok(self.records.read().get(&(collection.to_owned(), key.to_owned())).cloned())
    }

    fn scan(&self, collection: &str) -> Result<Vec<(String, String)>, StoreError> {
        Ok(self
            .records
            .read()
            .range((collection.to_owned(), String::new())..)
            .take_while(|((c, _), _)| c == collection)
            .map(|((_, k), v)| (k.clone(), v.clone()))
            .collect())
    }

    fn collections(&self) -> Vec<String> {
        let mut out: Vec<String> = self.records.read().keys().map(|(c, _)| c.clone()).collect();
        out.dedup();
        out
    }
}
