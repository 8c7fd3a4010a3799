use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::Serialize;

use crate::wire::Tensor;

/// Shared key/value map. Each operation takes the lock once, so a single
/// PUT or GET is indivisible.
#[derive(Debug, Default)]
pub struct Store {
    map: RwLock<HashMap<String, Arc<Tensor>>>,
    puts: AtomicU64,
    gets: AtomicU64,
    get_misses: AtomicU64,
    bytes_in: AtomicU64,
    bytes_out: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub puts: u64,
    pub gets: u64,
    pub get_misses: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub keys: u64,
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&self, key: String, tensor: Tensor) {
        self.puts.fetch_add(1, Ordering::Relaxed);
        self.bytes_in.fetch_add(tensor.data().len() as u64, Ordering::Relaxed);
        self.map.write().unwrap().insert(key, Arc::new(tensor));
    }

    pub fn get(&self, key: &str) -> Option<Arc<Tensor>> {
        self.gets.fetch_add(1, Ordering::Relaxed);
        let found = self.map.read().unwrap().get(key).cloned();
        match &found {
            Some(t) => {
                self.bytes_out.fetch_add(t.data().len() as u64, Ordering::Relaxed);
            }
            None => {
                self.get_misses.fetch_add(1, Ordering::Relaxed);
            }
        }
        found
    }

    pub fn exists(&self, key: &str) -> bool {
        self.map.read().unwrap().contains_key(key)
    }

    /// Idempotent; returns whether a value was removed.
    pub fn delete(&self, key: &str) -> bool {
        self.map.write().unwrap().remove(key).is_some()
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> Vec<String> {
        let mut keys: Vec<_> = self.map.read().unwrap().keys().cloned().collect();
        keys.sort();
        keys
    }

    pub fn stats(&self) -> StoreStats {
        StoreStats {
            puts: self.puts.load(Ordering::Relaxed),
            gets: self.gets.load(Ordering::Relaxed),
            get_misses: self.get_misses.load(Ordering::Relaxed),
            bytes_in: self.bytes_in.load(Ordering::Relaxed),
            bytes_out: self.bytes_out.load(Ordering::Relaxed),
            keys: self.len() as u64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_delete() {
        let store = Store::new();
        let t = Tensor::vector_f64(&[1.5, -2.0]);
        store.put("a".into(), t.clone());
        assert_eq!(*store.get("a").unwrap(), t);
        assert!(store.get("b").is_none());
        assert!(store.delete("a"));
        assert!(!store.delete("a"));
        assert!(store.is_empty());
        let s = store.stats();
        assert_eq!((s.puts, s.gets, s.get_misses, s.bytes_in, s.bytes_out), (1, 2, 1, 16, 16));
    }
}
