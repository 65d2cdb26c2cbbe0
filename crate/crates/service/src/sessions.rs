use std::sync::{Arc, Mutex};

use indexmap::IndexMap;
use nalgebra::DVector;
use tokio::sync::Mutex as AsyncMutex;

use sosvae::workflow::Draw;

use crate::error::ApiError;

pub const DEFAULT_SESSION_CAPACITY: usize = 64;

#[derive(Debug, Clone)]
pub struct Session {
    pub draw: Draw,
    pub original: DVector<f64>,
    pub current: DVector<f64>,
}

impl Session {
    pub fn new(draw: Draw, sample: DVector<f64>) -> Self {
        Self {
            draw,
            original: sample.clone(),
            current: sample,
        }
    }
}

type Shared = Arc<AsyncMutex<Session>>;

/// Least recently used first. IDs come from a counter so a replayed request
/// sequence sees the same IDs.
pub struct SessionStore {
    capacity: usize,
    inner: Mutex<Inner>,
}

struct Inner {
    next_id: u64,
    map: IndexMap<String, Shared>,
}

impl SessionStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            inner: Mutex::new(Inner {
                next_id: 1,
                map: IndexMap::new(),
            }),
        }
    }

    pub fn insert(&self, session: Session) -> String {
        let mut inner = self.inner.lock().unwrap();
        let id = format!("s{}", inner.next_id);
        inner.next_id += 1;
        inner.map.insert(id.clone(), Arc::new(AsyncMutex::new(session)));
        while inner.map.len() > self.capacity {
            if let Some((evicted, _)) = inner.map.shift_remove_index(0) {
                tracing::debug!(session_id = %evicted, "evicted");
            }
        }
        id
    }

    /// Look up and mark as most recently used.
    pub fn get(&self, id: &str) -> Result<Shared, ApiError> {
        let mut inner = self.inner.lock().unwrap();
        let index = inner
            .map
            .get_index_of(id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown session {id:?}")))?;
        let last = inner.map.len() - 1;
        inner.map.move_index(index, last);
        Ok(inner.map[last].clone())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: &str) -> bool {
        self.inner.lock().unwrap().map.contains_key(id)
    }
}
