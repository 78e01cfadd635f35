use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex, MutexGuard, PoisonError};
use std::time::{Duration, Instant};

use coad_core::dialogue::{Diagnosis, DialogueSession};
use uuid::Uuid;

/// Server-side state of one consultation.
#[derive(Debug)]
pub struct Slot {
    pub session: DialogueSession,
    pub diagnosis: Option<Diagnosis>,
    last_used: Instant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Unknown,
    Expired,
}

/// Remembered expired ids are dropped wholesale past this count; an
/// id forgotten this way reads as unknown rather than expired.
const TOMBSTONE_LIMIT: usize = 100_000;

/// Sessions keyed by random v4 ids. Each slot has its own lock, so calls on
/// one session are serialized while different sessions proceed in parallel.
#[derive(Debug)]
pub struct SessionStore {
    idle: Duration,
    live: Mutex<HashMap<Uuid, Arc<Mutex<Slot>>>>,
    expired: Mutex<HashSet<Uuid>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

impl SessionStore {
    pub fn new(idle: Duration) -> Self {
        Self {
            idle,
            live: Mutex::default(),
            expired: Mutex::default(),
        }
    }

    pub fn idle(&self) -> Duration {
        self.idle
    }

    pub fn insert(&self, session: DialogueSession, diagnosis: Option<Diagnosis>) -> Uuid {
        let id = Uuid::new_v4();
        let slot = Arc::new(Mutex::new(Slot {
            session,
            diagnosis,
            last_used: Instant::now(),
        }));
        lock(&self.live).insert(id, slot);
        id
    }

    fn retire(&self, id: Uuid) {
        lock(&self.live).remove(&id);
        let mut expired = lock(&self.expired);
        if expired.len() >= TOMBSTONE_LIMIT {
            expired.clear();
        }
        expired.insert(id);
    }

    /// Runs `f` on the session under its lock, refreshing its idle clock.
    pub fn with<R>(&self, id: Uuid, f: impl FnOnce(&mut Slot) -> R) -> Result<R, Lookup> {
        let slot = lock(&self.live).get(&id).cloned();
        let Some(slot) = slot else {
            return Err(if lock(&self.expired).contains(&id) {
                Lookup::Expired
            } else {
                Lookup::Unknown
            });
        };
        let mut guard = lock(&slot);
        if guard.last_used.elapsed() > self.idle {
            drop(guard);
            self.retire(id);
            return Err(Lookup::Expired);
        }
        guard.last_used = Instant::now();
        Ok(f(&mut guard))
    }

    /// Retires every idle session; returns how many.
    pub fn purge_expired(&self) -> usize {
        let stale: Vec<Uuid> = lock(&self.live)
            .iter()
            .filter(|(_, s)| lock(s).last_used.elapsed() > self.idle)
            .map(|(id, _)| *id)
            .collect();
        for id in &stale {
            self.retire(*id);
        }
        stale.len()
    }

    pub fn len(&self) -> usize {
        lock(&self.live).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
