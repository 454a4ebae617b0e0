//! Server-side store of task-adaptive weights shared between clients.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::KbItem;

#[derive(Debug, Clone)]
pub struct KbEntry {
    pub item: Arc<KbItem>,
    /// Round in which the entry was stored.
    pub added_round: u64,
}

/// Entries keyed by `(origin client, origin task)`. Entries are immutable
/// once stored; clients receive shared handles.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    entries: BTreeMap<(u32, u32), KbEntry>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, item: KbItem, round: u64) -> Result<()> {
        let key = (item.origin_client(), item.origin_task());
        if self.entries.contains_key(&key) {
            return Err(Error::Protocol(format!(
                "knowledge base already holds client {} task {}",
                key.0, key.1
            )));
        }
        self.entries.insert(
            key,
            KbEntry {
                item: Arc::new(item),
                added_round: round,
            },
        );
        Ok(())
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn get(&self, client: u32, task: u32) -> Option<&KbEntry> {
        self.entries.get(&(client, task))
    }

    /// Entries in key order.
    pub fn entries(&self) -> impl Iterator<Item = &KbEntry> {
        self.entries.values()
    }

    /// Uniform sample without replacement of entries not authored by
    /// `client`, returned in key order. `size = None` takes all of them.
    pub fn sample<R: Rng>(&self, client: u32, size: Option<usize>, rng: &mut R) -> Vec<Arc<KbItem>> {
        let foreign: Vec<&KbEntry> = self
            .entries
            .iter()
            .filter(|((c, _), _)| *c != client)
            .map(|(_, e)| e)
            .collect();
        let k = size.unwrap_or(foreign.len()).min(foreign.len());
        if k == foreign.len() {
            return foreign.into_iter().map(|e| e.item.clone()).collect();
        }
        let mut picks = rand::seq::index::sample(rng, foreign.len(), k).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| foreign[i].item.clone()).collect()
    }
}
