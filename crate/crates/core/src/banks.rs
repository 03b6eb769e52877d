//! Per-lesion memory and the shared exemplar bank.
//!
//! Both banks are generic over the stored payload so the same bookkeeping
//! serves inference (plain tensors) and training (graph variables).

use serde::{Deserialize, Serialize};

pub const DEFAULT_CAPACITY: usize = 10;
pub const DEFAULT_MEMORY: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar<P> {
    pub lesion: usize,
    pub slice: usize,
    pub prompted: bool,
    pub counter: u64,
    pub payload: P,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InsertOutcome {
    Appended,
    /// Evicted the entry for (lesion, slice).
    Replaced { lesion: usize, slice: usize },
    /// Existing entry for the same (lesion, slice) was refreshed.
    Updated,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarBank<P> {
    capacity: usize,
    entries: Vec<Exemplar<P>>,
    next_counter: u64,
}

impl<P> ExemplarBank<P> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "exemplar bank capacity must be positive");
        Self {
            capacity,
            entries: Vec::new(),
            next_counter: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in storage order.
    pub fn entries(&self) -> &[Exemplar<P>] {
        &self.entries
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn find(&self, lesion: usize, slice: usize) -> Option<&Exemplar<P>> {
        self.entries.iter().find(|e| e.lesion == lesion && e.slice == slice)
    }

    fn tick(&mut self) -> u64 {
        self.next_counter += 1;
        self.next_counter
    }

    /// Inserts or refreshes the exemplar for `(lesion, slice)`.
    ///
    /// A refresh from a prompted source promotes the entry; a non-prompted
    /// refresh of a prompted entry is ignored.
    pub fn insert(&mut self, lesion: usize, slice: usize, prompted: bool, payload: P) -> InsertOutcome {
        if let Some(i) = self.entries.iter().position(|e| e.lesion == lesion && e.slice == slice) {
            if self.entries[i].prompted && !prompted {
                return InsertOutcome::Discarded;
            }
            let counter = self.tick();
            let e = &mut self.entries[i];
            e.payload = payload;
            e.prompted |= prompted;
            e.counter = counter;
            return InsertOutcome::Updated;
        }
        let victim = if self.entries.len() < self.capacity {
            None
        } else {
            let oldest_with = |flag: bool| {
                self.entries
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.prompted == flag)
                    .min_by_key(|(_, e)| e.counter)
                    .map(|(i, _)| i)
            };
            match (prompted, oldest_with(false)) {
                (true, Some(i)) => Some(i),
                (true, None) => oldest_with(true),
                (false, Some(i)) => Some(i),
                (false, None) => return InsertOutcome::Discarded,
            }
        };
        let counter = self.tick();
        let entry = Exemplar {
            lesion,
            slice,
            prompted,
            counter,
            payload,
        };
        match victim {
            None => {
                self.entries.push(entry);
                InsertOutcome::Appended
            }
            Some(i) => {
                let old = std::mem::replace(&mut self.entries[i], entry);
                InsertOutcome::Replaced {
                    lesion: old.lesion,
                    slice: old.slice,
                }
            }
        }
    }

    /// Drops a non-prompted entry, e.g. after its slice decoded empty.
    pub fn remove_unprompted(&mut self, lesion: usize, slice: usize) -> bool {
        let before = self.entries.len();
        self.entries
            .retain(|e| !(e.lesion == lesion && e.slice == slice && !e.prompted));
        self.entries.len() != before
    }

    /// Entries ordered by slice distance, prompted first, then newest; at most `limit`.
    pub fn select_context(&self, current: usize, limit: usize) -> Vec<&Exemplar<P>> {
        let mut v: Vec<&Exemplar<P>> = self.entries.iter().collect();
        v.sort_by_key(|e| (e.slice.abs_diff(current), !e.prompted, std::cmp::Reverse(e.counter)));
        v.truncate(limit);
        v
    }

    /// 0 = most recently inserted or refreshed.
    pub fn recency_rank(&self, e: &Exemplar<P>) -> usize {
        self.entries.iter().filter(|o| o.counter > e.counter).count()
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ExemplarBank<Q> {
        ExemplarBank {
            capacity: self.capacity,
            entries: self
                .entries
                .iter()
                .map(|e| Exemplar {
                    lesion: e.lesion,
                    slice: e.slice,
                    prompted: e.prompted,
                    counter: e.counter,
                    payload: f(&e.payload),
                })
                .collect(),
            next_counter: self.next_counter,
        }
    }

    /// Rebuilds a bank from persisted parts.
    pub fn from_parts(capacity: usize, entries: Vec<Exemplar<P>>, next_counter: u64) -> Self {
        Self {
            capacity,
            entries,
            next_counter,
        }
    }

    pub fn next_counter(&self) -> u64 {
        self.next_counter
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry<P> {
    pub slice: usize,
    pub prompted: bool,
    pub payload: P,
}

/// Per-lesion memory: prompted entries are pinned, the rest is a FIFO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank<P> {
    capacity: usize,
    pinned: Vec<MemoryEntry<P>>,
    recent: Vec<MemoryEntry<P>>,
}

impl<P> MemoryBank<P> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            pinned: Vec::new(),
            recent: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: MemoryEntry<P>) {
        if entry.prompted {
            self.pinned.retain(|e| e.slice != entry.slice);
            self.pinned.push(entry);
        } else {
            self.recent.push(entry);
        }
        let room = self.capacity.saturating_sub(self.pinned.len());
        if self.recent.len() > room {
            let drop = self.recent.len() - room;
            self.recent.drain(..drop);
        }
    }

    /// Drops every non-prompted entry.
    pub fn reset_recent(&mut self) {
        self.recent.clear();
    }

    pub fn clear(&mut self) {
        self.pinned.clear();
        self.recent.clear();
    }

    pub fn len(&self) -> usize {
        self.pinned.len() + self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pinned entries first, then the FIFO from oldest to newest.
    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry<P>> {
        self.pinned.iter().chain(self.recent.iter())
    }

    pub fn pinned_slices(&self) -> Vec<usize> {
        self.pinned.iter().map(|e| e.slice).collect()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn pinned(&self) -> &[MemoryEntry<P>] {
        &self.pinned
    }

    /// Non-prompted entries, oldest first.
    pub fn recent(&self) -> &[MemoryEntry<P>] {
        &self.recent
    }

    /// Rebuilds a bank from persisted parts.
    pub fn from_parts(capacity: usize, pinned: Vec<MemoryEntry<P>>, recent: Vec<MemoryEntry<P>>) -> Self {
        Self {
            capacity,
            pinned,
            recent,
        }
    }
}
