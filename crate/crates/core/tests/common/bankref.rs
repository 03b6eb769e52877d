//! Explicit priority-queue simulation of the exemplar replacement policy.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use mois_core::banks::{ExemplarBank, InsertOutcome};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefEntry {
    pub lesion: usize,
    pub slice: usize,
    pub prompted: bool,
    pub time: u64,
}

#[derive(Debug, Clone)]
pub struct RefBank {
    pub k: usize,
    pub entries: Vec<RefEntry>,
    clock: u64,
}

impl RefBank {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            entries: Vec::new(),
            clock: 0,
        }
    }

    pub fn insert(&mut self, lesion: usize, slice: usize, prompted: bool) -> InsertOutcome {
        if let Some(e) = self.entries.iter_mut().find(|e| e.lesion == lesion && e.slice == slice) {
            if e.prompted && !prompted {
                return InsertOutcome::Discarded;
            }
            self.clock += 1;
            e.prompted = e.prompted || prompted;
            e.time = self.clock;
            return InsertOutcome::Updated;
        }
        if self.entries.len() < self.k {
            self.clock += 1;
            self.entries.push(RefEntry {
                lesion,
                slice,
                prompted,
                time: self.clock,
            });
            return InsertOutcome::Appended;
        }
        // Eviction queue: non-prompted entries rank first, then age.
        let mut heap: BinaryHeap<(bool, Reverse<u64>, usize)> = BinaryHeap::new();
        for (i, e) in self.entries.iter().enumerate() {
            let eligible = !e.prompted || prompted;
            if eligible {
                heap.push((!e.prompted, Reverse(e.time), i));
            }
        }
        let Some((_, _, victim)) = heap.pop() else {
            return InsertOutcome::Discarded;
        };
        if !prompted && self.entries[victim].prompted {
            return InsertOutcome::Discarded;
        }
        let old = self.entries.remove(victim);
        self.clock += 1;
        self.entries.push(RefEntry {
            lesion,
            slice,
            prompted,
            time: self.clock,
        });
        InsertOutcome::Replaced {
            lesion: old.lesion,
            slice: old.slice,
        }
    }

    /// Slice distance, then prompted first, then newest.
    pub fn context(&self, current: usize, limit: usize) -> Vec<(usize, usize)> {
        let mut v = self.entries.clone();
        v.sort_by(|a, b| {
            let da = a.slice.abs_diff(current);
            let db = b.slice.abs_diff(current);
            da.cmp(&db).then(b.prompted.cmp(&a.prompted)).then(b.time.cmp(&a.time))
        });
        v.into_iter().take(limit).map(|e| (e.lesion, e.slice)).collect()
    }

    /// `(lesion, slice, prompted, recency rank)` sorted by key.
    pub fn canonical(&self) -> Vec<(usize, usize, bool, usize)> {
        let mut v: Vec<_> = self
            .entries
            .iter()
            .map(|e| {
                let rank = self.entries.iter().filter(|o| o.time > e.time).count();
                (e.lesion, e.slice, e.prompted, rank)
            })
            .collect();
        v.sort();
        v
    }
}

pub fn canonical<P>(b: &ExemplarBank<P>) -> Vec<(usize, usize, bool, usize)> {
    let mut v: Vec<_> = b
        .entries()
        .iter()
        .map(|e| (e.lesion, e.slice, e.prompted, b.recency_rank(e)))
        .collect();
    v.sort();
    v
}

pub fn context<P>(b: &ExemplarBank<P>, current: usize, limit: usize) -> Vec<(usize, usize)> {
    b.select_context(current, limit).iter().map(|e| (e.lesion, e.slice)).collect()
}

pub type Op = (usize, usize, bool);

pub const LESIONS: usize = 2;
pub const SLICES: usize = 3;

pub fn alphabet() -> Vec<Op> {
    let mut v = Vec::new();
    for l in 0..LESIONS {
        for s in 0..SLICES {
            for p in [false, true] {
                v.push((l, s, p));
            }
        }
    }
    v
}

/// Walks every sequence up to `max_len` over the alphabet, comparing the
/// bank against the reference after each step. Returns sequences checked
/// and the first mismatch found.
pub fn exhaustive(k: usize, max_len: usize) -> (usize, Option<String>) {
    let ops = alphabet();
    let mut checked = 0usize;
    let mut first = None;
    fn walk(
        bank: &ExemplarBank<()>,
        reference: &RefBank,
        depth: usize,
        max_len: usize,
        ops: &[Op],
        trail: &mut Vec<Op>,
        checked: &mut usize,
        first: &mut Option<String>,
    ) {
        if depth == max_len || first.is_some() {
            return;
        }
        for &op in ops {
            let mut b = bank.clone();
            let mut r = reference.clone();
            let got = b.insert(op.0, op.1, op.2, ());
            let want = r.insert(op.0, op.1, op.2);
            trail.push(op);
            *checked += 1;
            let mut ok = got == want && canonical(&b) == r.canonical();
            for cur in 0..SLICES {
                for limit in 1..=r.k {
                    ok &= context(&b, cur, limit) == r.context(cur, limit);
                }
            }
            if !ok {
                *first = Some(format!("K={} seq={trail:?} got={got:?} want={want:?}", r.k));
                return;
            }
            walk(&b, &r, depth + 1, max_len, ops, trail, checked, first);
            trail.pop();
        }
    }
    walk(
        &ExemplarBank::new(k),
        &RefBank::new(k),
        0,
        max_len,
        &ops,
        &mut Vec::new(),
        &mut checked,
        &mut first,
    );
    (checked, first)
}

/// Random sequences checking capacity, key uniqueness and prompted dominance.
pub fn random_invariants(sequences: usize, seed: u64) -> Result<(), String> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for n in 0..sequences {
        let k = rng.random_range(1..=5);
        let len = rng.random_range(1..=40);
        let mut b: ExemplarBank<u32> = ExemplarBank::new(k);
        for step in 0..len {
            let (l, s, p) = (rng.random_range(0..3), rng.random_range(0..6), rng.random_bool(0.4));
            let before: Vec<(usize, usize, bool)> = b.entries().iter().map(|e| (e.lesion, e.slice, e.prompted)).collect();
            let out = b.insert(l, s, p, step as u32);
            let fail = |m: &str| Err(format!("sequence {n} step {step}: {m}"));
            if b.len() > k {
                return fail("capacity exceeded");
            }
            let mut keys: Vec<_> = b.entries().iter().map(|e| (e.lesion, e.slice)).collect();
            keys.sort();
            keys.dedup();
            if keys.len() != b.len() {
                return fail("duplicate (lesion, slice)");
            }
            let unprompted_left = b.entries().iter().any(|e| !e.prompted);
            let lost_prompted = match out {
                InsertOutcome::Replaced { lesion, slice } => before.contains(&(lesion, slice, true)),
                InsertOutcome::Discarded => p,
                _ => false,
            };
            if lost_prompted && unprompted_left {
                return fail("prompted exemplar lost while a non-prompted one remained");
            }
            if matches!(out, InsertOutcome::Discarded) && p {
                return fail("prompted insertion discarded");
            }
        }
    }
    Ok(())
}
