//! Classic page replacement over a reference string, for comparing the
//! proxy's age-based policy against FIFO, LRU and Belady's MIN.

use std::collections::{HashMap, HashSet, VecDeque};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::analytics::transcript::Transcript;
use crate::pagestore::FaultKey;
use crate::policy::PolicyConfig;
use crate::wire::BlockKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Replacement {
    Fifo,
    Lru,
    /// Evict the page whose next use is furthest away.
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SimResult {
    pub references: u64,
    /// Misses on pages seen before (cold misses excluded).
    pub faults: u64,
    pub cold_misses: u64,
}

pub fn simulate<K: Eq + Hash + Clone>(refs: &[K], capacity: usize, policy: Replacement) -> SimResult {
    let mut res = SimResult {
        references: refs.len() as u64,
        ..Default::default()
    };
    if capacity == 0 {
        let mut seen = HashSet::new();
        for k in refs {
            if seen.insert(k) {
                res.cold_misses += 1;
            } else {
                res.faults += 1;
            }
        }
        return res;
    }
    // Next-use position of every reference, for MIN.
    let mut next_use = vec![usize::MAX; refs.len()];
    let mut last: HashMap<&K, usize> = HashMap::new();
    for (i, k) in refs.iter().enumerate().rev() {
        if let Some(&j) = last.get(k) {
            next_use[i] = j;
        }
        last.insert(k, i);
    }
    let mut resident: HashMap<K, usize> = HashMap::new(); // value: recency stamp or next use
    let mut fifo: VecDeque<K> = VecDeque::new();
    let mut seen: HashSet<K> = HashSet::new();
    for (i, k) in refs.iter().enumerate() {
        if resident.contains_key(k) {
            match policy {
                Replacement::Lru => {
                    resident.insert(k.clone(), i);
                }
                Replacement::Min => {
                    resident.insert(k.clone(), next_use[i]);
                }
                Replacement::Fifo => {}
            }
            continue;
        }
        if seen.insert(k.clone()) {
            res.cold_misses += 1;
        } else {
            res.faults += 1;
        }
        if resident.len() == capacity {
            let victim = match policy {
                Replacement::Fifo => fifo.pop_front(),
                Replacement::Lru => resident.iter().min_by_key(|(_, &s)| s).map(|(k, _)| k.clone()),
                Replacement::Min => resident.iter().max_by_key(|(_, &s)| s).map(|(k, _)| k.clone()),
            };
            if let Some(v) = victim {
                resident.remove(&v);
            }
        }
        let stamp = match policy {
            Replacement::Min => next_use[i],
            _ => i,
        };
        resident.insert(k.clone(), stamp);
        if policy == Replacement::Fifo {
            fifo.push_back(k.clone());
        }
    }
    res
}

/// Fault keys of a transcript's tool results, in order.
pub fn reference_string(t: &Transcript, cfg: &PolicyConfig) -> Vec<FaultKey> {
    let mut calls = HashMap::new();
    let mut out = Vec::new();
    for r in &t.records {
        for b in &r.blocks {
            match b.kind() {
                BlockKind::ToolUse => {
                    if let (Some(id), Some(name)) = (b.tool_use_id(), b.tool_name()) {
                        calls.insert(id.to_string(), FaultKey::from_args(name, b.args().unwrap_or(&serde_json::Value::Null), cfg));
                    }
                }
                BlockKind::ToolResult => {
                    if let Some(k) = b.tool_use_id().and_then(|id| calls.get(id)) {
                        out.push(k.clone());
                    }
                }
                _ => {}
            }
        }
    }
    out
}
