//! Recursive chunk-summarize-reduce synthesis over the whole memory log.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::MemoryEntry;
use crate::backend::{BackendError, LlmBackend};

pub const DEFAULT_CHUNK_SIZE: usize = 32;
pub const DEFAULT_FANIN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSummary {
    pub chunk_id: u64,
    pub covered_entry_ids: Vec<u64>,
    pub summary_text: String,
    /// 0 for leaves.
    pub level: u32,
}

/// Every level of the reduction tree, leaves first. The last level holds a
/// single summary (or nothing for an empty log).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SynthesisTrace {
    pub levels: Vec<Vec<ChunkSummary>>,
    pub summarize_calls: usize,
}

impl SynthesisTrace {
    pub fn root(&self) -> Option<&ChunkSummary> {
        self.levels.last().and_then(|l| l.first())
    }

    pub fn leaves(&self) -> &[ChunkSummary] {
        self.levels.first().map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisFailure {
    /// Levels fully summarized before the failing call.
    pub completed: Vec<Vec<ChunkSummary>>,
    pub source: BackendError,
}

/// Consecutive runs of at most `chunk_size` entries.
pub fn partition(entries: &[MemoryEntry], chunk_size: usize) -> Vec<&[MemoryEntry]> {
    assert!(chunk_size >= 1, "chunk_size must be at least 1");
    entries.chunks(chunk_size).collect()
}

fn chunk_text(entries: &[MemoryEntry]) -> String {
    entries.iter().map(MemoryEntry::render).collect()
}

/// Summarize leaves of `chunk_size` entries, then reduce groups of `fanin`
/// summaries level by level until one remains. Calls within a level run in
/// parallel; each level waits for the previous one.
pub fn synthesize(
    backend: &dyn LlmBackend,
    query: &str,
    entries: &[MemoryEntry],
    chunk_size: usize,
    fanin: usize,
) -> Result<SynthesisTrace, SynthesisFailure> {
    assert!(chunk_size >= 1, "chunk_size must be at least 1");
    assert!(fanin >= 2, "fanin must be at least 2");
    let mut trace = SynthesisTrace::default();
    if entries.is_empty() {
        return Ok(trace);
    }

    let chunks = partition(entries, chunk_size);
    let results: Vec<Result<String, BackendError>> = chunks
        .par_iter()
        .map(|c| backend.summarize(query, &chunk_text(c)))
        .collect();
    trace.summarize_calls += results.len();
    let mut next_id = 0u64;
    let mut level = Vec::with_capacity(chunks.len());
    for (chunk, result) in chunks.iter().zip(results) {
        let summary_text = result.map_err(|source| SynthesisFailure {
            completed: Vec::new(),
            source,
        })?;
        level.push(ChunkSummary {
            chunk_id: next_id,
            covered_entry_ids: chunk.iter().map(|e| e.entry_id).collect(),
            summary_text,
            level: 0,
        });
        next_id += 1;
    }
    trace.levels.push(level);

    let mut depth = 0u32;
    while trace.levels.last().map_or(0, Vec::len) > 1 {
        depth += 1;
        let below = trace.levels.last().expect("non-empty");
        let groups: Vec<&[ChunkSummary]> = below.chunks(fanin).collect();
        let results: Vec<Result<String, BackendError>> = groups
            .par_iter()
            .map(|g| {
                let text = g.iter().map(|s| s.summary_text.as_str()).collect::<Vec<_>>().join("\n");
                backend.summarize(query, &text)
            })
            .collect();
        trace.summarize_calls += results.len();
        let mut level = Vec::with_capacity(groups.len());
        for (group, result) in groups.iter().zip(results) {
            let summary_text = match result {
                Ok(t) => t,
                Err(source) => {
                    return Err(SynthesisFailure {
                        completed: trace.levels,
                        source,
                    })
                }
            };
            level.push(ChunkSummary {
                chunk_id: next_id,
                covered_entry_ids: group
                    .iter()
                    .flat_map(|s| s.covered_entry_ids.iter().copied())
                    .collect(),
                summary_text,
                level: depth,
            });
            next_id += 1;
        }
        trace.levels.push(level);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{AnchorSet, Role};
    use crate::backend::{InstrumentedBackend, MockBackend, Operation};
    use proptest::prelude::*;

    fn log(n: usize) -> Vec<MemoryEntry> {
        let mut set = AnchorSet::in_memory("r");
        for i in 0..n {
            set.append_memory(Role::User, &format!("note {i}"), "s").unwrap();
        }
        set.memory_log().to_vec()
    }

    /// Independent arithmetic: leaves plus every ceil-division reduce level.
    fn expected_calls(n: usize, chunk: usize, fanin: usize) -> usize {
        if n == 0 {
            return 0;
        }
        let mut level = n.div_ceil(chunk);
        let mut total = level;
        while level > 1 {
            level = level.div_ceil(fanin);
            total += level;
        }
        total
    }

    #[test]
    fn ten_entries_partition() {
        let entries = log(10);
        let ids: Vec<Vec<u64>> = partition(&entries, 4)
            .iter()
            .map(|c| c.iter().map(|e| e.entry_id).collect())
            .collect();
        assert_eq!(ids, vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8], vec![9, 10]]);
    }

    #[test]
    fn ten_entries_fanin_two_makes_six_calls() {
        let backend = InstrumentedBackend::new(MockBackend::new(32));
        let trace = synthesize(&backend, "q", &log(10), 4, 2).unwrap();
        let sizes: Vec<usize> = trace.levels.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2, 1]);
        assert_eq!(trace.summarize_calls, 6);
        assert_eq!(backend.counts().summarize, 6);
        assert_eq!(trace.root().unwrap().summary_text, "SUM[1,2,3,4,5,6,7,8,9,10]");
        assert_eq!(expected_calls(10, 4, 2), 6);
    }

    #[test]
    fn single_entry_single_call() {
        let trace = synthesize(&MockBackend::new(16), "q", &log(1), 32, 8).unwrap();
        assert_eq!(trace.levels.len(), 1);
        assert_eq!(trace.summarize_calls, 1);
    }

    #[test]
    fn empty_log_makes_no_calls() {
        let trace = synthesize(&MockBackend::new(16), "q", &[], 4, 2).unwrap();
        assert_eq!(trace.summarize_calls, 0);
        assert!(trace.root().is_none());
    }

    #[test]
    fn failure_reports_completed_levels() {
        let backend = InstrumentedBackend::new(MockBackend::new(16));
        backend.fail_after(Operation::Summarize, 4);
        let err = synthesize(&backend, "q", &log(10), 4, 2).unwrap_err();
        assert_eq!(err.completed.len(), 1);
        assert_eq!(err.source, BackendError::Injected(Operation::Summarize));

        backend.fail_after(Operation::Summarize, 0);
        let err = synthesize(&backend, "q", &log(10), 4, 2).unwrap_err();
        assert!(err.completed.is_empty());
    }

    #[test]
    fn call_count_matches_arithmetic_at_scale() {
        let entries = log(10_000);
        for (chunk, fanin) in [(32, 8), (7, 3), (1, 2), (10_000, 2), (333, 5)] {
            let trace = synthesize(&MockBackend::new(8), "q", &entries, chunk, fanin).unwrap();
            assert_eq!(trace.summarize_calls, expected_calls(10_000, chunk, fanin));
            assert_eq!(trace.root().unwrap().covered_entry_ids.len(), 10_000);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn leaves_partition_the_log(n in 1usize..300, chunk in 1usize..40, fanin in 2usize..6) {
            let entries = log(n);
            let trace = synthesize(&MockBackend::new(8), "q", &entries, chunk, fanin).unwrap();
            let leaf_ids: Vec<u64> = trace.leaves().iter().flat_map(|c| c.covered_entry_ids.clone()).collect();
            prop_assert_eq!(leaf_ids, (1..=n as u64).collect::<Vec<_>>());
            prop_assert!(trace.leaves().iter().all(|c| c.covered_entry_ids.len() <= chunk));
            prop_assert_eq!(trace.summarize_calls, expected_calls(n, chunk, fanin));
            prop_assert_eq!(trace.root().unwrap().covered_entry_ids.len(), n);
        }
    }
}
