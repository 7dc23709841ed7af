//! Exact cosine top-k index over memory entries.
//!
//! Vectors are stored unit-normalized, so cosine similarity is a dot product.
//! Search is an exhaustive scan with a bounded min-heap; results are ordered
//! by descending score, ties broken by ascending entry id.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::MemoryEntry;
use crate::backend::{BackendError, LlmBackend};

pub const DEFAULT_K: usize = 5;
const SNAPSHOT_MAGIC: &[u8; 4] = b"AIDX";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("embedding failed: {0}")]
    Embedding(#[from] BackendError),
    #[error("vector has dimension {got}, index expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("snapshot I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt snapshot: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedEntry {
    pub entry_id: u64,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub entry_id: u64,
    pub score: f64,
}

impl SearchHit {
    /// Total order: higher score first, then lower entry id.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.entry_id.cmp(&other.entry_id))
    }
}

// Heap wrapper whose maximum is the *worst* hit so far.
struct Worst(SearchHit);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Worst {}
impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.rank_cmp(&other.0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemoryIndex {
    dim: usize,
    ids: Vec<u64>,
    vectors: Vec<Vec<f64>>,
    positions: HashMap<u64, usize>,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl MemoryIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, entry_id: u64) -> bool {
        self.positions.contains_key(&entry_id)
    }

    pub fn vector(&self, entry_id: u64) -> Option<&[f64]> {
        self.positions.get(&entry_id).map(|&p| self.vectors[p].as_slice())
    }

    /// Embed `entry` and make it searchable. Re-adding an id replaces its
    /// vector. On embedding failure the index is left unchanged.
    pub fn add(
        &mut self,
        backend: &dyn LlmBackend,
        entry: &MemoryEntry,
    ) -> Result<IndexedEntry, IndexError> {
        let vector = backend.embed(&entry.content)?;
        self.insert_vector(entry.entry_id, vector.clone())?;
        Ok(IndexedEntry {
            entry_id: entry.entry_id,
            vector,
        })
    }

    /// Insert a precomputed vector (normalized on the way in).
    pub fn insert_vector(&mut self, entry_id: u64, vector: Vec<f64>) -> Result<(), IndexError> {
        if vector.len() != self.dim {
            return Err(IndexError::Dimension {
                expected: self.dim,
                got: vector.len(),
            });
        }
        let vector = unit(vector);
        match self.positions.get(&entry_id) {
            Some(&pos) => self.vectors[pos] = vector,
            None => {
                self.positions.insert(entry_id, self.ids.len());
                self.ids.push(entry_id);
                self.vectors.push(vector);
            }
        }
        Ok(())
    }

    /// Exact top-`k` by cosine similarity.
    pub fn search(&self, query: &[f64], k: usize) -> Vec<SearchHit> {
        if k == 0 || self.is_empty() || query.len() != self.dim {
            return Vec::new();
        }
        let query = unit(query.to_vec());
        let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(k + 1);
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            let hit = SearchHit {
                entry_id: *id,
                score: dot(&query, v),
            };
            if heap.len() < k {
                heap.push(Worst(hit));
            } else if let Some(worst) = heap.peek() {
                if hit.rank_cmp(&worst.0) == Ordering::Less {
                    heap.pop();
                    heap.push(Worst(hit));
                }
            }
        }
        let mut hits: Vec<SearchHit> = heap.into_iter().map(|w| w.0).collect();
        hits.sort_by(SearchHit::rank_cmp);
        hits
    }

    pub fn search_text(
        &self,
        backend: &dyn LlmBackend,
        query: &str,
        k: usize,
    ) -> Result<Vec<SearchHit>, IndexError> {
        let q = backend.embed(query)?;
        Ok(self.search(&q, k))
    }

    /// Write `AIDX | version u32 | dim u32 | count u64 | (id u64, dim x f32)*`,
    /// all little-endian.
    pub fn save_snapshot(&self, path: &Path) -> Result<(), IndexError> {
        let mut buf = Vec::with_capacity(20 + self.len() * (8 + 4 * self.dim));
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            buf.extend_from_slice(&id.to_le_bytes());
            for x in v {
                buf.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<Self, IndexError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = bytes.as_slice();
        let mut take = |n: usize| -> Result<&[u8], IndexError> {
            if cursor.len() < n {
                return Err(IndexError::Corrupt("truncated".into()));
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        if take(4)? != SNAPSHOT_MAGIC {
            return Err(IndexError::Corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != SNAPSHOT_VERSION {
            return Err(IndexError::Corrupt(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut index = MemoryIndex::new(dim);
        for _ in 0..count {
            let id = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            let raw = take(4 * dim)?;
            let v = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            index.insert_vector(id, v)?;
        }
        Ok(index)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
