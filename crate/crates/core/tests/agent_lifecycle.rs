//! On-disk agent lifecycle through the public API.

use std::collections::BTreeMap;
use std::sync::Arc;

use anchorage_core::anchors::{AnchorKind, AnchorSet};
use anchorage_core::backend::{InstrumentedBackend, MockBackend, Operation};
use anchorage_core::drift::{detect_drift, take_baseline, Baseline, ProbeSet};
use anchorage_core::engine::{Engine, EngineError, EngineMode, EngineSettings};
use anchorage_core::index::MemoryIndex;
use anchorage_core::lab::measured_failure;
use anchorage_core::router::{CostParams, QueryRouter, Route, ThresholdSource};
use anchorage_core::LlmBackend;

fn engine(backend: Arc<dyn LlmBackend>) -> Engine {
    let router = QueryRouter::new(CostParams::default(), ThresholdSource::FixedHalf).unwrap();
    Engine::new(backend, router, EngineSettings::default()).unwrap()
}

fn texts() -> BTreeMap<AnchorKind, String> {
    let mut t = BTreeMap::new();
    t.insert(AnchorKind::Soul, "# SOUL\n\n- I am Ada.\n- I value precise answers.\n".to_string());
    t.insert(AnchorKind::Relations, "# RELATIONS\n\n- Sam is my user.\n".to_string());
    t.insert(
        AnchorKind::Salience,
        "# SALIENCE\n\n- the launch: HIGH importance, positive valence\n".to_string(),
    );
    t
}

#[test]
fn chat_reload_and_search_agree() {
    let root = tempfile::tempdir().unwrap();
    let e = engine(Arc::new(MockBackend::new(64)));
    let mut set = AnchorSet::create(root.path(), "ada", &texts()).unwrap();
    let mut index = MemoryIndex::new(64);
    let facts = [
        "my sister lives in Lisbon",
        "the launch moved to March",
        "Sam prefers tea over coffee",
    ];
    for f in facts {
        let a = e.answer(&mut set, &mut index, f, "s1", EngineMode::Hybrid).unwrap();
        assert_eq!(a.decision.unwrap().route, Route::Rag);
    }
    let a = e
        .answer(&mut set, &mut index, "summarize everything so far", "s1", EngineMode::Hybrid)
        .unwrap();
    assert_eq!(a.decision.unwrap().route, Route::Rlm);
    assert_eq!(a.context.provenance, (1..=6).collect::<Vec<_>>());

    let reloaded = AnchorSet::load(&root.path().join("ada")).unwrap();
    assert_eq!(reloaded.memory_log(), set.memory_log());
    for kind in AnchorKind::ALL {
        assert_eq!(reloaded.anchor_text(kind), set.anchor_text(kind), "{kind:?}");
    }
    let ids: Vec<u64> = reloaded.memory_log().iter().map(|m| m.entry_id).collect();
    assert_eq!(ids, (1..=8).collect::<Vec<_>>());

    let mut rebuilt = MemoryIndex::new(64);
    assert_eq!(e.sync_index(&reloaded, &mut rebuilt).unwrap(), 8);
    let q = "where does my sister live?";
    let live = index.search_text(e.backend().as_ref(), q, 5).unwrap();
    let fresh = rebuilt.search_text(e.backend().as_ref(), q, 5).unwrap();
    assert_eq!(live, fresh);
}

#[test]
fn generation_failure_keeps_user_turn_on_disk() {
    let root = tempfile::tempdir().unwrap();
    let backend = Arc::new(InstrumentedBackend::new(MockBackend::new(64)));
    let e = engine(backend.clone());
    let mut set = AnchorSet::create(root.path(), "ada", &texts()).unwrap();
    let mut index = MemoryIndex::new(64);
    backend.fail_after(Operation::Generate, 0);
    let err = e
        .answer(&mut set, &mut index, "hello?", "s1", EngineMode::Rag)
        .unwrap_err();
    assert!(matches!(err, EngineError::Generation { user_entry: Some(_), .. }));
    backend.heal_all();
    e.answer(&mut set, &mut index, "hello again", "s1", EngineMode::Rag).unwrap();
    let reloaded = AnchorSet::load(&root.path().join("ada")).unwrap();
    let ids: Vec<u64> = reloaded.memory_log().iter().map(|m| m.entry_id).collect();
    assert_eq!(ids, vec![1, 2, 3]);
}

#[test]
fn baseline_drift_and_failure_state_persist() {
    let root = tempfile::tempdir().unwrap();
    let e = engine(Arc::new(MockBackend::new(64)));
    let mut set = AnchorSet::create(root.path(), "ada", &texts()).unwrap();
    let index = MemoryIndex::new(64);
    let probes = ProbeSet::default();
    let dir = root.path().join("ada");

    let baseline = take_baseline(&e, &set, &index, &probes, EngineMode::Inject, 9).unwrap();
    baseline.save(&dir).unwrap();
    let loaded = Baseline::load(&dir).unwrap().unwrap();
    assert_eq!(loaded.hash.bits, baseline.hash.bits);
    let report = detect_drift(&e, &set, &index, &loaded, 16, &probes, EngineMode::Inject).unwrap();
    assert_eq!(report.hamming_distance, 0);

    let continuity =
        measured_failure(&e, &mut set, &index, AnchorKind::Soul, &loaded, &probes, EngineMode::Inject).unwrap();
    assert!((0.0..=1.0).contains(&continuity));
    assert!(set.is_enabled(AnchorKind::Soul));

    set.set_enabled(AnchorKind::Relations, false).unwrap();
    let reloaded = AnchorSet::load(&dir).unwrap();
    assert!(!reloaded.is_enabled(AnchorKind::Relations));
    assert!(reloaded.is_enabled(AnchorKind::Soul));
}

#[test]
fn fork_is_independent() {
    let root = tempfile::tempdir().unwrap();
    let e = engine(Arc::new(MockBackend::new(64)));
    let mut set = AnchorSet::create(root.path(), "ada", &texts()).unwrap();
    let mut index = MemoryIndex::new(64);
    e.answer(&mut set, &mut index, "remember the blue door", "s1", EngineMode::Rag).unwrap();
    let mut child = set.fork("ada-2").unwrap();
    let mut child_index = MemoryIndex::new(64);
    e.answer(&mut child, &mut child_index, "only the child hears this", "s1", EngineMode::Rag)
        .unwrap();
    assert_eq!(AnchorSet::load(&root.path().join("ada")).unwrap().memory_log().len(), 2);
    assert_eq!(AnchorSet::load(&root.path().join("ada-2")).unwrap().memory_log().len(), 4);
    assert!(matches!(
        set.fork("ada-2"),
        Err(anchorage_core::AnchorError::IdCollision(_))
    ));
}
