use std::io::Cursor;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anchorage::cli::chat_loop;
use anchorage::{EngineConfig, Runtime};
use anchorage_core::backend::{InstrumentedBackend, Operation};
use anchorage_core::{LlmBackend, MockBackend};
use serde_json::{json, Value};

const SOUL: &str = "# SOUL\n\n- I am Ada, a careful research assistant.\n";

struct Server {
    base: String,
    backend: Arc<InstrumentedBackend<MockBackend>>,
    _dir: tempfile::TempDir,
}

fn config(root: &Path) -> EngineConfig {
    EngineConfig {
        root_directory: root.to_path_buf(),
        ..Default::default()
    }
}

fn start_with(config_fn: impl FnOnce(&Path) -> EngineConfig) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let backend = Arc::new(InstrumentedBackend::new(MockBackend::new(64)));
    let dyn_backend: Arc<dyn LlmBackend> = backend.clone();
    let runtime = Arc::new(Runtime::with_backend(config_fn(dir.path()), dyn_backend).unwrap());
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, anchorage::api::router(runtime)).await.unwrap();
        });
    });
    let addr = rx.recv_timeout(Duration::from_secs(10)).unwrap();
    Server {
        base: format!("http://{addr}"),
        backend,
        _dir: dir,
    }
}

fn start() -> Server {
    start_with(config)
}

fn client() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

impl Server {
    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn get(&self, path: &str) -> (u16, Value) {
        let mut r = client().get(&self.url(path)).call().unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap())
    }

    fn get_text(&self, path: &str) -> (u16, String) {
        let mut r = client().get(&self.url(path)).call().unwrap();
        (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
    }

    fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let mut r = client().post(&self.url(path)).send_json(&body).unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap())
    }

    fn post_empty(&self, path: &str) -> (u16, Value) {
        let mut r = client().post(&self.url(path)).send_empty().unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap())
    }

    fn put(&self, path: &str, text: &str) -> (u16, Value) {
        let mut r = client().put(&self.url(path)).send(text).unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap())
    }

    fn create(&self, id: &str) {
        let (status, body) = self.post("/v1/agents", json!({"agent_id": id, "anchors": {"soul": SOUL}}));
        assert_eq!(status, 201, "{body}");
    }

    fn chat(&self, id: &str, message: &str) -> (u16, Value) {
        self.post(
            &format!("/v1/agents/{id}/chat"),
            json!({"session_id": "s1", "message": message}),
        )
    }
}

#[test]
fn health_and_unknown_agent() {
    let s = start();
    let (status, body) = s.get("/v1/health");
    assert_eq!(status, 200);
    assert_eq!(body["status"], "ok");
    let (status, body) = s.get("/v1/agents/nobody");
    assert_eq!(status, 404);
    assert_eq!(body["error"], "unknown_agent");
    let (status, _) = s.chat("nobody", "hello");
    assert_eq!(status, 404);
}

#[test]
fn create_list_and_duplicate() {
    let s = start();
    s.create("ada");
    let (status, _) = s.post("/v1/agents", json!({"agent_id": "ada"}));
    assert_eq!(status, 409);
    let (status, list) = s.get("/v1/agents");
    assert_eq!(status, 200);
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["agent_id"], "ada");
}

#[test]
fn focused_chat_routes_to_rag() {
    let s = start();
    s.create("ada");
    let (status, reply) = s.chat("ada", "What did I say about Lisbon?");
    assert_eq!(status, 200, "{reply}");
    assert_eq!(reply["route"], "RAG");
    assert_eq!(reply["fallback"], false);
    assert_eq!(reply["user_entry_id"], 1);
    assert_eq!(reply["agent_entry_id"], 2);
    let (_, reply) = s.chat("ada", "Summarize everything we discussed");
    assert_eq!(reply["route"], "RLM");
}

#[test]
fn concurrent_turns_on_one_agent_conflict() {
    let s = start_with(|root| EngineConfig {
        turn_wait_ms: 50,
        ..config(root)
    });
    s.create("ada");
    s.backend.with_latency(Operation::Generate, Duration::from_millis(500));
    let s = Arc::new(s);
    let handles: Vec<_> = (0..2)
        .map(|i| {
            let s = Arc::clone(&s);
            std::thread::spawn(move || s.chat("ada", &format!("question number {i}")).0)
        })
        .collect();
    let mut statuses: Vec<u16> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    statuses.sort();
    assert_eq!(statuses, vec![200, 409]);
    let (_, memory) = s.get("/v1/agents/ada/memory");
    assert_eq!(memory.as_array().unwrap().len(), 2);
}

#[test]
fn anchor_round_trip_and_write_rules() {
    let s = start();
    s.create("ada");
    let soul = "# SOUL\n\nPreamble prose.\n\n- value one\n  - nested\n* value two\n\n<!-- note -->\n";
    let (status, detail) = s.put("/v1/agents/ada/anchors/soul", soul);
    assert_eq!(status, 200, "{detail}");
    let (status, text) = s.get_text("/v1/agents/ada/anchors/SOUL.md");
    assert_eq!(status, 200);
    assert_eq!(text, soul);

    let (status, body) = s.put("/v1/agents/ada/anchors/memory", "rewritten history");
    assert_eq!(status, 403, "{body}");

    let (status, detail) = s.put(
        "/v1/agents/ada/anchors/salience",
        "# SALIENCE\n\n- the launch: HIGH importance, positive valence\n- this line has no level\n",
    );
    assert_eq!(status, 200, "{detail}");
    let items = detail["parsed_items"].as_array().unwrap();
    assert_eq!(items.len(), 2);
    assert_eq!(items[0]["salience_level"], "HIGH");
    assert!(items[1]["flags"].as_array().unwrap().contains(&json!("UNPARSED")));

    let before = s.get_text("/v1/agents/ada/anchors/identity_hash").1;
    let (status, body) = s.put("/v1/agents/ada/anchors/identity_hash", "Core values: [honesty\n");
    assert_eq!(status, 422, "{body}");
    assert_eq!(s.get_text("/v1/agents/ada/anchors/identity_hash").1, before);

    let (status, _) = s.put("/v1/agents/ada/anchors/nonsense", "x");
    assert_eq!(status, 400);
}

#[test]
fn baseline_and_drift() {
    let s = start();
    s.create("ada");
    let (status, body) = s.post_empty("/v1/agents/ada/drift");
    assert_eq!(status, 409, "{body}");
    let (status, hash) = s.post_empty("/v1/agents/ada/baseline");
    assert_eq!(status, 200, "{hash}");
    let (status, report) = s.post_empty("/v1/agents/ada/drift");
    assert_eq!(status, 200, "{report}");
    assert_eq!(report["hamming_distance"], 0);
    assert_eq!(report["drifted"], false);
    let (_, info) = s.get("/v1/agents/ada");
    assert_eq!(info["has_baseline"], true);
}

#[test]
fn disabled_memory_still_logs_turns() {
    let s = start();
    s.create("ada");
    s.chat("ada", "My sister lives in Lisbon.");
    let (status, info) = s.post("/v1/agents/ada/failures", json!({"kind": "memory", "enabled": false}));
    assert_eq!(status, 200, "{info}");
    let memory_summary = info["anchors"]
        .as_array()
        .unwrap()
        .iter()
        .find(|a| a["slug"] == "memory")
        .unwrap();
    assert_eq!(memory_summary["enabled"], false);
    let (status, reply) = s.chat("ada", "Where does my sister live?");
    assert_eq!(status, 200, "{reply}");
    assert!(reply["provenance"].as_array().unwrap().is_empty());
    let (_, memory) = s.get("/v1/agents/ada/memory");
    assert_eq!(memory.as_array().unwrap().len(), 4);

    s.post("/v1/agents/ada/failures", json!({"kind": "memory", "enabled": true}));
    let (_, reply) = s.chat("ada", "Where does my sister live?");
    assert!(!reply["provenance"].as_array().unwrap().is_empty());
}

#[test]
fn route_history_newest_first() {
    let s = start();
    s.create("ada");
    for q in ["first question", "summarize everything", "third question"] {
        assert_eq!(s.chat("ada", q).0, 200);
    }
    let (status, routes) = s.get("/v1/agents/ada/routes");
    assert_eq!(status, 200);
    let routes = routes.as_array().unwrap();
    assert_eq!(routes.len(), 3);
    let kinds: Vec<_> = routes.iter().map(|r| r["route"].as_str().unwrap()).collect();
    assert_eq!(kinds, vec!["RAG", "RLM", "RAG"]);
    assert!(routes[0]["timestamp"].as_str().unwrap() >= routes[2]["timestamp"].as_str().unwrap());
    assert!(routes[0].get("query_text").is_none());
    let (_, limited) = s.get("/v1/agents/ada/routes?limit=1");
    assert_eq!(limited.as_array().unwrap().len(), 1);
}

#[test]
fn backend_failure_is_502_with_fallback_flag() {
    let s = start();
    s.create("ada");
    s.backend.fail_after(Operation::Classify, 0);
    s.backend.fail_after(Operation::Generate, 0);
    let (status, body) = s.chat("ada", "anything at all");
    assert_eq!(status, 502, "{body}");
    assert_eq!(body["error"], "backend_failure");
    assert_eq!(body["fallback"], true);
    // Only the user turn was logged.
    let (_, memory) = s.get("/v1/agents/ada/memory");
    assert_eq!(memory.as_array().unwrap().len(), 1);

    s.backend.heal(Operation::Generate);
    let (status, reply) = s.chat("ada", "anything at all");
    assert_eq!(status, 200);
    assert_eq!(reply["route"], "RAG");
    assert_eq!(reply["fallback"], true);
}

#[test]
fn fork_copies_state() {
    let s = start();
    s.create("ada");
    s.chat("ada", "remember the blue door");
    let (status, info) = s.post("/v1/agents/ada/fork", json!({"new_agent_id": "ada2"}));
    assert_eq!(status, 201, "{info}");
    assert_eq!(info["memory_entries"], 2);
    assert_eq!(s.get_text("/v1/agents/ada2/anchors/soul").1, SOUL);
    let (_, sessions) = s.get("/v1/agents/ada2/sessions");
    assert_eq!(sessions[0]["turn_count"], 1);
}

#[test]
fn cli_and_http_agree() {
    let messages = ["Where did we park?", "summarize everything so far", "What colour was the door?"];

    let s = start();
    s.create("ada");
    let http: Vec<Value> = messages.iter().map(|m| s.chat("ada", m).1).collect();

    let dir = tempfile::tempdir().unwrap();
    let backend: Arc<dyn LlmBackend> = Arc::new(MockBackend::new(64));
    let rt = Runtime::with_backend(config(dir.path()), backend).unwrap();
    let mut texts = std::collections::BTreeMap::new();
    texts.insert(anchorage_core::AnchorKind::Soul, SOUL.to_string());
    rt.create_agent("ada", &texts).unwrap();
    let mut input = Cursor::new(messages.join("\n") + "\n");
    let mut out = Vec::new();
    let cli = chat_loop(&rt, "ada", "s1", None, &mut input, &mut out).unwrap();

    assert_eq!(cli.len(), http.len());
    for (c, h) in cli.iter().zip(&http) {
        assert_eq!(c.response, h["response"].as_str().unwrap());
        assert_eq!(serde_json::to_value(c.route).unwrap(), h["route"]);
        assert_eq!(serde_json::to_value(&c.provenance).unwrap(), h["provenance"]);
    }
}
