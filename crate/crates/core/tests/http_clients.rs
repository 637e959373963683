mod common;

use std::sync::Arc;
use std::time::Duration;

use serde_json::json;

use mortar_core::answerability::annotate;
use mortar_core::chat::{ChatBackend, ChatClientConfig, ChatMessage, ChatRequest, HttpChatClient};
use mortar_core::coref::{Coref, CoreferenceClient, HttpCoref};
use mortar_core::error::TransportError;
use mortar_core::extract::Extractor;
use mortar_core::graph::InfoGraph;
use mortar_core::perturb::PerturbedDialogue;
use mortar_core::scoring::{EmbeddingClient, HttpEmbedder, Scorer};
use mortar_core::sidecar;
use mortar_core::sut::{Harness, HttpSut, DEFAULT_SYSTEM_INSTRUCTIONS};

use common::server::{chat_reply, TestServer};
use common::{tea_dataset, tea_extractor};

const T: Duration = Duration::from_secs(5);

fn client(url: &str, retries: u32) -> HttpChatClient {
    let mut c = ChatClientConfig::new(url, "test-model");
    c.max_retries = retries;
    c.backoff = Duration::from_millis(5);
    c.timeout = T;
    c.api_key = Some("k123".into());
    HttpChatClient::new(c).unwrap()
}

fn request(text: &str) -> ChatRequest {
    ChatRequest {
        purpose: "test".into(),
        messages: vec![ChatMessage::system("be brief"), ChatMessage::user(text)],
    }
}

#[test]
fn chat_completion_wire_format() {
    let server = TestServer::start(|_, _| (200, chat_reply("Paris")));
    let out = client(&format!("{}/", server.url), 0).complete(&request("capital?")).unwrap();
    assert_eq!(out, "Paris");
    let seen = server.requests();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].method, "POST");
    assert_eq!(seen[0].path, "/chat/completions");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer k123"));
    assert_eq!(seen[0].body["model"], "test-model");
    assert_eq!(seen[0].body["temperature"], 0.0);
    assert_eq!(seen[0].body["messages"][0], json!({"role": "system", "content": "be brief"}));
    assert_eq!(seen[0].body["messages"][1], json!({"role": "user", "content": "capital?"}));
}

#[test]
fn chat_retries_server_errors_then_succeeds() {
    let server = TestServer::start(|n, _| if n < 2 { (503, json!({})) } else { (200, chat_reply("ok")) });
    assert_eq!(client(&server.url, 2).complete(&request("q")).unwrap(), "ok");
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn chat_gives_up_after_retry_budget() {
    let server = TestServer::start(|_, _| (500, json!({"error": "down"})));
    let err = client(&server.url, 1).complete(&request("q")).unwrap_err();
    assert!(matches!(err, TransportError::Status { status: 500, .. }));
    assert_eq!(server.requests().len(), 2);
}

#[test]
fn chat_does_not_retry_client_errors() {
    let server = TestServer::start(|_, _| (400, json!({"error": "bad"})));
    let err = client(&server.url, 3).complete(&request("q")).unwrap_err();
    assert!(matches!(err, TransportError::Status { status: 400, .. }));
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn chat_rejects_reply_without_content() {
    let server = TestServer::start(|_, _| (200, json!({"choices": []})));
    let err = client(&server.url, 0).complete(&request("q")).unwrap_err();
    assert!(matches!(err, TransportError::Malformed(_)));
}

#[test]
fn http_sut_receives_instructions_history_and_question() {
    let server = TestServer::start(|_, req| {
        let n = req.body["messages"].as_array().unwrap().len();
        (200, chat_reply(&format!("answer {n}")))
    });
    let sut = HttpSut::new(client(&server.url, 0));
    let d = tea_dataset().dialogues[0].clone();
    let run = Harness::new(&sut).run_dialogue(&PerturbedDialogue::identity(&d));
    assert!(!run.partial);
    let answers: Vec<_> = run.outcomes.iter().map(|o| o.generated.clone().unwrap()).collect();
    assert_eq!(answers, vec!["answer 2", "answer 4", "answer 6", "answer 8"]);
    let last = &server.requests()[3].body["messages"];
    assert_eq!(last[0]["content"], DEFAULT_SYSTEM_INSTRUCTIONS);
    assert_eq!(last[1]["content"], d.rounds[0].question);
    assert_eq!(last[2]["content"], "answer 2");
    assert_eq!(last[7]["content"], d.rounds[3].question);
}

#[test]
fn http_sut_failure_marks_dialogue_partial() {
    let server = TestServer::start(|n, _| if n == 1 { (400, json!({})) } else { (200, chat_reply("x")) });
    let sut = HttpSut::new(client(&server.url, 0));
    let d = tea_dataset().dialogues[0].clone();
    let run = Harness::new(&sut).run_dialogue(&PerturbedDialogue::identity(&d));
    assert!(run.partial);
    assert!(run.outcomes[0].error.is_none());
    assert!(run.outcomes[1].error.is_some());
    assert_eq!(server.requests().len(), 2);
}

#[test]
fn embed_wire_format_and_similarity() {
    let server = TestServer::start(|_, req| {
        let texts = req.body["texts"].as_array().unwrap();
        let vectors: Vec<Vec<f32>> = texts
            .iter()
            .map(|t| if t == "India" { vec![1.0, 0.0] } else { vec![0.6, 0.8] })
            .collect();
        (200, json!({ "vectors": vectors }))
    });
    let e = HttpEmbedder::new(&server.url, T).unwrap();
    let v = e.embed(&["India".into(), "Britain".into()]).unwrap();
    assert_eq!(v, vec![vec![1.0, 0.0], vec![0.6, 0.8]]);
    let seen = server.requests();
    assert_eq!(seen[0].path, "/embed");
    assert_eq!(seen[0].body, json!({"texts": ["India", "Britain"]}));

    let scorer = Scorer::new(Arc::new(e));
    assert!((scorer.semantic_similarity("India", "Britain") - 0.6).abs() < 1e-6);
    assert!(!scorer.low_confidence());
    // Cached vectors need no further request.
    let before = server.requests().len();
    scorer.semantic_similarity("Britain", "India");
    assert_eq!(server.requests().len(), before);
}

#[test]
fn embed_rejects_wrong_vector_count() {
    let server = TestServer::start(|_, _| (200, json!({"vectors": [[1.0]]})));
    let e = HttpEmbedder::new(&server.url, T).unwrap();
    assert!(matches!(e.embed(&["a".into(), "b".into()]), Err(TransportError::Malformed(_))));
}

#[test]
fn embed_outage_falls_back_to_hashing_with_low_confidence() {
    let server = TestServer::start(|_, _| (503, json!({})));
    let remote = Scorer::new(Arc::new(HttpEmbedder::new(&server.url, T).unwrap()));
    let local = Scorer::fallback();
    let got = remote.mss("the tea plant", "tea leaves");
    assert_eq!(got, local.mss("the tea plant", "tea leaves"));
    assert!(remote.low_confidence());
}

#[test]
fn coref_wire_format() {
    let server = TestServer::start(|_, _| {
        (
            200,
            json!({"chains": [[
                {"text": "Shen Nong", "start": 0, "end": 9},
                {"text": "He", "start": 25, "end": 27}
            ]]}),
        )
    });
    let c = HttpCoref::new(&server.url, T).unwrap();
    let chains = c.chains("Shen Nong discovered tea. He boiled it.").unwrap();
    assert_eq!(chains.len(), 1);
    assert_eq!(chains[0].mentions[1].text, "He");
    assert_eq!(chains[0].mentions[1].start, 25);
    let seen = server.requests();
    assert_eq!(seen[0].path, "/coref");
    assert_eq!(seen[0].body["text"], "Shen Nong discovered tea. He boiled it.");
}

#[test]
fn coref_outage_uses_heuristic() {
    let server = TestServer::start(|_, _| (503, json!({})));
    let c = HttpCoref::new(&server.url, T).unwrap();
    let coref = Coref::with_remote(Some(&c), &InfoGraph::default());
    let (_, fallback_used) = coref.chains("He boiled it.");
    assert!(fallback_used);
}

#[test]
fn annotation_with_unreachable_coref_matches_offline_annotation() {
    let server = TestServer::start(|_, _| (503, json!({})));
    let c = HttpCoref::new(&server.url, T).unwrap();
    let d = tea_dataset().dialogues[0].clone();
    let analysis = Extractor::new(Arc::new(tea_extractor())).analyze(&d).unwrap();
    let offline = annotate(PerturbedDialogue::identity(&d), &d, &analysis, None).unwrap();
    let remote = annotate(PerturbedDialogue::identity(&d), &d, &analysis, Some(&c as &dyn CoreferenceClient)).unwrap();
    assert_eq!(offline.rounds, remote.rounds);
}

#[test]
fn health_reports_models() {
    let server = TestServer::start(|_, _| (200, json!({"coref_model": "c-1", "embed_model": "e-2"})));
    let h = sidecar::health(&server.url, T).unwrap();
    assert_eq!(h.coref_model, "c-1");
    assert_eq!(h.embed_model, "e-2");
    assert_eq!(server.requests()[0].method, "GET");
    assert_eq!(server.requests()[0].path, "/health");
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let err = sidecar::health("http://127.0.0.1:1", Duration::from_millis(500)).unwrap_err();
    assert!(matches!(err, TransportError::Http(_)));
}
