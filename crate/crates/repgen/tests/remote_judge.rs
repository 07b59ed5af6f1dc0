//! Remote-judge behavior against a live TCP stub: verbatim scores, clamping,
//! unparsable-reply fallback, and dead-endpoint degradation.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Instant;

use repgen::rewards::{
    score_sentences, token_f_measure, JudgeConfig, JudgeMode, RewardCounters,
};
use repgen::text::split_sentences;

/// Serves one canned JSON body per expected request, then returns the raw
/// request bodies it saw.
fn spawn_stub(responses: Vec<String>) -> (String, thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = thread::spawn(move || {
        let mut received = Vec::new();
        for body_out in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            let mut content_length = 0usize;
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(rest) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = rest.trim().parse().unwrap();
                }
            }
            let mut body_in = vec![0u8; content_length];
            reader.read_exact(&mut body_in).unwrap();
            received.push(String::from_utf8(body_in).unwrap());
            let response = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                body_out.len(),
                body_out
            );
            stream.write_all(response.as_bytes()).unwrap();
            stream.flush().unwrap();
        }
        received
    });
    (format!("http://{addr}"), handle)
}

fn remote_config(endpoint: &str, retries: u32) -> JudgeConfig {
    JudgeConfig {
        mode: JudgeMode::Remote,
        endpoint: Some(endpoint.to_string()),
        timeout_secs: 2,
        retries,
        ..JudgeConfig::default()
    }
}

#[test]
fn stubbed_scores_come_back_verbatim() {
    let (endpoint, handle) = spawn_stub(vec![
        r#"{"text": "0.85"}"#.to_string(),
        r#"{"text": "Similarity score: 0.3 (moderate overlap)"}"#.to_string(),
    ]);
    let generated = vec![
        "the heart size is enlarged".to_string(),
        "no pleural effusion is seen".to_string(),
    ];
    let reference = "the heart is enlarged. no effusion is seen.";
    let mut counters = RewardCounters::default();
    let scores = score_sentences(
        &generated,
        reference,
        &remote_config(&endpoint, 2),
        &mut counters,
    )
    .unwrap();
    assert_eq!(scores.pairs.len(), 2);
    assert_eq!(scores.pairs[0].score, 0.85);
    assert_eq!(scores.pairs[1].score, 0.3);
    assert!(!scores.degraded);
    assert!(!scores.clamped);
    assert_eq!(counters.remote_judge_requests, 2);
    assert_eq!(counters.offline_judge_calls, 0);

    let bodies = handle.join().unwrap();
    assert_eq!(bodies.len(), 2);
    // Each prompt carries the generated sentence and its matched reference.
    let first: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    let prompt = first["prompt"].as_str().unwrap();
    assert!(prompt.contains("the heart size is enlarged"));
    assert!(prompt.contains(scores.pairs[0].matched.as_deref().unwrap()));
}

#[test]
fn out_of_range_replies_are_clamped_and_marked() {
    let (endpoint, handle) = spawn_stub(vec![r#"{"text": "1.7"}"#.to_string()]);
    let generated = vec!["lungs are clear".to_string()];
    let mut counters = RewardCounters::default();
    let scores = score_sentences(
        &generated,
        "lungs are clear.",
        &remote_config(&endpoint, 0),
        &mut counters,
    )
    .unwrap();
    assert_eq!(scores.pairs[0].score, 1.0);
    assert!(scores.clamped);
    assert!(!scores.degraded);
    handle.join().unwrap();
}

#[test]
fn unparsable_replies_fall_back_to_the_offline_judge() {
    let (endpoint, handle) = spawn_stub(vec![r#"{"text": "I cannot rate these"}"#.to_string()]);
    let generated = vec!["small right pleural effusion".to_string()];
    let reference = "there is a small pleural effusion on the right.";
    let mut counters = RewardCounters::default();
    let scores = score_sentences(
        &generated,
        reference,
        &remote_config(&endpoint, 0),
        &mut counters,
    )
    .unwrap();
    assert!(scores.degraded);
    let matched = scores.pairs[0].matched.as_deref().unwrap();
    let expected = token_f_measure(&generated[0], matched);
    assert_eq!(scores.pairs[0].score, expected);
    assert_eq!(counters.remote_judge_requests, 1);
    assert_eq!(counters.offline_judge_calls, 1);
    handle.join().unwrap();
}

#[test]
fn dead_endpoints_degrade_quickly_and_exhaust_retries() {
    // Bind a port and drop it so connections are refused immediately.
    let dead = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", listener.local_addr().unwrap())
    };
    let generated_report = "the heart is enlarged. lungs are clear.";
    let generated = split_sentences(generated_report);
    let reference = "the heart is mildly enlarged. the lungs are clear.";
    let mut counters = RewardCounters::default();
    let started = Instant::now();
    let scores =
        score_sentences(&generated, reference, &remote_config(&dead, 2), &mut counters).unwrap();
    assert!(started.elapsed().as_secs() < 10, "fallback took too long");
    assert!(scores.degraded);
    assert!(!scores.clamped);
    assert_eq!(counters.remote_judge_requests, 6, "3 attempts per pair");
    assert_eq!(counters.offline_judge_calls, 2);

    // Scores equal a pure offline run on the same inputs.
    let mut offline_counters = RewardCounters::default();
    let offline = score_sentences(
        &generated,
        reference,
        &JudgeConfig::default(),
        &mut offline_counters,
    )
    .unwrap();
    assert!(!offline.degraded);
    for (remote_pair, offline_pair) in scores.pairs.iter().zip(&offline.pairs) {
        assert_eq!(remote_pair.score, offline_pair.score);
        assert_eq!(remote_pair.matched, offline_pair.matched);
    }
}

#[test]
fn remote_mode_without_an_endpoint_is_rejected() {
    let config = JudgeConfig {
        mode: JudgeMode::Remote,
        endpoint: None,
        ..JudgeConfig::default()
    };
    let mut counters = RewardCounters::default();
    let err = score_sentences(
        &["lungs are clear".to_string()],
        "lungs are clear.",
        &config,
        &mut counters,
    )
    .unwrap_err();
    assert!(err.to_string().contains("endpoint"));
}
