use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::thread;
use std::time::{Duration, Instant};

use multiblock_core::catalog::BlockCode;
use multiblock_core::reward::{
    external_evaluate, oracle_evaluate, Dataset, EvalRequest, EvalStatus, OracleConfig, OracleServer, TrainerClient,
    TrainingBudget,
};
use multiblock_core::space::{encode_net, SearchSpace};
use proptest::prelude::*;
use serde_json::Value;

fn b(i: u8) -> BlockCode {
    BlockCode::block(i).unwrap()
}

fn request(id: u64, codes: &[BlockCode]) -> EvalRequest {
    let space = SearchSpace::new(5).unwrap();
    let t = space.trajectory(codes).unwrap();
    EvalRequest {
        id,
        blocks: codes.to_vec(),
        net_string: encode_net(&t, 10),
        dataset: Dataset::Cifar10,
        budget: TrainingBudget::default(),
    }
}

/// A one-connection trainer that answers each request line with
/// `reply(id)`; `None` keeps silent.
fn stub(reply: impl Fn(u64) -> Option<String> + Send + 'static) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut out = stream.try_clone().unwrap();
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { return };
            let v: Value = serde_json::from_str(&line).unwrap();
            if let Some(text) = reply(v["id"].as_u64().unwrap()) {
                if out.write_all(format!("{text}\n").as_bytes()).is_err() {
                    return;
                }
            }
        }
    });
    endpoint
}

const LONG: Duration = Duration::from_secs(5);

#[test]
fn echo_stub_round_trip() {
    let ep = stub(|id| Some(format!(r#"{{"id":{id},"status":"ok","accuracy":0.42,"detail":""}}"#)));
    let r = external_evaluate(&ep, &request(7, &[b(0), BlockCode::Sm]), LONG);
    assert_eq!(r.status, EvalStatus::Ok);
    assert_eq!(r.accuracy, Some(0.42));
    assert_eq!(r.id, 7);
}

#[test]
fn request_line_carries_every_field() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let ep = listener.local_addr().unwrap().to_string();
    let seen = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut line = String::new();
        BufReader::new(stream.try_clone().unwrap()).read_line(&mut line).unwrap();
        (&stream).write_all(b"{\"id\":3,\"status\":\"ok\",\"accuracy\":0.5}\n").unwrap();
        line
    });
    external_evaluate(&ep, &request(3, &[b(0), b(2), BlockCode::Gap, BlockCode::Sm]), LONG);
    let v: Value = serde_json::from_str(&seen.join().unwrap()).unwrap();
    assert_eq!(v["id"], 3);
    assert_eq!(v["net"], "[B(0),B(2),GAP(10),SM(10)]");
    assert_eq!(v["dataset"], "cifar10");
    assert_eq!(v["epochs"], 30);
    assert_eq!(v["max_retrains"], 5);
    assert_eq!(v["lr0"], 0.001);
    assert_eq!(v["drop_factor"], 0.2);
    assert_eq!(v["drop_every"], 5);
}

#[test]
fn wrong_id_is_an_id_mismatch() {
    let ep = stub(|id| Some(format!(r#"{{"id":{},"status":"ok","accuracy":0.9}}"#, id + 1)));
    let r = external_evaluate(&ep, &request(1, &[b(0), BlockCode::Sm]), LONG);
    assert_eq!(r.status, EvalStatus::Failed);
    assert_eq!(r.detail, "id mismatch");
    assert_eq!(r.reward(), 0.0);
}

#[test]
fn silent_trainer_times_out_on_schedule() {
    let ep = stub(|_| None);
    let started = Instant::now();
    let r = external_evaluate(&ep, &request(1, &[b(0), BlockCode::Sm]), Duration::from_secs(1));
    let took = started.elapsed();
    assert_eq!(r.detail, "timeout");
    assert_eq!(r.status, EvalStatus::Failed);
    assert!(took >= Duration::from_millis(800) && took <= Duration::from_millis(1200), "{took:?}");
}

#[test]
fn malformed_reply_fails_with_detail() {
    let ep = stub(|_| Some("this is not a record".into()));
    let r = external_evaluate(&ep, &request(1, &[b(0), BlockCode::Sm]), LONG);
    assert_eq!(r.status, EvalStatus::Failed);
    assert!(r.detail.starts_with("malformed response"), "{}", r.detail);
}

#[test]
fn out_of_range_accuracy_fails() {
    let ep = stub(|id| Some(format!(r#"{{"id":{id},"status":"ok","accuracy":1.5}}"#)));
    let r = external_evaluate(&ep, &request(1, &[b(0), BlockCode::Sm]), LONG);
    assert_eq!(r.status, EvalStatus::Failed);
    assert!(r.detail.starts_with("accuracy out of range"), "{}", r.detail);
}

#[test]
fn closed_connection_is_a_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let ep = listener.local_addr().unwrap().to_string();
    thread::spawn(move || drop(listener.accept()));
    let r = external_evaluate(&ep, &request(1, &[b(0), BlockCode::Sm]), LONG);
    assert_eq!(r.status, EvalStatus::Failed);
    assert!(r.detail.starts_with("transport"), "{}", r.detail);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let r = external_evaluate(&format!("127.0.0.1:{port}"), &request(1, &[b(0), BlockCode::Sm]), LONG);
    assert_eq!(r.status, EvalStatus::Failed);
    assert!(r.detail.starts_with("transport"), "{}", r.detail);
}

#[test]
fn trainer_reported_failure_passes_through() {
    let ep = stub(|id| Some(format!(r#"{{"id":{id},"status":"failed","detail":"diverged after 5 retrains"}}"#)));
    let r = external_evaluate(&ep, &request(1, &[b(0), BlockCode::Sm]), LONG);
    assert_eq!(r.status, EvalStatus::Failed);
    assert_eq!(r.detail, "diverged after 5 retrains");
}

#[test]
fn oracle_server_answers_pipelined_requests() {
    let cfg = OracleConfig::default();
    let server = OracleServer::spawn("127.0.0.1:0", cfg.clone()).unwrap();
    let mut client = TrainerClient::connect(&server.endpoint(), LONG).unwrap();
    let nets = [vec![b(0), BlockCode::Sm], vec![b(0), b(3), BlockCode::Sm], vec![b(0), b(1), BlockCode::Gap, BlockCode::Sm]];
    for (i, codes) in nets.iter().enumerate() {
        client.submit(&request(i as u64 + 10, codes), LONG).unwrap();
    }
    let mut seen = HashSet::new();
    while let Some(r) = client.next_completion() {
        let codes = &nets[(r.id - 10) as usize];
        assert_eq!(r.accuracy, Some(oracle_evaluate(&cfg, codes).unwrap()));
        seen.insert(r.id);
    }
    assert_eq!(seen.len(), 3);
    assert_eq!(client.in_flight(), 0);
}

#[test]
fn repeated_id_is_answered_once_from_cache() {
    let server = OracleServer::spawn("127.0.0.1:0", OracleConfig::default()).unwrap();
    let first = external_evaluate(&server.endpoint(), &request(5, &[b(0), b(2), BlockCode::Sm]), LONG);
    let again = external_evaluate(&server.endpoint(), &request(5, &[b(0), b(7), BlockCode::Sm]), LONG);
    assert_eq!(first, again);
}

#[test]
fn uniform_scores_give_base_plus_bonus() {
    let cfg = OracleConfig { noise_sigma: 0.0, base_scores: [0.8; 12], ..OracleConfig::default() };
    let plain = oracle_evaluate(&cfg, &[b(0), b(5), BlockCode::Sm]).unwrap();
    let residual = oracle_evaluate(&cfg, &[b(0), b(4), BlockCode::Sm]).unwrap();
    let inception = oracle_evaluate(&cfg, &[b(0), b(9), BlockCode::Sm]).unwrap();
    assert!((plain - 0.8).abs() < 1e-12);
    assert!((residual - 0.85).abs() < 1e-12);
    assert!((inception - 0.83).abs() < 1e-12);
}

#[test]
fn oracle_is_deterministic() {
    let cfg = OracleConfig { seed: 17, ..OracleConfig::default() };
    let codes = [b(0), b(4), b(9), BlockCode::Gap, BlockCode::Sm];
    let values: HashSet<u64> = (0..10_000).map(|_| oracle_evaluate(&cfg, &codes).unwrap().to_bits()).collect();
    assert_eq!(values.len(), 1);
}

#[test]
fn oracle_range_over_the_whole_space() {
    let cfg = OracleConfig { noise_sigma: 0.2, ..OracleConfig::default() };
    let space = SearchSpace::new(5).unwrap();
    let mut n = 0;
    for t in space.enumerate_all().unwrap() {
        let v = oracle_evaluate(&cfg, &t.codes()).unwrap();
        assert!((0.0..=1.0).contains(&v));
        n += 1;
    }
    assert_eq!(n, 45_242);
}

fn sequence_with_b1() -> impl Strategy<Value = Vec<BlockCode>> {
    (prop::collection::vec(0u8..12, 0..4), any::<prop::sample::Index>(), any::<bool>()).prop_map(|(mut mid, at, gap)| {
        let pos = at.index(mid.len() + 1);
        mid.insert(pos, 1);
        let mut codes = vec![b(0)];
        codes.extend(mid.into_iter().map(b));
        if gap {
            codes.push(BlockCode::Gap);
        }
        codes.push(BlockCode::Sm);
        codes
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn poison_dominates(codes in sequence_with_b1(), seed in any::<u64>()) {
        let cfg = OracleConfig { seed, ..OracleConfig::default() };
        prop_assert_eq!(oracle_evaluate(&cfg, &codes).unwrap(), 0.1);
    }
}
