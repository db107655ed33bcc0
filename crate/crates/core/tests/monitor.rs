mod common;

use std::time::{Duration, Instant};

use common::{init, synthetic_config};
use fedharness::monitor::{http_get, parse_exposition, serve_metrics, start_sampler, Registry, SamplerConfig, Traffic};
use fedharness::protocol::wire::frame_len;
use fedharness::protocol::{simulate, Body, Message, ServerOptions, SimMode};
use fedharness::strategies::FitResult;

#[test]
fn one_second_interval_over_five_seconds() {
    let traffic = Traffic::new();
    let mut h = start_sampler(SamplerConfig {
        interval: Duration::from_secs(1),
        role: "server".into(),
        id: 0,
        traffic,
        registry: None,
        log: None,
    })
    .unwrap();
    std::thread::sleep(Duration::from_secs(5));
    h.stop();
    let samples = h.samples();
    assert!((4..=6).contains(&samples.len()), "{}", samples.len());
    for w in samples.windows(2) {
        let gap = w[1].timestamp - w[0].timestamp;
        assert!((0.8..=1.2).contains(&gap), "{gap}");
    }
}

#[test]
fn metrics_endpoint_tracks_rounds_and_traffic() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = synthetic_config("metrics", 2, 2, 20, 3);
    cfg.rounds = 1;
    let exp = init(root.path(), cfg);
    let registry = Registry::new();
    let endpoint = serve_metrics("127.0.0.1:0", registry.clone()).unwrap();

    let (code, body) = http_get(endpoint.local_addr(), "/metrics").unwrap();
    assert_eq!(code, 200);
    let fresh = parse_exposition(&body).unwrap();
    assert!(!fresh.is_empty());
    for line in body.lines().filter(|l| !l.starts_with('#')) {
        assert!(line.contains('{') && line.contains("} "), "{line}");
    }

    let opts = ServerOptions {
        registry: Some(registry.clone()),
        sample_interval: Some(Duration::from_millis(20)),
        ..ServerOptions::default()
    };
    let sim = simulate(&exp, 2, SimMode::Concurrent, &opts).unwrap();
    let (_, body) = http_get(endpoint.local_addr(), "/metrics").unwrap();
    let samples = parse_exposition(&body).unwrap();
    let round = samples.iter().find(|s| s.name == "fedharness_round").unwrap();
    assert_eq!(round.value, 1.0);
    let acc = samples.iter().find(|s| s.name == "fedharness_accuracy_distributed").unwrap();
    assert_eq!(Some(acc.value), sim.run.rounds[0].accuracy_distributed);

    // Each client sent at least one FIT_RES carrying a full parameter vector.
    let fit = Message::new(
        1,
        Body::FitRes(FitResult {
            client_id: 0,
            params: sim.run.final_params().clone(),
            num_examples: 0,
            train_loss: 0.0,
        }),
    );
    let fit_len = frame_len(&fit).unwrap() as u64;
    assert!(sim.client_traffic.bytes_out() >= 2 * fit_len);
    assert!(opts.traffic.bytes_in() >= 2 * fit_len);
}

#[test]
fn sampler_feeds_registry_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("res.jsonl");
    let registry = Registry::new();
    let traffic = Traffic::new();
    let mut h = start_sampler(SamplerConfig {
        interval: Duration::from_millis(20),
        role: "client".into(),
        id: 3,
        traffic: traffic.clone(),
        registry: Some(registry.clone()),
        log: Some(log.clone()),
    })
    .unwrap();
    traffic.add_out(123456);
    let start = Instant::now();
    while h.samples().len() < 3 && start.elapsed() < Duration::from_secs(5) {
        std::thread::sleep(Duration::from_millis(5));
    }
    h.stop();
    let text = registry.render();
    assert!(text.contains("fedharness_net_bytes_out_total{role=\"client\",id=\"3\"} 123456"), "{text}");
    let (lines, skipped) = fedharness::storage::read_lines::<fedharness::monitor::ResourceSample>(&log).unwrap();
    assert_eq!((lines.len(), skipped), (h.samples().len(), 0));
}
