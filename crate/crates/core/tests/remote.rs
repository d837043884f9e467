use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::Duration;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evocomp::container::write_dataset;
use evocomp::evolution::{search, EvoConfig};
use evocomp::grouping::partition;
use evocomp::scorer::remote::{Endpoint, Request, Response};
use evocomp::scorer::{pooled_score, Concurrency, PooledScorer, RemoteClient, RemoteScorer};
use evocomp::synth::{generate, Family, GenConfig};
use evocomp::{Mask, Sample, ScoreError};

const TIMEOUT: Duration = Duration::from_secs(20);

fn serve_cmd(args: &str) -> Endpoint {
    Endpoint::Command(format!("{} serve-scorer {args}", env!("CARGO_BIN_EXE_evocomp")))
}

fn pair_dataset(dir: &Path) -> PathBuf {
    let path = dir.join("pair.evc");
    let s = Sample::new("pair", Array2::from_elem((2, 3), 1.0), Array2::zeros((0, 3))).unwrap();
    write_dataset(&path, &[s]).unwrap();
    path
}

fn pooled_data(dir: &Path, n: usize) -> (PathBuf, evocomp::synth::GeneratedData) {
    let cfg = GenConfig { family: Family::Pooled, n_samples: n, tokens: 12, groups: 4, dim: 16, seed: 5, ..Default::default() };
    let data = generate(&cfg, 5).unwrap();
    let path = dir.join("pooled.evc");
    write_dataset(&path, &data.samples).unwrap();
    (path, data)
}

#[test]
fn echo_over_subprocess() {
    let dir = tempfile::tempdir().unwrap();
    let client = RemoteClient::open(&serve_cmd("--adapter echo"), &pair_dataset(dir.path()), TIMEOUT).unwrap();
    let mask = Mask::from_bits(vec![1, 0]).unwrap();
    assert_eq!(client.score("pair", &mask).unwrap(), 0.5);
    client.shutdown().unwrap();
}

#[test]
fn batch_of_48_is_positional() {
    let dir = tempfile::tempdir().unwrap();
    let client = RemoteClient::open(&serve_cmd("--adapter echo"), &pair_dataset(dir.path()), TIMEOUT).unwrap();
    let masks: Vec<Mask> = (0..48).map(|i| Mask::from_bits(vec![(i % 2) as u8, 1]).unwrap()).collect();
    let losses = client.score_batch("pair", &masks).unwrap();
    assert_eq!(losses.len(), 48);
    for (i, l) in losses.iter().enumerate() {
        assert_eq!(*l, if i % 2 == 0 { 0.5 } else { 1.0 });
    }
}

#[test]
fn unknown_sample_is_a_remote_error() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = pooled_data(dir.path(), 2);
    let client = RemoteClient::open(&serve_cmd("--adapter pooled"), &path, TIMEOUT).unwrap();
    let err = client.score("missing", &Mask::ones(12)).unwrap_err();
    assert!(matches!(err, ScoreError::Remote { .. }), "{err:?}");
    assert!(err.is_remote());
}

#[test]
fn silent_scorer_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let endpoint = Endpoint::Command("cat > /dev/null".into());
    let err = RemoteClient::open(&endpoint, &pair_dataset(dir.path()), Duration::from_millis(200)).unwrap_err();
    assert!(matches!(err, ScoreError::Timeout(_)), "{err:?}");
}

#[test]
fn out_of_order_responses_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    // answers each batch in reverse order, loss = request id
    let server = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut out = stream.try_clone().unwrap();
        let mut lines = BufReader::new(stream).lines();
        let init: Request = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
        assert!(matches!(init, Request::Init { .. }));
        writeln!(out, "{}", serde_json::to_string(&Response::Ready).unwrap()).unwrap();
        let mut ids = Vec::new();
        for _ in 0..8 {
            match serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap() {
                Request::Score { id, .. } => ids.push(id),
                other => panic!("{other:?}"),
            }
        }
        for id in ids.into_iter().rev() {
            writeln!(out, "{}", serde_json::to_string(&Response::Loss { id, loss: id as f64 }).unwrap()).unwrap();
        }
    });
    let client = RemoteClient::open(&Endpoint::Tcp(addr), &pair_dataset(dir.path()), TIMEOUT).unwrap();
    let masks = vec![Mask::ones(2); 8];
    assert_eq!(client.score_batch("pair", &masks).unwrap(), (0..8).map(f64::from).collect::<Vec<_>>());
    server.join().unwrap();
}

#[test]
fn reference_server_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_evocomp"))
        .args(["serve-scorer", "--adapter", "echo", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut first = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut first).unwrap();
    let addr = first.trim().strip_prefix("listening on ").unwrap().to_string();
    let client = RemoteClient::open(&Endpoint::Tcp(addr), &pair_dataset(dir.path()), TIMEOUT).unwrap();
    assert_eq!(client.score("pair", &Mask::from_bits(vec![0, 1]).unwrap()).unwrap(), 0.5);
    client.shutdown().unwrap();
    assert!(child.wait().unwrap().success());
}

#[test]
fn pooled_bridge_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let (path, data) = pooled_data(dir.path(), 10);
    let client = RemoteClient::open(&serve_cmd("--adapter pooled --seed 3"), &path, TIMEOUT).unwrap();
    let local = PooledScorer::new(3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let s = &data.samples[rng.random_range(0..data.samples.len())];
        let mut bits: Vec<u8> = (0..s.n_visual()).map(|_| rng.random_range(0..2)).collect();
        let k = rng.random_range(0..bits.len());
        bits[k] = 1;
        let mask = Mask::from_bits(bits).unwrap();
        let remote = client.score(&s.id, &mask).unwrap();
        let expected = pooled_score(s, &mask, &local.projection(s.width())).unwrap();
        assert!((remote - expected).abs() <= 1e-9, "{remote} vs {expected}");
    }
}

#[test]
fn search_through_bridge_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let (path, data) = pooled_data(dir.path(), 10);
    let client = RemoteClient::open(&serve_cmd("--adapter pooled --seed 3"), &path, TIMEOUT).unwrap();
    let remote = RemoteScorer::new(Arc::new(client), Concurrency::Safe);
    let local = PooledScorer::new(3);
    let evo = EvoConfig { seed: 9, ..Default::default() };
    for s in &data.samples {
        let p = partition(s, &data.anchors).unwrap();
        let a = search(s, &p, &remote, &evo).unwrap();
        let b = search(s, &p, &local, &evo).unwrap();
        assert_eq!(a.mask, b.mask, "{}", s.id);
        assert_eq!(a.loss, b.loss);
    }
}

#[test]
fn crashing_scorer_reports_transport_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = RemoteClient::open(&Endpoint::Command("exit 3".into()), &pair_dataset(dir.path()), TIMEOUT).unwrap_err();
    assert!(err.is_remote(), "{err:?}");
}
