use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;

use target_batcher::batcher::BatchingConfig;
use target_batcher::grouping::ExecutorRules;
use target_batcher::model::{BuildFlags, ContextKind, ExecutionContext, Priority, Target};
use target_batcher::service::{
    client_roundtrip, read_frame, serve, write_frame, BuildCreator, ClientMessage, EnqueueRequest, EstimatorPlanner,
    FixedSizePlanner, RecordingBackend, ServerMessage, ServiceDeps,
};

fn start(backend: Arc<RecordingBackend>, planner_size: Option<usize>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let planner: Arc<dyn target_batcher::service::BatchPlanner> = match planner_size {
        Some(n) => Arc::new(FixedSizePlanner(n)),
        None => Arc::new(EstimatorPlanner::from_models(BatchingConfig::default(), None)),
    };
    let deps = ServiceDeps { rules: ExecutorRules::default(), planner, creator: backend as Arc<dyn BuildCreator> };
    std::thread::spawn(move || serve(listener, Arc::new(deps)));
    addr
}

fn header(id: &str, targets: Vec<Target>) -> ClientMessage {
    ClientMessage::Enqueue(EnqueueRequest {
        context: Some(ExecutionContext { kind: ContextKind::Revision, id: id.into() }),
        flags: Some(BuildFlags::parse_args(&["--jobs=4"]).unwrap()),
        priority: Some(Priority::Medium),
        targets,
        ..Default::default()
    })
}

fn targets(prefix: &str, n: usize) -> Vec<Target> {
    (0..n).map(|i| Target::parse(&format!("//{prefix}/p{}:t{i}", i % 9), BTreeSet::new(), "").unwrap()).collect()
}

fn ids(replies: &[ServerMessage]) -> Vec<String> {
    replies
        .iter()
        .map(|r| match r {
            ServerMessage::Response(x) => x.build_request_id.clone(),
            ServerMessage::Error { message } => panic!("error reply: {message}"),
        })
        .collect()
}

#[test]
fn concurrent_streams_are_isolated() {
    let backend = Arc::new(RecordingBackend::new(1));
    let addr = start(backend.clone(), Some(50));
    let handles: Vec<_> = (0..8)
        .map(|k| {
            let addr = addr.clone();
            std::thread::spawn(move || {
                let ts = targets(&format!("client{k}"), 120 + k * 10);
                let msgs = vec![header(&format!("r{k}"), ts[..60].to_vec()), ClientMessage::Enqueue(EnqueueRequest {
                    targets: ts[60..].to_vec(),
                    ..Default::default()
                })];
                (k, ids(&client_roundtrip(&addr, &msgs).unwrap()))
            })
        })
        .collect();
    let results: Vec<(usize, Vec<String>)> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let builds = backend.builds();
    for (k, got) in results {
        let prefix = format!("//client{k}/");
        let mine: Vec<_> = builds.iter().filter(|b| got.contains(&b.id)).collect();
        assert_eq!(mine.len(), got.len());
        let n: usize = mine.iter().map(|b| b.targets.len()).sum();
        assert_eq!(n, 120 + k * 10);
        assert!(mine.iter().all(|b| b.targets.iter().all(|t| t.label.starts_with(&prefix))));
        assert!(mine.iter().all(|b| b.context.id == format!("r{k}")));
    }
}

#[test]
fn protocol_violation_gets_error_frame_then_close() {
    let addr = start(Arc::new(RecordingBackend::new(2)), None);
    let mut s = TcpStream::connect(&addr).unwrap();
    write_frame(&mut s, &header("r", targets("a", 3))).unwrap();
    write_frame(&mut s, &header("r", targets("b", 3))).unwrap();
    s.shutdown(std::net::Shutdown::Write).unwrap();
    let frame = read_frame(&mut s).unwrap().unwrap();
    let msg: ServerMessage = serde_json::from_slice(&frame).unwrap();
    assert!(matches!(msg, ServerMessage::Error { ref message } if message.contains("protocol")), "{msg:?}");
    assert!(read_frame(&mut s).unwrap().is_none());
}

#[test]
fn malformed_json_and_oversized_frames_are_rejected() {
    let addr = start(Arc::new(RecordingBackend::new(3)), None);
    let mut s = TcpStream::connect(&addr).unwrap();
    s.write_all(&5u32.to_be_bytes()).unwrap();
    s.write_all(b"{nope").unwrap();
    s.shutdown(std::net::Shutdown::Write).unwrap();
    let msg: ServerMessage = serde_json::from_slice(&read_frame(&mut s).unwrap().unwrap()).unwrap();
    assert!(matches!(msg, ServerMessage::Error { .. }));

    let mut s = TcpStream::connect(&addr).unwrap();
    s.write_all(&u32::MAX.to_be_bytes()).unwrap();
    s.shutdown(std::net::Shutdown::Write).unwrap();
    let mut rest = Vec::new();
    s.read_to_end(&mut rest).unwrap();
    let msg: ServerMessage = serde_json::from_slice(&rest[4..]).unwrap();
    assert!(matches!(msg, ServerMessage::Error { .. }));
}

#[test]
fn empty_stream_is_an_error() {
    let addr = start(Arc::new(RecordingBackend::new(4)), None);
    let replies = client_roundtrip(&addr, &[ClientMessage::End]).unwrap();
    assert!(matches!(replies.as_slice(), [ServerMessage::Error { .. }]));
}

#[test]
fn backend_outage_is_reported() {
    let backend = Arc::new(RecordingBackend::new(5));
    backend.set_available(false);
    let addr = start(backend, None);
    let replies = client_roundtrip(&addr, &[header("r", targets("x", 2))]).unwrap();
    assert!(matches!(replies.as_slice(), [ServerMessage::Error { message }] if message.contains("unavailable")));
}
