//! The streaming enqueue front-end.
//!
//! A client opens a stream, sends one or more `enqueue` messages and closes
//! its side. The first message carries the execution context and flags;
//! later messages carry only targets. Once the stream is closed the service
//! groups and batches the accumulated targets, creates one build per batch,
//! and streams back one response per build.
//!
//! # Wire format
//!
//! Every message is a frame: a 4-byte big-endian length `N` followed by `N`
//! bytes of UTF-8 JSON. Client frames:
//!
//! ```text
//! {"type":"enqueue","context":{"kind":"Revision","id":"r1"},"flags":[["--jobs","200"]],"priority":"high","targets":[...]}
//! {"type":"enqueue","targets":[...]}
//! {"type":"end"}                      (optional; EOF also ends the stream)
//! ```
//!
//! Server frames, in build creation order:
//!
//! ```text
//! {"type":"response","build_request_id":"<uuid>"}
//! {"type":"error","message":"..."}    (then the connection is closed)
//! ```

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batcher::{batch_fixed_size, batch_targets, Batch, BatchingConfig, Estimator, EstimatorKind, Unavailable};
use crate::error::{Error, Result};
use crate::estimator::ModelSet;
use crate::grouping::ExecutorRules;
use crate::model::{
    BatchSizeReason, Build, BuildFlags, ExecutionContext, Priority, RequestInfo, Target,
};

pub const MAX_FRAME_BYTES: u32 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnqueueRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<ExecutionContext>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flags: Option<BuildFlags>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority: Option<Priority>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product_area: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_tag: Option<String>,
    #[serde(default)]
    pub targets: Vec<Target>,
}

impl EnqueueRequest {
    fn has_header_fields(&self) -> bool {
        self.context.is_some()
            || self.flags.is_some()
            || self.priority.is_some()
            || self.command.is_some()
            || self.user.is_some()
            || self.product_area.is_some()
            || self.tool_tag.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Enqueue(EnqueueRequest),
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnqueueResponse {
    pub build_request_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Response(EnqueueResponse),
    Error { message: String },
}

/// Turns one sorted executor-type group into batches.
pub trait BatchPlanner: Send + Sync {
    fn plan(&self, group: &[Target], info: &RequestInfo) -> Vec<Batch>;
}

/// Binary-search batching against memory and occupancy estimators.
pub struct EstimatorPlanner {
    pub config: BatchingConfig,
    pub memory: Arc<dyn Estimator>,
    pub occupancy: Arc<dyn Estimator>,
}

impl EstimatorPlanner {
    /// Uses the trained models when given; otherwise every estimate fails
    /// and batching falls back to the default size.
    pub fn from_models(config: BatchingConfig, models: Option<&ModelSet>) -> Self {
        match models {
            Some(m) => EstimatorPlanner {
                config,
                memory: Arc::new(m.memory_estimator()),
                occupancy: Arc::new(m.occupancy_estimator()),
            },
            None => EstimatorPlanner {
                config,
                memory: Arc::new(Unavailable(EstimatorKind::Memory)),
                occupancy: Arc::new(Unavailable(EstimatorKind::Occupancy)),
            },
        }
    }
}

impl BatchPlanner for EstimatorPlanner {
    fn plan(&self, group: &[Target], info: &RequestInfo) -> Vec<Batch> {
        batch_targets(group, &self.config, &*self.memory, &*self.occupancy, info)
    }
}

/// Fixed-size slicing, no estimators.
pub struct FixedSizePlanner(pub usize);

impl BatchPlanner for FixedSizePlanner {
    fn plan(&self, group: &[Target], _: &RequestInfo) -> Vec<Batch> {
        batch_fixed_size(group, self.0)
    }
}

/// Where builds go once created.
pub trait BuildCreator: Send + Sync {
    fn create_build(
        &self,
        targets: Vec<Target>,
        info: &RequestInfo,
        reason: BatchSizeReason,
    ) -> Result<String>;
}

/// In-process backend: hands out UUID-format ids from a seeded generator and
/// keeps every created build.
pub struct RecordingBackend {
    rng: Mutex<ChaCha8Rng>,
    builds: Mutex<Vec<Build>>,
    available: AtomicBool,
}

impl RecordingBackend {
    pub fn new(seed: u64) -> Self {
        RecordingBackend {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            builds: Mutex::new(Vec::new()),
            available: AtomicBool::new(true),
        }
    }

    pub fn set_available(&self, up: bool) {
        self.available.store(up, Ordering::SeqCst);
    }

    pub fn builds(&self) -> Vec<Build> {
        self.builds.lock().expect("backend lock poisoned").clone()
    }

    pub fn take_builds(&self) -> Vec<Build> {
        std::mem::take(&mut *self.builds.lock().expect("backend lock poisoned"))
    }

    pub fn next_id(&self) -> String {
        let mut bytes = [0u8; 16];
        self.rng.lock().expect("backend lock poisoned").fill_bytes(&mut bytes);
        uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
    }
}

impl BuildCreator for RecordingBackend {
    fn create_build(&self, targets: Vec<Target>, info: &RequestInfo, reason: BatchSizeReason) -> Result<String> {
        if !self.available.load(Ordering::SeqCst) {
            return Err(Error::BackendUnavailable("backend marked down".into()));
        }
        if targets.is_empty() {
            return Err(Error::InvalidValue("cannot create a build without targets".into()));
        }
        let id = self.next_id();
        self.builds.lock().expect("backend lock poisoned").push(Build {
            id: id.clone(),
            context: info.context.clone(),
            flags: info.flags.clone(),
            targets,
            reason,
            priority: info.priority,
        });
        Ok(id)
    }
}

pub fn create_build(
    creator: &dyn BuildCreator,
    batch: Vec<Target>,
    info: &RequestInfo,
    reason: BatchSizeReason,
) -> Result<String> {
    creator.create_build(batch, info, reason)
}

pub struct ServiceDeps {
    pub rules: ExecutorRules,
    pub planner: Arc<dyn BatchPlanner>,
    pub creator: Arc<dyn BuildCreator>,
}

/// Groups, batches and creates builds for a complete request. Returns the
/// created build ids in creation order.
pub fn process_request(info: &RequestInfo, targets: &[Target], deps: &ServiceDeps) -> Result<Vec<String>> {
    if targets.is_empty() {
        return Err(Error::EmptyStream);
    }
    let mut ids = Vec::new();
    for group in deps.rules.group_and_sort(targets).values() {
        for batch in deps.planner.plan(group, info) {
            ids.push(deps.creator.create_build(batch.targets, info, batch.reason)?);
        }
    }
    Ok(ids)
}

/// Accumulates one client stream.
#[derive(Debug, Default)]
pub struct EnqueueSession {
    info: Option<RequestInfo>,
    targets: Vec<Target>,
    messages: usize,
}

impl EnqueueSession {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, req: EnqueueRequest) -> Result<()> {
        for t in &req.targets {
            t.validate()
                .map_err(|e| Error::ProtocolViolation(format!("invalid target: {e}")))?;
        }
        if self.messages == 0 {
            let (Some(context), Some(flags)) = (req.context, req.flags) else {
                return Err(Error::ProtocolViolation(
                    "first message must carry the execution context and flags".into(),
                ));
            };
            flags
                .validate()
                .map_err(|e| Error::ProtocolViolation(e.to_string()))?;
            let mut info = RequestInfo::new(context, flags, req.priority.unwrap_or(Priority::Medium));
            info.command = req.command.unwrap_or_default();
            info.user = req.user.unwrap_or_default();
            info.product_area = req.product_area.unwrap_or_default();
            info.tool_tag = req.tool_tag.unwrap_or_default();
            self.info = Some(info);
        } else if req.has_header_fields() {
            return Err(Error::ProtocolViolation(format!(
                "message {} repeats request fields; only targets may follow the first message",
                self.messages + 1
            )));
        }
        self.messages += 1;
        self.targets.extend(req.targets);
        Ok(())
    }

    pub fn finish(self, deps: &ServiceDeps) -> Result<Vec<EnqueueResponse>> {
        let info = self.info.ok_or(Error::EmptyStream)?;
        let ids = process_request(&info, &self.targets, deps)?;
        Ok(ids.into_iter().map(|build_request_id| EnqueueResponse { build_request_id }).collect())
    }
}

/// Runs a whole stream of requests; the in-memory form of a connection.
pub fn handle_stream<I>(requests: I, deps: &ServiceDeps) -> Result<Vec<EnqueueResponse>>
where
    I: IntoIterator<Item = EnqueueRequest>,
{
    let mut session = EnqueueSession::new();
    for req in requests {
        session.push(req)?;
    }
    session.finish(deps)
}

pub fn write_frame<W: Write, T: Serialize>(w: &mut W, msg: &T) -> Result<()> {
    let body = serde_json::to_vec(msg)?;
    let len = u32::try_from(body.len())
        .ok()
        .filter(|n| *n <= MAX_FRAME_BYTES)
        .ok_or_else(|| Error::ProtocolViolation("frame too large".into()))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&body)?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean EOF at a frame boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::ProtocolViolation("truncated frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_BYTES {
        return Err(Error::ProtocolViolation(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)
        .map_err(|_| Error::ProtocolViolation("truncated frame body".into()))?;
    Ok(Some(body))
}

fn run_connection<R: Read>(r: &mut R, deps: &ServiceDeps) -> Result<Vec<EnqueueResponse>> {
    let mut session = EnqueueSession::new();
    while let Some(frame) = read_frame(r)? {
        let msg: ClientMessage = serde_json::from_slice(&frame)
            .map_err(|e| Error::ProtocolViolation(format!("bad message: {e}")))?;
        match msg {
            ClientMessage::Enqueue(req) => session.push(req)?,
            ClientMessage::End => break,
        }
    }
    session.finish(deps)
}

/// Serves one connection: reads the request stream, then writes the
/// responses or a single error frame.
pub fn handle_connection<R: Read, W: Write>(r: &mut R, w: &mut W, deps: &ServiceDeps) -> Result<usize> {
    match run_connection(r, deps) {
        Ok(responses) => {
            for resp in &responses {
                write_frame(w, &ServerMessage::Response(resp.clone()))?;
            }
            w.flush()?;
            Ok(responses.len())
        }
        Err(e) => {
            write_frame(w, &ServerMessage::Error { message: e.to_string() })?;
            w.flush()?;
            Err(e)
        }
    }
}

/// Accepts connections forever, one thread per stream.
pub fn serve(listener: TcpListener, deps: Arc<ServiceDeps>) -> Result<()> {
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let deps = deps.clone();
        std::thread::spawn(move || {
            let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
            match serve_stream(stream, &deps) {
                Ok(n) => log::info!("{peer}: created {n} builds"),
                Err(e) => log::warn!("{peer}: {e}"),
            }
        });
    }
    Ok(())
}

fn serve_stream(stream: TcpStream, deps: &ServiceDeps) -> Result<usize> {
    let mut reader = io::BufReader::new(stream.try_clone()?);
    let mut writer = io::BufWriter::new(stream);
    let n = handle_connection(&mut reader, &mut writer, deps)?;
    writer.into_inner().map_err(|e| e.into_error())?.shutdown(std::net::Shutdown::Both).ok();
    Ok(n)
}

/// Client side: sends the messages, half-closes, and collects the replies.
pub fn client_roundtrip(addr: &str, messages: &[ClientMessage]) -> Result<Vec<ServerMessage>> {
    let mut stream = TcpStream::connect(addr)?;
    for m in messages {
        write_frame(&mut stream, m)?;
    }
    stream.flush()?;
    stream.shutdown(std::net::Shutdown::Write)?;
    let mut replies = Vec::new();
    while let Some(frame) = read_frame(&mut stream)? {
        replies.push(serde_json::from_slice(&frame)?);
    }
    Ok(replies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ContextKind;

    fn t(label: &str) -> Target {
        Target::parse(label, Default::default(), "java_test").unwrap()
    }

    fn first(targets: Vec<Target>) -> EnqueueRequest {
        EnqueueRequest {
            context: Some(ExecutionContext { kind: ContextKind::Workspace, id: "ws-1".into() }),
            flags: Some(BuildFlags::parse_args(&["--jobs=100"]).unwrap()),
            priority: Some(Priority::High),
            targets,
            ..Default::default()
        }
    }

    fn more(targets: Vec<Target>) -> EnqueueRequest {
        EnqueueRequest { targets, ..Default::default() }
    }

    fn deps(backend: Arc<RecordingBackend>) -> ServiceDeps {
        ServiceDeps { rules: ExecutorRules::default(), planner: Arc::new(FixedSizePlanner(900)), creator: backend }
    }

    #[test]
    fn two_targets_one_build() {
        let backend = Arc::new(RecordingBackend::new(1));
        let out = handle_stream([first(vec![t("//a:x"), t("//a:y")])], &deps(backend.clone())).unwrap();
        assert_eq!(out.len(), 1);
        let builds = backend.builds();
        assert_eq!(builds[0].targets.len(), 2);
        assert_eq!(builds[0].flags, BuildFlags::parse_args(&["--jobs=100"]).unwrap());
        assert_eq!(builds[0].priority, Priority::High);
    }

    #[test]
    fn three_messages_three_builds() {
        let all: Vec<Target> = (0..2500).map(|i| t(&format!("//p:t{i:04}"))).collect();
        let msgs = vec![first(all[..1000].to_vec()), more(all[1000..2000].to_vec()), more(all[2000..].to_vec())];
        let backend = Arc::new(RecordingBackend::new(1));
        assert_eq!(handle_stream(msgs, &deps(backend)).unwrap().len(), 3);
    }

    #[test]
    fn repeated_flags_rejected() {
        let mut second = more(vec![t("//a:y")]);
        second.flags = Some(BuildFlags::default());
        let backend = Arc::new(RecordingBackend::new(1));
        let err = handle_stream([first(vec![t("//a:x")]), second], &deps(backend)).unwrap_err();
        assert!(matches!(err, Error::ProtocolViolation(_)));
    }

    #[test]
    fn first_message_needs_context() {
        let backend = Arc::new(RecordingBackend::new(1));
        let err = handle_stream([more(vec![t("//a:x")])], &deps(backend)).unwrap_err();
        assert!(matches!(err, Error::ProtocolViolation(_)));
    }

    #[test]
    fn empty_stream() {
        let backend = Arc::new(RecordingBackend::new(1));
        assert!(matches!(handle_stream([first(vec![])], &deps(backend.clone())), Err(Error::EmptyStream)));
        assert!(matches!(handle_stream([], &deps(backend)), Err(Error::EmptyStream)));
    }

    #[test]
    fn ids_unique_and_uuid_shaped() {
        let backend = RecordingBackend::new(7);
        let info = RequestInfo::new(first(vec![]).context.unwrap(), BuildFlags::default(), Priority::Low);
        let a = create_build(&backend, vec![t("//a:x")], &info, BatchSizeReason::OnlyOneTarget).unwrap();
        let b = create_build(&backend, vec![t("//a:y")], &info, BatchSizeReason::OnlyOneTarget).unwrap();
        assert_ne!(a, b);
        assert!(uuid::Uuid::parse_str(&a).is_ok());
        backend.set_available(false);
        assert!(matches!(
            create_build(&backend, vec![t("//a:z")], &info, BatchSizeReason::OnlyOneTarget),
            Err(Error::BackendUnavailable(_))
        ));
    }

    #[test]
    fn frames_round_trip() {
        let mut buf = Vec::new();
        let msg = ClientMessage::Enqueue(first(vec![t("//a:x")]));
        write_frame(&mut buf, &msg).unwrap();
        write_frame(&mut buf, &ClientMessage::End).unwrap();
        let mut r = buf.as_slice();
        let a: ClientMessage = serde_json::from_slice(&read_frame(&mut r).unwrap().unwrap()).unwrap();
        assert_eq!(a, msg);
        let b = read_frame(&mut r).unwrap().unwrap();
        assert_eq!(b, br#"{"type":"end"}"#);
        assert!(read_frame(&mut r).unwrap().is_none());
        let mut short: &[u8] = &[0, 0, 0, 9, b'{'];
        assert!(read_frame(&mut short).is_err());
    }

    #[test]
    fn connection_error_frame() {
        let mut input = Vec::new();
        write_frame(&mut input, &ClientMessage::Enqueue(more(vec![t("//a:x")]))).unwrap();
        let mut out = Vec::new();
        let backend = Arc::new(RecordingBackend::new(1));
        assert!(handle_connection(&mut input.as_slice(), &mut out, &deps(backend)).is_err());
        let reply: ServerMessage = serde_json::from_slice(&read_frame(&mut out.as_slice()).unwrap().unwrap()).unwrap();
        assert!(matches!(reply, ServerMessage::Error { .. }));
    }
}
