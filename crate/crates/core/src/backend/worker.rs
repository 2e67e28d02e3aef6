//! Subprocess adapter: drives a backend living in another process (typically
//! a Python worker wrapping a real diffusion model) over a framed pipe.
//!
//! Every message is one line of JSON followed by the raw bytes of the blobs
//! the header lists in `blobs` (byte lengths, in order). Arrays of reals are
//! sent as little-endian `f32` blobs and referenced from the JSON by index.
//! The protocol is described in `docs/worker-protocol.md`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{hook_error, Backend, BackendInfo, Generation, RunOptions, StepHook};
use crate::attention::{AttentionMap, CrossAttentionMap};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::latent::LatentImage;
use crate::prompt::PromptSpec;
use crate::proxy::{EmbeddingProvider, VocabEntry};
use crate::schedule::{MixSchedule, ResolvedPromptPair};
use crate::tokenizer::{Token, Tokenizer};
use crate::trace::{DenoisingTrace, LayerInfo, StepRecord, TraceBuilder};

pub const PROTOCOL_VERSION: u32 = 1;

/// A JSON header plus the binary payloads it refers to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frame {
    pub header: Value,
    pub blobs: Vec<Vec<u8>>,
}

impl Frame {
    pub fn new(header: Value) -> Self {
        Self {
            header,
            blobs: Vec::new(),
        }
    }

    /// Appends a blob and returns its index.
    pub fn push_blob(&mut self, bytes: Vec<u8>) -> usize {
        self.blobs.push(bytes);
        self.blobs.len() - 1
    }

    pub fn push_f32(&mut self, values: &[f32]) -> usize {
        self.push_blob(values.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn blob(&self, index: &Value) -> Result<&[u8]> {
        let i = index
            .as_u64()
            .ok_or_else(|| Error::Format(format!("blob reference {index} is not an index")))?
            as usize;
        self.blobs
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Format(format!("blob {i} is missing")))
    }

    pub fn f32_blob(&self, index: &Value) -> Result<Vec<f32>> {
        let bytes = self.blob(index)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format(
                "f32 blob length is not a multiple of 4".into(),
            ));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut header = self.header.clone();
        if let Value::Object(map) = &mut header {
            map.insert(
                "blobs".into(),
                json!(self.blobs.iter().map(Vec::len).collect::<Vec<_>>()),
            );
        } else {
            return Err(Error::Format("frame header must be a JSON object".into()));
        }
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for b in &self.blobs {
            w.write_all(b)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads one frame; `None` at a clean end of stream.
    pub fn read_from(r: &mut impl BufRead) -> Result<Option<Self>> {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        let header: Value = serde_json::from_str(line.trim_end())?;
        let lengths: Vec<usize> = match header.get("blobs") {
            None => Vec::new(),
            Some(v) => serde_json::from_value(v.clone())?,
        };
        let mut blobs = Vec::with_capacity(lengths.len());
        for len in lengths {
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            blobs.push(buf);
        }
        Ok(Some(Self { header, blobs }))
    }

    fn field<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        let v = self
            .header
            .get(name)
            .ok_or_else(|| Error::Format(format!("frame lacks field {name:?}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    fn put_latent(&mut self, z: &LatentImage) -> Value {
        let blob = self.push_f32(z.values());
        json!({"channels": z.channels(), "side": z.side(), "blob": blob})
    }

    fn take_latent(&self, v: &Value) -> Result<LatentImage> {
        let dims = |k: &str| {
            v.get(k)
                .and_then(Value::as_u64)
                .map(|n| n as usize)
                .ok_or_else(|| Error::Format(format!("latent lacks {k:?}")))
        };
        let side = dims("side")?;
        LatentImage::new(dims("channels")?, side, side, self.f32_blob(&v["blob"])?)
    }

    fn put_map(&mut self, m: &AttentionMap) -> Value {
        let blob = self.push_f32(m.values());
        json!({"resolution": m.resolution(), "blob": blob})
    }

    fn take_map(&self, v: &Value) -> Result<AttentionMap> {
        let res = v
            .get("resolution")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Format("attention map lacks a resolution".into()))?;
        AttentionMap::new(res as usize, self.f32_blob(&v["blob"])?)
    }

    fn put_cross(&mut self, m: &CrossAttentionMap) -> Value {
        let blob = self.push_f32(m.values());
        json!({"resolution": m.resolution(), "tokens": m.token_count(), "blob": blob})
    }

    fn take_cross(&self, v: &Value) -> Result<CrossAttentionMap> {
        let get = |k: &str| {
            v.get(k)
                .and_then(Value::as_u64)
                .map(|n| n as usize)
                .ok_or_else(|| Error::Format(format!("cross-attention map lacks {k:?}")))
        };
        CrossAttentionMap::new(
            get("resolution")?,
            get("tokens")?,
            self.f32_blob(&v["blob"])?,
        )
    }

    fn put_image(&mut self, image: &RgbImage) -> Value {
        let blob = self.push_f32(image.data());
        json!({"width": image.width(), "height": image.height(), "blob": blob})
    }

    fn take_image(&self, v: &Value) -> Result<RgbImage> {
        let get = |k: &str| {
            v.get(k)
                .and_then(Value::as_u64)
                .map(|n| n as usize)
                .ok_or_else(|| Error::Format(format!("image lacks {k:?}")))
        };
        RgbImage::new(get("width")?, get("height")?, self.f32_blob(&v["blob"])?)
    }

    fn put_step(&mut self, s: &StepRecord) -> Value {
        let self_maps: Vec<Value> = s.self_attention.iter().map(|m| self.put_map(m)).collect();
        let cross: Vec<Value> = s
            .cross_attention
            .iter()
            .map(|m| self.put_cross(m))
            .collect();
        json!({"t": s.t, "self_attention": self_maps, "cross_attention": cross})
    }

    fn take_step(&self, v: &Value) -> Result<StepRecord> {
        let list = |k: &str| {
            v.get(k)
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Format(format!("step lacks {k:?}")))
        };
        Ok(StepRecord {
            t: v.get("t")
                .and_then(Value::as_u64)
                .ok_or_else(|| Error::Format("step lacks \"t\"".into()))? as u32,
            self_attention: list("self_attention")?
                .iter()
                .map(|m| self.take_map(m).map(Arc::new))
                .collect::<Result<_>>()?,
            cross_attention: list("cross_attention")?
                .iter()
                .map(|m| self.take_cross(m).map(Arc::new))
                .collect::<Result<_>>()?,
        })
    }
}

fn error_frame(e: &Error) -> Frame {
    Frame::new(json!({"type": "error", "kind": e.kind(), "message": e.to_string()}))
}

fn frame_error(f: &Frame) -> Option<Error> {
    (f.header.get("type").and_then(Value::as_str) == Some("error")).then(|| {
        let message = f
            .header
            .get("message")
            .and_then(Value::as_str)
            .unwrap_or("worker error");
        Error::Backend(message.to_string())
    })
}

#[derive(Serialize, Deserialize)]
struct WireOptions {
    seed: u64,
    guidance: f32,
    hook_both_branches: bool,
}

impl WireOptions {
    fn from(o: &RunOptions) -> Self {
        Self {
            seed: o.seed,
            guidance: o.guidance,
            hook_both_branches: o.hook_both_branches,
        }
    }
}

struct Channel {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
}

impl Channel {
    fn send(&mut self, f: &Frame) -> Result<()> {
        f.write_to(&mut self.writer)
    }

    fn recv(&mut self) -> Result<Frame> {
        Frame::read_from(&mut self.reader)?
            .ok_or_else(|| Error::Backend("worker closed the connection".into()))
    }

    fn call(&mut self, f: &Frame) -> Result<Frame> {
        self.send(f)?;
        let reply = self.recv()?;
        match frame_error(&reply) {
            Some(e) => Err(e),
            None => Ok(reply),
        }
    }
}

/// Backend whose model runs behind a [`serve_worker`]-compatible peer.
///
/// Requests are serialized over the single connection in arrival order.
pub struct WorkerBackend {
    channel: Arc<Mutex<Channel>>,
    info: BackendInfo,
    tokenizer: Arc<WorkerTokenizer>,
    child: Option<Mutex<Child>>,
}

impl WorkerBackend {
    /// Talks to a peer over an arbitrary pair of streams.
    pub fn connect(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
    ) -> Result<Self> {
        let channel = Arc::new(Mutex::new(Channel {
            reader: Box::new(BufReader::new(reader)),
            writer: Box::new(writer),
        }));
        let reply = lock(&channel).call(&Frame::new(
            json!({"op": "describe", "version": PROTOCOL_VERSION}),
        ))?;
        let info: BackendInfo = reply.field("info")?;
        let context_length = reply.field::<usize>("context_length").unwrap_or(75);
        Ok(Self {
            tokenizer: Arc::new(WorkerTokenizer {
                channel: channel.clone(),
                context_length,
                cache: Mutex::new(HashMap::new()),
            }),
            channel,
            info,
            child: None,
        })
    }

    /// Starts `command` with piped standard streams and connects to it.
    pub fn spawn(mut command: Command) -> Result<Self> {
        let mut child = command
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin: ChildStdin = child
            .stdin
            .take()
            .ok_or_else(|| Error::Backend("worker has no stdin".into()))?;
        let stdout: ChildStdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::Backend("worker has no stdout".into()))?;
        match Self::connect(stdout, stdin) {
            Ok(mut b) => {
                b.child = Some(Mutex::new(child));
                Ok(b)
            }
            Err(e) => {
                let _ = child.kill();
                Err(e)
            }
        }
    }

    fn run_remote(
        &self,
        mut request: Frame,
        schedule: &MixSchedule,
        hooks: &dyn StepHook,
        options: &RunOptions,
    ) -> Result<Generation> {
        let mut ch = lock(&self.channel);
        if let Some(z) = &options.initial_latent {
            let v = request.put_latent(z);
            request.header["initial_latent"] = v;
        }
        ch.send(&request)?;
        let mut mirror = TraceBuilder::new(
            options.seed,
            schedule.base_prompt().clone(),
            schedule.total_steps(),
            self.info.self_layers.clone(),
            self.info.cross_layers.clone(),
            Some(schedule.clone()),
        )?;
        let mut hook_failure: Option<Error> = None;
        loop {
            let f = ch.recv()?;
            match f.header.get("type").and_then(Value::as_str) {
                Some("hook") => {
                    let reply = match answer_hook(&f, schedule, hooks, &mut mirror) {
                        Ok(reply) => reply,
                        Err(e) => {
                            let reply = error_frame(&e);
                            hook_failure = Some(e);
                            reply
                        }
                    };
                    ch.send(&reply)?;
                }
                Some("result") => {
                    let trace = DenoisingTrace::from_bytes(f.blob(&f.header["trace"])?)?;
                    let image = f.take_image(&f.header["image"])?;
                    return Ok(Generation { trace, image });
                }
                Some("error") => {
                    return Err(
                        hook_failure.unwrap_or_else(|| frame_error(&f).expect("error frame"))
                    );
                }
                other => {
                    return Err(Error::Format(format!(
                        "unexpected worker message {other:?}"
                    )))
                }
            }
        }
    }
}

impl Drop for WorkerBackend {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            let _ = lock(&self.channel).send(&Frame::new(json!({"op": "shutdown"})));
            let mut child = child.lock().unwrap_or_else(|e| e.into_inner());
            if !matches!(child.try_wait(), Ok(Some(_))) {
                let _ = child.wait();
            }
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Runs the client side of one hook callback.
fn answer_hook(
    f: &Frame,
    schedule: &MixSchedule,
    hooks: &dyn StepHook,
    mirror: &mut TraceBuilder,
) -> Result<Frame> {
    let t: u32 = f.field("t")?;
    match f.header.get("hook").and_then(Value::as_str) {
        Some("prompts") => {
            let pair = hooks
                .prompts(t, schedule)
                .map_err(|e| hook_error(t, None, e))?;
            Ok(Frame::new(
                json!({"type": "reply", "key_prompt": pair.key_prompt, "value_prompt": pair.value_prompt}),
            ))
        }
        Some("self_attention") => {
            let layer: usize = f.field("layer")?;
            let info: LayerInfo = f.field("info")?;
            let fresh = Arc::new(f.take_map(&f.header["map"])?);
            let used = hooks
                .on_self_attention(t, layer, &info, fresh.clone())
                .map_err(|e| hook_error(t, Some(&info), e))?;
            let mut reply = Frame::new(json!({"type": "reply"}));
            if !Arc::ptr_eq(&used, &fresh) && *used != *fresh {
                let v = reply.put_map(&used);
                reply.header["map"] = v;
            }
            Ok(reply)
        }
        Some("latent") => {
            if let Some(steps) = f.header.get("steps").and_then(Value::as_array) {
                for s in steps {
                    mirror.push_step(f.take_step(s)?)?;
                }
            }
            let z = Arc::new(f.take_latent(&f.header["z"])?);
            let used = hooks
                .on_latent(t, z.clone(), mirror.partial())
                .map_err(|e| hook_error(t, None, e))?;
            mirror.push_latent(t, used.clone())?;
            let mut reply = Frame::new(json!({"type": "reply"}));
            if !Arc::ptr_eq(&used, &z) && *used != *z {
                let v = reply.put_latent(&used);
                reply.header["z"] = v;
            }
            Ok(reply)
        }
        other => Err(Error::Format(format!("unknown hook {other:?}"))),
    }
}

impl Backend for WorkerBackend {
    fn describe(&self) -> BackendInfo {
        self.info.clone()
    }

    fn tokenizer(&self) -> Arc<dyn Tokenizer> {
        self.tokenizer.clone()
    }

    fn run_hooked(
        &self,
        schedule: &MixSchedule,
        hooks: &dyn StepHook,
        options: &RunOptions,
    ) -> Result<Generation> {
        let request = Frame::new(
            json!({"op": "run", "schedule": schedule, "options": WireOptions::from(options)}),
        );
        self.run_remote(request, schedule, hooks, options)
    }

    fn invert_external(
        &self,
        latents: &[LatentImage],
        prompt: &PromptSpec,
        total_steps: u32,
        options: &RunOptions,
    ) -> Result<Generation> {
        let mut request = Frame::new(json!({
            "op": "invert",
            "prompt": prompt,
            "total_steps": total_steps,
            "options": WireOptions::from(options),
        }));
        let zs: Vec<Value> = latents.iter().map(|z| request.put_latent(z)).collect();
        request.header["latents"] = json!(zs);
        let reply = lock(&self.channel).call(&request)?;
        let trace = DenoisingTrace::from_bytes(reply.blob(&reply.header["trace"])?)?;
        let image = reply.take_image(&reply.header["image"])?;
        Ok(Generation { trace, image })
    }

    fn decode(&self, z: &LatentImage) -> Result<RgbImage> {
        let mut request = Frame::new(json!({"op": "decode"}));
        let v = request.put_latent(z);
        request.header["z"] = v;
        let reply = lock(&self.channel).call(&request)?;
        reply.take_image(&reply.header["image"])
    }
}

/// Tokenizer answered by the worker, cached per text.
pub struct WorkerTokenizer {
    channel: Arc<Mutex<Channel>>,
    context_length: usize,
    cache: Mutex<HashMap<String, Vec<Token>>>,
}

impl WorkerTokenizer {
    pub fn try_encode(&self, text: &str) -> Result<Vec<Token>> {
        if let Some(tokens) = lock(&self.cache).get(text) {
            return Ok(tokens.clone());
        }
        let reply =
            lock(&self.channel).call(&Frame::new(json!({"op": "tokenize", "text": text})))?;
        let tokens: Vec<Token> = reply.field("tokens")?;
        lock(&self.cache).insert(text.to_string(), tokens.clone());
        Ok(tokens)
    }
}

impl Tokenizer for WorkerTokenizer {
    /// Returns no tokens when the worker cannot be reached; prompt
    /// validation then rejects the text.
    fn encode(&self, text: &str) -> Vec<Token> {
        self.try_encode(text).unwrap_or_else(|e| {
            tracing::error!(error = %e, "worker tokenization failed");
            Vec::new()
        })
    }

    fn context_length(&self) -> usize {
        self.context_length
    }
}

/// Worker-side hooks: forwards every callback to the client and waits for
/// its answer.
struct RemoteHooks<'a, R, W> {
    io: Mutex<(&'a mut BufReader<R>, &'a mut W)>,
    steps_sent: Mutex<usize>,
}

impl<R: Read + Send, W: Write + Send> RemoteHooks<'_, R, W> {
    fn ask(&self, f: Frame) -> Result<Frame> {
        let mut io = lock(&self.io);
        f.write_to(&mut *io.1)?;
        let reply = Frame::read_from(&mut *io.0)?
            .ok_or_else(|| Error::Backend("client closed the connection".into()))?;
        match frame_error(&reply) {
            Some(e) => Err(e),
            None => Ok(reply),
        }
    }
}

impl<R: Read + Send, W: Write + Send> StepHook for RemoteHooks<'_, R, W> {
    fn prompts(&self, t: u32, _schedule: &MixSchedule) -> Result<ResolvedPromptPair> {
        let reply = self.ask(Frame::new(
            json!({"type": "hook", "hook": "prompts", "t": t}),
        ))?;
        Ok(ResolvedPromptPair {
            key_prompt: reply.field("key_prompt")?,
            value_prompt: reply.field("value_prompt")?,
        })
    }

    fn on_self_attention(
        &self,
        t: u32,
        layer: usize,
        info: &LayerInfo,
        fresh: Arc<AttentionMap>,
    ) -> Result<Arc<AttentionMap>> {
        let mut f = Frame::new(
            json!({"type": "hook", "hook": "self_attention", "t": t, "layer": layer, "info": info}),
        );
        let v = f.put_map(&fresh);
        f.header["map"] = v;
        let reply = self.ask(f)?;
        match reply.header.get("map") {
            Some(m) => Ok(Arc::new(reply.take_map(m)?)),
            None => Ok(fresh),
        }
    }

    fn on_latent(
        &self,
        t: u32,
        z: Arc<LatentImage>,
        partial: &DenoisingTrace,
    ) -> Result<Arc<LatentImage>> {
        let mut f = Frame::new(json!({"type": "hook", "hook": "latent", "t": t}));
        {
            let mut sent = lock(&self.steps_sent);
            let steps: Vec<Value> = partial.steps()[*sent..]
                .iter()
                .map(|s| f.put_step(s))
                .collect();
            *sent = partial.steps().len();
            f.header["steps"] = json!(steps);
        }
        let v = f.put_latent(&z);
        f.header["z"] = v;
        let reply = self.ask(f)?;
        match reply.header.get("z") {
            Some(v) => Ok(Arc::new(reply.take_latent(v)?)),
            None => Ok(z),
        }
    }
}

fn result_frame(g: &Generation) -> Result<Frame> {
    let mut f = Frame::new(json!({"type": "result"}));
    let trace = f.push_blob(g.trace.to_bytes()?);
    f.header["trace"] = json!(trace);
    let image = f.put_image(&g.image);
    f.header["image"] = image;
    Ok(f)
}

/// Serves `backend` to one [`WorkerBackend`] client until it disconnects or
/// asks to shut down.
pub fn serve_worker<R: Read + Send, W: Write + Send>(
    backend: &dyn Backend,
    reader: R,
    mut writer: W,
) -> Result<()> {
    let mut reader = BufReader::new(reader);
    while let Some(request) = Frame::read_from(&mut reader)? {
        let op = request
            .header
            .get("op")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let reply = match op.as_str() {
            "shutdown" => break,
            "run" => handle_run(backend, &request, &mut reader, &mut writer),
            _ => handle_simple(backend, &op, &request),
        };
        reply
            .unwrap_or_else(|e| error_frame(&e))
            .write_to(&mut writer)?;
    }
    Ok(())
}

fn handle_run<R: Read + Send, W: Write + Send>(
    backend: &dyn Backend,
    request: &Frame,
    reader: &mut BufReader<R>,
    writer: &mut W,
) -> Result<Frame> {
    let schedule: MixSchedule = request.field("schedule")?;
    let options: WireOptions = request.field("options")?;
    let initial = match request.header.get("initial_latent") {
        Some(v) => Some(request.take_latent(v)?),
        None => None,
    };
    let hooks = RemoteHooks {
        io: Mutex::new((reader, writer)),
        steps_sent: Mutex::new(0),
    };
    let g = backend.run_hooked(&schedule, &hooks, &run_options(options, initial))?;
    result_frame(&g)
}

fn handle_simple(backend: &dyn Backend, op: &str, request: &Frame) -> Result<Frame> {
    match op {
        "describe" => Ok(Frame::new(json!({
            "type": "result",
            "version": PROTOCOL_VERSION,
            "info": backend.describe(),
            "context_length": backend.tokenizer().context_length(),
        }))),
        "tokenize" => {
            let text: String = request.field("text")?;
            Ok(Frame::new(
                json!({"type": "result", "tokens": backend.tokenizer().encode(&text)}),
            ))
        }
        "decode" => {
            let z = request.take_latent(&request.header["z"])?;
            let image = backend.decode(&z)?;
            let mut f = Frame::new(json!({"type": "result"}));
            let v = f.put_image(&image);
            f.header["image"] = v;
            Ok(f)
        }
        "invert" => {
            let prompt: PromptSpec = request.field("prompt")?;
            let total: u32 = request.field("total_steps")?;
            let options: WireOptions = request.field("options")?;
            let latents = request
                .header
                .get("latents")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Format("invert request lacks latents".into()))?
                .iter()
                .map(|v| request.take_latent(v))
                .collect::<Result<Vec<_>>>()?;
            let g =
                backend.invert_external(&latents, &prompt, total, &run_options(options, None))?;
            result_frame(&g)
        }
        other => Err(Error::Format(format!("unknown operation {other:?}"))),
    }
}

fn run_options(o: WireOptions, initial: Option<LatentImage>) -> RunOptions {
    RunOptions {
        seed: o.seed,
        guidance: o.guidance,
        initial_latent: initial.map(Arc::new),
        hook_both_branches: o.hook_both_branches,
    }
}

/// Text embedding model living behind a [`serve_embedder`]-compatible peer.
pub struct WorkerEmbedder {
    channel: Mutex<Channel>,
    fingerprint: String,
    dim: usize,
    child: Option<Mutex<Child>>,
}

impl WorkerEmbedder {
    pub fn connect(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
    ) -> Result<Self> {
        let mut channel = Channel {
            reader: Box::new(BufReader::new(reader)),
            writer: Box::new(writer),
        };
        let reply = channel.call(&Frame::new(
            json!({"op": "embedder", "version": PROTOCOL_VERSION}),
        ))?;
        Ok(Self {
            fingerprint: reply.field("fingerprint")?,
            dim: reply.field("dim")?,
            channel: Mutex::new(channel),
            child: None,
        })
    }

    pub fn spawn(mut command: Command) -> Result<Self> {
        let mut child = command
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| Error::Provider("embedder has no stdin".into()))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::Provider("embedder has no stdout".into()))?;
        match Self::connect(stdout, stdin) {
            Ok(mut e) => {
                e.child = Some(Mutex::new(child));
                Ok(e)
            }
            Err(e) => {
                let _ = child.kill();
                Err(e)
            }
        }
    }

    fn call(&self, f: &Frame) -> Result<Frame> {
        lock(&self.channel).call(f).map_err(|e| match e {
            Error::Backend(m) => Error::Provider(m),
            e => e,
        })
    }
}

impl EmbeddingProvider for WorkerEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let mut v = self.embed_batch(&[text.to_string()])?;
        v.pop()
            .ok_or_else(|| Error::Provider("empty embedding reply".into()))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let reply = self.call(&Frame::new(json!({"op": "embed", "texts": texts})))?;
        let flat = reply.f32_blob(&reply.header["vectors"])?;
        if flat.len() != texts.len() * self.dim {
            return Err(Error::Provider(format!(
                "{} values for {} texts of dimension {}",
                flat.len(),
                texts.len(),
                self.dim
            )));
        }
        Ok(flat.chunks(self.dim.max(1)).map(<[f32]>::to_vec).collect())
    }

    fn vocabulary(&self) -> Result<Vec<VocabEntry>> {
        self.call(&Frame::new(json!({"op": "vocabulary"})))?
            .field("entries")
    }

    fn tokenize(&self, word: &str) -> Result<Vec<u32>> {
        self.call(&Frame::new(json!({"op": "token_ids", "text": word})))?
            .field("ids")
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

impl Drop for WorkerEmbedder {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            let _ = lock(&self.channel).send(&Frame::new(json!({"op": "shutdown"})));
            let _ = child.lock().unwrap_or_else(|e| e.into_inner()).wait();
        }
    }
}

/// Serves `provider` to one [`WorkerEmbedder`] client.
pub fn serve_embedder<R: Read, W: Write>(
    provider: &dyn EmbeddingProvider,
    reader: R,
    mut writer: W,
) -> Result<()> {
    let mut reader = BufReader::new(reader);
    while let Some(request) = Frame::read_from(&mut reader)? {
        let op = request
            .header
            .get("op")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        if op == "shutdown" {
            break;
        }
        let reply = (|| -> Result<Frame> {
            match op.as_str() {
                "embedder" => {
                    let probe = provider.embed_text("a")?;
                    Ok(Frame::new(json!({
                        "type": "result",
                        "version": PROTOCOL_VERSION,
                        "fingerprint": provider.fingerprint(),
                        "dim": probe.len(),
                    })))
                }
                "embed" => {
                    let texts: Vec<String> = request.field("texts")?;
                    let vectors: Vec<f32> = provider.embed_batch(&texts)?.concat();
                    let mut f = Frame::new(json!({"type": "result"}));
                    let blob = f.push_f32(&vectors);
                    f.header["vectors"] = json!(blob);
                    Ok(f)
                }
                "vocabulary" => Ok(Frame::new(
                    json!({"type": "result", "entries": provider.vocabulary()?}),
                )),
                "token_ids" => {
                    let text: String = request.field("text")?;
                    Ok(Frame::new(
                        json!({"type": "result", "ids": provider.tokenize(&text)?}),
                    ))
                }
                other => Err(Error::Format(format!("unknown operation {other:?}"))),
            }
        })();
        reply
            .unwrap_or_else(|e| error_frame(&e))
            .write_to(&mut writer)?;
    }
    Ok(())
}
