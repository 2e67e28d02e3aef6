//! Denoising traces and their on-disk container.
//!
//! A trace records, for every executed step, the self- and cross-attention
//! maps of each captured layer plus the latent entering the step. Maps are
//! reference counted and consecutive identical maps share storage, both in
//! memory and on disk. See `docs/trace-format.md` for the container layout.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionMap, CrossAttentionMap};
use crate::error::{Error, Result};
use crate::latent::LatentImage;
use crate::prompt::PromptSpec;
use crate::schedule::MixSchedule;

pub const TRACE_MAGIC: &[u8; 8] = b"PMETRACE";
pub const TRACE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub resolution: usize,
}

impl LayerInfo {
    pub fn new(name: impl Into<String>, resolution: usize) -> Self {
        Self {
            name: name.into(),
            resolution,
        }
    }
}

/// Maps captured at one step, parallel to the trace's layer tables.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: u32,
    pub self_attention: Vec<Arc<AttentionMap>>,
    pub cross_attention: Vec<Arc<CrossAttentionMap>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingTrace {
    seed: u64,
    prompt: PromptSpec,
    total_steps: u32,
    self_layers: Vec<LayerInfo>,
    cross_layers: Vec<LayerInfo>,
    steps: Vec<StepRecord>,
    /// `latents[i]` is `z_{T-i}`.
    latents: Vec<Arc<LatentImage>>,
    schedule: Option<MixSchedule>,
}

impl DenoisingTrace {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn prompt(&self) -> &PromptSpec {
        &self.prompt
    }

    pub fn total_steps(&self) -> u32 {
        self.total_steps
    }

    /// The schedule of a hooked run, `None` for plain generations.
    pub fn schedule(&self) -> Option<&MixSchedule> {
        self.schedule.as_ref()
    }

    pub fn self_layers(&self) -> &[LayerInfo] {
        &self.self_layers
    }

    pub fn cross_layers(&self) -> &[LayerInfo] {
        &self.cross_layers
    }

    /// Captured steps, in denoising order (descending `t`).
    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn step(&self, t: u32) -> Option<&StepRecord> {
        let i = self.total_steps.checked_sub(t)? as usize;
        self.steps.get(i).filter(|s| s.t == t)
    }

    /// Latent `z_t`.
    pub fn latent(&self, t: u32) -> Option<&Arc<LatentImage>> {
        let i = self.total_steps.checked_sub(t)? as usize;
        self.latents.get(i)
    }

    pub fn latents(&self) -> &[Arc<LatentImage>] {
        &self.latents
    }

    pub fn final_latent(&self) -> Option<&Arc<LatentImage>> {
        self.is_complete()
            .then(|| &self.latents[self.latents.len() - 1])
    }

    pub fn is_complete(&self) -> bool {
        self.steps.len() == self.total_steps as usize
            && self.latents.len() == self.total_steps as usize + 1
    }

    pub fn self_layers_at(&self, resolution: usize) -> Vec<usize> {
        layers_at(&self.self_layers, resolution)
    }

    pub fn cross_layers_at(&self, resolution: usize) -> Vec<usize> {
        layers_at(&self.cross_layers, resolution)
    }

    /// Cross-attention map of the first layer at `resolution` at step `t`.
    pub fn cross_attention_at(&self, t: u32, resolution: usize) -> Result<&Arc<CrossAttentionMap>> {
        let layer = *self
            .cross_layers_at(resolution)
            .first()
            .ok_or(Error::NoLayerAtResolution(resolution))?;
        let step = self.step(t).ok_or(Error::StepOutOfRange {
            t,
            total: self.total_steps,
        })?;
        Ok(&step.cross_attention[layer])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized container; the content address used by stores.
    pub fn content_hash(&self) -> Result<String> {
        Ok(bytes_hash(&self.to_bytes()?))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut blobs = BlobWriter::default();
        let latents = self
            .latents
            .iter()
            .enumerate()
            .map(|(i, z)| LatentEntry {
                t: self.total_steps - i as u32,
                shape: [z.channels(), z.height(), z.width()],
                blob: blobs.add(Arc::as_ptr(z) as usize, z.values()),
            })
            .collect();
        let steps = self
            .steps
            .iter()
            .map(|s| StepEntry {
                t: s.t,
                self_attention: s
                    .self_attention
                    .iter()
                    .map(|m| blobs.add(Arc::as_ptr(m) as usize, m.values()))
                    .collect(),
                cross_attention: s
                    .cross_attention
                    .iter()
                    .map(|m| CrossEntry {
                        tokens: m.token_count(),
                        blob: blobs.add(Arc::as_ptr(m) as usize, m.values()),
                    })
                    .collect(),
            })
            .collect();
        let manifest = Manifest {
            format: "pme-trace".into(),
            version: TRACE_VERSION,
            seed: self.seed,
            total_steps: self.total_steps,
            prompt: self.prompt.clone(),
            schedule: self.schedule.clone(),
            self_layers: self.self_layers.clone(),
            cross_layers: self.cross_layers.clone(),
            blobs: blobs.entries,
            latents,
            steps,
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(TRACE_MAGIC)?;
        w.write_all(&TRACE_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&blobs.data)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TRACE_MAGIC {
            return Err(Error::Format("not a trace container".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != TRACE_VERSION {
            return Err(Error::Format(format!(
                "unsupported trace version {version}"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len))
            .map_err(|_| Error::Format("manifest too large".into()))?;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;

        let floats = |idx: usize| -> Result<Vec<f32>> {
            let b = manifest
                .blobs
                .get(idx)
                .ok_or_else(|| Error::Format(format!("blob {idx} missing")))?;
            let end = b.offset.checked_add(b.length).filter(|&e| e <= data.len());
            let bytes = &data
                [b.offset..end.ok_or_else(|| Error::Format(format!("blob {idx} truncated")))?];
            if b.length % 4 != 0 {
                return Err(Error::Format(format!("blob {idx} is not a float array")));
            }
            if hex(&Sha256::digest(bytes)) != b.sha256 {
                return Err(Error::Format(format!("blob {idx} fails its checksum")));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };

        let mut latent_cache: HashMap<usize, Arc<LatentImage>> = HashMap::new();
        let mut self_cache: HashMap<usize, Arc<AttentionMap>> = HashMap::new();
        let mut cross_cache: HashMap<(usize, usize), Arc<CrossAttentionMap>> = HashMap::new();

        let mut latents = Vec::with_capacity(manifest.latents.len());
        for (i, e) in manifest.latents.iter().enumerate() {
            if e.t as usize + i != manifest.total_steps as usize {
                return Err(Error::Format("latents out of order".into()));
            }
            let z = match latent_cache.get(&e.blob) {
                Some(z) if [z.channels(), z.height(), z.width()] == e.shape => z.clone(),
                _ => {
                    let z = Arc::new(LatentImage::new(
                        e.shape[0],
                        e.shape[1],
                        e.shape[2],
                        floats(e.blob)?,
                    )?);
                    latent_cache.insert(e.blob, z.clone());
                    z
                }
            };
            latents.push(z);
        }

        let mut steps = Vec::with_capacity(manifest.steps.len());
        for s in &manifest.steps {
            if s.self_attention.len() != manifest.self_layers.len()
                || s.cross_attention.len() != manifest.cross_layers.len()
            {
                return Err(Error::Format(format!(
                    "step {} does not match the layer tables",
                    s.t
                )));
            }
            let mut self_attention = Vec::with_capacity(s.self_attention.len());
            for (layer, &blob) in manifest.self_layers.iter().zip(&s.self_attention) {
                let map = match self_cache.get(&blob) {
                    Some(m) if m.resolution() == layer.resolution => m.clone(),
                    _ => {
                        let values = floats(blob)?;
                        if values.len() != layer.resolution.pow(4) {
                            return Err(Error::Format(format!(
                                "blob {blob} has the wrong size for {}",
                                layer.name
                            )));
                        }
                        let m = Arc::new(AttentionMap::new_unchecked(layer.resolution, values));
                        self_cache.insert(blob, m.clone());
                        m
                    }
                };
                self_attention.push(map);
            }
            let mut cross_attention = Vec::with_capacity(s.cross_attention.len());
            for (layer, c) in manifest.cross_layers.iter().zip(&s.cross_attention) {
                let map = match cross_cache.get(&(c.blob, c.tokens)) {
                    Some(m) if m.resolution() == layer.resolution => m.clone(),
                    _ => {
                        let m = Arc::new(CrossAttentionMap::new(
                            layer.resolution,
                            c.tokens,
                            floats(c.blob)?,
                        )?);
                        cross_cache.insert((c.blob, c.tokens), m.clone());
                        m
                    }
                };
                cross_attention.push(map);
            }
            steps.push(StepRecord {
                t: s.t,
                self_attention,
                cross_attention,
            });
        }

        let trace = DenoisingTrace {
            seed: manifest.seed,
            prompt: manifest.prompt,
            total_steps: manifest.total_steps,
            self_layers: manifest.self_layers,
            cross_layers: manifest.cross_layers,
            steps,
            latents,
            schedule: manifest.schedule,
        };
        trace.check_structure()?;
        Ok(trace)
    }

    fn check_structure(&self) -> Result<()> {
        for (i, s) in self.steps.iter().enumerate() {
            if s.t as usize + i != self.total_steps as usize {
                return Err(Error::Format("steps out of order".into()));
            }
        }
        if self.latents.len() > self.total_steps as usize + 1
            || self.steps.len() > self.latents.len()
        {
            return Err(Error::Format(
                "latent and step counts are inconsistent".into(),
            ));
        }
        if let Some(first) = self.latents.first() {
            if self.latents.iter().any(|z| !z.same_shape(first)) {
                return Err(Error::Format("latent shapes differ across steps".into()));
            }
        }
        self.prompt.validate()
    }
}

fn layers_at(layers: &[LayerInfo], resolution: usize) -> Vec<usize> {
    layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.resolution == resolution)
        .map(|(i, _)| i)
        .collect()
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content address of a serialized trace.
pub fn bytes_hash(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Incrementally captures a trace during a run. Backends push the latent
/// entering each step, then the step's maps.
#[derive(Debug)]
pub struct TraceBuilder {
    trace: DenoisingTrace,
}

impl TraceBuilder {
    pub fn new(
        seed: u64,
        prompt: PromptSpec,
        total_steps: u32,
        self_layers: Vec<LayerInfo>,
        cross_layers: Vec<LayerInfo>,
        schedule: Option<MixSchedule>,
    ) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::BadInterval("a trace needs at least one step".into()));
        }
        Ok(Self {
            trace: DenoisingTrace {
                seed,
                prompt,
                total_steps,
                self_layers,
                cross_layers,
                steps: Vec::with_capacity(total_steps as usize),
                latents: Vec::with_capacity(total_steps as usize + 1),
                schedule,
            },
        })
    }

    /// The trace captured so far: latents `z_T..z_{t+1}` and steps `T..t+1`
    /// while the latent for step `t` is being prepared.
    pub fn partial(&self) -> &DenoisingTrace {
        &self.trace
    }

    /// Timestep whose latent is expected next.
    pub fn next_latent_t(&self) -> Option<u32> {
        let n = self.trace.latents.len() as u32;
        (n <= self.trace.total_steps).then(|| self.trace.total_steps - n)
    }

    pub fn push_latent(&mut self, t: u32, z: Arc<LatentImage>) -> Result<()> {
        if self.next_latent_t() != Some(t) || self.trace.steps.len() != self.trace.latents.len() {
            return Err(Error::Backend(format!(
                "latent for step {t} pushed out of order"
            )));
        }
        if let Some(first) = self.trace.latents.first() {
            if !first.same_shape(&z) {
                return Err(Error::ShapeMismatch(
                    "latent shape changed during the run".into(),
                ));
            }
        }
        self.trace.latents.push(z);
        Ok(())
    }

    pub fn push_step(&mut self, mut step: StepRecord) -> Result<()> {
        let expected_t = self.trace.total_steps - self.trace.steps.len() as u32;
        if step.t != expected_t || self.trace.latents.len() != self.trace.steps.len() + 1 {
            return Err(Error::Backend(format!(
                "step {} pushed out of order",
                step.t
            )));
        }
        let t = &self.trace;
        if step.self_attention.len() != t.self_layers.len()
            || step.cross_attention.len() != t.cross_layers.len()
        {
            return Err(Error::ShapeMismatch(format!(
                "step {} does not match the layer tables",
                step.t
            )));
        }
        for (m, l) in step.self_attention.iter().zip(&t.self_layers) {
            if m.resolution() != l.resolution {
                return Err(Error::ResolutionMismatch {
                    expected: l.resolution,
                    found: m.resolution(),
                });
            }
        }
        for (m, l) in step.cross_attention.iter().zip(&t.cross_layers) {
            if m.resolution() != l.resolution {
                return Err(Error::ResolutionMismatch {
                    expected: l.resolution,
                    found: m.resolution(),
                });
            }
        }
        if let Some(prev) = self.trace.steps.last() {
            for (new, old) in step.self_attention.iter_mut().zip(&prev.self_attention) {
                if !Arc::ptr_eq(new, old) && **new == **old {
                    *new = old.clone();
                }
            }
            for (new, old) in step.cross_attention.iter_mut().zip(&prev.cross_attention) {
                if !Arc::ptr_eq(new, old) && **new == **old {
                    *new = old.clone();
                }
            }
        }
        self.trace.steps.push(step);
        Ok(())
    }

    pub fn finish(self) -> Result<DenoisingTrace> {
        if !self.trace.is_complete() {
            return Err(Error::Backend(format!(
                "trace incomplete: {} of {} steps",
                self.trace.steps.len(),
                self.trace.total_steps
            )));
        }
        Ok(self.trace)
    }
}

#[derive(Default)]
struct BlobWriter {
    entries: Vec<BlobEntry>,
    data: Vec<u8>,
    by_ptr: HashMap<usize, usize>,
    by_hash: HashMap<String, usize>,
}

impl BlobWriter {
    fn add(&mut self, ptr: usize, values: &[f32]) -> usize {
        if let Some(&i) = self.by_ptr.get(&ptr) {
            return i;
        }
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let sha = hex(&Sha256::digest(&bytes));
        let idx = match self.by_hash.get(&sha) {
            Some(&i) => i,
            None => {
                let i = self.entries.len();
                self.entries.push(BlobEntry {
                    sha256: sha.clone(),
                    offset: self.data.len(),
                    length: bytes.len(),
                    dtype: "f32le".into(),
                });
                self.data.extend_from_slice(&bytes);
                self.by_hash.insert(sha, i);
                i
            }
        };
        self.by_ptr.insert(ptr, idx);
        idx
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    seed: u64,
    total_steps: u32,
    prompt: PromptSpec,
    schedule: Option<MixSchedule>,
    self_layers: Vec<LayerInfo>,
    cross_layers: Vec<LayerInfo>,
    blobs: Vec<BlobEntry>,
    latents: Vec<LatentEntry>,
    steps: Vec<StepEntry>,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    sha256: String,
    offset: usize,
    length: usize,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct LatentEntry {
    t: u32,
    shape: [usize; 3],
    blob: usize,
}

#[derive(Serialize, Deserialize)]
struct StepEntry {
    t: u32,
    self_attention: Vec<usize>,
    cross_attention: Vec<CrossEntry>,
}

#[derive(Serialize, Deserialize)]
struct CrossEntry {
    tokens: usize,
    blob: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::WordTokenizer;

    fn tiny_trace(steps: u32) -> DenoisingTrace {
        let prompt = PromptSpec::parse(&WordTokenizer, "a dog", "dog", None, &[]).unwrap();
        let mut b = TraceBuilder::new(
            7,
            prompt,
            steps,
            vec![LayerInfo::new("self.r2", 2)],
            vec![LayerInfo::new("cross.r2", 2)],
            None,
        )
        .unwrap();
        for t in (1..=steps).rev() {
            let z = LatentImage::new(1, 2, 2, vec![t as f32; 4]).unwrap();
            b.push_latent(t, Arc::new(z)).unwrap();
            let cross = CrossAttentionMap::new(2, 2, vec![0.5; 8]).unwrap();
            b.push_step(StepRecord {
                t,
                self_attention: vec![Arc::new(AttentionMap::uniform(2))],
                cross_attention: vec![Arc::new(cross)],
            })
            .unwrap();
        }
        b.push_latent(0, Arc::new(LatentImage::zeros(1, 2)))
            .unwrap();
        b.finish().unwrap()
    }

    #[test]
    fn container_roundtrip_is_identity() {
        let trace = tiny_trace(3);
        let bytes = trace.to_bytes().unwrap();
        let back = DenoisingTrace::from_bytes(&bytes).unwrap();
        assert_eq!(back, trace);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn identical_maps_share_storage() {
        let trace = tiny_trace(4);
        let steps = trace.steps();
        assert!(Arc::ptr_eq(
            &steps[0].self_attention[0],
            &steps[3].self_attention[0]
        ));
        let back = DenoisingTrace::from_bytes(&trace.to_bytes().unwrap()).unwrap();
        assert!(Arc::ptr_eq(
            &back.steps()[0].self_attention[0],
            &back.steps()[2].self_attention[0]
        ));
    }

    #[test]
    fn lookups_by_timestep() {
        let trace = tiny_trace(3);
        assert_eq!(trace.latent(3).unwrap().values()[0], 3.0);
        assert_eq!(trace.latent(0).unwrap().values()[0], 0.0);
        assert_eq!(trace.step(1).unwrap().t, 1);
        assert!(trace.step(0).is_none());
        assert!(trace.step(4).is_none());
        assert!(matches!(
            trace.cross_attention_at(2, 16),
            Err(Error::NoLayerAtResolution(16))
        ));
    }

    #[test]
    fn corrupted_blob_is_detected() {
        let mut bytes = tiny_trace(2).to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        assert!(matches!(
            DenoisingTrace::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
        assert!(DenoisingTrace::from_bytes(b"NOTATRACE").is_err());
    }

    #[test]
    fn out_of_order_capture_is_rejected() {
        let prompt = PromptSpec::parse(&WordTokenizer, "a dog", "dog", None, &[]).unwrap();
        let mut b = TraceBuilder::new(0, prompt, 2, vec![], vec![], None).unwrap();
        assert!(b
            .push_latent(1, Arc::new(LatentImage::zeros(1, 2)))
            .is_err());
        b.push_latent(2, Arc::new(LatentImage::zeros(1, 2)))
            .unwrap();
        assert!(b
            .push_step(StepRecord {
                t: 1,
                self_attention: vec![],
                cross_attention: vec![]
            })
            .is_err());
        assert!(b.finish().is_err());
    }
}
