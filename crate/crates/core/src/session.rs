//! Exploration state: a tree of reference generations, each with the gallery
//! of variations produced from it, and a content-addressed trace store.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{ItemError, MaskPaths, VariationOptions};
use crate::trace::DenoisingTrace;

pub type NodeId = usize;

/// How a node came to be: the gallery item it was selected from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub variation: String,
    pub proxy: String,
    /// Token position of the noun that was varied.
    pub object_pos: usize,
    pub options: VariationOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryItem {
    /// Unique within the session.
    pub id: String,
    pub proxy: String,
    pub object_pos: usize,
    pub options: VariationOptions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    #[serde(default)]
    pub masks: MaskPaths,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ItemError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationNode {
    pub id: NodeId,
    /// Content hash of the node's reference trace.
    pub trace: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    pub parent: Option<NodeId>,
    pub produced_by: Option<Provenance>,
    /// Noun the user chose to vary next, if any.
    pub focus: Option<usize>,
    pub gallery: Vec<GalleryItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub nodes: Vec<ExplorationNode>,
    pub current: NodeId,
}

impl Session {
    pub fn new(
        id: impl Into<String>,
        trace_hash: impl Into<String>,
        image: Option<PathBuf>,
        focus: Option<usize>,
    ) -> Self {
        Self {
            id: id.into(),
            nodes: vec![ExplorationNode {
                id: 0,
                trace: trace_hash.into(),
                image,
                parent: None,
                produced_by: None,
                focus,
                gallery: Vec::new(),
            }],
            current: 0,
        }
    }

    pub fn node(&self, id: NodeId) -> Result<&ExplorationNode> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    pub fn current_node(&self) -> &ExplorationNode {
        &self.nodes[self.current]
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = &ExplorationNode> {
        self.nodes.iter().filter(move |n| n.parent == Some(id))
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        for n in &self.nodes {
            if let Some(p) = n.parent {
                depth[n.id] = depth[p] + 1;
            }
        }
        depth.into_iter().max().unwrap_or(0)
    }

    /// Moves the current pointer to an existing node.
    pub fn checkout(&mut self, id: NodeId) -> Result<()> {
        self.node(id)?;
        self.current = id;
        Ok(())
    }

    /// Identifier for the next gallery item of node `id`.
    pub fn next_variation_id(&self, id: NodeId) -> Result<String> {
        Ok(format!("n{id}-v{}", self.node(id)?.gallery.len()))
    }

    pub fn add_gallery(&mut self, id: NodeId, items: Vec<GalleryItem>) -> Result<()> {
        self.node(id)?;
        if let Some(dup) = items.iter().find(|i| self.find_variation(&i.id).is_some()) {
            return Err(Error::InvalidValue(format!(
                "variation id {} already exists",
                dup.id
            )));
        }
        self.nodes[id].gallery.extend(items);
        Ok(())
    }

    pub fn find_variation(&self, variation: &str) -> Option<(NodeId, &GalleryItem)> {
        self.nodes.iter().find_map(|n| {
            n.gallery
                .iter()
                .find(|g| g.id == variation)
                .map(|g| (n.id, g))
        })
    }

    /// Makes the selected variation of the current node the reference of a
    /// new child node, focused on `object_pos`, and moves there.
    pub fn continue_from(&mut self, variation: &str, object_pos: Option<usize>) -> Result<NodeId> {
        let item = self.nodes[self.current]
            .gallery
            .iter()
            .find(|g| g.id == variation)
            .ok_or_else(|| Error::UnknownVariation(variation.to_string()))?;
        let trace = item
            .trace
            .clone()
            .ok_or_else(|| Error::UnknownVariation(format!("{variation} has no result")))?;
        let node = ExplorationNode {
            id: self.nodes.len(),
            trace,
            image: item.image.clone(),
            parent: Some(self.current),
            produced_by: Some(Provenance {
                variation: item.id.clone(),
                proxy: item.proxy.clone(),
                object_pos: item.object_pos,
                options: item.options.clone(),
            }),
            focus: object_pos,
            gallery: Vec::new(),
        };
        let id = node.id;
        self.nodes.push(node);
        self.current = id;
        Ok(id)
    }

    /// Single root without provenance, parents created before their
    /// children, unique variation ids, current pointer in range.
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(m));
        if self.nodes.is_empty() {
            return bad("session has no nodes".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return bad(format!("node {i} carries id {}", n.id));
            }
            match (i, n.parent, &n.produced_by) {
                (0, None, None) => {}
                (0, _, _) => return bad("the root must have no parent and no provenance".into()),
                (_, Some(p), Some(_)) if p < i => {}
                _ => return bad(format!("node {i} has an invalid parent")),
            }
        }
        if self.current >= self.nodes.len() {
            return bad(format!("current node {} does not exist", self.current));
        }
        let mut seen = std::collections::HashSet::new();
        for g in self.nodes.iter().flat_map(|n| &n.gallery) {
            if !seen.insert(&g.id) {
                return bad(format!("variation id {} is repeated", g.id));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let s: Self = serde_json::from_slice(bytes)?;
        s.check()?;
        Ok(s)
    }
}

/// Traces stored once per content hash under `dir/{hash}.trc`, cached in
/// memory after first use.
#[derive(Debug)]
pub struct TraceStore {
    dir: PathBuf,
    cache: Mutex<HashMap<String, Arc<DenoisingTrace>>>,
}

impl TraceStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_of(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.trc"))
    }

    /// Stores `trace` unless an identical one is present; returns its hash.
    pub fn put(&self, trace: &DenoisingTrace) -> Result<String> {
        let bytes = trace.to_bytes()?;
        let hash = crate::trace::bytes_hash(&bytes);
        let path = self.path_of(&hash);
        if !path.exists() {
            let tmp = self.dir.join(format!("{hash}.trc.tmp"));
            std::fs::write(&tmp, &bytes)?;
            std::fs::rename(&tmp, &path)?;
        }
        self.cache
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entry(hash.clone())
            .or_insert_with(|| Arc::new(trace.clone()));
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> Result<Arc<DenoisingTrace>> {
        if !hash.chars().all(|c| c.is_ascii_hexdigit()) || hash.is_empty() {
            return Err(Error::Format(format!("{hash:?} is not a trace hash")));
        }
        if let Some(t) = self
            .cache
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(hash)
        {
            return Ok(t.clone());
        }
        let trace = Arc::new(DenoisingTrace::load(&self.path_of(hash))?);
        self.cache
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(hash.to_string(), trace.clone());
        Ok(trace)
    }

    pub fn len_on_disk(&self) -> Result<usize> {
        Ok(std::fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "trc"))
            .count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Backend, RunOptions, SyntheticBackend};
    use crate::prompt::PromptSpec;
    use crate::tokenizer::WordTokenizer;

    fn item(id: &str, trace: Option<&str>) -> GalleryItem {
        GalleryItem {
            id: id.into(),
            proxy: "cup".into(),
            object_pos: 1,
            options: VariationOptions::default(),
            image: None,
            trace: trace.map(String::from),
            masks: MaskPaths::default(),
            elapsed_ms: None,
            error: None,
        }
    }

    #[test]
    fn select_then_vary_builds_a_tree() {
        let mut s = Session::new("s", "aa", None, Some(1));
        s.add_gallery(
            0,
            vec![item("n0-v0", Some("bb")), item("n0-v1", Some("cc"))],
        )
        .unwrap();
        let child = s.continue_from("n0-v0", Some(4)).unwrap();
        assert_eq!((child, s.current, s.depth()), (1, 1, 1));
        assert!(matches!(
            s.continue_from("n0-v1", None),
            Err(Error::UnknownVariation(_))
        ));
        s.add_gallery(1, vec![item("n1-v0", Some("dd"))]).unwrap();
        s.continue_from("n1-v0", None).unwrap();
        assert_eq!(s.depth(), 2);
        s.checkout(0).unwrap();
        s.continue_from("n0-v1", None).unwrap();
        assert_eq!(s.children(0).count(), 2);
        s.check().unwrap();
        assert_eq!(Session::from_json(&s.to_json().unwrap()).unwrap(), s);
        assert!(s.add_gallery(0, vec![item("n0-v0", None)]).is_err());
        assert!(matches!(s.checkout(9), Err(Error::UnknownNode(9))));
    }

    #[test]
    fn failed_items_cannot_be_selected() {
        let mut s = Session::new("s", "aa", None, None);
        s.add_gallery(0, vec![item("n0-v0", None)]).unwrap();
        assert!(s.continue_from("n0-v0", None).is_err());
    }

    #[test]
    fn broken_trees_are_rejected() {
        let mut s = Session::new("s", "aa", None, None);
        s.add_gallery(0, vec![item("n0-v0", Some("bb"))]).unwrap();
        s.continue_from("n0-v0", None).unwrap();
        let mut cyclic = s.clone();
        cyclic.nodes[1].parent = Some(1);
        assert!(cyclic.check().is_err());
        let mut two_roots = s.clone();
        two_roots.nodes[1].parent = None;
        assert!(two_roots.check().is_err());
    }

    #[test]
    fn traces_are_stored_once() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::open(dir.path()).unwrap();
        let p = PromptSpec::parse(
            &WordTokenizer,
            "A cup on a table",
            "cup",
            Some(&["cup", "table"]),
            &[],
        )
        .unwrap();
        let g = SyntheticBackend::default()
            .run_reference(&p, 3, &RunOptions::default())
            .unwrap();
        let a = store.put(&g.trace).unwrap();
        let b = store.put(&g.trace).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.len_on_disk().unwrap(), 1);
        let fresh = TraceStore::open(dir.path()).unwrap();
        assert_eq!(*fresh.get(&a).unwrap(), g.trace);
        assert!(fresh.get("../x").is_err());
    }
}
