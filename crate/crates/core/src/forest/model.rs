//! JSON model files.
//!
//! ```text
//! {"schema": 1, "config": {...}, "channel_names": [...], "master_seed": 7,
//!  "trees": [[{"f": [15 ints], "t": 0.25, "l": 1, "r": 2}, {"h": [n0, n1, n2]}, ...], ...]}
//! ```
//!
//! Nodes are stored in preorder; `l`/`r` index into the same tree's array.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Forest, Node, Tree, TrainConfig};
use crate::error::{Error, Result};
use crate::features::FeatureDescriptor;
use crate::volume::NUM_CLASSES;

pub const MODEL_SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NodeDoc {
    Split { f: Vec<i64>, t: f64, l: u32, r: u32 },
    Leaf { h: [u64; NUM_CLASSES] },
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    schema: u32,
    config: TrainConfig,
    channel_names: Vec<String>,
    #[serde(default)]
    master_seed: u64,
    trees: Vec<Vec<NodeDoc>>,
}

impl Forest {
    pub fn to_json(&self) -> String {
        let doc = ModelDoc {
            schema: MODEL_SCHEMA,
            config: self.config.clone(),
            channel_names: self.channel_names.clone(),
            master_seed: self.master_seed,
            trees: self
                .trees
                .iter()
                .map(|t| {
                    t.nodes()
                        .iter()
                        .map(|n| match n {
                            Node::Split { feature, threshold, left, right } => NodeDoc::Split {
                                f: feature.to_array().to_vec(),
                                t: *threshold,
                                l: *left,
                                r: *right,
                            },
                            Node::Leaf { histogram, .. } => NodeDoc::Leaf { h: *histogram },
                        })
                        .collect()
                })
                .collect(),
        };
        serde_json::to_string(&doc).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Forest> {
        // Check the schema before the full parse so old files get a clear message.
        let probe: serde_json::Value = serde_json::from_str(text)?;
        match probe.get("schema").and_then(|s| s.as_u64()) {
            Some(v) if v == MODEL_SCHEMA as u64 => {}
            Some(v) => {
                return Err(Error::Model(format!(
                    "unsupported model schema {v}, expected {MODEL_SCHEMA}"
                )))
            }
            None => return Err(Error::Model("model file has no schema version".into())),
        }
        let doc: ModelDoc = serde_json::from_value(probe)?;
        if doc.trees.is_empty() {
            return Err(Error::Model("model contains no trees".into()));
        }
        if doc.channel_names.is_empty() {
            return Err(Error::Model("model lists no channels".into()));
        }
        let n_channels = doc.channel_names.len();
        let mut trees = Vec::with_capacity(doc.trees.len());
        for (ti, nodes) in doc.trees.into_iter().enumerate() {
            let mut out = Vec::with_capacity(nodes.len());
            for node in nodes {
                out.push(match node {
                    NodeDoc::Split { f, t, l, r } => {
                        let feature = FeatureDescriptor::from_array(&f)?;
                        feature
                            .validate(n_channels)
                            .map_err(|e| Error::Model(format!("tree {ti}: {e}")))?;
                        Node::Split { feature, threshold: t, left: l, right: r }
                    }
                    NodeDoc::Leaf { h } => {
                        if h.iter().all(|&c| c == 0) {
                            return Err(Error::Model(format!("tree {ti} has an empty leaf histogram")));
                        }
                        Node::leaf(h)
                    }
                });
            }
            trees.push(Tree::from_nodes(out).map_err(|e| Error::Model(format!("tree {ti}: {e}")))?);
        }
        Ok(Forest {
            trees,
            config: doc.config,
            channel_names: doc.channel_names,
            master_seed: doc.master_seed,
        })
    }
}

pub fn save_forest(forest: &Forest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, forest.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_forest(path: impl AsRef<Path>) -> Result<Forest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Forest::from_json(&text)
}
