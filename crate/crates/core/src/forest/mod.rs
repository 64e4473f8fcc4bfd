//! Multi-class random forest over box features.
//!
//! Each tree is grown greedily: at every node a fresh set of candidate
//! features is drawn, each is scored at equally spaced thresholds between
//! its minimum and maximum over the node's samples, and the pair with the
//! highest entropy gain is kept. Leaves store class histograms; the forest
//! posterior is the mean of the leaf posteriors reached in every tree.

mod model;
mod split;

pub use model::{load_forest, save_forest, MODEL_SCHEMA};
pub use split::{best_split, candidate_thresholds, entropy, Histogram, SplitChoice};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::Seeds;
use crate::error::{Error, Result};
use crate::features::{FeatureDescriptor, FeatureRanges, FeatureStack};
use crate::volume::{Geometry, LabelVolume, BACKGROUND, NUM_CLASSES};

use split::{feature_value, histogram_of, MIN_GAIN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Nodes with fewer samples become leaves.
    pub min_samples_split: usize,
    pub n_candidate_features: usize,
    pub n_thresholds: usize,
    pub samples_per_class_per_volume: usize,
    /// Fraction of the sample pool each tree sees, drawn without replacement.
    pub bagging_fraction: f64,
    /// Background samples come from the seed bounding boxes grown by this many voxels.
    pub background_margin: usize,
    pub feature_ranges: FeatureRanges,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_trees: 16,
            max_depth: 18,
            min_samples_split: 8,
            n_candidate_features: 100,
            n_thresholds: 10,
            samples_per_class_per_volume: 4000,
            bagging_fraction: 0.66,
            background_margin: 30,
            feature_ranges: FeatureRanges::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_trees", self.n_trees),
            ("min_samples_split", self.min_samples_split),
            ("n_candidate_features", self.n_candidate_features),
            ("n_thresholds", self.n_thresholds),
            ("samples_per_class_per_volume", self.samples_per_class_per_volume),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be >= 1")));
            }
        }
        if !(self.bagging_fraction > 0.0 && self.bagging_fraction <= 1.0) {
            return Err(Error::Parameter(format!(
                "bagging_fraction must lie in (0, 1], got {}",
                self.bagging_fraction
            )));
        }
        self.feature_ranges.validate()
    }
}

/// A labelled training voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    /// Index into the list of training stacks.
    pub volume: u32,
    pub voxel: [usize; 3],
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Split {
        feature: FeatureDescriptor,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        histogram: Histogram,
        posterior: [f64; NUM_CLASSES],
    },
}

impl Node {
    pub fn leaf(histogram: Histogram) -> Node {
        let total: u64 = histogram.iter().sum();
        let mut posterior = [0.0; NUM_CLASSES];
        if total > 0 {
            for c in 0..NUM_CLASSES {
                posterior[c] = histogram[c] as f64 / total as f64;
            }
        }
        Node::Leaf { histogram, posterior }
    }
}

/// Flat node arena; node 0 is the root and children always follow parents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Tree> {
        if nodes.is_empty() {
            return Err(Error::Model("tree has no nodes".into()));
        }
        for (i, n) in nodes.iter().enumerate() {
            if let Node::Split { left, right, threshold, .. } = n {
                let ok = |c: u32| (c as usize) > i && (c as usize) < nodes.len();
                if !ok(*left) || !ok(*right) || left == right {
                    return Err(Error::Model(format!("node {i} has invalid children {left}/{right}")));
                }
                if !threshold.is_finite() {
                    return Err(Error::Model(format!("node {i} has a non-finite threshold")));
                }
            }
        }
        Ok(Tree { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left as usize).max(go(nodes, *right as usize)),
            }
        }
        go(&self.nodes, 0)
    }

    /// Index of the leaf reached by `value_of`, which evaluates a feature at the query point.
    #[inline]
    pub fn route(&self, mut value_of: impl FnMut(&FeatureDescriptor) -> f64) -> usize {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split { feature, threshold, left, right } => {
                    i = if value_of(feature) <= *threshold { *left as usize } else { *right as usize };
                }
            }
        }
    }

    #[inline]
    pub fn posterior_at(&self, stack: &FeatureStack, p: [usize; 3]) -> &[f64; NUM_CLASSES] {
        match &self.nodes[self.route(|f| stack.eval(p, f))] {
            Node::Leaf { posterior, .. } => posterior,
            Node::Split { .. } => unreachable!("route ends at a leaf"),
        }
    }
}

struct TreeBuilder<'a, R> {
    samples: &'a [Sample],
    stacks: &'a [&'a FeatureStack],
    config: &'a TrainConfig,
    rng: &'a mut R,
    nodes: Vec<Node>,
}

impl<R: rand::Rng> TreeBuilder<'_, R> {
    fn grow(&mut self, indices: &mut [u32], depth: usize) -> u32 {
        let id = self.nodes.len() as u32;
        let hist = histogram_of(self.samples, indices);
        let pure = hist.iter().filter(|&&c| c > 0).count() <= 1;
        if depth >= self.config.max_depth || indices.len() < self.config.min_samples_split || pure {
            self.nodes.push(Node::leaf(hist));
            return id;
        }
        let choice = best_split(self.samples, indices, self.stacks, self.rng, self.config);
        let Some(choice) = choice.filter(|c| c.gain > MIN_GAIN) else {
            self.nodes.push(Node::leaf(hist));
            return id;
        };
        // Placeholder, patched once both subtrees exist.
        self.nodes.push(Node::leaf(hist));
        let split_at = partition(indices, |i| {
            feature_value(self.stacks, &self.samples[i as usize], &choice.feature) <= choice.threshold
        });
        let (left_idx, right_idx) = indices.split_at_mut(split_at);
        let left = self.grow(left_idx, depth + 1);
        let right = self.grow(right_idx, depth + 1);
        self.nodes[id as usize] = Node::Split {
            feature: choice.feature,
            threshold: choice.threshold,
            left,
            right,
        };
        id
    }
}

/// Stable in-place partition; returns the number of elements satisfying `pred`.
fn partition(v: &mut [u32], mut pred: impl FnMut(u32) -> bool) -> usize {
    let (yes, no): (Vec<u32>, Vec<u32>) = v.iter().partition(|&&i| pred(i));
    let k = yes.len();
    v[..k].copy_from_slice(&yes);
    v[k..].copy_from_slice(&no);
    k
}

/// Grows one tree on `samples`.
pub fn train_tree<R: rand::Rng>(samples: &[Sample], stacks: &[&FeatureStack], rng: &mut R, config: &TrainConfig) -> Tree {
    let mut indices: Vec<u32> = (0..samples.len() as u32).collect();
    let mut builder = TreeBuilder {
        samples,
        stacks,
        config,
        rng,
        nodes: Vec::new(),
    };
    builder.grow(&mut indices, 0);
    Tree { nodes: builder.nodes }
}

/// One training volume.
#[derive(Clone, Copy, Debug)]
pub struct TrainingCase<'a> {
    pub id: &'a str,
    pub stack: &'a FeatureStack,
    pub truth: Option<&'a LabelVolume>,
    /// Seeds of both kidneys; they bound the background sampling region.
    pub seeds: &'a [Seeds],
}

/// Inclusive bounding box of all seeds grown by `margin`, clamped to the volume.
pub fn background_region(geometry: &Geometry, seeds: &[Seeds], margin: usize) -> ([usize; 3], [usize; 3]) {
    let full = ([0, 0, 0], geometry.dims.map(|n| n - 1));
    let mut bbox: Option<([usize; 3], [usize; 3])> = None;
    for s in seeds {
        if let Some((lo, hi)) = s.bounding_box() {
            bbox = Some(match bbox {
                None => (lo, hi),
                Some((a, b)) => (
                    [a[0].min(lo[0]), a[1].min(lo[1]), a[2].min(lo[2])],
                    [b[0].max(hi[0]), b[1].max(hi[1]), b[2].max(hi[2])],
                ),
            });
        }
    }
    let Some((lo, hi)) = bbox else { return full };
    let mut out = full;
    for a in 0..3 {
        out.0[a] = lo[a].saturating_sub(margin);
        out.1[a] = (hi[a] + margin).min(geometry.dims[a] - 1);
    }
    out
}

/// Class-balanced sample pool: up to `samples_per_class_per_volume` voxels of
/// each class from every case, background restricted to the seed region.
pub fn draw_samples(cases: &[TrainingCase<'_>], config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    let mut pool = Vec::new();
    for (vi, case) in cases.iter().enumerate() {
        let truth = case
            .truth
            .ok_or_else(|| Error::Dataset(format!("case `{}` has no ground truth", case.id)))?;
        let geometry = case.stack.geometry();
        truth
            .geometry()
            .ensure_congruent(geometry, &format!("case `{}` ground truth vs stack", case.id))?;
        let (lo, hi) = background_region(geometry, case.seeds, config.background_margin);
        let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
        for (i, &label) in truth.labels().iter().enumerate() {
            if label == BACKGROUND {
                let p = geometry.coords(i);
                if (0..3).any(|a| p[a] < lo[a] || p[a] > hi[a]) {
                    continue;
                }
            }
            by_class[label as usize].push(i);
        }
        for (class, candidates) in by_class.iter().enumerate() {
            let amount = config.samples_per_class_per_volume.min(candidates.len());
            let mut chosen: Vec<usize> = index::sample(rng, candidates.len(), amount).into_iter().collect();
            chosen.sort_unstable();
            pool.extend(chosen.into_iter().map(|k| Sample {
                volume: vi as u32,
                voxel: geometry.coords(candidates[k]),
                label: class as u8,
            }));
        }
    }
    if pool.is_empty() {
        return Err(Error::Dataset("no training samples could be drawn".into()));
    }
    Ok(pool)
}

/// Per-tree rng: stream 0 is the sample pool, stream `i + 1` is tree `i`.
pub fn tree_rng(master_seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(tree as u64 + 1);
    rng
}

/// Bagged subset of `pool_len` samples for one tree, sorted.
pub fn bag_indices(rng: &mut ChaCha8Rng, pool_len: usize, fraction: f64) -> Vec<usize> {
    let amount = ((pool_len as f64 * fraction).round() as usize).clamp(1, pool_len);
    let mut bag: Vec<usize> = index::sample(rng, pool_len, amount).into_iter().collect();
    bag.sort_unstable();
    bag
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub config: TrainConfig,
    pub channel_names: Vec<String>,
    pub master_seed: u64,
}

/// Trains `config.n_trees` trees on independently bagged subsets of a
/// class-balanced sample pool. The result depends only on the inputs and
/// `master_seed`.
pub fn train_forest(cases: &[TrainingCase<'_>], config: &TrainConfig, master_seed: u64) -> Result<Forest> {
    config.validate()?;
    let first = cases
        .first()
        .ok_or_else(|| Error::Dataset("no training cases".into()))?;
    let channel_names = first.stack.names().to_vec();
    for c in cases {
        if c.stack.names() != channel_names.as_slice() {
            return Err(Error::Dataset(format!(
                "case `{}` has channels {:?}, expected {:?}",
                c.id,
                c.stack.names(),
                channel_names
            )));
        }
    }
    let mut pool_rng = ChaCha8Rng::seed_from_u64(master_seed);
    let pool = draw_samples(cases, config, &mut pool_rng)?;
    let stacks: Vec<&FeatureStack> = cases.iter().map(|c| c.stack).collect();

    let trees: Vec<Tree> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(master_seed, t);
            let bag: Vec<Sample> = bag_indices(&mut rng, pool.len(), config.bagging_fraction)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            train_tree(&bag, &stacks, &mut rng, config)
        })
        .collect();
    log::debug!(
        "trained {} trees on {} pooled samples (max depth {})",
        trees.len(),
        pool.len(),
        trees.iter().map(Tree::depth).max().unwrap_or(0)
    );
    Ok(Forest {
        trees,
        config: config.clone(),
        channel_names,
        master_seed,
    })
}

impl Forest {
    pub fn check_layout(&self, names: &[String]) -> Result<()> {
        if self.channel_names.as_slice() != names {
            return Err(Error::Model(format!(
                "channel layout mismatch: model expects {:?}, stack provides {:?}",
                self.channel_names, names
            )));
        }
        Ok(())
    }

    #[inline]
    fn posterior_unchecked(&self, stack: &FeatureStack, p: [usize; 3]) -> [f64; NUM_CLASSES] {
        let mut acc = [0.0; NUM_CLASSES];
        for tree in &self.trees {
            let post = tree.posterior_at(stack, p);
            for c in 0..NUM_CLASSES {
                acc[c] += post[c];
            }
        }
        let n = self.trees.len() as f64;
        acc.map(|v| v / n)
    }
}

/// Mean of the leaf posteriors reached by `p` in every tree.
pub fn predict_posterior(forest: &Forest, stack: &FeatureStack, p: [usize; 3]) -> Result<[f64; NUM_CLASSES]> {
    forest.check_layout(stack.names())?;
    if !stack.geometry().contains(p.map(|v| v as i64)) {
        return Err(Error::Parameter(format!("voxel {p:?} is outside the volume")));
    }
    Ok(forest.posterior_unchecked(stack, p))
}

/// Class with the highest posterior; ties go to the lower class id.
#[inline]
pub fn argmax_class(posterior: &[f64; NUM_CLASSES]) -> u8 {
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if posterior[c] > posterior[best] {
            best = c;
        }
    }
    best as u8
}

/// Labels every voxel of `stack` with its argmax class.
pub fn predict_labels(forest: &Forest, stack: &FeatureStack) -> Result<LabelVolume> {
    forest.check_layout(stack.names())?;
    let geometry = *stack.geometry();
    let [nx, ny, _] = geometry.dims;
    let mut labels = vec![BACKGROUND; geometry.len()];
    labels.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slice)| {
        for y in 0..ny {
            for x in 0..nx {
                slice[x + nx * y] = argmax_class(&forest.posterior_unchecked(stack, [x, y, z]));
            }
        }
    });
    LabelVolume::new(geometry, labels)
}
