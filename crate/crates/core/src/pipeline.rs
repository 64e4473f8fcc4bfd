//! Case manifests and the CT + outlines → labels pipeline.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{load_seeds, Seeds, Target};
use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::forest::{predict_labels, train_forest, Forest, TrainConfig, TrainingCase};
use crate::geodesic::{geodesic_transform, normalize_distance, GeodesicParams};
use crate::mhd::{read_label_mhd, read_mhd};
use crate::postprocess::{self, Postprocess};
use crate::volume::{normalize_ct, ChannelKind, ChannelStack, LabelVolume, Volume3, DEFAULT_CT_WINDOW};

/// Fixed channel order of the geodesic stack. The baseline uses the first entry only.
pub const CHANNEL_NAMES: [&str; 3] = ["ct", "geodesic_right", "geodesic_left"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    BaselineCtOnly,
    WithGeodesic,
}

impl Mode {
    pub fn channel_names(self) -> Vec<String> {
        let n = match self {
            Mode::BaselineCtOnly => 1,
            Mode::WithGeodesic => 3,
        };
        CHANNEL_NAMES[..n].iter().map(|s| s.to_string()).collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::BaselineCtOnly => "baseline_ct_only",
            Mode::WithGeodesic => "with_geodesic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// CT window `[lo, hi]` in HU.
    pub window: [f64; 2],
    pub geodesic: GeodesicParams,
    pub train: TrainConfig,
    pub postprocess: Postprocess,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::WithGeodesic,
            window: [DEFAULT_CT_WINDOW.0, DEFAULT_CT_WINDOW.1],
            geodesic: GeodesicParams::default(),
            train: TrainConfig::default(),
            postprocess: Postprocess::None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.window;
        if !(lo < hi) {
            return Err(Error::Parameter(format!("CT window requires lo < hi, got [{lo}, {hi}]")));
        }
        self.geodesic.validate()?;
        self.train.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Parses and validates a config document.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: PipelineConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        PipelineConfig { mode, ..self.clone() }
    }
}

/// One manifest entry. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub case_id: String,
    pub ct_path: String,
    pub annotation_right: String,
    pub annotation_left: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_path: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub dir: PathBuf,
    pub cases: Vec<CaseRecord>,
}

impl Manifest {
    pub fn new(dir: impl Into<PathBuf>, cases: Vec<CaseRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &cases {
            if !seen.insert(c.case_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate case id `{}`", c.case_id)));
            }
            if c.annotation_right == c.annotation_left {
                return Err(Error::Dataset(format!(
                    "case `{}` uses the same annotation file for both kidneys",
                    c.case_id
                )));
            }
        }
        Ok(Manifest { dir: dir.into(), cases })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cases: Vec<CaseRecord> = serde_json::from_str(&text)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(dir, cases)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.cases)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn get(&self, case_id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    /// Loads the CT, both seed sets and, when present, the ground truth.
    pub fn load_case(&self, record: &CaseRecord) -> Result<CaseData> {
        let load = || -> Result<CaseData> {
            let ct = read_mhd(self.resolve(&record.ct_path))?.with_kind(ChannelKind::CtHu);
            let geometry = *ct.geometry();
            let right = load_seeds(&self.resolve(&record.annotation_right), Target::Right, &geometry)?;
            let left = load_seeds(&self.resolve(&record.annotation_left), Target::Left, &geometry)?;
            let truth = match &record.ground_truth_path {
                Some(p) => {
                    let t = read_label_mhd(self.resolve(p))?;
                    t.geometry().ensure_congruent(&geometry, "ground truth vs CT")?;
                    Some(t)
                }
                None => None,
            };
            Ok(CaseData {
                id: record.case_id.clone(),
                ct,
                seeds: [right, left],
                truth,
            })
        };
        load().map_err(|e| e.in_case(&record.case_id))
    }

    pub fn load_all(&self) -> Result<Vec<CaseData>> {
        self.cases.par_iter().map(|r| self.load_case(r)).collect()
    }
}

/// A case in memory: raw CT in HU, right and left seeds, optional truth.
#[derive(Clone, Debug)]
pub struct CaseData {
    pub id: String,
    pub ct: Volume3,
    /// `[right, left]`.
    pub seeds: [Seeds; 2],
    pub truth: Option<LabelVolume>,
}

/// Normalized CT, followed in geodesic mode by the normalized right and left
/// distance volumes.
pub fn build_stack(case: &CaseData, config: &PipelineConfig) -> Result<ChannelStack> {
    let build = || -> Result<ChannelStack> {
        let [lo, hi] = config.window;
        let ct = normalize_ct(&case.ct, lo, hi)?.with_kind(ChannelKind::CtHu);
        let names = config.mode.channel_names();
        if config.mode == Mode::BaselineCtOnly {
            return ChannelStack::new(vec![ct], names);
        }
        let geometry = ct.geometry();
        for s in &case.seeds {
            if let Some(v) = s.voxels.iter().find(|v| !geometry.contains(v.map(|c| c as i64))) {
                return Err(Error::Annotation(format!("{} seed {v:?} lies outside the volume", s.target)));
            }
        }
        let distance = |seeds: &Seeds| -> Result<Volume3> {
            let d = geodesic_transform(&ct, &seeds.linear_indices(geometry), &config.geodesic)?;
            normalize_distance(&d, config.geodesic.d_cap)
        };
        let (right, left) = rayon::join(|| distance(&case.seeds[0]), || distance(&case.seeds[1]));
        ChannelStack::new(vec![ct.clone(), right?, left?], names)
    };
    build().map_err(|e| e.in_case(&case.id))
}

pub fn build_feature_stack(case: &CaseData, config: &PipelineConfig) -> Result<FeatureStack> {
    Ok(FeatureStack::new(&build_stack(case, config)?))
}

/// Trains on cases whose feature stacks are already built.
pub fn train_prepared(cases: &[&CaseData], stacks: &[&FeatureStack], config: &PipelineConfig, seed: u64) -> Result<Forest> {
    config.validate()?;
    let training: Vec<TrainingCase<'_>> = cases
        .iter()
        .zip(stacks)
        .map(|(c, s)| TrainingCase {
            id: &c.id,
            stack: s,
            truth: c.truth.as_ref(),
            seeds: &c.seeds,
        })
        .collect();
    train_forest(&training, &config.train, seed)
}

pub fn run_training(cases: &[CaseData], config: &PipelineConfig, seed: u64) -> Result<Forest> {
    config.validate()?;
    if let Some(c) = cases.iter().find(|c| c.truth.is_none()) {
        return Err(Error::Dataset("training requires ground truth".into()).in_case(&c.id));
    }
    let stacks: Vec<FeatureStack> = cases
        .par_iter()
        .map(|c| build_feature_stack(c, config))
        .collect::<Result<_>>()?;
    let case_refs: Vec<&CaseData> = cases.iter().collect();
    let stack_refs: Vec<&FeatureStack> = stacks.iter().collect();
    train_prepared(&case_refs, &stack_refs, config, seed)
}

/// Prediction on a prebuilt stack, followed by the configured cleanup.
pub fn predict_prepared(case: &CaseData, stack: &FeatureStack, forest: &Forest, config: &PipelineConfig) -> Result<LabelVolume> {
    let labels = predict_labels(forest, stack).map_err(|e| e.in_case(&case.id))?;
    Ok(postprocess::apply(config.postprocess, labels, &case.seeds))
}

pub fn run_prediction(case: &CaseData, forest: &Forest, config: &PipelineConfig) -> Result<LabelVolume> {
    // Fail on a mode mismatch before spending time on the geodesic channels.
    forest
        .check_layout(&config.mode.channel_names())
        .map_err(|e| e.in_case(&case.id))?;
    let stack = build_feature_stack(case, config)?;
    predict_prepared(case, &stack, forest, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn tiny_case() -> CaseData {
        let g = Geometry::new([12, 10, 5], [1.0, 1.0, 2.0], [0.0; 3]).unwrap();
        let mut hu = vec![-100.0; g.len()];
        let mut labels = vec![0u8; g.len()];
        for z in 1..4 {
            for y in 3..7 {
                for x in 1..4 {
                    hu[g.index(x, y, z)] = 150.0;
                    labels[g.index(x, y, z)] = 1;
                }
                for x in 8..11 {
                    hu[g.index(x, y, z)] = 150.0;
                    labels[g.index(x, y, z)] = 2;
                }
            }
        }
        CaseData {
            id: "tiny".into(),
            ct: Volume3::new(g, hu, ChannelKind::CtHu).unwrap(),
            seeds: [
                Seeds { target: Target::Right, voxels: vec![[2, 4, 2], [2, 5, 2]] },
                Seeds { target: Target::Left, voxels: vec![[9, 4, 2]] },
            ],
            truth: Some(LabelVolume::new(g, labels).unwrap()),
        }
    }

    #[test]
    fn geodesic_stack_layout_and_seed_zeros() {
        let case = tiny_case();
        let stack = build_stack(&case, &PipelineConfig::default()).unwrap();
        assert_eq!(stack.names(), CHANNEL_NAMES.map(String::from).as_slice());
        let g = *stack.geometry();
        let right = stack.channel(1).data();
        let seeds: HashSet<usize> = case.seeds[0].linear_indices(&g).into_iter().collect();
        for (i, &v) in right.iter().enumerate() {
            assert_eq!(v == 0.0, seeds.contains(&i), "voxel {:?}", g.coords(i));
        }
        let base = build_stack(&case, &PipelineConfig::default().with_mode(Mode::BaselineCtOnly)).unwrap();
        assert_eq!(base.len(), 1);
        assert_eq!(base.channel(0).data(), stack.channel(0).data());
    }

    #[test]
    fn swapping_seeds_swaps_channels() {
        let case = tiny_case();
        let mut swapped = case.clone();
        swapped.seeds = [
            Seeds { target: Target::Right, voxels: case.seeds[1].voxels.clone() },
            Seeds { target: Target::Left, voxels: case.seeds[0].voxels.clone() },
        ];
        let config = PipelineConfig::default();
        let a = build_stack(&case, &config).unwrap();
        let b = build_stack(&swapped, &config).unwrap();
        assert_eq!(a.channel(1).data(), b.channel(2).data());
        assert_eq!(a.channel(2).data(), b.channel(1).data());
    }

    #[test]
    fn out_of_bounds_seed_is_a_case_error() {
        let mut case = tiny_case();
        case.seeds[1].voxels.push([3, 3, 9]);
        let err = build_stack(&case, &PipelineConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Case { .. }));
        assert!(matches!(err.root(), Error::Annotation(_)));
    }

    #[test]
    fn baseline_model_only_reads_ct() {
        let case = tiny_case();
        let mut config = PipelineConfig::default().with_mode(Mode::BaselineCtOnly);
        config.train.n_trees = 2;
        config.train.samples_per_class_per_volume = 30;
        let forest = run_training(std::slice::from_ref(&case), &config, 3).unwrap();
        for tree in &forest.trees {
            for node in tree.nodes() {
                if let crate::forest::Node::Split { feature, .. } = node {
                    assert_eq!(feature.channels(), [0, 0]);
                }
            }
        }
        let labels = run_prediction(&case, &forest, &config).unwrap();
        assert_eq!(labels.dims(), case.ct.dims());
        let err = run_prediction(&case, &forest, &PipelineConfig::default()).unwrap_err();
        assert!(err.to_string().contains("channel layout mismatch"));
    }

    #[test]
    fn training_without_truth_names_the_case() {
        let mut case = tiny_case();
        case.truth = None;
        let err = run_training(&[case], &PipelineConfig::default(), 1).unwrap_err();
        assert!(err.to_string().contains("tiny"));
    }

    #[test]
    fn config_json_defaults_and_rejects_unknown_keys() {
        let c: PipelineConfig = serde_json::from_str(r#"{"mode": "baseline_ct_only"}"#).unwrap();
        assert_eq!(c.mode, Mode::BaselineCtOnly);
        assert_eq!(c.train, TrainConfig::default());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"moed": "x"}"#).is_err());
        let text = serde_json::to_string(&PipelineConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let r = CaseRecord {
            case_id: "a".into(),
            ct_path: "a.mhd".into(),
            annotation_right: "r.json".into(),
            annotation_left: "l.json".into(),
            ground_truth_path: None,
            prediction_path: None,
        };
        assert!(Manifest::new(".", vec![r.clone(), r.clone()]).is_err());
        let same = CaseRecord { annotation_left: "r.json".into(), ..r };
        assert!(Manifest::new(".", vec![same]).is_err());
    }
}
