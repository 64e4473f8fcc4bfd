//! Dice scoring, cross-validation and the two-configuration comparison.

pub mod phantom;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::Target;
use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::pipeline::{build_feature_stack, predict_prepared, train_prepared, CaseData, Mode, PipelineConfig};
use crate::volume::LabelVolume;

/// `2|P∩T| / (|P| + |T|)` for one class; 1 when both sets are empty.
pub fn dice(pred: &LabelVolume, truth: &LabelVolume, class_id: u8) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::Parameter(format!(
            "dice needs congruent volumes, got {:?} and {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let (mut p, mut t, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.labels().iter().zip(truth.labels()) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as u64;
        t += ib as u64;
        both += (ia && ib) as u64;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles `ids` with `seed` and cuts them into `k` test folds whose sizes
/// differ by at most one. Training ids keep the input order.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > ids.len() {
        return Err(Error::Parameter(format!(
            "k-fold needs 2 <= k <= {} cases, got k = {k}",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut start = 0;
    let mut folds = Vec::with_capacity(k);
    for index in 0..k {
        let len = base + (index < extra) as usize;
        let mut in_test = vec![false; ids.len()];
        for &i in &order[start..start + len] {
            in_test[i] = true;
        }
        start += len;
        folds.push(Fold {
            index,
            train: ids.iter().zip(&in_test).filter(|(_, &t)| !t).map(|(s, _)| s.clone()).collect(),
            test: order[start - len..start].iter().map(|&i| ids[i].clone()).collect(),
        });
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceRow {
    pub case: String,
    pub class: String,
    pub mode: String,
    pub dice: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub class: String,
    pub mean: f64,
    pub median: f64,
}

/// Paired comparison of `candidate` against `reference` for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassComparison {
    pub class: String,
    pub reference: String,
    pub candidate: String,
    /// Cases where the candidate's Dice is strictly higher.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Mean Dice difference (candidate − reference) in Dice points over all cases.
    pub mean_absolute_improvement: f64,
    /// Mean of (candidate − reference) / reference over cases with reference > 0.
    pub mean_relative_improvement: Option<f64>,
    pub mean_absolute_improvement_in_wins: Option<f64>,
    pub mean_relative_improvement_in_wins: Option<f64>,
    pub mean_absolute_change_in_losses: Option<f64>,
    pub mean_relative_change_in_losses: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub modes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub rows: Vec<DiceRow>,
    pub summaries: Vec<ModeSummary>,
    pub comparisons: Vec<ClassComparison>,
}

const CLASSES: [Target; 2] = [Target::Right, Target::Left];

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 })
}

impl DiceReport {
    /// Builds summaries for every mode and, when there are exactly two, the
    /// paired comparison of the second against the first.
    pub fn from_rows(modes: Vec<String>, rows: Vec<DiceRow>) -> Self {
        let scores = |mode: &str, class: &str| -> Vec<(String, f64)> {
            rows.iter()
                .filter(|r| r.mode == mode && r.class == class)
                .map(|r| (r.case.clone(), r.dice))
                .collect()
        };
        let mut summaries = Vec::new();
        for mode in &modes {
            for t in CLASSES {
                let v: Vec<f64> = scores(mode, t.as_str()).into_iter().map(|(_, d)| d).collect();
                if let (Some(mean), Some(median)) = (mean(&v), median(&v)) {
                    summaries.push(ModeSummary { mode: mode.clone(), class: t.as_str().into(), mean, median });
                }
            }
        }
        let mut comparisons = Vec::new();
        if let [reference, candidate] = modes.as_slice() {
            for t in CLASSES {
                let a = scores(reference, t.as_str());
                let b = scores(candidate, t.as_str());
                let pairs: Vec<(f64, f64)> = a
                    .iter()
                    .filter_map(|(case, da)| b.iter().find(|(c, _)| c == case).map(|(_, db)| (*da, *db)))
                    .collect();
                if pairs.is_empty() {
                    continue;
                }
                let diff = |&(a, b): &(f64, f64)| b - a;
                let rel = |p: &(f64, f64)| (p.0 > 0.0).then(|| diff(p) / p.0);
                let wins: Vec<_> = pairs.iter().filter(|p| p.1 > p.0).copied().collect();
                let losses: Vec<_> = pairs.iter().filter(|p| p.1 < p.0).copied().collect();
                let all_rel: Vec<f64> = pairs.iter().filter_map(rel).collect();
                comparisons.push(ClassComparison {
                    class: t.as_str().into(),
                    reference: reference.clone(),
                    candidate: candidate.clone(),
                    wins: wins.len(),
                    losses: losses.len(),
                    ties: pairs.len() - wins.len() - losses.len(),
                    mean_absolute_improvement: mean(&pairs.iter().map(diff).collect::<Vec<_>>()).unwrap_or(0.0),
                    mean_relative_improvement: mean(&all_rel),
                    mean_absolute_improvement_in_wins: mean(&wins.iter().map(diff).collect::<Vec<_>>()),
                    mean_relative_improvement_in_wins: mean(&wins.iter().filter_map(rel).collect::<Vec<_>>()),
                    mean_absolute_change_in_losses: mean(&losses.iter().map(diff).collect::<Vec<_>>()),
                    mean_relative_change_in_losses: mean(&losses.iter().filter_map(rel).collect::<Vec<_>>()),
                });
            }
        }
        DiceReport { modes, folds: None, seed: None, rows, summaries, comparisons }
    }

    pub fn summary(&self, mode: &str, class: Target) -> Option<&ModeSummary> {
        self.summaries.iter().find(|s| s.mode == mode && s.class == class.as_str())
    }

    pub fn comparison(&self, class: Target) -> Option<&ClassComparison> {
        self.comparisons.iter().find(|c| c.class == class.as_str())
    }

    /// Writes `report.json` and `report.csv` (case, class, mode, dice) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json_path = dir.join("report.json");
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
        let csv_path = dir.join("report.csv");
        let csv_err = |e: csv::Error| Error::io(&csv_path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
        w.write_record(["case", "class", "mode", "dice"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([r.case.as_str(), r.class.as_str(), r.mode.as_str(), &r.dice.to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))
    }
}

/// Dice rows for both kidney classes of one case.
pub fn score_case(case_id: &str, mode: &str, fold: Option<usize>, pred: &LabelVolume, truth: &LabelVolume) -> Result<Vec<DiceRow>> {
    CLASSES
        .iter()
        .map(|t| {
            Ok(DiceRow {
                case: case_id.to_string(),
                class: t.as_str().into(),
                mode: mode.to_string(),
                dice: dice(pred, truth, t.class_id())?,
                fold,
            })
        })
        .collect()
}

/// Report names for the two arms; a suffix keeps identical modes apart.
fn arm_names(reference: &PipelineConfig, candidate: &PipelineConfig) -> [String; 2] {
    let (a, b) = (reference.mode.as_str(), candidate.mode.as_str());
    if a == b {
        [format!("{a}#1"), format!("{b}#2")]
    } else {
        [a.to_string(), b.to_string()]
    }
}

/// Feature stacks for every case under both configurations. When the two
/// share their preprocessing, the geodesic stack is built once and the
/// baseline reuses its CT channel.
fn prepare_stacks(cases: &[CaseData], configs: [&PipelineConfig; 2]) -> Result<Vec<[FeatureStack; 2]>> {
    let shared = configs[0].window == configs[1].window && configs[0].geodesic == configs[1].geodesic;
    cases
        .par_iter()
        .map(|case| {
            if shared {
                let full_mode = if configs.iter().any(|c| c.mode == Mode::WithGeodesic) {
                    Mode::WithGeodesic
                } else {
                    Mode::BaselineCtOnly
                };
                let full = build_feature_stack(case, &configs[0].with_mode(full_mode))?;
                let arm = |c: &PipelineConfig| full.truncated(c.mode.channel_names().len());
                Ok([arm(configs[0])?, arm(configs[1])?])
            } else {
                Ok([build_feature_stack(case, configs[0])?, build_feature_stack(case, configs[1])?])
            }
        })
        .collect()
}

/// Runs `k`-fold cross-validation of both configurations on shared folds and
/// shared forest seeds, and reports paired per-case Dice.
pub fn compare_modes(
    cases: &[CaseData],
    reference: &PipelineConfig,
    candidate: &PipelineConfig,
    k: usize,
    seed: u64,
) -> Result<DiceReport> {
    reference.validate()?;
    candidate.validate()?;
    if let Some(c) = cases.iter().find(|c| c.truth.is_none()) {
        return Err(Error::Dataset("evaluation requires ground truth".into()).in_case(&c.id));
    }
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let folds = kfold_split(&ids, k, seed)?;
    let stacks = prepare_stacks(cases, [reference, candidate])?;
    let names = arm_names(reference, candidate);
    let position = |id: &str| ids.iter().position(|x| x == id).expect("fold ids come from the case list");

    let per_fold: Vec<Vec<DiceRow>> = folds
        .par_iter()
        .map(|fold| {
            let train: Vec<usize> = fold.train.iter().map(|id| position(id)).collect();
            let test: Vec<usize> = fold.test.iter().map(|id| position(id)).collect();
            let fold_seed = seed.wrapping_add(fold.index as u64);
            let mut rows = Vec::new();
            for (arm, config) in [reference, candidate].into_iter().enumerate() {
                let train_cases: Vec<&CaseData> = train.iter().map(|&i| &cases[i]).collect();
                let train_stacks: Vec<&FeatureStack> = train.iter().map(|&i| &stacks[i][arm]).collect();
                let forest = train_prepared(&train_cases, &train_stacks, config, fold_seed)?;
                for &i in &test {
                    let case = &cases[i];
                    let pred = predict_prepared(case, &stacks[i][arm], &forest, config)?;
                    let truth = case.truth.as_ref().expect("checked above");
                    rows.extend(score_case(&case.id, &names[arm], Some(fold.index), &pred, truth)?);
                }
                log::info!("fold {} {}: trained and scored {} cases", fold.index, names[arm], test.len());
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<DiceRow> = per_fold.into_iter().flatten().collect();
    rows.sort_by_key(|r| (position(&r.case), r.mode != names[0], r.class != Target::Right.as_str()));
    let mut report = DiceReport::from_rows(names.to_vec(), rows);
    report.folds = Some(k);
    report.seed = Some(seed);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use proptest::prelude::*;

    fn labels(dims: [usize; 3], values: Vec<u8>) -> LabelVolume {
        LabelVolume::new(Geometry::with_dims(dims).unwrap(), values).unwrap()
    }

    #[test]
    fn dice_conventions() {
        let empty = labels([4, 1, 1], vec![0; 4]);
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        let one = labels([4, 1, 1], vec![1, 0, 0, 0]);
        assert_eq!(dice(&one, &empty, 1).unwrap(), 0.0);
        assert_eq!(dice(&empty, &one, 1).unwrap(), 0.0);
        let other = labels([2, 2, 1], vec![0; 4]);
        assert!(matches!(dice(&one, &other, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn kfold_uneven_sizes() {
        let ids: Vec<String> = (0..12).map(|i| i.to_string()).collect();
        let folds = kfold_split(&ids, 5, 1).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2, 2]);
        assert!(kfold_split(&ids, 1, 1).is_err());
        assert!(kfold_split(&ids, 13, 1).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn comparison_accounting() {
        let row = |case: &str, class: &str, mode: &str, dice: f64| DiceRow {
            case: case.into(),
            class: class.into(),
            mode: mode.into(),
            dice,
            fold: None,
        };
        let rows = vec![
            row("a", "right", "x", 0.5),
            row("a", "right", "y", 0.75),
            row("b", "right", "x", 0.8),
            row("b", "right", "y", 0.6),
            row("c", "right", "x", 0.9),
            row("c", "right", "y", 0.9),
        ];
        let r = DiceReport::from_rows(vec!["x".into(), "y".into()], rows);
        let c = r.comparison(Target::Right).unwrap();
        assert_eq!((c.wins, c.losses, c.ties), (1, 1, 1));
        assert!((c.mean_absolute_improvement_in_wins.unwrap() - 0.25).abs() < 1e-12);
        assert!((c.mean_relative_improvement_in_wins.unwrap() - 0.5).abs() < 1e-12);
        assert!((c.mean_absolute_change_in_losses.unwrap() + 0.2).abs() < 1e-12);
        assert!((c.mean_absolute_improvement - 0.05 / 3.0).abs() < 1e-12);
        assert!(r.comparison(Target::Left).is_none());
        assert_eq!(r.summary("x", Target::Right).unwrap().median, 0.8);
    }

    #[test]
    fn report_files_have_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let truth = labels([2, 1, 1], vec![1, 2]);
        let rows = score_case("c1", "prediction", None, &truth, &truth).unwrap();
        let report = DiceReport::from_rows(vec!["prediction".into()], rows);
        report.write(dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv, "case,class,mode,dice\nc1,right,prediction,1\nc1,left,prediction,1\n");
        let back: DiceReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, report);
    }

    proptest! {
        #[test]
        fn dice_is_symmetric_and_bounded(a in proptest::collection::vec(0u8..3, 27), b in proptest::collection::vec(0u8..3, 27)) {
            let (pa, pb) = (labels([3, 3, 3], a), labels([3, 3, 3], b));
            for c in 1..3 {
                let d = dice(&pa, &pb, c).unwrap();
                prop_assert_eq!(d, dice(&pb, &pa, c).unwrap());
                prop_assert!((0.0..=1.0).contains(&d));
                prop_assert_eq!(d == 1.0, (0..27).all(|i| (pa.labels()[i] == c) == (pb.labels()[i] == c)));
            }
        }

        #[test]
        fn kfold_is_a_partition(n in 2usize..40, k_off in 0usize..10, seed in any::<u64>()) {
            let k = 2 + k_off % (n - 1);
            let ids: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
            let folds = kfold_split(&ids, k, seed).unwrap();
            let mut seen: Vec<String> = folds.iter().flat_map(|f| f.test.clone()).collect();
            seen.sort();
            let mut all = ids.clone();
            all.sort();
            prop_assert_eq!(seen, all);
            let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for f in &folds {
                prop_assert_eq!(f.train.len() + f.test.len(), n);
                prop_assert!(f.train.iter().all(|t| !f.test.contains(t)));
            }
            prop_assert_eq!(kfold_split(&ids, k, seed).unwrap(), folds);
        }
    }
}
