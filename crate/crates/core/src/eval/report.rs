//! Metric report over paired generations and ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::extractor::FeatureExtractor;
use super::metrics::{
    default_diversity_subset, diversity, fid_detailed, key_dist, mm_dist, r_precision, recon_loss, vel_loss_with,
    VelMode,
};
use crate::checkpoint::write_atomic;
use crate::data::MotionSequence;
use crate::error::{Error, Result};
use crate::generate::{BatchOutput, SamplingConfig};
use crate::instruct::TaskKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub r_precision_pool: usize,
    /// Diversity subset size; `min(300, n / 2)` when unset.
    pub diversity_subset: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub vel_mode: VelMode,
    /// Frames per motion token; last-pose windows end on a multiple of it.
    pub downsample: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            r_precision_pool: 32,
            diversity_subset: None,
            seed: 0,
            vel_mode: VelMode::Boundary,
            downsample: 4,
        }
    }
}

/// One evaluated request: ground truth, its condition and what was
/// generated for it (absent on failure). Motions are in normalized space.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub motion_id: String,
    pub text: String,
    pub task: TaskKind,
    pub gt: MotionSequence,
    /// Condition frames and their positions in `gt`.
    pub condition: Option<(MotionSequence, Vec<usize>)>,
    pub generated: Option<MotionSequence>,
}

pub fn pairs_from_batch(batch: &BatchOutput) -> Vec<EvalPair> {
    batch
        .items
        .iter()
        .map(|i| EvalPair {
            motion_id: i.motion_id.clone(),
            text: i.text.clone(),
            task: i.task,
            gt: i.gt.clone(),
            condition: i.condition.as_ref().map(|c| (c.frames.clone(), c.positions.clone())),
            generated: i.outcome.as_ref().ok().map(|r| r.motion.clone()),
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub total: usize,
    pub evaluated: usize,
    /// Requests whose generation failed; left out of every metric.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskKind>,
    pub fid: Option<f64>,
    pub mm_dist: Option<f64>,
    /// Top-1, top-2 and top-3 accuracy.
    pub r_precision: Option<[f64; 3]>,
    pub diversity: Option<f64>,
    pub recon: Option<f64>,
    pub vel: Option<f64>,
    pub dist: Option<f64>,
    /// Reason for every absent metric.
    pub absent: BTreeMap<String, String>,
    pub counts: EvalCounts,
    pub fid_jitter: bool,
    pub sampling: Option<SamplingConfig>,
    pub eval: EvalConfig,
    pub version: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("bad report: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.to_json();
        s.push('\n');
        write_atomic(path, s.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| Error::data(path, e.to_string()))
    }
}

fn record(slot: &mut Option<f64>, absent: &mut BTreeMap<String, String>, name: &str, value: Result<f64>) {
    match value {
        Ok(v) if v.is_finite() => *slot = Some(v),
        Ok(v) => {
            absent.insert(name.into(), format!("non-finite value {v}"));
        }
        Err(e) => {
            absent.insert(name.into(), e.to_string());
        }
    }
}

fn mean(values: Vec<f64>, what: &str) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain(format!("no sample qualifies for {what}")));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Generated motion and ground truth cut to a common span, with the
/// condition positions re-indexed into it. Initial conditions align the
/// starts; last conditions align the ends of the last whole downsample
/// window of each.
fn aligned(
    pair: &EvalPair,
    gen: &MotionSequence,
    downsample: usize,
) -> Result<(MotionSequence, MotionSequence, Vec<usize>)> {
    let (_, positions) = pair
        .condition
        .as_ref()
        .ok_or_else(|| Error::domain("pair has no condition"))?;
    match pair.task {
        TaskKind::TextInit => Ok((gen.clone(), pair.gt.clone(), positions.clone())),
        TaskKind::TextLast => {
            let end = positions.iter().max().map(|p| p + 1).unwrap_or(0);
            let gen_end = gen.len() / downsample.max(1) * downsample.max(1);
            let m = gen_end.min(end);
            let start = end - m;
            if positions.iter().any(|&p| p < start) {
                return Err(Error::domain("generated motion is shorter than the condition window"));
            }
            let gen_tail = gen.window(gen_end - m, gen_end)?;
            let gt_tail = pair.gt.window(start, end)?;
            Ok((gen_tail, gt_tail, positions.iter().map(|p| p - start).collect()))
        }
        _ => Err(Error::domain("recon and vel apply to initial and last conditions")),
    }
}

/// Computes every metric whose preconditions hold; absent metrics carry a
/// reason.
pub fn evaluate(
    pairs: &[EvalPair],
    extractor: &FeatureExtractor,
    config: &EvalConfig,
    sampling: Option<&SamplingConfig>,
) -> Result<EvalReport> {
    let mut absent = BTreeMap::new();
    let ok: Vec<&EvalPair> = pairs.iter().filter(|p| p.generated.is_some()).collect();
    let mut tasks: Vec<TaskKind> = pairs.iter().map(|p| p.task).collect();
    tasks.sort();
    tasks.dedup();
    let mut report = EvalReport {
        tasks,
        fid: None,
        mm_dist: None,
        r_precision: None,
        diversity: None,
        recon: None,
        vel: None,
        dist: None,
        absent: BTreeMap::new(),
        counts: EvalCounts {
            total: pairs.len(),
            evaluated: ok.len(),
            excluded: pairs.len() - ok.len(),
        },
        fid_jitter: false,
        sampling: sampling.cloned(),
        eval: config.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };

    if ok.is_empty() {
        for name in ["fid", "mm_dist", "r_precision", "diversity", "recon", "vel", "dist"] {
            absent.insert(name.to_string(), "no successful generations".to_string());
        }
        report.absent = absent;
        return Ok(report);
    }

    let gens: Vec<&MotionSequence> = ok.iter().map(|p| p.generated.as_ref().expect("filtered")).collect();
    let gts: Vec<&MotionSequence> = pairs.iter().map(|p| &p.gt).collect();
    let texts: Vec<&str> = ok.iter().map(|p| p.text.as_str()).collect();
    let gen_f = extractor.motion_features(&gens)?;
    let gt_f = extractor.motion_features(&gts)?;
    let text_f = extractor.text_features(&texts);

    match fid_detailed(&gt_f, &gen_f) {
        Ok(f) => {
            report.fid = Some(f.value);
            report.fid_jitter = f.jittered;
        }
        Err(e) => {
            absent.insert("fid".into(), e.to_string());
        }
    }
    record(&mut report.mm_dist, &mut absent, "mm_dist", mm_dist(&text_f, &gen_f));
    match r_precision(&gen_f, &text_f, config.r_precision_pool, 3, config.seed) {
        Ok(v) => report.r_precision = Some([v[0], v[1], v[2]]),
        Err(e) => {
            absent.insert("r_precision".into(), e.to_string());
        }
    }
    let subset = config
        .diversity_subset
        .unwrap_or_else(|| default_diversity_subset(gen_f.nrows()));
    record(
        &mut report.diversity,
        &mut absent,
        "diversity",
        diversity(&gen_f, subset, config.seed),
    );

    let boundary: Vec<(&EvalPair, &MotionSequence)> = ok
        .iter()
        .filter(|p| matches!(p.task, TaskKind::TextInit | TaskKind::TextLast))
        .map(|p| (*p, p.generated.as_ref().expect("filtered")))
        .collect();
    if boundary.is_empty() {
        let reason = "no initial- or last-pose requests".to_string();
        absent.insert("recon".into(), reason.clone());
        absent.insert("vel".into(), reason);
    } else {
        let mut recons = Vec::new();
        let mut vels = Vec::new();
        for (pair, gen) in boundary {
            let Ok((g, gt, positions)) = aligned(pair, gen, config.downsample) else {
                continue;
            };
            let (frames, _) = pair.condition.as_ref().expect("checked by aligned");
            if let Ok(r) = recon_loss(&g, frames, &positions) {
                recons.push(r);
            }
            if let Ok(v) = vel_loss_with(&g, &gt, &positions, config.vel_mode) {
                vels.push(v);
            }
        }
        record(&mut report.recon, &mut absent, "recon", mean(recons, "recon"));
        record(&mut report.vel, &mut absent, "vel", mean(vels, "vel"));
    }

    let keyed: Vec<f64> = ok
        .iter()
        .filter(|p| p.task == TaskKind::TextKey)
        .filter_map(|p| {
            let (frames, _) = p.condition.as_ref()?;
            key_dist(p.generated.as_ref()?, frames).ok()
        })
        .collect();
    if ok.iter().any(|p| p.task == TaskKind::TextKey) {
        record(&mut report.dist, &mut absent, "dist", mean(keyed, "dist"));
    } else {
        absent.insert("dist".into(), "no key-pose requests".into());
    }

    report.absent = absent;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus_with, Split, SynthConfig};
    use crate::eval::{train_bi_encoder, ExtractorConfig};

    fn setup() -> (Vec<EvalPair>, FeatureExtractor) {
        let corpus = synth_corpus_with(
            3,
            &SynthConfig {
                n_clips: 16,
                feature_dim: 6,
                length_range: (24, 32),
                ..SynthConfig::default()
            },
        )
        .unwrap();
        let x = train_bi_encoder(
            &corpus,
            &ExtractorConfig {
                steps: 5,
                feature_dim: 8,
                hidden: 16,
                ..ExtractorConfig::default()
            },
        )
        .unwrap();
        let stats = x.stats().clone();
        let pairs = corpus
            .split_annotations(Split::Train)
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let gt = crate::data::normalize(corpus.motion(&a.motion_id).unwrap(), &stats).unwrap();
                let task = if i % 2 == 0 {
                    TaskKind::TextInit
                } else {
                    TaskKind::TextLast
                };
                let end = gt.len() / 4 * 4;
                let positions: Vec<usize> = if task == TaskKind::TextInit {
                    (0..4).collect()
                } else {
                    (end - 4..end).collect()
                };
                EvalPair {
                    motion_id: a.motion_id.clone(),
                    text: a.text.clone(),
                    task,
                    condition: Some((gt.select(&positions).unwrap(), positions)),
                    generated: Some(gt.clone()),
                    gt,
                }
            })
            .collect();
        (pairs, x)
    }

    fn config() -> EvalConfig {
        EvalConfig {
            r_precision_pool: 8,
            ..EvalConfig::default()
        }
    }

    #[test]
    fn ground_truth_against_itself() {
        let (pairs, x) = setup();
        let r = evaluate(&pairs, &x, &config(), None).unwrap();
        assert!(r.fid.unwrap() < 1e-6);
        assert_eq!(r.recon, Some(0.0));
        assert_eq!(r.vel, Some(0.0));
        assert_eq!(r.dist, None);
        assert!(r.absent.contains_key("dist"));
        let gts: Vec<&MotionSequence> = pairs.iter().map(|p| &p.gt).collect();
        let texts: Vec<&str> = pairs.iter().map(|p| p.text.as_str()).collect();
        let expected = mm_dist(&x.text_features(&texts), &x.motion_features(&gts).unwrap()).unwrap();
        assert_eq!(r.mm_dist, Some(expected));
        assert_eq!(
            r.counts,
            EvalCounts {
                total: pairs.len(),
                evaluated: pairs.len(),
                excluded: 0
            }
        );
        assert_eq!(r.tasks, vec![TaskKind::TextInit, TaskKind::TextLast]);
    }

    #[test]
    fn empty_generation_set_reports_everything_absent() {
        let (mut pairs, x) = setup();
        pairs.iter_mut().for_each(|p| p.generated = None);
        let r = evaluate(&pairs, &x, &config(), None).unwrap();
        assert_eq!(r.counts.excluded, pairs.len());
        assert_eq!(r.counts.evaluated, 0);
        assert!([r.fid, r.mm_dist, r.diversity, r.recon, r.vel, r.dist]
            .iter()
            .all(Option::is_none));
        assert!(r.r_precision.is_none());
        assert_eq!(r.absent.len(), 7);
    }

    #[test]
    fn failures_are_excluded_not_substituted() {
        let (mut pairs, x) = setup();
        pairs[0].generated = None;
        pairs[3].generated = None;
        let r = evaluate(&pairs, &x, &config(), None).unwrap();
        assert_eq!(r.counts.excluded, 2);
        assert_eq!(r.counts.evaluated, pairs.len() - 2);
        assert_eq!(r.recon, Some(0.0));
    }

    #[test]
    fn last_pose_alignment_uses_the_generation_tail() {
        let (pairs, x) = setup();
        let mut p = pairs.iter().find(|p| p.task == TaskKind::TextLast).unwrap().clone();
        let (frames, positions) = p.condition.clone().unwrap();
        // generation longer than gt, ending in exactly the condition frames
        let start = positions[0] - 4;
        let head = p.gt.window(0, start + 4).unwrap();
        let mut rows = head.frames().clone();
        for _ in 0..3 {
            rows.append(ndarray::Axis(0), head.frames().view()).unwrap();
        }
        rows.append(ndarray::Axis(0), frames.frames().view()).unwrap();
        p.generated = Some(MotionSequence::new(rows, p.gt.fps, "g").unwrap());
        let r = evaluate(&[p.clone(), p], &x, &config(), None).unwrap();
        assert_eq!(r.recon, Some(0.0));
    }

    #[test]
    fn report_round_trips_exactly() {
        let (pairs, x) = setup();
        let r = evaluate(&pairs, &x, &config(), Some(&SamplingConfig::top_k(12, 7))).unwrap();
        let text = r.to_json();
        let back = EvalReport::from_json(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json(), text);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        r.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), r);
        assert!(EvalReport::from_json("{\"fid\": 1}").is_err());
    }
}
