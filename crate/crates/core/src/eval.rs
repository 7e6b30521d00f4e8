//! Scoring manifests, per-source metrics, the robustness grid and CSV exports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::augment::{robustness_suite, PerturbationSpec};
use crate::binary::predict_prob;
use crate::checkpoint::{Model, ModelKind};
use crate::dataset::{DatasetManifest, ImageStore, Label};
use crate::error::{invalid, Result};
use crate::gmm::{feature_matrix, fit_gmm, FitReport, GmmConfig, GmmModel};
use crate::imaging::Image;
use crate::metrics::{compute_accuracy, compute_ap, mean};

/// A trained detector. Scores grow with the evidence for "generated".
pub enum Detector {
    /// GMM on pretext features; score is the negative log-likelihood.
    OneClass { model: Model, gmm: GmmModel },
    /// Sigmoid head; score is `1 − p(photographic)`.
    Binary { model: Model },
}

impl Detector {
    pub fn new_one_class(model: Model, gmm: GmmModel) -> Result<Self> {
        if gmm.feature_dim() != model.backbone.token_dim() {
            return Err(invalid(format!(
                "GMM over {}-dim features for a backbone producing {}",
                gmm.feature_dim(),
                model.backbone.token_dim()
            )));
        }
        Ok(Self::OneClass { model, gmm })
    }

    pub fn new_binary(model: Model) -> Result<Self> {
        if model.kind != ModelKind::Binary {
            return Err(invalid("checkpoint is not a binary detector"));
        }
        Ok(Self::Binary { model })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Detector::OneClass { .. } => "one-class",
            Detector::Binary { .. } => "binary",
        }
    }

    pub fn model(&self) -> &Model {
        match self {
            Detector::OneClass { model, .. } | Detector::Binary { model } => model,
        }
    }

    pub fn score(&self, image: &Image) -> Result<f64> {
        match self {
            Detector::OneClass { model, gmm } => {
                let v = model.backbone.embed(image)?;
                let ll = gmm.score_batch(feature_matrix(&[v])?.view())?[0];
                Ok(-ll)
            }
            Detector::Binary { model } => Ok(1.0 - predict_prob(model, image)?),
        }
    }

    pub fn is_generated(&self, score: f64) -> bool {
        match self {
            Detector::OneClass { gmm, .. } => gmm.is_generated(-score),
            Detector::Binary { .. } => score > 0.5,
        }
    }

    pub fn digests(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        out.insert("checkpoint".to_string(), self.model().digest()?);
        if let Detector::OneClass { gmm, .. } = self {
            out.insert("gmm".to_string(), gmm.digest()?);
        }
        Ok(out)
    }
}

/// Inference-mode features of every photograph in `manifest`.
pub fn photographic_features(manifest: &DatasetManifest, store: &dyn ImageStore, model: &Model) -> Result<Vec<Vec<f32>>> {
    manifest
        .entries
        .iter()
        .filter(|e| e.label == Label::Photographic)
        .map(|e| model.backbone.embed(&store.load(&e.image_path)?))
        .collect()
}

/// Fits the one-class GMM on the photographs of `manifest`.
pub fn fit_one_class(
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
    model: &Model,
    config: &GmmConfig,
) -> Result<(GmmModel, FitReport)> {
    let features = photographic_features(manifest, store, model)?;
    if features.is_empty() {
        return Err(invalid("no photographs to fit"));
    }
    fit_gmm(feature_matrix(&features)?.view(), config)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredImage {
    pub image_path: String,
    pub label: Label,
    pub source: String,
    pub score: f64,
    pub generated: bool,
}

/// Scores every image, after `perturbation` when given. Downsampling is
/// floored at the detector's patch size.
pub fn score_manifest(
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
    detector: &Detector,
    perturbation: Option<&PerturbationSpec>,
) -> Result<Vec<ScoredImage>> {
    let floor = detector.model().backbone.config.patch_size;
    manifest
        .entries
        .iter()
        .map(|e| {
            let mut img = store.load(&e.image_path)?;
            if let Some(p) = perturbation {
                img = p.apply_with_floor(&img, floor)?;
            }
            let score = detector.score(&img)?;
            Ok(ScoredImage {
                image_path: e.image_path.clone(),
                label: e.label,
                source: e.source.clone(),
                score,
                generated: detector.is_generated(score),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceMetrics {
    pub source: String,
    pub photographs: usize,
    pub generated: usize,
    pub accuracy: f64,
    /// Absent when the group holds no generated image.
    pub average_precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// One row per generated source, each scored against all photographs.
    /// Without generated images there is a single row for the photographs.
    pub sources: Vec<SourceMetrics>,
    pub photographic_accuracy: Option<f64>,
    pub mean_accuracy: f64,
    pub mean_ap: Option<f64>,
}

fn group_metrics(source: &str, items: &[&ScoredImage]) -> Result<SourceMetrics> {
    let predicted: Vec<bool> = items.iter().map(|s| s.generated).collect();
    let truth: Vec<bool> = items.iter().map(|s| s.label == Label::Generated).collect();
    let n_gen = truth.iter().filter(|&&t| t).count();
    let scores: Vec<f64> = items.iter().map(|s| s.score).collect();
    Ok(SourceMetrics {
        source: source.to_string(),
        photographs: items.len() - n_gen,
        generated: n_gen,
        accuracy: compute_accuracy(&predicted, &truth)?,
        average_precision: if n_gen > 0 { Some(compute_ap(&scores, &truth)?) } else { None },
    })
}

pub fn summarize(scored: &[ScoredImage]) -> Result<Summary> {
    if scored.is_empty() {
        return Err(invalid("nothing to summarize"));
    }
    let photos: Vec<&ScoredImage> = scored.iter().filter(|s| s.label == Label::Photographic).collect();
    let mut by_source: BTreeMap<&str, Vec<&ScoredImage>> = BTreeMap::new();
    for s in scored.iter().filter(|s| s.label == Label::Generated) {
        by_source.entry(&s.source).or_default().push(s);
    }
    let mut sources = Vec::new();
    if by_source.is_empty() {
        sources.push(group_metrics("photographic", &photos)?);
    }
    for (name, gen) in by_source {
        let mut items = photos.clone();
        items.extend(gen);
        sources.push(group_metrics(name, &items)?);
    }
    let photographic_accuracy = if photos.is_empty() {
        None
    } else {
        Some(photos.iter().filter(|s| !s.generated).count() as f64 / photos.len() as f64)
    };
    let accs: Vec<f64> = sources.iter().map(|s| s.accuracy).collect();
    let aps: Vec<f64> = sources.iter().filter_map(|s| s.average_precision).collect();
    Ok(Summary {
        mean_accuracy: mean(&accs).expect("at least one group"),
        mean_ap: mean(&aps),
        sources,
        photographic_accuracy,
    })
}

pub fn evaluate(
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
    detector: &Detector,
    perturbation: Option<&PerturbationSpec>,
) -> Result<Summary> {
    summarize(&score_manifest(manifest, store, detector, perturbation)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    /// `clean` or a perturbation label such as `jpeg95`.
    pub condition: String,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector: String,
    pub seed: u64,
    pub digests: BTreeMap<String, String>,
    pub images: usize,
    pub conditions: Vec<Condition>,
}

/// Clean scores plus, with `robustness`, the JPEG 95 / blur 1 / ×2 downsampling grid.
pub fn evaluate_report(
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
    detector: &Detector,
    robustness: bool,
    seed: u64,
) -> Result<EvalReport> {
    let mut conditions = vec![Condition {
        condition: "clean".to_string(),
        summary: evaluate(manifest, store, detector, None)?,
    }];
    if robustness {
        for p in robustness_suite() {
            conditions.push(Condition {
                condition: p.label(),
                summary: evaluate(manifest, store, detector, Some(&p))?,
            });
        }
    }
    Ok(EvalReport {
        detector: detector.name().to_string(),
        seed,
        digests: detector.digests()?,
        images: manifest.len(),
        conditions,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per condition and source, plus a `mean` row per condition.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["condition", "source", "photographs", "generated", "accuracy", "average_precision"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.conditions {
            for s in &c.summary.sources {
                w.write_record([
                    c.condition.clone(),
                    s.source.clone(),
                    s.photographs.to_string(),
                    s.generated.to_string(),
                    s.accuracy.to_string(),
                    opt(s.average_precision),
                ])?;
            }
            w.write_record([
                c.condition.clone(),
                "mean".to_string(),
                String::new(),
                String::new(),
                c.summary.mean_accuracy.to_string(),
                opt(c.summary.mean_ap),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const SCORE_HEADER: [&str; 4] = ["image_path", "label", "score", "decision"];

pub fn write_scores_csv(scored: &[ScoredImage], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SCORE_HEADER)?;
    for s in scored {
        let decision = if s.generated { Label::Generated } else { Label::Photographic };
        w.write_record([s.image_path.as_str(), s.label.as_str(), &s.score.to_string(), decision.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_scores(manifest: &DatasetManifest, store: &dyn ImageStore, detector: &Detector, out: impl Write) -> Result<Vec<ScoredImage>> {
    let scored = score_manifest(manifest, store, detector, None)?;
    write_scores_csv(&scored, out)?;
    Ok(scored)
}

/// Inference-mode features: `image_path, label, f0 … f{D−1}`.
pub fn export_features(manifest: &DatasetManifest, store: &dyn ImageStore, model: &Model, out: impl Write) -> Result<()> {
    let d = model.backbone.token_dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["image_path".to_string(), "label".to_string()];
    header.extend((0..d).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for e in &manifest.entries {
        let v = model.backbone.embed(&store.load(&e.image_path)?)?;
        let mut row = vec![e.image_path.clone(), e.label.as_str().to_string()];
        row.extend(v.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(label: Label, source: &str, score: f64, generated: bool) -> ScoredImage {
        ScoredImage {
            image_path: format!("{source}/{score}"),
            label,
            source: source.to_string(),
            score,
            generated,
        }
    }

    #[test]
    fn per_source_rows_share_the_photographs() {
        let scored = vec![
            item(Label::Photographic, "cam", 0.1, false),
            item(Label::Photographic, "cam", 0.6, true),
            item(Label::Generated, "a", 0.9, true),
            item(Label::Generated, "a", 0.8, true),
            item(Label::Generated, "b", 0.2, false),
        ];
        let s = summarize(&scored).unwrap();
        assert_eq!(s.sources.len(), 2);
        let a = &s.sources[0];
        assert_eq!((a.source.as_str(), a.photographs, a.generated), ("a", 2, 2));
        assert_eq!(a.accuracy, 0.75);
        assert_eq!(a.average_precision, Some(1.0));
        let b = &s.sources[1];
        assert_eq!(b.accuracy, 1.0 / 3.0);
        // the positive ranks second, behind the 0.6 photograph
        assert_eq!(b.average_precision, Some(0.5));
        assert_eq!(s.photographic_accuracy, Some(0.5));
        assert!((s.mean_ap.unwrap() - 0.75).abs() < 1e-12);
        assert!((s.mean_accuracy - (0.75 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn photographs_only() {
        let s = summarize(&[item(Label::Photographic, "cam", 0.1, false)]).unwrap();
        assert_eq!(s.sources[0].average_precision, None);
        assert_eq!(s.mean_ap, None);
        assert_eq!(s.mean_accuracy, 1.0);
    }

    #[test]
    fn score_csv_layout() {
        let scored = vec![item(Label::Generated, "a", 0.25, true)];
        let mut buf = Vec::new();
        write_scores_csv(&scored, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "image_path,label,score,decision\na/0.25,generated,0.25,generated\n");
    }
}
