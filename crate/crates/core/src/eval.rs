//! Accuracy, explanation drift and prototype explanations.

use std::io::Write;
use std::path::{Path, PathBuf};

use cipnet_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{self, Sample, TaskStream};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, mask_presence, softmax_rows, PixelRect, PrototypeModel};
use crate::registry::PrototypeSet;

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Task identity known: only head `t` is consulted.
    Til(usize),
    Cil,
}

fn stack<T: Scalar>(samples: &[Sample], size: usize) -> Tensor<T> {
    let px: Vec<&[f32]> = samples.iter().map(|s| s.pixels.as_slice()).collect();
    data::to_tensor(&px, size)
}

/// Unmasked presence vectors `[N, D]` plus flat argmax locations `[N * D]`.
pub fn presence<T: Scalar>(model: &PrototypeModel<T>, samples: &[Sample]) -> Result<(Tensor<T>, Vec<usize>)> {
    let d = model.prototypes();
    let size = model.config.image_size;
    let mut data = Vec::with_capacity(samples.len() * d);
    let mut locations = Vec::with_capacity(samples.len() * d);
    for chunk in samples.chunks(EVAL_CHUNK) {
        let (p, idx) = model.presence_with_locations(&stack(chunk, size))?;
        data.extend_from_slice(p.data());
        locations.extend(idx);
    }
    Ok((Tensor::new(vec![samples.len(), d], data)?, locations))
}

/// Global class predictions from presence vectors under `scenario`.
pub fn classify<T: Scalar>(
    model: &PrototypeModel<T>,
    presence: &Tensor<T>,
    scenario: Scenario,
    threshold: f64,
) -> Result<Vec<usize>> {
    let masked = mask_presence(presence, threshold);
    match scenario {
        Scenario::Til(t) => {
            let head = model
                .heads
                .get(t)
                .ok_or_else(|| Error::Range(format!("task {t} but only {} heads trained", model.heads.len())))?;
            let scores = model.scores_from_presence(&masked, Some(t))?;
            Ok(argmax_rows(&scores).into_iter().map(|c| head.class_ids[c]).collect())
        }
        Scenario::Cil => {
            if model.heads.is_empty() {
                return Err(Error::Range("model has no trained heads".into()));
            }
            let probs = softmax_rows(&model.scores_from_presence(&masked, None)?);
            let ids: Vec<usize> = model.heads.iter().flat_map(|h| h.class_ids.iter().copied()).collect();
            Ok(argmax_rows(&probs).into_iter().map(|c| ids[c]).collect())
        }
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Unweighted mean of per-task accuracies.
pub fn final_average(per_task: &[f64]) -> f64 {
    per_task.iter().sum::<f64>() / per_task.len().max(1) as f64
}

/// TIL and CIL accuracy on the test split of every task in `0..=up_to`.
pub fn evaluate_tasks<T: Scalar>(
    model: &PrototypeModel<T>,
    tests: &[&[Sample]],
    threshold: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut til = Vec::with_capacity(tests.len());
    let mut cil = Vec::with_capacity(tests.len());
    for (t, samples) in tests.iter().enumerate() {
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let (p, _) = presence(model, samples)?;
        til.push(accuracy(&classify(model, &p, Scenario::Til(t), threshold)?, &labels));
        cil.push(accuracy(&classify(model, &p, Scenario::Cil, threshold)?, &labels));
    }
    Ok((til, cil))
}

/// Presence vectors of a fixed probe set recorded after every task.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftProbe {
    pub labels: Vec<usize>,
    pub prototypes: usize,
    /// One `N x D` row-major block per checkpoint.
    pub checkpoints: Vec<Vec<f64>>,
}

impl DriftProbe {
    pub fn new(labels: Vec<usize>, prototypes: usize) -> Self {
        Self {
            labels,
            prototypes,
            checkpoints: Vec::new(),
        }
    }

    pub fn record<T: Scalar>(&mut self, presence: &Tensor<T>) -> Result<()> {
        if presence.shape() != [self.labels.len(), self.prototypes] {
            return Err(Error::Contract(format!(
                "probe presence {:?} does not match {} probes x {} prototypes",
                presence.shape(),
                self.labels.len(),
                self.prototypes
            )));
        }
        self.checkpoints.push(presence.to_f64_vec());
        Ok(())
    }
}

/// Mean over classes of the per-class mean of `|a - b|` over probes and the
/// prototypes in `subset` (all when `None`).
pub fn drift_between(a: &[f64], b: &[f64], labels: &[usize], d: usize, subset: Option<&PrototypeSet>) -> f64 {
    let protos: Vec<usize> = match subset {
        Some(s) => s.indices(),
        None => (0..d).collect(),
    };
    if protos.is_empty() || labels.is_empty() {
        return 0.0;
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for &c in &classes {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let sum: f64 = rows
            .iter()
            .flat_map(|&i| protos.iter().map(move |&k| (a[i * d + k] - b[i * d + k]).abs()))
            .sum();
        total += sum / (rows.len() * protos.len()) as f64;
    }
    total / classes.len() as f64
}

/// Drift of each checkpoint against the first; entry 0 is 0.
pub fn drift_vs_first(probe: &DriftProbe, subset: Option<&PrototypeSet>) -> Vec<f64> {
    let Some(first) = probe.checkpoints.first() else {
        return Vec::new();
    };
    probe
        .checkpoints
        .iter()
        .map(|c| drift_between(c, first, &probe.labels, probe.prototypes, subset))
        .collect()
}

/// Drift of checkpoint `t` against `t - 1`, starting at the second checkpoint.
pub fn drift_vs_previous(probe: &DriftProbe, subset: Option<&PrototypeSet>) -> Vec<f64> {
    probe
        .checkpoints
        .windows(2)
        .map(|w| drift_between(&w[1], &w[0], &probe.labels, probe.prototypes, subset))
        .collect()
}

/// `m_d = p_d * max_c w[c, d]` over the head(s) selected by `scenario`.
pub fn prototype_importance<T: Scalar>(p: &[f64], model: &PrototypeModel<T>, scenario: Scenario) -> Result<Vec<f64>> {
    let d = model.prototypes();
    if p.len() != d {
        return Err(Error::Contract(format!("presence has {} entries, model {d} prototypes", p.len())));
    }
    let heads: Vec<usize> = match scenario {
        Scenario::Til(t) if t < model.heads.len() => vec![t],
        Scenario::Til(t) => return Err(Error::Range(format!("no head {t}"))),
        Scenario::Cil => (0..model.heads.len()).collect(),
    };
    let mut best = vec![f64::NEG_INFINITY; d];
    for h in heads {
        for row in model.heads[h].weights.data().chunks_exact(d) {
            for (b, &w) in best.iter_mut().zip(row) {
                *b = b.max(w.f64());
            }
        }
    }
    Ok(p.iter().zip(&best).map(|(&pd, &w)| if pd == 0.0 { 0.0 } else { pd * w }).collect())
}

/// One manifest line of a prototype gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub proto_id: usize,
    pub image_id: usize,
    pub task: usize,
    pub score: f64,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

fn crop(px: &[f32], size: usize, r: &PixelRect) -> Vec<f32> {
    let plane = size * size;
    let mut out = Vec::with_capacity(3 * r.w * r.h);
    for ch in 0..3 {
        for y in r.y..r.y + r.h {
            let row = ch * plane + y * size;
            out.extend_from_slice(&px[row + r.x..row + r.x + r.w]);
        }
    }
    out
}

fn save_rect_image(px: &[f32], w: usize, h: usize, path: &Path) -> Result<()> {
    let plane = w * h;
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| (px[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Top-`k` training patches per prototype by importance. In TIL mode the
/// search covers only task `t`'s training images.
pub fn prototype_gallery<T: Scalar>(
    model: &PrototypeModel<T>,
    stream: &TaskStream,
    scenario: Scenario,
    top_k: usize,
    importance_threshold: f64,
) -> Result<Vec<GalleryEntry>> {
    let tasks: Vec<usize> = match scenario {
        Scenario::Til(t) => vec![t],
        Scenario::Cil => (0..model.heads.len().min(stream.num_tasks())).collect(),
    };
    let d = model.prototypes();
    let rf = model.config.receptive_field();
    let fs = model.config.feature_size();
    let size = model.config.image_size;
    let mut candidates: Vec<Vec<GalleryEntry>> = vec![Vec::new(); d];
    for &t in &tasks {
        let samples = &stream.task(t).train;
        let (p, loc) = presence(model, samples)?;
        for (i, s) in samples.iter().enumerate() {
            let row: Vec<f64> = p.row(i).iter().map(|v| v.f64()).collect();
            let m = prototype_importance(&row, model, scenario)?;
            for k in 0..d {
                if m[k] > importance_threshold {
                    let flat = loc[i * d + k];
                    let r = rf.rect(flat / fs, flat % fs, size);
                    candidates[k].push(GalleryEntry {
                        proto_id: k,
                        image_id: s.id,
                        task: t,
                        score: m[k],
                        x: r.x,
                        y: r.y,
                        w: r.w,
                        h: r.h,
                    });
                }
            }
        }
    }
    let mut out = Vec::new();
    for mut c in candidates {
        c.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image_id.cmp(&b.image_id)));
        out.extend(c.into_iter().take(top_k));
    }
    Ok(out)
}

/// Write gallery crops and `manifest.ndjson` under `dir`.
pub fn export_prototype_gallery<T: Scalar>(
    model: &PrototypeModel<T>,
    stream: &TaskStream,
    scenario: Scenario,
    top_k: usize,
    importance_threshold: f64,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let entries = prototype_gallery(model, stream, scenario, top_k, importance_threshold)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let size = model.config.image_size;
    let mut written = Vec::new();
    let manifest = dir.join("manifest.ndjson");
    let mut lines = Vec::new();
    for e in &entries {
        let sample = stream
            .task(e.task)
            .train
            .iter()
            .find(|s| s.id == e.image_id)
            .expect("gallery entry refers to a stream image");
        let rect = PixelRect { x: e.x, y: e.y, w: e.w, h: e.h };
        let path = dir.join(format!("proto{:03}_task{}_img{:05}.png", e.proto_id, e.task, e.image_id));
        save_rect_image(&crop(&sample.pixels, size, &rect), e.w, e.h, &path)?;
        written.push(path);
        writeln!(lines, "{}", serde_json::to_string(e).expect("entry serialises")).expect("vec write");
    }
    crate::persist::write_atomic(&manifest, &lines)?;
    written.push(manifest);
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedPrototype {
    pub proto_id: usize,
    pub presence: f64,
    pub importance: f64,
    pub row: usize,
    pub col: usize,
    pub rect: PixelRect,
    /// `(global class, weight)` for every class of the consulted heads.
    pub weights: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub scenario: Scenario,
    pub predicted: usize,
    pub prototypes: Vec<ExplainedPrototype>,
}

/// Activated prototypes of one image, most important first.
pub fn explain<T: Scalar>(
    model: &PrototypeModel<T>,
    pixels: &[f32],
    scenario: Scenario,
    presence_threshold: f64,
    importance_threshold: f64,
) -> Result<Explanation> {
    let size = model.config.image_size;
    let sample = Sample {
        id: 0,
        label: 0,
        pixels: pixels.to_vec(),
    };
    let (p, loc) = presence(model, std::slice::from_ref(&sample))?;
    let predicted = classify(model, &p, scenario, presence_threshold)?[0];
    let masked: Vec<f64> = mask_presence(&p, presence_threshold).to_f64_vec();
    let m = prototype_importance(&masked, model, scenario)?;
    let heads: Vec<usize> = match scenario {
        Scenario::Til(t) => vec![t],
        Scenario::Cil => (0..model.heads.len()).collect(),
    };
    let d = model.prototypes();
    let fs = model.config.feature_size();
    let rf = model.config.receptive_field();
    let mut prototypes: Vec<ExplainedPrototype> = (0..d)
        .filter(|&k| masked[k] > 0.0 && m[k] > importance_threshold)
        .map(|k| {
            let (row, col) = (loc[k] / fs, loc[k] % fs);
            let weights = heads
                .iter()
                .flat_map(|&h| {
                    let head = &model.heads[h];
                    head.class_ids
                        .iter()
                        .enumerate()
                        .map(move |(c, &id)| (id, head.weights.data()[c * d + k].f64()))
                })
                .collect();
            ExplainedPrototype {
                proto_id: k,
                presence: masked[k],
                importance: m[k],
                row,
                col,
                rect: rf.rect(row, col, size),
                weights,
            }
        })
        .collect();
    prototypes.sort_by(|a, b| b.importance.total_cmp(&a.importance));
    Ok(Explanation {
        scenario,
        predicted,
        prototypes,
    })
}

/// Draw each explained rectangle, brighter for higher importance, and
/// write the explanation as JSON next to the image.
pub fn export_local_explanation<T: Scalar>(
    model: &PrototypeModel<T>,
    pixels: &[f32],
    scenario: Scenario,
    presence_threshold: f64,
    importance_threshold: f64,
    image_path: &Path,
) -> Result<Explanation> {
    let e = explain(model, pixels, scenario, presence_threshold, importance_threshold)?;
    let size = model.config.image_size;
    let plane = size * size;
    let mut px = pixels.to_vec();
    let top = e.prototypes.first().map_or(1.0, |p| p.importance);
    for p in e.prototypes.iter().rev() {
        let level = (0.35 + 0.65 * p.importance / top) as f32;
        let r = p.rect;
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                if y == r.y || y == r.y + r.h - 1 || x == r.x || x == r.x + r.w - 1 {
                    let i = y * size + x;
                    px[i] = level;
                    px[plane + i] = 0.0;
                    px[2 * plane + i] = 0.0;
                }
            }
        }
    }
    data::save_image(&px, size, image_path)?;
    let json = serde_json::to_vec_pretty(&e).expect("explanation serialises");
    crate::persist::write_atomic(&image_path.with_extension("json"), &json)?;
    Ok(e)
}
