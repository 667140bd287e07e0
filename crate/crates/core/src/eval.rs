//! Layout-fidelity evaluation: palette blob detection on generated latents,
//! IoU matching, COCO-style average precision, and attention diagnostics.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{self, ShapeKind};
use crate::error::{Error, Result};
use crate::layout::{
    aggregate_token_map, box_to_mask, AttentionStack, BoundingBox, SubjectAssignment, VarStack,
};
use crate::{Tape, Tensor};

/// IoU thresholds of the headline AP sweep (0.50:0.05:0.95).
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// One detected blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    /// Palette color index.
    pub class: usize,
    /// Best-effort shape guess (template matching); diagnostic only.
    pub shape: Option<ShapeKind>,
    /// Blob area as a fraction of the image (monotone in area).
    pub confidence: f64,
}

/// One ground-truth subject box.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub class: usize,
}

/// Intersection over union of two boxes; symmetric, in [0,1].
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Palette-quantizes the image (latent `[H×W]` or RGB `[3×H×W]`), finds
/// 4-connected components per color, drops blobs under 9 px, and emits a
/// tight box, color class, shape guess and area-fraction confidence per
/// blob.
pub fn detect_blobs(image: &Tensor) -> Result<Vec<Detection>> {
    let (h, w, classes) = match image.shape() {
        [h, w] => {
            let mut cls = vec![None; h * w];
            for i in 0..h * w {
                cls[i] = data::quantize_level(image.data()[i]);
            }
            (*h, *w, cls)
        }
        [3, h, w] => {
            let plane = h * w;
            let mut cls = vec![None; plane];
            for i in 0..plane {
                cls[i] = data::quantize_rgb(
                    image.data()[i],
                    image.data()[plane + i],
                    image.data()[2 * plane + i],
                );
            }
            (*h, *w, cls)
        }
        other => {
            return Err(Error::shape(format!(
                "detect_blobs: expected [H,W] or [3,H,W], got {other:?}"
            )))
        }
    };

    let mut visited = vec![false; h * w];
    let mut detections = Vec::new();
    for start in 0..h * w {
        if visited[start] || classes[start].is_none() {
            continue;
        }
        let class = classes[start].unwrap();
        let mut stack = vec![start];
        let mut pixels = Vec::new();
        visited[start] = true;
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if !visited[j] && classes[j] == Some(class) {
                    visited[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        if pixels.len() < 9 {
            continue;
        }
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (w, h, 0usize, 0usize);
        for &i in &pixels {
            let (y, x) = (i / w, i % w);
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
        let bbox = BoundingBox::new(
            min_x as f64 / w as f64,
            min_y as f64 / h as f64,
            (max_x + 1) as f64 / w as f64,
            (max_y + 1) as f64 / h as f64,
        )?;
        let shape = guess_shape(&pixels, min_x, min_y, max_x, max_y, w);
        detections.push(Detection {
            bbox,
            class,
            shape,
            confidence: pixels.len() as f64 / (h * w) as f64,
        });
    }
    // Deterministic order: by confidence descending, then raster position.
    detections.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.bbox.y0.partial_cmp(&b.bbox.y0).unwrap())
            .then(a.bbox.x0.partial_cmp(&b.bbox.x0).unwrap())
    });
    Ok(detections)
}

/// Template-matches the blob against each shape kind rendered at the blob's
/// box size; exact on clean renders.
fn guess_shape(
    pixels: &[usize],
    min_x: usize,
    min_y: usize,
    max_x: usize,
    max_y: usize,
    w: usize,
) -> Option<ShapeKind> {
    let bw = max_x - min_x + 1;
    let bh = max_y - min_y + 1;
    let side = bw.max(bh);
    let set: HashSet<(usize, usize)> = pixels.iter().map(|&i| (i / w, i % w)).collect();
    let mut best: Option<(f64, ShapeKind)> = None;
    for kind in ShapeKind::ALL {
        let spec = data::ShapeSpec {
            kind,
            color: 0,
            size: 0.3,
            texture: data::Texture::Solid,
        };
        let _ = spec; // template comes from the raw patch rasterizer below
        let patch = shape_template(kind, side);
        let mut inter = 0usize;
        let mut uni = 0usize;
        for y in 0..side {
            for x in 0..side {
                let in_patch = patch[y * side + x];
                let in_blob = set.contains(&(min_y + y, min_x + x));
                if in_patch && in_blob {
                    inter += 1;
                }
                if in_patch || in_blob {
                    uni += 1;
                }
            }
        }
        let score = if uni == 0 { 0.0 } else { inter as f64 / uni as f64 };
        if best.map_or(true, |(s, _)| score > s) {
            best = Some((score, kind));
        }
    }
    best.map(|(_, k)| k)
}

fn shape_template(kind: ShapeKind, side: usize) -> Vec<bool> {
    // Reuses the dataset rasterizer via a unit-canvas render.
    let spec = data::ShapeSpec { kind, color: 0, size: 0.45, texture: data::Texture::Solid };
    let canvas = ((side as f64) / 0.45).ceil() as usize;
    let canvas = canvas.max(16);
    let exact_size = side as f64 / canvas as f64;
    let spec = data::ShapeSpec { size: exact_size.clamp(0.15, 0.45), ..spec };
    match data::render_subject(&spec, canvas) {
        Ok((_, mask)) => {
            // Crop the centered side x side patch.
            let rendered_side = data::shape_side_px(spec.size, canvas);
            let off = (canvas - rendered_side) / 2;
            let mut out = vec![false; side * side];
            for y in 0..side.min(rendered_side) {
                for x in 0..side.min(rendered_side) {
                    out[y * side + x] = mask.at2(off + y, off + x) == 1.0;
                }
            }
            out
        }
        Err(_) => vec![true; side * side],
    }
}

/// Average-precision summary over the threshold sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct APReport {
    /// Mean over IoU thresholds 0.50:0.05:0.95.
    pub ap: f64,
    /// AP at threshold 0.50, when swept.
    pub ap50: Option<f64>,
    /// AP at threshold 0.75, when swept.
    pub ap75: Option<f64>,
    /// Mean AP per palette class present in the ground truth.
    pub per_class: Vec<(String, f64)>,
    pub sample_count: usize,
}

impl APReport {
    pub fn validate(&self) -> Result<()> {
        let mut ok = (0.0..=1.0).contains(&self.ap);
        if let Some(ap50) = self.ap50 {
            ok &= self.ap <= ap50 + 1e-12 && ap50 <= 1.0;
            if let Some(ap75) = self.ap75 {
                ok &= ap75 <= ap50 + 1e-12;
            }
        }
        if ok {
            Ok(())
        } else {
            Err(Error::input(format!(
                "AP report violates 0 <= ap <= ap50 <= 1, ap75 <= ap50: {self:?}"
            )))
        }
    }
}

/// Greedy confidence-ordered matching at one threshold for one class.
/// Returns a TP/FP flag per detection in confidence order.
fn match_class(
    dets: &[(f64, usize, &Detection)],
    gts: &[Vec<&GroundTruth>],
    thresh: f64,
) -> Vec<bool> {
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::with_capacity(dets.len());
    for &(_, img, det) in dets {
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in gts[img].iter().enumerate() {
            if matched[img][gi] {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= thresh && best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                matched[img][gi] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    flags
}

/// All-point interpolated AP from ranked TP/FP flags.
fn average_precision(flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(flags.len());
    for (rank, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let precision = tp as f64 / (rank + 1) as f64;
        let recall = tp as f64 / total_gt as f64;
        points.push((recall, precision));
    }
    // Precision envelope (max precision at any recall >= r).
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let envelope = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            ap += (r - prev_recall) * envelope;
            prev_recall = r;
        }
    }
    ap
}

/// COCO-style AP: class-aware, greedy highest-IoU matching in confidence
/// order (ties broken by earlier detection), all-point PR integration,
/// averaged over the classes present in the ground truth and then over the
/// threshold sweep.
pub fn compute_ap(
    detections: &[Vec<Detection>],
    ground_truths: &[Vec<GroundTruth>],
    thresholds: &[f64],
) -> Result<APReport> {
    if detections.len() != ground_truths.len() {
        return Err(Error::input("compute_ap: image counts differ"));
    }
    if detections.is_empty() {
        return Err(Error::input("compute_ap: empty evaluation set"));
    }
    if thresholds.is_empty() {
        return Err(Error::input("compute_ap: no thresholds"));
    }
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = ground_truths
            .iter()
            .flatten()
            .map(|g| g.class)
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        c.sort();
        c
    };
    if classes.is_empty() {
        return Err(Error::input("compute_ap: no ground truths"));
    }

    let mut per_class_mean = vec![0.0; classes.len()];
    let mut ap_by_thresh = Vec::with_capacity(thresholds.len());
    for &thresh in thresholds {
        let mut sum = 0.0;
        for (ci, &class) in classes.iter().enumerate() {
            let gts: Vec<Vec<&GroundTruth>> = ground_truths
                .iter()
                .map(|g| g.iter().filter(|gt| gt.class == class).collect())
                .collect();
            let total_gt: usize = gts.iter().map(|g| g.len()).sum();
            let mut dets: Vec<(f64, usize, &Detection)> = Vec::new();
            for (img, ds) in detections.iter().enumerate() {
                for d in ds.iter().filter(|d| d.class == class) {
                    dets.push((d.confidence, img, d));
                }
            }
            // Confidence descending; earlier (image, raster) order on ties.
            dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let flags = match_class(&dets, &gts, thresh);
            let ap = average_precision(&flags, total_gt);
            sum += ap;
            per_class_mean[ci] += ap / thresholds.len() as f64;
        }
        ap_by_thresh.push(sum / classes.len() as f64);
    }

    let ap = ap_by_thresh.iter().sum::<f64>() / ap_by_thresh.len() as f64;
    let find = |t: f64| {
        thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-9)
            .map(|i| ap_by_thresh[i])
    };
    let report = APReport {
        ap,
        ap50: find(0.5),
        ap75: find(0.75),
        per_class: classes
            .iter()
            .zip(per_class_mean)
            .map(|(&c, v)| (data::PALETTE[c].0.to_string(), v))
            .collect(),
        sample_count: detections.len(),
    };
    report.validate()?;
    Ok(report)
}

/// Class-aware recall at one IoU threshold (fraction of ground truths
/// matched by greedy confidence-ordered assignment).
pub fn recall_at(
    detections: &[Vec<Detection>],
    ground_truths: &[Vec<GroundTruth>],
    thresh: f64,
) -> Result<f64> {
    if detections.len() != ground_truths.len() || detections.is_empty() {
        return Err(Error::input("recall_at: bad evaluation set"));
    }
    let mut total = 0usize;
    let mut hit = 0usize;
    let classes: HashSet<usize> = ground_truths.iter().flatten().map(|g| g.class).collect();
    for &class in &classes {
        let gts: Vec<Vec<&GroundTruth>> = ground_truths
            .iter()
            .map(|g| g.iter().filter(|gt| gt.class == class).collect())
            .collect();
        total += gts.iter().map(|g| g.len()).sum::<usize>();
        let mut dets: Vec<(f64, usize, &Detection)> = Vec::new();
        for (img, ds) in detections.iter().enumerate() {
            for d in ds.iter().filter(|d| d.class == class) {
                dets.push((d.confidence, img, d));
            }
        }
        dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        hit += match_class(&dets, &gts, thresh).iter().filter(|&&f| f).count();
    }
    if total == 0 {
        return Err(Error::input("recall_at: no ground truths"));
    }
    Ok(hit as f64 / total as f64)
}

/// Per-subject in-box attention mass ratio (the quantity whose shortfall
/// the position loss squares). Diagnostic only.
pub fn attention_in_box_ratio(
    stack: &AttentionStack<f64>,
    assignments: &[SubjectAssignment],
    loss_layers: &[usize],
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let vstack = VarStack::from_stack(&tape, stack);
    let mut out = Vec::with_capacity(assignments.len());
    for a in assignments {
        a.bbox.validate()?;
        let (map, target) = aggregate_token_map(&vstack, a.token_index, loss_layers)?;
        let map = map.to_tensor();
        let mask = box_to_mask::<f64>(&a.bbox, target)?;
        let total = map.sum();
        if total <= 0.0 {
            return Err(Error::DegenerateDistribution(format!(
                "token {} has no attention mass",
                a.token_index
            )));
        }
        let mass_in = map
            .reshape(&[target * target])?
            .mul(&mask.reshape(&[target * target])?)?
            .sum();
        out.push(mass_in / total);
    }
    Ok(out)
}

/// Metrics for one sampling mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeSummary {
    pub ap: APReport,
    /// Class-aware per-subject recall at IoU 0.5.
    pub recall50: f64,
    /// Mean in-box attention mass ratio at the final guided step, when the
    /// sampler recorded diagnostics.
    pub in_box_ratio: Option<f64>,
}

/// Side-by-side guided/unguided evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub guided: ModeSummary,
    /// Baseline column, when a second sample set was evaluated.
    pub unguided: Option<ModeSummary>,
}

const OVERLAY: [f64; 3] = [1.0, 0.5, 0.0];

/// Writes the JSON summary and a contact sheet of latents (decoded to RGB,
/// upscaled 4x) with the requested boxes overlaid.
pub fn render_report(
    report: &EvalReport,
    samples: &[(Tensor, Vec<BoundingBox>)],
    out_dir: &Path,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::input("render_report: need at least one sample"));
    }
    std::fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(out_dir.join("report.json"), json)?;
    let sheet = contact_sheet(samples, 4, 2)?;
    crate::imageio::save_rgb(&sheet, &out_dir.join("contact_sheet.png"))?;
    Ok(())
}

/// Builds the contact sheet tensor (exposed for pixel-position tests).
pub fn contact_sheet(samples: &[(Tensor, Vec<BoundingBox>)], scale: usize, gap: usize) -> Result<Tensor> {
    let (h, w) = samples[0].0.dims2()?;
    let tile_h = h * scale;
    let tile_w = w * scale;
    let cols = (samples.len() as f64).sqrt().ceil() as usize;
    let rows = samples.len().div_ceil(cols);
    let sheet_h = rows * tile_h + (rows + 1) * gap;
    let sheet_w = cols * tile_w + (cols + 1) * gap;
    let plane = sheet_h * sheet_w;
    let mut out = vec![0.0; 3 * plane];

    for (idx, (latent, boxes)) in samples.iter().enumerate() {
        let rgb = crate::data::latent_to_rgb(latent)?;
        let (r, c) = (idx / cols, idx % cols);
        let oy = gap + r * (tile_h + gap);
        let ox = gap + c * (tile_w + gap);
        let src_plane = h * w;
        for y in 0..tile_h {
            for x in 0..tile_w {
                let si = (y / scale) * w + x / scale;
                let di = (oy + y) * sheet_w + ox + x;
                for ch in 0..3 {
                    out[ch * plane + di] = rgb.data()[ch * src_plane + si];
                }
            }
        }
        for b in boxes {
            let x0 = (b.x0 * tile_w as f64).round() as usize;
            let x1 = ((b.x1 * tile_w as f64).round() as usize).min(tile_w).max(x0 + 1);
            let y0 = (b.y0 * tile_h as f64).round() as usize;
            let y1 = ((b.y1 * tile_h as f64).round() as usize).min(tile_h).max(y0 + 1);
            let mut set = |y: usize, x: usize| {
                let di = (oy + y) * sheet_w + ox + x;
                for ch in 0..3 {
                    out[ch * plane + di] = OVERLAY[ch];
                }
            };
            for x in x0..x1 {
                set(y0, x);
                set(y1 - 1, x);
            }
            for y in y0..y1 {
                set(y, x0);
                set(y, x1 - 1);
            }
        }
    }
    Tensor::from_vec(vec![3, sheet_h, sheet_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneConfig};
    use crate::layout::StackLayer;

    #[test]
    fn iou_worked_examples() {
        let a = BoundingBox::new(0.1, 0.1, 0.5, 0.5).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let b = BoundingBox::new(0.6, 0.6, 0.9, 0.9).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
        let c = BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let d = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        assert!((iou(&c, &d) - 1.0 / 7.0).abs() < 1e-12);
        assert!((iou(&c, &d) - iou(&d, &c)).abs() < 1e-15);
    }

    #[test]
    fn detect_blobs_roundtrip_on_clean_scene() {
        let cfg = SceneConfig::default();
        for seed in 0..8 {
            let scene = generate_scene(&cfg, seed).unwrap();
            let dets = detect_blobs(&scene.image).unwrap();
            assert_eq!(dets.len(), scene.annotation.subjects.len(), "seed {seed}");
            for s in &scene.annotation.subjects {
                let hit = dets.iter().find(|d| d.class == s.spec.color).unwrap();
                assert_eq!(hit.bbox, s.bbox);
                assert_eq!(hit.shape, Some(s.spec.kind));
            }
            // Latent route agrees with the RGB route.
            let dets_latent = detect_blobs(&scene.latent().unwrap()).unwrap();
            assert_eq!(dets_latent.len(), dets.len());
        }
    }

    #[test]
    fn detect_blobs_blank_and_split_blobs() {
        let blank = Tensor::zeros(&[32, 32]);
        assert!(detect_blobs(&blank).unwrap().is_empty());

        // Two disjoint same-color blobs -> two detections.
        let mut data = vec![0.0; 32 * 32];
        let lvl = crate::data::palette_level(2);
        for y in 2..7 {
            for x in 2..7 {
                data[y * 32 + x] = lvl;
                data[(y + 14) * 32 + x + 14] = lvl;
            }
        }
        let img = Tensor::from_vec(vec![32, 32], data).unwrap();
        let dets = detect_blobs(&img).unwrap();
        assert_eq!(dets.len(), 2);
        assert!(dets.iter().all(|d| d.class == 2));
    }

    #[test]
    fn ap_trivial_cases() {
        let gt = vec![vec![GroundTruth {
            bbox: BoundingBox::new(0.1, 0.1, 0.4, 0.4).unwrap(),
            class: 0,
        }]];
        let perfect = vec![vec![Detection {
            bbox: BoundingBox::new(0.1, 0.1, 0.4, 0.4).unwrap(),
            class: 0,
            shape: None,
            confidence: 0.5,
        }]];
        let r = compute_ap(&perfect, &gt, &coco_thresholds()).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, Some(1.0), Some(1.0)));

        let none: Vec<Vec<Detection>> = vec![vec![]];
        let r = compute_ap(&none, &gt, &coco_thresholds()).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (0.0, Some(0.0), Some(0.0)));

        assert!(compute_ap(&[], &[], &coco_thresholds()).is_err());
    }

    #[test]
    fn ap50_hand_built_pr_curve() {
        // Three images, one GT each; detections ranked by confidence:
        //   0.9 TP, 0.8 FP, 0.7 TP, one GT missed.
        // PR points: (1/3, 1), (1/3, 1/2), (2/3, 2/3).
        // All-point AP50 = 1/3 * 1 + 1/3 * 2/3 = 5/9.
        let b = |x0: f64, y0: f64| BoundingBox::new(x0, y0, x0 + 0.2, y0 + 0.2).unwrap();
        let gt = vec![
            vec![GroundTruth { bbox: b(0.1, 0.1), class: 0 }],
            vec![GroundTruth { bbox: b(0.4, 0.4), class: 0 }],
            vec![GroundTruth { bbox: b(0.7, 0.7), class: 0 }],
        ];
        let det = |bb: BoundingBox, conf: f64| Detection { bbox: bb, class: 0, shape: None, confidence: conf };
        let dets = vec![
            vec![det(b(0.1, 0.1), 0.9)],
            vec![det(b(0.05, 0.7), 0.8)], // far from its GT: FP
            vec![det(b(0.7, 0.7), 0.7)],
        ];
        let r = compute_ap(&dets, &gt, &[0.5]).unwrap();
        let ap50 = r.ap50.unwrap();
        assert!((ap50 - 5.0 / 9.0).abs() < 1e-12, "ap50 {ap50}");
    }

    #[test]
    fn in_box_ratio_examples() {
        // Uniform map, quarter-area box -> 0.25; and L = sum (1-r)^2 exactly.
        let attn = Tensor::full(&[64, 2], 0.5).unwrap();
        let stack = AttentionStack::from_maps_unchecked(vec![StackLayer { attn, p: 8 }], 0);
        let assign = [SubjectAssignment {
            token_index: 0,
            bbox: BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap(),
        }];
        let ratios = attention_in_box_ratio(&stack, &assign, &[8]).unwrap();
        assert!((ratios[0] - 0.25).abs() < 1e-12);

        let tape = Tape::new();
        let vstack = VarStack::from_stack(&tape, &stack);
        let loss = crate::layout::position_loss(&tape, &vstack, &assign, &[8])
            .unwrap()
            .to_tensor()
            .item()
            .unwrap();
        let from_ratio: f64 = ratios.iter().map(|r| (1.0 - r) * (1.0 - r)).sum();
        assert!((loss - from_ratio).abs() < 1e-12);

        // All mass in box -> 1.0.
        let mut data = vec![0.0; 64 * 1];
        data[0] = 1.0;
        let attn = Tensor::from_vec(vec![64, 1], data).unwrap();
        let stack = AttentionStack::from_maps_unchecked(vec![StackLayer { attn, p: 8 }], 0);
        let assign = [SubjectAssignment {
            token_index: 0,
            bbox: BoundingBox::new(0.0, 0.0, 0.25, 0.25).unwrap(),
        }];
        let ratios = attention_in_box_ratio(&stack, &assign, &[8]).unwrap();
        assert_eq!(ratios[0], 1.0);
    }

    #[test]
    fn contact_sheet_overlay_positions() {
        let latent = Tensor::zeros(&[32, 32]);
        let bbox = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let sheet = contact_sheet(&[(latent, vec![bbox])], 4, 2).unwrap();
        let (h, w) = (sheet.shape()[1], sheet.shape()[2]);
        let plane = h * w;
        // Tile origin at (2,2); box corner at 0.25*128 = 32 -> pixel (34,34).
        let idx = 34 * w + 34;
        assert_eq!(sheet.data()[idx], OVERLAY[0]);
        assert_eq!(sheet.data()[plane + idx], OVERLAY[1]);
        // Center of the box is untouched background (black).
        let idx = (2 + 64) * w + (2 + 64);
        assert_eq!(sheet.data()[idx], 0.0);
    }
}
