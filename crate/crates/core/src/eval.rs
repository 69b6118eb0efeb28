//! Segmentation metrics, full-tile evaluation and comparison tables.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::Generator;
use crate::nn::Mode;
use crate::raster::{extract_patches, normalize_height, DepthScaling, PatchSample, Raster, RasterTile};
use crate::segnet::SegModel;
use crate::tensor::Tensor;
use crate::train::{stack_batch, Arm};

/// Pixel confusion counts with building as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Adds the per-pixel outcomes of `pred` against `gt` to `counts`.
pub fn accumulate_confusion(pred: &[u8], gt: &[u8], counts: ConfusionCounts) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = counts;
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::Label(format!("labels must be 0 or 1, got {p} and {g}"))),
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Building,
    Ground,
}

/// Intersection over union of one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Iou {
    pub value: f64,
    /// The class is absent from both prediction and ground truth; the
    /// value is then defined as 1.
    pub degenerate: bool,
}

pub fn iou(counts: &ConfusionCounts, class: Class) -> Iou {
    let hit = match class {
        Class::Building => counts.tp,
        Class::Ground => counts.tn,
    };
    let union = hit + counts.fp + counts.fn_;
    if union == 0 {
        Iou {
            value: 1.0,
            degenerate: true,
        }
    } else {
        Iou {
            value: hit as f64 / union as f64,
            degenerate: false,
        }
    }
}

pub fn pixel_accuracy(counts: &ConfusionCounts) -> Result<f64> {
    match counts.total() {
        0 => Err(Error::EmptyEval("no pixels were evaluated".into())),
        n => Ok((counts.tp + counts.tn) as f64 / n as f64),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileReport {
    pub tile_id: String,
    pub counts: ConfusionCounts,
    pub iou_building: f64,
    pub iou_ground: f64,
    pub pixel_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub arm: String,
    pub iou_building: f64,
    pub iou_ground: f64,
    pub pixel_accuracy: f64,
    pub counts: ConfusionCounts,
    /// Set when a class was absent from prediction and ground truth alike.
    pub degenerate: bool,
    pub tiles: Vec<TileReport>,
}

impl MetricsReport {
    pub fn from_counts(arm: &str, counts: ConfusionCounts, tiles: Vec<TileReport>) -> Result<Self> {
        let b = iou(&counts, Class::Building);
        let g = iou(&counts, Class::Ground);
        Ok(Self {
            arm: arm.to_string(),
            iou_building: b.value,
            iou_ground: g.value,
            pixel_accuracy: pixel_accuracy(&counts)?,
            counts,
            degenerate: b.degenerate || g.degenerate,
            tiles,
        })
    }

    /// Metric means over several reports of one arm, e.g. repeated seeds.
    /// Counts are summed; per-tile reports are dropped.
    pub fn mean(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::EmptyEval("no reports to average".into()))?;
        if let Some(r) = reports.iter().find(|r| r.arm != first.arm) {
            return Err(Error::Consistency(format!(
                "cannot average arms {} and {}",
                first.arm, r.arm
            )));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            arm: first.arm.clone(),
            iou_building: avg(|r| r.iou_building),
            iou_ground: avg(|r| r.iou_ground),
            pixel_accuracy: avg(|r| r.pixel_accuracy),
            counts: reports.iter().map(|r| r.counts).sum(),
            degenerate: reports.iter().any(|r| r.degenerate),
            tiles: Vec::new(),
        })
    }
}

/// Anything that labels every pixel of a `[B, C, H, W]` batch.
pub trait Segmenter {
    fn in_channels(&self) -> usize;
    /// Class index per pixel, `B * H * W` values.
    fn predict(&mut self, x: &Tensor<f32>) -> Result<Vec<u8>>;
}

impl Segmenter for SegModel<f32> {
    fn in_channels(&self) -> usize {
        self.config().in_channels
    }

    fn predict(&mut self, x: &Tensor<f32>) -> Result<Vec<u8>> {
        SegModel::predict(self, x)
    }
}

/// Where the depth channel comes from at test time.
pub enum DepthInput<'a> {
    None,
    /// Missing-modality fill.
    Zeros,
    Real,
    Synthetic(&'a mut Generator<f32>),
}

impl<'a> DepthInput<'a> {
    pub fn for_arm(arm: Arm, generator: Option<&'a mut Generator<f32>>) -> Result<Self> {
        Ok(match arm {
            Arm::RgbOnly => DepthInput::None,
            Arm::PartialDepth => DepthInput::Zeros,
            Arm::RgbDepth => DepthInput::Real,
            Arm::RgbSynthDepth => DepthInput::Synthetic(generator.ok_or_else(|| {
                Error::Config("rgb_synth_depth evaluation needs a generator checkpoint".into())
            })?),
        })
    }

    fn channels(&self) -> usize {
        match self {
            DepthInput::None => 3,
            _ => 4,
        }
    }
}

/// Patches per forward pass during evaluation.
const EVAL_BATCH: usize = 8;

/// Fills each patch's depth according to `depth`.
pub fn prepare_patches(patches: &mut [PatchSample], depth: &mut DepthInput<'_>) -> Result<()> {
    match depth {
        DepthInput::None | DepthInput::Zeros => {
            for p in patches.iter_mut() {
                p.depth.iter_mut().for_each(|v| *v = 0.0);
                p.depth_present = false;
            }
        }
        DepthInput::Real => {}
        DepthInput::Synthetic(g) => {
            for chunk in patches.chunks_mut(EVAL_BATCH) {
                let (x, _) = stack_batch(chunk, false)?;
                let d = g.forward(&x, false, Mode::Eval)?;
                let plane = chunk[0].size * chunk[0].size;
                for (i, p) in chunk.iter_mut().enumerate() {
                    p.depth.copy_from_slice(&d.data()[i * plane..(i + 1) * plane]);
                    p.depth_present = true;
                }
            }
        }
    }
    Ok(())
}

/// Predicted label raster covering the patch grid of `tile` (margins beyond
/// the last full patch are excluded), stitched by patch origin.
pub fn predict_tile(
    seg: &mut dyn Segmenter,
    depth: &mut DepthInput<'_>,
    tile: &RasterTile,
    patch_size: usize,
    scaling: DepthScaling,
) -> Result<Raster<u8>> {
    if seg.in_channels() != depth.channels() {
        return Err(Error::Config(format!(
            "model takes {} channels, the arm supplies {}",
            seg.in_channels(),
            depth.channels()
        )));
    }
    let ndsm = normalize_height(tile);
    let mut patches = extract_patches(tile, &ndsm, patch_size, scaling)?;
    prepare_patches(&mut patches, depth)?;
    let (gh, gw) = (
        tile.height() / patch_size * patch_size,
        tile.width() / patch_size * patch_size,
    );
    let mut out = Raster::filled(1, gh, gw, 0u8);
    let plane = patch_size * patch_size;
    for chunk in patches.chunks(EVAL_BATCH) {
        let (x, _) = stack_batch(chunk, depth.channels() == 4)?;
        let pred = seg.predict(&x)?;
        for (i, p) in chunk.iter().enumerate() {
            let (r0, c0) = p.origin;
            for r in 0..patch_size {
                let row = &pred[i * plane + r * patch_size..i * plane + (r + 1) * patch_size];
                let start = (r0 + r) * gw + c0;
                out.data[start..start + patch_size].copy_from_slice(row);
            }
        }
    }
    Ok(out)
}

/// Evaluates one arm over whole test tiles.
pub fn evaluate_arm(
    seg: &mut dyn Segmenter,
    generator: Option<&mut Generator<f32>>,
    tiles: &[RasterTile],
    arm: Arm,
    patch_size: usize,
    scaling: DepthScaling,
) -> Result<MetricsReport> {
    if tiles.is_empty() {
        return Err(Error::EmptyEval("no test tiles".into()));
    }
    if seg.in_channels() != arm.in_channels() {
        return Err(Error::Config(format!(
            "arm {arm} needs a {}-channel model, got {}",
            arm.in_channels(),
            seg.in_channels()
        )));
    }
    let mut depth = DepthInput::for_arm(arm, generator)?;
    let mut reports = Vec::with_capacity(tiles.len());
    let mut total = ConfusionCounts::default();
    for tile in tiles {
        let pred = predict_tile(seg, &mut depth, tile, patch_size, scaling)?;
        let gt = tile.labels.crop(0, 0, pred.height, pred.width);
        let c = accumulate_confusion(&pred.data, &gt.data, ConfusionCounts::default())?;
        total += c;
        let r = MetricsReport::from_counts(arm.as_str(), c, Vec::new())?;
        reports.push(TileReport {
            tile_id: tile.tile_id.clone(),
            counts: c,
            iou_building: r.iou_building,
            iou_ground: r.iou_ground,
            pixel_accuracy: r.pixel_accuracy,
        });
    }
    MetricsReport::from_counts(arm.as_str(), total, reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub iou_building: f64,
    pub iou_ground: f64,
    pub pixel_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

const HEADER: [&str; 4] = ["Method", "IoU Building", "IoU Ground", "Pixel Acc."];

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

impl ComparisonTable {
    fn cells(&self) -> Vec<[String; 4]> {
        self.rows
            .iter()
            .map(|r| [r.label.clone(), pct(r.iou_building), pct(r.iou_ground), pct(r.pixel_accuracy)])
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = HEADER.join(",");
        s.push('\n');
        for c in self.cells() {
            let label = if c[0].contains(',') { format!("\"{}\"", c[0]) } else { c[0].clone() };
            s.push_str(&format!("{label},{},{},{}\n", c[1], c[2], c[3]));
        }
        s
    }

    /// Markdown section with a pipe table.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("## Segmentation results\n\nNumbers are percentages.\n\n");
        s.push_str(&format!("| {} |\n", HEADER.join(" | ")));
        s.push_str("|---|---:|---:|---:|\n");
        for c in self.cells() {
            s.push_str(&format!("| {} |\n", c.join(" | ")));
        }
        s
    }
}

/// Orders reports lower bound, baseline, synthetic, upper bound; reports of
/// unknown arms follow in input order.
pub fn compare_runs(reports: &[MetricsReport]) -> ComparisonTable {
    let mut keyed: Vec<(usize, usize, &MetricsReport)> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let rank = r
                .arm
                .parse::<Arm>()
                .ok()
                .and_then(|a| Arm::ALL.iter().position(|&b| b == a))
                .unwrap_or(Arm::ALL.len());
            (rank, i, r)
        })
        .collect();
    keyed.sort_by_key(|&(rank, i, _)| (rank, i));
    ComparisonTable {
        rows: keyed
            .into_iter()
            .map(|(_, _, r)| ComparisonRow {
                label: r.arm.parse::<Arm>().map(|a| a.title().to_string()).unwrap_or_else(|_| r.arm.clone()),
                iou_building: r.iou_building,
                iou_ground: r.iou_ground,
                pixel_accuracy: r.pixel_accuracy,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 4x4 case with 6 tp, 2 fp, 1 fn and 7 tn.
    fn hand_case() -> (Vec<u8>, Vec<u8>) {
        let gt = vec![1, 1, 1, 0, 1, 1, 1, 0, 1, 0, 0, 0, 0, 0, 0, 0];
        let pred = vec![1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0];
        (pred, gt)
    }

    #[test]
    fn hand_counts_and_metrics() {
        let (pred, gt) = hand_case();
        let c = accumulate_confusion(&pred, &gt, ConfusionCounts::default()).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 6, fp: 2, fn_: 1, tn: 7 });
        assert_eq!(iou(&c, Class::Building).value, 6.0 / 9.0);
        assert_eq!(pixel_accuracy(&c).unwrap(), 0.8125);
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let (_, gt) = hand_case();
        let c = accumulate_confusion(&gt, &gt, ConfusionCounts::default()).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(iou(&c, Class::Building).value, 1.0);
        let inv: Vec<u8> = gt.iter().map(|v| 1 - v).collect();
        let c = accumulate_confusion(&inv, &gt, ConfusionCounts::default()).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(pixel_accuracy(&c).unwrap(), 0.0);
    }

    #[test]
    fn empty_union_is_flagged() {
        let c = accumulate_confusion(&[0, 0], &[0, 0], ConfusionCounts::default()).unwrap();
        let b = iou(&c, Class::Building);
        assert_eq!((b.value, b.degenerate), (1.0, true));
        assert!(MetricsReport::from_counts("rgb_only", c, vec![]).unwrap().degenerate);
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(pixel_accuracy(&ConfusionCounts::default()), Err(Error::EmptyEval(_))));
        assert!(matches!(
            accumulate_confusion(&[2], &[0], ConfusionCounts::default()),
            Err(Error::Label(_))
        ));
        assert!(matches!(
            accumulate_confusion(&[0], &[0, 1], ConfusionCounts::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rows_follow_arm_order() {
        let mk = |arm: &str, v: f64| MetricsReport {
            arm: arm.into(),
            iou_building: v,
            iou_ground: v,
            pixel_accuracy: v,
            counts: ConfusionCounts::default(),
            degenerate: false,
            tiles: vec![],
        };
        let t = compare_runs(&[mk("rgb_depth", 0.4), mk("rgb_only", 0.1), mk("rgb_synth_depth", 0.3)]);
        let labels: Vec<_> = t.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["RGB only (Lower Bound)", "RGB & Synthetic Depth", "RGB & Depth (Upper Bound)"]);
        assert_eq!(compare_runs(&[mk("rgb_only", 0.5)]).rows.len(), 1);
    }
}
