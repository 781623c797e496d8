//! Depth-estimation error metrics.
//!
//! Per-pixel metrics are evaluated over the pixels that are valid (> 0) in
//! both images. With ground truth `d` and estimate `e` over `M` such pixels:
//!
//! - REL   = mean |d - e| / d
//! - RMSE  = sqrt(mean (d - e)^2)
//! - log10 = mean |log10 d - log10 e|
//! - δn    = fraction of pixels with max(d/e, e/d) < 1.25^n (strict)
//!
//! The point cloud distance is the mean, over ground-truth points, of the
//! distance to the closest estimated point. It is asymmetric.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{depth_to_pointcloud, DepthImage, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rel: f64,
    pub rmse: f64,
    pub log10: f64,
    /// Co-valid pixel count. For sequence averages this is the total.
    pub valid_pixel_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcdResult {
    pub pcd: f64,
    pub matched_count: usize,
}

/// Hardware reference row for a monocular metric-depth network flown on a
/// micro aerial vehicle in hallways (77 frames, Kinect ground truth). Not
/// reproducible here; kept as a fixture for report comparison.
pub const HARDWARE_REFERENCE: ReferenceRow = ReferenceRow {
    delta1: 0.62,
    delta2: 0.85,
    delta3: 0.95,
    rel: 0.48,
    rmse: 1.05,
    log10: 0.11,
    pcd: 0.41,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rel: f64,
    pub rmse: f64,
    pub log10: f64,
    pub pcd: f64,
}

pub fn depth_metrics(gt: &DepthImage, est: &DepthImage) -> Result<DepthMetrics> {
    if gt.width() != est.width() || gt.height() != est.height() {
        return Err(Error::DimensionMismatch(
            gt.width(),
            gt.height(),
            est.width(),
            est.height(),
        ));
    }
    let mut m = 0usize;
    let (mut rel, mut sq, mut lg) = (0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    for (&d, &e) in gt.data().iter().zip(est.data()) {
        if !(d > 0.0 && e > 0.0) {
            continue;
        }
        m += 1;
        let err = (d - e).abs();
        rel += err / d;
        sq += err * err;
        lg += (d.log10() - e.log10()).abs();
        let ratio = (d / e).max(e / d);
        for (w, t) in within.iter_mut().zip(thresholds) {
            if ratio < t {
                *w += 1;
            }
        }
    }
    if m == 0 {
        return Err(Error::NoOverlap);
    }
    let mf = m as f64;
    Ok(DepthMetrics {
        delta1: within[0] as f64 / mf,
        delta2: within[1] as f64 / mf,
        delta3: within[2] as f64 / mf,
        rel: rel / mf,
        rmse: (sq / mf).sqrt(),
        log10: lg / mf,
        valid_pixel_count: m,
    })
}

pub fn point_cloud_distance(gt: &PointCloud, est: &PointCloud) -> Result<PcdResult> {
    if gt.is_empty() || est.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let tree = KdTree::build(&est.points);
    let total: f64 = gt
        .points
        .iter()
        .map(|g| tree.nearest(g).expect("non-empty tree").1.sqrt())
        .sum();
    Ok(PcdResult {
        pcd: total / gt.len() as f64,
        matched_count: gt.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub metrics: DepthMetrics,
    pub pcd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub frames: usize,
    /// Unweighted mean of the per-frame metrics.
    pub mean: FrameReport,
    pub per_frame: Vec<FrameReport>,
}

/// Evaluates one (ground truth, estimate) pair; the PCD uses camera-frame
/// clouds from each image's own intrinsics.
pub fn evaluate_frame(gt: &DepthImage, est: &DepthImage) -> Result<FrameReport> {
    let metrics = depth_metrics(gt, est)?;
    let g = depth_to_pointcloud(gt, &Pose::identity());
    let e = depth_to_pointcloud(est, &Pose::identity());
    let pcd = point_cloud_distance(&g, &e)?.pcd;
    Ok(FrameReport { metrics, pcd })
}

/// Frame-mean aggregation over a sequence.
pub fn evaluate_sequence(frames: &[(DepthImage, DepthImage)]) -> Result<SequenceReport> {
    if frames.is_empty() {
        return Err(Error::EmptySequence);
    }
    let per_frame = frames
        .par_iter()
        .map(|(g, e)| evaluate_frame(g, e))
        .collect::<Result<Vec<_>>>()?;
    let n = per_frame.len() as f64;
    let mean_of = |f: &dyn Fn(&FrameReport) -> f64| per_frame.iter().map(f).sum::<f64>() / n;
    let mean = FrameReport {
        metrics: DepthMetrics {
            delta1: mean_of(&|r| r.metrics.delta1),
            delta2: mean_of(&|r| r.metrics.delta2),
            delta3: mean_of(&|r| r.metrics.delta3),
            rel: mean_of(&|r| r.metrics.rel),
            rmse: mean_of(&|r| r.metrics.rmse),
            log10: mean_of(&|r| r.metrics.log10),
            valid_pixel_count: per_frame.iter().map(|r| r.metrics.valid_pixel_count).sum(),
        },
        pcd: mean_of(&|r| r.pcd),
    };
    Ok(SequenceReport {
        frames: per_frame.len(),
        mean,
        per_frame,
    })
}

const COLUMNS: [&str; 7] = ["d1", "d2", "d3", "REL", "RMSE", "log10", "PCD"];

fn row(r: &FrameReport) -> [f64; 7] {
    let m = &r.metrics;
    [m.delta1, m.delta2, m.delta3, m.rel, m.rmse, m.log10, r.pcd]
}

impl SequenceReport {
    /// Fixed-width table: columns δ1 δ2 δ3 REL RMSE log10 PCD, with the
    /// hardware reference row underneath.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12}", "");
        for c in COLUMNS {
            s += &format!("{c:>9}");
        }
        s += "\n";
        s += &format!("{:<12}", format!("mean ({})", self.frames));
        for v in row(&self.mean) {
            s += &format!("{v:>9.4}");
        }
        s += "\n";
        let r = HARDWARE_REFERENCE;
        s += &format!("{:<12}", "reference");
        for v in [r.delta1, r.delta2, r.delta3, r.rel, r.rmse, r.log10, r.pcd] {
            s += &format!("{v:>9.2}");
        }
        s += "\n(higher is better for d1-d3; lower is better for the rest)\n";
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let m = &self.mean;
        let value = serde_json::json!({
            "frames": self.frames,
            "columns": COLUMNS,
            "delta1": m.metrics.delta1,
            "delta2": m.metrics.delta2,
            "delta3": m.metrics.delta3,
            "rel": m.metrics.rel,
            "rmse": m.metrics.rmse,
            "log10": m.metrics.log10,
            "pcd": m.pcd,
            "valid_pixel_count": m.metrics.valid_pixel_count,
            "per_frame": self.per_frame,
            "reference": HARDWARE_REFERENCE,
        });
        Ok(serde_json::to_string_pretty(&value)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CloudFrame, Intrinsics};
    use crate::geometry::Vec3;
    use proptest::prelude::*;

    fn one(d: f64) -> DepthImage {
        DepthImage::constant(Intrinsics::centered(1, 1, 1.0, 1.0), d)
    }

    #[test]
    fn identical_images_are_perfect() {
        let img = DepthImage::constant(Intrinsics::default(), 2.0);
        let m = depth_metrics(&img, &img).unwrap();
        assert_eq!((m.rel, m.rmse, m.log10), (0.0, 0.0, 0.0));
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn single_pixel_hand_arithmetic() {
        let m = depth_metrics(&one(2.0), &one(1.0)).unwrap();
        assert!((m.rel - 0.5).abs() < 1e-15);
        assert!((m.rmse - 1.0).abs() < 1e-15);
        assert!((m.log10 - std::f64::consts::LOG10_2).abs() < 1e-12);
        // ratio 2 is above 1.25^3 = 1.953125
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 0.0, 0.0));
        assert_eq!(m.valid_pixel_count, 1);
        let m = depth_metrics(&one(1.5), &one(1.0)).unwrap();
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 1.0, 1.0));
    }

    #[test]
    fn threshold_is_strict() {
        let gt = DepthImage::constant(Intrinsics::default(), 2.0);
        let est = DepthImage::constant(Intrinsics::default(), 2.5);
        let m = depth_metrics(&gt, &est).unwrap();
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 1.0);
    }

    #[test]
    fn invalid_pixels_are_masked() {
        let intr = Intrinsics::centered(2, 1, 1.0, 1.0);
        let gt = DepthImage::from_vec(intr, vec![2.0, 0.0]).unwrap();
        let est = DepthImage::from_vec(intr, vec![2.0, 5.0]).unwrap();
        let m = depth_metrics(&gt, &est).unwrap();
        assert_eq!((m.valid_pixel_count, m.rel), (1, 0.0));
        let none = DepthImage::zeros(intr);
        assert!(matches!(depth_metrics(&gt, &none), Err(Error::NoOverlap)));
        let other = DepthImage::constant(Intrinsics::centered(3, 1, 1.0, 1.0), 1.0);
        assert!(matches!(depth_metrics(&gt, &other), Err(Error::DimensionMismatch(..))));
    }

    #[test]
    fn pcd_examples() {
        let g = PointCloud::new(CloudFrame::World, vec![Vec3::zeros()]);
        let e = PointCloud::new(CloudFrame::World, vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(3.0, 0.0, 0.0)]);
        assert_eq!(point_cloud_distance(&g, &e).unwrap().pcd, 1.0);
        assert_eq!(point_cloud_distance(&e, &e).unwrap().pcd, 0.0);
        let empty = PointCloud::new(CloudFrame::World, vec![]);
        assert!(matches!(point_cloud_distance(&g, &empty), Err(Error::EmptyCloud)));
        assert!(matches!(point_cloud_distance(&empty, &g), Err(Error::EmptyCloud)));
    }

    #[test]
    fn sequence_mean() {
        let intr = Intrinsics::centered(8, 6, 5.0, 5.0);
        let gt = DepthImage::constant(intr, 2.0);
        let est = DepthImage::constant(intr, 2.2);
        let single = evaluate_frame(&gt, &est).unwrap();
        let one = evaluate_sequence(&[(gt.clone(), est.clone())]).unwrap();
        assert_eq!(one.mean.metrics.rel, single.metrics.rel);
        assert_eq!(one.mean.pcd, single.pcd);
        let two = evaluate_sequence(&[(gt.clone(), est.clone()), (gt.clone(), est.clone())]).unwrap();
        assert_eq!(two.mean.metrics.rel, single.metrics.rel);
        assert_eq!(two.mean.metrics.rmse, single.metrics.rmse);
        assert_eq!(two.mean.pcd, single.pcd);
        assert!(matches!(evaluate_sequence(&[]), Err(Error::EmptySequence)));
        let text = two.to_text();
        assert!(text.find("d1").unwrap() < text.find("PCD").unwrap());
        assert!(two.to_json().unwrap().contains("\"pcd\""));
    }

    proptest! {
        #[test]
        fn deltas_are_monotone(vals in prop::collection::vec((0.0f64..8.0, 0.0f64..8.0), 1..200),
                               s in 0.5f64..2.5) {
            let n = vals.len();
            let intr = Intrinsics { fx: 1.0, fy: 1.0, cx: 0.5, cy: 0.5, width: n, height: 1 };
            let gt = DepthImage::from_vec(intr, vals.iter().map(|v| v.0).collect()).unwrap();
            let est = DepthImage::from_vec(intr, vals.iter().map(|v| v.1).collect()).unwrap();
            if let Ok(m) = depth_metrics(&gt, &est) {
                prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 1.0);
                prop_assert!(m.delta1 >= 0.0 && m.rmse >= 0.0);
            }
            // uniform scale: δn is 1 exactly when the ratio beats 1.25^n
            let scaled = DepthImage::from_vec(intr, gt.data().iter().map(|d| d * s).collect()).unwrap();
            if let Ok(m) = depth_metrics(&gt, &scaled) {
                for (k, dn) in [m.delta1, m.delta2, m.delta3].into_iter().enumerate() {
                    let t = 1.25f64.powi(k as i32 + 1);
                    let r = s.max(1.0 / s);
                    if r < t * (1.0 - 1e-9) { prop_assert_eq!(dn, 1.0); }
                    if r > t * (1.0 + 1e-9) { prop_assert_eq!(dn, 0.0); }
                }
            }
        }
    }
}
