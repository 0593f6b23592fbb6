//! Reconstruction metrics: Chamfer-L1 between point sets and silhouette IoU.

use serde::{Deserialize, Serialize};

use crate::data::{sample_colored_pointcloud, sphere_trace_render, ShapeSpec};
use crate::error::{invalid, shape_err, Result};
use crate::numerics::rng::derive_seed;
use crate::render::{rasterize_hard, sample_camera, CameraDist};
use crate::tetmesh::{sample_surface, TriMesh, Vec3};

/// Euclidean distances to the nearest neighbour in `to` for every point of `from`.
pub fn nearest_distances(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            let mut best = f64::INFINITY;
            for b in to {
                let d = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            best.sqrt()
        })
        .collect()
}

/// `½ (mean_a min_b ‖a − b‖ + mean_b min_a ‖a − b‖)`, exact nearest neighbours.
pub fn chamfer_l1(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return invalid("chamfer_l1 of an empty point set");
    }
    let ab = nearest_distances(a, b).iter().sum::<f64>() / a.len() as f64;
    let ba = nearest_distances(b, a).iter().sum::<f64>() / b.len() as f64;
    Ok(0.5 * (ab + ba))
}

/// IoU of masks binarized at 0.5; two empty masks score 1.
pub fn mask_iou(m1: &[f64], m2: &[f64]) -> Result<f64> {
    if m1.len() != m2.len() {
        return shape_err("mask_iou", format!("{} vs {} pixels", m1.len(), m2.len()));
    }
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&a, &b) in m1.iter().zip(m2) {
        let (a, b) = (a > 0.5, b > 0.5);
        inter += (a && b) as usize;
        uni += (a || b) as usize;
    }
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub chamfer_l1: f64,
    pub mask_iou: f64,
    pub per_view_iou: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub sample: String,
    pub metric: String,
    pub value: f64,
}

impl MetricReport {
    /// One JSON object per line: the two headline metrics, then one line per view.
    pub fn records(&self, sample: &str) -> Vec<MetricRecord> {
        let mut out = vec![
            MetricRecord { sample: sample.into(), metric: "chamfer_l1".into(), value: self.chamfer_l1 },
            MetricRecord { sample: sample.into(), metric: "mask_iou".into(), value: self.mask_iou },
        ];
        for (i, v) in self.per_view_iou.iter().enumerate() {
            out.push(MetricRecord { sample: sample.into(), metric: format!("mask_iou_view{i}"), value: *v });
        }
        out
    }

    pub fn to_json_lines(&self, sample: &str) -> String {
        self.records(sample)
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record serializes") + "\n")
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub surface_samples: usize,
    pub views: usize,
    pub cameras: CameraDist,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            surface_samples: 4096,
            views: 8,
            cameras: CameraDist::default(),
            seed: 2024,
        }
    }
}

/// Chamfer-L1 of mesh surface samples against shape surface samples, and mean IoU of hard
/// mesh renders against sphere-traced ground truth over the protocol's fixed cameras.
pub fn evaluate_mesh(mesh: &TriMesh, spec: &ShapeSpec, proto: &EvalProtocol) -> Result<MetricReport> {
    let gt = sample_colored_pointcloud(spec, proto.surface_samples, derive_seed(proto.seed, "eval.gt"))?;
    let chamfer = chamfer_to_points(mesh, &gt.points, proto)?;
    let mut per_view = Vec::with_capacity(proto.views);
    for v in 0..proto.views {
        let cam = sample_camera(derive_seed(proto.seed, &format!("eval.view{v}")), &proto.cameras)?;
        let pred = rasterize_hard(mesh, &cam);
        let truth = sphere_trace_render(spec, &cam);
        per_view.push(mask_iou(&pred.mask, &truth.mask)?);
    }
    let mask_iou = per_view.iter().sum::<f64>() / per_view.len().max(1) as f64;
    Ok(MetricReport { chamfer_l1: chamfer, mask_iou, per_view_iou: per_view })
}

/// Chamfer-L1 between surface samples of `mesh` and given reference points.
pub fn chamfer_to_points(mesh: &TriMesh, reference: &[Vec3], proto: &EvalProtocol) -> Result<f64> {
    let s = sample_surface(mesh, proto.surface_samples, derive_seed(proto.seed, "eval.mesh"))?;
    chamfer_l1(&s.points, reference)
}
