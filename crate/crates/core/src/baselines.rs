//! Geometry-only distance regressors fitted in closed form.

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, FrameSample};
use crate::error::{invalid, Error, Result};

/// Default lower bound on baseline predictions, in meters.
pub const DEFAULT_MIN_PREDICTION_M: f64 = 0.1;

/// Box-geometry inputs available to the regressor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryFeature {
    HeightPx,
    WidthPx,
    DiagonalPx,
    InvHeightRel,
    InvWidthRel,
    InvDiagonalRel,
}

impl GeometryFeature {
    pub const ALL: [GeometryFeature; 6] = [
        GeometryFeature::HeightPx,
        GeometryFeature::WidthPx,
        GeometryFeature::DiagonalPx,
        GeometryFeature::InvHeightRel,
        GeometryFeature::InvWidthRel,
        GeometryFeature::InvDiagonalRel,
    ];
}

/// Geometry values followed by a one-hot class block.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryFeatures {
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricModel {
    pub features: Vec<GeometryFeature>,
    /// Class vocabulary; order fixes the one-hot layout.
    pub classes: Vec<String>,
    pub coefficients: Vec<f64>,
    pub ridge: f64,
    pub min_prediction_m: f64,
}

/// Builds the feature vector of one box in a `image_wh = (W, H)` image.
pub fn geometric_features(
    bbox: &BoundingBox,
    image_wh: (usize, usize),
    class_label: &str,
    features: &[GeometryFeature],
    classes: &[String],
) -> Result<GeometryFeatures> {
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(invalid(format!("box {bbox:?} has zero size")));
    }
    let (iw, ih) = (image_wh.0 as f64, image_wh.1 as f64);
    if !(iw > 0.0 && ih > 0.0) {
        return Err(invalid("image size must be positive"));
    }
    let class = classes
        .iter()
        .position(|c| c == class_label)
        .ok_or_else(|| invalid(format!("class {class_label:?} is not in the model vocabulary")))?;
    let diag = bbox.w.hypot(bbox.h);
    let mut vector: Vec<f64> = features
        .iter()
        .map(|f| match f {
            GeometryFeature::HeightPx => bbox.h,
            GeometryFeature::WidthPx => bbox.w,
            GeometryFeature::DiagonalPx => diag,
            GeometryFeature::InvHeightRel => ih / bbox.h,
            GeometryFeature::InvWidthRel => iw / bbox.w,
            GeometryFeature::InvDiagonalRel => iw.hypot(ih) / diag,
        })
        .collect();
    vector.extend((0..classes.len()).map(|i| if i == class { 1.0 } else { 0.0 }));
    Ok(GeometryFeatures { vector })
}

/// Sorted, deduplicated class labels of the non-ignored objects.
pub fn class_vocabulary(frames: &[FrameSample]) -> Vec<String> {
    let mut v: Vec<String> = frames
        .iter()
        .flat_map(|f| f.annotations.iter().filter(|a| !a.dont_care).map(|a| a.class_label.clone()))
        .collect();
    v.sort();
    v.dedup();
    v
}

/// Least-squares fit of `features -> distance` through the normal equations
/// `(X^T X + ridge * n * I) b = X^T y`. Columns are scaled to unit RMS before
/// solving so `ridge` is independent of feature units.
pub fn fit_geometric(
    features: &[GeometryFeatures],
    distances: &[f64],
    ridge: f64,
    spec: (&[GeometryFeature], &[String]),
) -> Result<GeometricModel> {
    if features.len() != distances.len() {
        return Err(Error::Shape(format!("{} samples but {} distances", features.len(), distances.len())));
    }
    if features.is_empty() {
        return Err(invalid("no samples to fit"));
    }
    if !(ridge >= 0.0) {
        return Err(invalid(format!("ridge must be non-negative, got {ridge}")));
    }
    if let Some(d) = distances.iter().find(|d| !(**d > 0.0)) {
        return Err(invalid(format!("distances must be positive, got {d}")));
    }
    let p = features[0].vector.len();
    if features.iter().any(|f| f.vector.len() != p) || p != spec.0.len() + spec.1.len() {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let n = features.len();
    if ridge == 0.0 && n < p {
        return Err(Error::Singular(format!(
            "{n} samples cannot determine {p} coefficients; use ridge > 0"
        )));
    }
    let scale: Vec<f64> = (0..p)
        .map(|j| {
            let ms = features.iter().map(|f| f.vector[j] * f.vector[j]).sum::<f64>() / n as f64;
            if ms > 0.0 {
                ms.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    for (f, &y) in features.iter().zip(distances) {
        let x: Vec<f64> = f.vector.iter().zip(&scale).map(|(v, s)| v / s).collect();
        for i in 0..p {
            b[i] += x[i] * y;
            for j in 0..p {
                a[i * p + j] += x[i] * x[j];
            }
        }
    }
    for i in 0..p {
        a[i * p + i] += ridge * n as f64;
    }
    let coef = cholesky_solve(&mut a, &mut b, p)?;
    Ok(GeometricModel {
        features: spec.0.to_vec(),
        classes: spec.1.to_vec(),
        coefficients: coef.iter().zip(&scale).map(|(c, s)| c / s).collect(),
        ridge,
        min_prediction_m: DEFAULT_MIN_PREDICTION_M,
    })
}

/// Solves the symmetric positive definite system in place; fails on any pivot
/// that is not clearly positive relative to the diagonal.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], p: usize) -> Result<Vec<f64>> {
    let max_diag = (0..p).map(|i| a[i * p + i]).fold(0.0, f64::max);
    let tol = max_diag * 1e-13;
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= a[j * p + k] * a[j * p + k];
        }
        if !(d > tol) {
            return Err(Error::Singular(format!(
                "normal equations are singular at coefficient {j}; use ridge > 0"
            )));
        }
        let l = d.sqrt();
        a[j * p + j] = l;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= a[i * p + k] * a[j * p + k];
            }
            a[i * p + j] = s / l;
        }
    }
    let mut y = vec![0.0; p];
    for i in 0..p {
        let s = b[i] - (0..i).map(|k| a[i * p + k] * y[k]).sum::<f64>();
        y[i] = s / a[i * p + i];
    }
    for i in (0..p).rev() {
        let s = y[i] - (i + 1..p).map(|k| a[k * p + i] * b[k]).sum::<f64>();
        b[i] = s / a[i * p + i];
    }
    Ok(b.to_vec())
}

impl GeometricModel {
    pub fn predict(&self, features: &GeometryFeatures) -> Result<f64> {
        if features.vector.len() != self.coefficients.len() {
            return Err(Error::Shape(format!(
                "feature vector of length {} for a model with {} coefficients",
                features.vector.len(),
                self.coefficients.len()
            )));
        }
        let raw: f64 = features.vector.iter().zip(&self.coefficients).map(|(x, c)| x * c).sum();
        Ok(raw.max(self.min_prediction_m))
    }

    pub fn features_for(&self, bbox: &BoundingBox, image_wh: (usize, usize), class_label: &str) -> Result<GeometryFeatures> {
        geometric_features(bbox, image_wh, class_label, &self.features, &self.classes)
    }

    /// Fits on every usable object of `frames` (see [`crate::harness::usable_objects`]).
    pub fn fit_frames(frames: &[FrameSample], features: &[GeometryFeature], ridge: f64) -> Result<Self> {
        let classes = class_vocabulary(frames);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for f in frames {
            for (_, a) in crate::harness::usable_objects(f) {
                xs.push(geometric_features(&a.bbox, (f.width(), f.height()), &a.class_label, features, &classes)?);
                ys.push(a.distance_m);
            }
        }
        fit_geometric(&xs, &ys, ridge, (features, &classes))
    }
}

/// Geometry prediction for a box; exposed for callers that do not hold features.
pub fn predict_geometric(model: &GeometricModel, features: &GeometryFeatures) -> Result<f64> {
    model.predict(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SynthConfig};

    fn one_class() -> Vec<String> {
        vec!["pedestrian".to_string()]
    }

    #[test]
    fn inverse_relative_height() {
        let f = geometric_features(
            &BoundingBox::new(0.0, 0.0, 68.0, 170.0),
            (1000, 680),
            "pedestrian",
            &GeometryFeature::ALL,
            &one_class(),
        )
        .unwrap();
        assert!((f.vector[3] - 4.0).abs() < 1e-15);
        assert_eq!(f.vector.len(), 7);
    }

    #[test]
    fn class_only_changes_one_hot() {
        let classes = vec!["car".to_string(), "pedestrian".to_string()];
        let b = BoundingBox::new(3.0, 4.0, 20.0, 30.0);
        let a = geometric_features(&b, (100, 80), "car", &GeometryFeature::ALL, &classes).unwrap();
        let p = geometric_features(&b, (100, 80), "pedestrian", &GeometryFeature::ALL, &classes).unwrap();
        assert_eq!(a.vector[..6], p.vector[..6]);
        assert_eq!(&a.vector[6..], &[1.0, 0.0]);
        assert_eq!(&p.vector[6..], &[0.0, 1.0]);
        let zero = BoundingBox::new(3.0, 4.0, 20.0, 0.0);
        assert!(geometric_features(&zero, (100, 80), "car", &GeometryFeature::ALL, &classes).is_err());
    }

    fn pinhole(num_frames: usize, seed: u64) -> (SynthConfig, Vec<FrameSample>) {
        let cfg = SynthConfig {
            num_frames,
            focal_px: 700.0,
            image_width: 1000,
            image_height: 680,
            distance_range_m: [5.0, 60.0],
            ..SynthConfig::default()
        };
        let frames = generate_synthetic_dataset(&cfg, seed).unwrap();
        (cfg, frames)
    }

    #[test]
    fn recovers_pinhole_coefficient() {
        let (cfg, train) = pinhole(30, 1);
        let feats = [GeometryFeature::InvHeightRel];
        let m = GeometricModel::fit_frames(&train, &feats, 0.0).unwrap();
        let want = cfg.focal_px * 1.7 / cfg.image_height as f64;
        assert!((m.coefficients[0] - want).abs() < 1e-6, "{:?}", m.coefficients);
        assert!(m.coefficients[1].abs() < 1e-6);
        let (_, test) = pinhole(10, 2);
        for f in &test {
            for a in &f.annotations {
                let x = m.features_for(&a.bbox, (f.width(), f.height()), &a.class_label).unwrap();
                assert!((m.predict(&x).unwrap() - a.distance_m).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn collinear_full_set_needs_ridge() {
        let (_, train) = pinhole(30, 3);
        assert!(matches!(
            GeometricModel::fit_frames(&train, &GeometryFeature::ALL, 0.0),
            Err(Error::Singular(_))
        ));
        assert!(GeometricModel::fit_frames(&train, &GeometryFeature::ALL, 1e-10).is_ok());
    }

    #[test]
    fn constant_targets() {
        let classes = one_class();
        let xs: Vec<GeometryFeatures> = (1..6)
            .map(|i| {
                geometric_features(
                    &BoundingBox::new(0.0, 0.0, 5.0, 10.0 * i as f64),
                    (100, 100),
                    "pedestrian",
                    &[GeometryFeature::InvHeightRel],
                    &classes,
                )
                .unwrap()
            })
            .collect();
        let m = fit_geometric(&xs, &[7.0; 5], 0.0, (&[GeometryFeature::InvHeightRel], &classes)).unwrap();
        for x in &xs {
            assert!((m.predict(x).unwrap() - 7.0).abs() < 1e-9);
        }
    }

    #[test]
    fn underdetermined_is_singular() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let xs: Vec<GeometryFeatures> = [("a", 10.0), ("b", 20.0)]
            .iter()
            .map(|(c, h)| {
                geometric_features(&BoundingBox::new(0.0, 0.0, 5.0, *h), (100, 100), c, &GeometryFeature::ALL, &classes)
                    .unwrap()
            })
            .collect();
        let r = fit_geometric(&xs, &[3.0, 4.0], 0.0, (&GeometryFeature::ALL, &classes));
        assert!(matches!(r, Err(Error::Singular(_))));
    }

    #[test]
    fn ridge_continuity() {
        let (_, train) = pinhole(20, 5);
        let feats = [GeometryFeature::HeightPx, GeometryFeature::InvHeightRel];
        let m0 = GeometricModel::fit_frames(&train, &feats, 0.0).unwrap();
        let m8 = GeometricModel::fit_frames(&train, &feats, 1e-8).unwrap();
        let m4 = GeometricModel::fit_frames(&train, &feats, 1e-4).unwrap();
        let d8: f64 = m0.coefficients.iter().zip(&m8.coefficients).map(|(a, b)| (a - b).abs()).sum();
        let d4: f64 = m0.coefficients.iter().zip(&m4.coefficients).map(|(a, b)| (a - b).abs()).sum();
        assert!(d8 < 1e-5, "{d8}");
        assert!(d8 <= d4);
    }

    #[test]
    fn clamp_and_dimension() {
        let m = GeometricModel {
            features: vec![GeometryFeature::HeightPx],
            classes: one_class(),
            coefficients: vec![-1.0, 0.0],
            ridge: 0.0,
            min_prediction_m: DEFAULT_MIN_PREDICTION_M,
        };
        assert_eq!(m.predict(&GeometryFeatures { vector: vec![3.0, 1.0] }).unwrap(), 0.1);
        assert!(m.predict(&GeometryFeatures { vector: vec![3.0] }).is_err());
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<GeometricModel>(&json).unwrap(), m);
    }
}
