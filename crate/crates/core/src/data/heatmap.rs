use super::BoundingBox;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub const DEFAULT_HEATMAP_SIGMA_PX: f64 = 8.0;

/// Box-center prior fed to the backbone as an extra input channel.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapChannel {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub values: Tensor,
    pub sigma_px: f64,
}

/// `h(u) = max_k exp(-|u - c_k|^2 / sigma^2)` at every integer pixel `u = (x, y)`,
/// with `c_k` the center of box `k`. No boxes gives all zeros.
pub fn build_centers_heatmap(
    boxes: &[BoundingBox],
    height: usize,
    width: usize,
    sigma_px: f64,
) -> Result<HeatmapChannel> {
    if !(sigma_px > 0.0) {
        return Err(invalid(format!("heatmap sigma must be positive, got {sigma_px}")));
    }
    if height == 0 || width == 0 {
        return Err(invalid("heatmap needs a non-empty image"));
    }
    let inv_s2 = 1.0 / (sigma_px * sigma_px);
    let centers: Vec<(f64, f64)> = boxes.iter().map(BoundingBox::center).collect();
    let mut data = vec![0.0; height * width];
    for (y, row) in data.chunks_mut(width).enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let (fx, fy) = (x as f64, y as f64);
            *v = centers
                .iter()
                .map(|&(cx, cy)| (-((fx - cx).powi(2) + (fy - cy).powi(2)) * inv_s2).exp())
                .fold(0.0, f64::max);
        }
    }
    Ok(HeatmapChannel {
        values: Tensor::new(vec![1, height, width], data),
        sigma_px,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(h: &HeatmapChannel, x: usize, y: usize) -> f64 {
        h.values.at3(0, y, x)
    }

    #[test]
    fn peak_and_one_sigma() {
        let b = BoundingBox::new(40.0, 40.0, 20.0, 20.0);
        let h = build_centers_heatmap(&[b], 100, 100, 8.0).unwrap();
        assert_eq!(at(&h, 50, 50), 1.0);
        assert!((at(&h, 58, 50) - (-1.0f64).exp()).abs() < 1e-12);
        assert!((at(&h, 50, 42) - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn coincident_centers_equal_single() {
        let a = BoundingBox::new(10.0, 10.0, 20.0, 20.0);
        let b = BoundingBox::new(15.0, 15.0, 10.0, 10.0);
        let one = build_centers_heatmap(&[a], 40, 50, 5.0).unwrap();
        let two = build_centers_heatmap(&[a, b], 40, 50, 5.0).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn empty_and_errors() {
        let h = build_centers_heatmap(&[], 8, 9, 3.0).unwrap();
        assert!(h.values.data().iter().all(|&v| v == 0.0));
        assert!(build_centers_heatmap(&[], 8, 9, 0.0).is_err());
        assert!(build_centers_heatmap(&[], 8, 9, -1.0).is_err());
    }

    #[test]
    fn monotone_along_rays() {
        let b = BoundingBox::new(20.0, 20.0, 10.0, 10.0);
        let h = build_centers_heatmap(&[b], 64, 64, 8.0).unwrap();
        for (dx, dy) in [(1i64, 0i64), (0, 1), (-1, 0), (1, 1), (-1, 1)] {
            let mut prev = 2.0;
            for t in 0..20 {
                let (x, y) = (25 + dx * t, 25 + dy * t);
                let v = at(&h, x as usize, y as usize);
                assert!(v <= prev);
                prev = v;
            }
        }
        assert!(h.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
