use crate::error::{invalid, Result};

/// Distance of the LiDAR keypoint for one object: the element at 0-based
/// index `floor(0.1 * count)` of the ascending-sorted point distances.
pub fn kitti_keypoint_distance(point_distances: &[f64]) -> Result<f64> {
    if point_distances.is_empty() {
        return Err(invalid("keypoint distance needs at least one point"));
    }
    if let Some(d) = point_distances.iter().find(|d| !(**d > 0.0)) {
        return Err(invalid(format!("point distance {d} is not positive")));
    }
    let mut sorted = point_distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = (0.1 * sorted.len() as f64).floor() as usize;
    Ok(sorted[idx.min(sorted.len() - 1)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point() {
        assert_eq!(kitti_keypoint_distance(&[5.0]).unwrap(), 5.0);
    }

    #[test]
    fn tenth_percentile_of_ten() {
        let pts: Vec<f64> = (1..=10).rev().map(f64::from).collect();
        assert_eq!(kitti_keypoint_distance(&pts).unwrap(), 2.0);
    }

    #[test]
    fn nineteen_points_uses_index_one() {
        let pts: Vec<f64> = (1..=19).map(f64::from).collect();
        assert_eq!(kitti_keypoint_distance(&pts).unwrap(), 2.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(kitti_keypoint_distance(&[]).is_err());
        assert!(kitti_keypoint_distance(&[1.0, -2.0]).is_err());
        assert!(kitti_keypoint_distance(&[0.0]).is_err());
    }
}
