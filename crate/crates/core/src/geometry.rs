//! Geometric primitives shared by the encoder, prompting and auto-prompting.

use std::collections::BTreeMap;
use std::f32::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

pub type Point3 = [f32; 3];

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dist(a: &Point3, b: &Point3) -> f32 {
    dist2(a, b).sqrt()
}

/// Axis-aligned bounds `(min, max)`. Panics on an empty slice.
pub fn bounding_box(positions: &[Point3]) -> (Point3, Point3) {
    assert!(!positions.is_empty(), "bounding box of an empty cloud");
    let mut lo = positions[0];
    let mut hi = positions[0];
    for p in positions {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    (lo, hi)
}

pub fn bbox_diagonal(positions: &[Point3]) -> f32 {
    let (lo, hi) = bounding_box(positions);
    dist(&lo, &hi)
}

/// Maps scene coordinates into `[-1, 1]³` using the scene bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub center: Point3,
    /// Half of the longest bounding-box side; always positive.
    pub scale: f32,
}

impl SceneFrame {
    pub fn new(center: Point3, scale: f32) -> Self {
        assert!(scale > 0.0 && scale.is_finite(), "scene scale must be positive");
        Self { center, scale }
    }

    pub fn identity() -> Self {
        Self::new([0.0; 3], 1.0)
    }

    pub fn from_positions(positions: &[Point3]) -> Self {
        let (lo, hi) = bounding_box(positions);
        let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
        let side = (0..3).map(|d| hi[d] - lo[d]).fold(0.0f32, f32::max);
        Self::new(center, (side / 2.0).max(1e-3))
    }

    #[inline]
    pub fn normalize(&self, p: &Point3) -> Point3 {
        [
            (p[0] - self.center[0]) / self.scale,
            (p[1] - self.center[1]) / self.scale,
            (p[2] - self.center[2]) / self.scale,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierConfig {
    pub n_bands: usize,
    pub base_frequency: f32,
    pub max_frequency: f32,
    pub include_input: bool,
}

impl Default for FourierConfig {
    fn default() -> Self {
        Self { n_bands: 6, base_frequency: 1.0, max_frequency: 32.0, include_input: true }
    }
}

impl FourierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bands == 0 {
            return input_err("fourier encoding needs at least one band");
        }
        if !(self.base_frequency > 0.0 && self.max_frequency >= self.base_frequency) {
            return input_err("fourier frequencies must satisfy 0 < base <= max");
        }
        Ok(())
    }

    /// Geometrically spaced band frequencies from `base_frequency` to `max_frequency`.
    pub fn frequencies(&self) -> Vec<f32> {
        if self.n_bands == 1 {
            return vec![self.base_frequency];
        }
        let ratio = self.max_frequency / self.base_frequency;
        (0..self.n_bands)
            .map(|k| self.base_frequency * ratio.powf(k as f32 / (self.n_bands - 1) as f32))
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        3 * 2 * self.n_bands + if self.include_input { 3 } else { 0 }
    }
}

/// Fourier features of an already-normalized point.
///
/// Layout: `[x, y, z]` (when `include_input`), then per band `k`:
/// `sin(2π f_k x), sin(2π f_k y), sin(2π f_k z), cos(2π f_k x), cos(2π f_k y), cos(2π f_k z)`.
pub fn fourier_features(normalized: &Point3, cfg: &FourierConfig, out: &mut Vec<f32>) {
    if cfg.include_input {
        out.extend_from_slice(normalized);
    }
    for f in cfg.frequencies() {
        let w = TAU * f;
        for v in normalized {
            out.push((w * v).sin());
        }
        for v in normalized {
            out.push((w * v).cos());
        }
    }
}

/// Normalizes `point` into the scene frame, then encodes it with [`fourier_features`].
pub fn fourier_encode(point: &Point3, cfg: &FourierConfig, frame: &SceneFrame) -> Vec<f32> {
    let mut out = Vec::with_capacity(cfg.output_dim());
    fourier_features(&frame.normalize(point), cfg, &mut out);
    out
}

/// Index of the point closest to `query`; ties go to the lowest index.
pub fn nearest_neighbor(positions: &[Point3], query: &Point3) -> Result<usize> {
    if positions.is_empty() {
        return input_err("nearest neighbor query on an empty cloud");
    }
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (i, p) in positions.iter().enumerate() {
        let d = dist2(p, query);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

/// Integer grid cell containing `p` for cell size `size`.
#[inline]
pub fn voxel_key(p: &Point3, size: f32) -> [i64; 3] {
    [
        (p[0] / size).floor() as i64,
        (p[1] / size).floor() as i64,
        (p[2] / size).floor() as i64,
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelDownsample {
    /// One representative coordinate per occupied voxel, ordered by voxel key.
    pub representatives: Vec<Point3>,
    /// Input index of each representative.
    pub representative_indices: Vec<usize>,
    /// For every input point, the index into `representatives` of its voxel.
    pub assignment: Vec<usize>,
    /// Voxel key of each representative.
    pub keys: Vec<[i64; 3]>,
}

impl VoxelDownsample {
    pub fn len(&self) -> usize {
        self.representatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.representatives.is_empty()
    }
}

/// Groups points into cubic voxels and keeps, per voxel, the input point nearest
/// the voxel's centroid (ties to the lowest index). Voxels are ordered by key,
/// so the output does not depend on input order.
pub fn voxel_downsample(positions: &[Point3], voxel_size: f32) -> Result<VoxelDownsample> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return input_err(format!("voxel size must be positive, got {voxel_size}"));
    }
    if positions.is_empty() {
        return input_err("voxel downsampling of an empty cloud");
    }
    if positions.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return input_err("non-finite coordinate in point cloud");
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in positions.iter().enumerate() {
        cells.entry(voxel_key(p, voxel_size)).or_default().push(i);
    }
    let mut out = VoxelDownsample {
        representatives: Vec::with_capacity(cells.len()),
        representative_indices: Vec::with_capacity(cells.len()),
        assignment: vec![0; positions.len()],
        keys: Vec::with_capacity(cells.len()),
    };
    for (k, (key, members)) in cells.into_iter().enumerate() {
        let mut c = [0.0f64; 3];
        for &i in &members {
            for d in 0..3 {
                c[d] += positions[i][d] as f64;
            }
        }
        let n = members.len() as f64;
        let centroid = [(c[0] / n) as f32, (c[1] / n) as f32, (c[2] / n) as f32];
        // members are in ascending index order, so strict `<` keeps the lowest index on ties
        let mut best = members[0];
        let mut best_d = f32::INFINITY;
        for &i in &members {
            let d = dist2(&positions[i], &centroid);
            if d < best_d {
                best_d = d;
                best = i;
            }
            out.assignment[i] = k;
        }
        out.representatives.push(positions[best]);
        out.representative_indices.push(best);
        out.keys.push(key);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_cloud(seed: u64, n: usize, extent: f32) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                ]
            })
            .collect()
    }

    #[test]
    fn voxel_downsample_counts_occupied_cells() {
        let pts = [[0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [0.9, 0.0, 0.0]];
        let ds = voxel_downsample(&pts, 0.5).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.assignment[0], ds.assignment[1]);
        assert_ne!(ds.assignment[0], ds.assignment[2]);
    }

    #[test]
    fn voxel_larger_than_cloud_gives_single_cell() {
        let pts: Vec<Point3> = random_cloud(3, 200, 1.0).iter().map(|p| [p[0] + 2.0, p[1] + 2.0, p[2] + 2.0]).collect();
        let diag = bbox_diagonal(&pts);
        // shifted into the positive octant so one cell of size > diag can hold everything
        let ds = voxel_downsample(&pts, 4.0 * diag.max(4.0)).unwrap();
        assert_eq!(ds.len(), 1);
    }

    #[test]
    fn voxel_count_matches_cell_hashing() {
        let pts = random_cloud(11, 1000, 1.0);
        let ds = voxel_downsample(&pts, 0.25).unwrap();
        let distinct: HashSet<[i64; 3]> = pts
            .iter()
            .map(|p| [(p[0] / 0.25).floor() as i64, (p[1] / 0.25).floor() as i64, (p[2] / 0.25).floor() as i64])
            .collect();
        assert_eq!(ds.len(), distinct.len());
    }

    #[test]
    fn voxel_rejects_bad_input() {
        assert!(voxel_downsample(&[[0.0, f32::NAN, 0.0]], 1.0).is_err());
        assert!(voxel_downsample(&[[0.0; 3]], 0.0).is_err());
        assert!(voxel_downsample(&[], 1.0).is_err());
    }

    #[test]
    fn representative_is_nearest_to_centroid() {
        let pts = [[0.0, 0.0, 0.0], [0.4, 0.0, 0.0], [0.21, 0.0, 0.0]];
        let ds = voxel_downsample(&pts, 1.0).unwrap();
        assert_eq!(ds.representative_indices, vec![2]);
    }

    #[test]
    fn nearest_neighbor_rules() {
        let pts = random_cloud(5, 10, 1.0);
        assert_eq!(nearest_neighbor(&pts, &pts[5]).unwrap(), 5);
        let mut tie = vec![[9.0, 9.0, 9.0]; 8];
        tie[2] = [1.0, 0.0, 0.0];
        tie[7] = [-1.0, 0.0, 0.0];
        assert_eq!(nearest_neighbor(&tie, &[0.0; 3]).unwrap(), 2);
        assert!(nearest_neighbor(&[], &[0.0; 3]).is_err());
    }

    #[test]
    fn nearest_neighbor_matches_linear_scan() {
        let pts = random_cloud(8, 500, 3.0);
        let queries = random_cloud(9, 50, 4.0);
        for q in &queries {
            let got = nearest_neighbor(&pts, q).unwrap();
            let best = pts
                .iter()
                .map(|p| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)) as f64)
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, d)| if d < acc.1 { (i, d) } else { acc });
            assert_eq!(got, best.0);
        }
    }

    #[test]
    fn fourier_origin_and_dimension() {
        let cfg = FourierConfig { n_bands: 4, include_input: true, ..Default::default() };
        let enc = fourier_encode(&[0.0; 3], &cfg, &SceneFrame::identity());
        assert_eq!(enc.len(), 27);
        assert_eq!(cfg.output_dim(), 27);
        for band in 0..4 {
            let base = 3 + band * 6;
            assert_eq!(&enc[base..base + 3], &[0.0, 0.0, 0.0]);
            assert_eq!(&enc[base + 3..base + 6], &[1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn fourier_frequencies_are_geometric() {
        let f = FourierConfig::default().frequencies();
        assert_eq!(f.len(), 6);
        assert!((f[0] - 1.0).abs() < 1e-6 && (f[5] - 32.0).abs() < 1e-4);
        for w in f.windows(2) {
            assert!((w[1] / w[0] - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn fourier_is_injective_on_grid() {
        let cfg = FourierConfig::default();
        let axis: Vec<f32> = (0..10).map(|i| -1.0 + 2.0 * i as f32 / 9.0).collect();
        let mut codes: Vec<Vec<f32>> = Vec::new();
        for &x in &axis {
            for &y in &axis {
                for &z in &axis {
                    codes.push(fourier_encode(&[x, y, z], &cfg, &SceneFrame::identity()));
                }
            }
        }
        for i in 0..codes.len() {
            for j in i + 1..codes.len() {
                let d: f32 = codes[i].iter().zip(&codes[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-4, "grid points {i} and {j} share an encoding");
            }
        }
    }

    #[test]
    fn scene_frame_maps_bbox_into_unit_cube() {
        let pts = random_cloud(2, 300, 7.0);
        let frame = SceneFrame::from_positions(&pts);
        for p in &pts {
            let n = frame.normalize(p);
            assert!(n.iter().all(|v| v.abs() <= 1.0 + 1e-5));
        }
    }

    proptest! {
        #[test]
        fn fourier_is_band_lipschitz(
            a in prop::array::uniform3(-1.0f32..1.0),
            b in prop::array::uniform3(-1.0f32..1.0),
        ) {
            let cfg = FourierConfig::default();
            let freqs = cfg.frequencies();
            let ea = fourier_encode(&a, &cfg, &SceneFrame::identity());
            let eb = fourier_encode(&b, &cfg, &SceneFrame::identity());
            for (k, f) in freqs.iter().enumerate() {
                for j in 0..6 {
                    let idx = 3 + k * 6 + j;
                    let d = j % 3;
                    let bound = TAU * f * (a[d] - b[d]).abs() + 1e-4;
                    prop_assert!((ea[idx] - eb[idx]).abs() <= bound);
                }
            }
        }

        #[test]
        fn voxel_assignment_stays_in_cell(seed in 0u64..1000, size in 0.05f32..2.0) {
            let pts = random_cloud(seed, 200, 2.0);
            let ds = voxel_downsample(&pts, size).unwrap();
            for (i, p) in pts.iter().enumerate() {
                let rep = ds.representatives[ds.assignment[i]];
                prop_assert_eq!(voxel_key(p, size), voxel_key(&rep, size));
            }
            let input_cells: HashSet<[i64; 3]> = pts.iter().map(|p| voxel_key(p, size)).collect();
            let rep_cells: HashSet<[i64; 3]> = ds.representatives.iter().map(|p| voxel_key(p, size)).collect();
            prop_assert_eq!(input_cells, rep_cells);
        }

        #[test]
        fn nearest_neighbor_of_member_is_itself(seed in 0u64..1000) {
            let pts = random_cloud(seed, 64, 5.0);
            for (i, p) in pts.iter().enumerate() {
                prop_assert_eq!(nearest_neighbor(&pts, p).unwrap(), i);
            }
        }
    }
}
