use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{SceneSample, UNLABELED};
use crate::error::{input_err, Result};
use crate::geometry::{dist2, Point3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringParams {
    pub neighborhood_radius: f32,
    pub min_cluster_size: usize,
}

impl Default for ClusteringParams {
    fn default() -> Self {
        Self { neighborhood_radius: 0.3, min_cluster_size: 10 }
    }
}

impl ClusteringParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.neighborhood_radius > 0.0) || !self.neighborhood_radius.is_finite() {
            return input_err("neighborhood radius must be positive");
        }
        if self.min_cluster_size == 0 {
            return input_err("min_cluster_size must be at least 1");
        }
        Ok(())
    }
}

/// Splits a set of points into spatial clusters.
///
/// Returns one label per point: a cluster index `0..k` or [`UNLABELED`] for noise.
/// Cluster indices are ordered by the lowest point index they contain.
pub trait StuffClusterer {
    fn cluster(&self, positions: &[Point3]) -> Vec<i32>;
}

/// Connected components of the graph linking points at distance ≤ radius.
#[derive(Clone, Debug)]
pub struct RadiusGraphClusterer {
    pub params: ClusteringParams,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as root so roots are deterministic
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

impl StuffClusterer for RadiusGraphClusterer {
    fn cluster(&self, positions: &[Point3]) -> Vec<i32> {
        let r = self.params.neighborhood_radius;
        let r2 = r * r;
        let cell = |p: &Point3| -> [i64; 3] {
            [(p[0] / r).floor() as i64, (p[1] / r).floor() as i64, (p[2] / r).floor() as i64]
        };
        let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in positions.iter().enumerate() {
            grid.entry(cell(p)).or_default().push(i);
        }
        let mut uf = UnionFind::new(positions.len());
        for (i, p) in positions.iter().enumerate() {
            let c = cell(p);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(bucket) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                            continue;
                        };
                        for &j in bucket {
                            if j > i && dist2(p, &positions[j]) <= r2 {
                                uf.union(i, j);
                            }
                        }
                    }
                }
            }
        }
        let roots: Vec<usize> = (0..positions.len()).map(|i| uf.find(i)).collect();
        let mut sizes: HashMap<usize, usize> = HashMap::new();
        for &root in &roots {
            *sizes.entry(root).or_default() += 1;
        }
        let mut label_of: HashMap<usize, i32> = HashMap::new();
        let mut next = 0;
        roots
            .iter()
            .map(|root| {
                if sizes[root] < self.params.min_cluster_size {
                    return UNLABELED;
                }
                *label_of.entry(*root).or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    }
}

/// Gives every point of a stuff class a pseudo-instance id from radius-graph clustering.
pub fn cluster_stuff_instances(
    scene: &SceneSample,
    stuff_classes: &BTreeSet<i32>,
    params: &ClusteringParams,
) -> Result<SceneSample> {
    params.validate()?;
    Ok(cluster_stuff_instances_with(
        scene,
        stuff_classes,
        &RadiusGraphClusterer { params: params.clone() },
    ))
}

/// Like [`cluster_stuff_instances`] with any clustering provider.
///
/// Classes are clustered independently; new ids continue after the largest
/// existing instance id. Things-class points are never touched.
pub fn cluster_stuff_instances_with(
    scene: &SceneSample,
    stuff_classes: &BTreeSet<i32>,
    clusterer: &dyn StuffClusterer,
) -> SceneSample {
    let mut out = scene.clone();
    let mut next_id = scene.instance_ids.iter().copied().max().unwrap_or(UNLABELED).max(UNLABELED) + 1;
    for &class in stuff_classes {
        let members: Vec<usize> = (0..scene.n_points()).filter(|&i| scene.class_ids[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let pts: Vec<Point3> = members.iter().map(|&i| scene.positions[i]).collect();
        let labels = clusterer.cluster(&pts);
        let n_clusters = labels.iter().copied().max().map_or(0, |m| m + 1);
        for (&i, &label) in members.iter().zip(&labels) {
            out.instance_ids[i] = if label >= 0 { next_id + label } else { UNLABELED };
        }
        next_id += n_clusters;
    }
    out
}
