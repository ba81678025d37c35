use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bbox_diagonal, Point3};

/// Coarse sensing domain a scene belongs to; selects the normalization branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainId {
    Indoor,
    Outdoor,
    Aerial,
}

impl DomainId {
    pub const ALL: [DomainId; 3] = [DomainId::Indoor, DomainId::Outdoor, DomainId::Aerial];

    pub fn as_str(self) -> &'static str {
        match self {
            DomainId::Indoor => "indoor",
            DomainId::Outdoor => "outdoor",
            DomainId::Aerial => "aerial",
        }
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indoor" => Ok(DomainId::Indoor),
            "outdoor" => Ok(DomainId::Outdoor),
            "aerial" => Ok(DomainId::Aerial),
            other => Err(Error::Domain(other.to_string())),
        }
    }
}

/// One value per domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerDomain<T> {
    pub indoor: T,
    pub outdoor: T,
    pub aerial: T,
}

impl<T> PerDomain<T> {
    pub fn get(&self, domain: DomainId) -> &T {
        match domain {
            DomainId::Indoor => &self.indoor,
            DomainId::Outdoor => &self.outdoor,
            DomainId::Aerial => &self.aerial,
        }
    }

    pub fn get_mut(&mut self, domain: DomainId) -> &mut T {
        match domain {
            DomainId::Indoor => &mut self.indoor,
            DomainId::Outdoor => &mut self.outdoor,
            DomainId::Aerial => &mut self.aerial,
        }
    }
}

/// Label used for unannotated points and for clustering noise.
pub const UNLABELED: i32 = -1;

/// A point cloud with optional per-point instance / class annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub positions: Vec<Point3>,
    pub instance_ids: Vec<i32>,
    pub class_ids: Vec<i32>,
    pub domain: DomainId,
    pub class_names: Vec<String>,
    pub scene_id: String,
}

impl SceneSample {
    /// Unlabeled scene.
    pub fn unlabeled(positions: Vec<Point3>, domain: DomainId, scene_id: impl Into<String>) -> Self {
        let n = positions.len();
        Self {
            positions,
            instance_ids: vec![UNLABELED; n],
            class_ids: vec![UNLABELED; n],
            domain,
            class_names: Vec::new(),
            scene_id: scene_id.into(),
        }
    }

    pub fn n_points(&self) -> usize {
        self.positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::Consistency("scene has no points".into()));
        }
        if self.instance_ids.len() != n || self.class_ids.len() != n {
            return Err(Error::Consistency(format!(
                "array lengths differ: {n} positions, {} instance ids, {} class ids",
                self.instance_ids.len(),
                self.class_ids.len()
            )));
        }
        if let Some(i) = self.positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Consistency(format!("point {i} has a non-finite coordinate")));
        }
        let n_classes = self.class_names.len() as i32;
        for i in 0..n {
            let (inst, cls) = (self.instance_ids[i], self.class_ids[i]);
            if inst < UNLABELED || cls < UNLABELED {
                return Err(Error::Consistency(format!("point {i} has a label below -1")));
            }
            if inst >= 0 && cls < 0 {
                return Err(Error::Consistency(format!("point {i} has an instance but no class")));
            }
            if cls >= n_classes {
                return Err(Error::Consistency(format!(
                    "point {i} has class {cls} but only {n_classes} class names"
                )));
            }
        }
        Ok(())
    }

    /// Point indices of every labeled instance, keyed by instance id.
    pub fn instances(&self) -> BTreeMap<i32, Vec<usize>> {
        let mut out: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, &id) in self.instance_ids.iter().enumerate() {
            if id >= 0 {
                out.entry(id).or_default().push(i);
            }
        }
        out
    }

    pub fn instance_mask(&self, id: i32) -> Vec<bool> {
        self.instance_ids.iter().map(|&v| v == id).collect()
    }

    /// Class of an instance (taken from its first point).
    pub fn instance_class(&self, id: i32) -> Option<i32> {
        self.instance_ids.iter().position(|&v| v == id).map(|i| self.class_ids[i])
    }

    pub fn labeled_count(&self) -> usize {
        self.instance_ids.iter().filter(|&&v| v >= 0).count()
    }

    pub fn bbox_diagonal(&self) -> f32 {
        bbox_diagonal(&self.positions)
    }

    /// Dataset key: everything before the first `/` of the scene id.
    pub fn dataset_key(&self) -> &str {
        self.scene_id.split('/').next().unwrap_or(&self.scene_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SceneSample {
        SceneSample {
            positions: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            instance_ids: vec![0, 0, -1],
            class_ids: vec![1, 1, -1],
            domain: DomainId::Indoor,
            class_names: vec!["a".into(), "b".into()],
            scene_id: "set/0".into(),
        }
    }

    #[test]
    fn domain_parsing_is_closed() {
        for d in DomainId::ALL {
            assert_eq!(d.as_str().parse::<DomainId>().unwrap(), d);
        }
        assert!(matches!("underwater".parse::<DomainId>(), Err(Error::Domain(_))));
    }

    #[test]
    fn validation_catches_broken_invariants() {
        assert!(tiny().validate().is_ok());
        let mut s = tiny();
        s.class_ids[0] = -1;
        assert!(s.validate().is_err());
        let mut s = tiny();
        s.class_ids[2] = 2;
        assert!(s.validate().is_err());
        let mut s = tiny();
        s.instance_ids.pop();
        assert!(matches!(s.validate(), Err(Error::Consistency(_))));
        let mut s = tiny();
        s.positions[1][2] = f32::INFINITY;
        assert!(s.validate().is_err());
    }

    #[test]
    fn instance_helpers() {
        let s = tiny();
        assert_eq!(s.instances().get(&0), Some(&vec![0, 1]));
        assert_eq!(s.instance_class(0), Some(1));
        assert_eq!(s.labeled_count(), 2);
        assert_eq!(s.dataset_key(), "set");
    }
}
