use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::pcdata::DomainId;

/// Which normalization statistics and affine parameters a scene is routed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// One shared branch for every scene.
    Batch,
    /// One branch per dataset, keyed by the scene id prefix before `/`.
    Dataset,
    /// One branch per sensing domain.
    Domain,
}

pub const SHARED_KEY: &str = "shared";

impl NormMode {
    /// Branch key for a scene.
    pub fn key(self, domain: DomainId, scene_id: &str) -> String {
        match self {
            NormMode::Batch => SHARED_KEY.to_string(),
            NormMode::Dataset => scene_id.split('/').next().unwrap_or(scene_id).to_string(),
            NormMode::Domain => domain.as_str().to_string(),
        }
    }

    /// Every branch a model in this mode carries.
    pub fn keys(self, dataset_keys: &[String]) -> Vec<String> {
        match self {
            NormMode::Batch => vec![SHARED_KEY.to_string()],
            NormMode::Dataset => dataset_keys.to_vec(),
            NormMode::Domain => DomainId::ALL.iter().map(|d| d.as_str().to_string()).collect(),
        }
    }
}

/// Running-statistic update produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

/// Mode flag plus the statistic updates a forward pass accumulates.
#[derive(Debug, Default)]
pub struct NormContext {
    pub training: bool,
    pub updates: Vec<StatUpdate>,
}

impl NormContext {
    pub fn inference() -> Self {
        Self { training: false, updates: Vec::new() }
    }

    pub fn training() -> Self {
        Self { training: true, updates: Vec::new() }
    }

    /// Folds the recorded batch statistics into the running statistics.
    pub fn apply_updates(&mut self, store: &mut ParamStore, momentum: f32) {
        for u in self.updates.drain(..) {
            blend(store.value_mut(u.running_mean), &u.stats.mean, momentum);
            blend(store.value_mut(u.running_var), &u.stats.var_unbiased, momentum);
        }
    }
}

fn blend(running: &mut Tensor, batch: &[f32], momentum: f32) {
    for (r, b) in running.data_mut().iter_mut().zip(batch) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

#[derive(Clone, Debug)]
pub struct NormBranch {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// A normalization site holding one `(γ, β, running mean, running var)` branch per key.
#[derive(Clone, Debug)]
pub struct DomainNorm {
    pub branches: BTreeMap<String, NormBranch>,
    pub eps: f32,
}

impl DomainNorm {
    pub const EPS: f32 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize, keys: &[String]) -> Self {
        let branches = keys
            .iter()
            .map(|k| {
                let p = format!("{name}.{k}");
                let branch = NormBranch {
                    gamma: store.insert(format!("{p}.gamma"), Tensor::filled(1, dim, 1.0), true),
                    beta: store.insert(format!("{p}.beta"), Tensor::zeros(1, dim), true),
                    running_mean: store.insert(format!("{p}.running_mean"), Tensor::zeros(1, dim), false),
                    running_var: store.insert(format!("{p}.running_var"), Tensor::filled(1, dim, 1.0), false),
                };
                (k.clone(), branch)
            })
            .collect();
        Self { branches, eps: Self::EPS }
    }

    pub fn branch(&self, key: &str) -> Result<&NormBranch> {
        self.branches.get(key).ok_or_else(|| Error::Domain(key.to_string()))
    }

    /// Training: normalize by the rows' own statistics and queue a running-stat
    /// update for `key`. Inference: normalize by `key`'s running statistics.
    /// Either way only `key`'s parameters enter the graph.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        key: &str,
        ctx: &mut NormContext,
    ) -> Result<Var> {
        let b = self.branch(key)?;
        let gamma = g.param(store, b.gamma);
        let beta = g.param(store, b.beta);
        if ctx.training {
            let rows = g.value(x).rows();
            if rows < 2 {
                return Err(Error::DegenerateBatch(rows));
            }
            let (y, stats) = g.batch_norm(x, gamma, beta, self.eps);
            ctx.updates.push(StatUpdate {
                running_mean: b.running_mean,
                running_var: b.running_var,
                stats,
            });
            Ok(y)
        } else {
            let mean = store.value(b.running_mean).data().to_vec();
            let var = store.value(b.running_var).data().to_vec();
            Ok(g.affine_norm(x, &mean, &var, gamma, beta, self.eps))
        }
    }
}
