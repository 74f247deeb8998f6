//! Mean-field Gaussian posteriors over the flat network parameters.
//!
//! The per-coordinate standard deviation is parametrized as
//! sigma = softplus(rho); the gradient of sigma w.r.t. rho stays bounded in
//! (0, 1), which keeps early-training variance updates tame. Snapshots are
//! deep copies: the live posterior keeps training while frozen copies serve
//! as KL anchors.

use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::net::NetworkShape;
use crate::numcore::ops::{softplus, softplus_inv};
use crate::numcore::rng::SeededRng;
use crate::numcore::tape::{kl_diag_value, KlAnchor, NodeId, Tape};
use crate::numcore::tensor::Tensor;

/// Zero-mean isotropic Gaussian prior N(0, variance * I).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub variance: f64,
}

impl GaussianPrior {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(CoreError::contract("prior variance must be positive"));
        }
        Ok(GaussianPrior { variance })
    }

    pub fn sigma(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn anchor(&self, len: usize) -> Rc<KlAnchor> {
        Rc::new(
            KlAnchor::new(vec![0.0; len], vec![self.sigma(); len])
                .expect("positive prior sigma"),
        )
    }
}

/// Live variational posterior: one (mu, rho) pair per network parameter.
#[derive(Clone, Debug)]
pub struct MeanFieldGaussian {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub layer_spec: NetworkShape,
}

impl MeanFieldGaussian {
    /// mu sampled i.i.d. from the prior; rho set so softplus(rho) equals the
    /// prior standard deviation exactly.
    pub fn init_from_prior(
        layer_spec: NetworkShape,
        prior: &GaussianPrior,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let len = layer_spec.param_count();
        if len == 0 {
            return Err(CoreError::contract("empty layer spec"));
        }
        let sigma = prior.sigma();
        let mu: Vec<f64> = (0..len).map(|_| sigma * rng.normal()).collect();
        let rho = vec![softplus_inv(sigma); len];
        Ok(MeanFieldGaussian { mu, rho, layer_spec })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    /// Detached reparametrized draw: theta = mu + softplus(rho) * eps.
    pub fn sample_detached(&self, rng: &mut SeededRng) -> Vec<f64> {
        self.mu
            .iter()
            .zip(self.rho.iter())
            .map(|(&m, &r)| m + softplus(r) * rng.normal())
            .collect()
    }

    /// Register mu and rho as tape leaves for one optimization step.
    pub fn live_nodes(&self, tape: &mut Tape) -> LiveNodes {
        let mu = tape.leaf(Tensor::from_raw(vec![self.len()], self.mu.clone()));
        let rho = tape.leaf(Tensor::from_raw(vec![self.len()], self.rho.clone()));
        let sigma = tape.softplus(rho);
        let ln_sigma = tape.ln(sigma).expect("softplus output is positive");
        LiveNodes { mu, rho, sigma, ln_sigma, len: self.len() }
    }
}

/// Tape nodes for the live posterior within a single step's graph.
#[derive(Clone, Copy, Debug)]
pub struct LiveNodes {
    pub mu: NodeId,
    pub rho: NodeId,
    pub sigma: NodeId,
    pub ln_sigma: NodeId,
    pub len: usize,
}

impl LiveNodes {
    /// Reparametrized sample theta = mu + sigma * eps on the tape.
    pub fn sample(&self, tape: &mut Tape, eps: &[f64]) -> Result<NodeId> {
        if eps.len() != self.len {
            return Err(CoreError::dimension("eps length mismatch"));
        }
        let eps_node = tape.constant(Tensor::from_raw(vec![self.len], eps.to_vec()));
        let scaled = tape.mul(self.sigma, eps_node)?;
        tape.add(self.mu, scaled)
    }
}

/// Frozen copy of the posterior at a task boundary.
#[derive(Clone, Debug)]
pub struct PosteriorSnapshot {
    pub task_index: usize,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub layer_spec: NetworkShape,
    anchor: Rc<KlAnchor>,
}

impl PosteriorSnapshot {
    pub fn freeze(q: &MeanFieldGaussian, task_index: usize) -> Self {
        let sigma = q.sigma();
        let anchor =
            Rc::new(KlAnchor::new(q.mu.clone(), sigma).expect("softplus sigma is positive"));
        PosteriorSnapshot {
            task_index,
            mu: q.mu.clone(),
            rho: q.rho.clone(),
            layer_spec: q.layer_spec.clone(),
            anchor,
        }
    }

    pub fn anchor(&self) -> Rc<KlAnchor> {
        self.anchor.clone()
    }

    pub fn as_gaussian(&self) -> MeanFieldGaussian {
        MeanFieldGaussian {
            mu: self.mu.clone(),
            rho: self.rho.clone(),
            layer_spec: self.layer_spec.clone(),
        }
    }

    /// Serialize to the documented JSON checkpoint layout
    /// `{task_index, layer_spec, mu, rho}`.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = SnapshotFile {
            task_index: self.task_index,
            layer_spec: self.layer_spec.clone(),
            mu: self.mu.clone(),
            rho: self.rho.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file: SnapshotFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.mu.len() != file.layer_spec.param_count() || file.mu.len() != file.rho.len() {
            return Err(CoreError::format("snapshot length does not match layer spec"));
        }
        let q = MeanFieldGaussian {
            mu: file.mu,
            rho: file.rho,
            layer_spec: file.layer_spec,
        };
        Ok(PosteriorSnapshot::freeze(&q, file.task_index))
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    task_index: usize,
    layer_spec: NetworkShape,
    mu: Vec<f64>,
    rho: Vec<f64>,
}

/// Ring of recent snapshots, most recent first (slot 0 holds q_{t-1}).
#[derive(Clone, Debug, Default)]
pub struct PosteriorHistory {
    snapshots: Vec<PosteriorSnapshot>,
    capacity: usize,
}

impl PosteriorHistory {
    pub fn new(capacity: usize) -> Self {
        PosteriorHistory { snapshots: Vec::new(), capacity }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Snapshot at lag slot `i` (0 = most recent).
    pub fn get(&self, i: usize) -> Option<&PosteriorSnapshot> {
        self.snapshots.get(i)
    }

    pub fn newest_task_index(&self) -> Option<usize> {
        self.snapshots.first().map(|s| s.task_index)
    }

    /// Insert a fresh snapshot at slot 0, evicting the oldest beyond capacity.
    pub fn push_snapshot(&mut self, q: &MeanFieldGaussian, task_index: usize) -> Result<()> {
        if let Some(newest) = self.newest_task_index() {
            if task_index <= newest {
                return Err(CoreError::contract(format!(
                    "snapshot task index {task_index} not greater than stored {newest}"
                )));
            }
        }
        self.snapshots.insert(0, PosteriorSnapshot::freeze(q, task_index));
        if self.snapshots.len() > self.capacity {
            self.snapshots.truncate(self.capacity);
        }
        Ok(())
    }
}

/// Analytic KL between diagonal Gaussians given as (mu, sigma) pairs.
pub fn kl_diag(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64> {
    if mu_q.len() != sigma_q.len() || mu_q.len() != mu_p.len() || mu_q.len() != sigma_p.len() {
        return Err(CoreError::contract("kl_diag: dimension mismatch"));
    }
    let anchor = KlAnchor::new(mu_p.to_vec(), sigma_p.to_vec())?;
    let ln_sigma_q: Vec<f64> = sigma_q.iter().map(|s| s.ln()).collect();
    Ok(kl_diag_value(mu_q, sigma_q, &ln_sigma_q, &anchor))
}

/// KL(q || snapshot) for live and frozen posteriors.
pub fn kl_to_snapshot(q: &MeanFieldGaussian, snap: &PosteriorSnapshot) -> Result<f64> {
    let sigma_q = q.sigma();
    let ln_sigma_q: Vec<f64> = sigma_q.iter().map(|s| s.ln()).collect();
    if q.len() != snap.mu.len() {
        return Err(CoreError::contract("kl_to_snapshot: dimension mismatch"));
    }
    Ok(kl_diag_value(&q.mu, &sigma_q, &ln_sigma_q, &snap.anchor()))
}

/// KL(q || prior).
pub fn kl_to_prior(q: &MeanFieldGaussian, prior: &GaussianPrior) -> f64 {
    let sigma_q = q.sigma();
    let ln_sigma_q: Vec<f64> = sigma_q.iter().map(|s| s.ln()).collect();
    kl_diag_value(&q.mu, &sigma_q, &ln_sigma_q, &prior.anchor(q.len()))
}
