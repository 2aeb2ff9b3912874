//! Adversarial, multi-layer patch-wise contrastive and total objectives.

use noisim_diffcore::{Graph, NodeId};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::PatchEmbedding;

/// Slack on the unit-norm contract of embedding rows. Rows that are exactly
/// zero (a dead head) are let through.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub omega: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            omega: 1.0,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.omega >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative (lambda {}, omega {})",
                self.lambda, self.omega
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Discriminator objective: `mean softplus(-real) + mean softplus(fake)`.
/// Callers pass fake logits computed from a detached generator output.
pub fn gan_loss_d(g: &mut Graph, real: NodeId, fake: NodeId) -> NodeId {
    let nr = g.neg(real);
    let sr = g.softplus(nr);
    let lr = g.mean(sr);
    let sf = g.softplus(fake);
    let lf = g.mean(sf);
    g.add(lr, lf).expect("scalar operands")
}

/// Non-saturating generator objective: `mean softplus(-fake)`.
pub fn gan_loss_g(g: &mut Graph, fake: NodeId) -> NodeId {
    let n = g.neg(fake);
    let s = g.softplus(n);
    g.mean(s)
}

fn check_unit_rows(g: &Graph, id: NodeId, what: &str) -> Result<()> {
    let t = g.value(id);
    let d = t.dims();
    if d.len() != 2 {
        return Err(Error::Diff(noisim_diffcore::Error::Shape {
            op: "mpc_loss",
            detail: format!("{what} must be a matrix, got {:?}", d),
        }));
    }
    for (r, row) in t.data().chunks(d[1]).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL && n != 0.0 {
            return Err(Error::Diff(noisim_diffcore::Error::Contract(format!(
                "{what} row {r} has norm {n}"
            ))));
        }
    }
    Ok(())
}

/// Contrastive term of one query/key pair: the mean over queries of the
/// cross-entropy of `Q Kᵀ / τ` against the diagonal.
pub fn mpc_layer_loss(g: &mut Graph, queries: NodeId, keys: NodeId, tau: f64) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    check_unit_rows(g, queries, "query")?;
    check_unit_rows(g, keys, "key")?;
    if g.dims(queries) != g.dims(keys) {
        return Err(Error::Diff(noisim_diffcore::Error::Shape {
            op: "mpc_loss",
            detail: format!("queries {:?} vs keys {:?}", g.dims(queries), g.dims(keys)),
        }));
    }
    let kt = g.transpose(keys)?;
    let sim = g.matmul(queries, kt)?;
    let logits = g.scale(sim, 1.0 / tau);
    let targets: Vec<usize> = (0..g.dims(queries)[0]).collect();
    Ok(g.cross_entropy(logits, &targets)?)
}

/// Sum over layers of the per-layer contrastive term, each averaged over
/// queries and over the examples of the batch.
pub fn mpc_loss(g: &mut Graph, emb: &PatchEmbedding, tau: f64) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for pairs in &emb.layers {
        let mut layer: Option<NodeId> = None;
        for p in pairs {
            let t = mpc_layer_loss(g, p.queries, p.keys, tau)?;
            layer = Some(match layer {
                Some(acc) => g.add(acc, t)?,
                None => t,
            });
        }
        let Some(layer) = layer else { continue };
        let layer = g.scale(layer, 1.0 / pairs.len() as f64);
        total = Some(match total {
            Some(acc) => g.add(acc, layer)?,
            None => layer,
        });
    }
    total.ok_or_else(|| Error::Sampling("patch embedding has no layers".into()))
}

/// `gan_g + λ·mpc_x + ω·mpc_y`.
pub fn total_generator_loss(g: &mut Graph, gan_g: NodeId, mpc_x: NodeId, mpc_y: NodeId, w: &LossWeights) -> Result<NodeId> {
    let a = g.scale(mpc_x, w.lambda);
    let b = g.scale(mpc_y, w.omega);
    let s = g.add(gan_g, a)?;
    Ok(g.add(s, b)?)
}

/// Scalar form of [`total_generator_loss`].
pub fn total_generator_value(gan_g: f64, mpc_x: f64, mpc_y: f64, w: &LossWeights) -> f64 {
    gan_g + w.lambda * mpc_x + w.omega * mpc_y
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_gan_d: f64,
    pub l_gan_g: f64,
    pub l_mpc_x: f64,
    pub l_mpc_y: f64,
    pub l_total: f64,
    /// Mean of `σ(D(y))` over the patch map.
    pub d_real_mean: f64,
    /// Mean of `σ(D(x̂))` over the patch map.
    pub d_fake_mean: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_gan_d,l_gan_g,l_mpc_x,l_mpc_y,l_total,d_real_mean,d_fake_mean";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.l_gan_d, self.l_gan_g, self.l_mpc_x, self.l_mpc_y, self.l_total, self.d_real_mean, self.d_fake_mean
        )
    }

    pub fn values(&self) -> [f64; 7] {
        [
            self.l_gan_d,
            self.l_gan_g,
            self.l_mpc_x,
            self.l_mpc_y,
            self.l_total,
            self.d_real_mean,
            self.d_fake_mean,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}
