//! The primitive gradient suite: every graph operation checked against
//! central differences on random inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check_random, GradCheckReport};
use crate::graph::{Graph, Mode, NodeId};
use crate::tensor::Tensor;

/// Relative-error tolerance for single primitives.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_err <= self.tolerance
    }
}

/// Weighted sum so that every output coordinate gets a distinct cotangent.
pub fn weighted_sum(g: &mut Graph, y: NodeId) -> Result<NodeId> {
    let dims = g.dims(y).to_vec();
    let w = g.input(Tensor::from_fn(&dims, |i| ((i * 7 % 13) as f64 - 6.0) / 6.0));
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

type Case = (&'static str, &'static [&'static [usize]], fn(&mut Graph, &[NodeId]) -> Result<NodeId>);

const CASES: &[Case] = &[
    ("conv2d", &[&[2, 2, 7, 6], &[3, 2, 3, 3], &[3]], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], (2, 2), (1, 1))?;
        weighted_sum(g, y)
    }),
    ("conv_transpose2d", &[&[2, 3, 4, 5], &[3, 2, 3, 3], &[2]], |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], v[2], (2, 2), (1, 1), (1, 0))?;
        weighted_sum(g, y)
    }),
    ("linear", &[&[4, 5], &[3, 5], &[3]], |g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        weighted_sum(g, y)
    }),
    ("relu", &[&[40]], |g, v| {
        let y = g.relu(v[0]);
        weighted_sum(g, y)
    }),
    ("leaky_relu", &[&[40]], |g, v| {
        let y = g.leaky_relu(v[0], 0.2);
        weighted_sum(g, y)
    }),
    ("tanh", &[&[40]], |g, v| {
        let y = g.tanh(v[0]);
        weighted_sum(g, y)
    }),
    ("softplus", &[&[40]], |g, v| {
        let y = g.softplus(v[0]);
        weighted_sum(g, y)
    }),
    ("exp", &[&[12]], |g, v| {
        let y = g.exp(v[0]);
        weighted_sum(g, y)
    }),
    ("log", &[&[12]], |g, v| {
        let e = g.exp(v[0]);
        let y = g.log(e);
        weighted_sum(g, y)
    }),
    ("scale/neg", &[&[12]], |g, v| {
        let s = g.scale(v[0], 1.7);
        let y = g.neg(s);
        weighted_sum(g, y)
    }),
    ("add/sub/mul", &[&[2, 3], &[2, 3]], |g, v| {
        let a = g.add(v[0], v[1])?;
        let s = g.sub(v[0], v[1])?;
        let m = g.mul(a, s)?;
        weighted_sum(g, m)
    }),
    ("instance_norm", &[&[2, 3, 4, 3], &[3], &[3]], |g, v| {
        let y = g.instance_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(g, y)
    }),
    ("dropout", &[&[50]], |g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = g.dropout(v[0], 0.3, Mode::Train, &mut rng)?;
        weighted_sum(g, y)
    }),
    ("log_softmax", &[&[3, 5]], |g, v| {
        let y = g.log_softmax(v[0])?;
        weighted_sum(g, y)
    }),
    ("cross_entropy", &[&[4, 6]], |g, v| g.cross_entropy(v[0], &[1, 0, 5, 3])),
    ("kl_div", &[&[3, 4], &[3, 4]], |g, v| {
        let p = g.log_softmax(v[0])?;
        let q = g.log_softmax(v[1])?;
        g.kl_div(p, q)
    }),
    ("sum/mean", &[&[2, 3]], |g, v| {
        let m = g.mean(v[0]);
        let sq = g.mul(v[0], v[0])?;
        let s = g.sum(sq);
        g.add(m, s)
    }),
    ("concat/reshape", &[&[2, 3], &[1, 3]], |g, v| {
        let c = g.concat(&[v[0], v[1]])?;
        let r = g.reshape(c, &[9])?;
        weighted_sum(g, r)
    }),
    ("matmul/transpose", &[&[3, 4], &[3, 2]], |g, v| {
        let at = g.transpose(v[0])?;
        let y = g.matmul(at, v[1])?;
        weighted_sum(g, y)
    }),
    ("l2_normalize", &[&[4, 5]], |g, v| {
        let y = g.l2_normalize(v[0], 1e-12)?;
        weighted_sum(g, y)
    }),
    ("gather_locations/gather_rows", &[&[2, 3, 2, 2]], |g, v| {
        let y = g.gather_locations(v[0], &[(0, 1), (1, 3), (0, 1)])?;
        let r = g.gather_rows(y, &[2, 0])?;
        weighted_sum(g, r)
    }),
    ("frames_to_rows", &[&[2, 3, 2, 2]], |g, v| {
        let f = g.frames_to_rows(v[0])?;
        weighted_sum(g, f)
    }),
];

/// Check every primitive on inputs drawn with `seed`.
pub fn primitive_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    CASES
        .iter()
        .map(|&(name, shapes, f)| {
            Ok(SuiteEntry {
                name: name.to_string(),
                tolerance: PRIMITIVE_TOLERANCE,
                report: grad_check_random(f, shapes, seed)?,
            })
        })
        .collect()
}
