//! Central finite-difference gradient checking.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Cap on coordinates probed per input; `None` probes all of them.
    pub max_coords: Option<usize>,
    /// Probe this fraction of each input's coordinates (at least one).
    pub fraction: Option<f64>,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            fraction: None,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because the probe straddled an activation kink.
    pub masked: usize,
    /// `(input, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.masked += other.masked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            if other.worst.is_some() && other.max_rel_err >= self.max_rel_err {
                self.worst = other.worst;
            }
        }
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    Ok((g.value(out).item(), g.kink_signature()))
}

/// Compare the analytic gradient of the scalar `f(inputs)` with central
/// differences. `f` must be deterministic: any randomness inside it has to
/// be re-seeded on every call.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    g.backward(out)?;
    let base_sig = g.kink_signature();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad_or_zeros(id)).collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let by_fraction = opts.fraction.map(|f| ((input.len() as f64 * f).ceil() as usize).max(1));
        let cap = match (opts.max_coords, by_fraction) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        let coords: Vec<usize> = match cap {
            Some(cap) if cap < input.len() => {
                let mut c = index::sample(&mut rng, input.len(), cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        for c in coords {
            let orig = input.data()[c];
            probe[which].data_mut()[c] = orig + opts.step;
            let (plus, sig_plus) = evaluate(&f, &probe)?;
            probe[which].data_mut()[c] = orig - opts.step;
            let (minus, sig_minus) = evaluate(&f, &probe)?;
            probe[which].data_mut()[c] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.masked += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[which][c];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((which, c, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Draw inputs uniformly from `[-1, 1]` with `seed` and run [`grad_check`].
pub fn grad_check_random<F>(f: F, shapes: &[&[usize]], seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let inputs = random_inputs(shapes, seed);
    grad_check(
        f,
        &inputs,
        &GradCheckOptions {
            seed,
            ..GradCheckOptions::default()
        },
    )
}

pub fn random_inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|dims| Tensor::from_fn(dims, |_| rng.random_range(-1.0..=1.0)))
        .collect()
}
