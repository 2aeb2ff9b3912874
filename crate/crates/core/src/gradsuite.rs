//! Gradient checks of the loss functions and the tiny-plan networks, on top
//! of the primitive suite.

use noisim_diffcore::{grad_check, primitive_suite, GradCheckOptions, Mode, NodeId, SuiteEntry, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::FEATURE_BINS;
use crate::dualpath::{dual_path_loss, AcousticModel, AcousticPlan, PathWeights};
use crate::losses::{gan_loss_d, gan_loss_g, mpc_layer_loss};
use crate::models::{init_params, ArchPlan};
use crate::Result;

/// Relative-error tolerance for whole networks.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

/// Cap on probed coordinates per parameter tensor.
const MAX_COORDS: usize = 64;

fn lift<T>(r: crate::Result<T>) -> noisim_diffcore::Result<T> {
    r.map_err(|e| noisim_diffcore::Error::Contract(e.to_string()))
}

fn uniform(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

/// Magnitudes in `[0.5, 1]` with random signs. Embedding rows scale with
/// their input, so values near zero would leave the finite differences
/// probing a row whose norm is about the step size.
fn away_from_zero(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| {
        let m = rng.random_range(0.5..=1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn entry(name: &str, tolerance: f64, report: noisim_diffcore::GradCheckReport) -> SuiteEntry {
    SuiteEntry {
        name: name.to_string(),
        tolerance,
        report,
    }
}

/// Loss functions at primitive tolerance, networks at [`NETWORK_TOLERANCE`].
pub fn network_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = ArchPlan::tiny();
    let (gen, disc, heads) = init_params(&plan, seed)?;
    let mut out = Vec::new();
    let tol = noisim_diffcore::PRIMITIVE_TOLERANCE;
    let opts = |fraction: Option<f64>| GradCheckOptions {
        fraction,
        max_coords: Some(MAX_COORDS),
        seed,
        ..GradCheckOptions::default()
    };

    let losses_in = [uniform(&[2, 1, 4, 4], &mut rng), uniform(&[2, 1, 4, 4], &mut rng)];
    let r = grad_check(|g, v| Ok(gan_loss_d(g, v[0], v[1])), &losses_in, &opts(None))?;
    out.push(entry("gan_loss_d", tol, r));
    let r = grad_check(|g, v| Ok(gan_loss_g(g, v[0])), &losses_in[..1], &opts(None))?;
    out.push(entry("gan_loss_g", tol, r));

    let qk = [uniform(&[6, 5], &mut rng), uniform(&[6, 5], &mut rng)];
    let r = grad_check(
        |g, v| {
            let q = g.l2_normalize(v[0], 1e-12)?;
            let k = g.l2_normalize(v[1], 1e-12)?;
            lift(mpc_layer_loss(g, q, k, 0.07))
        },
        &qk,
        &opts(None),
    )?;
    out.push(entry("mpc_layer_loss", tol, r));

    let pair = [uniform(&[5, 4], &mut rng), uniform(&[5, 4], &mut rng)];
    let labels = [0, 3, 1, 2, 2];
    let r = grad_check(
        |g, v| {
            let a = g.log_softmax(v[0])?;
            let b = g.log_softmax(v[1])?;
            let t = lift(dual_path_loss(g, a, b, &labels, PathWeights { alpha: 0.4, beta: 0.7 }))?;
            Ok(t.total)
        },
        &pair,
        &opts(None),
    )?;
    out.push(entry("dual_path_loss", tol, r));

    let x = uniform(&[1, 1, 33, 32], &mut rng);
    let mask_seed = rng.random::<u64>();
    let r = grad_check(
        |g, ids: &[NodeId]| {
            let xi = g.input(x.clone());
            let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
            let o = lift(gen.forward(g, ids, xi, Mode::Train, &mut r))?;
            noisim_diffcore::weighted_sum(g, o.output)
        },
        gen.params.tensors(),
        &opts(Some(0.01)),
    )?;
    out.push(entry("generator", NETWORK_TOLERANCE, r));

    let x = uniform(&[1, 1, 32, 32], &mut rng);
    let r = grad_check(
        |g, ids: &[NodeId]| {
            let xi = g.input(x.clone());
            let o = lift(disc.forward(g, ids, xi))?;
            noisim_diffcore::weighted_sum(g, o)
        },
        disc.params.tensors(),
        &opts(Some(0.02)),
    )?;
    out.push(entry("discriminator", NETWORK_TOLERANCE, r));

    let dims = plan.feature_channels();
    let feats: Vec<(Tensor, Tensor)> =
        dims.iter().map(|&c| (away_from_zero(&[6, c], &mut rng), away_from_zero(&[6, c], &mut rng))).collect();
    let r = grad_check(
        |g, ids: &[NodeId]| {
            let mut total = None;
            for (layer, (fq, fk)) in feats.iter().enumerate() {
                let q = g.input(fq.clone());
                let k = g.input(fk.clone());
                let q = lift(heads.embed(g, ids, layer, q))?;
                let k = lift(heads.embed(g, ids, layer, k))?;
                let l = lift(mpc_layer_loss(g, q, k, 0.07))?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            Ok(total.expect("at least one layer"))
        },
        heads.params.tensors(),
        &opts(Some(0.05)),
    )?;
    out.push(entry("projection heads", NETWORK_TOLERANCE, r));

    let am = AcousticModel::new(AcousticPlan::tiny(), 4, seed)?;
    let x = uniform(&[1, 1, FEATURE_BINS, 6], &mut rng);
    let frame_labels = [0, 1, 2, 3, 1, 0];
    let r = grad_check(
        |g, ids: &[NodeId]| {
            let xi = g.input(x.clone());
            let lp = lift(am.forward(g, ids, xi, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)))?;
            g.cross_entropy(lp, &frame_labels)
        },
        am.params.tensors(),
        &opts(Some(0.5)),
    )?;
    out.push(entry("acoustic model", NETWORK_TOLERANCE, r));
    Ok(out)
}

/// Primitive suite followed by [`network_suite`].
pub fn full_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rows = primitive_suite(seed)?;
    rows.extend(network_suite(seed)?);
    Ok(rows)
}

/// Fixed-column table of suite results.
pub fn suite_table(rows: &[SuiteEntry]) -> String {
    let mut s = format!("{:<30} {:>8} {:>7} {:>12} {:>9}  {}\n", "check", "coords", "masked", "max_rel_err", "tol", "status");
    for r in rows {
        s.push_str(&format!(
            "{:<30} {:>8} {:>7} {:>12.3e} {:>9.0e}  {}\n",
            r.name,
            r.report.checked,
            r.report.masked,
            r.report.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}
