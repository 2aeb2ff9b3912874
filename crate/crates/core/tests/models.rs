use noisim_core::models::{init_params, sample_patches, ArchPlan, Generator, DISC_KERNEL, DISC_STRIDES, FEATURE_LAYERS};
use noisim_core::Error;
use noisim_diffcore::{grad_check, GradCheckOptions, Graph, Mode, NodeId, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn input(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 1, h, w], |_| rng.random_range(-1.0..1.0))
}

fn run_generator(gen: &Generator, x: &Tensor, mode: Mode, seed: u64) -> (Tensor, Vec<Vec<usize>>) {
    let mut g = Graph::new();
    let b = gen.params.bind(&mut g, false);
    let xi = g.input(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = gen.forward(&mut g, &b, xi, mode, &mut rng).unwrap();
    let dims = out.features.0.iter().map(|&id| g.dims(id).to_vec()).collect();
    (g.value(out.output).clone(), dims)
}

#[test]
fn same_seed_gives_identical_parameters() {
    let plan = ArchPlan::tiny();
    let a = init_params(&plan, 9).unwrap();
    let b = init_params(&plan, 9).unwrap();
    assert_eq!(a, b);
    let c = init_params(&plan, 10).unwrap();
    assert_ne!(a.0.params, c.0.params);
}

#[test]
fn init_statistics() {
    let (gen, disc, _) = init_params(&ArchPlan::default(), 1).unwrap();
    for (name, t) in gen.params.iter().chain(disc.params.iter()) {
        if name.ends_with(".bias") || name.ends_with(".shift") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        } else if name.ends_with(".gain") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        }
    }
    let w = &gen.params.get(gen.params.index_of("rb4.conv1.weight").unwrap());
    let n = w.len() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let sd = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-3, "mean {mean}");
    assert!((sd - 0.02).abs() < 5e-4, "std {sd}");
}

#[test]
fn default_plan_parameter_count() {
    let (gen, disc, heads) = init_params(&ArchPlan::default(), 0).unwrap();
    // conv weights + biases, plus gain and shift per normalized channel
    let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
    let gen_expected = conv(64, 1, 3) + 2 * 64
        + conv(128, 64, 3) + 2 * 128
        + 9 * (2 * conv(128, 128, 3) + 4 * 128)
        + (128 * 64 * 9 + 64) + 2 * 64
        + (64 * 9 + 1);
    let disc_expected = conv(64, 1, 4)
        + conv(128, 64, 4) + 2 * 128
        + conv(256, 128, 4) + 2 * 256
        + conv(512, 256, 4) + 2 * 512
        + conv(1, 512, 4);
    let heads_expected: usize = [1, 64, 128, 128, 128].iter().map(|c| 256 * c + 256 + 256 * 256 + 256).sum();
    assert_eq!(gen.params.numel(), gen_expected);
    assert_eq!(disc.params.numel(), disc_expected);
    assert_eq!(heads.params.numel(), heads_expected);
    assert_eq!(gen_expected + disc_expected + heads_expected, 6_020_162);
}

#[test]
fn generator_size_chain_on_full_segments() {
    let (gen, _, _) = init_params(&ArchPlan::tiny(), 3).unwrap();
    let x = input(2, 129, 128, 1);
    let (y, feats) = run_generator(&gen, &x, Mode::Train, 0);
    assert_eq!(y.dims(), &[2, 1, 129, 128]);
    assert_eq!(
        feats,
        vec![
            vec![2, 1, 129, 128],
            vec![2, 8, 65, 64],
            vec![2, 16, 33, 32],
            vec![2, 16, 33, 32],
            vec![2, 16, 33, 32],
        ]
    );
    assert_eq!(FEATURE_LAYERS.len(), 5);
    assert!(y.data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn eval_mode_is_deterministic_and_train_mode_is_not() {
    let (gen, _, _) = init_params(&ArchPlan::tiny(), 4).unwrap();
    let x = input(1, 33, 32, 2);
    assert_eq!(run_generator(&gen, &x, Mode::Eval, 0).0, run_generator(&gen, &x, Mode::Eval, 1).0);
    assert_ne!(run_generator(&gen, &x, Mode::Train, 0).0, run_generator(&gen, &x, Mode::Train, 1).0);
}

#[test]
fn generator_rejects_bad_shapes() {
    let (gen, _, _) = init_params(&ArchPlan::tiny(), 0).unwrap();
    let mut g = Graph::new();
    let b = gen.params.bind(&mut g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for dims in [vec![1, 2, 16, 16], vec![1, 16, 16], vec![1, 1, 4, 16]] {
        let x = g.input(Tensor::zeros(&dims));
        assert!(matches!(gen.forward(&mut g, &b, x, Mode::Eval, &mut rng), Err(Error::Diff(_))), "{dims:?}");
    }
}

#[test]
fn zeroed_residual_block_is_identity() {
    let (mut gen, _, _) = init_params(&ArchPlan::tiny(), 5).unwrap();
    let x = input(1, 17, 16, 3);
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for b in 0..9 {
        gen.zero_block(b);
    }
    let b = gen.params.bind(&mut g, false);
    let xi = g.input(x);
    let out = gen.forward(&mut g, &b, xi, Mode::Train, &mut rng).unwrap();
    // with every block zeroed the trunk passes enc2 straight through
    assert_eq!(g.value(out.features.0[2]), g.value(out.features.0[3]));
    assert_eq!(g.value(out.features.0[2]), g.value(out.features.0[4]));
}

#[test]
fn generator_gradcheck_train_mode() {
    let (gen, _, _) = init_params(&ArchPlan::tiny(), 11).unwrap();
    let x = input(1, 33, 32, 4);
    let f = |g: &mut Graph, ids: &[NodeId]| {
        let xi = g.input(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let out = gen.forward(g, ids, xi, Mode::Train, &mut rng).unwrap();
        Ok(g.sum(out.output))
    };
    let opts = GradCheckOptions {
        fraction: Some(0.01),
        seed: 1,
        ..Default::default()
    };
    let r = grad_check(f, gen.params.tensors(), &opts).unwrap();
    assert!(r.checked > 400, "{r:?}");
    assert!(r.max_rel_err <= 1e-3, "{r:?}");
}

fn run_discriminator(plan: &ArchPlan, seed: u64, x: &Tensor, zero_last: bool) -> Tensor {
    let (_, mut disc, _) = init_params(plan, seed).unwrap();
    if zero_last {
        disc.zero_output_layer();
    }
    let mut g = Graph::new();
    let b = disc.params.bind(&mut g, false);
    let xi = g.input(x.clone());
    let out = disc.forward(&mut g, &b, xi).unwrap();
    g.value(out).clone()
}

#[test]
fn discriminator_emits_patch_map() {
    let out = run_discriminator(&ArchPlan::tiny(), 0, &input(2, 129, 128, 5), false);
    assert_eq!(out.dims(), &[2, 1, 14, 14]);
}

#[test]
fn zero_output_layer_gives_zero_logits() {
    let out = run_discriminator(&ArchPlan::tiny(), 0, &Tensor::zeros(&[1, 1, 129, 128]), true);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

/// Logit rows reachable from input row `r` through 4-tap, padding-1
/// convolutions with the given strides.
fn footprint(r: usize, strides: &[usize]) -> (usize, usize) {
    let (mut lo, mut hi) = (r as i64, r as i64);
    for &s in strides {
        let s = s as i64;
        // output o reads inputs o*s - 1 ..= o*s + 2
        lo = (lo - 2 + s - 1).div_euclid(s).max(0);
        hi = (hi + 1).div_euclid(s);
    }
    (lo as usize, hi as usize)
}

#[test]
fn conv_chain_footprint_is_exact() {
    // the discriminator's kernel/stride/padding chain without normalization
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let widths = [1, 3, 3, 3, 3, 1];
    let weights: Vec<Tensor> = (0..5)
        .map(|l| Tensor::from_fn(&[widths[l + 1], widths[l], DISC_KERNEL, DISC_KERNEL], |_| rng.random_range(0.1..1.0)))
        .collect();
    let chain = |x: &Tensor| {
        let mut g = Graph::new();
        let mut h = g.input(x.clone());
        for (l, w) in weights.iter().enumerate() {
            let wi = g.input(w.clone());
            let bi = g.input(Tensor::zeros(&[widths[l + 1]]));
            let s = DISC_STRIDES[l];
            h = g.conv2d(h, wi, bi, (s, s), (1, 1)).unwrap();
        }
        g.value(h).clone()
    };
    let (pr, pc) = (64usize, 60usize);
    let mut bumped = Tensor::zeros(&[1, 1, 129, 128]);
    bumped.data_mut()[pr * 128 + pc] = 1.0;
    let out = chain(&bumped);
    assert_eq!(out.dims(), &[1, 1, 14, 14]);
    let (rlo, rhi) = footprint(pr, &DISC_STRIDES);
    let (clo, chi) = footprint(pc, &DISC_STRIDES);
    assert_eq!((rlo, rhi), (3, 10));
    for r in 0..14 {
        for c in 0..14 {
            let inside = (rlo..=rhi).contains(&r) && (clo..=chi).contains(&c);
            // positive weights: every reachable logit moves
            assert_eq!(out.data()[r * 14 + c] != 0.0, inside, "({r}, {c})");
        }
    }
}

#[test]
fn discriminator_response_is_concentrated_in_footprint() {
    let base = input(1, 129, 128, 6);
    let (pr, pc) = (64usize, 60usize);
    let (rlo, rhi) = footprint(pr, &DISC_STRIDES);
    let (clo, chi) = footprint(pc, &DISC_STRIDES);
    let mut bumped = base.clone();
    bumped.data_mut()[pr * 128 + pc] += 0.5;
    let plan = ArchPlan::tiny();
    let a = run_discriminator(&plan, 2, &base, false);
    let b = run_discriminator(&plan, 2, &bumped, false);
    let (mut inside, mut outside) = (0.0f64, 0.0f64);
    for r in 0..14 {
        for c in 0..14 {
            let d = (a.data()[r * 14 + c] - b.data()[r * 14 + c]).abs();
            if (rlo..=rhi).contains(&r) && (clo..=chi).contains(&c) {
                inside = inside.max(d);
            } else {
                outside = outside.max(d);
            }
        }
    }
    // instance norm leaks the bump everywhere through the plane statistics;
    // the leak stays an order of magnitude below the direct path
    assert!(inside > 0.0);
    assert!(outside < 0.1 * inside, "inside {inside} outside {outside}");
}

#[test]
fn discriminator_gradcheck() {
    let (_, disc, _) = init_params(&ArchPlan::tiny(), 12).unwrap();
    let x = input(1, 32, 32, 7);
    let f = |g: &mut Graph, ids: &[NodeId]| {
        let xi = g.input(x.clone());
        let out = disc.forward(g, ids, xi).unwrap();
        Ok(g.sum(out))
    };
    let opts = GradCheckOptions {
        fraction: Some(0.02),
        seed: 2,
        ..Default::default()
    };
    let r = grad_check(f, disc.params.tensors(), &opts).unwrap();
    assert!(r.checked > 100, "{r:?}");
    assert!(r.max_rel_err <= 1e-3, "{r:?}");
}

fn embed_pair(per_layer: usize, seed: u64, same: bool) -> Result<Vec<(Tensor, Tensor)>, Error> {
    let (gen, _, heads) = init_params(&ArchPlan::tiny(), 13).unwrap();
    let mut g = Graph::new();
    let gb = gen.params.bind(&mut g, false);
    let hb = heads.params.bind(&mut g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = g.input(input(2, 33, 32, 8));
    let key = gen.encode_features(&mut g, &gb, x, Mode::Eval, &mut rng)?;
    let query = if same {
        key.clone()
    } else {
        let y = g.input(input(2, 33, 32, 9));
        gen.encode_features(&mut g, &gb, y, Mode::Eval, &mut rng)?
    };
    let mut srng = ChaCha8Rng::seed_from_u64(seed);
    let emb = sample_patches(&mut g, &query, &key, &heads, &hb, per_layer, &mut srng)?;
    assert_eq!(emb.layers.len(), 5);
    Ok(emb
        .layers
        .iter()
        .flatten()
        .map(|p| (g.value(p.queries).clone(), g.value(p.keys).clone()))
        .collect())
}

#[test]
fn identical_features_give_identical_query_and_positive() {
    for (q, k) in embed_pair(16, 0, true).unwrap() {
        assert_eq!(q.dims(), &[16, 256]);
        assert_eq!(q, k);
        for row in q.data().chunks(256) {
            let cos: f64 = row.iter().map(|x| x * x).sum();
            // an all-zero patch embeds to the zero row
            assert!((cos - 1.0).abs() < 1e-12 || cos == 0.0);
        }
    }
}

#[test]
fn embedding_rows_are_unit_norm() {
    let (mut unit, mut zero) = (0, 0);
    for (q, k) in embed_pair(32, 1, false).unwrap() {
        for t in [q, k] {
            for row in t.data().chunks(256) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    zero += 1;
                } else {
                    assert!((n - 1.0).abs() < 1e-5, "norm {n}");
                    unit += 1;
                }
            }
        }
    }
    assert!(unit > 10 * zero, "{unit} unit rows, {zero} zero rows");
}

#[test]
fn too_many_patches_is_a_sampling_error() {
    // enc2 output is 9x8 for a 33x32 input
    assert!(matches!(embed_pair(73, 0, false), Err(Error::Sampling(_))));
    assert!(embed_pair(72, 0, false).is_ok());
}

#[test]
fn patch_locations_are_reproducible_and_distinct() {
    let (gen, _, heads) = init_params(&ArchPlan::tiny(), 14).unwrap();
    let locs = |seed: u64| {
        let mut g = Graph::new();
        let gb = gen.params.bind(&mut g, false);
        let hb = heads.params.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.input(input(1, 33, 32, 10));
        let f = gen.encode_features(&mut g, &gb, x, Mode::Eval, &mut rng).unwrap();
        let mut srng = ChaCha8Rng::seed_from_u64(seed);
        sample_patches(&mut g, &f, &f, &heads, &hb, 40, &mut srng).unwrap().locations
    };
    let a = locs(3);
    assert_eq!(a, locs(3));
    assert_ne!(a, locs(4));
    for layer in &a {
        let mut s = layer.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 40);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generator_output_matches_input_shape(h in 5usize..40, w in 5usize..40) {
        let (gen, _, _) = init_params(&ArchPlan { gen_channels: [2, 3], ..ArchPlan::tiny() }, 0).unwrap();
        let x = input(1, h, w, 0);
        let (y, _) = run_generator(&gen, &x, Mode::Eval, 0);
        prop_assert_eq!(y.dims(), &[1, 1, h, w]);
    }
}
