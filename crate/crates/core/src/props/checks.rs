use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ensure, Body, Check, Ctx};
use crate::attention::{
    attn_weights, channel_shuffle, group_attn, group_norm, gsa, gsa_param_count, layer_norm, mha, mha_param_count,
    nonlinear_self_attn, GsaLayer, MhaLayer, NormKind,
};
use crate::dataio::events::{clip_count, format_events, parse_events, span_us, window_events, ClipSpec, EventRecord};
use crate::dataio::pointfile::{format_point_cloud, parse_point_cloud};
use crate::dataio::shapes::{gen_shapes, Shape, ShapeSpec};
use crate::embedding::{arpe_with, ArpeConfig, ArpeLayer};
use crate::geometry::{dilated_neighbor_sample, fps, knn, pairwise_sq_dist, position_set, NeighborIndex, PointCloud};
use crate::gradcheck::{grad_check, random_input};
use crate::model::{
    checkpoint, class_scores, element_wise_loss, metrics_csv, parse_plan, train, Control, Label, PatConfig, PatModel,
    TrainOptions,
};
use crate::nn::Module;
use crate::sampling::{gss, gumbel_argmax, gumbel_noise, gumbel_softmax, GssLayer, Mode, SamplerConfig};
use crate::tensor::{concat, Real, Tape, Tensor, Var};

pub(super) const ALL: &[(&str, &str, usize, Body)] = &[
    ("op-gradients", "every differentiable op matches central differences (64-bit)", 2, op_gradients),
    ("softmax-rows", "softmax rows sum to 1 and ignore per-row shifts", 50, softmax_rows),
    ("reshape-roundtrip", "reshape, permute and transpose round trips are bit-exact", 50, reshape_roundtrip),
    ("tape-replay", "two backward passes over one tape give identical gradients", 20, tape_replay),
    ("distance-symmetry", "pairwise distances: symmetric, zero diagonal, translation invariant", 50, distance_symmetry),
    ("feature-channel-invariance", "knn and fps ignore the order of feature channels", 30, feature_channel_invariance),
    ("fps-covariance", "fps relabels with the points when the start is relabelled", 50, fps_covariance),
    ("fps-witness", "two start indices give different fps subsets on the 4-point line", 1, fps_witness),
    ("dilated-knn", "dilated sampling with pool = K is plain knn", 30, dilated_knn),
    ("attention-equivariance", "nonlinear self-attention, GroupAttn, GSA and MHA are permutation-equivariant", 100, attention_equivariance),
    ("attention-rows", "attention weight rows sum to 1", 50, attention_rows),
    ("shuffle-bijection", "channel shuffle matches its index formula and inverts by swapping groups (c <= 24)", 1, shuffle_bijection),
    ("gsa-param-count", "GSA has c^2/g + 2c scalars, strictly decreasing in g, below MHA", 1, gsa_param_trend),
    ("gumbel-softmax-rows", "gumbel-softmax rows sum to 1 for any temperature", 50, gumbel_softmax_rows),
    ("gumbel-max-unbiased", "Gumbel-Max argmax frequencies match Cat(s) (draws)", 100_000, gumbel_max_unbiased),
    ("gss-invariance", "zero-noise inference GSS selects the same rows under permutation", 100, gss_invariance),
    ("gss-distribution", "train-mode GSS selection frequencies are permutation-invariant (draws)", 10_000, gss_distribution),
    ("annealing", "lower temperature never raises entropy and tau = 1e-3 saturates", 50, annealing),
    ("gumbel-softmax-gradient", "gumbel-softmax gradient matches central differences with fixed noise", 10, gumbel_softmax_gradient),
    ("arpe-equivariance", "ARPE with deterministic neighbours is permutation-equivariant (32-bit)", 30, arpe_equivariance),
    ("arpe-neighbor-order", "ARPE ignores the order inside each neighbour list", 30, arpe_neighbor_order),
    ("position-set-translation", "translation moves only the absolute half of the position set", 30, position_set_translation),
    ("model-permutation", "inference is invariant without FPS and covariant with a relabelled FPS start", 3, model_permutation),
    ("loss-nonnegative", "element-wise loss is positive and vanishes only in the one-hot limit", 50, loss_nonnegative),
    ("overfit", "a 32-cloud fixture trains below loss 0.05 within 200 steps", 1, overfit),
    ("checkpoint-roundtrip", "save, load, forward is bit-identical", 2, checkpoint_roundtrip),
    ("training-determinism", "fixed-seed training reproduces its metrics CSV", 1, training_determinism),
    ("window-count", "clip count is floor((span - window)/step) + 1", 100, window_count),
    ("clip-contents", "every clip has n_sample points with t_norm in [0,1)", 30, clip_contents),
    ("shape-balance", "synthetic shape labels are exactly balanced", 20, shape_balance),
    ("loader-errors", "malformed point and event files fail at the offending line", 50, loader_errors),
];

fn perm(n: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(r);
    p
}

fn random_cloud<T: Real>(n: usize, f: usize, r: &mut ChaCha8Rng) -> PointCloud<T> {
    PointCloud::new(random_input(&[n, 3 + f], r)).expect("finite input")
}

fn tensor_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.max_abs_diff(b).f64()
}

// ---------------------------------------------------------------- tensor core

type OpFn = for<'t> fn(&[Var<'t, f64>]) -> crate::Result<Var<'t, f64>>;

const OPS: &[(&str, &[&[usize]], bool, OpFn)] = &[
    ("add", &[&[3, 4], &[4]], false, |v| v[0].add(v[1])),
    ("sub", &[&[3, 1], &[1, 4]], false, |v| v[0].sub(v[1])),
    ("mul", &[&[2, 3, 4], &[3, 1]], false, |v| v[0].mul(v[1])),
    ("div", &[&[3, 4], &[3, 4]], true, |v| v[0].div(v[1])),
    ("exp", &[&[5]], false, |v| Ok(v[0].neg().exp())),
    ("log", &[&[5]], true, |v| v[0].log()),
    ("elu", &[&[4, 4]], false, |v| Ok(v[0].elu())),
    ("powf", &[&[6]], true, |v| Ok(v[0].powf(-0.5))),
    ("square", &[&[6]], false, |v| Ok(v[0].square().scale(0.7).add_scalar(0.1))),
    ("matmul", &[&[3, 5], &[5, 2]], false, |v| v[0].matmul(v[1])),
    ("bmm", &[&[2, 3, 4], &[2, 4, 3]], false, |v| v[0].matmul(v[1])),
    ("matmul_nt", &[&[2, 3, 4], &[2, 5, 4]], false, |v| v[0].matmul_nt(v[1])),
    ("linear", &[&[4, 3], &[3, 5], &[5]], false, |v| v[0].linear(v[1], Some(v[2]))),
    ("scale_shift", &[&[4, 3], &[3], &[3]], false, |v| v[0].scale_shift(v[1], v[2])),
    ("normalize", &[&[5, 6]], false, |v| v[0].normalize(3, false, 1e-5)),
    ("softmax", &[&[2, 3, 4]], false, |v| Ok(v[0].softmax(1))),
    ("scaled_softmax", &[&[3, 4]], false, |v| Ok(v[0].scaled_softmax(1, 0.37))),
    ("log_softmax", &[&[3, 5]], false, |v| Ok(v[0].log_softmax(1))),
    ("sum_axis", &[&[3, 4, 2]], false, |v| v[0].sum_axis(1, false)),
    ("mean_axis", &[&[3, 4]], false, |v| v[0].mean_axis(0, true)),
    ("max_axis", &[&[5, 6]], false, |v| v[0].max_axis(0, false)),
    ("reshape", &[&[2, 6]], false, |v| v[0].reshape(&[3, 4])),
    ("permute", &[&[2, 3, 4]], false, |v| v[0].permute(&[1, 2, 0])),
    ("concat", &[&[2, 3], &[2, 2]], false, |v| concat(&[v[0], v[1], v[0]], 1)),
    ("narrow", &[&[4, 5]], false, |v| v[0].narrow(1, 1, 3)),
    ("index_select", &[&[4, 3]], false, |v| v[0].index_select(&[2, 0, 2, 3])),
    ("channel_shuffle", &[&[3, 6]], false, |v| channel_shuffle(v[0], 3)),
    ("nonlinear_self_attn", &[&[5, 4]], false, |v| nonlinear_self_attn(v[0])),
    ("group_norm", &[&[5, 6], &[6], &[6]], false, |v| group_norm(v[0], 2, 1e-5, v[1], v[2])),
    ("layer_norm", &[&[4, 6], &[6], &[6]], false, |v| layer_norm(v[0], 1e-5, v[1], v[2])),
];

/// Finite-difference check of `f(inputs) · probe` with every parameter of
/// `module` differentiated as an extra input.
fn check_with_params<M: Module<f64>>(
    ctx: &Ctx<'_>,
    name: &str,
    module: &M,
    mut inputs: Vec<Tensor<f64>>,
    r: &mut ChaCha8Rng,
    f: impl for<'t> Fn(&[Var<'t, f64>]) -> crate::Result<Var<'t, f64>>,
) -> Check {
    let n_in = inputs.len();
    let params = module.params();
    let probe_shape = {
        let tape = Tape::new();
        let vs: Vec<Var<'_, f64>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&vs)?.shape()
    };
    inputs.push(random_input(&probe_shape, r));
    inputs.extend(params.iter().map(|p| p.value.clone()));
    let report = grad_check(
        |tape, v| {
            for (p, &var) in params.iter().zip(&v[n_in + 1..]) {
                tape.bind(&p.name, var);
            }
            Ok(f(&v[..n_in])?.mul(v[n_in])?.sum())
        },
        &inputs,
        ctx.cfg.grad_step,
        ctx.cfg.grad_tol,
    )?;
    let worst = report.failures().next();
    ensure!(
        worst.is_none(),
        "{name}: input {} coord {}: analytic {} vs numeric {} (max rel err {:.3e})",
        worst.unwrap().input,
        worst.unwrap().index,
        worst.unwrap().analytic,
        worst.unwrap().numeric,
        report.max_rel_error()
    );
    Ok(())
}

struct NoParams;

impl Module<f64> for NoParams {
    fn visit<'a>(&'a self, _: &mut dyn FnMut(&'a crate::nn::Param<f64>)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut crate::nn::Param<f64>)) {}
}

fn op_gradients(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        for (name, shapes, positive, f) in OPS {
            let inputs = shapes
                .iter()
                .map(|s| {
                    let x: Tensor<f64> = random_input(s, r);
                    if *positive {
                        x.map(|v| v.abs() + 0.5)
                    } else {
                        x
                    }
                })
                .collect();
            check_with_params(ctx, name, &NoParams, inputs, r, f)?;
        }
        let layer = GsaLayer::<f64>::new("gsa", 8, 2, r)?;
        check_with_params(ctx, "group_attn", &layer, vec![random_input(&[5, 8], r)], r, |v| group_attn(v[0], &layer))?;
        check_with_params(ctx, "gsa", &layer, vec![random_input(&[5, 8], r)], r, |v| gsa(v[0], &layer))?;
        let m = MhaLayer::<f64>::new("mha", 4, 2, 6, NormKind::Group(2), r)?;
        check_with_params(ctx, "mha", &m, vec![random_input(&[5, 4], r)], r, |v| mha(v[0], &m))?;

        let noise: Tensor<f64> = gumbel_noise(&[3, 5], r);
        check_with_params(ctx, "gumbel_softmax", &NoParams, vec![random_input(&[3, 5], r)], r, |v| {
            gumbel_softmax(v[0], Some(&noise), 0.7)
        })?;
        let sampler = GssLayer::<f64>::new("gss", 3, 4, r)?;
        let seed: u64 = r.random();
        let cfg = SamplerConfig::default().train(0.8);
        check_with_params(ctx, "gss", &sampler, vec![random_input(&[6, 4], r)], r, |v| {
            let mut fixed = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            Ok(gss(v[0], &sampler, &cfg, &mut fixed)?.features)
        })?;

        let arpe_cfg = ArpeConfig {
            k: 3,
            d0: 2.0,
            n0: 1024,
            h_widths: vec![5, 4],
            gamma_widths: vec![4],
        };
        let layer = ArpeLayer::<f64>::new("arpe", 4, arpe_cfg, r)?;
        let cloud: PointCloud<f64> = random_cloud(6, 1, r);
        let nbrs = knn(&cloud, 3)?;
        arpe_grad_direct(ctx, &layer, &cloud, &nbrs, r)
    })
}

/// ARPE takes no tensor input, so its parameters are the only differentiated leaves.
fn arpe_grad_direct(
    ctx: &Ctx<'_>,
    layer: &ArpeLayer<f64>,
    cloud: &PointCloud<f64>,
    nbrs: &NeighborIndex,
    r: &mut ChaCha8Rng,
) -> Check {
    let params = layer.params();
    let probe: Tensor<f64> = random_input(&[cloud.len(), layer.out_dim()], r);
    let inputs: Vec<Tensor<f64>> = params.iter().map(|p| p.value.clone()).collect();
    let report = grad_check(
        |tape, v| {
            for (p, &var) in params.iter().zip(v) {
                tape.bind(&p.name, var);
            }
            Ok(arpe_with(tape, cloud, nbrs, layer)?.mul(tape.constant(probe.clone()))?.sum())
        },
        &inputs,
        ctx.cfg.grad_step,
        ctx.cfg.grad_tol,
    )?;
    ensure!(report.passed(), "arpe: max rel err {:.3e}", report.max_rel_error());
    Ok(())
}

fn softmax_rows(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let (rows, m) = (r.random_range(1..8), r.random_range(1..10));
        let x = random_input::<_, f64>(&[rows, m], r).map(|v| v * 10.0);
        let shift: Vec<f64> = (0..rows).map(|_| r.random_range(-50.0..50.0)).collect();
        let shifted = Tensor::from_fn(&[rows, m], |i| x.data()[i] + shift[i / m]);
        let tape = Tape::new();
        let a = tape.constant(x).softmax(1).value();
        let b = tape.constant(shifted).softmax(1).value();
        for row in a.data().chunks(m) {
            let s: f64 = row.iter().sum();
            ensure!((s - 1.0).abs() <= 1e-6, "row sums to {s}");
        }
        let d = tensor_diff(&a, &b);
        ensure!(d <= 1e-12, "shifted rows differ by {d:e}");
        let a32 = Tape::new().constant(a.cast::<f32>()).softmax(1).value();
        for row in a32.data().chunks(m) {
            let s: f32 = row.iter().sum();
            ensure!((s - 1.0).abs() <= 1e-6, "32-bit row sums to {s}");
        }
        Ok(())
    })
}

fn reshape_roundtrip(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let rank = r.random_range(2..5);
        let shape: Vec<usize> = (0..rank).map(|_| r.random_range(1..5)).collect();
        let x: Tensor<f32> = random_input(&shape, r);
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let flat = v.reshape(&[x.numel()])?.reshape(&shape)?.value();
        ensure!(*flat == x, "reshape round trip changed {shape:?}");
        let p = perm(rank, r);
        let mut inv = vec![0; rank];
        for (i, &pi) in p.iter().enumerate() {
            inv[pi] = i;
        }
        let back = v.permute(&p)?.permute(&inv)?.value();
        ensure!(*back == x, "permute {p:?} then inverse changed the tensor");
        let m = tape.constant(Tensor::<f32>::from_fn(&[shape[0], shape[1]], |i| i as f32 * 0.5));
        ensure!(m.t().t().value() == m.value(), "double transpose is not the identity");
        Ok(())
    })
}

fn tape_replay(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let layer = GsaLayer::<f64>::new("gsa", 8, r.random_range(0..3usize).pow(2).max(1).min(4), r)?;
        let tape = Tape::new();
        let x = tape.leaf(random_input(&[6, 8], r));
        let y = gsa(x, &layer)?.square().sum();
        let g1 = tape.backward(y)?;
        let g2 = tape.backward(y)?;
        ensure!(g1.wrt(x) == g2.wrt(x), "input gradients differ between passes");
        for p in layer.params() {
            ensure!(g1.param(&p.name) == g2.param(&p.name), "{} gradients differ between passes", p.name);
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- geometry

fn distance_symmetry(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let n = r.random_range(2..40);
        let c: PointCloud<f64> = random_cloud(n, r.random_range(0..3), r);
        let d = pairwise_sq_dist(&c);
        for i in 0..n {
            ensure!(d.at(&[i, i]) == 0.0, "diagonal {i} is {}", d.at(&[i, i]));
            for j in 0..n {
                ensure!(d.at(&[i, j]) == d.at(&[j, i]), "asymmetric at ({i},{j})");
            }
        }
        let shift: [f64; 3] = std::array::from_fn(|_| r.random_range(-5.0..5.0));
        let ch = c.channels();
        let moved = PointCloud::new(Tensor::from_fn(&[n, ch], |i| {
            c.points().data()[i] + if i % ch < 3 { shift[i % ch] } else { 0.0 }
        }))?;
        let diff = tensor_diff(&d, &pairwise_sq_dist(&moved));
        ensure!(diff <= 1e-10, "translation by {shift:?} moved distances by {diff:e}");
        Ok(())
    })
}

fn feature_channel_invariance(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let (n, f) = (r.random_range(4..30), r.random_range(2..5));
        let c: PointCloud<f64> = random_cloud(n, f, r);
        let p = perm(f, r);
        let ch = 3 + f;
        let swapped = PointCloud::new(Tensor::from_fn(&[n, ch], |i| {
            let (row, col) = (i / ch, i % ch);
            let src = if col < 3 { col } else { 3 + p[col - 3] };
            c.points().data()[row * ch + src]
        }))?;
        let (k, m, s) = (r.random_range(1..n), r.random_range(1..=n), r.random_range(0..n));
        ensure!(knn(&c, k)? == knn(&swapped, k)?, "knn changed under feature permutation {p:?}");
        ensure!(fps(&c, m, s)? == fps(&swapped, m, s)?, "fps changed under feature permutation {p:?}");
        Ok(())
    })
}

fn fps_covariance(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let n = r.random_range(2..40);
        let c: PointCloud<f64> = random_cloud(n, 0, r);
        let (m, s) = (r.random_range(1..=n), r.random_range(0..n));
        let p = perm(n, r);
        let moved_start = p.iter().position(|&i| i == s).unwrap();
        let a = fps(&c, m, s)?;
        let b: Vec<usize> = fps(&c.select(&p), m, moved_start)?.iter().map(|&i| p[i]).collect();
        ensure!(a == b, "start {s}: {a:?} vs relabelled {b:?}");
        Ok(())
    })
}

fn fps_witness(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.once(|_, _| {
        let line = PointCloud::<f64>::from_rows(&[0.0, 1.0, 2.0, 9.0].map(|x| vec![x, 0.0, 0.0]))?;
        let a = fps(&line, 3, 0)?;
        let b = fps(&line, 3, 1)?;
        ensure!(a == [0, 3, 2], "start 0 gave {a:?}, expected [0, 3, 2]");
        ensure!(b == [1, 3, 0], "start 1 gave {b:?}, expected [1, 3, 0]");
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort_unstable();
        sb.sort_unstable();
        ensure!(sa != sb, "subsets coincide: {sa:?}");
        Ok(())
    })
}

fn dilated_knn(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let n = r.random_range(2..40);
        let k = r.random_range(1..n);
        let c: PointCloud<f64> = random_cloud(n, 0, r);
        let plain = knn(&c, k)?;
        // N0 far above N keeps the dilation rate at 1, so the pool is exactly K.
        let dilated = dilated_neighbor_sample(&c, k, 2.0, 1 << 20, r)?;
        for p in 0..n {
            let (mut a, mut b) = (plain.row(p).to_vec(), dilated.row(p).to_vec());
            a.sort_unstable();
            b.sort_unstable();
            ensure!(a == b, "point {p}: knn {a:?} vs dilated {b:?}");
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- attention

fn equivariance_gap<T: Real>(n: usize, c: usize, g: usize, r: &mut ChaCha8Rng) -> Result<[f64; 4], super::Violation> {
    let x: Tensor<T> = random_input(&[n, c], r);
    let p = perm(n, r);
    let px = x.select_rows(&p);
    let layer = GsaLayer::<T>::new("gsa", c, g, r)?;
    let heads = MhaLayer::<T>::new("mha", c, g, c, NormKind::Group(g), r)?;
    let tape = Tape::new();
    let (xv, pxv) = (tape.constant(x), tape.constant(px));
    let gap = |a: Var<'_, T>, b: Var<'_, T>| tensor_diff(&a.value().select_rows(&p), &b.value());
    Ok([
        gap(nonlinear_self_attn(xv)?, nonlinear_self_attn(pxv)?),
        gap(group_attn(xv, &layer)?, group_attn(pxv, &layer)?),
        gap(gsa(xv, &layer)?, gsa(pxv, &layer)?),
        gap(mha(xv, &heads)?, mha(pxv, &heads)?),
    ])
}

fn attention_equivariance(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    const OPS: [&str; 4] = ["nonlinear_self_attn", "group_attn", "gsa", "mha"];
    ctx.each_trial(|r| {
        let n = r.random_range(4..=64);
        let c = [8, 16, 32][r.random_range(0..3)];
        let g = [1, 2, 4, 8][r.random_range(0..4)];
        let g32 = equivariance_gap::<f32>(n, c, g, r)?;
        let g64 = equivariance_gap::<f64>(n, c, g, r)?;
        for i in 0..4 {
            ensure!(g32[i] < ctx.cfg.tol32, "{} (N={n}, c={c}, g={g}, 32-bit): gap {:e}", OPS[i], g32[i]);
            ensure!(g64[i] < ctx.cfg.tol64, "{} (N={n}, c={c}, g={g}, 64-bit): gap {:e}", OPS[i], g64[i]);
        }
        Ok(())
    })
}

fn attention_rows(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let (nq, n, c) = (r.random_range(1..20), r.random_range(1..20), r.random_range(1..16));
        let tape = Tape::new();
        let q = tape.constant(random_input::<_, f32>(&[nq, c], r).map(|v| v * 5.0));
        let x = tape.constant(random_input::<_, f32>(&[n, c], r).map(|v| v * 5.0));
        let w = attn_weights(q, x)?.value();
        for row in w.data().chunks(n) {
            let s: f32 = row.iter().sum();
            ensure!((s - 1.0).abs() <= 1e-6, "attention row sums to {s}");
        }
        Ok(())
    })
}

fn shuffle_bijection(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.once(|_, _| {
        for c in 1..=24usize {
            for g in (1..=c).filter(|g| c % g == 0) {
                let cg = c / g;
                let expected: Vec<usize> = (0..cg).flat_map(|j| (0..g).map(move |i| i * cg + j)).collect();
                let tape = Tape::new();
                let eye = tape.constant(Tensor::<f64>::eye(c));
                let out = channel_shuffle(eye, g)?.value();
                for (row, chunk) in out.data().chunks(c).enumerate() {
                    let ones: Vec<usize> = (0..c).filter(|&j| chunk[j] == 1.0).collect();
                    let zeros = chunk.iter().filter(|&&v| v == 0.0).count();
                    ensure!(ones.len() == 1 && zeros == c - 1, "c={c}, g={g}: row {row} is not one-hot");
                    ensure!(expected[ones[0]] == row, "c={c}, g={g}: input channel {row} landed at {}", ones[0]);
                }
                let x = tape.constant(Tensor::<f64>::from_fn(&[2, c], |i| i as f64));
                let back = channel_shuffle(channel_shuffle(x, g)?, cg)?.value();
                ensure!(back == x.value(), "c={c}, g={g}: shuffle({cg}) does not invert shuffle({g})");
            }
        }
        Ok(())
    })
}

fn gsa_param_trend(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.once(|r, _| {
        for c in [8usize, 16, 32, 64, 128] {
            let mut last = usize::MAX;
            for g in (1..=c).filter(|g| c % g == 0) {
                let layer = GsaLayer::<f32>::new("gsa", c, g, r)?;
                let n = layer.param_count();
                ensure!(n == gsa_param_count(c, g), "c={c}, g={g}: {n} != c^2/g + 2c");
                ensure!(n == c * c / g + 2 * c, "closed form mismatch at c={c}, g={g}");
                ensure!(n < last, "c={c}: count did not drop at g={g}");
                last = n;
            }
            if c % 8 == 0 {
                let lg = MhaLayer::<f32>::new("mha", c, 8, c, NormKind::Group(8), r)?.param_count();
                ensure!(lg == mha_param_count(c, 8, c), "c={c}: MHA count {lg} disagrees with its closed form");
                ensure!(gsa_param_count(c, 8) < lg, "c={c}: GSA(g=8) is not smaller than MHA-LG(H=8)");
            }
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- sampling

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn top_gap(row: &[f64]) -> f64 {
    let mut s = row.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    if s.len() > 1 {
        s[0] - s[1]
    } else {
        f64::INFINITY
    }
}

fn gumbel_softmax_rows(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let (rows, m) = (r.random_range(1..6), r.random_range(1..10));
        let tau = 10f64.powf(r.random_range(-2.0..1.0));
        let tape = Tape::new();
        let logits: Tensor<f64> = random_input::<_, f64>(&[rows, m], r).map(|v| v * 5.0);
        let noise = gumbel_noise(&[rows, m], r);
        let y = gumbel_softmax(tape.constant(logits.clone()), Some(&noise), tau)?.value();
        let y32 = gumbel_softmax(Tape::new().constant(logits.cast::<f32>()), Some(&noise.cast()), tau)?.value();
        for (a, b) in y.data().chunks(m).zip(y32.data().chunks(m)) {
            let s: f64 = a.iter().sum();
            let s32: f32 = b.iter().sum();
            ensure!((s - 1.0).abs() <= 1e-6, "tau {tau}: row sums to {s}");
            ensure!((s32 - 1.0).abs() <= 1e-6, "tau {tau}: 32-bit row sums to {s32}");
        }
        Ok(())
    })
}

fn gumbel_max_unbiased(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.once(|r, draws| {
        let mut dists = vec![vec![0.2, 0.5, 0.3]];
        for _ in 0..3 {
            let m = r.random_range(2..=8);
            let w: Vec<f64> = (0..m).map(|_| r.random_range(0.05..1.0)).collect();
            let z: f64 = w.iter().sum();
            dists.push(w.iter().map(|v| v / z).collect());
        }
        for s in &dists {
            let m = s.len();
            let batch = Tensor::<f64>::from_fn(&[draws, m], |i| s[i % m].ln());
            let mut freq = vec![0.0; m];
            for p in gumbel_argmax(&batch, Some(&mut *r)) {
                freq[p] += 1.0 / draws as f64;
            }
            let gap = freq.iter().zip(s).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure!(gap <= ctx.cfg.gumbel_tol, "Cat({s:?}): frequencies {freq:?}, L-inf gap {gap}");
        }
        Ok(())
    })
}

fn gss_invariance(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    let cfg = SamplerConfig::default().infer();
    ctx.each_trial(|r| {
        let (n, c) = (r.random_range(2..40), [4, 8, 16][r.random_range(0..3)]);
        let layer = GssLayer::<f64>::new("gss", r.random_range(1..=n), c, r)?;
        let x: Tensor<f64> = random_input(&[n, c], r);
        let p = perm(n, r);
        let tape = Tape::new();
        let a = gss(tape.constant(x.clone()), &layer, &cfg, r)?;
        if a.margins.iter().any(|&m| m < 1e-9) {
            return Ok(()); // near-tie: outside the property's domain
        }
        let b = gss(tape.constant(x.select_rows(&p)), &layer, &cfg, r)?;
        let sorted_rows = |t: &Tensor<f64>| {
            let mut rows: Vec<Vec<f64>> = t.data().chunks(c).map(<[f64]>::to_vec).collect();
            rows.sort_by(|u, v| u.iter().zip(v).map(|(a, b)| a.total_cmp(b)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
            rows
        };
        ensure!(
            sorted_rows(&a.features.value()) == sorted_rows(&b.features.value()),
            "selected row multisets differ (N={n}, c={c}, slots={})",
            layer.n_out()
        );
        let relabelled: Vec<usize> = b.indices.iter().map(|&i| p[i]).collect();
        ensure!(a.indices == relabelled, "slot winners {:?} vs relabelled {:?}", a.indices, relabelled);
        Ok(())
    })
}

fn gss_distribution(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.once(|r, draws| {
        let (n, c, slots) = (5, 4, 2);
        let layer = GssLayer::<f64>::new("gss", slots, c, r)?;
        let x: Tensor<f64> = random_input(&[n, c], r);
        let p = perm(n, r);
        let px = x.select_rows(&p);
        let cfg = SamplerConfig::default().train(0.5);
        let mut freq = [vec![vec![0.0; n]; slots], vec![vec![0.0; n]; slots]];
        for _ in 0..draws {
            let tape = Tape::new();
            let a = gss(tape.constant(x.clone()), &layer, &cfg, r)?;
            let b = gss(tape.constant(px.clone()), &layer, &cfg, r)?;
            for s in 0..slots {
                freq[0][s][a.indices[s]] += 1.0 / draws as f64;
                freq[1][s][p[b.indices[s]]] += 1.0 / draws as f64;
            }
        }
        for s in 0..slots {
            let gap = freq[0][s].iter().zip(&freq[1][s]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure!(
                gap <= ctx.cfg.gss_tol,
                "slot {s}: {:?} vs relabelled {:?}, L-inf gap {gap}",
                freq[0][s],
                freq[1][s]
            );
        }
        Ok(())
    })
}

fn annealing(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let (rows, m) = (3, r.random_range(2..9));
        let (logits, noise) = loop {
            let l: Tensor<f64> = random_input(&[rows, m], r);
            let g: Tensor<f64> = gumbel_noise(&[rows, m], r);
            let z = l.zip_map(&g, |a, b| a + b)?;
            if z.data().chunks(m).all(|row| top_gap(row) >= 0.02) {
                break (l, g);
            }
        };
        let tape = Tape::new();
        let l = tape.constant(logits);
        let mut prev = vec![f64::INFINITY; rows];
        for tau in [1.0, 0.5, 0.1, 0.01] {
            let y = gumbel_softmax(l, Some(&noise), tau)?.value();
            for (row, p) in y.data().chunks(m).enumerate() {
                let h = entropy(p);
                ensure!(h <= prev[row] + 1e-12, "row {row}: entropy rose to {h} at tau {tau}");
                prev[row] = h;
            }
        }
        let hard = gumbel_softmax(l, Some(&noise), 1e-3)?.value();
        for row in hard.data().chunks(m) {
            let top = row.iter().cloned().fold(0.0, f64::max);
            ensure!(top >= 0.999, "tau 1e-3: max entry {top}");
        }
        Ok(())
    })
}

fn gumbel_softmax_gradient(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let (rows, m) = (r.random_range(1..4), r.random_range(2..7));
        let noise: Tensor<f64> = gumbel_noise(&[rows, m], r);
        let tau = r.random_range(0.3..2.0);
        check_with_params(ctx, "gumbel_softmax", &NoParams, vec![random_input(&[rows, m], r)], r, |v| {
            gumbel_softmax(v[0], Some(&noise), tau)
        })
    })
}

// ---------------------------------------------------------------- embedding

fn small_arpe(k: usize) -> ArpeConfig {
    ArpeConfig {
        k,
        d0: 2.0,
        n0: 1024,
        h_widths: vec![8, 8],
        gamma_widths: vec![8, 16],
    }
}

fn arpe_equivariance(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let n = r.random_range(6..32);
        let k = r.random_range(1..6);
        let layer = ArpeLayer::<f32>::new("arpe", 4, small_arpe(k), r)?;
        let c: PointCloud<f32> = random_cloud(n, 1, r);
        let p = perm(n, r);
        let tape = Tape::new();
        let a = arpe_with(&tape, &c, &knn(&c, k)?, &layer)?.value();
        let moved = c.select(&p);
        let b = arpe_with(&tape, &moved, &knn(&moved, k)?, &layer)?.value();
        let gap = tensor_diff(&a.select_rows(&p), &b);
        ensure!(gap < ctx.cfg.tol32, "N={n}, K={k}: gap {gap:e}");
        Ok(())
    })
}

fn arpe_neighbor_order(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let n = r.random_range(4..24);
        let k = r.random_range(1..n.min(6));
        let layer = ArpeLayer::<f64>::new("arpe", 3, small_arpe(k), r)?;
        let c: PointCloud<f64> = random_cloud(n, 0, r);
        let nbrs = knn(&c, k)?;
        let mut flat = nbrs.flat().to_vec();
        for row in flat.chunks_mut(k) {
            row.shuffle(r);
        }
        let shuffled = NeighborIndex::new(flat, n, k, k)?;
        let tape = Tape::new();
        let a = arpe_with(&tape, &c, &nbrs, &layer)?.value();
        let b = arpe_with(&tape, &c, &shuffled, &layer)?.value();
        ensure!(a == b, "N={n}, K={k}: output moved by {:e}", tensor_diff(&a, &b));
        Ok(())
    })
}

fn position_set_translation(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let n = r.random_range(3..24);
        let f = r.random_range(0..3);
        let k = r.random_range(1..n);
        let c: PointCloud<f64> = random_cloud(n, f, r);
        let ch = 3 + f;
        let shift: [f64; 3] = std::array::from_fn(|_| r.random_range(-3.0..3.0));
        let moved = PointCloud::new(Tensor::from_fn(&[n, ch], |i| {
            c.points().data()[i] + if i % ch < 3 { shift[i % ch] } else { 0.0 }
        }))?;
        let nbrs = knn(&c, k)?;
        let (a, b) = (position_set(&c, &nbrs)?, position_set(&moved, &nbrs)?);
        for (i, (u, v)) in a.data().iter().zip(b.data()).enumerate() {
            let col = i % (2 * ch);
            let expected = if col < 3 { u + shift[col] } else { *u };
            ensure!((v - expected).abs() <= 1e-12, "entry {i} (column {col}): {v} vs {expected}");
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- model

fn tiny_config(plan: &str) -> PatConfig {
    PatConfig {
        n_points: 40,
        c: 16,
        g: 4,
        n_gsa: 2,
        k: 6,
        plan: parse_plan(plan).expect("valid plan"),
        mlp_sizes: vec![16],
        m: 4,
        batch: 8,
        ..PatConfig::default()
    }
}

fn model_permutation(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let c: PointCloud<f64> = random_cloud(40, 0, r);
        let p = perm(40, r);
        let moved = c.select(&p);
        for plan in ["", "gss20,gss8"] {
            let model = PatModel::<f64>::new(&tiny_config(plan), r)?;
            let tape = Tape::new();
            let a = class_scores(&model.forward(&tape, &c, Mode::Infer, 0.1, r)?.logits.value());
            let b = class_scores(&model.forward(&tape, &moved, Mode::Infer, 0.1, r)?.logits.value());
            let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            ensure!(gap < ctx.cfg.tol64, "plan {plan:?}: scores moved by {gap:e}");
        }
        let model = PatModel::<f64>::new(&tiny_config("fps20,gss8"), r)?;
        let start = r.random_range(0..40);
        let mut a_model = model.clone();
        a_model.config.fps_start = start;
        let mut b_model = model;
        b_model.config.fps_start = p.iter().position(|&i| i == start).unwrap();
        let tape = Tape::new();
        let a = a_model.forward(&tape, &c, Mode::Infer, 0.1, r)?;
        let b = b_model.forward(&tape, &moved, Mode::Infer, 0.1, r)?;
        let mapped: Vec<usize> = b.positions.iter().map(|&i| p[i]).collect();
        ensure!(a.positions == mapped, "fps plan: kept {:?} vs relabelled {mapped:?}", a.positions);
        let (sa, sb) = (class_scores(&a.logits.value()), class_scores(&b.logits.value()));
        let gap = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        ensure!(gap < ctx.cfg.tol64, "fps plan: scores moved by {gap:e}");
        Ok(())
    })
}

fn loss_nonnegative(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let (rows, m) = (r.random_range(1..10), r.random_range(2..8));
        let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..m)).collect();
        let label = Label::PerPoint(labels.clone());
        let positions: Vec<usize> = (0..rows).collect();
        let tape = Tape::new();
        let logits = tape.constant(random_input::<_, f64>(&[rows, m], r).map(|v| v * 4.0));
        let loss = element_wise_loss(logits, &label, &positions)?.value().item();
        ensure!(loss > 0.0, "finite logits gave loss {loss}");
        let mut prev = f64::INFINITY;
        for scale in [1.0, 5.0, 20.0, 40.0] {
            let hot = Tensor::<f64>::from_fn(&[rows, m], |i| if labels[i / m] == i % m { scale } else { 0.0 });
            let l = element_wise_loss(tape.constant(hot), &label, &positions)?.value().item();
            ensure!(l >= 0.0 && l < prev, "one-hot scale {scale}: loss {l} after {prev}");
            prev = l;
        }
        ensure!(prev < 1e-15, "one-hot limit leaves loss {prev}");
        Ok(())
    })
}

fn shapes_fixture(per_class: usize, seed_rng: &mut ChaCha8Rng) -> crate::Result<Vec<crate::model::Sample<f32>>> {
    let spec = ShapeSpec {
        n_per_class: per_class,
        n_points: 40,
        ..ShapeSpec::default()
    };
    gen_shapes(&spec, seed_rng)
}

fn overfit(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let data = shapes_fixture(8, r)?;
        let cfg = PatConfig {
            epochs: 50,
            lr: 5e-3,
            lr_halve_every: 0,
            dropout: 0.0,
            augment: false,
            c: 32,
            ..tiny_config("fps20,gss8")
        };
        let mut model = PatModel::<f32>::new(&cfg, r)?;
        let opts = TrainOptions { out_dir: None, threads: Some(1) };
        let state = train(&mut model, &data, None, &opts, |_, s| {
            let done = s.history.last().is_some_and(|row| row.loss < 0.05);
            Ok(if done { Control::Stop } else { Control::Continue })
        })?;
        let last = state.history.last().expect("at least one epoch");
        ensure!(
            last.loss < 0.05 && state.step <= 200,
            "loss {} after {} steps (needs < 0.05 within 200)",
            last.loss,
            state.step
        );
        Ok(())
    })
}

fn checkpoint_roundtrip(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    fn once<T: Real>(r: &mut ChaCha8Rng) -> Check {
        let data: Vec<_> = shapes_fixture(2, r)?
            .into_iter()
            .map(|s| crate::model::Sample { cloud: s.cloud.cast::<T>(), label: s.label })
            .collect();
        let mut model = PatModel::<T>::new(&PatConfig { epochs: 1, ..tiny_config("fps20,gss8") }, r)?;
        let opts = TrainOptions { out_dir: None, threads: Some(1) };
        let state = train(&mut model, &data, None, &opts, |_, _| Ok(Control::Continue))?;
        let back = checkpoint::from_bytes::<T>(&checkpoint::to_bytes(&model, &state))?;
        let cloud: PointCloud<T> = random_cloud(40, 0, r);
        let seed: u64 = r.random();
        let run = |m: &PatModel<T>| -> crate::Result<Tensor<T>> {
            let mut fixed = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            Ok(m.forward(&Tape::new(), &cloud, Mode::Infer, 0.1, &mut fixed)?.logits.value().as_ref().clone())
        };
        ensure!(run(&model)? == run(&back.model)?, "restored model's logits differ");
        ensure!(back.state.history == state.history, "restored metric history differs");
        Ok(())
    }
    ctx.each_trial(|r| {
        once::<f32>(r)?;
        once::<f64>(r)
    })
}

fn training_determinism(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let data = shapes_fixture(2, r)?;
        let cfg = PatConfig { epochs: 2, seed: r.random(), ..tiny_config("fps20,gss8") };
        let run = |threads: usize| -> crate::Result<String> {
            let mut model = PatModel::<f32>::new(&cfg, &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed))?;
            let opts = TrainOptions { out_dir: None, threads: Some(threads) };
            Ok(metrics_csv(&train(&mut model, &data, None, &opts, |_, _| Ok(Control::Continue))?.history))
        };
        let (a, b) = (run(1)?, run(2)?);
        ensure!(a == b, "metrics differ between runs:\n{a}\nvs\n{b}");
        Ok(())
    })
}

// ---------------------------------------------------------------- data

fn dense_stream(r: &mut ChaCha8Rng, span_ms: f64, gap_us: u64) -> Vec<EventRecord> {
    let end = (span_ms * 1e3) as u64;
    let mut t = r.random_range(0..1_000_000);
    let first = t;
    let mut out = Vec::new();
    while t < first + end {
        out.push(EventRecord {
            t,
            x: r.random_range(0..128),
            y: r.random_range(0..128),
            polarity: r.random_range(0..2),
        });
        t += r.random_range(1..=gap_us);
    }
    out
}

fn window_count(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let spec = ClipSpec {
            window_ms: r.random_range(5.0..60.0f64).round(),
            step_ms: 0.0,
            n_sample: 8,
        };
        let spec = ClipSpec { step_ms: r.random_range(1.0..=spec.window_ms).round(), ..spec };
        let span_ms = r.random_range(0.0..150.0);
        let stream = dense_stream(r, span_ms, 500);
        let span = span_us(&stream);
        let (w, s) = (spec.window_ms * 1e3, spec.step_ms * 1e3);
        let brute = (0..).take_while(|&k| k as f64 * s + w <= span as f64).count();
        let formula = if (span as f64) < w { 0 } else { ((span as f64 - w) / s).floor() as usize + 1 };
        ensure!(clip_count(span, &spec) == formula, "span {span} us: clip_count {} vs formula {formula}", clip_count(span, &spec));
        ensure!(brute == formula, "span {span} us: enumeration {brute} vs formula {formula}");
        let clips = window_events::<f32, _>(&stream, &spec, r)?;
        ensure!(clips.len() == formula, "span {span} us: {} clips vs formula {formula}", clips.len());
        Ok(())
    })
}

fn clip_contents(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let spec = ClipSpec {
            window_ms: 20.0,
            step_ms: 7.0,
            n_sample: r.random_range(1..64),
        };
        let (span_ms, gap_us) = (r.random_range(20.0..80.0), r.random_range(50..3000));
        let stream = dense_stream(r, span_ms, gap_us);
        for clip in window_events::<f64, _>(&stream, &spec, r)? {
            ensure!(clip.len() == spec.n_sample && clip.channels() == 4, "clip shape {:?}", clip.points().shape());
            for i in 0..clip.len() {
                let row = clip.points().row(i);
                ensure!((0.0..1.0).contains(&row[2]), "t_norm {} outside [0,1)", row[2]);
                ensure!(row[0].abs() <= 1.0 && row[1].abs() <= 1.0, "xy ({}, {}) outside [-1,1]", row[0], row[1]);
            }
        }
        Ok(())
    })
}

fn shape_balance(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    ctx.each_trial(|r| {
        let mut classes = Shape::ALL.to_vec();
        classes.shuffle(r);
        classes.truncate(r.random_range(1..=4));
        let spec = ShapeSpec {
            classes: classes.clone(),
            n_per_class: r.random_range(1..6),
            n_points: 16,
            ..ShapeSpec::default()
        };
        let data = gen_shapes::<f32, _>(&spec, r)?;
        let mut counts = vec![0; classes.len()];
        for s in &data {
            match s.label {
                Label::Class(c) if c < counts.len() => counts[c] += 1,
                ref other => return Err(super::Violation(format!("unexpected label {other:?}"))),
            }
        }
        ensure!(counts.iter().all(|&n| n == spec.n_per_class), "class counts {counts:?}");
        Ok(())
    })
}

fn located(e: &crate::PatError, line: usize) -> bool {
    match e {
        crate::PatError::Parse { line: l, .. } => *l == line,
        crate::PatError::Format(m) => m.contains(&format!(":{line}:")),
        _ => false,
    }
}

fn loader_errors(ctx: &Ctx<'_>) -> Result<(), super::Failure> {
    let path = Path::new("fixture");
    ctx.each_trial(|r| {
        let n = r.random_range(2..20);
        let cloud: PointCloud<f64> = random_cloud(n, r.random_range(0..3), r);
        let mut lines: Vec<String> = format_point_cloud(&cloud).lines().map(String::from).collect();
        // Column-count changes are only detectable after the first row fixes the width.
        let kind = r.random_range(0..3);
        let bad = if kind == 0 { r.random_range(0..n) } else { r.random_range(1..n) };
        lines[bad] = match kind {
            0 => lines[bad].replacen(' ', " x", 1),
            1 => lines[bad].rsplit_once(' ').unwrap().0.to_string(),
            _ => format!("{} 1.0", lines[bad]),
        };
        match parse_point_cloud::<f64>(&lines.join("\n"), path) {
            Err(e) if located(&e, bad + 1) => {}
            Err(e) => return Err(super::Violation(format!("point line {}: error not located: {e}", bad + 1))),
            Ok(_) => return Err(super::Violation(format!("corrupt point line {} accepted", bad + 1))),
        }

        let stream = dense_stream(r, 5.0, 400);
        let mut lines: Vec<String> = format_events(&stream)?.lines().map(String::from).collect();
        let bad = r.random_range(1..lines.len());
        lines[bad] = match r.random_range(0..3) {
            0 => lines[bad].replacen(',', ",z", 1),
            1 => format!("{},300", lines[bad].rsplit_once(',').unwrap().0.rsplit_once(',').unwrap().0),
            _ => lines[bad].rsplit_once(',').unwrap().0.to_string(),
        };
        match parse_events(&lines.join("\n"), path) {
            Err(e) if located(&e, bad + 1) => Ok(()),
            Err(e) => Err(super::Violation(format!("event line {}: error not located: {e}", bad + 1))),
            Ok(_) => Err(super::Violation(format!("corrupt event line {} accepted", bad + 1))),
        }
    })
}
