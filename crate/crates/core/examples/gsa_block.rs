//! One Group Shuffle Attention block next to a multi-head attention block of
//! the same width: parameter counts, latency and a permutation check.
//!
//! cargo run --release --example gsa_block -- [width] [points]

use std::time::Instant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use patkit::attention::{gsa, gsa_param_count, mha, mha_param_count, GsaLayer, MhaLayer, NormKind};
use patkit::gradcheck::random_input;
use patkit::nn::Module;
use patkit::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> patkit::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let c = args.next().unwrap_or(128);
    let n = args.next().unwrap_or(256);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Tensor<f32> = random_input(&[n, c], &mut rng);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    println!("{:<10} {:>8} {:>12} {:>10} {:>14}", "block", "params", "closed form", "ms", "perm error");
    for g in [1, 2, 4, 8] {
        let layer = GsaLayer::<f32>::new("gsa", c, g, &mut rng)?;
        let run = |input: &Tensor<f32>| -> patkit::Result<Tensor<f32>> {
            let tape = Tape::new();
            Ok(gsa(tape.constant(input.clone()), &layer)?.value().as_ref().clone())
        };
        let start = Instant::now();
        let y = run(&x)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let err = run(&x.select_rows(&perm))?.max_abs_diff(&y.select_rows(&perm));
        println!(
            "{:<10} {:>8} {:>12} {:>10.3} {:>14.2e}",
            format!("GSA g={g}"),
            layer.param_count(),
            gsa_param_count(c, g),
            ms,
            err
        );
    }

    let heads = 8;
    let layer = MhaLayer::<f32>::new("mha", c, heads, c, NormKind::Layer, &mut rng)?;
    let tape = Tape::new();
    let start = Instant::now();
    let y = mha(tape.constant(x.clone()), &layer)?.value();
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let tape2 = Tape::new();
    let err = mha(tape2.constant(x.select_rows(&perm)), &layer)?.value().max_abs_diff(&y.select_rows(&perm));
    println!(
        "{:<10} {:>8} {:>12} {:>10.3} {:>14.2e}",
        format!("MHA H={heads}"),
        layer.param_count(),
        mha_param_count(c, heads, c),
        ms,
        err
    );
    Ok(())
}
