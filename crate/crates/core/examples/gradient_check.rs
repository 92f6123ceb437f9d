//! Reverse-mode gradients of the attention and sampling layers against
//! central differences, in 64-bit.
//!
//! cargo run --release --example gradient_check

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use patkit::attention::{gsa, nonlinear_self_attn, GsaLayer};
use patkit::gradcheck::{grad_check, random_input};
use patkit::sampling::gumbel_softmax;
use patkit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn main() -> patkit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Tensor<f64> = random_input(&[6, 8], &mut rng);
    let w: Tensor<f64> = random_input(&[6, 8], &mut rng);
    let layer = GsaLayer::<f64>::new("gsa", 8, 2, &mut rng)?;
    let noise: Tensor<f64> = patkit::sampling::gumbel_noise(&[6, 8], &mut rng);

    let reports = [
        (
            "nonlinear self-attention",
            grad_check(|_, v| Ok(nonlinear_self_attn(v[0])?.mul(v[1])?.sum()), &[x.clone(), w.clone()], STEP, TOL)?,
        ),
        (
            "GSA block (input only)",
            grad_check(|_, v| Ok(gsa(v[0], &layer)?.mul(v[1])?.sum()), &[x.clone(), w.clone()], STEP, TOL)?,
        ),
        (
            "gumbel-softmax tau=0.5",
            grad_check(
                |_, v| Ok(gumbel_softmax(v[0], Some(&noise), 0.5)?.mul(v[1])?.sum()),
                &[x.clone(), w.clone()],
                STEP,
                TOL,
            )?,
        ),
        (
            "log-softmax + max",
            grad_check(|_, v| Ok(v[0].log_softmax(1).max_axis(0, false)?.sum()), &[x.clone()], STEP, TOL)?,
        ),
    ];
    let mut ok = true;
    for (name, r) in &reports {
        ok &= r.passed();
        println!(
            "{:<26} {:>4} coords  max rel error {:.2e}  {}",
            name,
            r.coords.len(),
            r.max_rel_error(),
            if r.passed() { "ok" } else { "FAILED" }
        );
    }
    if !ok {
        std::process::exit(1);
    }
    Ok(())
}
