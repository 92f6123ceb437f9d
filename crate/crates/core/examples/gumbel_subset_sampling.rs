//! Gumbel tricks behind subset sampling: Gumbel-Max frequencies against the
//! softmax they sample from, the effect of temperature on gumbel-softmax, and
//! a GSS layer choosing points in training and inference mode.
//!
//! cargo run --release --example gumbel_subset_sampling

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use patkit::dataio::{shape_cloud, Shape};
use patkit::geometry::PointCloud;
use patkit::sampling::{anneal, gss, gumbel_argmax, gumbel_noise, gumbel_softmax, GssLayer, SamplerConfig};
use patkit::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> patkit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = Tensor::<f64>::from_f64(&[1, 4], &[2.0, 1.0, 0.5, -1.0])?;
    let z: f64 = logits.data().iter().map(|v| v.exp()).sum();
    let draws = 200_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        counts[gumbel_argmax(&logits, Some(&mut rng))[0]] += 1;
    }
    println!("Gumbel-Max over {draws} draws");
    for (i, &l) in logits.data().iter().enumerate() {
        println!("  category {i}: softmax {:.4}  observed {:.4}", l.exp() / z, counts[i] as f64 / draws as f64);
    }

    let noise: Tensor<f64> = gumbel_noise(&[1, 4], &mut rng);
    println!("\ngumbel-softmax with one fixed noise draw");
    for tau in [5.0, 1.0, 0.5, 0.1, 0.01] {
        let tape = Tape::new();
        let y = gumbel_softmax(tape.constant(logits.clone()), Some(&noise), tau)?.value();
        let row: Vec<String> = y.data().iter().map(|v| format!("{v:.3}")).collect();
        println!("  tau {tau:<5} [{}]", row.join(", "));
    }

    let sampler = SamplerConfig::default();
    let schedule: Vec<String> = (0..=10).step_by(2).map(|e| format!("{:.3}", anneal(&sampler, e, 10))).collect();
    println!("\ntemperature over 10 epochs: {}", schedule.join(" -> "));

    let cloud: PointCloud<f32> = shape_cloud(Shape::Torus, 256, 0.0, 0.05, &mut rng)?;
    let layer = GssLayer::<f32>::new("gss", 16, 3, &mut rng)?;
    for (name, cfg) in [("train tau=1", sampler.clone().train(1.0)), ("infer", sampler.clone().infer())] {
        let tape = Tape::new();
        let out = gss(tape.constant(cloud.points().clone()), &layer, &cfg, &mut rng)?;
        let min_margin = out.margins.iter().cloned().fold(f64::INFINITY, f64::min);
        println!(
            "\nGSS {name}: slots {:?}\n  duplicates {}  smallest margin {:.4}",
            out.indices, out.duplicates, min_margin
        );
    }
    Ok(())
}
