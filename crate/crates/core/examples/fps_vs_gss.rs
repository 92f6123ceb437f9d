//! Farthest point sampling against learned Gumbel subset sampling on a
//! sphere with outliers: how many outliers each keeps, before and after a
//! short training run.
//!
//! cargo run --release --example fps_vs_gss -- [epochs]

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use patkit::dataio::{gen_shapes, shape_cloud, Shape, ShapeSpec};
use patkit::geometry::{fps, PointCloud};
use patkit::model::{parse_plan, train, Control, PatConfig, PatModel, TrainOptions};
use patkit::sampling::Mode;
use patkit::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const N: usize = 256;
const OUTLIER_FRAC: f64 = 0.05;

/// Outliers are the last rows of a generated cloud.
fn outliers_kept(indices: &[usize], first_outlier: usize) -> usize {
    indices.iter().filter(|&&i| i >= first_outlier).count()
}

fn report(model: &PatModel<f32>, cloud: &PointCloud<f32>, first_outlier: usize, label: &str) -> patkit::Result<()> {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model.forward(&tape, cloud, Mode::Infer, 0.1, &mut rng)?;
    for rep in &fwd.gss {
        println!(
            "  {label}: GSS after block {} keeps {}/{} outliers ({} duplicate slots)",
            rep.level,
            outliers_kept(&rep.indices, first_outlier),
            rep.indices.len(),
            rep.duplicates
        );
    }
    Ok(())
}

fn main() -> patkit::Result<()> {
    let epochs = std::env::args().nth(1).map(|a| a.parse().expect("numeric argument")).unwrap_or(4);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cloud: PointCloud<f32> = shape_cloud(Shape::Sphere, N, 0.0, OUTLIER_FRAC, &mut rng)?;
    let first_outlier = N - (N as f64 * OUTLIER_FRAC).round() as usize;
    println!("{N} points, {} outliers", N - first_outlier);

    for n_out in [16, 32, 64] {
        let picked = fps(&cloud, n_out, 0)?;
        println!("FPS {n_out}: keeps {} outliers", outliers_kept(&picked, first_outlier));
    }

    let cfg = PatConfig {
        n_points: N,
        c: 64,
        plan: parse_plan("gss64,gss32")?,
        mlp_sizes: vec![64],
        epochs,
        ..PatConfig::default()
    };
    let mut model = PatModel::<f32>::new(&cfg, &mut rng)?;
    report(&model, &cloud, first_outlier, "untrained")?;

    let data = gen_shapes::<f32, _>(
        &ShapeSpec { n_per_class: 40, n_points: N, outlier_frac: OUTLIER_FRAC, ..ShapeSpec::default() },
        &mut rng,
    )?;
    train(&mut model, &data, None, &TrainOptions::default(), |_, s| {
        let row = s.history.last().unwrap();
        println!("  epoch {} loss {:.4} acc {:.3}", row.epoch, row.loss, row.acc);
        Ok(Control::Continue)
    })?;
    report(&model, &cloud, first_outlier, "trained")?;
    Ok(())
}
