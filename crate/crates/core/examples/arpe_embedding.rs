//! Attention-free embedding of a point cloud with relative position
//! features: neighbour tables, the dilated pool size and the embedding's
//! behaviour under relabelling and translation.
//!
//! cargo run --release --example arpe_embedding -- [points]

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use patkit::dataio::{shape_cloud, Shape};
use patkit::embedding::{arpe_with, ArpeConfig, ArpeLayer};
use patkit::geometry::{dilated_pool, knn, PointCloud};
use patkit::nn::Module;
use patkit::sampling::Mode;
use patkit::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> patkit::Result<()> {
    let n = std::env::args().nth(1).map(|a| a.parse().expect("numeric argument")).unwrap_or(512);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud: PointCloud<f64> = shape_cloud(Shape::Cylinder, n, 0.01, 0.0, &mut rng)?;
    let config = ArpeConfig::for_width(64);
    let layer = ArpeLayer::<f64>::new("arpe", 3, config.clone(), &mut rng)?;
    println!(
        "ARPE: {} parameters, h widths {:?}, gamma widths {:?}",
        layer.param_count(),
        config.h_widths,
        config.gamma_widths
    );
    for m in [256, 512, 1024, 2048] {
        println!("  dilated pool for K={} at N={m}: {}", config.k, dilated_pool(config.k, m, config.d0, config.n0));
    }

    let train_nbrs = layer.neighbors(&cloud, Mode::Train, &mut rng)?;
    let infer_nbrs = layer.neighbors(&cloud, Mode::Infer, &mut rng)?;
    println!("point 0: training neighbours {:?}...", &train_nbrs.row(0)[..8]);
    println!("point 0: inference neighbours {:?}...", &infer_nbrs.row(0)[..8]);

    let nbrs = knn(&cloud, config.k.min(n - 1))?;
    let tape = Tape::new();
    let base = arpe_with(&tape, &cloud, &nbrs, &layer)?.value();

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let moved = cloud.select(&perm);
    let moved_nbrs = knn(&moved, config.k.min(n - 1))?;
    let permuted = arpe_with(&tape, &moved, &moved_nbrs, &layer)?.value();
    println!(
        "relabelled cloud: max |ARPE(Px) - P ARPE(x)| = {:.2e}",
        permuted.max_abs_diff(&base.select_rows(&perm))
    );

    let mut shifted = cloud.points().clone();
    for (i, v) in shifted.data_mut().iter_mut().enumerate() {
        *v += [0.5, -1.0, 2.0][i % 3];
    }
    let shifted = PointCloud::new(shifted)?;
    let out = arpe_with(&tape, &shifted, &nbrs, &layer)?.value();
    println!(
        "translated cloud: max change {:.2e} (a shift is a per-channel constant after the first linear map, \
         and a first group norm with one channel per group removes it)",
        out.max_abs_diff(&base)
    );
    Ok(())
}
