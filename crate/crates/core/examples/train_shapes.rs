//! Trains the default classifier on four synthetic shapes and reports test
//! accuracy per epoch.
//!
//! cargo run --release --example train_shapes -- [epochs] [n_per_class]

use std::time::Instant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use patkit::dataio::{gen_shapes, ShapeSpec};
use patkit::nn::Module;
use patkit::model::{evaluate, train, Control, PatConfig, PatModel, TrainOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> patkit::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let epochs = args.next().unwrap_or(30);
    let per_class = args.next().unwrap_or(250);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = ShapeSpec { n_per_class: per_class, ..ShapeSpec::default() };
    let mut all = gen_shapes::<f32, _>(&spec, &mut rng)?;
    let test = all.split_off(all.len() * 4 / 5);

    let cfg = PatConfig { epochs, ..PatConfig::default() };
    let mut model = PatModel::<f32>::new(&cfg, &mut rng)?;
    println!("{} parameters, {} train / {} test clouds", model.param_count(), all.len(), test.len());
    let start = Instant::now();
    train(&mut model, &all, None, &TrainOptions::default(), |m, s| {
        let row = s.history.last().unwrap();
        let acc = evaluate(m, &test, 0, None)?.accuracy;
        println!(
            "epoch {:>2}  loss {:.4}  train {:.3}  test {:.3}  tau {:.3}  lr {:.1e}  {:.0}s",
            row.epoch, row.loss, row.acc, acc, row.tau, row.lr, start.elapsed().as_secs_f64()
        );
        Ok(Control::Continue)
    })?;
    Ok(())
}
