//! Windows synthetic event-camera gesture streams into spatio-temporal clips,
//! trains a small classifier on them and reports clip- and stream-level
//! accuracy (the stream label is the mode of its clip predictions).
//!
//! cargo run --release --example event_gestures -- [epochs] [train_streams_per_class]

use std::time::Instant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use patkit::dataio::{clip_dataset, gen_gestures, stream_accuracy, ClipSpec, GestureSpec};
use patkit::model::{evaluate, parse_plan, train, Control, PatConfig, PatModel, TrainOptions};
use patkit::nn::Module;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> patkit::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let epochs = args.next().unwrap_or(12);
    let per_class = args.next().unwrap_or(40);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gestures = GestureSpec::default();
    let clip = ClipSpec { n_sample: 128, ..ClipSpec::default() };
    let train_streams = gen_gestures(per_class, &gestures, &mut rng);
    let test_streams = gen_gestures(10, &gestures, &mut rng);
    let (train_set, _) = clip_dataset::<f32, _>(&train_streams, &clip, &mut rng)?;
    let (test_set, owner) = clip_dataset::<f32, _>(&test_streams, &clip, &mut rng)?;
    let truth: Vec<usize> = test_streams.iter().map(|s| s.1).collect();

    let cfg = PatConfig {
        n_points: clip.n_sample,
        f: 1,
        c: 64,
        plan: parse_plan("fps48,gss16")?,
        mlp_sizes: vec![64, 32],
        m: 3,
        augment: false,
        epochs,
        seed: 11,
        ..PatConfig::default()
    };
    let mut model = PatModel::<f32>::new(&cfg, &mut rng)?;
    println!(
        "{} parameters, {} train clips from {} streams, {} test clips from {} streams",
        model.param_count(),
        train_set.len(),
        train_streams.len(),
        test_set.len(),
        test_streams.len()
    );
    let start = Instant::now();
    train(&mut model, &train_set, None, &TrainOptions::default(), |m, s| {
        let row = s.history.last().unwrap();
        let report = evaluate(m, &test_set, 0, None)?;
        let streams = stream_accuracy(&report.predictions, &owner, &truth)?;
        println!(
            "epoch {:>2}  loss {:.4}  train {:.3}  clip {:.3}  stream {:.3}  {:.0}s",
            row.epoch, row.loss, row.acc, report.accuracy, streams, start.elapsed().as_secs_f64()
        );
        Ok(Control::Continue)
    })?;
    Ok(())
}
