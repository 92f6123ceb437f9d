//! Files on disk: point clouds, dataset manifests, event streams and
//! checkpoints written by one call and read back by another.

use patkit::dataio::{
    gen_gestures, gen_scene, gen_shapes, load_dataset, load_events, load_point_cloud, save_dataset, save_events,
    save_point_cloud, GestureSpec, Shape, ShapeSpec,
};
use patkit::model::{checkpoint, parse_plan, train, Control, PatConfig, PatModel, TrainOptions};
use patkit::sampling::Mode;
use patkit::{PatError, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(17)
}

#[test]
fn point_cloud_files_round_trip_exactly_in_f64() {
    let dir = tempfile::tempdir().unwrap();
    let samples = gen_shapes::<f64, _>(&ShapeSpec { n_per_class: 1, n_points: 50, ..ShapeSpec::default() }, &mut rng()).unwrap();
    let path = dir.path().join("cloud.txt");
    save_point_cloud(&path, &samples[0].cloud).unwrap();
    let back = load_point_cloud::<f64>(&path).unwrap();
    assert_eq!(back.points().data(), samples[0].cloud.points().data());
}

#[test]
fn dataset_manifests_keep_class_labels_and_refuse_per_point_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng();
    let shapes = gen_shapes::<f32, _>(&ShapeSpec { n_per_class: 2, n_points: 32, ..ShapeSpec::default() }, &mut r).unwrap();
    save_dataset(&dir.path().join("shapes"), &shapes).unwrap();
    let back = load_dataset::<f32>(&dir.path().join("shapes")).unwrap();
    assert_eq!(back.len(), shapes.len());
    for (a, b) in back.iter().zip(&shapes) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.cloud.points().data(), b.cloud.points().data());
    }

    let scenes: Vec<_> = (0..2).map(|_| gen_scene::<f32, _>(&Shape::ALL, 3, 60, 0.01, &mut r).unwrap()).collect();
    assert!(matches!(save_dataset(&dir.path().join("scenes"), &scenes), Err(PatError::Contract(_))));
}

#[test]
fn event_files_round_trip_and_report_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let streams = gen_gestures(1, &GestureSpec::default(), &mut rng());
    let path = dir.path().join("events.csv");
    save_events(&path, &streams[0].0).unwrap();
    assert_eq!(load_events(&path).unwrap(), streams[0].0);

    std::fs::write(&path, "t_us,x,y,polarity\n0,1,2,1\n5,1,x,0\n").unwrap();
    match load_events(&path) {
        Err(PatError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error at line 3, got {other:?}"),
    }
    std::fs::write(&path, "t_us,x,y,polarity\n0,1,2,1\n5,1,200,0\n").unwrap();
    match load_events(&path) {
        Err(PatError::Format(msg)) => assert!(msg.contains(":3:"), "{msg}"),
        other => panic!("expected an out-of-range error at line 3, got {other:?}"),
    }
}

#[test]
fn checkpoints_on_disk_resume_and_reproduce_the_forward_pass() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_shapes::<f32, _>(&ShapeSpec { n_per_class: 3, n_points: 40, ..ShapeSpec::default() }, &mut rng()).unwrap();
    let cfg = PatConfig {
        n_points: 40,
        c: 16,
        g: 4,
        n_gsa: 2,
        k: 6,
        plan: parse_plan("fps24,gss8").unwrap(),
        mlp_sizes: vec![16],
        batch: 4,
        epochs: 2,
        ..PatConfig::default()
    };
    let mut model = PatModel::<f32>::new(&cfg, &mut rng()).unwrap();
    let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), threads: Some(1) };
    let state = train(&mut model, &data, None, &opts, |_, _| Ok(Control::Continue)).unwrap();

    let loaded = checkpoint::load::<f32>(&dir.path().join("epoch002.ckpt")).unwrap();
    assert_eq!(loaded.model.config, cfg);
    assert_eq!(loaded.state.history, state.history);
    let forward = |m: &PatModel<f32>| {
        let tape = Tape::new();
        m.forward(&tape, &data[0].cloud, Mode::Infer, 0.1, &mut rng()).unwrap().logits.value().as_ref().clone()
    };
    assert_eq!(forward(&loaded.model), forward(&model));

    let bytes = std::fs::read(dir.path().join("epoch002.ckpt")).unwrap();
    assert_eq!(checkpoint::stored_bits(&bytes).unwrap(), 32);
    assert!(matches!(checkpoint::from_bytes::<f32>(&bytes[..bytes.len() / 2]), Err(PatError::Format(_))));
}
