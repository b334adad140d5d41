use drgrade::data::{resample, stratified_split, ImageRecord, Manifest, ResampleSpec, SplitSpec};
use drgrade::io::{load_embeddings, synth_embeddings_with, ClusterSpec, SynthKind};
use drgrade::models::{load_checkpoint, save_checkpoint, Model};
use drgrade::training::{init_ranking_head, predict_model, train, Dataset, TrainConfig};
use drgrade::{Backend, Grade};

fn records(counts: [usize; 5]) -> Vec<ImageRecord> {
    let mut out = Vec::new();
    for (g, &n) in counts.iter().enumerate() {
        for i in 0..n {
            out.push(ImageRecord {
                image_id: format!("g{g}_{i:05}"),
                filepath: format!("g{g}_{i:05}.png"),
                grade: Grade::from_index(g).unwrap(),
                patient_id: None,
                source: "test".into(),
            });
        }
    }
    out
}

#[test]
fn large_split_is_proportional_and_resample_is_exact() {
    let m = Manifest::new(records([2822, 640, 1346, 268, 330])).unwrap();
    let out = stratified_split(&m, &SplitSpec { seed: 42, ..SplitSpec::default() }).unwrap();
    let s = &out.summary;
    for (g, &n) in [2822usize, 640, 1346, 268, 330].iter().enumerate() {
        for (hist, r) in [(&s.train_histogram, 0.70), (&s.val_histogram, 0.15), (&s.test_histogram, 0.15)] {
            assert!((hist[g] as f64 - r * n as f64).abs() <= 1.0, "grade {g}: {hist:?}");
        }
    }
    let (res, summary) = resample(
        out.train.records(),
        &ResampleSpec { seed: 1, ..ResampleSpec::default() },
    )
    .unwrap();
    assert_eq!(summary.output_histogram, [445, 200, 200, 180, 180]);
    assert_eq!(res.len(), 1205);
}

#[test]
fn synth_is_backend_independent_and_clustered() {
    let recs = records([20, 20, 20, 20, 20]);
    let kind = SynthKind::Global { dim: 16 };
    let a = synth_embeddings_with(Backend::Sequential, &recs, kind.clone(), ClusterSpec::default(), 9).unwrap();
    let b = synth_embeddings_with(Backend::default(), &recs, kind, ClusterSpec::default(), 9).unwrap();
    assert_eq!(a.container.to_bytes(), b.container.to_bytes());
    let fm = synth_embeddings_with(
        Backend::default(),
        &recs[..5],
        SynthKind::FeatureMap { channels: 4, height: 3, width: 2 },
        ClusterSpec::default(),
        9,
    )
    .unwrap();
    assert_eq!(fm.container.len(), 5);
}

#[test]
fn training_is_deterministic_and_checkpoints_preserve_predictions() {
    let all = records([40, 40, 40, 40, 40]);
    let m = Manifest::new(all.clone()).unwrap();
    let split = stratified_split(&m, &SplitSpec { seed: 3, ..SplitSpec::default() }).unwrap();
    let syn = synth_embeddings_with(
        Backend::default(),
        &all,
        SynthKind::Global { dim: 12 },
        ClusterSpec { separation: 6.0, noise_std: 1.0 },
        5,
    )
    .unwrap();
    let xt = load_embeddings(&syn.container, &split.train.ids()).unwrap();
    let xv = load_embeddings(&syn.container, &split.val.ids()).unwrap();
    let (yt, yv) = (split.train.grades(), split.val.grades());
    let cfg = TrainConfig { epochs: 6, early_stop_patience: 3, seed: 8, ..TrainConfig::default() };
    let run = || {
        let init = init_ranking_head(12, &cfg, Default::default()).unwrap();
        train(init, Dataset::new(&xt, &yt).unwrap(), Dataset::new(&xv, &yv).unwrap(), &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.best, b.best);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.gfe");
    let model = Model::Ranking(a.best);
    save_checkpoint(&path, &model).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.architecture(), model.architecture());
    let p0 = predict_model(&model, &xv, None).unwrap();
    let p1 = predict_model(&back, &xv, None).unwrap();
    // parameters are stored as f32
    for (r0, r1) in p0.logits.iter().zip(&p1.logits) {
        for (u, v) in r0.iter().zip(r1) {
            assert!((u - v).abs() < 1e-4 * (1.0 + u.abs()), "{u} vs {v}");
        }
    }
}
