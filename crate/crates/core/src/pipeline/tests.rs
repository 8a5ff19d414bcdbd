use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::synthetic_source;
use super::*;
use crate::autodiff::{grad_check, GradCheckOptions};
use crate::events::{EventRecord, Polarity};

fn small_config() -> PipelineConfig {
    PipelineConfig {
        channels: 4,
        blocks: 1,
        bins: 2,
        taps: 3,
        max_offset: 2.0,
        ..PipelineConfig::default()
    }
}

fn random_events(w: u16, h: u16, n: usize, seed: u64) -> EventStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recs = (0..n)
        .map(|_| EventRecord {
            x: rng.random_range(0..w),
            y: rng.random_range(0..h),
            t: rng.random_range(0..10_000),
            p: if rng.random_bool(0.5) {
                Polarity::Positive
            } else {
                Polarity::Negative
            },
        })
        .collect();
    EventStream::new(w, h, recs).unwrap()
}

fn sample(w: usize, h: usize, seed: u64) -> (Image, EventStream) {
    (
        synthetic_source(w, h, seed).map(|v| 0.2 * v),
        random_events(w as u16, h as u16, 3 * w * h, seed + 1),
    )
}

#[test]
fn zero_inputs_give_zero_features() {
    let model = Model::new(small_config()).unwrap();
    let input = ModelInput {
        image: Tensor::zeros(&[3, 5, 6]),
        voxel: Tensor::zeros(&[2, 5, 6]),
        prior: Tensor::zeros(&[1, 5, 6]),
    };
    let mut g = model.store.graph();
    let (fi, fl, fe) = model.extract_features(&mut g, &input).unwrap();
    for v in [fi, fl, fe] {
        assert_eq!(g.shape(v), &[4, 5, 6]);
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn feature_shapes_and_geometry_errors() {
    let model = Model::new(small_config()).unwrap();
    let (img, ev) = sample(7, 5, 1);
    let input = ModelInput::prepare(&img, &ev, &model.config).unwrap();
    let mut g = model.store.graph();
    let (fi, _, _) = model.extract_features(&mut g, &input).unwrap();
    assert_eq!(g.shape(fi), &[4, 5, 7]);

    let wrong = random_events(6, 5, 10, 2);
    assert!(matches!(
        ModelInput::prepare(&img, &wrong, &model.config),
        Err(Error::Argument(_))
    ));
}

#[test]
fn stub_gradients_match_finite_differences() {
    let model = Model::new(small_config()).unwrap();
    let stub = model.voxel_stub;
    let mut inputs = model.store.tensors().to_vec();
    inputs.push(Tensor::uniform(
        &[2, 5, 5],
        -1.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(3),
    ));
    let x = inputs.len() - 1;
    let report = grad_check(
        |g, v| {
            let y = stub.forward(g, v[x])?;
            let r = g.constant(Tensor::uniform(
                &[4, 5, 5],
                -1.0,
                1.0,
                &mut ChaCha8Rng::seed_from_u64(4),
            ));
            let m = g.mul(y, r)?;
            g.sum(m)
        },
        &inputs,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn output_in_range_and_deterministic() {
    for case in small_config().ablation_cases() {
        let model = Model::new(case.1).unwrap();
        let (img, ev) = sample(12, 11, 5);
        let a = enhance(&model, &img, &ev, Some(&img)).unwrap();
        let b = enhance(&model, &img, &ev, None).unwrap();
        assert_eq!((a.output.width(), a.output.height(), a.output.channels()), (12, 11, 3));
        assert!(a.output.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert_eq!(a.output, b.output);
        assert!(a.metrics.is_some() && b.metrics.is_none());
    }
}

#[test]
fn iaef_fields_reported_per_stage() {
    let cfg = PipelineConfig {
        blocks: 2,
        ..small_config()
    };
    let model = Model::new(cfg).unwrap();
    let (img, ev) = sample(6, 6, 6);
    let r = enhance(&model, &img, &ev, None).unwrap();
    assert_eq!(r.fields.len(), 2);
    assert_eq!(r.fields[0].kv.shape(), &[3, 6, 6]);
}

fn train_set(n: usize, cfg: &PipelineConfig) -> Vec<TrainSample> {
    (0..n)
        .map(|i| {
            let gt = synthetic_source(8, 8, 100 + i as u64);
            let ev = random_events(8, 8, 40, 200 + i as u64);
            TrainSample {
                input: ModelInput::prepare(&gt.map(|v| 0.2 * v), &ev, cfg).unwrap(),
                target: gt.to_chw(),
            }
        })
        .collect()
}

#[test]
fn zero_learning_rate_freezes_loss() {
    let cfg = PipelineConfig {
        learning_rate: 0.0,
        batch_size: 0,
        ..small_config()
    };
    let data = train_set(3, &cfg);
    let mut model = Model::new(cfg).unwrap();
    let losses = train(&mut model, &data, 4, |_, _| {}).unwrap();
    assert!(losses.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn training_is_reproducible_and_descends() {
    let cfg = PipelineConfig {
        learning_rate: 0.5,
        batch_size: 2,
        ..small_config()
    };
    let data = train_set(4, &cfg);
    let run = || {
        let mut m = Model::new(cfg.clone()).unwrap();
        let l = train(&mut m, &data, 30, |_, _| {}).unwrap();
        (l, m.store.tensors().to_vec())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let model = Model::new(cfg.clone()).unwrap();
    let mut trained = model.clone();
    trained.store.tensors_mut().clone_from_slice(&pa);
    assert!(evaluate(&trained, &data).unwrap() < evaluate(&model, &data).unwrap());
}

#[test]
fn empty_training_set_is_argument_error() {
    let mut model = Model::new(small_config()).unwrap();
    assert!(matches!(train(&mut model, &[], 1, |_, _| {}), Err(Error::Argument(_))));
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let model = Model::new(small_config()).unwrap();
    model.save(tmp.path()).unwrap();
    let loaded = Model::load(tmp.path(), None).unwrap();
    // checkpoints store f32
    for (a, b) in loaded.store.tensors().iter().zip(model.store.tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x == *y as f32 as f64));
    }
    assert_eq!(loaded.config, model.config);

    let bigger = PipelineConfig {
        channels: 6,
        ..small_config()
    };
    let err = Model::load(tmp.path(), Some(bigger)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
}

#[test]
fn config_json_and_validation() {
    let c = PipelineConfig::from_json(
        r#"{"channels": 8, "filter": "conv", "injection": "cross-attn", "guidance": "event-only"}"#,
    )
    .unwrap();
    assert_eq!(
        (c.channels, c.filter, c.injection),
        (8, FilterMode::Conv, InjectionMode::CrossAttn)
    );
    assert_eq!(c.guidance, GuidanceMode::EventOnly);
    assert_eq!(c.blocks, 2);
    let back = PipelineConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
    for bad in [
        r#"{"taps": 4}"#,
        r#"{"channels": 0}"#,
        r#"{"colour": 1}"#,
        r#"{"learning_rate": -1}"#,
    ] {
        assert!(matches!(PipelineConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn nine_ablation_cases_are_distinct() {
    let cases = PipelineConfig::default().ablation_cases();
    assert_eq!(
        cases.iter().map(|c| c.0).collect::<Vec<_>>(),
        (0..9).collect::<Vec<_>>()
    );
    for (i, a) in cases.iter().enumerate() {
        for b in &cases[i + 1..] {
            assert_ne!(a.1, b.1);
        }
    }
}
