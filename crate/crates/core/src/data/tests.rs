use statrs::distribution::{ContinuousCDF, StudentsT};

use super::*;
use crate::tsm::{resample_temporal, sample_indices};

fn spec(kind: TaskKind) -> TaskSpec {
    TaskSpec {
        kind,
        frames: 32,
        feature_dim: 8,
        classes: 2,
        n_train: 40,
        n_test: 20,
        noise_sigma: 0.1,
        seed: 3,
    }
}

fn rows(seq: &FeatureSequence) -> Vec<Vec<f64>> {
    seq.frames().iter().map(|f| f.data().to_vec()).collect()
}

/// Welch two-sample t-test, two-sided p-value.
fn welch_p(a: &[f64], b: &[f64]) -> f64 {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2.powi(2) / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t.abs()))
}

#[test]
fn order_pairs_are_exact_reversals_without_noise() {
    let ds = gen_order_task(&TaskSpec {
        noise_sigma: 0.0,
        ..spec(TaskKind::Order)
    })
    .unwrap();
    for pair in ds.train.chunks(2) {
        let (fwd, bwd) = (&pair[0], &pair[1]);
        assert_eq!((fwd.label, bwd.label), (0, 1));
        let mut reversed = rows(fwd);
        reversed.reverse();
        assert_eq!(reversed, rows(bwd));

        let mut a = rows(fwd);
        let mut b = rows(bwd);
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);
    }
}

#[test]
fn order_task_needs_two_classes() {
    let bad = TaskSpec {
        classes: 3,
        ..spec(TaskKind::Order)
    };
    assert!(matches!(gen_order_task(&bad), Err(TsmError::Argument(_))));
}

#[test]
fn order_classes_have_matching_mean_pooled_features() {
    let ds = gen_order_task(&TaskSpec {
        n_train: 200,
        ..spec(TaskKind::Order)
    })
    .unwrap();
    let pooled = |label: usize| -> Vec<f64> {
        ds.train
            .iter()
            .filter(|s| s.label == label)
            .map(|s| s.frames().iter().flat_map(|f| f.data()).sum::<f64>() / s.len() as f64)
            .collect()
    };
    let p = welch_p(&pooled(0), &pooled(1));
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn noise_task_masks_cover_a_quarter() {
    let s = TaskSpec {
        frames: 30,
        ..spec(TaskKind::NoiseFrames)
    };
    let ds = gen_noise_frame_task(&s).unwrap();
    for seq in ds.train.iter().chain(&ds.test) {
        let mask = seq.relevance.as_ref().unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 30usize.div_ceil(4));
        let first = mask.iter().position(|&m| m).unwrap();
        assert!(mask[first..first + 8].iter().all(|&m| m));
    }
}

#[test]
fn noise_task_background_is_class_independent() {
    let s = TaskSpec {
        n_train: 400,
        classes: 3,
        ..spec(TaskKind::NoiseFrames)
    };
    let ds = gen_noise_frame_task(&s).unwrap();
    for label in 0..3 {
        let values: Vec<f64> = ds
            .train
            .iter()
            .filter(|q| q.label == label)
            .flat_map(|q| {
                let mask = q.relevance.clone().unwrap();
                q.frames()
                    .iter()
                    .zip(mask)
                    .filter(|(_, m)| !m)
                    .flat_map(|(f, _)| f.data().to_vec())
                    .collect::<Vec<_>>()
            })
            .collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.03, "class {label} background mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "class {label} background variance {var}");
    }
}

#[test]
fn noise_task_is_solvable_from_masked_frames() {
    let s = TaskSpec {
        classes: 4,
        n_train: 200,
        n_test: 200,
        ..spec(TaskKind::NoiseFrames)
    };
    let ds = gen_noise_frame_task(&s).unwrap();
    let window = |q: &FeatureSequence| -> Vec<f64> {
        let mask = q.relevance.as_ref().unwrap();
        q.frames()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .flat_map(|(f, _)| f.data().to_vec())
            .collect()
    };
    let dim = window(&ds.train[0]).len();
    let mut centroids = vec![vec![0.0; dim]; 4];
    let mut counts = [0usize; 4];
    for q in &ds.train {
        for (c, v) in centroids[q.label].iter_mut().zip(window(q)) {
            *c += v;
        }
        counts[q.label] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = ds
        .test
        .iter()
        .filter(|q| {
            let w = window(q);
            let dist = |c: &Vec<f64>| c.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..4)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == q.label
        })
        .count();
    assert!(correct as f64 / ds.test.len() as f64 >= 0.95);
}

#[test]
fn sparse_spike_present_at_full_density() {
    let s = TaskSpec {
        frames: 64,
        noise_sigma: 0.5,
        ..spec(TaskKind::SparseEvent)
    };
    let ds = gen_sparse_event_task(&s).unwrap();
    const { assert!(SPIKE_AMPLITUDE_RATIO >= 3.0) };
    for seq in ds.train.iter().chain(&ds.test) {
        let mask = seq.relevance.as_ref().unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), SPIKE_WIDTH);
        let energy = |f: &crate::tensor::Tensor| f.data().iter().map(|v| v * v).sum::<f64>();
        let spike: f64 = seq
            .frames()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(f, _)| energy(f))
            .sum();
        // Every spike element carries the amplitude on top of the background.
        assert!(spike / 2.0 > 0.5 * 8.0 * (SPIKE_AMPLITUDE_RATIO * 0.5).powi(2));
    }
}

#[test]
fn subsampling_keeps_spike_a_quarter_of_the_time() {
    let t = 64;
    let kept = sample_indices(t, t / 8);
    let hits = (0..=t - SPIKE_WIDTH)
        .filter(|p| kept.iter().any(|k| (*p..p + SPIKE_WIDTH).contains(k)))
        .count();
    let rate = hits as f64 / (t - SPIKE_WIDTH + 1) as f64;
    assert!((rate - 0.25).abs() < 0.02, "rate {rate}");

    let s = TaskSpec {
        frames: t,
        n_train: 400,
        ..spec(TaskKind::SparseEvent)
    };
    let ds = gen_sparse_event_task(&s).unwrap();
    let survived = ds
        .train
        .iter()
        .filter(|q| {
            let m = resample_temporal(&q.to_videomap().unwrap(), t / 8).unwrap();
            m.relevance.unwrap().iter().any(|&b| b)
        })
        .count();
    let empirical = survived as f64 / 400.0;
    assert!((empirical - 0.25).abs() < 0.06, "empirical {empirical}");
}

#[test]
fn generators_are_deterministic() {
    for kind in [
        TaskKind::Order,
        TaskKind::NoiseFrames,
        TaskKind::SparseEvent,
        TaskKind::TwoStream,
    ] {
        assert_eq!(generate(&spec(kind)).unwrap(), generate(&spec(kind)).unwrap());
        let other = TaskSpec { seed: 4, ..spec(kind) };
        assert_ne!(generate(&spec(kind)).unwrap(), generate(&other).unwrap());
    }
}

#[test]
fn complementary_streams_align() {
    let s = TaskSpec {
        classes: 4,
        ..spec(TaskKind::TwoStream)
    };
    let (a, b) = gen_complementary_streams(&s).unwrap();
    assert_eq!(a.train.len(), b.train.len());
    for (x, y) in a.test.iter().zip(&b.test) {
        assert_eq!((&x.id, x.label), (&y.id, y.label));
    }
}

#[test]
fn feature_file_format_definition() {
    let mut bytes = b"VMAP".to_vec();
    bytes.push(1);
    for v in [3u32, 2, 1] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in 1..=6 {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let seq = decode_feature_file(&bytes, "x").unwrap();
    assert_eq!(seq.label, 1);
    assert_eq!(rows(&seq), vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
    assert_eq!(encode_feature_file(&seq).unwrap(), bytes);
}

#[test]
fn feature_file_errors() {
    let seq = &gen_sparse_event_task(&spec(TaskKind::SparseEvent)).unwrap().train[0];
    let bytes = encode_feature_file(seq).unwrap();
    for cut in [0, 2, 10, bytes.len() - 3] {
        assert!(matches!(
            decode_feature_file(&bytes[..cut], "t"),
            Err(TsmError::Format { .. })
        ));
    }
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(matches!(
        decode_feature_file(&bad, "t"),
        Err(TsmError::Format { offset: 0, .. })
    ));
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0, 0, 0, 0]);
    assert!(matches!(decode_feature_file(&extra, "t"), Err(TsmError::Format { .. })));
    let mut zero_l = bytes;
    zero_l[9..13].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(
        decode_feature_file(&zero_l, "t"),
        Err(TsmError::Format { offset: 9, .. })
    ));
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_noise_frame_task(&spec(TaskKind::NoiseFrames)).unwrap();
    write_dataset(dir.path(), &ds, false).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
    assert_eq!(manifest.lines().count(), ds.len());

    assert!(matches!(
        write_dataset(dir.path(), &ds, false),
        Err(TsmError::Argument(_))
    ));
    write_dataset(dir.path(), &ds, true).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), ds);
}

mod roundtrip {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn generated_sequences_round_trip_bitwise(seed in 0u64..1000, kind in 0usize..3) {
            let kind = [TaskKind::Order, TaskKind::NoiseFrames, TaskKind::SparseEvent][kind];
            let s = TaskSpec { seed, n_train: 2, n_test: 1, ..spec(kind) };
            for seq in generate(&s).unwrap().train {
                let back = decode_feature_file(&encode_feature_file(&seq).unwrap(), &seq.id).unwrap();
                for (a, b) in back.frames().iter().zip(seq.frames()) {
                    let bits = |t: &crate::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                    prop_assert_eq!(bits(a), bits(b));
                }
                prop_assert_eq!(back.label, seq.label);
            }
        }
    }
}
