use super::*;
use crate::geometry::{CameraPose, Intrinsics, RigidTransform, UnitQuaternion, Vec3};
use crate::synth::{sample_trajectory, SynthConfig};
use crate::tagging::MotionTag;
use rand::Rng;

fn synth(n: usize, frames: usize) -> Vec<Trajectory> {
    let cfg = SynthConfig { frames, ..Default::default() };
    (0..n as u64).map(|s| sample_trajectory(&cfg, s).unwrap().trajectory).collect()
}

fn set(labels: &[AtomicLabel]) -> BTreeSet<AtomicLabel> {
    labels.iter().copied().collect()
}

fn gaussian_rows(rng: &mut impl Rng, n: usize, mean: &[f64], chol: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let d = mean.len();
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            let x = chol * z;
            (0..d).map(|k| x[k] + mean[k]).collect()
        })
        .collect()
}

#[test]
fn f1_self_comparison_is_one() {
    let trajs = synth(40, 30);
    let th = TagThresholds::default();
    let sets: Vec<_> = trajs.iter().map(|t| label_set(&tag_segments(t, &th).unwrap())).collect();
    let r = tag_f1(&trajs, &sets, &th).unwrap();
    assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
}

#[test]
fn static_generations_recall_no_motion() {
    let still = set(&[AtomicLabel::Still]);
    let moving = vec![set(&[AtomicLabel::Right, AtomicLabel::YawLeft]), set(&[AtomicLabel::Forward])];
    let r = tag_f1_from_sets(&[still.clone(), still], &moving).unwrap();
    assert_eq!(r.recall, 0.0);
    assert_eq!(r.f1, 0.0);
    for l in [AtomicLabel::Right, AtomicLabel::YawLeft, AtomicLabel::Forward] {
        assert_eq!(r.per_label[&l].recall(), 0.0);
    }
}

#[test]
fn half_match_corpus_counts() {
    let right = set(&[AtomicLabel::Right]);
    let mut generated = vec![right.clone(); 50];
    generated.extend(vec![set(&[AtomicLabel::PitchUp]); 50]);
    let reference = vec![right; 100];
    // 50 true positives, 50 false positives (pitch_up), 50 false negatives (right).
    let r = tag_f1_from_sets(&generated, &reference).unwrap();
    assert_eq!(r.per_label[&AtomicLabel::Right], LabelCounts { tp: 50, fp: 0, fn_: 50 });
    assert_eq!(r.per_label[&AtomicLabel::PitchUp], LabelCounts { tp: 0, fp: 50, fn_: 0 });
    assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
}

#[test]
fn f1_input_errors() {
    assert!(tag_f1_from_sets(&[], &[]).is_err());
    assert!(tag_f1_from_sets(&[set(&[AtomicLabel::Up])], &[]).is_err());
}

#[test]
fn static_trajectory_has_zero_velocity_stats() {
    let t = Trajectory::from_poses(vec![CameraPose::identity(Intrinsics::default()); 10]).unwrap();
    let f = featurize(&t).unwrap();
    assert_eq!(f.len(), FEATURE_DIM);
    assert!(f[..22].iter().all(|&v| v == 0.0));
    let still: MotionTag = MotionTag::STILL;
    assert_eq!(still.translation_index(), 13);
}

#[test]
fn features_are_rigid_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in synth(10, 40) {
        let base = featurize(&t).unwrap();
        for _ in 0..10 {
            let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let g = RigidTransform {
                rotation: UnitQuaternion::exp(&(axis * 2.0)),
                translation: Vec3::new(rng.random_range(-50.0..50.0), 3.0, -7.0),
            };
            let moved = featurize(&g.apply_trajectory(&t)).unwrap();
            for (a, b) in base.iter().zip(&moved) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn small_perturbations_move_features_little() {
    let cfg = SynthConfig { frames: 40, pool: MotionTag::all().filter(|t| t.has_translation()).collect(), ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..20 {
        let t = sample_trajectory(&cfg, seed).unwrap().trajectory;
        let base = featurize(&t).unwrap();
        let poses: Vec<CameraPose> = t
            .poses()
            .iter()
            .map(|p| {
                let d = Vec3::new(rng.random_range(-1e-6..1e-6), rng.random_range(-1e-6..1e-6), rng.random_range(-1e-6..1e-6));
                CameraPose { translation: p.translation + d, rotation: p.rotation.mul(&UnitQuaternion::exp(&(d * 0.5))), ..*p }
            })
            .collect();
        let moved = featurize(&Trajectory::new(poses, t.fps()).unwrap()).unwrap();
        let change = base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(change < 1e-3, "seed {seed}: {change}");
    }
}

#[test]
fn fid_self_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let chol = DMatrix::from_fn(6, 6, |i, j| if i >= j { rng.random_range(0.1..1.0) } else { 0.0 });
    let a = FeatureSet::from_rows(&gaussian_rows(&mut rng, 200, &[0.0; 6], &chol), "t").unwrap();
    let b = FeatureSet::from_rows(&gaussian_rows(&mut rng, 150, &[0.5; 6], &chol), "t").unwrap();
    assert!(fid(&a, &a).unwrap() <= 1e-6);
    let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
    assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
    assert!(ab > 0.0);
}

#[test]
fn fid_gaussian_offset_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 4;
    // Keeps the sampling noise of the mean difference near 0.6% of delta^2
    // (one sigma) so the bound tests the distance, not the sampler.
    let chol = DMatrix::from_fn(d, d, |i, j| if i >= j { rng.random_range(0.05..0.2) } else { 0.0 });
    let delta = 2.0;
    let dir = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0f64)).normalize();
    let mean_b: Vec<f64> = dir.iter().map(|v| v * delta).collect();
    let a = FeatureSet::from_rows(&gaussian_rows(&mut rng, 5000, &vec![0.0; d], &chol), "t").unwrap();
    let b = FeatureSet::from_rows(&gaussian_rows(&mut rng, 5000, &mean_b, &chol), "t").unwrap();
    let got = fid(&a, &b).unwrap();
    let expected = delta * delta;
    assert!((got - expected).abs() <= 0.02 * expected, "{got}");
}

#[test]
fn fid_is_non_negative_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let rows = |rng: &mut ChaCha8Rng, n| (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<Vec<f64>>>();
        let a = FeatureSet::from_rows(&rows(&mut rng, 8), "t").unwrap();
        let b = FeatureSet::from_rows(&rows(&mut rng, 8), "t").unwrap();
        assert!(fid(&a, &b).unwrap() >= 0.0);
    }
}

#[test]
fn fid_needs_d_plus_one_samples() {
    let a = FeatureSet::from_rows(&vec![vec![0.0; 4]; 4], "t").unwrap();
    match fid(&a, &a) {
        Err(Error::TooFewSamples { required: 5, actual: 4, .. }) => {}
        other => panic!("{other:?}"),
    }
    let b = FeatureSet::from_rows(&vec![vec![0.0; 4]; 5], "other").unwrap();
    assert!(fid(&b, &b.clone()).is_ok());
    let c = FeatureSet::from_rows(&vec![vec![0.0; 4]; 5], "t").unwrap();
    assert!(fid(&b, &c).is_err());
}

#[test]
fn coverage_of_self_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let x = FeatureSet::from_rows(&rows, "t").unwrap();
    for k in [1, 5, 20, 59] {
        assert_eq!(coverage(&x, &x, k).unwrap(), 1.0);
    }
}

#[test]
fn collapsed_generation_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows: Vec<Vec<f64>> = (0..100).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let real = FeatureSet::from_rows(&rows, "t").unwrap();
    let gen = FeatureSet::from_rows(&vec![rows[0].clone(); 10], "t").unwrap();
    let k = 5;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut expected = 0;
    for i in 0..rows.len() {
        let mut ds: Vec<f64> = (0..rows.len()).filter(|&j| j != i).map(|j| dist(&rows[i], &rows[j])).collect();
        ds.sort_by(f64::total_cmp);
        if dist(&rows[i], &rows[0]) <= ds[k - 1] {
            expected += 1;
        }
    }
    let got = coverage(&real, &gen, k).unwrap();
    assert_eq!(got, expected as f64 / 100.0);
    assert!(got < 0.2);
}

#[test]
fn coverage_ignores_order_and_checks_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows = |rng: &mut ChaCha8Rng, n| (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<Vec<f64>>>();
    let r = rows(&mut rng, 50);
    let g = rows(&mut rng, 40);
    let base = coverage(&FeatureSet::from_rows(&r, "t").unwrap(), &FeatureSet::from_rows(&g, "t").unwrap(), 5).unwrap();
    let (mut r2, mut g2) = (r.clone(), g.clone());
    r2.reverse();
    g2.rotate_left(7);
    let shuffled = coverage(&FeatureSet::from_rows(&r2, "t").unwrap(), &FeatureSet::from_rows(&g2, "t").unwrap(), 5).unwrap();
    assert_eq!(base, shuffled);
    let tiny = FeatureSet::from_rows(&r[..5], "t").unwrap();
    assert!(coverage(&tiny, &tiny, 5).is_err());
}

#[test]
fn feature_set_from_trajectories() {
    let fs = FeatureSet::from_trajectories(&synth(5, 20)).unwrap();
    assert_eq!((fs.len(), fs.dim()), (5, FEATURE_DIM));
    assert_eq!(fs.featurizer, FEATURIZER_ID);
}
