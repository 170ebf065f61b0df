use bevtrack::check::{randomized_flow, tiny_model_config};
use bevtrack::data::{apply_draw, generate_sequence, AugmentConfig, Archetype, MotionPattern, SceneParams, Sequence};
use bevtrack::eval::{precision_auc, success_auc};
use bevtrack::flow::{Flow, FlowConfig};
use bevtrack::geom::{apply_offsets, relative_pose, Box3D, MotionOffsets, PointCloud};
use bevtrack::loss::{fixed_prior_nll, rle_loss, PredictionDistribution, Prior, RegressionTarget};
use bevtrack::model::Network;
use bevtrack::tensor::ParamSet;
use bevtrack::tracker::{track_sequence, Trained};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn zero_flow() -> (Flow, ParamSet<f64>) {
    let mut params = ParamSet::new();
    let flow = Flow::new(&mut params, "flow", &FlowConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    (flow, params.cast())
}

fn arr4() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-2.0..2.0f64)
}

fn sigma4() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(0.05..3.0f64)
}

#[test]
fn augmentation_labels_track_the_transformed_box() {
    let cfg = AugmentConfig {
        flip_prob: 0.5,
        rotation_max_deg: 45.0,
        translation_std: 1.0,
        shared_translation_std: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let empty = PointCloud::default();
    let reference = Box3D::new([0.0; 3], [1.8, 4.5, 1.6], 0.0).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let off = MotionOffsets::new(
            rand::Rng::random_range(&mut rng, -2.0..2.0),
            rand::Rng::random_range(&mut rng, -2.0..2.0),
            rand::Rng::random_range(&mut rng, -0.3..0.3),
            rand::Rng::random_range(&mut rng, -0.5..0.5),
        );
        let draw = cfg.sample(&mut rng);
        let (_, _, label) = apply_draw(&empty, &empty, &off, &draw);
        let mut cur = apply_offsets(&reference, &off);
        if draw.flip {
            cur = cur.flipped_y();
        }
        let cur = cur
            .transformed(draw.rotation, [0.0; 3])
            .transformed(0.0, draw.translation)
            .transformed(0.0, draw.shared);
        let want = relative_pose(&reference, &cur).to_array();
        for (a, b) in label.to_array().iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-9, "worst label error {worst}");
}

#[test]
fn shared_shift_moves_both_clouds() {
    let cfg = AugmentConfig {
        flip_prob: 0.0,
        rotation_max_deg: 0.0,
        translation_std: 0.0,
        shared_translation_std: 0.5,
    };
    let prev = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
    let cur = PointCloud::new(vec![[1.0, 0.0, 0.0]]);
    let draw = cfg.sample(&mut ChaCha8Rng::seed_from_u64(2));
    let (p, c, o) = apply_draw(&prev, &cur, &MotionOffsets::new(1.0, 0.0, 0.0, 0.0), &draw);
    assert_eq!(draw.shared[2], 0.0);
    assert!((c.points[0][0] - p.points[0][0] - 1.0).abs() < 1e-12);
    assert!((o.dx - 1.0 - draw.shared[0]).abs() < 1e-12 && (o.dy - draw.shared[1]).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_are_permutation_invariant(
        ious in prop::collection::vec(0.0..=1.0f64, 1..60),
        dists in prop::collection::vec(0.0..4.0f64, 1..60),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut a, mut b) = (ious.clone(), dists.clone());
        a.shuffle(&mut rng);
        b.shuffle(&mut rng);
        prop_assert!((success_auc(&a).unwrap() - success_auc(&ious).unwrap()).abs() < 1e-12);
        prop_assert!((precision_auc(&b).unwrap() - precision_auc(&dists).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_monotone(
        ious in prop::collection::vec(0.0..=1.0f64, 1..60),
        dists in prop::collection::vec(0.0..4.0f64, 1..60),
        i in any::<prop::sample::Index>(),
        bump in 0.0..1.0f64,
    ) {
        let mut better = ious.clone();
        let k = i.index(better.len());
        better[k] = (better[k] + bump).min(1.0);
        prop_assert!(success_auc(&better).unwrap() >= success_auc(&ious).unwrap());
        let mut closer = dists.clone();
        let k = i.index(closer.len());
        closer[k] *= 1.0 - bump;
        prop_assert!(precision_auc(&closer).unwrap() >= precision_auc(&dists).unwrap());
    }

    #[test]
    fn flow_inverse_roundtrips(seed in 0u64..1000, z in prop::array::uniform4(-4.0..4.0f64)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (flow, params) = randomized_flow(&mut rng, &FlowConfig::default(), 0.3, (0.5, 2.0));
        let (x, _) = flow.forward(&params, z).unwrap();
        let back = flow.inverse(&params, x).unwrap();
        for (a, b) in back.iter().zip(z) {
            prop_assert!((a - b).abs() < 1e-6, "{back:?} vs {z:?}");
        }
    }

    #[test]
    fn rle_is_smallest_at_the_target(u in arr4(), sigma in sigma4(), delta in arr4(), laplace in any::<bool>()) {
        prop_assume!(delta.iter().any(|d| d.abs() > 1e-3));
        let (flow, params) = zero_flow();
        let prior = if laplace { Prior::Laplacian } else { Prior::Gaussian };
        let tgt = RegressionTarget { u_hat: u };
        let at = rle_loss(&PredictionDistribution::new(u, sigma).unwrap(), &tgt, &flow, &params, prior).unwrap();
        let off: [f64; 4] = std::array::from_fn(|i| u[i] + delta[i]);
        let away = rle_loss(&PredictionDistribution::new(off, sigma).unwrap(), &tgt, &flow, &params, prior).unwrap();
        prop_assert!(away.total > at.total);
    }

    #[test]
    fn losses_ignore_dimension_order(u in arr4(), t in arr4(), sigma in sigma4(), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
        let (flow, params) = zero_flow();
        let p = |a: [f64; 4]| -> [f64; 4] { std::array::from_fn(|i| a[perm[i]]) };
        for prior in [Prior::Gaussian, Prior::Laplacian] {
            let base = PredictionDistribution::new(u, sigma).unwrap();
            let permuted = PredictionDistribution::new(p(u), p(sigma)).unwrap();
            let (ta, tb) = (RegressionTarget { u_hat: t }, RegressionTarget { u_hat: p(t) });
            let a = rle_loss(&base, &ta, &flow, &params, prior).unwrap().total;
            let b = rle_loss(&permuted, &tb, &flow, &params, prior).unwrap().total;
            prop_assert!((a - b).abs() < 1e-10);
            let a = fixed_prior_nll(&base, &ta, prior, true).unwrap().total;
            let b = fixed_prior_nll(&permuted, &tb, prior, true).unwrap().total;
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_flow_rle_is_prior_plus_normal_term(u in arr4(), t in arr4(), sigma in sigma4(), laplace in any::<bool>()) {
        let (flow, params) = zero_flow();
        let prior = if laplace { Prior::Laplacian } else { Prior::Gaussian };
        let pred = PredictionDistribution::new(u, sigma).unwrap();
        let tgt = RegressionTarget { u_hat: t };
        let rle = rle_loss(&pred, &tgt, &flow, &params, prior).unwrap();
        let nll = fixed_prior_nll(&pred, &tgt, prior, true).unwrap();
        let normal: f64 = (0..4).map(|i| Prior::Gaussian.nll((t[i] - u[i]) / sigma[i])).sum();
        prop_assert!((rle.total - nll.total - normal).abs() < 1e-9);
        prop_assert!((rle.flow_nll - normal).abs() < 1e-9);
    }
}

fn small_sequence(seed: u64) -> Sequence {
    let mut p = SceneParams::new(Archetype::Car, MotionPattern::Turning, seed);
    p.frames = 6;
    generate_sequence(&p).unwrap()
}

fn tiny_network() -> (Network, ParamSet<f32>) {
    Network::new(&tiny_model_config(), 5).unwrap()
}

#[test]
fn tracker_never_reads_future_frames_or_later_ground_truth() {
    let (net, params) = tiny_network();
    let model = Trained { net: &net, params: &params };
    let seq = small_sequence(4);
    let base = track_sequence(&seq, &model, &net.config().voxel).unwrap();

    let mut blind = seq.clone();
    for f in blind.frames.iter_mut().skip(1) {
        f.gt = Box3D::new([100.0, -50.0, 3.0], [1.0, 1.0, 1.0], 1.0).unwrap();
    }
    assert_eq!(track_sequence(&blind, &model, &net.config().voxel).unwrap(), base);

    let cut = 3;
    let mut future = seq.clone();
    for f in future.frames.iter_mut().skip(cut + 1) {
        f.cloud = PointCloud::new(vec![[0.5, 0.5, 0.0]; 30]);
    }
    let changed = track_sequence(&future, &model, &net.config().voxel).unwrap();
    assert_eq!(&changed[..=cut], &base[..=cut]);
}

#[test]
fn tracker_is_equivariant_to_rigid_world_motion() {
    let (net, params) = tiny_network();
    let model = Trained { net: &net, params: &params };
    for (seed, yaw, shift) in [(1, 0.7, [12.0, -3.0, 0.2]), (2, -2.1, [-40.0, 25.0, -0.4]), (3, 3.0, [0.5, 0.5, 0.0])] {
        let seq = small_sequence(seed);
        let base = track_sequence(&seq, &model, &net.config().voxel).unwrap();
        let mut moved = seq.clone();
        for f in &mut moved.frames {
            f.cloud = f.cloud.transformed(yaw, shift);
            f.gt = f.gt.transformed(yaw, shift);
        }
        let out = track_sequence(&moved, &model, &net.config().voxel).unwrap();
        for (a, b) in base.iter().zip(&out) {
            let want = a.bx.transformed(yaw, shift);
            let err = want.center_distance(&b.bx) + bevtrack::geom::normalize_angle(want.yaw - b.bx.yaw).abs();
            assert!(err < 1e-4, "seed {seed} frame {}: {err}", a.frame);
        }
    }
}
