use lumisr_core::render::{generate_olat, preset};
use lumisr_core::scan::OlatScan;
use lumisr_core::{LightStage, SelectMode, Vec3};
use lumisr_neural::model::{encode, pool, pool_weights, FeaturePyramid, Net};
use lumisr_neural::ops::Tensor;
use lumisr_neural::train::{mean, train, TrainOptions, Trainer};
use lumisr_neural::{render_neural, Ablation, EncodedScan, ModelConfig, ModelParams, RenderMode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_scan(subdivision: u32, res: usize) -> OlatScan {
    let stage = LightStage::build(subdivision, &[]).unwrap();
    generate_olat(&preset("sphere_plane", 0).unwrap(), &stage, res, res).unwrap()
}

fn small_config(scan: &OlatScan) -> ModelConfig {
    let mut c = ModelConfig::desk(scan.stage());
    c.input_res = scan.width();
    c.crop = scan.width();
    c.levels = 3;
    c.base_channels = 8;
    c.max_channels = 16;
    c
}

#[test]
fn pooling_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pyrs: Vec<FeaturePyramid<f32>> = (0..4)
        .map(|_| {
            vec![
                Tensor::from_vec(2, 4, 4, (0..32).map(|_| rng.random_range(-3.0..3.0)).collect()),
                Tensor::from_vec(3, 2, 2, (0..12).map(|_| rng.random_range(-3.0..3.0)).collect()),
            ]
        })
        .collect();
    let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
    let refs: Vec<&FeaturePyramid<f32>> = pyrs.iter().collect();
    let pooled = pool(&refs, &w).unwrap();
    for level in 0..2 {
        for j in 0..pooled[level].data.len() {
            let mut want = 0.0f64;
            for (p, wi) in pyrs.iter().zip(&w) {
                want += p[level].data[j] as f64 * wi;
            }
            assert!((pooled[level].data[j] as f64 - want).abs() < 1e-6);
        }
    }
}

#[test]
fn avg_pool_weights_are_uniform() {
    let scan = small_scan(0, 16);
    let c = small_config(&scan).ablation(Ablation::AvgPool);
    let w = pool_weights(&c, &[0.99, 0.5, 0.1], 30.0);
    assert_eq!(w, vec![1.0 / 3.0; 3]);
}

#[test]
fn member_order_does_not_change_output() {
    let scan = small_scan(1, 32);
    let c = small_config(&scan);
    let p: ModelParams<f32> = ModelParams::init(&c).unwrap();
    let lay = p.layout();
    let q = Vec3::new(0.3, -0.2, 0.9).normalize();
    let set = scan.stage().select_active_set(&q, c.k, c.k, 0, SelectMode::Eval { holdout: None }).unwrap();
    let pyr: Vec<(usize, FeaturePyramid<f32>)> = set
        .indices
        .iter()
        .map(|&i| {
            let x = lumisr_neural::model::input_tensor(scan.image(i), &scan.stage().lights()[i]);
            (i, encode(&p, &lay, Net::Full, &x, false).0)
        })
        .collect();
    let pooled_from = |order: &[usize]| {
        // callers sort members by light index before pooling
        let mut members: Vec<&(usize, FeaturePyramid<f32>)> = order.iter().map(|&j| &pyr[j]).collect();
        members.sort_by_key(|m| m.0);
        let dots: Vec<f64> = members.iter().map(|m| scan.stage().lights()[m.0].dot(&q)).collect();
        let w = pool_weights(&c, &dots, p.sharpness());
        let refs: Vec<&FeaturePyramid<f32>> = members.iter().map(|m| &m.1).collect();
        pool(&refs, &w).unwrap()
    };
    let a = pooled_from(&(0..pyr.len()).collect::<Vec<_>>());
    let b = pooled_from(&(0..pyr.len()).rev().collect::<Vec<_>>());
    assert_eq!(a, b);
}

#[test]
fn eval_is_deterministic_across_thread_counts() {
    let scan = small_scan(1, 32);
    let c = small_config(&scan);
    let p: ModelParams<f32> = ModelParams::init(&c).unwrap();
    let q = Vec3::new(-0.4, 0.1, 0.8).normalize();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| render_neural(&p, &scan, &q, RenderMode::Eval, None).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(1));
    let cached = EncodedScan::new(&p, &scan).unwrap();
    assert_eq!(cached.render(&p, &scan, &q, RenderMode::Eval, None).unwrap(), one);
    // untrained output is finite and strictly inside (0, 1)
    assert!(one.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn holdout_uses_nearest_other_lights() {
    let scan = small_scan(1, 32);
    let c = small_config(&scan);
    let p: ModelParams<f32> = ModelParams::init(&c).unwrap();
    let i = 7;
    let q = scan.stage().lights()[i];
    let with = render_neural(&p, &scan, &q, RenderMode::Eval, Some(i)).unwrap();
    // dropping the held-out image from the scan changes nothing
    let mut images = scan.images().to_vec();
    images[i] = lumisr_core::Image::zeros(32, 32, 3);
    let blanked = OlatScan::new(scan.stage().clone(), images, scan.mask().clone(), scan.meta.clone()).unwrap();
    assert_eq!(render_neural(&p, &blanked, &q, RenderMode::Eval, Some(i)).unwrap(), with);
    assert_ne!(render_neural(&p, &scan, &q, RenderMode::Eval, None).unwrap(), with);
}

#[test]
fn zero_learning_rate_keeps_params() {
    let scan = small_scan(0, 16);
    let c = small_config(&scan);
    let scans = [scan];
    let mut t = Trainer::new(&scans, &c, TrainOptions { steps: 1, lr: 0.0, progressive: false }).unwrap();
    let before = t.params().clone();
    t.step().unwrap();
    assert_eq!(t.params(), &before);
    assert!(t.adam().m.values.iter().flatten().any(|&v| v != 0.0));
    assert_eq!(t.adam().t.iter().max(), Some(&1));
}

#[test]
fn training_is_reproducible() {
    let scan = small_scan(0, 16);
    let c = small_config(&scan);
    let scans = [scan];
    let opts = TrainOptions { steps: 30, lr: 1e-3, progressive: true };
    let a = train(&scans, &c, opts.clone()).unwrap();
    let b = train(&scans, &c, opts).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.losses, b.losses);
    assert!(a.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn naive_neighbors_selection_ignores_seed() {
    let stage = LightStage::build(2, &[]).unwrap();
    let q = stage.lights()[40];
    let sets: Vec<Vec<usize>> = (0..5)
        .map(|seed| stage.select_active_set(&q, 10, 5, seed, SelectMode::Eval { holdout: Some(40) }).unwrap().indices)
        .collect();
    assert!(sets.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn smoke_training_reduces_loss() {
    let scan = small_scan(0, 32);
    assert_eq!(scan.stage().n(), 12);
    let c = small_config(&scan);
    let out = train(&[scan], &c, TrainOptions { steps: 2000, lr: 1e-3, progressive: false }).unwrap();
    let l = &out.losses;
    let (first, last) = (mean(&l[..100]), mean(&l[l.len() - 100..]));
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn rejects_mismatched_scans() {
    let scan = small_scan(0, 16);
    let mut c = small_config(&scan);
    c.input_res = 32;
    c.crop = 32;
    assert!(train(&[scan.clone()], &c, TrainOptions::default()).is_err());
    let mut c = small_config(&scan);
    c.m = 20;
    assert!(train(&[scan], &c, TrainOptions::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outputs_stay_in_unit_interval(seed in 0u64..1000, scale in 0.1f32..100.0) {
        let mut c = ModelConfig::desk(&LightStage::build(1, &[]).unwrap());
        c.input_res = 16;
        c.crop = 16;
        c.levels = 2;
        c.base_channels = 4;
        c.max_channels = 8;
        c.seed = seed;
        let p: ModelParams<f32> = ModelParams::init(&c).unwrap();
        let lay = p.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_vec(6, 16, 16, (0..6 * 256).map(|_| rng.random_range(-scale..scale)).collect());
        let (pyr, _) = encode(&p, &lay, Net::Full, &x, false);
        prop_assert!(pyr.iter().all(|t| t.data.iter().all(|v| v.is_finite())));
        let q = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize();
        let (out, _) = lumisr_neural::model::decode(&p, &lay, Net::Full, &pyr, &q, false).unwrap();
        prop_assert!(out.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
