mod common;

use ar_core::scholar::{ReplayPlan, ReplayStrategy, Scholar, ScholarConfig};
use ar_core::Error;
use common::{nearest_pattern, pattern_task};

fn toy_config(seed: u64) -> ScholarConfig {
    ScholarConfig {
        k: 9,
        initial_epochs: 40,
        replay_epochs: 40,
        seed,
        ..ScholarConfig::default()
    }
}

fn fitted(classes: &[usize], seed: u64) -> Scholar {
    let mut s = Scholar::new(toy_config(seed), 16, 4).unwrap();
    s.initial_fit(&pattern_task(classes, 100, seed)).unwrap();
    s
}

#[test]
fn separable_toy_is_classified() {
    for seed in 0..3 {
        let s = fitted(&[0, 2, 3], seed);
        let test = pattern_task(&[0, 2, 3], 100, seed + 100);
        let acc = s.evaluate(&test).unwrap();
        assert!(acc >= 0.99, "seed {seed}: {acc}");
    }
}

#[test]
fn classify_is_deterministic_and_checks_dimension() {
    let s = fitted(&[0, 2], 1);
    let x = pattern_task(&[0], 1, 7);
    let row = x.images.row(0);
    assert_eq!(s.classify(row).unwrap(), s.classify(row).unwrap());
    assert!(matches!(
        s.classify(&row[..15]),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn misuse_is_refused() {
    let task = pattern_task(&[0, 2], 20, 0);
    let mut s = Scholar::new(toy_config(0), 16, 4).unwrap();
    assert!(matches!(
        s.adiabatic_update(&task, &ReplayPlan::constant_time(100)),
        Err(Error::NotInitialized)
    ));
    assert!(matches!(
        s.classify(task.images.row(0)),
        Err(Error::NotInitialized)
    ));
    s.initial_fit(&task).unwrap();
    assert!(matches!(s.initial_fit(&task), Err(Error::SecondInitialFit)));
}

#[test]
fn checkpoint_round_trip_classifies_identically() {
    let mut s = fitted(&[0, 2], 3);
    s.adiabatic_update(&pattern_task(&[3], 50, 4), &ReplayPlan::constant_time(100))
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scholar.ckpt");
    s.save(&path).unwrap();
    let back = Scholar::load(&path).unwrap();
    assert_eq!(back, s);
    let probe = pattern_task(&[0, 1, 2, 3], 25, 5);
    let a = s
        .gmm()
        .unwrap()
        .batch_responsibilities(&probe.images)
        .unwrap();
    let b = back
        .gmm()
        .unwrap()
        .batch_responsibilities(&probe.images)
        .unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(
        s.classify_batch(&probe.images).unwrap(),
        back.classify_batch(&probe.images).unwrap()
    );
    assert_eq!(back.stages(), 2);
}

#[test]
fn constant_time_generates_one_variant_per_new_sample() {
    let mut s = fitted(&[0, 2], 6);
    for (class, n) in [(1usize, 37usize), (3, 120)] {
        let log = s
            .adiabatic_update(
                &pattern_task(&[class], n, 9),
                &ReplayPlan::constant_time(100),
            )
            .unwrap();
        assert_eq!(log.generated, n);
    }
}

#[test]
fn zero_ratio_replays_nothing() {
    let mut s = fitted(&[0, 2], 6);
    let plan = ReplayPlan {
        strategy: ReplayStrategy::Ratio(0.0),
        batch: 100,
    };
    let log = s
        .adiabatic_update(&pattern_task(&[3], 50, 9), &plan)
        .unwrap();
    assert_eq!(log.generated, 0);
}

#[test]
fn variants_resemble_the_queried_class() {
    let s = fitted(&[0, 2, 3], 2);
    let replay = s
        .generate_replay(&pattern_task(&[0], 50, 11).images, 200, 2)
        .unwrap();
    let near_a = replay
        .images
        .rows()
        .filter(|x| nearest_pattern(x) == 0)
        .count();
    assert!(near_a as f64 >= 0.95 * 200.0, "{near_a}/200");
    // self-labels agree with the generating class
    let labeled_a = replay.labels.as_slice().iter().filter(|&&y| y == 0).count();
    assert!(labeled_a as f64 >= 0.95 * 200.0, "{labeled_a}/200");
}

#[test]
fn update_leaves_dissimilar_components_alone() {
    // A = class 0 and C = class 2 are far apart; the new class B = 1 extends A
    let mut s = fitted(&[0, 2], 4);
    let before = s.gmm().unwrap().clone();
    // a component belongs to the class whose samples pick it most often
    let seen = pattern_task(&[0, 2], 100, 4);
    let mut votes = vec![[0usize; 4]; 9];
    for (x, &y) in seen.images.rows().zip(seen.labels.as_slice()) {
        votes[before.best_matching_component(x).unwrap()][y] += 1;
    }
    let owner: Vec<Option<usize>> = votes
        .iter()
        .map(|v| {
            let best = (0..4).max_by_key(|&c| v[c]).unwrap();
            (v[best] > 0).then_some(best)
        })
        .collect();
    assert!(
        owner.contains(&Some(0)) && owner.contains(&Some(2)),
        "{owner:?}"
    );
    s.adiabatic_update(&pattern_task(&[1], 100, 8), &ReplayPlan::constant_time(100))
        .unwrap();
    let after = s.gmm().unwrap();
    let moved = |class: usize| -> f64 {
        (0..9)
            .filter(|&k| owner[k] == Some(class))
            .map(|k| {
                before
                    .centroid(k)
                    .iter()
                    .zip(after.centroid(k))
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    };
    let (a, c) = (moved(0), moved(2));
    assert!(c < 0.1 * a, "A-matched moved {a}, C-matched moved {c}");
}
