use std::f64::consts::PI;

use blockwatch_core::scene::{
    init_scene, los_status, paths_for_user, render, step, BaseStation, Blocker, CountRange, LinkStatus, Rect,
    ScenarioConfig, SceneState, User, Vec2, LIGHT_SPEED,
};
use blockwatch_core::wireless::OfdmConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Samples the open segment at `n` interior points and tests each against
/// every blocker rectangle.
fn sampled_los_n(s: &SceneState, user: usize, n: usize) -> LinkStatus {
    let a = s.bs.position;
    let b = s.users[user].position;
    let hit = (0..n).any(|i| {
        let t = (i as f64 + 0.5) / n as f64;
        let p = Vec2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
        s.blockers.iter().any(|blk| {
            (p.x - blk.center.x).abs() < blk.half_extents.x && (p.y - blk.center.y).abs() < blk.half_extents.y
        })
    });
    LinkStatus::from_blocked(hit)
}

fn sampled_los(s: &SceneState, user: usize) -> LinkStatus {
    sampled_los_n(s, user, 1000)
}

fn random_scene(rng: &mut ChaCha8Rng) -> SceneState {
    let bounds = Rect { min: Vec2::new(0.0, 0.0), max: Vec2::new(60.0, 20.0) };
    let pt = |rng: &mut ChaCha8Rng| Vec2::new(rng.random_range(0.0..60.0), rng.random_range(0.0..20.0));
    let users = (0..3).map(|id| User { id, position: pt(rng), velocity: Vec2::default() }).collect();
    let blockers = (0..rng.random_range(0..4))
        .map(|_| Blocker {
            center: pt(rng),
            half_extents: Vec2::new(rng.random_range(0.5..6.0), rng.random_range(0.5..3.0)),
            velocity: Vec2::default(),
        })
        .collect();
    SceneState {
        bs: BaseStation { position: pt(rng), boresight: PI / 2.0 },
        users,
        blockers,
        scatterers: vec![],
        bounds,
        time: 0.0,
    }
}

#[test]
fn los_matches_point_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut blocked, mut coarse_misses) = (0, 0);
    for _ in 0..10_000 {
        let s = random_scene(&mut rng);
        for u in 0..s.users.len() {
            let fast = los_status(&s, u).unwrap();
            if fast != sampled_los(&s, u) {
                // A corner clip thinner than the sample spacing slips between
                // the coarse samples; a much finer pass must then agree.
                coarse_misses += 1;
                assert_eq!(fast, sampled_los_n(&s, u, 2_000_000));
            }
            blocked += fast.index();
        }
    }
    assert!(blocked > 1000, "too few blocked links ({blocked}) to exercise the test");
    assert!(coarse_misses <= 30, "{coarse_misses} disagreements with the 1000-point oracle");
}

#[test]
fn user_positions_are_uniform_along_the_lane() {
    let cfg = ScenarioConfig { users: CountRange { min: 1, max: 1 }, ..Default::default() };
    let mut xs: Vec<f64> = (0..10_000u64)
        .map(|seed| init_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().users[0].position.x / 60.0)
        .collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "KS statistic {ks}");
}

#[test]
fn stepping_backwards_retraces_the_path() {
    let cfg = ScenarioConfig {
        bounds: Rect { min: Vec2::new(-1e5, 0.0), max: Vec2::new(1e5, 20.0) },
        ..Default::default()
    };
    let start = init_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut s = start.clone();
    for _ in 0..1000 {
        s = step(&s, 0.1);
    }
    for u in &mut s.users {
        u.velocity = u.velocity * -1.0;
    }
    for b in &mut s.blockers {
        b.velocity = b.velocity * -1.0;
    }
    for _ in 0..1000 {
        s = step(&s, 0.1);
    }
    for (a, b) in start.users.iter().zip(&s.users) {
        assert!((a.position - b.position).norm() < 1e-9);
    }
    for (a, b) in start.blockers.iter().zip(&s.blockers) {
        assert!((a.center - b.center).norm() < 1e-9);
    }
}

#[test]
fn scattered_path_delays_match_geometry() {
    let s = SceneState {
        bs: BaseStation { position: Vec2::new(30.0, 0.5), boresight: PI / 2.0 },
        users: vec![User { id: 0, position: Vec2::new(12.0, 17.5), velocity: Vec2::default() }],
        blockers: vec![],
        scatterers: vec![Vec2::new(5.0, 9.0), Vec2::new(51.0, 3.0)],
        bounds: Rect { min: Vec2::new(0.0, 0.0), max: Vec2::new(60.0, 20.0) },
        time: 0.0,
    };
    let paths = paths_for_user(&s, 0, &ScenarioConfig::default(), &OfdmConfig::default()).unwrap();
    assert_eq!(paths.len(), 3);
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    for (p, sc) in paths[1..].iter().zip([(5.0, 9.0), (51.0, 3.0)]) {
        let expected = dist((30.0, 0.5), sc) + dist(sc, (12.0, 17.5));
        assert!((p.delay * LIGHT_SPEED - expected).abs() < 1e-12);
        let toward = (sc.1 - 0.5f64).atan2(sc.0 - 30.0);
        assert!((p.azimuth - (toward - PI / 2.0)).abs() < 1e-12);
    }
}

#[test]
fn one_pixel_move_shifts_the_disc_one_column() {
    let cfg = ScenarioConfig { users: CountRange { min: 1, max: 1 }, blockers: CountRange { min: 0, max: 0 }, ..Default::default() };
    let mut s = init_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    s.users[0].position = Vec2::new(20.3, 15.2);
    let (w, h) = (32, 16);
    let a = render(&s, w, h);
    s.users[0].position.x += 60.0 / w as f64;
    let b = render(&s, w, h);
    let red = |f: &blockwatch_core::scene::Frame, r: usize, c: usize| f.value(0, r, c);
    let mut lit = 0;
    for r in 0..h {
        for c in 0..w - 1 {
            assert_eq!(red(&a, r, c), red(&b, r, c + 1), "row {r} col {c}");
            lit += (red(&a, r, c) > 0.0) as usize;
        }
    }
    assert!(lit > 0);
}

#[test]
fn render_is_pure() {
    let cfg = ScenarioConfig::default();
    let s = init_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(render(&s, 32, 16), render(&s.clone(), 32, 16));
}

proptest! {
    #[test]
    fn los_is_translation_invariant(seed in 0u64..10_000, dx in -100.0f64..100.0, dy in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_scene(&mut rng);
        let mut t = s.clone();
        let shift = Vec2::new(dx, dy);
        t.bs.position = t.bs.position + shift;
        for u in &mut t.users { u.position = u.position + shift; }
        for b in &mut t.blockers { b.center = b.center + shift; }
        for u in 0..s.users.len() {
            prop_assert_eq!(los_status(&t, u).unwrap(), los_status(&s, u).unwrap());
        }
    }

    #[test]
    fn user_behind_a_blocker_is_nlos(depth in 0.5f64..10.0, offset in -1.9f64..1.9, half_w in 2.0f64..5.0) {
        let s = SceneState {
            bs: BaseStation { position: Vec2::new(0.0, 0.0), boresight: PI / 2.0 },
            users: vec![User { id: 0, position: Vec2::new(offset, 10.0 + 1.0 + depth), velocity: Vec2::default() }],
            blockers: vec![Blocker { center: Vec2::new(0.0, 10.0), half_extents: Vec2::new(half_w, 1.0), velocity: Vec2::default() }],
            scatterers: vec![],
            bounds: Rect { min: Vec2::new(-50.0, -50.0), max: Vec2::new(50.0, 50.0) },
            time: 0.0,
        };
        prop_assert_eq!(los_status(&s, 0).unwrap(), LinkStatus::Nlos);
    }

    #[test]
    fn user_outside_every_blocker_strip_is_los(x in -40.0f64..40.0, y in 1.0f64..40.0, bx in -40.0f64..40.0) {
        // The blocker's strip across x never reaches the segment when it sits
        // entirely on the far side of the user in y.
        let s = SceneState {
            bs: BaseStation { position: Vec2::new(0.0, 0.0), boresight: PI / 2.0 },
            users: vec![User { id: 0, position: Vec2::new(x, y), velocity: Vec2::default() }],
            blockers: vec![Blocker { center: Vec2::new(bx, y + 3.0), half_extents: Vec2::new(4.0, 1.0), velocity: Vec2::default() }],
            scatterers: vec![],
            bounds: Rect { min: Vec2::new(-50.0, -50.0), max: Vec2::new(50.0, 50.0) },
            time: 0.0,
        };
        prop_assert_eq!(los_status(&s, 0).unwrap(), LinkStatus::Los);
    }

    #[test]
    fn los_gain_falls_with_distance(d1 in 1.0f64..80.0, extra in 0.01f64..50.0) {
        let cfg = ScenarioConfig::default();
        let ofdm = OfdmConfig::default();
        let scene = |d: f64| SceneState {
            bs: BaseStation { position: Vec2::new(0.0, 0.0), boresight: PI / 2.0 },
            users: vec![User { id: 0, position: Vec2::new(0.0, d), velocity: Vec2::default() }],
            blockers: vec![],
            scatterers: vec![],
            bounds: Rect { min: Vec2::new(-200.0, -200.0), max: Vec2::new(200.0, 200.0) },
            time: 0.0,
        };
        let near = paths_for_user(&scene(d1), 0, &cfg, &ofdm).unwrap()[0].gain.norm();
        let far = paths_for_user(&scene(d1 + extra), 0, &cfg, &ofdm).unwrap()[0].gain.norm();
        prop_assert!(far < near);
    }
}
