use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rpop_core::world_model::Block;
use rpop_core::{TokenTrajectory, TrajectoryStore};

// Upper 1% point of the chi-square distribution with 9 degrees of freedom.
const CHI2_9_P01: f64 = 21.666;

fn episode(len: usize, k: usize, rng: &mut ChaCha8Rng) -> TokenTrajectory {
    TokenTrajectory::new(
        (0..len)
            .map(|t| Block {
                obs: (0..k).map(|_| rng.random_range(0..512)).collect(),
                action: rng.random_range(0..18),
                reward: [-1.0, 0.0, 1.0, 0.25][rng.random_range(0..4)],
                done: t + 1 == len && rng.random_bool(0.5),
            })
            .collect(),
    )
}

fn checksum(store: &TrajectoryStore) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: u64| {
        for b in v.to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
    };
    for e in store.episodes() {
        mix(e.id);
        mix(e.seed.unwrap_or(u64::MAX));
        for b in &e.blocks.blocks {
            b.obs.iter().for_each(|&z| mix(z as u64));
            mix(b.action as u64);
            mix(b.reward.to_bits());
            mix(b.done as u64);
        }
    }
    h
}

#[test]
fn thousand_episodes_survive_save_and_load() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = TrajectoryStore::new(4);
    for i in 0..1000 {
        let len = rng.random_range(1..30);
        store.append_episode(episode(len, 4, &mut rng), (i % 3 == 0).then_some(i)).unwrap();
    }
    let before = checksum(&store);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("episodes.traj.jsonl");
    store.save(&path).unwrap();
    let loaded = TrajectoryStore::load(&path).unwrap();
    assert_eq!(checksum(&loaded), before);
    assert_eq!(loaded, store);
    let again = dir.path().join("again.traj.jsonl");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn segments_are_uniform_over_starts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = TrajectoryStore::new(2);
    let a = store.append_episode(episode(10, 2, &mut rng), None).unwrap();
    store.append_episode(episode(10, 2, &mut rng), None).unwrap();
    assert_eq!(store.segment_count(6), 10);
    let draws = 10_000;
    let mut counts = [0usize; 10];
    for _ in 0..draws {
        let s = store.sample_segment(6, &mut rng).unwrap();
        assert_eq!(s.blocks.len(), 6);
        let cell = if s.episode_id == a { 0 } else { 5 } + s.start;
        counts[cell] += 1;
    }
    let first: usize = counts[..5].iter().sum();
    let sigma = (draws as f64 * 0.25).sqrt();
    assert!((first as f64 - draws as f64 / 2.0).abs() <= 3.0 * sigma, "{first}");
    let e = draws as f64 / 10.0;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    assert!(stat < CHI2_9_P01, "chi-square {stat}");
}

#[test]
fn short_episodes_are_never_sampled() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = TrajectoryStore::new(2);
    store.append_episode(episode(2, 2, &mut rng), None).unwrap();
    let long = store.append_episode(episode(7, 2, &mut rng), None).unwrap();
    for _ in 0..200 {
        assert_eq!(store.sample_segment(5, &mut rng).unwrap().episode_id, long);
    }
    assert!(store.sample_segment(8, &mut rng).is_err());
}

#[test]
fn corrupt_header_is_rejected() {
    let text = "{\"format\":\"something-else\",\"version\":1,\"K\":2}\n";
    assert!(TrajectoryStore::read_from(text.as_bytes()).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = TrajectoryStore::new(3);
    store.append_episode(episode(3, 3, &mut rng), Some(9)).unwrap();
    let mut buf = Vec::new();
    store.write_to(&mut buf).unwrap();
    let truncated = &buf[..buf.len() - 10];
    assert!(TrajectoryStore::read_from(truncated).is_err());
}

#[test]
fn invalid_episode_leaves_store_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = TrajectoryStore::new(3);
    store.append_episode(episode(3, 3, &mut rng), None).unwrap();
    let snapshot = store.clone();
    let mut bad = episode(3, 3, &mut rng);
    bad.blocks[0].done = true;
    assert!(store.append_episode(bad, None).is_err());
    assert!(store.append_episode(episode(2, 4, &mut rng), None).is_err());
    assert_eq!(store, snapshot);
}
