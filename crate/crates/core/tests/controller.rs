use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rpop_core::controller::{
    lambda_returns, log_softmax, policy_loss, sample_action, sample_logits, value_loss, PolicyStep,
    ReturnInputs,
};

// Upper 1% point of the chi-square distribution with 17 degrees of freedom.
const CHI2_17_P01: f64 = 33.409;

fn chi_square(counts: &[usize], expected: &[f64]) -> f64 {
    counts.iter().zip(expected).map(|(&c, &e)| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn full_exploration_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits: Vec<f64> = (0..18).map(|i| i as f64).collect();
    let draws = 100_000;
    let mut counts = [0usize; 18];
    for _ in 0..draws {
        counts[sample_action(&logits, 0.5, 1.0, &mut rng).unwrap()] += 1;
    }
    let stat = chi_square(&counts, &[draws as f64 / 18.0; 18]);
    assert!(stat < CHI2_17_P01, "chi-square {stat}");
}

#[test]
fn tempered_frequencies_track_softmax() {
    let logits = [0.0, 1.0, 2.0];
    let temperature = 0.5;
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let probs: Vec<f64> = log_softmax(&scaled).iter().map(|l| l.exp()).collect();
    let draws = 100_000;
    let mut counts = [0usize; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..draws {
        counts[sample_logits(&logits, temperature, &mut rng).unwrap()] += 1;
    }
    for (c, p) in counts.iter().zip(&probs) {
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{c} vs {p}");
    }
}

#[test]
fn zero_temperature_is_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(sample_logits(&[0.1, 2.0, 2.0, -1.0], 0.0, &mut rng).unwrap(), 1);
}

#[test]
fn three_step_returns_match_hand_expansion() {
    let (g, l) = (0.9, 0.5);
    let r = [1.0, -1.0, 0.5];
    let v = [0.2, 0.4, -0.3, 0.7];
    let g3 = r[2] + g * v[3];
    let g2 = r[1] + g * ((1.0 - l) * v[2] + l * g3);
    let g1 = r[0] + g * ((1.0 - l) * v[1] + l * g2);
    let mut inputs = ReturnInputs::new(r.to_vec(), vec![false; 3], v.to_vec());
    inputs.gamma = g;
    inputs.lambda = l;
    let got = lambda_returns(&inputs).unwrap();
    for (a, b) in got.iter().zip([g1, g2, g3]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(value_loss(&v[..3], &got).unwrap(), {
        v.iter().zip(&got).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 3.0
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn policy_loss_ignores_logit_shift(
        logits in prop::collection::vec(-5.0f64..5.0, 2..18),
        shift in -50.0f64..50.0,
        ret in -3.0f64..3.0,
        baseline in -3.0f64..3.0,
    ) {
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let a = PolicyStep::new(log_softmax(&logits), 0, ret, baseline);
        let b = PolicyStep::new(log_softmax(&shifted), 0, ret, baseline);
        let (la, lb) = (policy_loss(&[a]).unwrap(), policy_loss(&[b]).unwrap());
        prop_assert!((la - lb).abs() < 1e-9);
    }

    #[test]
    fn terminal_masks_future(
        rewards in prop::collection::vec(-1.0f64..1.0, 2..12),
        cut in 0usize..11,
        noise in -10.0f64..10.0,
    ) {
        let h = rewards.len();
        let cut = cut % h;
        let mut dones = vec![false; h];
        dones[cut] = true;
        let values: Vec<f64> = (0..=h).map(|i| i as f64 * 0.1).collect();
        let base = lambda_returns(&ReturnInputs::new(rewards.clone(), dones.clone(), values.clone())).unwrap();
        let mut later = rewards.clone();
        let mut later_values = values.clone();
        for r in later.iter_mut().skip(cut + 1) {
            *r += noise;
        }
        for v in later_values.iter_mut().skip(cut + 1) {
            *v += noise;
        }
        let moved = lambda_returns(&ReturnInputs::new(later, dones, later_values)).unwrap();
        for t in 0..=cut {
            prop_assert!((base[t] - moved[t]).abs() < 1e-12);
        }
    }
}

#[test]
fn unnormalized_distribution_is_rejected() {
    let step = PolicyStep::new(vec![0.5f64.ln(), 0.6f64.ln()], 0, 1.0, 0.0);
    assert!(policy_loss(&[step]).is_err());
}
