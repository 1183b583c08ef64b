use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rpop_core::init::gaussian;
use rpop_core::tokenizer::{
    decode_tokens, encode_observation, quantize, render_latents, tokenizer_loss_value,
};
use rpop_core::{Codebook, LatentGrid};

fn codebook(n: usize, d: usize, seed: u64) -> Codebook {
    Codebook::new(gaussian(n, d, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))).unwrap()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantize_is_idempotent_and_nearest(seed in 0u64..10_000, side in 1usize..5) {
        let cb = codebook(40, 4, seed);
        let grid = LatentGrid::new(gaussian(side * side, 4, 1.5, &mut ChaCha8Rng::seed_from_u64(seed ^ 1))).unwrap();
        let tokens = quantize(&grid, &cb).unwrap();
        let again = quantize(&decode_tokens(&tokens, &cb).unwrap(), &cb).unwrap();
        prop_assert_eq!(&tokens, &again);
        for (row, &t) in grid.latents().rows().into_iter().zip(&tokens) {
            let row = row.to_vec();
            let best = sq_dist(&row, &cb.vectors().row(t as usize).to_vec());
            for e in cb.vectors().rows() {
                prop_assert!(best <= sq_dist(&row, &e.to_vec()));
            }
        }
    }

    #[test]
    fn render_then_encode_recovers_tokens(seed in 0u64..10_000) {
        let cb = codebook(24, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let tokens: Vec<u32> = (0..16).map(|_| rand::Rng::random_range(&mut rng, 0..24)).collect();
        let image = render_latents(&decode_tokens(&tokens, &cb).unwrap(), 16, 8).unwrap();
        let (encoded, _) = encode_observation(image.view(), 16, &cb).unwrap();
        prop_assert_eq!(encoded, tokens);
    }

    #[test]
    fn commitment_terms_coincide(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian::<f64, _>(4, 24, 1.0, &mut rng).into_shape_with_order((4, 8, 3)).unwrap();
        let recon = gaussian::<f64, _>(4, 24, 1.0, &mut rng).into_shape_with_order((4, 8, 3)).unwrap();
        let z = gaussian::<f64, _>(4, 5, 1.0, &mut rng);
        let zq = gaussian::<f64, _>(4, 5, 1.0, &mut rng);
        let loss = tokenizer_loss_value(x.view(), recon.view(), z.view(), zq.view()).unwrap();
        prop_assert_eq!(loss.commit_codebook, loss.commit_encoder);
        prop_assert!(loss.l1 > 0.0);
    }
}

#[test]
fn encoding_is_deterministic() {
    let cb = codebook(64, 6, 3);
    let image = gaussian::<f64, _>(32, 96, 1.0, &mut ChaCha8Rng::seed_from_u64(9))
        .into_shape_with_order((32, 32, 3))
        .unwrap();
    let a = encode_observation(image.view(), 64, &cb).unwrap();
    let b = encode_observation(image.view(), 64, &cb).unwrap();
    assert_eq!(a, b);
    assert!(encode_observation(image.view(), 15, &cb).is_err());
}

#[test]
fn ties_resolve_to_lowest_index() {
    let cb = Codebook::new(Array2::from_shape_vec((3, 1), vec![1.0, -1.0, 3.0]).unwrap()).unwrap();
    let grid = LatentGrid::new(Array2::zeros((1, 1))).unwrap();
    assert_eq!(quantize(&grid, &cb).unwrap(), vec![0]);
}

#[test]
fn out_of_range_token_names_its_slot() {
    let cb = codebook(8, 2, 1);
    let err = decode_tokens(&[0, 1, 8, 2], &cb).unwrap_err().to_string();
    assert!(err.contains("slot 2"), "{err}");
}

#[test]
fn codebook_file_round_trips() {
    let cb = codebook(16, 5, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codebook.f64");
    cb.save(&path).unwrap();
    assert_eq!(Codebook::load(&path).unwrap(), cb);
}
