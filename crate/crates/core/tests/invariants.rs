//! Property tests over the format and numeric invariants.

use ibq_core::archive::TensorArchive;
use ibq_core::autodiff::Tape;
use ibq_core::loss::entropy_penalty;
use ibq_core::metrics::codebook_usage;
use ibq_core::tensor::Tensor;
use ibq_core::tokens::TokenDataset;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        values in prop::collection::vec(-30.0f64..30.0, 48),
    ) {
        let data: Vec<f64> = (0..rows * cols).map(|i| values[i % values.len()]).collect();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data));
        let p = tape.softmax_rows(x);
        let pv = tape.value(p);
        for r in 0..rows {
            let sum: f64 = pv.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
            prop_assert!(pv.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn entropy_penalty_stays_in_range(
        rows in 1usize..6,
        cols in 2usize..9,
        values in prop::collection::vec(-5.0f64..5.0, 48),
    ) {
        let data: Vec<f64> = (0..rows * cols).map(|i| values[i % values.len()]).collect();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data));
        let soft = tape.softmax_rows(x);
        let (le, (per, batch)) = entropy_penalty(&mut tape, soft);
        let lnk = (cols as f64).ln();
        let value = tape.value(le).item();
        prop_assert!(value >= -lnk - 1e-9 && value <= lnk + 1e-9, "L_E = {value}");
        prop_assert!(per >= -1e-9 && per <= lnk + 1e-9);
        prop_assert!(batch >= -1e-9 && batch <= lnk + 1e-9);
    }

    #[test]
    fn archive_round_trip_any_shape(
        dims in prop::collection::vec(1usize..5, 1..4),
        seedling in any::<u64>(),
    ) {
        let mut rng = ibq_core::rng::Rng::new(seedling);
        let mut archive = TensorArchive::new();
        let t32: Tensor<f32> = rng.tensor_normal(dims.clone(), 0.0, 10.0);
        let t64: Tensor<f64> = rng.tensor_normal(dims, -3.0, 0.5);
        archive.push_f32("a", t32);
        archive.push_f64("b", t64);
        let bytes = archive.to_bytes();
        let loaded = TensorArchive::from_bytes(&bytes).unwrap();
        prop_assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn token_file_round_trip(
        t in 1u32..12,
        n in 1usize..8,
        seedling in any::<u64>(),
    ) {
        let k = 32u32;
        let mut rng = ibq_core::rng::Rng::new(seedling);
        let mut ds = TokenDataset::new(k, t, 4);
        for _ in 0..n {
            let class = rng.below(4) as u16;
            let indices: Vec<u32> = (0..t).map(|_| rng.below(k as usize) as u32).collect();
            ds.push(class, indices).unwrap();
        }
        let bytes = ds.to_bytes();
        let loaded = TokenDataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn usage_is_permutation_invariant(
        indices in prop::collection::vec(0usize..16, 1..200),
        swap_seed in any::<u64>(),
    ) {
        let stats = codebook_usage(&indices, 16);
        let mut shuffled = indices.clone();
        ibq_core::rng::Rng::new(swap_seed).shuffle(&mut shuffled);
        let stats2 = codebook_usage(&shuffled, 16);
        prop_assert_eq!(stats.usage, stats2.usage);
        prop_assert!((stats.perplexity - stats2.perplexity).abs() < 1e-12);
        prop_assert!(stats.usage >= 1.0 / 16.0 && stats.usage <= 1.0);
        prop_assert!(stats.perplexity >= 1.0 - 1e-12 && stats.perplexity <= 16.0 + 1e-9);
    }
}
