//! Property tests over random inputs.

use approx::assert_abs_diff_eq;
use ndarray::{Array2, Array3, Array4, Axis};
use proptest::prelude::*;

use hagcn::attention::{average_pool, decentralization, decentralization_pool};
use hagcn::data::{interpolate_missing, make_windows, TrafficSeries};
use hagcn::graph::SeedAdjacency;
use hagcn::model::{build_model, forward, ModelConfig};

fn square(n: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.0f64..5.0, n * n).prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
}

fn permute(a: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(a.raw_dim(), |(i, j)| a[[perm[i], perm[j]]])
}

proptest! {
    #[test]
    fn decentralization_ignores_scale_and_relabelling(
        a in (3usize..7).prop_flat_map(square),
        scale in 0.01f64..100.0,
        shuffle in any::<u64>(),
    ) {
        let y = decentralization(&a.view());
        assert_abs_diff_eq!(decentralization(&(&a * scale).view()), y, epsilon = 1e-9);
        let n = a.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut state = shuffle;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        assert_abs_diff_eq!(decentralization(&permute(&a, &perm).view()), y, epsilon = 1e-9);
        prop_assert!(y <= 1.0 + 1e-12);
    }

    #[test]
    fn pooling_is_per_channel(channels in prop::collection::vec(square(4), 1..5)) {
        let views: Vec<_> = channels.iter().map(|c| c.view()).collect();
        let stacked: Array3<f64> = ndarray::stack(Axis(0), &views).unwrap();
        let pooled = decentralization_pool(&stacked.view());
        let gap = average_pool(&stacked.view());
        for (c, a) in channels.iter().enumerate() {
            prop_assert_eq!(pooled[c], decentralization(&a.view()));
            assert_abs_diff_eq!(gap[c], a.mean().unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn windows_tile_the_series(t in 24usize..60, p in 1usize..8, q in 1usize..8, n_t in 1usize..30) {
        let values = Array3::from_shape_fn((t, 2, 1), |(i, n, _)| (i * 10 + n) as f64);
        let series = TrafficSeries::new(values.clone(), (0..t as i64).collect(), 300, vec!["a".into(), "b".into()]).unwrap();
        let ds = make_windows(&series, p, q, n_t).unwrap();
        prop_assert_eq!(ds.len(), t - p - q + 1);
        for s in 0..ds.len() {
            prop_assert_eq!(ds.inputs(s), values.slice(ndarray::s![s..s + p, .., ..]));
            prop_assert_eq!(ds.targets(s), values.slice(ndarray::s![s + p..s + p + q, .., ..]));
            prop_assert_eq!(ds.slot_index()[s], (s + p - 1) % n_t);
        }
    }

    #[test]
    fn interpolation_fills_gaps_and_is_idempotent(
        raw in prop::collection::vec(prop::option::weighted(0.7, -50.0f64..50.0), 30),
    ) {
        prop_assume!(raw[..15].iter().any(Option::is_some) && raw[15..].iter().any(Option::is_some));
        let values = Array3::from_shape_fn((15, 2, 1), |(t, n, _)| raw[n * 15 + t].unwrap_or(f64::NAN));
        let series = TrafficSeries::new(values.clone(), (0..15).collect(), 300, vec!["a".into(), "b".into()]).unwrap();
        let once = interpolate_missing(&series).unwrap();
        prop_assert_eq!(once.missing_count(), 0);
        for (filled, orig) in once.values.iter().zip(values.iter()) {
            if orig.is_finite() {
                prop_assert_eq!(filled, orig);
            }
        }
        prop_assert_eq!(interpolate_missing(&once).unwrap(), once);
    }
}

fn ring_seed(n: usize) -> SeedAdjacency {
    let weights = Array2::from_shape_fn((n, n), |(i, j)| {
        let hop = (i as f64 - j as f64).abs().min(n as f64 - (i as f64 - j as f64).abs());
        (-(hop + 0.1 * i as f64).powi(2)).exp()
    });
    SeedAdjacency { neighbor_mask: weights.mapv(|w| w > 0.0), weights, delta: 1.0 }
}

fn small() -> ModelConfig {
    ModelConfig {
        hidden_channels: 4,
        skip_channels: 8,
        end_channels: 8,
        tucker_rank: 2,
        attention_reduction: 2,
        num_slots: 6,
        ..ModelConfig::default()
    }
}

fn input(b: usize, n: usize) -> Array4<f64> {
    Array4::from_shape_fn((b, 12, n, 1), |(bi, t, ni, _)| ((bi * 17 + t * 5 + ni * 3) as f64 * 0.1).sin())
}

#[test]
fn every_input_step_reaches_the_prediction() {
    let config = small();
    assert_eq!(config.receptive_field(), 13);
    assert_eq!(config.padded_len(), 13);
    let params = build_model(&config, &ring_seed(5), 3).unwrap();
    let x = input(1, 5);
    let base = forward(&params, &config, &x.view(), &[2]).unwrap();
    for t in 0..12 {
        let mut xp = x.clone();
        xp[[0, t, 1, 0]] += 0.5;
        let out = forward(&params, &config, &xp.view(), &[2]).unwrap();
        assert!(out.iter().zip(base.iter()).any(|(a, b)| a != b), "input step {t} has no effect");
    }
}

#[test]
fn static_only_model_ignores_slots() {
    let mut config = small();
    config.ablation.disable_dynamic = true;
    let params = build_model(&config, &ring_seed(5), 4).unwrap();
    assert!(params.dynamic_factors.is_none());
    let x = input(2, 5);
    let a = forward(&params, &config, &x.view(), &[0, 1]).unwrap();
    let b = forward(&params, &config, &x.view(), &[5, 3]).unwrap();
    assert_eq!(a, b);

    // Initialization gives every slot the same embedding; break the symmetry
    // the way training would.
    let full = small();
    let mut params = build_model(&full, &ring_seed(5), 4).unwrap();
    let time = &mut params.dynamic_factors.as_mut().unwrap().time;
    for (k, v) in time.iter_mut().enumerate() {
        *v += 0.05 * (k as f64).sin();
    }
    let a = forward(&params, &full, &x.view(), &[0, 1]).unwrap();
    let b = forward(&params, &full, &x.view(), &[5, 3]).unwrap();
    assert_ne!(a, b);
}

#[test]
fn samples_in_a_batch_are_independent() {
    let config = small();
    let params = build_model(&config, &ring_seed(5), 8).unwrap();
    let x = input(3, 5);
    let batch = forward(&params, &config, &x.view(), &[1, 4, 1]).unwrap();
    for (b, slot) in [1, 4, 1].into_iter().enumerate() {
        let one = x.slice(ndarray::s![b..b + 1, .., .., ..]);
        let single = forward(&params, &config, &one, &[slot]).unwrap();
        for (p, q) in single.iter().zip(batch.index_axis(Axis(0), b).iter()) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-12);
        }
    }
}
