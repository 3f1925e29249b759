//! Randomized invariants of the filter updates, the factorized beamformer,
//! the transforms and the metrics.

use cbf::model::{init_state, FilterBand, PipelineConfig};
use cbf::optimizer::apply_cbf;
use cbf::postproc::projection_back;
use cbf::simulate::{mix, MixingSystem};
use cbf::stft::{analyze, synthesize, StftParams, TimeSignal, Window};
use cbf::{ive, linalg, metrics, variance, wpe, MultichannelSpectrogram, SeparationMatrix, C64};
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rc(rng: &mut ChaCha8Rng) -> C64 {
    C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

fn matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<C64> {
    Array2::from_shape_fn((r, c), |_| rc(rng))
}

fn max_abs(a: &Array2<C64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.norm()))
}

/// `(mics, sources, frames)` with `1 <= sources < mics` and enough frames.
fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (2usize..=6).prop_flat_map(|m| (Just(m), 1..m, 4 * m..12 * m))
}

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(128)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn ip_update_is_normalized((m, j, t) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = matrix(&mut rng, t, m);
        let lambda = Array1::from_shape_fn(t, |_| rng.random_range(0.05..5.0));
        let sigma = ive::accumulate_sigma(z.view(), lambda.view(), 1e-10).sigma;
        let mut sep = SeparationMatrix::from_matrix(matrix(&mut rng, m, m), j).unwrap();
        for k in 0..j {
            let q = ive::update_speech_filter(sep.matrix().view(), sigma.view(), k).unwrap();
            prop_assert!((ive::quad_form(q.view(), sigma.view()) - 1.0).abs() <= 1e-10);
            sep.set_column(k, &q);
        }
    }

    #[test]
    fn noise_block_is_orthogonal((m, j, t) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = matrix(&mut rng, t, m);
        let sigma = ive::accumulate_sigma(z.view(), Array1::ones(t).view(), 1e-10).sigma;
        let mut sep = SeparationMatrix::from_matrix(matrix(&mut rng, m, m), j).unwrap();
        let block = ive::update_noise_block(&sep, sigma.view()).unwrap();
        sep.set_noise_block(&block);
        let cross = linalg::adjoint(sep.speech_block()).dot(&sigma).dot(&sep.noise_block());
        prop_assert!(max_abs(&cross) <= 1e-10);
        // Identity bottom block.
        let bottom = sep.noise_block().slice(ndarray::s![j.., ..]).to_owned();
        prop_assert!(max_abs(&(&bottom - &Array2::<C64>::eye(m - j))) == 0.0);
    }

    #[test]
    fn wpe_solution_satisfies_normal_equations((m, _j, t) in dims(), taps in 3usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = matrix(&mut rng, t, m);
        let lambda = Array1::from_shape_fn(t, |_| rng.random_range(0.05..5.0));
        let xbar = wpe::stack_bin(x.view(), 2, taps).unwrap();
        let stats = wpe::accumulate_stats(xbar.view(), x.view(), lambda.view());
        let g = stats.solve(1e-10).unwrap();
        let residual = &stats.p - &stats.loaded_r(1e-10).dot(&g);
        prop_assert!(max_abs(&residual) <= 1e-8 * max_abs(&stats.p).max(f64::MIN_POSITIVE));
    }

    #[test]
    fn factorized_beamformer_equals_monolithic((m, j, t) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = StftParams::new(16, 4, Window::Hann).unwrap();
        let len = (16..).find(|&n| params.num_frames(n) >= t).unwrap();
        let frames = params.num_frames(len);
        let spec = MultichannelSpectrogram::new(
            Array3::from_shape_fn((9, frames, m), |_| rc(&mut rng)), params, 16000, len,
        ).unwrap();
        let cfg = PipelineConfig {
            filter_schedule: vec![FilterBand { upper_hz: 8000.0, taps: 5 }],
            ..PipelineConfig::new(m, j)
        };
        let mut state = init_state(&spec, &cfg).unwrap();
        for f in 0..9 {
            for slot in 0..=j {
                let g = matrix(&mut rng, m * 3, m);
                state.wpe.set_slot(f, slot, g);
            }
            state.sep[f] = SeparationMatrix::from_matrix(matrix(&mut rng, m, m), j).unwrap();
        }
        let y = apply_cbf(&state, &spec, &cfg).unwrap();
        for f in 0..9 {
            let x = spec.data().slice(ndarray::s![f, .., ..]);
            let xbar = wpe::stack_bin(x, 2, 5).unwrap();
            let q = state.sep[f].matrix();
            let mut wbar = Array2::<C64>::zeros((xbar.ncols(), m));
            for k in 0..m {
                wbar.column_mut(k).assign(&state.wpe.for_output(f, k).dot(&q.column(k)).mapv(|v| -v));
            }
            let mono = x.dot(&q.mapv(|v| v.conj())) + xbar.dot(&wbar.mapv(|v| v.conj()));
            let diff = &mono - &y.slice(ndarray::s![f, .., ..]);
            prop_assert!(max_abs(&diff) <= 1e-10 * max_abs(&mono).max(1.0));
        }
    }

    #[test]
    fn stft_round_trip(channels in 1usize..4, len in 512usize..5000, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sig = TimeSignal::new(Array2::from_shape_fn((channels, len), |_| rng.random_range(-1.0..1.0)), 16000).unwrap();
        let back = synthesize(&analyze(&sig, &StftParams::default()).unwrap()).unwrap();
        let err = (back.samples() - sig.samples()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!(err <= 1e-6);
    }

    #[test]
    fn variances_respect_the_floor((m, j, t) in dims(), floor in 1e-9f64..1e-2, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Array3::from_shape_fn((5, t, m), |_| if rng.random_bool(0.3) { C64::new(0.0, 0.0) } else { rc(&mut rng) * 0.01 });
        prop_assert!(variance::update_coarse(y.view(), j, floor).min_value() >= floor);
        prop_assert!(variance::update_fine(y.view(), j, floor).min_value() >= floor);
    }

    #[test]
    fn projection_back_is_idempotent((m, j, t) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Array3::from_shape_fn((3, t, m), |_| rc(&mut rng));
        let sep: Vec<SeparationMatrix> = (0..3)
            .map(|_| SeparationMatrix::from_matrix(matrix(&mut rng, m, m), j).unwrap())
            .collect();
        let (once, rescaled) = projection_back(y.view(), &sep, 0).unwrap();
        let mut y_full = y.clone();
        y_full.slice_mut(ndarray::s![.., .., ..j]).assign(&once);
        let (twice, _) = projection_back(y_full.view(), &rescaled, 0).unwrap();
        let err = (&once - &twice).iter().fold(0.0f64, |a, v| a.max(v.norm()));
        prop_assert!(err <= 1e-9 * once.iter().fold(1.0f64, |a, v| a.max(v.norm())));
    }

    #[test]
    fn si_sdr_is_scale_invariant(len in 16usize..400, scale in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0], seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = r.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        let scaled: Vec<f64> = e.iter().map(|v| scale * v).collect();
        prop_assert!((metrics::si_sdr(&scaled, &r).unwrap() - metrics::si_sdr(&e, &r).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn mixing_is_linear(mics in 1usize..4, taps in 1usize..80, a in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sys = MixingSystem::new(Array3::from_shape_fn((taps, mics, mics), |_| rng.random_range(-1.0..1.0))).unwrap();
        let s1 = Array2::from_shape_fn((mics, 300), |_| rng.random_range(-1.0..1.0));
        let s2 = Array2::from_shape_fn((mics, 300), |_| rng.random_range(-1.0..1.0));
        let lhs = mix(&TimeSignal::new(&s1 * a + &s2, 16000).unwrap(), &sys).unwrap();
        let rhs = mix(&TimeSignal::new(s1, 16000).unwrap(), &sys).unwrap().samples() * a
            + mix(&TimeSignal::new(s2, 16000).unwrap(), &sys).unwrap().samples();
        prop_assert!((lhs.samples() - &rhs).iter().all(|v| v.abs() < 1e-12));
    }
}
