use msrecon::datagen::make_uniform_mask;
use msrecon::diffusion::{make_linear_schedule, ShrinkageDenoiser};
use msrecon::fft::{fft2c, fresnel_adjoint, fresnel_propagate, ifft2c, FresnelKernel};
use msrecon::metrics::{psnr, ssim, SsimParams};
use msrecon::mri::{mri_dc_step, mri_forward, soft_threshold, MriStepConfig};
use msrecon::noise::derive_noise;
use msrecon::partition::{initial_state, plan_partition, run_partitioned_sampling, SamplerOptions};
use msrecon::stem::{stem_forward, stem_grad, stem_loss, StemGeometry};
use msrecon::{Complex64, ComplexVolume, ProbeParams};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn image(n: usize, v: &[(f64, f64)]) -> Array2<Complex64> {
    Array2::from_shape_fn((n, n), |(i, j)| {
        let (a, b) = v[(i * n + j) % v.len()];
        Complex64::new(a + 0.1 * i as f64, b - 0.07 * j as f64)
    })
}

fn norm(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn inner(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

fn entries() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 1..64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn centered_fft_is_unitary(half in 1usize..9, a in entries(), b in entries()) {
        let n = 2 * half;
        let (x, y) = (image(n, &a), image(n, &b));
        let fx = fft2c(&x).unwrap();
        prop_assert!((norm(&fx) - norm(&x)).abs() <= 1e-10 * norm(&x));
        prop_assert!(norm(&(ifft2c(&fx).unwrap() - &x)) <= 1e-10 * norm(&x));
        let lhs = inner(&fx, &y);
        let rhs = inner(&x, &ifft2c(&y).unwrap());
        prop_assert!((lhs - rhs).norm() <= 1e-10 * norm(&x) * norm(&y));
    }

    #[test]
    fn fresnel_is_a_unitary_semigroup(d1 in -20.0..20.0f64, d2 in -20.0..20.0f64, a in entries(), b in entries()) {
        let n = 16;
        let k = |d| FresnelKernel::new(n, 0.3, 0.0251, d).unwrap();
        let (x, y) = (image(n, &a), image(n, &b));
        let two = fresnel_propagate(&fresnel_propagate(&x, &k(d1)).unwrap(), &k(d2)).unwrap();
        let one = fresnel_propagate(&x, &k(d1 + d2)).unwrap();
        prop_assert!(norm(&(two - &one)) <= 1e-10 * norm(&x));
        let lhs = inner(&fresnel_propagate(&x, &k(d1)).unwrap(), &y);
        let rhs = inner(&x, &fresnel_adjoint(&y, &k(d1)).unwrap());
        prop_assert!((lhs - rhs).norm() <= 1e-10 * norm(&x) * norm(&y));
        let back = fresnel_propagate(&fresnel_propagate(&x, &k(d1)).unwrap(), &k(d1).reversed()).unwrap();
        prop_assert!(norm(&(back - &x)) <= 1e-10 * norm(&x));
    }

    #[test]
    fn soft_threshold_shrinks_modulus_and_keeps_phase(re in -5.0..5.0f64, im in -5.0..5.0f64, tau in 0.0..3.0f64) {
        let z = Complex64::new(re, im);
        let out = soft_threshold(z, tau);
        prop_assert!((out.norm() - (z.norm() - tau).max(0.0)).abs() <= 1e-12);
        if out.norm() > 1e-9 {
            prop_assert!((out.arg() - z.arg()).abs() <= 1e-9);
        }
    }

    #[test]
    fn half_step_dc_is_idempotent(seed in any::<u64>(), a in entries(), b in entries()) {
        let n = 16;
        let mask = make_uniform_mask(n, 2.0, 0.25, seed).unwrap();
        let truth = ComplexVolume::from_slices(&[image(n, &a), image(n, &b)]).unwrap();
        let y = mri_forward(&truth, &mask).unwrap();
        let start = ComplexVolume::from_slices(&[image(n, &b), image(n, &a)]).unwrap();
        let cfg = MriStepConfig { step: 0.5, threshold: 0.0 };
        let once = mri_dc_step(&start, &y, &mask, &cfg).unwrap();
        let twice = mri_dc_step(&once, &y, &mask, &cfg).unwrap();
        let diff = once.as_slice().iter().zip(twice.as_slice()).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        prop_assert!(diff <= 1e-10);
    }

    #[test]
    fn partitioned_sampling_ignores_worker_count(s in 1usize..7, g in 2usize..9, seed in any::<u64>()) {
        let n = 8;
        let sched = make_linear_schedule(6, 1e-3, 0.1).unwrap();
        let model = ShrinkageDenoiser::new(0.4, sched.clone()).unwrap();
        let x0 = initial_state(seed, s, n, 0).unwrap();
        let run = |workers| {
            let plan = plan_partition(s, workers).unwrap();
            run_partitioned_sampling(&x0, &sched, &model, &plan, SamplerOptions::new(seed, 1), 1..7).unwrap().0
        };
        prop_assert_eq!(run(1), run(g));
    }

    #[test]
    fn noise_streams_are_reproducible_prefixes(seed in any::<u64>(), s in 0usize..64, t in 0usize..1000, l in 0usize..16, k in 1usize..40) {
        let long = derive_noise(seed, s, t, l, 64);
        prop_assert_eq!(&derive_noise(seed, s, t, l, k)[..], &long[..k]);
        prop_assert_ne!(derive_noise(seed, s, t + 1, l, 8), derive_noise(seed, s, t, l, 8));
    }

    #[test]
    fn identical_images_score_perfectly(a in entries()) {
        let x = image(16, &a).mapv(|z| z.re);
        prop_assume!(x.iter().any(|&v| v != x[[0, 0]]));
        prop_assert!((ssim(x.view(), x.view(), &SsimParams::default()).unwrap() - 1.0).abs() <= 1e-12);
        let v = ComplexVolume::from_slices(&[image(16, &a)]).unwrap();
        prop_assert_eq!(psnr(&v, &v).unwrap(), f64::INFINITY);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stem_gradient_matches_directional_derivative(
        slices in 1usize..4,
        defocus in -30.0..30.0f64,
        phases in prop::collection::vec(-1.0..1.0f64, 8..32),
    ) {
        let n = 8;
        let probe = ProbeParams { wavelength: 0.0251, semi_angle: 0.03, defocus, pixel_size: 0.3, n };
        let geom = StemGeometry::new(probe, slices, 1.5, (2, 2), 2).unwrap();
        let vol = |shift: f64| {
            ComplexVolume::new(Array3::from_shape_fn((slices, n, n), |(s, i, j)| {
                let p = phases[(s * 7 + i * n + j) % phases.len()];
                Complex64::from_polar(1.0 - 0.1 * p.abs(), p + shift * (i as f64 - j as f64) / n as f64)
            }))
            .unwrap()
        };
        let meas = stem_forward(&vol(0.0), &geom).unwrap();
        let x = vol(0.4);
        let dir = vol(-1.3);
        // the real gradient is twice the Wirtinger one
        let g = stem_grad(&x, &meas, &geom).unwrap();
        let analytic: f64 = g.as_slice().iter().zip(dir.as_slice()).map(|(a, d)| 2.0 * (a.conj() * d).re).sum();
        let h = 1e-6;
        let shifted = |sign: f64| {
            let mut y = x.clone();
            y.as_slice_mut().iter_mut().zip(dir.as_slice()).for_each(|(v, d)| *v += d * (sign * h));
            stem_loss(&y, &meas, &geom).unwrap()
        };
        let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        prop_assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1e-8), "fd {} analytic {}", fd, analytic);
    }

    #[test]
    fn phase_objects_conserve_probe_energy(slices in 1usize..4, phases in prop::collection::vec(-3.0..3.0f64, 4..40)) {
        let n = 16;
        let probe = ProbeParams { wavelength: 0.0251, semi_angle: 0.025, defocus: 10.0, pixel_size: 0.25, n };
        let geom = StemGeometry::new(probe, slices, 2.0, (3, 2), 3).unwrap();
        let x = ComplexVolume::new(Array3::from_shape_fn((slices, n, n), |(s, i, j)| {
            Complex64::from_polar(1.0, phases[(s + 3 * i + 5 * j) % phases.len()])
        }))
        .unwrap();
        let data = stem_forward(&x, &geom).unwrap();
        let e = geom.probe_energy();
        for iy in 0..3 {
            for ix in 0..2 {
                prop_assert!((data.pattern(iy, ix).sum() - e).abs() <= 1e-10 * e);
            }
        }
    }
}
