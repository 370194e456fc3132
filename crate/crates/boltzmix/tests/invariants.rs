use boltzmix::diagnostics::fit_log_linear;
use boltzmix::model::{
    carleman_sphere, exponent_cancellation, omega_map, sigma_from_omega, sigma_map, vec3, CarlemanSphere, KernelSpec,
    Vec3, WeightSpec,
};
use boltzmix::quadrature::{make_sphere_rule, pairwise_sum, sphere_average_exp, sphere_exp_closed_form};
use proptest::prelude::*;

fn velocity() -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-6.0f64..6.0)
}

fn unit() -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-1.0f64..1.0)
        .prop_filter("nonzero", |a| vec3::norm(*a) > 1e-3)
        .prop_map(|a| vec3::scale(1.0 / vec3::norm(a), a))
}

fn mass() -> impl Strategy<Value = f64> {
    0.2f64..5.0
}

proptest! {
    #[test]
    fn sigma_map_conserves_momentum_and_energy(mi in mass(), mj in mass(), v in velocity(), w in velocity(), s in unit()) {
        let (vp, wp) = sigma_map(mi, mj, v, w, s);
        for k in 0..3 {
            let before = mi * v[k] + mj * w[k];
            let after = mi * vp[k] + mj * wp[k];
            prop_assert!((before - after).abs() <= 1e-12 * (1.0 + before.abs()));
        }
        let e0 = mi * vec3::norm_sq(v) + mj * vec3::norm_sq(w);
        let e1 = mi * vec3::norm_sq(vp) + mj * vec3::norm_sq(wp);
        prop_assert!((e0 - e1).abs() <= 1e-12 * e0.max(1.0));
    }

    #[test]
    fn omega_map_is_a_sigma_map(mi in mass(), mj in mass(), v in velocity(), w in velocity(), o in unit()) {
        prop_assume!(vec3::norm(vec3::sub(v, w)) > 1e-6);
        let (a, b) = omega_map(mi, mj, v, w, o);
        let (c, d) = sigma_map(mi, mj, v, w, sigma_from_omega(v, w, o));
        for k in 0..3 {
            prop_assert!((a[k] - c[k]).abs() <= 1e-11 * (1.0 + a[k].abs()));
            prop_assert!((b[k] - d[k]).abs() <= 1e-11 * (1.0 + b[k].abs()));
        }
    }

    #[test]
    fn post_collision_velocity_lies_on_carleman_sphere(mi in mass(), mj in mass(), v in velocity(), w in velocity(), s in unit()) {
        prop_assume!((mi - mj).abs() > 0.05);
        let (vp, wp) = sigma_map(mi, mj, v, w, s);
        let CarlemanSphere::Sphere { center, radius } = carleman_sphere(v, wp, mi, mj) else {
            panic!("distinct masses");
        };
        let r = vec3::norm(vec3::sub(vp, center));
        prop_assert!((r - radius).abs() <= 1e-9 * (1.0 + radius));
    }

    #[test]
    fn exponent_identity_holds(mi in mass(), mj in mass(), v in prop::array::uniform3(-10.0f64..10.0), w in prop::array::uniform3(-10.0f64..10.0)) {
        prop_assume!((mi - mj).abs() >= 0.1);
        let (lhs, rhs) = exponent_cancellation(v, w, mi, mj).unwrap();
        prop_assert!(rhs <= 0.0);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
    }

    #[test]
    fn kernel_is_species_symmetric(g in 0.0f64..1.0, z in velocity(), s in unit()) {
        let k = KernelSpec::uniform(3, g).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert_eq!(k.eval(i, j, z, s), k.eval(j, i, z, s));
                prop_assert!(k.eval(i, j, z, s) >= 0.0);
            }
        }
    }

    #[test]
    fn weight_is_radial_and_increasing(q in 4.01f64..8.0, v in velocity(), t in 1.0f64..2.0) {
        let w = WeightSpec::new(q).unwrap();
        prop_assert!(w.eval(v) >= 1.0);
        prop_assert!(w.eval(vec3::scale(t, v)) >= w.eval(v));
    }

    #[test]
    fn sphere_rule_matches_closed_form(k in 0.05f64..3.0, x in velocity()) {
        prop_assume!(k * vec3::norm(x) <= 6.0);
        let rule = make_sphere_rule(32, 32).unwrap();
        let q = sphere_average_exp(&rule, k, x).unwrap();
        let e = sphere_exp_closed_form(k, x);
        prop_assert!((q - e).abs() <= 1e-8 * e);
    }

    #[test]
    fn pairwise_sum_is_accurate(values in prop::collection::vec(-1e3f64..1e3, 0..5000)) {
        let exact: f64 = values.iter().map(|x| twofloat::TwoFloat::from(*x)).fold(twofloat::TwoFloat::from(0.0), |a, b| a + b).into();
        let abs: f64 = values.iter().map(|x| x.abs()).sum();
        prop_assert!((pairwise_sum(&values) - exact).abs() <= 1e-13 * abs.max(1.0));
    }

    #[test]
    fn log_linear_fit_recovers_rate(rate in 0.01f64..3.0, c in 0.1f64..10.0, n in 10usize..60) {
        let t: Vec<f64> = (0..n).map(|k| 0.1 * k as f64).collect();
        let y: Vec<f64> = t.iter().map(|s| (c * (-rate * s).exp()).ln()).collect();
        let fit = fit_log_linear(&t, &y).unwrap();
        prop_assert!((fit.rate - rate).abs() <= 1e-10);
        prop_assert!(fit.r_squared > 1.0 - 1e-10);
    }
}
