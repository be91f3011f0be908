mod common;

use common::random_mdp;
use mtfqi::analysis::{lambda_max, rademacher_estimate, theorem1a_bound, BoundInputs};
use mtfqi::data::{bundle_from_jsonl, bundle_to_jsonl, collect_bundle, BehaviorKind};
use mtfqi::ensemble::{generate_ensemble, EnsembleFile, EnsembleSpec};
use mtfqi::features::{build_encoder_class, EncoderClass};
use mtfqi::fqi::{fit_stage, run_mtfqi, SolverConfig};
use mtfqi::mdp::{occupancy, StochasticPolicy};
use proptest::prelude::*;

fn spec() -> impl Strategy<Value = EnsembleSpec> {
    (2usize..7, 1usize..4, 1usize..6, 1usize..4, 1usize..5, prop::bool::ANY).prop_filter_map(
        "d ≤ S·K",
        |(s, k, h, t, d, discount)| {
            (d <= s * k).then(|| {
                EnsembleSpec::new(s, k, h, t, d)
                    .with_gamma(if discount { 0.8 } else { 1.0 })
                    .with_w_max(100.0)
            })
        },
    )
}

fn behavior() -> impl Strategy<Value = BehaviorKind> {
    prop_oneof![Just(BehaviorKind::Uniform), (0.0..=1.0f64).prop_map(|epsilon| BehaviorKind::EpsilonGreedy { epsilon })]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_ensembles_are_realizable(spec in spec(), seed in any::<u64>()) {
        let ens = generate_ensemble(spec, seed).unwrap();
        prop_assert!(ens.realizability_residual() <= 1e-8);
        for (t, w) in ens.true_decoders().iter().enumerate() {
            for wh in w {
                prop_assert!(wh.iter().map(|x| x * x).sum::<f64>().sqrt() <= spec.w_max * (1.0 + 1e-9), "task {}", t);
            }
        }
    }

    #[test]
    fn occupancies_are_distributions(seed in any::<u64>(), ns in 1usize..5, na in 1usize..4, nh in 1usize..5) {
        let mdp = random_mdp(seed, ns, na, nh, 1.0);
        let mut rng = common::rng(seed ^ 1);
        let probs: Vec<f64> = (0..nh * ns)
            .flat_map(|_| {
                let raw: Vec<f64> = (0..na).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(move |x| x / sum)
            })
            .collect();
        let pi = StochasticPolicy::new(ns, na, nh, probs).unwrap();
        let mu = occupancy(&mdp, &pi).unwrap();
        for h in 0..nh {
            prop_assert!((mu.stage(h).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(mu.stage(h).iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn generation_and_collection_are_deterministic(spec in spec(), seed in any::<u64>(), kind in behavior()) {
        let a = generate_ensemble(spec, seed).unwrap();
        let b = generate_ensemble(spec, seed).unwrap();
        prop_assert_eq!(a.content_hash(), b.content_hash());
        let da = collect_bundle(&a, kind, 7, seed).unwrap();
        let db = collect_bundle(&b, kind, 7, seed).unwrap();
        prop_assert_eq!(da, db);
    }

    #[test]
    fn concentrability_is_at_least_one(spec in spec(), seed in any::<u64>(), kind in behavior()) {
        let ens = generate_ensemble(spec, seed).unwrap();
        for mdp in ens.tasks() {
            let pi = mtfqi::data::BehaviorPolicy::for_task(kind, mdp).unwrap();
            match lambda_max(mdp, &occupancy(mdp, pi.table()).unwrap()) {
                Ok(lam) => prop_assert!(lam >= 1.0 - 1e-12),
                Err(mtfqi::Error::UnboundedConcentrability { .. }) => {
                    let greedy = matches!(kind, BehaviorKind::EpsilonGreedy { .. });
                    prop_assert!(greedy);
                }
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }

    #[test]
    fn theorem1a_halves_when_data_quadruples(n in 1usize..10_000, t in 1usize..20, phi in 1usize..50, psi in 0.0..20.0f64) {
        let base = BoundInputs {
            b: 9.0,
            num_encoders: phi,
            log_psi_eff: psi,
            num_tasks: t,
            n,
            horizon: 3,
            delta: 0.05,
            lambda_max: 1.0,
            sigma_sq: 0.0,
            eps_irred: 0.0,
            rademacher: 0.0,
        };
        let more = BoundInputs { n: 4 * n, ..base.clone() };
        let ratio = theorem1a_bound(&more).unwrap() / theorem1a_bound(&base).unwrap();
        prop_assert!((ratio - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rademacher_estimate_respects_the_analytic_bound(
        z in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 3), 1..60),
        w in 0.1..10.0f64,
        seed in any::<u64>(),
    ) {
        let est = rademacher_estimate(&z, w, 200, seed).unwrap();
        prop_assert!(est.estimate <= est.analytic_bound + 3.0 * est.std_error + 1e-12);
    }

    #[test]
    fn pooled_fit_separates_across_tasks(seed in any::<u64>(), t in 1usize..5, ridge in 0.0..1e-2f64) {
        let ens = generate_ensemble(EnsembleSpec::new(4, 3, 2, t, 3), seed).unwrap();
        let bundle = collect_bundle(&ens, BehaviorKind::Uniform, 30, seed).unwrap();
        let slices = bundle.stage_slices(1);
        let targets: Vec<Vec<f64>> = slices.iter().map(|s| s.iter().map(|tr| tr.r).collect()).collect();
        let ridge = ridge + 1e-9;
        let pooled = fit_stage(ens.features(), &slices, &targets, ridge).unwrap();
        for k in 0..t {
            let alone = fit_stage(ens.features(), &slices[k..=k], &targets[k..=k], ridge).unwrap();
            prop_assert_eq!(&alone.decoders[0], &pooled.decoders[k]);
        }
    }

    #[test]
    fn larger_classes_never_select_a_worse_last_stage(seed in any::<u64>(), extra in 1usize..5) {
        let ens = generate_ensemble(EnsembleSpec::new(4, 2, 2, 2, 3), seed).unwrap();
        let bundle = collect_bundle(&ens, BehaviorKind::Uniform, 25, seed).unwrap();
        let big = build_encoder_class(ens.features(), 5, 0.7, seed).unwrap();
        let small = EncoderClass::new(big.members()[..5 - extra + 1].to_vec(), false).unwrap();
        let cfg = SolverConfig::default();
        let (ms, _) = run_mtfqi(&bundle, &small, &cfg).unwrap();
        let (mb, _) = run_mtfqi(&bundle, &big, &cfg).unwrap();
        prop_assert!(mb.stage_losses[1] <= ms.stage_losses[1]);
    }

    #[test]
    fn files_round_trip_bit_exactly(spec in spec(), seed in any::<u64>(), kind in behavior()) {
        let ens = generate_ensemble(spec, seed).unwrap();
        let class = build_encoder_class(ens.features(), 2, 0.5, seed).unwrap();
        let file = EnsembleFile { ensemble: ens, encoder_class: Some(class) };
        let text = file.to_json().unwrap();
        let back = EnsembleFile::from_json(&text).unwrap();
        prop_assert_eq!(&back, &file);
        prop_assert_eq!(back.ensemble.content_hash(), file.ensemble.content_hash());

        let bundle = collect_bundle(&file.ensemble, kind, 5, seed).unwrap();
        let jsonl = bundle_to_jsonl(&bundle).unwrap();
        let again = bundle_from_jsonl(&jsonl).unwrap();
        prop_assert_eq!(&again, &bundle);
        prop_assert_eq!(bundle_to_jsonl(&again).unwrap(), jsonl);
    }
}
