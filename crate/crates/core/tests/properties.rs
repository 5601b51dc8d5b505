use gga_core::data::{
    make_gaussian_toy, make_generative, sample_composite, CompositeMinibatch, GaussianToyConfig,
    GenerativeConfig,
};
use gga_core::metrics::grad_report;
use gga_core::optim::{
    gga_anneal, gga_l_step, sgd_step, total_gradient, AcceptanceMode, AnnealConfig,
    CandidateStream, GgaLConfig,
};
use gga_core::{Activation, Model, ModelSpec, ParamVector};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_spec(rng: &mut ChaCha8Rng, mlp: bool) -> ModelSpec {
    let input = rng.random_range(1..4);
    let classes = rng.random_range(2..4);
    if mlp {
        let hidden = rng.random_range(2..6);
        let act = if rng.random::<bool>() {
            Activation::Relu
        } else {
            Activation::Tanh
        };
        ModelSpec::mlp(vec![input, hidden, classes], act)
    } else {
        ModelSpec::poly_logistic(input, rng.random_range(1..4), classes)
    }
}

fn random_batch(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
    classes: usize,
) -> (Array2<f64>, Vec<usize>) {
    let x = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.5..1.5));
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (x, y)
}

fn random_theta(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> ParamVector {
    ParamVector::new((0..len).map(|_| rng.random_range(-scale..scale)).collect())
}

fn toy_problem(seed: u64, b: usize) -> (Model, ParamVector, CompositeMinibatch) {
    let ds = make_gaussian_toy(&GaussianToyConfig::default(), seed).unwrap();
    let model = Model::new(ModelSpec::poly_logistic(2, 4, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let composite = sample_composite(&ds, b, &mut rng).unwrap();
    let theta = random_theta(&mut rng, model.num_params(), 0.05);
    (model, theta, composite)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradient_agrees_with_finite_differences(seed in any::<u64>(), mlp in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng, mlp);
        let model = Model::new(spec.clone()).unwrap();
        let theta = random_theta(&mut rng, model.num_params(), 0.5);
        let (x, y) = random_batch(&mut rng, 8, spec.input_dim, spec.num_classes);
        let g = model.gradient(&theta, x.view(), &y, 1e-3).unwrap();
        let fd = model.fd_gradient(&theta, x.view(), &y, 1e-3, 1e-5).unwrap();
        let err = (&g - &fd).max_abs() / (1.0 + fd.max_abs());
        prop_assert!(err < 1e-4, "error {err}");
    }

    #[test]
    fn total_gradient_equals_concatenated_batch_gradient(seed in any::<u64>()) {
        let (model, theta, composite) = toy_problem(seed, 16);
        let (x, y) = composite.concatenated();
        let pooled = model.gradient(&theta, x.view(), &y, 1e-4).unwrap();
        let mean = total_gradient(&model, &theta, &composite, 1e-4).unwrap();
        prop_assert!((&pooled - &mean).max_abs() < 1e-12);
    }

    #[test]
    fn report_statistics_are_consistent(seed in any::<u64>()) {
        let cfg = GenerativeConfig { target_domains: vec![], ..GenerativeConfig::default() };
        let ds = make_generative(&cfg, 40, seed).unwrap();
        let model = Model::new(ModelSpec::poly_logistic(4, 2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let composite = sample_composite(&ds, 8, &mut rng).unwrap();
        let theta = random_theta(&mut rng, model.num_params(), 0.3);
        let r = grad_report(&model, &theta, &composite, 0.0).unwrap();
        prop_assert_eq!(r.pairwise_sims.len(), 3);
        let sims: Vec<f64> = r.pairwise_sims.iter().map(|p| p.sim).collect();
        for &s in &sims {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        }
        prop_assert_eq!(r.min_sim, sims.iter().copied().fold(f64::INFINITY, f64::min));
        prop_assert!((r.mean_sim - sims.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn anneal_trace_obeys_acceptance_rule(
        seed in any::<u64>(),
        strict in any::<bool>(),
        rho in prop::sample::select(vec![1e-3, 1e-2, 1e-1]),
    ) {
        let (model, theta, composite) = toy_problem(seed, 16);
        let mode = if strict { AcceptanceMode::StrictPareto } else { AcceptanceMode::Relaxed };
        let cfg = AnnealConfig { rho, candidates: 40, mode, ..AnnealConfig::default() };
        let out = gga_anneal(&model, &theta, &composite, &cfg, 1e-4, CandidateStream::new(seed)).unwrap();
        let trace = &out.trace;
        prop_assert_eq!(out.step.candidates_evaluated, 40);
        prop_assert_eq!(trace.candidates.len(), 40);

        let (mut sim, mut loss) = (trace.baseline_sim, trace.baseline_loss);
        for c in trace.candidates.iter().filter(|c| c.accepted) {
            prop_assert!(c.sim > sim);
            match mode {
                AcceptanceMode::Relaxed => prop_assert!(c.loss - loss < cfg.tolerance),
                AcceptanceMode::StrictPareto => prop_assert!(c.loss < loss),
            }
            sim = c.sim;
            loss = c.loss;
        }

        let before = grad_report(&model, &theta, &composite, 1e-4).unwrap().min_sim;
        let after = grad_report(&model, &out.step.theta_next, &composite, 1e-4).unwrap().min_sim;
        prop_assert_eq!(after, out.step.final_sim);
        if out.step.accepted_candidates == 0 {
            prop_assert_eq!(&out.step.theta_next, &theta);
            prop_assert_eq!(after, before);
        } else {
            prop_assert!(after > before);
        }
    }

    #[test]
    fn ggal_without_gamma_is_plain_sgd(seed in any::<u64>()) {
        let (model, theta, composite) = toy_problem(seed, 8);
        let cfg = GgaLConfig { gamma: 0.0, ..GgaLConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = gga_l_step(&model, &theta, &composite, &cfg, 0.05, 1e-4, &mut rng).unwrap();
        let g = total_gradient(&model, &theta, &composite, 1e-4).unwrap();
        let plain = sgd_step(&theta, &g, 0.05).unwrap();
        prop_assert_eq!(out.alpha, 0.0);
        prop_assert_eq!(out.step.theta_next.as_slice(), plain.as_slice());
    }

    #[test]
    fn datasets_are_reproducible(seed in any::<u64>()) {
        let a = make_gaussian_toy(&GaussianToyConfig::default(), seed).unwrap();
        let b = make_gaussian_toy(&GaussianToyConfig::default(), seed).unwrap();
        prop_assert_eq!(a, b);
        let g = GenerativeConfig::default();
        prop_assert_eq!(make_generative(&g, 30, seed).unwrap(), make_generative(&g, 30, seed).unwrap());
    }

    #[test]
    fn composite_keeps_domain_partition(seed in any::<u64>(), b in 1usize..64) {
        let ds = make_gaussian_toy(&GaussianToyConfig::default(), seed % 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = sample_composite(&ds, b, &mut rng).unwrap();
        prop_assert_eq!(c.num_domains(), 2);
        for (part, &d) in c.parts.iter().zip(ds.source_indices().iter()) {
            prop_assert_eq!(part.domain, d);
            prop_assert_eq!(part.labels.len(), b);
            // Every sampled row must exist in its own domain.
            let own = &ds.domains()[d].features;
            for row in part.features.rows() {
                prop_assert!(own.rows().into_iter().any(|r| r == row));
            }
        }
    }
}
