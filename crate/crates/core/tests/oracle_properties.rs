use gdsd_core::decoder::{decode, rm_exact_log_prob, DecodeSchedule, Selection};
use gdsd_core::denoiser::denoiser_logits;
use gdsd_core::mdm::{MaskedSequence, TimeSampler, TokenSequence, WeightSchedule};
use gdsd_core::numerics::{compare_gradients, grad, Differentiable, Real};
use gdsd_core::objectives::{teacher_logits, Mode};
use gdsd_core::oracles::{
    brute_force_partition, brute_force_partition_in_order, brute_force_teacher,
    exp_weighted_elbo_objective, forward_kl_objective, random_theta, reverse_kl_decomposition,
    EnumerableInstance,
};
use gdsd_core::rng::stream;
use proptest::prelude::*;
use rand::Rng;

struct Inst {
    inst: EnumerableInstance,
    a: Vec<f64>,
}

impl Inst {
    fn new(seed: u64, v: u32, n_c: usize, context_free: bool) -> Self {
        let mut rng = stream(seed);
        let prompt = [rng.random_range(0..v)];
        let inst = if context_free {
            EnumerableInstance::context_free(v, &prompt, n_c, 2.0, &mut rng).unwrap()
        } else {
            EnumerableInstance::random(v, &prompt, n_c, 2.0, &mut rng).unwrap()
        };
        let a = (0..inst.completions().len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Self { inst, a }
    }

    fn adv(&self) -> impl Fn(&TokenSequence) -> f64 + '_ {
        move |x| self.a[self.inst.index_of(x).unwrap()]
    }

    fn masked(&self) -> Vec<MaskedSequence> {
        self.inst
            .masked_inputs()
            .unwrap()
            .into_iter()
            .filter(|x| !x.masked_positions().is_empty())
            .collect()
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
    x.iter().map(|v| (v - m).exp() / z).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn token_teacher_matches_brute_force(seed in any::<u64>(), psi in 0.0f64..10.0, beta in 0.0f64..=1.0) {
        let c = Inst::new(seed, 3, 2, false);
        for x_t in c.masked() {
            let bt = brute_force_teacher(&c.inst, &x_t, &c.adv(), psi, beta).unwrap();
            let old = denoiser_logits(c.inst.old(), &x_t).unwrap();
            let rf = denoiser_logits(c.inst.reference(), &x_t).unwrap();
            for mode in [Mode::Direct, Mode::Tlc] {
                let scores: Vec<f64> = bt
                    .completions
                    .iter()
                    .map(|&i| {
                        let x0 = &c.inst.completions()[i];
                        teacher_logits(&old, &rf, c.a[i], psi, beta, mode).unwrap().sequence_score(x0).unwrap()
                    })
                    .collect();
                for (p, q) in softmax(&scores).iter().zip(&bt.probs) {
                    prop_assert!((p - q).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn partition_is_positive_and_order_free(seed in any::<u64>(), psi in 0.0f64..10.0, beta in 0.0f64..=1.0, rot in 0usize..9) {
        let c = Inst::new(seed, 3, 2, false);
        for x_t in c.masked() {
            let z = brute_force_partition(&c.inst, &x_t, &c.adv(), psi, beta).unwrap();
            prop_assert!(z > 0.0 && z.is_finite());
            let m = c.inst.consistent(&x_t).unwrap().len();
            let order: Vec<usize> = (0..m).map(|k| (k + rot) % m).collect();
            let z2 = brute_force_partition_in_order(&c.inst, &x_t, &c.adv(), psi, beta, &order).unwrap();
            prop_assert!(((z2 - z) / z).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_kl_splits_into_three_terms(seed in any::<u64>(), psi in 0.0f64..10.0, beta in 0.0f64..=1.0) {
        let c = Inst::new(seed, 3, 2, false);
        let theta = random_theta(&c.inst, 1.5, &mut stream(seed ^ 1)).unwrap();
        for x_t in c.masked() {
            let d = reverse_kl_decomposition(&c.inst, &theta, &c.adv(), psi, beta, &x_t).unwrap();
            prop_assert!(d.direct >= -1e-12);
            prop_assert!((d.direct - d.sum()).abs() < 1e-10);
        }
    }

    #[test]
    fn guidance_moves_mass_to_the_best_completion(seed in any::<u64>(), beta in 0.0f64..=1.0) {
        let c = Inst::new(seed, 3, 2, false);
        let best = (0..c.a.len()).max_by(|&i, &j| c.a[i].total_cmp(&c.a[j])).unwrap();
        let full = MaskedSequence::fully_masked(c.inst.prompt(), 2, c.inst.spec().vocab()).unwrap();
        let mass: Vec<f64> = [0.0, 1.0, 5.0, 10.0]
            .iter()
            .map(|&psi| brute_force_teacher(&c.inst, &full, &c.adv(), psi, beta).unwrap().prob_of(best).unwrap())
            .collect();
        prop_assert!(mass.windows(2).all(|w| w[1] > w[0]), "{:?}", mass);
    }
}

struct Objective<'a> {
    c: &'a Inst,
    psi: f64,
    beta: f64,
    forward: bool,
}

impl Differentiable for Objective<'_> {
    fn eval<S: Real>(&self, p: &[S]) -> gdsd_core::Result<S> {
        let (g, w) = (TimeSampler::Grid, WeightSchedule::InvT);
        let adv = self.c.adv();
        if self.forward {
            forward_kl_objective(&self.c.inst, p, &adv, self.psi, self.beta, g, w)
        } else {
            exp_weighted_elbo_objective(&self.c.inst, p, &adv, self.psi, self.beta, g, w)
        }
    }
}

#[test]
fn forward_kl_gradient_is_exp_weighted_elbo_gradient() {
    for seed in 0..20 {
        let c = Inst::new(
            100 + seed,
            if seed % 2 == 0 { 3 } else { 2 },
            if seed % 2 == 0 { 2 } else { 3 },
            true,
        );
        let theta = random_theta(&c.inst, 1.0, &mut stream(seed)).unwrap();
        let (psi, beta) = (
            [1.0, 5.0, 10.0][seed as usize % 3],
            [0.0, 0.1, 0.5][seed as usize % 3],
        );
        let (_, gf) = grad(
            &Objective {
                c: &c,
                psi,
                beta,
                forward: true,
            },
            theta.params(),
        )
        .unwrap();
        let (_, ge) = grad(
            &Objective {
                c: &c,
                psi,
                beta,
                forward: false,
            },
            theta.params(),
        )
        .unwrap();
        let cos = compare_gradients(&gf, &ge, 1e-12).cosine;
        assert!(cos > 0.999, "seed {seed}: cosine {cos}");
    }
}

#[test]
fn two_step_sampler_matches_exact_distribution() {
    let mut rng = stream(77);
    let inst = EnumerableInstance::random(2, &[], 2, 1.5, &mut rng).unwrap();
    for selection in [Selection::Random, Selection::LowConfidence] {
        let sched = DecodeSchedule {
            steps: 2,
            selection,
            block_size: None,
            temperature: 1.0,
        };
        let exact: Vec<f64> = inst
            .completions()
            .iter()
            .map(|x| rm_exact_log_prob(inst.old(), x, &sched).unwrap().exp())
            .collect();
        let n = 40_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let r = decode(inst.old(), &[], &sched, &mut rng).unwrap();
            counts[inst.index_of(&r.completion).unwrap()] += 1;
        }
        let tv: f64 = 0.5
            * counts
                .iter()
                .zip(&exact)
                .map(|(&k, p)| (k as f64 / n as f64 - p).abs())
                .sum::<f64>();
        assert!(tv < 0.015, "{selection:?}: tv {tv}");
    }
}
