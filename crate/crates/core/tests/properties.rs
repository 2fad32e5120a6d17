mod common;

use bkd::auxgen::{ascend, AscentConfig, InputDivergence};
use bkd::config::ExperimentConfig;
use bkd::losses::{self, DivergenceSpace};
use bkd::nn::{self, Activation, LayerSpec, Model, Network};
use bkd::tensor::{softmax_rows, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-20.0f64..20.0, rows * cols).prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

fn sized_matrix() -> impl Strategy<Value = Tensor> {
    (1usize..6, 2usize..7).prop_flat_map(|(r, c)| matrix(r, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in sized_matrix()) {
        let p = softmax_rows(&x).unwrap();
        for r in 0..p.rows() {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(a in sized_matrix(), seed in 0u64..1000) {
        let p = softmax_rows(&a).unwrap();
        let mut r = common::rng(seed);
        let q = common::rand_distribution(&mut r, p.rows(), p.cols());
        prop_assert!(losses::kl_div(&p, &q).unwrap() >= -1e-12);
        prop_assert!(losses::kl_div(&p, &p).unwrap().abs() < 1e-9);
    }

    #[test]
    fn lambda_zero_is_cross_entropy((s, labels) in sized_matrix().prop_flat_map(|s| {
        let (r, c) = (s.rows(), s.cols());
        (Just(s), prop::collection::vec(0..c, r))
    }), tau in 0.5f64..5.0) {
        let t = s.map(|v| -v);
        let kd = losses::kd_loss_lambda(&s, &t, &labels, 0.0, tau).unwrap();
        let ce = losses::cross_entropy(&softmax_rows(&s).unwrap(), &labels).unwrap();
        prop_assert_eq!(kd, ce);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(w1 in 1usize..9, w2 in 1usize..9, seed in any::<u64>(), tanh in any::<bool>()) {
        let act = if tanh { Activation::Tanh } else { Activation::Relu };
        let m = Model::Mlp(Network::init(&LayerSpec::chain(&[w1, w2, 3], act), seed).unwrap());
        let mut buf = Vec::new();
        nn::write_model(&m, &mut buf).unwrap();
        let back = nn::read_model(&mut buf.as_slice()).unwrap();
        let mut again = Vec::new();
        nn::write_model(&back, &mut again).unwrap();
        prop_assert_eq!(back, m);
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn ascent_never_decreases_and_respects_clip(seed in 0u64..500, rate in 0.0f64..2.0, steps in 0usize..6) {
        let s = Network::init(&LayerSpec::chain(&[3, 4, 2], Activation::Tanh), seed).unwrap();
        let t = Network::init(&LayerSpec::chain(&[3, 6, 2], Activation::Tanh), seed + 1).unwrap();
        let mut r = common::rng(seed);
        let x = common::rand_tensor(&mut r, &[5, 3], 0.0, 1.0);
        let div = InputDivergence::new(&s, &t, DivergenceSpace::Logits).unwrap();
        let cfg = AscentConfig::new(rate, steps).with_clip(Some((0.0, 1.0)));
        for (i, o) in ascend(&div, &x, &cfg).unwrap().iter().enumerate() {
            prop_assert!(o.trace.windows(2).all(|w| w[1] >= w[0]));
            prop_assert!(o.accepted_steps() <= steps);
            prop_assert!(o.input.iter().all(|v| (0.0..=1.0).contains(v)));
            if rate == 0.0 || steps == 0 {
                prop_assert_eq!(&o.input[..], x.row(i));
            }
        }
    }

    #[test]
    fn config_echo_reparses(seed in any::<u64>(), lambda in 0.0f64..=1.0, tau in 0.01f64..20.0, h in 0usize..9) {
        let mut cfg = ExperimentConfig::default();
        cfg.kd.seed = seed;
        cfg.kd.lambda = lambda;
        cfg.kd.temperature = tau;
        cfg.kd.hyper_epochs = h;
        prop_assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
