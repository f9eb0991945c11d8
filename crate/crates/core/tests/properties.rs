//! Property tests of the transmission protocol, allocations and containers.

use proptest::prelude::*;
use semcom::channel::{c2r_unflatten, compute_bcr, flatten_r2c};
use semcom::checkpoint::Checkpoint;
use semcom::config::ExperimentConfig;
use semcom::rate::{CandidateRates, MaskAndSideInfo};
use semcom::tensor::Tensor;

fn allocation() -> impl Strategy<Value = (Vec<usize>, usize)> {
    (1usize..=5).prop_flat_map(|log_half| {
        let d = 2usize << log_half;
        (prop::collection::vec(1..=d / 2, 1..12), Just(d)).prop_map(|(h, d)| (h.into_iter().map(|x| 2 * x).collect(), d))
    })
}

proptest! {
    #[test]
    fn side_info_is_a_bijection((counts, d) in allocation()) {
        let m = MaskAndSideInfo::from_counts(counts.clone(), d).unwrap();
        let back = MaskAndSideInfo::from_side_info(&m.side_info(), d).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(m.rate_loss(), counts.iter().sum::<usize>());
        prop_assert_eq!(m.side_info_bits(), 16 * counts.len());
        let mask = m.mask();
        for (i, &k) in counts.iter().enumerate() {
            let row = mask.row(i);
            prop_assert!(row[..k].iter().all(|&x| x == 1.0));
            prop_assert!(row[k..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn noiseless_roundtrip((counts, d) in allocation(), scale in 0.01f64..20.0, seed in any::<u64>()) {
        let m = MaskAndSideInfo::from_counts(counts.clone(), d).unwrap();
        let mut rng = semcom::seed::rng(seed, "prop", 0);
        let x = Tensor::randn(vec![counts.len(), d], scale, &mut rng).unwrap();
        let masked = x.zip_map(&m.mask(), |a, b| a * b).unwrap();
        let tx = flatten_r2c(&masked, &m).unwrap();
        prop_assert_eq!(tx.len(), m.rate_loss() / 2);
        prop_assert!(tx.power() <= 1.0 + 1e-9);
        let back = c2r_unflatten(&tx, &m, tx.norm_factor).unwrap();
        prop_assert!(back.max_abs_diff(&masked) <= 1e-12 * scale.max(1.0));
        let bcr = compute_bcr(&m, (167, 167)).unwrap();
        prop_assert_eq!(bcr.n, m.rate_loss() / 2);
    }

    #[test]
    fn uniform_totals_are_exact(l_v in 1usize..20, d_pow in 1usize..6, frac in 0.0f64..=1.0) {
        let d = 2usize << d_pow;
        let lo = 2 * l_v;
        let hi = d * l_v;
        let total = lo + 2 * (((hi - lo) / 2) as f64 * frac) as usize;
        let m = MaskAndSideInfo::uniform_total(total, l_v, d).unwrap();
        prop_assert_eq!(m.rate_loss(), total);
        let (mn, mx) = (m.counts().iter().min().unwrap(), m.counts().iter().max().unwrap());
        prop_assert!(mx - mn <= 2);
    }

    #[test]
    fn one_hot_selections_map_to_rates(picks in prop::collection::vec(0usize..4, 1..10)) {
        let rates = CandidateRates::new(16).unwrap();
        let sel = semcom::rate::one_hot_rows(&picks, rates.q());
        let m = MaskAndSideInfo::from_selection(&sel, &rates).unwrap();
        let expect: Vec<usize> = picks.iter().map(|&j| rates.rates()[j]).collect();
        prop_assert_eq!(m.counts(), expect.as_slice());
    }

    #[test]
    fn checkpoint_bytes_roundtrip(vals in prop::collection::vec(-1e6f64..1e6, 1..40), seed in any::<u64>(), meta in "[a-z=;0-9]{0,20}") {
        let n = vals.len();
        let ck = Checkpoint {
            seed,
            metadata: meta,
            entries: vec![("a.weight".into(), Tensor::new(vec![n], vals).unwrap()), ("b".into(), Tensor::scalar(1.5))],
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes.clone());
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn config_echo_roundtrip(seed in any::<u64>(), d_pow in 2usize..6, snr in -10.0f64..20.0, lambda in 0.0f64..0.1) {
        let mut c = ExperimentConfig::default();
        c.seed = seed;
        c.model.d = 1 << d_pow;
        c.model.heads = 2;
        c.train.fixed_snr = Some(snr);
        c.stage3.lambda = Some(lambda);
        let c = c.resolved();
        let back = ExperimentConfig::parse(&c.to_toml()).unwrap();
        prop_assert_eq!(back, c);
    }
}
