use idlat::codec::{entropy_decode, entropy_encode, ideal_bits, Pmf};
use proptest::prelude::*;

fn pmf_strategy() -> impl Strategy<Value = Pmf> {
    (-20i32..20, prop::collection::vec(0.0f64..1.0, 1..40)).prop_filter_map(
        "needs mass",
        |(lo, mut w)| {
            // Keep some tiny but nonzero probabilities in play.
            w.iter_mut().for_each(|p| *p = p.powi(4));
            let total: f64 = w.iter().sum();
            (total > 0.0).then(|| Pmf::new(lo, w.into_iter().map(|p| p / total).collect()))
        },
    )
}

fn instance() -> impl Strategy<Value = (Vec<i32>, Vec<Pmf>)> {
    prop::collection::vec((pmf_strategy(), 0.0f64..1.0), 0..300).prop_map(|items| {
        let mut symbols = Vec::new();
        let mut pmfs = Vec::new();
        for (pmf, u) in items {
            // Inverse-CDF sample, falling back to the last symbol.
            let mut acc = 0.0;
            let mut s = pmf.hi();
            for (i, p) in pmf.probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    s = pmf.lo + i as i32;
                    break;
                }
            }
            symbols.push(s);
            pmfs.push(pmf);
        }
        (symbols, pmfs)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn decode_inverts_encode((symbols, pmfs) in instance()) {
        let bytes = entropy_encode(&symbols, &pmfs).unwrap();
        prop_assert_eq!(entropy_decode(&bytes, &pmfs).unwrap(), symbols);
    }

    #[test]
    fn payload_is_within_rate_bound((symbols, pmfs) in instance()) {
        let bytes = entropy_encode(&symbols, &pmfs).unwrap();
        let h = ideal_bits(&symbols, &pmfs);
        let bits = 8.0 * bytes.len() as f64;
        prop_assert!(bits + 1e-9 >= h, "{} < {}", bits, h);
        prop_assert!(bits <= h * 1.02 + 64.0, "{} > bound for {}", bits, h);
    }

    #[test]
    fn truncated_streams_never_decode_silently((symbols, pmfs) in instance(), cut in 1usize..8) {
        let bytes = entropy_encode(&symbols, &pmfs).unwrap();
        if bytes.len() > cut {
            let r = entropy_decode(&bytes[..bytes.len() - cut], &pmfs);
            prop_assert!(r.map_or(true, |s| s != symbols));
        }
    }
}
