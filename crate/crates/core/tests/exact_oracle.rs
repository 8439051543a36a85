//! Exact summation checked against rational arithmetic.

use bigbatch::exact::ExactSum;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use proptest::prelude::*;

fn rational_sum(xs: &[f64]) -> f64 {
    let mut acc = BigRational::zero();
    for &x in xs {
        acc += BigRational::from_float(x).expect("finite");
    }
    acc.to_f64().expect("in range")
}

fn wide_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e3f64..1e3,
        (-1.0f64..1.0, -60i32..60).prop_map(|(m, e)| m * 2f64.powi(e)),
        (-1.0f64..1.0, -1070i32..-1000).prop_map(|(m, e)| m * 2f64.powi(e)),
        (-1.0f64..1.0, 900i32..1020).prop_map(|(m, e)| m * 2f64.powi(e)),
        Just(0.0),
    ]
}

fn product_pairs(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let y = prop_oneof![
        -4.0f64..4.0,
        (-1.0f64..1.0, -40i32..40).prop_map(|(m, e)| m * 2f64.powi(e))
    ];
    prop::collection::vec((wide_f64(), y), 0..max).prop_map(|pairs| {
        pairs
            .into_iter()
            .map(|(x, y)| if (x * y).is_finite() { (x, y) } else { (x, 1.0) })
            .unzip()
    })
}

fn one_by_one(xs: &[f64], ys: &[f64]) -> ExactSum {
    xs.iter().zip(ys).map(|(x, y)| x * y).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn long_product_runs_match_rational_oracle((xs, ys) in product_pairs(2600)) {
        let mut acc = ExactSum::new();
        acc.add_products(&xs, &ys);
        let products: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| x * y).collect();
        prop_assert_eq!(acc.round().to_bits(), rational_sum(&products).to_bits());
        prop_assert_eq!(acc.round().to_bits(), one_by_one(&xs, &ys).round().to_bits());
    }

    #[test]
    fn long_product_runs_flag_non_finite(
        (mut xs, ys) in product_pairs(300),
        at in any::<prop::sample::Index>(),
        which in 0usize..3,
    ) {
        prop_assume!(!xs.is_empty());
        let i = at.index(xs.len());
        xs[i] = [f64::INFINITY, f64::NEG_INFINITY, f64::NAN][which];
        let mut acc = ExactSum::new();
        acc.add_products(&xs, &ys);
        let (got, want) = (acc.round(), one_by_one(&xs, &ys).round());
        prop_assert!(got.to_bits() == want.to_bits() || (got.is_nan() && want.is_nan()), "{} vs {}", got, want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn matches_rational_oracle(xs in prop::collection::vec(wide_f64(), 0..40)) {
        let got: ExactSum = xs.iter().copied().collect();
        let want = rational_sum(&xs);
        prop_assert_eq!(got.round().to_bits(), want.to_bits(), "xs = {:?}", xs);
    }

    #[test]
    fn any_split_rounds_identically(
        xs in prop::collection::vec(wide_f64(), 1..60),
        cut in any::<prop::sample::Index>(),
    ) {
        let whole: ExactSum = xs.iter().copied().collect();
        let c = cut.index(xs.len());
        let mut right: ExactSum = xs[c..].iter().copied().collect();
        let left: ExactSum = xs[..c].iter().copied().collect();
        right.merge(&left);
        prop_assert_eq!(whole.round().to_bits(), right.round().to_bits());
    }
}

#[test]
fn oracle_rounding_sanity() {
    // the oracle itself must round to nearest-even
    let one = BigRational::from_integer(BigInt::from(1));
    let half_ulp = BigRational::from_float(2f64.powi(-53)).unwrap();
    assert_eq!((one.clone() + half_ulp.clone()).to_f64(), Some(1.0));
    let tiny = BigRational::from_float(2f64.powi(-300)).unwrap();
    assert_eq!((one + half_ulp + tiny).to_f64(), Some(1.0 + 2f64.powi(-52)));
}

#[test]
fn cancellation_leaves_value_at_bottom_of_window() {
    let cases: [&[f64]; 4] = [
        &[2f64.powi(40), -(2f64.powi(40)), 1.0 + f64::EPSILON],
        &[1e300, 3.0, -1e300],
        &[-(2f64.powi(70)), 1.5, 2f64.powi(70), 2f64.powi(-40)],
        &[0.1, 2f64.powi(-1060), -0.1],
    ];
    for xs in cases {
        let got: ExactSum = xs.iter().copied().collect();
        assert_eq!(got.round().to_bits(), rational_sum(xs).to_bits(), "{xs:?}");
    }
}

#[test]
fn full_runs_of_extreme_mantissas_stay_exact() {
    let frac = (1u64 << 52) - 1;
    for e in [
        0u64, 1, 2, 31, 32, 33, 63, 64, 1000, 1023, 1055, 2015, 2016, 2034, 2035, 2036, 2046,
    ] {
        for low in [frac, frac & !0x3ff, 1, 0x3ff] {
            let big = f64::from_bits(e << 52 | low);
            let small = f64::from_bits(e.saturating_sub(31) << 52 | frac);
            for len in [64, 1023, 1024, 1025, 2048] {
                for mixed in [false, true] {
                    let xs: Vec<f64> = (0..len)
                        .map(|i| match (mixed, i % 3) {
                            (false, _) => big,
                            (true, 0) => -small,
                            (true, 1) => big,
                            _ => small,
                        })
                        .collect();
                    let ones = vec![1.0; len];
                    let mut acc = ExactSum::new();
                    acc.add_products(&xs, &ones);
                    let want = rational_sum(&xs);
                    assert_eq!(
                        acc.round().to_bits(),
                        want.to_bits(),
                        "e={e} low={low:#x} len={len} mixed={mixed}"
                    );
                }
            }
        }
    }
}
