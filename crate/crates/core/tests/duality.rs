use gestor_core::ssd::{smasked_attention_quadratic, ssm_scan_chunked, ssm_scan_linear, SsdParams};
use proptest::prelude::*;

fn head() -> impl Strategy<Value = (SsdParams, Vec<f64>, usize, usize)> {
    (1usize..48, 1usize..9, 1usize..5, 1usize..20).prop_flat_map(|(t, s, p, chunk)| {
        (
            prop::collection::vec(0.0f64..=1.0, t),
            prop::collection::vec(-2.0f64..2.0, t * s),
            prop::collection::vec(-2.0f64..2.0, t * s),
            prop::collection::vec(-3.0f64..3.0, t * p),
        )
            .prop_map(move |(a, b, c, v)| (SsdParams::new(a, b, c, s).unwrap(), v, p, chunk))
    })
}

proptest! {
    #[test]
    fn three_forms_agree((params, v, p, chunk) in head()) {
        let q = smasked_attention_quadratic(&params, &v, p).unwrap();
        let l = ssm_scan_linear(&params, &v, p).unwrap();
        let c = ssm_scan_chunked(&params, &v, p, chunk).unwrap();
        for i in 0..q.len() {
            prop_assert!((q[i] - l[i]).abs() < 1e-9, "quadratic/linear at {}: {} vs {}", i, q[i], l[i]);
            prop_assert!((c[i] - l[i]).abs() < 1e-9, "chunked/linear at {}: {} vs {}", i, c[i], l[i]);
        }
    }

    // Output t never depends on inputs after t.
    #[test]
    fn scan_is_causal((params, mut v, p, _chunk) in head(), at in 0usize..48) {
        let t = params.len();
        let at = at % t;
        let before = ssm_scan_linear(&params, &v, p).unwrap();
        v[at * p..].iter_mut().for_each(|x| *x += 1.0);
        let after = ssm_scan_linear(&params, &v, p).unwrap();
        prop_assert_eq!(&before[..at * p], &after[..at * p]);
    }
}
