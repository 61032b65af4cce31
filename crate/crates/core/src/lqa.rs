//! Query anchoring: blend stylization-path queries toward content queries.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct QueryPair {
    pub q_c: Tensor,
    pub q_cs: Tensor,
    pub lambda: f64,
}

/// `λ·Q_c + (1 − λ)·Q_cs`. The end points return the respective input
/// without arithmetic so they match bitwise.
pub fn anchor_queries(p: &QueryPair) -> Result<Tensor> {
    p.q_c.ensure_same_shape(&p.q_cs, "anchor_queries")?;
    if !(0.0..=1.0).contains(&p.lambda) {
        return Err(invalid(format!("lambda must lie in [0, 1], got {}", p.lambda)));
    }
    if p.lambda == 0.0 {
        return Ok(p.q_cs.clone());
    }
    if p.lambda == 1.0 {
        return Ok(p.q_c.clone());
    }
    let l = p.lambda;
    p.q_c
        .zip_map(&p.q_cs, |c, cs| (l * c as f64 + (1.0 - l) * cs as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(lambda: f64) -> QueryPair {
        QueryPair {
            q_c: Tensor::filled(vec![3, 4], 1.0).unwrap(),
            q_cs: Tensor::zeros(vec![3, 4]).unwrap(),
            lambda,
        }
    }

    #[test]
    fn endpoints_and_default() {
        let p = pair(0.0);
        assert_eq!(anchor_queries(&p).unwrap(), p.q_cs);
        let p = pair(1.0);
        assert_eq!(anchor_queries(&p).unwrap(), p.q_c);
        let out = anchor_queries(&pair(DEFAULT_LAMBDA)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
        assert!(anchor_queries(&pair(1.5)).is_err());
        assert!(anchor_queries(&pair(-0.1)).is_err());
    }

    fn small() -> impl Strategy<Value = Vec<f32>> {
        proptest::collection::vec(-5.0f32..5.0, 6)
    }

    proptest! {
        #[test]
        fn complementary_weights_sum(a in small(), b in small(), l in 0.0f64..=1.0) {
            let a = Tensor::new(vec![2, 3], a).unwrap();
            let b = Tensor::new(vec![2, 3], b).unwrap();
            let x = anchor_queries(&QueryPair { q_c: a.clone(), q_cs: b.clone(), lambda: l }).unwrap();
            let y = anchor_queries(&QueryPair { q_c: a.clone(), q_cs: b.clone(), lambda: 1.0 - l }).unwrap();
            for i in 0..6 {
                prop_assert!((x.data()[i] + y.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-5);
            }
        }

        #[test]
        fn commutes_with_linear_maps(a in small(), b in small(), l in 0.0f64..=1.0, s in -3.0f32..3.0) {
            // Linear map: scale then swap the two rows.
            let map = |t: &Tensor| {
                let d = t.data();
                Tensor::new(vec![2, 3], [&d[3..], &d[..3]].concat().iter().map(|v| v * s).collect()).unwrap()
            };
            let a = Tensor::new(vec![2, 3], a).unwrap();
            let b = Tensor::new(vec![2, 3], b).unwrap();
            let lhs = map(&anchor_queries(&QueryPair { q_c: a.clone(), q_cs: b.clone(), lambda: l }).unwrap());
            let rhs = anchor_queries(&QueryPair { q_c: map(&a), q_cs: map(&b), lambda: l }).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-4);
        }
    }
}
