use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Alternative: mean(a) > mean(b).
    Greater,
    /// Alternative: mean(a) < mean(b).
    Less,
}

/// Welch two-sample t-test with both one-sided p-values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub layer: usize,
    pub t_stat: f64,
    pub df: f64,
    pub p_greater: f64,
    pub p_less: f64,
    pub n_a: usize,
    pub n_b: usize,
}

impl TTestResult {
    pub fn p(&self, direction: Direction) -> f64 {
        match direction {
            Direction::Greater => self.p_greater,
            Direction::Less => self.p_less,
        }
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Upper tail `P(T > t)` of Student's t with `df` degrees of freedom, for `t ≥ 0`.
fn upper_tail(t: f64, df: f64) -> f64 {
    0.5 * beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

/// Welch's unequal-variance t-test of `a` against `b`.
///
/// Both samples need at least two values. Two constant samples with equal
/// means give `t = 0` and both p-values 0.5; with different means they are
/// rejected as degenerate.
pub fn one_sided_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::DegenerateSample(format!(
            "need at least two values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let base = TTestResult {
        layer: 0,
        t_stat: 0.0,
        df: na + nb - 2.0,
        p_greater: 0.5,
        p_less: 0.5,
        n_a: a.len(),
        n_b: b.len(),
    };
    if sa + sb == 0.0 {
        if ma == mb {
            return Ok(base);
        }
        return Err(Error::DegenerateSample(
            "both samples are constant with different means".into(),
        ));
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let tail = upper_tail(t.abs(), df);
    let (p_greater, p_less) = if t >= 0.0 {
        (tail, 1.0 - tail)
    } else {
        (1.0 - tail, tail)
    };
    Ok(TTestResult {
        t_stat: t,
        df,
        p_greater,
        p_less,
        ..base
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_samples() {
        let a = [0.3, 0.9, 0.1, 0.5];
        let r = one_sided_t_test(&a, &a).unwrap();
        assert_eq!(r.t_stat, 0.0);
        assert_eq!((r.p_greater, r.p_less), (0.5, 0.5));
        let c = one_sided_t_test(&[0.25; 5], &[0.25; 3]).unwrap();
        assert_eq!((c.p_greater, c.p_less), (0.5, 0.5));
    }

    #[test]
    fn separated_samples() {
        let r = one_sided_t_test(&[1.0, 2.0, 3.0], &[11.0, 12.0, 13.0]).unwrap();
        assert!(r.p_greater > 1.0 - 1e-3);
        assert!(r.p_less < 1e-3);
        assert_eq!(r.p(Direction::Less), r.p_less);
    }

    #[test]
    fn degenerate_samples() {
        assert!(one_sided_t_test(&[1.0], &[1.0, 2.0]).is_err());
        assert!(one_sided_t_test(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }

    #[test]
    #[allow(clippy::excessive_precision, clippy::type_complexity)]
    fn matches_high_precision_values() {
        // Regularized incomplete beta evaluated at 50 significant digits.
        let cases: [(&[f64], &[f64], f64, f64, f64); 5] = [
            (
                &[1.0, 2.0, 3.0, 4.0, 5.0],
                &[2.0, 3.0, 4.0, 5.0, 9.0],
                -1.1428571428571428571,
                6.4521330198186093383,
                0.85313725438224912975,
            ),
            (
                &[0.1, 0.4, 0.35, 0.8],
                &[0.05, 0.1, 0.12, 0.2, 0.07, 0.09],
                2.0996773498059180567,
                3.131551918746174023,
                0.061393439483579075555,
            ),
            (
                &[10.0, 12.0, 9.0, 11.0, 13.0, 10.0, 12.0],
                &[8.0, 9.0, 7.0, 10.0, 8.0],
                3.5195787468067569847,
                9.7623263385589724149,
                0.0028748618317197251627,
            ),
            (
                &[1.5, 2.5],
                &[0.5, 1.0, 1.5],
                1.7320508075688772935,
                1.6842105263157894737,
                0.12409426904200604345,
            ),
            (
                &[3.1, 2.9, 3.0, 3.2, 2.8, 3.05],
                &[3.0, 3.1, 2.95, 3.05],
                -0.25000000000000067654,
                7.3775216138328480867,
                0.59529658991276283426,
            ),
        ];
        for (a, b, t, df, pg) in cases {
            let r = one_sided_t_test(a, b).unwrap();
            assert!((r.t_stat - t).abs() < 1e-12, "{} vs {t}", r.t_stat);
            assert!((r.df - df).abs() < 1e-10, "{} vs {df}", r.df);
            assert!((r.p_greater - pg).abs() < 1e-9, "{} vs {pg}", r.p_greater);
            assert!((r.p_less - (1.0 - pg)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn antisymmetric_and_complementary(
            a in prop::collection::vec(-10.0f64..10.0, 2..20),
            b in prop::collection::vec(-10.0f64..10.0, 2..20),
        ) {
            let ab = one_sided_t_test(&a, &b).unwrap();
            let ba = one_sided_t_test(&b, &a).unwrap();
            prop_assert_eq!(ab.t_stat, -ba.t_stat);
            prop_assert_eq!(ab.p_greater, ba.p_less);
            prop_assert_eq!(ab.p_less, ba.p_greater);
            prop_assert!((ab.p_greater + ab.p_less - 1.0).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab.p_greater));
        }
    }
}
