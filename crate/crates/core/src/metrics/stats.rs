//! Distribution tails and the ICC / Welch tests built on them.

use serde::{Deserialize, Serialize};

use super::MetricsError;

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection keeps the approximation in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + 7.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided Student-t tail probability P(|T| >= |t|).
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Upper tail P(F >= f) for the F distribution with (d1, d2) dfs.
pub fn f_upper_tail(f: f64, d1: f64, d2: f64) -> f64 {
    if f.is_infinite() {
        return 0.0;
    }
    if f <= 0.0 {
        return 1.0;
    }
    reg_inc_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's unequal-variance t-test, two-sided.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult, MetricsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::SampleTooSmall(a.len().min(b.len())));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(MetricsError::Degenerate("both samples have zero variance".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchResult {
        t,
        df,
        p_value: student_t_two_sided(t, df),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccResult {
    pub design: String,
    pub icc: f64,
    pub f_statistic: f64,
    pub df: (f64, f64),
    pub p_value: f64,
    pub ms_rows: f64,
    pub ms_cols: f64,
    pub ms_error: f64,
}

/// ICC(2,k), consistency, average measures, from a subjects x raters matrix.
pub fn icc_2k(ratings: &[Vec<f64>]) -> Result<IccResult, MetricsError> {
    let n = ratings.len();
    if n < 2 {
        return Err(MetricsError::SampleTooSmall(n));
    }
    let k = ratings[0].len();
    if k < 2 {
        return Err(MetricsError::Shape("need at least 2 raters".into()));
    }
    if let Some(i) = ratings.iter().position(|r| r.len() != k) {
        return Err(MetricsError::Shape(format!("row {i} has {} ratings, expected {k}", ratings[i].len())));
    }
    if ratings.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MetricsError::Shape("non-finite rating".into()));
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = ratings.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = ratings.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..k).map(|j| ratings.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let ss_rows = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_cols = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_total: f64 = ratings.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    let ss_error = (ss_total - ss_rows - ss_cols).max(0.0);
    let df_rows = nf - 1.0;
    let df_err = (nf - 1.0) * (kf - 1.0);
    let ms_rows = ss_rows / df_rows;
    let ms_cols = ss_cols / (kf - 1.0);
    let ms_error = ss_error / df_err;
    let scale = ratings.iter().flatten().map(|v| v.abs()).fold(1.0, f64::max);
    if ms_rows <= 1e-12 * scale * scale {
        return Err(MetricsError::Degenerate("no between-subject variance; ICC undefined".into()));
    }
    let ms_error = if ms_error <= 1e-12 * scale * scale { 0.0 } else { ms_error };
    let f = if ms_error == 0.0 { f64::INFINITY } else { ms_rows / ms_error };
    Ok(IccResult {
        design: "ICC(2,k) consistency".into(),
        icc: (ms_rows - ms_error) / ms_rows,
        f_statistic: f,
        df: (df_rows, df_err),
        p_value: f_upper_tail(f, df_rows, df_err),
        ms_rows,
        ms_cols,
        ms_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson integration of the beta density over [0, x]. For
    /// a < 1 the substitution u = t^a removes the singularity at 0.
    pub(crate) fn inc_beta_oracle(a: f64, b: f64, x: f64) -> f64 {
        let ln_b = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
        let (upper, scale, f): (f64, f64, Box<dyn Fn(f64) -> f64>) = if a >= 1.0 {
            (x, 1.0, Box::new(move |t: f64| t.powf(a - 1.0) * (1.0 - t).powf(b - 1.0)))
        } else {
            (x.powf(a), 1.0 / a, Box::new(move |u: f64| (1.0 - u.powf(1.0 / a)).powf(b - 1.0)))
        };
        let n = 200_000;
        let h = upper / n as f64;
        let mut s = f(0.0) + f(upper);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(i as f64 * h);
        }
        (s * h / 3.0) * scale / ln_b.exp()
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn incomplete_beta_matches_integration() {
        for &(a, b, x) in &[
            (4.0, 0.5, 8.0 / 9.0),
            (2.0, 3.0, 0.3),
            (0.5, 0.5, 0.2),
            (1.0, 1.0, 0.7),
            (10.0, 2.5, 0.9),
            (3.5, 7.0, 0.25),
        ] {
            let got = reg_inc_beta(a, b, x);
            let want = inc_beta_oracle(a, b, x);
            assert!((got - want).abs() < 1e-8, "I_{x}({a},{b}) = {got} vs {want}");
            let reference = statrs::function::beta::beta_reg(a, b, x);
            assert!((got - reference).abs() < 1e-10, "I_{x}({a},{b}) = {got} vs {reference}");
        }
    }

    #[test]
    fn welch_examples() {
        let r = welch_t(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((r.t + 1.0).abs() < 1e-12);
        assert!((r.df - 8.0).abs() < 1e-12);
        assert!((r.p_value - 0.3466).abs() < 1e-3, "{}", r.p_value);
        let same = welch_t(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(same.t, 0.0);
        assert!((same.p_value - 1.0).abs() < 1e-12);
        let far = welch_t(&[1.0, 1.1, 0.9, 1.05], &[9.0, 9.2, 8.9, 9.1]).unwrap();
        assert!(far.p_value < 0.05);
        assert!(welch_t(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(welch_t(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn icc_examples() {
        let shift = vec![vec![1.0, 2.0], vec![2.0, 3.0], vec![3.0, 4.0]];
        let r = icc_2k(&shift).unwrap();
        assert!((r.ms_rows - 2.0).abs() < 1e-12);
        assert_eq!(r.ms_error, 0.0);
        assert!((r.icc - 1.0).abs() < 1e-12);
        assert_eq!(r.df, (2.0, 2.0));
        let ident = vec![vec![1.0, 1.0], vec![3.0, 3.0], vec![2.0, 2.0]];
        assert!((icc_2k(&ident).unwrap().icc - 1.0).abs() < 1e-12);
        let flat = vec![vec![2.0, 2.0], vec![2.0, 2.0]];
        assert!(matches!(icc_2k(&flat), Err(MetricsError::Degenerate(_))));
    }

    #[test]
    fn icc_hand_anova() {
        // Sums of squares recomputed directly from their definitions.
        let m = vec![vec![2.0, 2.0], vec![3.0, 3.0], vec![5.0, 3.0]];
        let r = icc_2k(&m).unwrap();
        let grand = 18.0 / 6.0;
        let sst: f64 = m.iter().flatten().map(|v: &f64| (v - grand).powi(2)).sum();
        let rows = [2.0, 3.0, 4.0];
        let ssr = 2.0 * rows.iter().map(|x: &f64| (x - grand).powi(2)).sum::<f64>();
        let cols = [10.0 / 3.0, 8.0 / 3.0];
        let ssc = 3.0 * cols.iter().map(|x: &f64| (x - grand).powi(2)).sum::<f64>();
        let mse = (sst - ssr - ssc) / 2.0;
        let msr = ssr / 2.0;
        assert!((r.icc - (msr - mse) / msr).abs() < 1e-12);
        assert!((r.f_statistic - msr / mse).abs() < 1e-12);
        assert!(r.p_value > 0.0 && r.p_value < 1.0);
    }
}
