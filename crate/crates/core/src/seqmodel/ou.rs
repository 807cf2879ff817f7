use crate::error::{Error, Result};
use crate::panel::TRADING_DAYS;

pub const MIN_OU_WINDOW: usize = 10;

/// Ornstein-Uhlenbeck fit of a price-like series through its AR(1) form
/// `X_{t+1} = a + b X_t + ζ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OUFit {
    pub intercept: f64,
    pub slope: f64,
    /// Mean-reversion speed per year.
    pub kappa: f64,
    pub mean: f64,
    pub sigma_eq: f64,
    /// `(X_w - m) / σ_eq`, or 0 when `σ_eq` is 0.
    pub s_score: f64,
}

impl OUFit {
    pub fn is_valid(&self) -> bool {
        self.sigma_eq > 0.0
    }
}

/// Least-squares AR(1) fit of `series` (e.g. cumulative residual returns).
///
/// `Var(ζ)` is the mean squared regression residual.
pub fn ou_fit(series: &[f64]) -> Result<OUFit> {
    let w = series.len();
    if w < MIN_OU_WINDOW {
        return Err(Error::InsufficientHistory {
            needed: MIN_OU_WINDOW,
            available: w,
        });
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("OU series".into()));
    }
    let x = &series[..w - 1];
    let y = &series[1..];
    let n = (w - 1) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let scale = x.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    if sxx <= 1e-24 * scale * scale * n {
        return Err(Error::DegenerateFit("constant series".into()));
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    if !(b > 0.0 && b < 1.0) {
        return Err(Error::NotMeanReverting { slope: b });
    }
    let var_zeta = x
        .iter()
        .zip(y)
        .map(|(xv, yv)| {
            let z = yv - a - b * xv;
            z * z
        })
        .sum::<f64>()
        / n;
    let mean = a / (1.0 - b);
    let sigma_eq = (var_zeta / (1.0 - b * b)).sqrt();
    let s_score = if sigma_eq > 0.0 {
        (series[w - 1] - mean) / sigma_eq
    } else {
        0.0
    };
    Ok(OUFit {
        intercept: a,
        slope: b,
        kappa: -TRADING_DAYS * b.ln(),
        mean,
        sigma_eq,
        s_score,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    Short,
    Flat,
    Long,
}

impl Position {
    pub fn weight(self) -> f64 {
        match self {
            Position::Short => -1.0,
            Position::Flat => 0.0,
            Position::Long => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub open: f64,
    pub close: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            open: 1.25,
            close: 0.5,
        }
    }
}

/// Next position given the s-score of the latest fit.
pub fn threshold_policy(fit: &OUFit, current: Position, th: &Thresholds) -> Position {
    let s = fit.s_score;
    match current {
        Position::Flat if s > th.open => Position::Short,
        Position::Flat if s < -th.open => Position::Long,
        Position::Long if s > -th.close => Position::Flat,
        Position::Short if s < th.close => Position::Flat,
        held => held,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_score(s: f64) -> OUFit {
        OUFit {
            intercept: 0.0,
            slope: 0.5,
            kappa: 1.0,
            mean: 0.0,
            sigma_eq: 1.0,
            s_score: s,
        }
    }

    #[test]
    fn noiseless_ar1_recovered() {
        let mut xs = vec![3.0];
        for _ in 0..19 {
            let last = *xs.last().unwrap();
            xs.push(0.1 + 0.5 * last);
        }
        let fit = ou_fit(&xs).unwrap();
        assert!((fit.intercept - 0.1).abs() < 1e-10);
        assert!((fit.slope - 0.5).abs() < 1e-10);
        assert!((fit.kappa - 252.0 * 2.0_f64.ln()).abs() < 1e-7);
        assert!((fit.mean - 0.2).abs() < 1e-10);
    }

    #[test]
    fn constant_series_is_degenerate() {
        assert!(matches!(ou_fit(&[1.5; 30]), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn trending_series_is_not_mean_reverting() {
        let xs: Vec<f64> = (0..30).map(|i| 1.1_f64.powi(i)).collect();
        assert!(matches!(ou_fit(&xs), Err(Error::NotMeanReverting { .. })));
    }

    #[test]
    fn short_window_rejected() {
        assert!(matches!(ou_fit(&[0.0, 1.0, 0.5]), Err(Error::InsufficientHistory { .. })));
    }

    #[test]
    fn rule_table() {
        let th = Thresholds::default();
        assert_eq!(threshold_policy(&with_score(-2.0), Position::Flat, &th), Position::Long);
        assert_eq!(threshold_policy(&with_score(2.0), Position::Flat, &th), Position::Short);
        assert_eq!(threshold_policy(&with_score(0.3), Position::Long, &th), Position::Flat);
        assert_eq!(threshold_policy(&with_score(1.0), Position::Flat, &th), Position::Flat);
        assert_eq!(threshold_policy(&with_score(0.3), Position::Short, &th), Position::Flat);
        assert_eq!(threshold_policy(&with_score(0.8), Position::Short, &th), Position::Short);
        assert_eq!(threshold_policy(&with_score(-0.8), Position::Long, &th), Position::Long);
    }
}
