//! Return and characteristic panels, feature construction, and a synthetic
//! market generator.

mod csv_io;
mod features;
mod synthetic;

use chrono::NaiveDate;
use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};

pub use csv_io::{load_csv, save_csv};
pub use features::{augment_features, impute, rank_normalize, FeatureMatrix, MaskedCube};
pub use synthetic::{synthetic_generate, SyntheticConfig, TRADING_DAYS};

/// Daily simple returns and characteristics for a fixed asset universe.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnPanel {
    dates: Vec<NaiveDate>,
    asset_ids: Vec<String>,
    characteristic_names: Vec<String>,
    returns: Array2<f64>,
    characteristics: MaskedCube,
    risk_free: Array1<f64>,
}

impl ReturnPanel {
    /// Validates and assembles a panel.
    ///
    /// `returns` is `T x N`, `characteristics` is `T x N x M` and
    /// `risk_free` has length `T`.
    pub fn new(
        dates: Vec<NaiveDate>,
        asset_ids: Vec<String>,
        characteristic_names: Vec<String>,
        returns: Array2<f64>,
        characteristics: MaskedCube,
        risk_free: Array1<f64>,
    ) -> Result<Self> {
        let (t, n) = returns.dim();
        let m = characteristic_names.len();
        if dates.len() != t || asset_ids.len() != n || risk_free.len() != t {
            return Err(Error::contract(format!(
                "panel dimensions disagree: {} dates, {} assets, returns {t}x{n}, rf {}",
                dates.len(),
                asset_ids.len(),
                risk_free.len()
            )));
        }
        if characteristics.values.dim() != (t, n, m) || characteristics.observed.dim() != (t, n, m) {
            return Err(Error::contract(format!(
                "characteristics must be {t}x{n}x{m}, got {:?}",
                characteristics.values.dim()
            )));
        }
        if let Some(w) = dates.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::DegenerateInput(format!(
                "dates not strictly increasing at {}",
                dates[w + 1]
            )));
        }
        if returns.iter().chain(risk_free.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("panel returns".into()));
        }
        let bad_char = characteristics
            .values
            .iter()
            .zip(characteristics.observed.iter())
            .any(|(v, &o)| o && !v.is_finite());
        if bad_char {
            return Err(Error::NonFinite("observed characteristic".into()));
        }
        Ok(Self {
            dates,
            asset_ids,
            characteristic_names,
            returns,
            characteristics,
            risk_free,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    pub fn characteristic_names(&self) -> &[String] {
        &self.characteristic_names
    }

    /// `T x N` daily simple returns.
    pub fn returns(&self) -> &Array2<f64> {
        &self.returns
    }

    pub fn characteristics(&self) -> &MaskedCube {
        &self.characteristics
    }

    pub fn risk_free(&self) -> &Array1<f64> {
        &self.risk_free
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.asset_ids.len()
    }

    pub fn n_characteristics(&self) -> usize {
        self.characteristic_names.len()
    }

    /// Equal-weighted market return per date.
    pub fn market_returns(&self) -> Array1<f64> {
        self.returns
            .mean_axis(ndarray::Axis(1))
            .unwrap_or_else(|| Array1::zeros(self.n_dates()))
    }

    /// Copy of the panel without the characteristics at `drop` (column indices).
    pub fn without_characteristics(&self, drop: &[usize]) -> Self {
        let keep: Vec<usize> = (0..self.n_characteristics())
            .filter(|c| !drop.contains(c))
            .collect();
        let sel = |a: &Array3<f64>| a.select(ndarray::Axis(2), &keep);
        let observed = self.characteristics.observed.select(ndarray::Axis(2), &keep);
        Self {
            dates: self.dates.clone(),
            asset_ids: self.asset_ids.clone(),
            characteristic_names: keep
                .iter()
                .map(|&c| self.characteristic_names[c].clone())
                .collect(),
            returns: self.returns.clone(),
            characteristics: MaskedCube {
                values: sel(&self.characteristics.values),
                observed,
            },
            risk_free: self.risk_free.clone(),
        }
    }

    /// Characteristic group of column `c`: the name up to its first `_`.
    pub fn characteristic_group(&self, c: usize) -> &str {
        let name = &self.characteristic_names[c];
        name.split('_').next().unwrap_or(name)
    }
}
