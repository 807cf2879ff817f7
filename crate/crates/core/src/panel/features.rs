use ndarray::{Array1, Array3, Axis};

use super::ReturnPanel;

/// Values with an observation mask; entries where `observed` is false carry no
/// information.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedCube {
    pub values: Array3<f64>,
    pub observed: Array3<bool>,
}

impl MaskedCube {
    pub fn dense(values: Array3<f64>) -> Self {
        let observed = Array3::from_elem(values.raw_dim(), true);
        Self { values, observed }
    }
}

/// Per-date model inputs: normalized characteristics, their cross-sectional
/// medians, and the risk-free rate (`P = 2M + 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    /// `T x N x P`.
    pub values: Array3<f64>,
    pub names: Vec<String>,
}

impl FeatureMatrix {
    /// Normalize, impute and augment the panel's characteristics.
    pub fn from_panel(panel: &ReturnPanel) -> Self {
        let normalized = rank_normalize(panel.characteristics());
        let dense = impute(&normalized);
        let mut fm = augment_features(&dense, panel.risk_free());
        let m = panel.n_characteristics();
        let mut names: Vec<String> = panel.characteristic_names().to_vec();
        names.extend(panel.characteristic_names().iter().map(|c| format!("median_{c}")));
        names.push("rf".into());
        debug_assert_eq!(names.len(), 2 * m + 1);
        fm.names = names;
        fm
    }

    pub fn dim(&self) -> usize {
        self.values.len_of(Axis(2))
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Cross-sectional rank quantiles `(rank - 0.5) / n_observed` per date and
/// characteristic; tied values share their average rank.
pub fn rank_normalize(raw: &MaskedCube) -> MaskedCube {
    let (t, n, m) = raw.values.dim();
    let mut out = Array3::<f64>::zeros((t, n, m));
    let mut idx: Vec<usize> = Vec::with_capacity(n);
    for d in 0..t {
        for c in 0..m {
            idx.clear();
            idx.extend((0..n).filter(|&i| raw.observed[[d, i, c]]));
            let k = idx.len();
            if k == 0 {
                continue;
            }
            idx.sort_by(|&a, &b| raw.values[[d, a, c]].total_cmp(&raw.values[[d, b, c]]));
            let mut start = 0;
            while start < k {
                let v = raw.values[[d, idx[start], c]];
                let mut end = start + 1;
                while end < k && raw.values[[d, idx[end], c]] == v {
                    end += 1;
                }
                // 1-based ranks start+1..=end share their mean.
                let avg_rank = (start + 1 + end) as f64 / 2.0;
                let q = (avg_rank - 0.5) / k as f64;
                for &i in &idx[start..end] {
                    out[[d, i, c]] = q;
                }
                start = end;
            }
        }
    }
    MaskedCube {
        values: out,
        observed: raw.observed.clone(),
    }
}

/// Fills masked entries: last observed value of the same asset, else the
/// date's cross-sectional median of observed values, else 0.5.
pub fn impute(normalized: &MaskedCube) -> Array3<f64> {
    let (t, n, m) = normalized.values.dim();
    let mut out = normalized.values.clone();
    let mut last: Vec<Option<f64>> = vec![None; n * m];
    let mut buf = Vec::with_capacity(n);
    for d in 0..t {
        for c in 0..m {
            buf.clear();
            buf.extend(
                (0..n)
                    .filter(|&i| normalized.observed[[d, i, c]])
                    .map(|i| normalized.values[[d, i, c]]),
            );
            buf.sort_by(f64::total_cmp);
            let fallback = if buf.is_empty() { 0.5 } else { median(&buf) };
            for i in 0..n {
                let slot = &mut last[i * m + c];
                if normalized.observed[[d, i, c]] {
                    *slot = Some(normalized.values[[d, i, c]]);
                } else {
                    out[[d, i, c]] = slot.unwrap_or(fallback);
                }
            }
        }
    }
    out
}

/// Appends per-date cross-sectional medians (broadcast to every asset) and the
/// risk-free rate to dense normalized characteristics.
pub fn augment_features(normalized: &Array3<f64>, risk_free: &Array1<f64>) -> FeatureMatrix {
    let (t, n, m) = normalized.dim();
    let p = 2 * m + 1;
    let mut values = Array3::<f64>::zeros((t, n, p));
    let mut buf = Vec::with_capacity(n);
    for d in 0..t {
        for c in 0..m {
            buf.clear();
            buf.extend((0..n).map(|i| normalized[[d, i, c]]));
            buf.sort_by(f64::total_cmp);
            let med = median(&buf);
            for i in 0..n {
                values[[d, i, c]] = normalized[[d, i, c]];
                values[[d, i, m + c]] = med;
            }
        }
        for i in 0..n {
            values[[d, i, 2 * m]] = risk_free[d];
        }
    }
    let names = (0..m)
        .map(|c| format!("char_{c}"))
        .chain((0..m).map(|c| format!("median_char_{c}")))
        .chain(std::iter::once("rf".to_string()))
        .collect();
    FeatureMatrix { values, names }
}
