//! Per-variable statistics fitted on training rows and the transforms that
//! apply them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::extract::WindowEvent;

/// Nearest-rank percentile of sorted data: the value at rank `ceil(p/100 * n)`.
pub fn nearest_rank(sorted: &[f64], percentile: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

/// Winsorization bounds for one variable. An unbounded side is stored as
/// `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipBounds {
    #[serde(serialize_with = "bound::serialize", deserialize_with = "bound::low")]
    pub low: f64,
    #[serde(serialize_with = "bound::serialize", deserialize_with = "bound::high")]
    pub high: f64,
}

mod bound {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn low<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }

    pub fn high<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl ClipBounds {
    pub const UNBOUNDED: ClipBounds = ClipBounds {
        low: f64::NEG_INFINITY,
        high: f64::INFINITY,
    };

    /// 1st/99th nearest-rank percentiles; with fewer than two values the
    /// bounds degenerate to (min, max).
    pub fn fit(values: &[f64]) -> ClipBounds {
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        sorted.sort_by(f64::total_cmp);
        match sorted.len() {
            0 => ClipBounds::UNBOUNDED,
            1 => ClipBounds {
                low: sorted[0],
                high: sorted[0],
            },
            _ => ClipBounds {
                low: nearest_rank(&sorted, 1.0).expect("non-empty"),
                high: nearest_rank(&sorted, 99.0).expect("non-empty"),
            },
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        x.clamp(self.low, self.high)
    }
}

/// Clamps each value into its bounds.
pub fn clip_outliers(values: &[f64], bounds: ClipBounds) -> Vec<f64> {
    values.iter().map(|&v| bounds.apply(v)).collect()
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn fit(values: &[f64]) -> Standardizer {
        if values.is_empty() {
            return Standardizer { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Standardizer {
            mean,
            std: var.sqrt(),
        }
    }

    /// `(x - mean) / std`, or 0 for a constant variable.
    pub fn apply(&self, x: f64) -> f64 {
        if self.std > 1e-12 {
            (x - self.mean) / self.std
        } else {
            0.0
        }
    }
}

pub fn standardize(values: &[f64], stats: Standardizer) -> Vec<f64> {
    values.iter().map(|&v| stats.apply(v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: &[f64]) -> MinMax {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in values {
            min = min.min(v);
            max = max.max(v);
        }
        if min > max {
            return MinMax { min: 0.0, max: 0.0 };
        }
        MinMax { min, max }
    }

    /// Maps to `[0, 1]`, clamping values outside the fitted range; a constant
    /// variable maps to 0.
    pub fn apply(&self, x: f64) -> f64 {
        let range = self.max - self.min;
        if range <= 0.0 {
            0.0
        } else {
            ((x - self.min) / range).clamp(0.0, 1.0)
        }
    }
}

/// Scales each column of a row-major matrix with its fitted range.
pub fn scale_minmax(matrix: &mut [Vec<f64>], ranges: &[MinMax]) {
    for row in matrix {
        for (x, r) in row.iter_mut().zip(ranges) {
            *x = r.apply(*x);
        }
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return None;
    }
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Most frequent value; ties go to the lexicographically smallest.
pub fn mode<'a, I: IntoIterator<Item = &'a str>>(values: I) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (v, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((v, c));
        }
    }
    best.map(|(v, _)| v.to_string())
}

/// Fills one stay's per-shift series in place: interior gaps by linear
/// interpolation over `positions`, leading and trailing gaps from the nearest
/// observation, and an all-missing series with `fallback`.
pub fn impute_series(series: &[Option<f64>], positions: &[f64], fallback: f64) -> Vec<f64> {
    debug_assert_eq!(series.len(), positions.len());
    let observed: Vec<usize> = (0..series.len()).filter(|&i| series[i].is_some()).collect();
    if observed.is_empty() {
        return vec![fallback; series.len()];
    }
    let first = observed[0];
    let last = *observed.last().expect("non-empty");
    let mut out = vec![0.0; series.len()];
    let mut next_obs = 0;
    for i in 0..series.len() {
        if let Some(v) = series[i] {
            out[i] = v;
            next_obs += 1;
            continue;
        }
        if i < first {
            out[i] = series[first].expect("observed");
        } else if i > last {
            out[i] = series[last].expect("observed");
        } else {
            let right = observed[next_obs];
            let left = observed[next_obs - 1];
            let (x0, x1) = (positions[left], positions[right]);
            let (y0, y1) = (series[left].expect("observed"), series[right].expect("observed"));
            let frac = if x1 > x0 { (positions[i] - x0) / (x1 - x0) } else { 0.5 };
            out[i] = y0 + frac * (y1 - y0);
        }
    }
    out
}

/// Imputes a row-major matrix whose rows are ordered shifts; `groups[i]`
/// identifies the stay of row i and interpolation never crosses stays.
/// `fallbacks[j]` fills column j where a stay has no observation at all.
pub fn impute_tabular(
    matrix: &[Vec<Option<f64>>],
    groups: &[usize],
    positions: &[f64],
    fallbacks: &[f64],
) -> Vec<Vec<f64>> {
    let n_cols = fallbacks.len();
    let mut out: Vec<Vec<f64>> = vec![vec![0.0; n_cols]; matrix.len()];
    let mut start = 0;
    while start < matrix.len() {
        let mut end = start + 1;
        while end < matrix.len() && groups[end] == groups[start] {
            end += 1;
        }
        for j in 0..n_cols {
            let column: Vec<Option<f64>> = matrix[start..end].iter().map(|r| r[j]).collect();
            let filled = impute_series(&column, &positions[start..end], fallbacks[j]);
            for (k, v) in filled.into_iter().enumerate() {
                out[start + k][j] = v;
            }
        }
        start = end;
    }
    out
}

/// Mean value per column of `columns` (catalog codes) in the window; `None`
/// where the variable was not observed.
pub fn aggregate_window(window: &[WindowEvent], columns: &[usize]) -> Vec<Option<f64>> {
    let mut position = BTreeMap::new();
    for (j, &code) in columns.iter().enumerate() {
        position.insert(code, j);
    }
    let mut sums = vec![0.0; columns.len()];
    let mut counts = vec![0usize; columns.len()];
    for e in window {
        if let Some(&j) = position.get(&e.code) {
            sums[j] += e.value;
            counts[j] += 1;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Independent nearest-rank oracle: smallest value with at least p% of
    /// the data at or below it.
    fn nearest_rank_oracle(values: &[f64], p: f64) -> f64 {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        *sorted
            .iter()
            .find(|&&v| {
                let at_or_below = sorted.iter().filter(|&&w| w <= v).count() as f64;
                at_or_below / n * 100.0 >= p
            })
            .unwrap()
    }

    #[test]
    fn unbounded_clip_survives_json() {
        let json = serde_json::to_string(&ClipBounds::UNBOUNDED).unwrap();
        assert_eq!(json, r#"{"low":null,"high":null}"#);
        let back: ClipBounds = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ClipBounds::UNBOUNDED);
        let b = ClipBounds { low: -1.5, high: 2.0 };
        assert_eq!(serde_json::from_str::<ClipBounds>(&serde_json::to_string(&b).unwrap()).unwrap(), b);
    }

    #[test]
    fn winsorizes_to_percentiles() {
        let train: Vec<f64> = (0..=100).map(f64::from).collect();
        let bounds = ClipBounds::fit(&train);
        assert_eq!(bounds.high, nearest_rank_oracle(&train, 99.0));
        assert_eq!(bounds.low, nearest_rank_oracle(&train, 1.0));
        assert_eq!(bounds.high, 99.0);
        assert_eq!(bounds.low, 1.0);
        assert_eq!(clip_outliers(&[150.0, 50.0, -3.0], bounds), vec![99.0, 50.0, 1.0]);
    }

    #[test]
    fn degenerate_bounds() {
        let bounds = ClipBounds::fit(&[4.0, 4.0, 4.0]);
        assert_eq!(clip_outliers(&[-10.0, 4.0, 100.0], bounds), vec![4.0; 3]);
        let single = ClipBounds::fit(&[7.0]);
        assert_eq!(single, ClipBounds { low: 7.0, high: 7.0 });
        assert_eq!(ClipBounds::fit(&[]).apply(1e9), 1e9);
    }

    #[test]
    fn standardizes_population_std() {
        let values = [1.0, 2.0, 3.0];
        let s = Standardizer::fit(&values);
        let z = standardize(&values, s);
        // mean 2, population std sqrt(2/3)
        let oracle: Vec<f64> = values.iter().map(|v| (v - 2.0) / (2.0f64 / 3.0).sqrt()).collect();
        for (a, b) in z.iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(z[0], -1.2247, epsilon = 1e-4);
        assert_abs_diff_eq!(z[2], 1.2247, epsilon = 1e-4);
        // Already standardized data is left unchanged.
        let again = standardize(&z, Standardizer::fit(&z));
        for (a, b) in again.iter().zip(&z) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(Standardizer::fit(&[5.0, 5.0]).apply(5.0), 0.0);
    }

    #[test]
    fn minmax_examples() {
        let r = MinMax::fit(&[2.0, 6.0, 3.0]);
        assert_eq!(r.apply(4.0), 0.5);
        assert_eq!(r.apply(8.0), 1.0);
        assert_eq!(r.apply(-8.0), 0.0);
        assert_eq!(MinMax::fit(&[3.0, 3.0]).apply(3.0), 0.0);
        let mut m = vec![vec![2.0, 1.0], vec![6.0, 1.0]];
        scale_minmax(&mut m, &[r, MinMax::fit(&[1.0])]);
        assert_eq!(m, vec![vec![0.0, 0.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn series_imputation() {
        let pos = [0.0, 1.0, 2.0];
        assert_eq!(impute_series(&[Some(1.0), None, Some(3.0)], &pos, 0.0), vec![1.0, 2.0, 3.0]);
        assert_eq!(impute_series(&[None, None], &pos[..2], 0.0), vec![0.0, 0.0]);
        assert_eq!(impute_series(&[None], &pos[..1], 80.0), vec![80.0]);
        assert_eq!(impute_series(&[None, Some(5.0), None], &pos, 0.0), vec![5.0, 5.0, 5.0]);
        // Interpolation over uneven positions.
        assert_eq!(
            impute_series(&[Some(0.0), None, Some(4.0)], &[0.0, 1.0, 4.0], 0.0),
            vec![0.0, 1.0, 4.0]
        );
    }

    #[test]
    fn tabular_imputation_respects_groups() {
        let m = vec![
            vec![Some(1.0), None],
            vec![None, None],
            vec![Some(10.0), None],
            vec![None, Some(2.0)],
        ];
        let out = impute_tabular(&m, &[0, 0, 1, 1], &[0.0, 1.0, 0.0, 1.0], &[-1.0, 0.0]);
        assert_eq!(out, vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![10.0, 2.0], vec![10.0, 2.0]]);
    }

    #[test]
    fn aggregates_means() {
        let ev = |code, value| WindowEvent { offset: -5, code, value };
        let w = [ev(0, 80.0), ev(0, 90.0), ev(2, 7.0)];
        assert_eq!(aggregate_window(&w, &[0, 1, 2]), vec![Some(85.0), None, Some(7.0)]);
    }

    #[test]
    fn median_and_mode() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(mode(["b", "a", "b", "a"]), Some("a".to_string()));
        assert_eq!(mode(["x", "y", "y"]), Some("y".to_string()));
    }

    proptest! {
        #[test]
        fn nearest_rank_matches_oracle(values in prop::collection::vec(-100.0f64..100.0, 1..60), p in 0.5f64..99.5) {
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assert_eq!(nearest_rank(&sorted, p).unwrap(), nearest_rank_oracle(&values, p));
        }

        #[test]
        fn minmax_lands_in_unit_interval(train in prop::collection::vec(-50.0f64..50.0, 1..40), x in -100.0f64..100.0) {
            let r = MinMax::fit(&train);
            for v in &train {
                let s = r.apply(*v);
                prop_assert!((0.0..=1.0).contains(&s));
            }
            prop_assert!((0.0..=1.0).contains(&r.apply(x)));
        }
    }
}
