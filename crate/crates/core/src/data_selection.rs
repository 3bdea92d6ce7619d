//! Training-image selection.
//!
//! Two independent rankings are produced and interleaved:
//!
//! * visual similarity: the best log-density of an image's feature vectors
//!   under a full-covariance Gaussian mixture fit (EM) to a reference set;
//! * object diversity: a weighted count of annotated objects of interest.
//!
//! The mixture size can be chosen with the Bayesian Information Criterion.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Error, Result};

pub const RIDGE: f64 = 1e-6;
pub const CONVERGENCE_NATS: f64 = 1e-3;
pub const MAX_ITERATIONS: usize = 500;
pub const DEFAULT_SAMPLE: usize = 24_000;

// ------------------------------------------------------------ features ----

/// Feature vectors keyed by image id; an image may own several rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    rows: Vec<(String, Vec<f64>)>,
}

impl FeatureTable {
    pub fn new(rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = rows.first().map_or(0, |(_, v)| v.len());
        for (id, v) in &rows {
            if v.len() != dim {
                return Err(invalid(format!(
                    "image `{id}` row has {} values, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("image `{id}` row has non-finite values")));
            }
        }
        Ok(FeatureTable { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[(String, Vec<f64>)] {
        &self.rows
    }

    /// Rows grouped by image id, in order of first appearance.
    pub fn by_image(&self) -> Vec<(&str, Vec<&[f64]>)> {
        let mut order: Vec<(&str, Vec<&[f64]>)> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        for (id, v) in &self.rows {
            let i = *slot.entry(id.as_str()).or_insert_with(|| {
                order.push((id.as_str(), Vec::new()));
                order.len() - 1
            });
            order[i].1.push(v.as_slice());
        }
        order
    }

    /// Reads `image_id,v1,...,vd` lines; a leading header row is skipped.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let records = read_csv_records(path)?;
        let mut rows = Vec::with_capacity(records.len());
        for (line, rec) in records {
            let values = rec[1..]
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| format_err(format!("line {line}: {e}")))?;
            rows.push((rec[0].clone(), values));
        }
        FeatureTable::new(rows)
    }
}

/// Non-empty CSV records with their 1-based line numbers. A first record
/// whose second field is not numeric is taken as a header.
fn read_csv_records(path: impl AsRef<Path>) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let fields: Vec<String> = rec.iter().map(str::to_string).collect();
        if fields.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        if fields.len() < 2 {
            return Err(format_err(format!(
                "line {}: expected at least two fields",
                i + 1
            )));
        }
        if out.is_empty() && i == 0 && fields[1].trim().parse::<f64>().is_err() {
            continue;
        }
        out.push((i + 1, fields));
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => format_err(format!("csv: {other:?}")),
    }
}

/// Element-wise mean of each image's rows; one row per image.
pub fn average_rows(table: &FeatureTable) -> FeatureTable {
    let rows = table
        .by_image()
        .into_iter()
        .map(|(id, vs)| {
            let mut mean = vec![0.0; table.dim];
            for v in &vs {
                for (m, x) in mean.iter_mut().zip(*v) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= vs.len() as f64);
            (id.to_string(), mean)
        })
        .collect();
    FeatureTable {
        dim: table.dim,
        rows,
    }
}

// ---------------------------------------------------------------- GMM ----

#[derive(Debug, Clone)]
struct Component {
    weight: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    cholesky: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl Component {
    fn new(weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        let cholesky = Cholesky::new(covariance.clone()).ok_or_else(|| {
            Error::Numeric("covariance is not positive definite despite ridge".into())
        })?;
        let log_det: f64 = 2.0
            * cholesky
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();
        let log_norm = weight.ln() - 0.5 * (d as f64 * (2.0 * PI).ln() + log_det);
        Ok(Component {
            weight,
            mean,
            covariance,
            cholesky,
            log_norm,
        })
    }

    /// `ln π_k + ln 𝒩(x; μ_k, Σ_k)`.
    fn weighted_log_density(&self, x: &[f64]) -> f64 {
        let diff =
            DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let z = self
            .cholesky
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }
}

/// Full-covariance Gaussian mixture. Immutable once built.
#[derive(Debug, Clone)]
pub struct GmmModel {
    dim: usize,
    components: Vec<Component>,
}

/// JSON form of a model; covariances are row-major `d·d` vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmFile {
    pub k: usize,
    pub d: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
}

impl GmmModel {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(invalid(
                "mixture needs matching, non-empty weights/means/covariances",
            ));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(invalid("mixture dimension must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(invalid("mixture weights must be positive and sum to 1"));
        }
        let components = weights
            .into_iter()
            .zip(means)
            .zip(covariances)
            .map(|((w, m), c)| {
                if m.len() != dim || c.len() != dim * dim {
                    return Err(invalid("component shape does not match dimension"));
                }
                let cov = DMatrix::from_row_slice(dim, dim, &c);
                if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
                    return Err(invalid("covariance is not symmetric"));
                }
                Component::new(w, DVector::from_vec(m), cov)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GmmModel { dim, components })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.components[k].mean.as_slice()
    }

    pub fn covariance(&self, k: usize) -> &DMatrix<f64> {
        &self.components[k].covariance
    }

    pub fn to_file(&self) -> GmmFile {
        GmmFile {
            k: self.k(),
            d: self.dim,
            weights: self.weights(),
            means: self
                .components
                .iter()
                .map(|c| c.mean.as_slice().to_vec())
                .collect(),
            covariances: self
                .components
                .iter()
                .map(|c| c.covariance.transpose().as_slice().to_vec())
                .collect(),
        }
    }

    pub fn from_file(file: GmmFile) -> Result<Self> {
        if file.weights.len() != file.k {
            return Err(invalid("model `k` does not match weight count"));
        }
        let model = GmmModel::new(file.weights, file.means, file.covariances)?;
        if model.dim != file.d {
            return Err(invalid("model `d` does not match mean length"));
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.weighted_log_density(x);
        }
    }

    /// `ln Σ_k π_k 𝒩(x; μ_k, Σ_k)` via log-sum-exp.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(invalid(format!(
                "feature has {} values, model dimension is {}",
                x.len(),
                self.dim
            )));
        }
        let mut buf = vec![0.0; self.k()];
        self.component_log_densities(x, &mut buf);
        Ok(log_sum_exp(&buf))
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Result of [`fit_gmm`]. `trace[i]` is the total log-likelihood of the
/// parameters after `i` M-steps; the returned model matches the last entry.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub samples: usize,
    pub warnings: Vec<String>,
}

impl GmmFit {
    pub fn log_likelihood(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

/// Fits a `k`-component mixture by EM.
///
/// At most `sample` rows (drawn without replacement) are used. Means are
/// seeded k-means++ style and every M-step adds [`RIDGE`] to the covariance
/// diagonals. Iteration stops once the log-likelihood gains less than
/// [`CONVERGENCE_NATS`] or after [`MAX_ITERATIONS`] M-steps.
pub fn fit_gmm(table: &FeatureTable, k: usize, seed: u64, sample: Option<usize>) -> Result<GmmFit> {
    if k == 0 {
        return Err(invalid("number of components must be positive"));
    }
    if table.dim == 0 {
        return Err(invalid("features must have at least one dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<&[f64]> = match sample {
        Some(n) if n < table.len() => {
            let mut picked = index::sample(&mut rng, table.len(), n).into_vec();
            picked.sort_unstable();
            picked
                .into_iter()
                .map(|i| table.rows[i].1.as_slice())
                .collect()
        }
        _ => table.rows.iter().map(|(_, v)| v.as_slice()).collect(),
    };
    if rows.len() < k {
        return Err(invalid(format!(
            "{} rows cannot support {k} mixture components",
            rows.len()
        )));
    }
    let mut warnings = Vec::new();
    if rows.len() == k {
        warnings.push(format!(
            "{k} components for {k} rows: every component collapses onto one row"
        ));
    }

    let n = rows.len();
    let mut resp = DMatrix::<f64>::zeros(n, k);
    for (i, c) in kmeans_pp_assign(&rows, k, &mut rng).into_iter().enumerate() {
        resp[(i, c)] = 1.0;
    }
    let mut model = m_step(&rows, &resp, table.dim)?;
    let mut trace = Vec::new();
    let mut converged = false;
    for iteration in 0..=MAX_ITERATIONS {
        let ll = e_step(&model, &rows, &mut resp);
        if !ll.is_finite() {
            return Err(Error::Numeric(format!("log-likelihood became {ll}")));
        }
        if let Some(&prev) = trace.last() {
            if ll - prev < CONVERGENCE_NATS {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if iteration == MAX_ITERATIONS {
            break;
        }
        model = m_step(&rows, &resp, table.dim)?;
    }
    Ok(GmmFit {
        model,
        trace,
        converged,
        samples: n,
        warnings,
    })
}

/// k-means++ seeding followed by nearest-center assignment.
fn kmeans_pp_assign(rows: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut centers: Vec<&[f64]> = vec![rows[rng.random_range(0..rows.len())]];
    let mut dist: Vec<f64> = rows.iter().map(|r| sq(r, centers[0])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&dist) {
            Ok(w) => w.sample(rng),
            // all remaining rows coincide with a center
            Err(_) => rng.random_range(0..rows.len()),
        };
        centers.push(rows[next]);
        for (d, r) in dist.iter_mut().zip(rows) {
            *d = d.min(sq(r, rows[next]));
        }
    }
    rows.iter()
        .map(|r| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq(r, center);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// Fills `resp` with responsibilities and returns the total log-likelihood.
fn e_step(model: &GmmModel, rows: &[&[f64]], resp: &mut DMatrix<f64>) -> f64 {
    let k = model.k();
    let mut buf = vec![0.0; k];
    let mut total = 0.0;
    for (i, x) in rows.iter().enumerate() {
        model.component_log_densities(x, &mut buf);
        let lse = log_sum_exp(&buf);
        total += lse;
        for (c, v) in buf.iter().enumerate() {
            resp[(i, c)] = (v - lse).exp();
        }
    }
    total
}

fn m_step(rows: &[&[f64]], resp: &DMatrix<f64>, dim: usize) -> Result<GmmModel> {
    let n = rows.len();
    let k = resp.ncols();
    // keeps empty components finite
    let floor = 10.0 * f64::EPSILON;
    let counts: Vec<f64> = (0..k).map(|c| resp.column(c).sum() + floor).collect();
    let total: f64 = counts.iter().sum();
    let mut components = Vec::with_capacity(k);
    for c in 0..k {
        let mut mean = DVector::<f64>::zeros(dim);
        for (i, x) in rows.iter().enumerate() {
            let r = resp[(i, c)];
            for (m, v) in mean.iter_mut().zip(*x) {
                *m += r * v;
            }
        }
        mean /= counts[c];
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        let mut diff = DVector::<f64>::zeros(dim);
        for (i, x) in rows.iter().enumerate() {
            let r = resp[(i, c)];
            if r == 0.0 {
                continue;
            }
            for (d, (v, m)) in diff.iter_mut().zip(x.iter().zip(mean.iter())) {
                *d = v - m;
            }
            cov.ger(r, &diff, &diff, 1.0);
        }
        cov /= counts[c];
        for j in 0..dim {
            cov[(j, j)] += RIDGE;
        }
        components.push(Component::new(counts[c] / total, mean, cov)?);
    }
    debug_assert_eq!(n, resp.nrows());
    Ok(GmmModel { dim, components })
}

/// `ln(n)·K·(d + d²) − 2·ln L`.
pub fn bic(model: &GmmModel, n_samples: usize, log_likelihood: f64) -> Result<f64> {
    if n_samples == 0 {
        return Err(invalid("BIC needs at least one sample"));
    }
    let d = model.dim as f64;
    Ok((n_samples as f64).ln() * model.k() as f64 * (d + d * d) - 2.0 * log_likelihood)
}

/// Best log-density among an image's feature rows.
pub fn similarity(model: &GmmModel, rows: &[&[f64]]) -> Result<f64> {
    if rows.is_empty() {
        return Err(invalid("similarity needs at least one feature row"));
    }
    rows.iter()
        .map(|r| model.log_pdf(r))
        .try_fold(f64::NEG_INFINITY, |best, v| v.map(|v| best.max(v)))
}

// ------------------------------------------------------------ rankings ----

/// Image ids ordered by descending score, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranking {
    pub entries: Vec<(String, f64)>,
}

impl Ranking {
    pub fn new(mut entries: Vec<(String, f64)>) -> Self {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ranking { entries }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|(id, _)| id.as_str()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,score\n");
        for (id, score) in &self.entries {
            out.push_str(&format!("{id},{score}\n"));
        }
        out
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let entries = read_csv_records(path)?
            .into_iter()
            .map(|(line, rec)| {
                let score = rec[1]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| format_err(format!("line {line}: {e}")))?;
                Ok((rec[0].clone(), score))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ranking::new(entries))
    }
}

/// Similarity ranking of every image in `table` under `model`.
pub fn rank_by_similarity(model: &GmmModel, table: &FeatureTable) -> Result<Ranking> {
    let entries = table
        .by_image()
        .into_iter()
        .map(|(id, rows)| Ok((id.to_string(), similarity(model, &rows)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ranking::new(entries))
}

/// `Σ count_c · weight_c`.
pub fn diversity_score(counts: &[u64], weights: &[u64]) -> Result<u64> {
    if counts.len() != weights.len() {
        return Err(invalid(format!(
            "{} object categories counted but {} weights given",
            counts.len(),
            weights.len()
        )));
    }
    Ok(counts.iter().zip(weights).map(|(c, w)| c * w).sum())
}

/// Per-image category counts, `image_id,c1,...,cm`.
pub fn load_counts_csv(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<u64>)>> {
    read_csv_records(path)?
        .into_iter()
        .map(|(line, rec)| {
            let counts = rec[1..]
                .iter()
                .map(|s| s.trim().parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| format_err(format!("line {line}: {e}")))?;
            Ok((rec[0].clone(), counts))
        })
        .collect()
}

/// Diversity ranking of every counted image.
pub fn rank_by_diversity(counts: &[(String, Vec<u64>)], weights: &[u64]) -> Result<Ranking> {
    let entries = counts
        .iter()
        .map(|(id, c)| Ok((id.clone(), diversity_score(c, weights)? as f64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ranking::new(entries))
}

/// Alternately takes the next unseen id from `a` and from `b`, starting
/// with `a`, until `n` ids are collected or both sources run out.
pub fn interleave_merge(a: &[&str], b: &[&str], n: usize) -> Vec<String> {
    let sources = [a, b];
    let mut cursors = [0usize; 2];
    let mut seen: HashSet<&str> = HashSet::new();
    let mut out = Vec::new();
    let mut turn = 0;
    while out.len() < n {
        let mut picked = None;
        for attempt in 0..2 {
            let s = (turn + attempt) % 2;
            while let Some(&id) = sources[s].get(cursors[s]) {
                cursors[s] += 1;
                if seen.insert(id) {
                    picked = Some(id);
                    break;
                }
            }
            if picked.is_some() {
                break;
            }
        }
        match picked {
            Some(id) => out.push(id.to_string()),
            None => break,
        }
        turn = 1 - turn;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    fn table(rows: &[(&str, &[f64])]) -> FeatureTable {
        FeatureTable::new(
            rows.iter()
                .map(|(id, v)| (id.to_string(), v.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn averaging() {
        let t = table(&[("a", &[1.0, 3.0]), ("b", &[5.0, 5.0]), ("a", &[3.0, 1.0])]);
        let avg = average_rows(&t);
        assert_eq!(
            avg.rows(),
            &[("a".into(), vec![2.0, 2.0]), ("b".into(), vec![5.0, 5.0])]
        );
        let t = table(&[
            ("c", &[1.5, -1.0]),
            ("c", &[1.5, -1.0]),
            ("c", &[1.5, -1.0]),
        ]);
        assert_eq!(average_rows(&t).rows()[0].1, vec![1.5, -1.0]);
    }

    fn standard(d: usize) -> GmmModel {
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = 1.0;
        }
        GmmModel::new(vec![1.0], vec![vec![0.0; d]], vec![cov]).unwrap()
    }

    #[test]
    fn standard_normal_at_mode() {
        let v = standard(2).log_pdf(&[0.0, 0.0]).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((v + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn duplicate_components_equal_single() {
        let id = vec![1.0, 0.0, 0.0, 1.0];
        let two = GmmModel::new(
            vec![0.5, 0.5],
            vec![vec![0.3, -0.2]; 2],
            vec![id.clone(), id.clone()],
        )
        .unwrap();
        let one = GmmModel::new(vec![1.0], vec![vec![0.3, -0.2]], vec![id]).unwrap();
        for x in [[0.0, 0.0], [1.0, 2.0], [-3.0, 0.5]] {
            assert!((two.log_pdf(&x).unwrap() - one.log_pdf(&x).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn far_away_point_is_finite() {
        let m = standard(2);
        let x = [1e3, -1e3];
        // direct quadratic form: -ln 2π - |x|²/2
        let expected = -(2.0 * PI).ln() - 0.5 * (1e6 + 1e6);
        let v = m.log_pdf(&x).unwrap();
        assert!(v.is_finite());
        assert!((v - expected).abs() < 1e-9 * expected.abs());
        assert!(m.log_pdf(&[1.0]).is_err());
    }

    #[test]
    fn similarity_is_max() {
        let m = standard(2);
        let mode = [0.0, 0.0];
        let far = [10.0, 10.0];
        let at_mode = m.log_pdf(&mode).unwrap();
        assert_eq!(similarity(&m, &[&far]).unwrap(), m.log_pdf(&far).unwrap());
        assert_eq!(similarity(&m, &[&far, &mode]).unwrap(), at_mode);
        assert_eq!(similarity(&m, &[&mode, &mode, &far]).unwrap(), at_mode);
        assert!(similarity(&m, &[]).is_err());
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity_score(&[2, 1, 3], &[100, 10, 1]).unwrap(), 213);
        assert_eq!(diversity_score(&[0, 0, 0], &[100, 10, 1]).unwrap(), 0);
        assert_eq!(diversity_score(&[1, 9], &[10, 1]).unwrap(), 19);
        assert!(diversity_score(&[1], &[10, 1]).is_err());
    }

    #[test]
    fn interleave_examples() {
        assert_eq!(
            interleave_merge(&["x", "y", "z"], &["y", "u", "v"], 4),
            vec!["x", "y", "z", "u"]
        );
        assert_eq!(
            interleave_merge(&["a", "b"], &["c", "d"], 10),
            vec!["a", "c", "b", "d"]
        );
        assert!(interleave_merge(&["a"], &["b"], 0).is_empty());
        assert_eq!(interleave_merge(&[], &["b", "c"], 5), vec!["b", "c"]);
    }

    #[test]
    fn bic_arithmetic() {
        let m = GmmModel::new(
            vec![0.5, 0.5],
            vec![vec![0.0; 3]; 2],
            vec![vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]; 2],
        )
        .unwrap();
        let v = bic(&m, 100, -500.0).unwrap();
        assert!((v - (100f64.ln() * 24.0 + 1000.0)).abs() < 1e-9);
        assert!((v - 1110.524).abs() < 1e-3);
        assert_eq!(bic(&m, 100, 0.0).unwrap(), 100f64.ln() * 24.0);
        assert!(bic(&m, 0, 0.0).is_err());
    }

    #[test]
    fn ranking_order_and_ties() {
        let r = Ranking::new(vec![
            ("b".into(), 1.0),
            ("a".into(), 1.0),
            ("c".into(), 2.0),
        ]);
        assert_eq!(r.ids(), vec!["c", "a", "b"]);
    }

    fn blobs(centers: &[[f64; 2]], per: usize, std: f64, seed: u64) -> FeatureTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, std).unwrap();
        let mut rows = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for i in 0..per {
                let v = center.iter().map(|m| m + noise.sample(&mut rng)).collect();
                rows.push((format!("c{c}_{i}"), v));
            }
        }
        FeatureTable::new(rows).unwrap()
    }

    #[test]
    fn two_separated_clusters() {
        let t = blobs(&[[0.0, 0.0], [20.0, 20.0]], 200, 1.0, 3);
        let fit = fit_gmm(&t, 2, 11, None).unwrap();
        assert!(fit.converged);
        // oracle: per-cluster sample means of the generated rows
        for cluster in 0..2 {
            let rows: Vec<&Vec<f64>> = t.rows()[cluster * 200..(cluster + 1) * 200]
                .iter()
                .map(|(_, v)| v)
                .collect();
            let mean: Vec<f64> = (0..2)
                .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 200.0)
                .collect();
            let best = (0..2)
                .map(|k| {
                    let m = fit.model.mean(k);
                    (m[0] - mean[0]).abs().max((m[1] - mean[1]).abs())
                })
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-3, "mean off by {best}");
        }
    }

    #[test]
    fn fit_errors_and_warnings() {
        let t = table(&[("a", &[0.0]), ("b", &[1.0])]);
        assert!(fit_gmm(&t, 3, 0, None).is_err());
        assert!(fit_gmm(&t, 0, 0, None).is_err());
        let fit = fit_gmm(&t, 2, 0, None).unwrap();
        assert_eq!(fit.warnings.len(), 1);
    }

    #[test]
    fn subsampling_caps_rows() {
        let t = blobs(&[[0.0, 0.0]], 100, 1.0, 5);
        let fit = fit_gmm(&t, 1, 1, Some(30)).unwrap();
        assert_eq!(fit.samples, 30);
    }

    #[test]
    fn model_json_roundtrip() {
        let t = blobs(&[[0.0, 0.0], [5.0, 1.0]], 50, 0.7, 9);
        let fit = fit_gmm(&t, 2, 4, None).unwrap();
        let file = fit.model.to_file();
        let back = GmmModel::from_file(
            serde_json::from_str(&serde_json::to_string(&file).unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back.to_file(), file);
        for (_, x) in t.rows() {
            assert_eq!(back.log_pdf(x).unwrap(), fit.model.log_pdf(x).unwrap());
        }
    }
}
