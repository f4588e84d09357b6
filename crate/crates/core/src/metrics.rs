//! Evaluation quantities for counterfactual explanations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::counterfactual::CounterfactualResult;
use crate::error::{Error, Result};
use crate::optim::{Adam, TrainConfig};
use crate::sample::{check_same_shape, Mat, Sample};

/// `100 * ||xc - x||^2 / (R L)`.
pub fn proximity(x: &Sample, xc: &Sample) -> Result<f64> {
    check_same_shape(&x.values, &xc.values)?;
    let n = x.values.len() as f64;
    let ss: f64 = ndarray::Zip::from(&x.values)
        .and(&xc.values)
        .fold(0.0, |acc, &a, &b| acc + (b - a) * (b - a));
    Ok(100.0 * ss / n)
}

/// Unsquared variant: `100 * sqrt(||xc - x||^2 / (R L))`.
pub fn proximity_rms(x: &Sample, xc: &Sample) -> Result<f64> {
    Ok(100.0 * (proximity(x, xc)? / 100.0).sqrt())
}

/// Percentage of features whose change exceeds its threshold. `thresholds`
/// is either a single value or one per feature in row-major order.
pub fn sparsity(x: &Sample, xc: &Sample, thresholds: &[f64]) -> Result<f64> {
    check_same_shape(&x.values, &xc.values)?;
    let n = x.values.len();
    if thresholds.len() != 1 && thresholds.len() != n {
        return Err(Error::shape(
            format!("1 or {n} thresholds"),
            thresholds.len(),
        ));
    }
    let changed = x
        .values
        .iter()
        .zip(xc.values.iter())
        .enumerate()
        .filter(|(i, (a, b))| {
            let thr = if thresholds.len() == 1 { thresholds[0] } else { thresholds[*i] };
            (*b - *a).abs() > thr
        })
        .count();
    Ok(100.0 * changed as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrechetMode {
    Diagonal,
    Full,
}

fn mean_cov(vs: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = vs.len() as f64;
    let mut mu = DVector::zeros(dim);
    for v in vs {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in vs {
        let d = DVector::from_column_slice(v) - &mu;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= n - 1.0;
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    (root, min)
}

/// Fréchet distance between Gaussian fits (unbiased covariance) of two
/// feature populations. Negative eigenvalues met while taking matrix square
/// roots are floored at zero and logged.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>], mode: FrechetMode) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two vectors per population, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dim = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|v| v.len() != dim) {
        return Err(Error::shape(format!("dimension {dim}"), bad.len()));
    }
    let (mu_a, cov_a) = mean_cov(a, dim);
    let (mu_b, cov_b) = mean_cov(b, dim);
    let mean_term = (&mu_a - &mu_b).norm_squared();
    let trace_term = match mode {
        FrechetMode::Diagonal => (0..dim)
            .map(|i| {
                let d = cov_a[(i, i)].sqrt() - cov_b[(i, i)].sqrt();
                d * d
            })
            .sum(),
        FrechetMode::Full => {
            // Tr (A B)^{1/2} = Tr (A^{1/2} B A^{1/2})^{1/2}
            let (root_a, min_a) = psd_sqrt(&cov_a);
            let (cross, min_c) = psd_sqrt(&(&root_a * &cov_b * &root_a));
            let floor = -1e-9 * (cov_a.trace() + cov_b.trace()).max(1.0);
            if min_a < floor || min_c < floor {
                log::warn!(
                    "frechet: non-PSD covariance, eigenvalues floored (min {:.3e})",
                    min_a.min(min_c)
                );
            }
            cov_a.trace() + cov_b.trace() - 2.0 * cross.trace()
        }
    };
    Ok((mean_term + trace_term).max(0.0))
}

/// Empirical 1-D Wasserstein-1 distance, `∫ |Fa^-1(u) - Fb^-1(u)| du`.
///
/// For equal sizes this is the mean absolute difference of the sorted
/// samples; unequal sizes integrate the two step quantile functions exactly
/// over the union of their breakpoints `i/|a|` and `j/|b|`.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("wasserstein of an empty set".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("wasserstein input".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(s / a.len() as f64);
    }
    let (na, nb) = (a.len(), b.len());
    // breakpoints on the integer grid 0..na*nb avoid rounding in the weights
    let (mut i, mut j, mut u) = (0usize, 0usize, 0usize);
    let total = na * nb;
    let mut acc = 0.0;
    while u < total {
        let next = ((i + 1) * nb).min((j + 1) * na);
        acc += (next - u) as f64 * (a[i] - b[j]).abs();
        u = next;
        if u == (i + 1) * nb {
            i += 1;
        }
        if u == (j + 1) * na {
            j += 1;
        }
    }
    Ok(acc / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFlips {
    pub class: usize,
    pub targeted: usize,
    pub flipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRate {
    /// Mean over classes with at least one targeted result.
    pub rate: f64,
    pub per_class: Vec<ClassFlips>,
    /// Classes of the classifier that no result targeted.
    pub excluded_classes: Vec<usize>,
}

/// Class-averaged fraction of counterfactuals that `clf` assigns to their
/// target class.
pub fn flip_rate(results: &[CounterfactualResult], clf: &Classifier) -> Result<FlipRate> {
    let mut per_class: Vec<ClassFlips> = (0..clf.classes())
        .map(|class| ClassFlips { class, targeted: 0, flipped: 0 })
        .collect();
    for r in results {
        let entry = per_class.get_mut(r.target).ok_or_else(|| {
            Error::InvalidArgument(format!("target {} outside {} classes", r.target, clf.classes()))
        })?;
        entry.targeted += 1;
        if clf.predict(&r.counterfactual.values)? == r.target {
            entry.flipped += 1;
        }
    }
    let used: Vec<&ClassFlips> = per_class.iter().filter(|c| c.targeted > 0).collect();
    let rate = if used.is_empty() {
        0.0
    } else {
        used.iter()
            .map(|c| c.flipped as f64 / c.targeted as f64)
            .sum::<f64>()
            / used.len() as f64
    };
    let excluded_classes = per_class
        .iter()
        .filter(|c| c.targeted == 0)
        .map(|c| c.class)
        .collect();
    Ok(FlipRate {
        rate,
        per_class: per_class.into_iter().filter(|c| c.targeted > 0).collect(),
        excluded_classes,
    })
}

/// Rows of `x` centred and scaled to unit norm, with the pre-scaling norms.
/// Zero-variance rows stay zero and report norm 0.
pub(crate) fn unit_rows(x: &Mat) -> (Mat, Vec<f64>) {
    let mut u = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in u.rows_mut() {
        let mean = row.sum() / row.len() as f64;
        row.mapv_inplace(|v| v - mean);
        let n = row.dot(&row).sqrt();
        // relative guard so constant rows survive rounding in the mean
        let scale = mean.abs().max(1.0) * 1e-12 * (row.len() as f64).sqrt();
        if n > scale {
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        } else {
            row.fill(0.0);
            norms.push(0.0);
        }
    }
    (u, norms)
}

/// Pearson correlation matrix between regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcMatrix {
    pub values: Mat,
    /// Zero-variance regions; their off-diagonal entries are 0.
    pub degenerate_regions: Vec<usize>,
}

impl FcMatrix {
    /// Strict upper triangle in row-major order, `R (R - 1) / 2` entries.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let r = self.values.nrows();
        let mut out = Vec::with_capacity(r * (r - 1) / 2);
        for i in 0..r {
            for j in i + 1..r {
                out.push(self.values[(i, j)]);
            }
        }
        out
    }
}

/// `(i, j)` region pair for each position of [`FcMatrix::upper_triangle`].
pub fn upper_pairs(regions: usize) -> Vec<(usize, usize)> {
    (0..regions)
        .flat_map(|i| (i + 1..regions).map(move |j| (i, j)))
        .collect()
}

pub fn fc_matrix(x: &Mat) -> Result<FcMatrix> {
    if x.ncols() < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least 2 timepoints, got {}",
            x.ncols()
        )));
    }
    let (u, norms) = unit_rows(x);
    let mut values = u.dot(&u.t());
    let degenerate_regions: Vec<usize> = (0..norms.len()).filter(|&i| norms[i] == 0.0).collect();
    if !degenerate_regions.is_empty() {
        log::warn!("zero-variance regions {degenerate_regions:?}: correlations set to 0");
    }
    for i in 0..values.nrows() {
        values[(i, i)] = 1.0;
        for j in 0..values.ncols() {
            if i != j {
                values[(i, j)] = values[(i, j)].clamp(-1.0, 1.0);
            }
        }
    }
    // exact symmetry regardless of summation order
    for i in 0..values.nrows() {
        for j in i + 1..values.ncols() {
            values[(j, i)] = values[(i, j)];
        }
    }
    Ok(FcMatrix { values, degenerate_regions })
}

/// Upper-triangle FC vector, the default feature map for Fréchet distances.
pub fn fc_features(x: &Mat) -> Result<Vec<f64>> {
    Ok(fc_matrix(x)?.upper_triangle())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerFeature {
    pub rank: usize,
    pub region_a: usize,
    pub region_b: usize,
    /// Mean |FC(counterfactual) - FC(original)| over pairs.
    pub score: f64,
}

/// Region pairs whose mean absolute FC change lies in the top `top_pct`
/// percent. The cut keeps the `ceil(top_pct% * R(R-1)/2)` largest scores and
/// every feature tied with the smallest of them.
pub fn biomarker_map(pairs: &[(Sample, Sample)], top_pct: f64) -> Result<Vec<BiomarkerFeature>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("biomarker map needs at least one pair".into()));
    }
    if !(top_pct > 0.0 && top_pct <= 100.0) {
        return Err(Error::InvalidArgument(format!("top_pct {top_pct} outside (0, 100]")));
    }
    let regions = pairs[0].0.regions();
    if regions < 2 {
        return Err(Error::InvalidArgument("biomarker map needs at least 2 regions".into()));
    }
    let index = upper_pairs(regions);
    let mut scores = vec![0.0; index.len()];
    for (orig, cf) in pairs {
        check_same_shape(&pairs[0].0.values, &orig.values)?;
        check_same_shape(&orig.values, &cf.values)?;
        let a = fc_features(&orig.values)?;
        let b = fc_features(&cf.values)?;
        for (s, (x, y)) in scores.iter_mut().zip(a.iter().zip(&b)) {
            *s += (y - x).abs();
        }
    }
    for s in &mut scores {
        *s /= pairs.len() as f64;
    }
    let keep = ((top_pct / 100.0 * index.len() as f64).ceil() as usize).clamp(1, index.len());
    let mut order: Vec<usize> = (0..index.len()).collect();
    // descending score, ties by position for a stable ranking
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let cut = scores[order[keep - 1]];
    Ok(order
        .into_iter()
        .take_while(|&i| scores[i] >= cut)
        .enumerate()
        .map(|(rank, i)| BiomarkerFeature {
            rank: rank + 1,
            region_a: index[i].0,
            region_b: index[i].1,
            score: scores[i],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
}

/// Macro-averaged F1 over the classes appearing in `truth` or `pred`.
pub fn macro_f1(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let scores: Vec<f64> = (0..classes)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64)
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Multinomial logistic regression fit with Adam on standardised training
/// features (full batch, `cfg.epochs` steps), scored on `test`.
pub fn logistic_probe(
    train: &[(Vec<f64>, usize)],
    test: &[(Vec<f64>, usize)],
    cfg: &TrainConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    let Some(first) = train.first() else {
        return Err(Error::InvalidArgument("probe training set is empty".into()));
    };
    let d = first.0.len();
    if let Some(bad) = train.iter().chain(test).find(|(v, _)| v.len() != d) {
        return Err(Error::shape(format!("{d} features"), bad.0.len()));
    }
    let classes = train.iter().chain(test).map(|(_, y)| y + 1).max().unwrap_or(0);
    let mut present = vec![false; classes];
    for (_, y) in train {
        present[*y] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InvalidArgument("probe training set has a single class".into()));
    }

    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for (v, _) in train {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n;
        }
    }
    for (v, _) in train {
        for ((s, m), x) in sd.iter_mut().zip(&mean).zip(v) {
            *s += (x - m) * (x - m) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|s| if *s > 1e-24 { s.sqrt() } else { 1.0 }).collect();
    let standardise = |v: &[f64]| -> Vec<f64> {
        v.iter().zip(&mean).zip(&sd).map(|((x, m), s)| (x - m) / s).collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|(v, _)| standardise(v)).collect();

    // weights: classes x d, then classes biases
    let mut params = vec![0.0; classes * (d + 1)];
    let mut adam = Adam::new(params.len());
    let logits = |params: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| {
                let w = &params[c * d..(c + 1) * d];
                w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + params[classes * d + c]
            })
            .collect()
    };
    for step in 0..cfg.epochs {
        let mut grad = vec![0.0; params.len()];
        for (x, (_, y)) in xs.iter().zip(train) {
            let p = softmax(&logits(&params, x));
            for c in 0..classes {
                let g = (p[c] - if c == *y { 1.0 } else { 0.0 }) / n;
                for (gw, xi) in grad[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *gw += g * xi;
                }
                grad[classes * d + c] += g;
            }
        }
        adam.step_with_lr(&mut params, &grad, cfg, cfg.lr_at(step, cfg.epochs))?;
    }

    let truth: Vec<usize> = test.iter().map(|(_, y)| *y).collect();
    let pred: Vec<usize> = test
        .iter()
        .map(|(v, _)| argmax(&logits(&params, &standardise(v))))
        .collect();
    let correct = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
    Ok(ProbeResult {
        accuracy: if test.is_empty() { 0.0 } else { correct as f64 / test.len() as f64 },
        macro_f1: macro_f1(&truth, &pred, classes),
        classes,
        train_size: train.len(),
        test_size: test.len(),
    })
}

/// Same probe after shuffling the training labels with `seed`; the chance
/// baseline the real probe is compared against.
pub fn permutation_baseline(
    train: &[(Vec<f64>, usize)],
    test: &[(Vec<f64>, usize)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let mut labels: Vec<usize> = train.iter().map(|(_, y)| *y).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let shuffled: Vec<(Vec<f64>, usize)> = train
        .iter()
        .zip(labels)
        .map(|((v, _), y)| (v.clone(), y))
        .collect();
    logistic_probe(&shuffled, test, cfg)
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub proximity: f64,
    pub proximity_rms: f64,
    pub sparsity: f64,
    /// Fréchet distance between counterfactuals and reference originals of
    /// their target class, averaged over target classes; `None` when no
    /// class has two of each.
    pub frechet: Option<f64>,
    pub frechet_features: String,
    pub frechet_mode: FrechetMode,
    /// Mean W1 between the FC value distributions of each original and its
    /// counterfactual.
    pub wasserstein_fc: f64,
    pub flip_rate: f64,
    pub flip_rate_detail: FlipRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub target: usize,
    pub proximity: f64,
    pub sparsity: f64,
    pub wasserstein_fc: f64,
    pub flipped: bool,
}

/// Per-sample rows plus the aggregate report. `reference` holds labelled
/// original samples; the Fréchet term compares the counterfactuals aimed at
/// each class with the reference samples of that class and averages over
/// classes. `thresholds` follows [`sparsity`].
pub fn evaluate(
    results: &[CounterfactualResult],
    clf: &Classifier,
    reference: &[Sample],
    thresholds: &[f64],
    mode: FrechetMode,
) -> Result<(MetricsReport, Vec<SampleMetrics>)> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no counterfactuals to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        let a = fc_features(&r.original.values)?;
        let b = fc_features(&r.counterfactual.values)?;
        rows.push(SampleMetrics {
            id: r.original.id.clone(),
            target: r.target,
            proximity: proximity(&r.original, &r.counterfactual)?,
            sparsity: sparsity(&r.original, &r.counterfactual, thresholds)?,
            wasserstein_fc: wasserstein_1d(&a, &b)?,
            flipped: clf.predict(&r.counterfactual.values)? == r.target,
        });
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&SampleMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;

    let mut per_class = Vec::new();
    for class in 0..clf.classes() {
        let cf: Vec<Vec<f64>> = results
            .iter()
            .filter(|r| r.target == class)
            .map(|r| fc_features(&r.counterfactual.values))
            .collect::<Result<_>>()?;
        if cf.is_empty() {
            continue;
        }
        let reference: Vec<Vec<f64>> = reference
            .iter()
            .filter(|s| s.label == Some(class))
            .map(|s| fc_features(&s.values))
            .collect::<Result<_>>()?;
        if cf.len() < 2 || reference.len() < 2 {
            log::warn!("class {class}: too few samples for a Fréchet distance, skipped");
            continue;
        }
        per_class.push(frechet_distance(&cf, &reference, mode)?);
    }
    let frechet = (!per_class.is_empty())
        .then(|| per_class.iter().sum::<f64>() / per_class.len() as f64);
    let flips = flip_rate(results, clf)?;
    let proximity_rms = results
        .iter()
        .map(|r| proximity_rms(&r.original, &r.counterfactual))
        .sum::<Result<f64>>()?
        / n;
    let report = MetricsReport {
        n: rows.len(),
        proximity: mean(|r| r.proximity),
        proximity_rms,
        sparsity: mean(|r| r.sparsity),
        frechet,
        frechet_features: "fc-upper-triangle".into(),
        frechet_mode: mode,
        wasserstein_fc: mean(|r| r.wasserstein_fc),
        flip_rate: flips.rate,
        flip_rate_detail: flips,
    };
    Ok((report, rows))
}

/// Per-feature population standard deviation over `samples`, row-major;
/// the default sparsity threshold.
pub fn feature_std(samples: &[Sample]) -> Result<Vec<f64>> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidArgument("no samples for feature std".into()));
    };
    let n = samples.len() as f64;
    let mut mean = Array2::<f64>::zeros(first.shape());
    for s in samples {
        check_same_shape(&first.values, &s.values)?;
        mean += &s.values;
    }
    mean /= n;
    let mut var = Array2::<f64>::zeros(first.shape());
    for s in samples {
        let d = &s.values - &mean;
        var += &(&d * &d);
    }
    Ok(var.iter().map(|v| (v / n).sqrt()).collect())
}
