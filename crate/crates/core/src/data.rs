//! Synthetic class-conditional datasets, sample files, splits and z-scoring.
//!
//! Sample file layout (CSV): each sample starts with `#`-prefixed header
//! lines `# id: <id>` and `# label: <class | none>`, followed by one line per
//! region holding comma-separated timepoint values. A file may hold several
//! samples; a file without headers is a single unlabelled sample named after
//! the file stem. Values are written in shortest round-trip form.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{check_same_shape, Mat, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub regions: usize,
    pub timepoints: usize,
    pub classes: usize,
    pub n_per_class: usize,
    pub seed: u64,
    /// Within-block correlation of the latent factor, one per class.
    pub class_rho: Vec<f64>,
    /// Regions per class block; class `c` owns regions
    /// `[c * block_size, (c + 1) * block_size)` modulo `regions`.
    pub block_size: usize,
    /// Lag-one autocorrelation of latent and idiosyncratic series.
    pub ar: f64,
    /// Std of white measurement noise added on top.
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            regions: 8,
            timepoints: 64,
            classes: 2,
            n_per_class: 200,
            seed: 0,
            class_rho: vec![0.8, 0.8],
            block_size: 4,
            ar: 0.5,
            noise_std: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.regions == 0 || self.timepoints == 0 || self.classes == 0 || self.n_per_class == 0 {
            return bad("regions, timepoints, classes and n_per_class must be >= 1".into());
        }
        if self.class_rho.len() != self.classes {
            return bad(format!(
                "{} class_rho values for {} classes",
                self.class_rho.len(),
                self.classes
            ));
        }
        if let Some(r) = self.class_rho.iter().find(|r| !(**r > -1.0 && **r < 1.0)) {
            return bad(format!("block correlation {r} outside (-1, 1)"));
        }
        if self.block_size == 0 || self.block_size > self.regions {
            return bad(format!(
                "block_size {} outside 1..={}",
                self.block_size, self.regions
            ));
        }
        if !(0.0..1.0).contains(&self.ar) {
            return bad(format!("ar {} outside [0, 1)", self.ar));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be >= 0", self.noise_std));
        }
        Ok(())
    }

    pub fn block(&self, class: usize) -> Vec<usize> {
        (0..self.block_size)
            .map(|i| (class * self.block_size + i) % self.regions)
            .collect()
    }
}

/// Stationary unit-variance AR(1) series.
fn ar1(rng: &mut ChaCha8Rng, len: usize, phi: f64) -> Array1<f64> {
    let innov = (1.0 - phi * phi).sqrt();
    let mut out = Array1::zeros(len);
    let mut prev: f64 = StandardNormal.sample(rng);
    for v in out.iter_mut() {
        *v = prev;
        let z: f64 = StandardNormal.sample(rng);
        prev = phi * prev + innov * z;
    }
    out
}

/// Samples for class `c` share a latent AR(1) factor across the regions of
/// the class block, loaded with `sqrt(|rho|)` (alternating sign for negative
/// `rho`), plus unit-variance idiosyncratic AR(1) series and white noise.
pub fn synth_samples(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (r, l) = (cfg.regions, cfg.timepoints);
    let mut out = Vec::with_capacity(cfg.classes * cfg.n_per_class);
    for c in 0..cfg.classes {
        let rho = cfg.class_rho[c];
        let load = rho.abs().sqrt();
        let own = (1.0 - rho.abs()).sqrt();
        let block = cfg.block(c);
        for i in 0..cfg.n_per_class {
            let latent = ar1(&mut rng, l, cfg.ar);
            let mut x = Array2::zeros((r, l));
            for region in 0..r {
                let idio = ar1(&mut rng, l, cfg.ar);
                let mut row = x.row_mut(region);
                if let Some(pos) = block.iter().position(|&b| b == region) {
                    let sign = if rho < 0.0 && pos % 2 == 1 { -1.0 } else { 1.0 };
                    row.assign(&(&latent * (sign * load) + &idio * own));
                } else {
                    row.assign(&idio);
                }
                for v in row.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += cfg.noise_std * e;
                }
            }
            out.push(Sample::new(format!("c{c}-{i:04}"), Some(c), x)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded shuffle, then 80/10/10 slices (train and val sizes rounded
    /// down, the remainder goes to test).
    pub fn seeded(n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Split { train: idx, val, test }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || seen[i] {
                return Err(Error::InvalidArgument(format!(
                    "split index {i} out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("split does not cover every sample".into()));
        }
        Ok(())
    }
}

/// Per-feature statistics of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Mat,
    pub std: Mat,
    /// `(region, timepoint)` features with zero training variance, left
    /// unscaled (std pinned to 1).
    pub pinned: Vec<(usize, usize)>,
}

impl Normalization {
    pub fn fit(samples: &[&Sample]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::InvalidArgument("normalization needs a non-empty train split".into()));
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
        var /= n;
        let mut pinned = Vec::new();
        let std = Array2::from_shape_fn(var.dim(), |(i, j)| {
            let v = var[(i, j)];
            if v > 0.0 {
                v.sqrt()
            } else {
                pinned.push((i, j));
                1.0
            }
        });
        if !pinned.is_empty() {
            log::warn!("{} constant features left unscaled", pinned.len());
        }
        Ok(Normalization { mean, std, pinned })
    }

    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        check_same_shape(&self.mean, x)?;
        let mut out = x - &self.mean;
        out /= &self.std;
        for &(i, j) in &self.pinned {
            out[(i, j)] = x[(i, j)];
        }
        Ok(out)
    }

    pub fn invert(&self, z: &Mat) -> Result<Mat> {
        check_same_shape(&self.mean, z)?;
        let mut out = z * &self.std;
        out += &self.mean;
        for &(i, j) in &self.pinned {
            out[(i, j)] = z[(i, j)];
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: Split,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, split_seed: u64) -> Result<Self> {
        let split = Split::seeded(samples.len(), split_seed);
        Dataset::with_split(samples, split)
    }

    pub fn with_split(samples: Vec<Sample>, split: Split) -> Result<Self> {
        split.validate(samples.len())?;
        if let Some(first) = samples.first() {
            for s in &samples {
                check_same_shape(&first.values, &s.values)?;
            }
        }
        Ok(Dataset { samples, split, normalization: None })
    }

    fn pick(&self, idx: &[usize]) -> Vec<Sample> {
        idx.iter().map(|&i| self.samples[i].clone()).collect()
    }

    pub fn train(&self) -> Vec<Sample> {
        self.pick(&self.split.train)
    }

    pub fn val(&self) -> Vec<Sample> {
        self.pick(&self.split.val)
    }

    pub fn test(&self) -> Vec<Sample> {
        self.pick(&self.split.test)
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| s.shape())
    }

    pub fn classes(&self) -> usize {
        self.samples.iter().filter_map(|s| s.label).map(|c| c + 1).max().unwrap_or(0)
    }
}

/// Normalises every split with statistics of the training split only.
/// Already-normalised datasets are first mapped back to raw values.
pub fn zscore(ds: &Dataset) -> Result<Dataset> {
    let raw: Vec<Sample> = match &ds.normalization {
        None => ds.samples.clone(),
        Some(norm) => ds
            .samples
            .iter()
            .map(|s| Ok(Sample { values: norm.invert(&s.values)?, ..s.clone() }))
            .collect::<Result<_>>()?,
    };
    let train: Vec<&Sample> = ds.split.train.iter().map(|&i| &raw[i]).collect();
    let norm = Normalization::fit(&train)?;
    let samples = raw
        .iter()
        .map(|s| Ok(Sample { values: norm.apply(&s.values)?, ..s.clone() }))
        .collect::<Result<_>>()?;
    Ok(Dataset { samples, split: ds.split.clone(), normalization: Some(norm) })
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    Dataset::new(synth_samples(cfg)?, cfg.seed)
}

pub fn format_samples(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        let _ = writeln!(out, "# id: {}", s.id);
        match s.label {
            Some(c) => {
                let _ = writeln!(out, "# label: {c}");
            }
            None => out.push_str("# label: none\n"),
        }
        for row in s.values.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
    }
    out
}

pub fn write_samples(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_samples(samples)).map_err(|e| Error::io(path, e))
}

struct Pending {
    id: Option<String>,
    label: Option<usize>,
    rows: Vec<Vec<f64>>,
    first_line: usize,
}

pub fn parse_samples(text: &str, path: &Path) -> Result<Vec<Sample>> {
    let fail = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let default_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".into());
    let mut out = Vec::new();
    let mut cur: Option<Pending> = None;
    let finish = |p: Pending, out: &mut Vec<Sample>| -> Result<()> {
        let id = p.id.unwrap_or_else(|| default_id.clone());
        if p.rows.is_empty() {
            return Err(fail(p.first_line, format!("sample {id} has no data rows")));
        }
        let cols = p.rows[0].len();
        let flat: Vec<f64> = p.rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((p.rows.len(), cols), flat)
            .expect("row lengths checked while parsing");
        out.push(Sample::new(id, p.label, values).map_err(|e| fail(p.first_line, e.to_string()))?);
        Ok(())
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            let Some((key, value)) = header.split_once(':') else {
                return Err(fail(line_no, format!("malformed header {line:?}")));
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "id" => {
                    if let Some(p) = cur.take() {
                        if p.id.is_some() || !p.rows.is_empty() {
                            finish(p, &mut out)?;
                        } else {
                            cur = Some(p);
                        }
                    }
                    let p = cur.get_or_insert(Pending {
                        id: None,
                        label: None,
                        rows: Vec::new(),
                        first_line: line_no,
                    });
                    p.id = Some(value.to_string());
                }
                "label" => {
                    let p = cur.get_or_insert(Pending {
                        id: None,
                        label: None,
                        rows: Vec::new(),
                        first_line: line_no,
                    });
                    if !p.rows.is_empty() {
                        return Err(fail(line_no, "label header after data rows".into()));
                    }
                    p.label = match value {
                        "none" | "" => None,
                        v => Some(v.parse().map_err(|_| fail(line_no, format!("bad label {v:?}")))?),
                    };
                }
                // other comments are ignored
                _ => {}
            }
            continue;
        }
        let p = cur.get_or_insert(Pending {
            id: None,
            label: None,
            rows: Vec::new(),
            first_line: line_no,
        });
        let row = line
            .split(',')
            .enumerate()
            .map(|(col, cell)| {
                let cell = cell.trim();
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        fail(line_no, format!("column {}: not a finite number: {cell:?}", col + 1))
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = p.rows.first() {
            if first.len() != row.len() {
                return Err(fail(
                    line_no,
                    format!("ragged row: {} columns, expected {}", row.len(), first.len()),
                ));
            }
        }
        p.rows.push(row);
    }
    if let Some(p) = cur {
        finish(p, &mut out)?;
    }
    Ok(out)
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_samples(&text, path)
}

/// Reads every `*.csv` file in a directory (sorted by name) or a single file.
pub fn read_samples_any(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    if !path.is_dir() {
        return read_samples(path);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_samples(&f)?);
    }
    Ok(out)
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub regions: usize,
    pub timepoints: usize,
    pub classes: usize,
    /// Sample files relative to the manifest, per split.
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub normalization: Option<Normalization>,
}

/// Writes one CSV per sample under `dir/samples/` plus `dir/manifest.json`.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
    let mut names = vec![String::new(); ds.samples.len()];
    for (i, s) in ds.samples.iter().enumerate() {
        let name = format!("samples/{:05}-{}.csv", i, sanitize(&s.id));
        write_samples(std::slice::from_ref(s), dir.join(&name))?;
        names[i] = name;
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| names[i].clone()).collect();
    let (regions, timepoints) = ds.shape().unwrap_or((0, 0));
    let manifest = Manifest {
        format: "fmd-dataset-v1".into(),
        regions,
        timepoints,
        classes: ds.classes(),
        train: pick(&ds.split.train),
        val: pick(&ds.split.val),
        test: pick(&ds.split.test),
        normalization: ds.normalization.clone(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Loads a dataset from a directory holding a manifest, or from the manifest
/// file itself.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest_path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    let mut samples = Vec::new();
    let mut split = Split { train: vec![], val: vec![], test: vec![] };
    for (files, idx) in [
        (&manifest.train, &mut split.train),
        (&manifest.val, &mut split.val),
        (&manifest.test, &mut split.test),
    ] {
        for f in files {
            for s in read_samples(dir.join(f))? {
                if s.shape() != (manifest.regions, manifest.timepoints) {
                    return Err(Error::shape(
                        format!("{:?}", (manifest.regions, manifest.timepoints)),
                        format!("{:?} in {f}", s.shape()),
                    ));
                }
                idx.push(samples.len());
                samples.push(s);
            }
        }
    }
    let mut ds = Dataset::with_split(samples, split)?;
    ds.normalization = manifest.normalization;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::fc_matrix;

    fn small() -> SynthConfig {
        SynthConfig { n_per_class: 20, timepoints: 16, ..SynthConfig::default() }
    }

    #[test]
    fn synth_is_deterministic_and_labelled() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 40);
        assert_eq!(a.classes(), 2);
        let other = synth_generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.samples[0].values, other.samples[0].values);
    }

    #[test]
    fn synth_rejects_bad_rho() {
        for rho in [1.0, -1.0, f64::NAN] {
            let cfg = SynthConfig { class_rho: vec![rho, 0.0], ..small() };
            assert!(synth_generate(&cfg).is_err());
        }
        assert!(synth_generate(&SynthConfig { class_rho: vec![0.5], ..small() }).is_err());
    }

    #[test]
    fn zero_rho_gives_weak_fc() {
        let cfg = SynthConfig {
            class_rho: vec![0.0, 0.0],
            n_per_class: 10,
            timepoints: 200,
            ..SynthConfig::default()
        };
        let mut total = 0.0;
        let mut count = 0.0;
        for s in synth_samples(&cfg).unwrap() {
            let fc = fc_matrix(&s.values).unwrap();
            for v in fc.upper_triangle() {
                total += v.abs();
                count += 1.0;
            }
        }
        assert!(total / count < 0.15, "{}", total / count);
    }

    #[test]
    fn negative_rho_alternates_sign() {
        let cfg = SynthConfig {
            class_rho: vec![-0.8, 0.0],
            n_per_class: 5,
            timepoints: 400,
            noise_std: 0.0,
            ..SynthConfig::default()
        };
        let s = &synth_samples(&cfg).unwrap()[0];
        let fc = fc_matrix(&s.values).unwrap();
        assert!(fc.values[(0, 1)] < -0.5 && fc.values[(0, 2)] > 0.5);
    }

    #[test]
    fn split_partitions() {
        let s = Split::seeded(25, 3);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (20, 2, 3));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
        assert!(Split { train: vec![0, 0], val: vec![], test: vec![] }.validate(2).is_err());
    }

    #[test]
    fn zscore_uses_train_only_and_inverts() {
        let ds = synth_generate(&small()).unwrap();
        let z = zscore(&ds).unwrap();
        let norm = z.normalization.as_ref().unwrap();
        let train_raw: Vec<&Sample> = ds.split.train.iter().map(|&i| &ds.samples[i]).collect();
        assert_eq!(&Normalization::fit(&train_raw).unwrap(), norm);
        let n = z.split.train.len() as f64;
        let mut mean = Array2::<f64>::zeros((8, 16));
        for &i in &z.split.train {
            mean += &z.samples[i].values;
        }
        mean /= n;
        let mut var = Array2::<f64>::zeros((8, 16));
        for &i in &z.split.train {
            let d = &z.samples[i].values - &mean;
            var += &(&d * &d);
        }
        var /= n;
        assert!(mean.iter().all(|m| m.abs() < 1e-10));
        assert!(var.iter().all(|v| (v.sqrt() - 1.0).abs() < 1e-10));
        for (a, b) in ds.samples.iter().zip(&z.samples) {
            let back = norm.invert(&b.values).unwrap();
            assert!((&back - &a.values).iter().all(|d| d.abs() < 1e-12));
        }
        // re-normalising starts from the raw values
        let again = zscore(&z).unwrap().normalization.unwrap();
        assert!((&again.mean - &norm.mean).iter().all(|d| d.abs() < 1e-12));
        assert!((&again.std - &norm.std).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn constant_feature_is_pinned() {
        let mut samples = synth_samples(&small()).unwrap();
        for s in &mut samples {
            s.values[(1, 2)] = 4.0;
        }
        let z = zscore(&Dataset::new(samples, 0).unwrap()).unwrap();
        let norm = z.normalization.unwrap();
        assert_eq!(norm.pinned, vec![(1, 2)]);
        assert!(z.samples.iter().all(|s| s.values[(1, 2)] == 4.0));
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_samples(&small()).unwrap()[..3].to_vec();
        let path = dir.path().join("many.csv");
        write_samples(&samples, &path).unwrap();
        assert_eq!(read_samples(&path).unwrap(), samples);

        let empty = dir.path().join("empty.csv");
        fs::write(&empty, "").unwrap();
        assert!(read_samples(&empty).unwrap().is_empty());

        let bare = dir.path().join("bare.csv");
        fs::write(&bare, "1,2\n3,4\n").unwrap();
        let got = read_samples(&bare).unwrap();
        assert_eq!((got[0].id.as_str(), got[0].label), ("bare", None));

        let ragged = dir.path().join("ragged.csv");
        fs::write(&ragged, "# id: x\n1,2\n3\n").unwrap();
        let err = read_samples(&ragged).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");

        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "# id: x\n1,2\n3,zz\n").unwrap();
        let err = read_samples(&bad).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("column 2"), "{err}");

        let missing = read_samples(dir.path().join("nope.csv")).unwrap_err();
        assert_eq!(missing.category(), "missing-file");
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = zscore(&synth_generate(&small()).unwrap()).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.normalization, ds.normalization);
        assert_eq!(back.train(), ds.train());
        assert_eq!(back.test(), ds.test());
    }
}
