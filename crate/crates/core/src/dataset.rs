//! Data model and on-disk cohort format.
//!
//! Cohort layout (all numeric text decimal, dot-separated):
//!
//! ```text
//! <root>/<patient_id>/images/<hour>.png   8-bit grayscale, W x H
//! <root>/<patient_id>/ehr.csv             hour, v0..v{K-1}, m0..m{K-1}
//! <root>/<patient_id>/labels.json         stay_hours, static, abnormality
//!                                         per image hour, task labels
//! <root>/<patient_id>/truth.csv           (synthetic only; oracle use)
//! ```
//!
//! Hours are integers since the stay anchor (admission); images may carry
//! negative hours (taken shortly before admission). Mask value 1 means
//! observed. Loaded cohorts are immutable; all extraction operations are
//! pure and safe to run from concurrent workers.

use crate::error::{Error, Result};
use crate::seed::rng;
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Irregular multichannel time series with observation mask.
#[derive(Debug, Clone)]
pub struct EhrSeries {
    /// T x K values; masked-out entries carry the imputation value, never NaN.
    pub values: Array2<f64>,
    /// T x K; true = observed.
    pub mask: Array2<bool>,
    /// Hours since anchor, strictly increasing, length T.
    pub hours: Vec<i64>,
    /// Static covariates (age, gender encoding, ...).
    pub static_vars: Vec<f64>,
}

impl EhrSeries {
    pub fn len(&self) -> usize {
        self.hours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hours.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// Rows with `lo < hour <= hi` (half-open window, closed on the right).
    pub fn slice_window(&self, lo_exclusive: i64, hi_inclusive: i64) -> EhrSeries {
        let idx: Vec<usize> = self
            .hours
            .iter()
            .enumerate()
            .filter(|(_, &h)| h > lo_exclusive && h <= hi_inclusive)
            .map(|(i, _)| i)
            .collect();
        let k = self.channels();
        let mut values = Array2::zeros((idx.len(), k));
        let mut mask = Array2::from_elem((idx.len(), k), false);
        for (r, &i) in idx.iter().enumerate() {
            values.row_mut(r).assign(&self.values.row(i));
            for c in 0..k {
                mask[[r, c]] = self.mask[[i, c]];
            }
        }
        EhrSeries {
            values,
            mask,
            hours: idx.iter().map(|&i| self.hours[i]).collect(),
            static_vars: self.static_vars.clone(),
        }
    }

    /// Model input rows: values with static covariates broadcast as extra
    /// constant channels, concatenated with the corresponding mask block
    /// (statics count as observed). Shape T x 2*(K+S).
    pub fn model_rows(&self) -> Array2<f64> {
        let (t, k) = (self.len(), self.channels());
        let s = self.static_vars.len();
        let mut out = Array2::zeros((t, 2 * (k + s)));
        for r in 0..t {
            for c in 0..k {
                out[[r, c]] = self.values[[r, c]];
                out[[r, k + s + c]] = if self.mask[[r, c]] { 1.0 } else { 0.0 };
            }
            for c in 0..s {
                out[[r, k + c]] = self.static_vars[c];
                out[[r, k + s + k + c]] = 1.0;
            }
        }
        out
    }

    fn validate(&self, who: &str, max_len: usize) -> Result<()> {
        if self.hours.len() != self.values.nrows() || self.values.dim() != self.mask.dim() {
            return Err(Error::data(format!("{who}: ehr shape mismatch")));
        }
        if self.hours.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::data(format!(
                "{who}: ehr hours not strictly increasing"
            )));
        }
        if self.hours.len() > max_len {
            return Err(Error::data(format!(
                "{who}: ehr length {} exceeds max {max_len}",
                self.hours.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("{who}: non-finite ehr value")));
        }
        Ok(())
    }
}

/// Grayscale image with acquisition time and abnormality labels.
#[derive(Debug, Clone)]
pub struct ImageSample {
    /// H x W pixels in [0, 1].
    pub pixels: Array2<f64>,
    /// Hours since anchor; may be negative (pre-admission image).
    pub taken_at: i64,
    /// Multi-label abnormality findings for this image.
    pub abnormality: Vec<bool>,
}

/// Quadruplet for generator training: reference image, target image, the
/// series between them, target abnormality labels.
#[derive(Debug, Clone)]
pub struct LdmSample {
    pub reference: ImageSample,
    pub target: ImageSample,
    pub ehr: EhrSeries,
    pub target_labels: Vec<bool>,
}

/// Triplet for prediction training plus the staleness gap.
#[derive(Debug, Clone)]
pub struct PredictionSample {
    pub last_image: ImageSample,
    pub ehr_48h: EhrSeries,
    pub task_labels: Vec<bool>,
    /// Hours between prediction time and `last_image.taken_at`.
    pub gap_delta: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mortality,
    Phenotype,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Mortality => write!(f, "mortality"),
            Task::Phenotype => write!(f, "phenotype"),
        }
    }
}

/// One patient: every image, the full series, and task labels.
#[derive(Debug, Clone)]
pub struct PatientRecord {
    pub id: String,
    pub images: Vec<ImageSample>,
    pub series: EhrSeries,
    pub stay_hours: i64,
    pub mortality: Vec<bool>,
    pub phenotype: Vec<bool>,
}

impl PatientRecord {
    pub fn task_labels(&self, task: Task) -> &[bool] {
        match task {
            Task::Mortality => &self.mortality,
            Task::Phenotype => &self.phenotype,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.id.clone()).collect()
    }

    pub fn subset(&self, ids: &[String]) -> Cohort {
        Cohort {
            patients: self
                .patients
                .iter()
                .filter(|p| ids.contains(&p.id))
                .cloned()
                .collect(),
        }
    }
}

/// Disjoint patient-wise split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Validation knobs for loading; mirrors the world/run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// VAE compression ratio r: image dims must be multiples of it.
    pub compression: usize,
    /// Abnormality label length L.
    pub abnormality_len: usize,
    /// Maximum series length accepted by the encoders.
    pub max_ehr_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            compression: 8,
            abnormality_len: 1,
            max_ehr_len: 70,
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct LabelsFile {
    stay_hours: i64,
    r#static: Vec<f64>,
    /// image hour (decimal string) -> 0/1 abnormality vector
    abnormality: BTreeMap<String, Vec<u8>>,
    task_mortality: Vec<u8>,
    task_phenotype: Vec<u8>,
}

/// Load a cohort directory. Every record is validated against the type
/// invariants; ordering is deterministic (patient id, then time).
pub fn load_cohort(root: &Path, config: &DataConfig) -> Result<Cohort> {
    if !root.exists() {
        return Err(Error::data(format!(
            "cohort root {} does not exist",
            root.display()
        )));
    }
    let mut dirs: Vec<String> = fs::read_dir(root)
        .map_err(|e| Error::io(root.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    dirs.sort();
    let mut patients = Vec::with_capacity(dirs.len());
    for id in dirs {
        patients.push(load_patient(root, &id, config)?);
    }
    Ok(Cohort { patients })
}

fn load_patient(root: &Path, id: &str, config: &DataConfig) -> Result<PatientRecord> {
    let dir = root.join(id);
    let labels_path = dir.join("labels.json");
    let labels_text = fs::read_to_string(&labels_path)
        .map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    let labels: LabelsFile = serde_json::from_str(&labels_text).map_err(|e| {
        Error::data(format!("{}: malformed labels.json: {e}", labels_path.display()))
    })?;

    let series = read_ehr_csv(&dir.join("ehr.csv"), &labels.r#static)?;
    series.validate(id, config.max_ehr_len)?;

    let images_dir = dir.join("images");
    let mut hours: Vec<i64> = fs::read_dir(&images_dir)
        .map_err(|e| Error::io(images_dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".png").and_then(|s| s.parse::<i64>().ok())
        })
        .collect();
    hours.sort_unstable();
    let mut images = Vec::with_capacity(hours.len());
    for h in hours {
        let path = images_dir.join(format!("{h}.png"));
        let pixels = read_gray_png(&path)?;
        for (dim, name) in [(pixels.nrows(), "height"), (pixels.ncols(), "width")] {
            if dim % config.compression != 0 {
                return Err(Error::data(format!(
                    "{}: {name} {dim} not a multiple of compression ratio {}",
                    path.display(),
                    config.compression
                )));
            }
        }
        let abnormality = labels
            .abnormality
            .get(&h.to_string())
            .ok_or_else(|| {
                Error::data(format!("{id}: missing abnormality labels for image hour {h}"))
            })?
            .iter()
            .map(|&b| b != 0)
            .collect::<Vec<bool>>();
        if abnormality.len() != config.abnormality_len {
            return Err(Error::data(format!(
                "{id}: abnormality vector for hour {h} has length {}, expected {}",
                abnormality.len(),
                config.abnormality_len
            )));
        }
        images.push(ImageSample {
            pixels,
            taken_at: h,
            abnormality,
        });
    }

    Ok(PatientRecord {
        id: id.to_string(),
        images,
        series,
        stay_hours: labels.stay_hours,
        mortality: labels.task_mortality.iter().map(|&b| b != 0).collect(),
        phenotype: labels.task_phenotype.iter().map(|&b| b != 0).collect(),
    })
}

fn read_ehr_csv(path: &Path, static_vars: &[f64]) -> Result<EhrSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let n_cols = rdr.headers().map_err(|e| Error::data(e.to_string()))?.len();
    if n_cols < 3 || (n_cols - 1) % 2 != 0 {
        return Err(Error::data(format!(
            "{}: expected columns hour, K values, K masks; got {n_cols} columns \
             (missing mask channel?)",
            path.display()
        )));
    }
    let k = (n_cols - 1) / 2;
    let mut hours = Vec::new();
    let mut vals = Vec::new();
    let mut masks = Vec::new();
    for (row_idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::data(format!("{}: short row {row_idx}", path.display())))?
                .trim()
                .parse::<f64>()
                .map_err(|e| {
                    Error::data(format!("{}: row {row_idx} col {i}: {e}", path.display()))
                })
        };
        hours.push(parse(0)? as i64);
        for i in 0..k {
            let v = parse(1 + i)?;
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "{}: row {row_idx}: non-finite value",
                    path.display()
                )));
            }
            vals.push(v);
        }
        for i in 0..k {
            masks.push(parse(1 + k + i)? != 0.0);
        }
    }
    let t = hours.len();
    Ok(EhrSeries {
        values: Array2::from_shape_vec((t, k), vals).unwrap(),
        mask: Array2::from_shape_vec((t, k), masks).unwrap(),
        hours,
        static_vars: static_vars.to_vec(),
    })
}

fn read_gray_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::zeros((h, w));
    for (x, y, p) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0] as f64 / 255.0;
    }
    Ok(out)
}

/// Write one f64 image in [0,1] as an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, pixels: &Array2<f64>) -> Result<()> {
    let (h, w) = pixels.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let v = pixels[[y as usize, x as usize]].clamp(0.0, 1.0);
        p.0[0] = (v * 255.0).round() as u8;
    }
    img.save(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Seeded disjoint patient split; sizes are within one of the exact
/// proportions (largest-remainder allocation after a seeded shuffle).
pub fn split_patients(
    patient_ids: &[String],
    ratio: (u32, u32, u32),
    seed: u64,
) -> Result<CohortSplit> {
    let n = patient_ids.len();
    if n < 3 {
        return Err(Error::data(format!(
            "need at least 3 patients to split, got {n}"
        )));
    }
    let total = (ratio.0 + ratio.1 + ratio.2) as f64;
    if total == 0.0 {
        return Err(Error::config("split ratio sums to zero"));
    }
    let mut ids: Vec<String> = patient_ids.to_vec();
    ids.sort();
    let mut r = rng(seed);
    ids.shuffle(&mut r);

    let weights = [ratio.0 as f64, ratio.1 as f64, ratio.2 as f64];
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remainder = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if remainder == 0 {
            break;
        }
        sizes[i] += 1;
        remainder -= 1;
    }
    let train = ids[..sizes[0]].to_vec();
    let validation = ids[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let test = ids[sizes[0] + sizes[1]..].to_vec();
    Ok(CohortSplit {
        train,
        validation,
        test,
    })
}

/// Every ordered image pair with gap strictly greater than `min_gap_hours`,
/// each with the series restricted to the half-open window (t0, t1].
pub fn extract_ldm_pairs(patient: &PatientRecord, min_gap_hours: i64) -> Vec<LdmSample> {
    let mut out = Vec::new();
    for i in 0..patient.images.len() {
        for j in (i + 1)..patient.images.len() {
            let (a, b) = (&patient.images[i], &patient.images[j]);
            if b.taken_at - a.taken_at > min_gap_hours {
                out.push(LdmSample {
                    reference: a.clone(),
                    target: b.clone(),
                    ehr: patient.series.slice_window(a.taken_at, b.taken_at),
                    target_labels: b.abnormality.clone(),
                });
            }
        }
    }
    out
}

/// Prediction triplet at the observation window: the latest image taken at
/// or before `window_hours`, the series up to the window, and the gap.
/// Stays shorter than the window are excluded by precondition.
pub fn extract_prediction_sample(
    patient: &PatientRecord,
    window_hours: i64,
    task: Task,
) -> Result<Option<PredictionSample>> {
    if patient.stay_hours < window_hours {
        return Err(Error::data(format!(
            "{}: stay of {} h is shorter than the {} h observation window",
            patient.id, patient.stay_hours, window_hours
        )));
    }
    let last = patient
        .images
        .iter()
        .filter(|img| img.taken_at <= window_hours)
        .max_by_key(|img| img.taken_at);
    let Some(last) = last else {
        return Ok(None);
    };
    Ok(Some(PredictionSample {
        last_image: last.clone(),
        ehr_48h: patient.series.slice_window(i64::MIN, window_hours),
        task_labels: patient.task_labels(task).to_vec(),
        gap_delta: window_hours - last.taken_at,
    }))
}

/// Per-channel standardization fit on training data: observed entries give
/// mean/std; missing entries are imputed with the channel mean (zero after
/// standardization) and stay flagged through the mask.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub static_mean: Vec<f64>,
    pub static_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(series: &[&EhrSeries]) -> Result<Self> {
        let first = series
            .first()
            .ok_or_else(|| Error::data("cannot fit standardizer on empty training set"))?;
        let k = first.channels();
        let s = first.static_vars.len();
        let mut sums = vec![0.0; k];
        let mut sqs = vec![0.0; k];
        let mut counts = vec![0usize; k];
        let mut st_sums = vec![0.0; s];
        let mut st_sqs = vec![0.0; s];
        for sr in series {
            for t in 0..sr.len() {
                for c in 0..k {
                    if sr.mask[[t, c]] {
                        let v = sr.values[[t, c]];
                        sums[c] += v;
                        sqs[c] += v * v;
                        counts[c] += 1;
                    }
                }
            }
            for c in 0..s {
                st_sums[c] += sr.static_vars[c];
                st_sqs[c] += sr.static_vars[c] * sr.static_vars[c];
            }
        }
        let mean: Vec<f64> = (0..k)
            .map(|c| if counts[c] > 0 { sums[c] / counts[c] as f64 } else { 0.0 })
            .collect();
        let std: Vec<f64> = (0..k)
            .map(|c| {
                if counts[c] > 1 {
                    let v = sqs[c] / counts[c] as f64 - mean[c] * mean[c];
                    v.max(0.0).sqrt().max(1e-6)
                } else {
                    1.0
                }
            })
            .collect();
        let ns = series.len() as f64;
        let static_mean: Vec<f64> = st_sums.iter().map(|x| x / ns).collect();
        let static_std: Vec<f64> = st_sqs
            .iter()
            .zip(&static_mean)
            .map(|(sq, m)| (sq / ns - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self {
            mean,
            std,
            static_mean,
            static_std,
        })
    }

    /// Standardize observed entries; impute missing ones with the channel
    /// mean so they land on exactly zero.
    pub fn apply(&self, series: &EhrSeries) -> EhrSeries {
        let (t, k) = series.values.dim();
        let mut values = Array2::zeros((t, k));
        for r in 0..t {
            for c in 0..k {
                values[[r, c]] = if series.mask[[r, c]] {
                    (series.values[[r, c]] - self.mean[c]) / self.std[c]
                } else {
                    0.0
                };
            }
        }
        let static_vars = series
            .static_vars
            .iter()
            .zip(self.static_mean.iter().zip(&self.static_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        EhrSeries {
            values,
            mask: series.mask.clone(),
            hours: series.hours.clone(),
            static_vars,
        }
    }

    pub fn apply_cohort(&self, cohort: &Cohort) -> Cohort {
        Cohort {
            patients: cohort
                .patients
                .iter()
                .map(|p| PatientRecord {
                    series: self.apply(&p.series),
                    ..p.clone()
                })
                .collect(),
        }
    }
}
