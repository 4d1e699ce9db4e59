//! Synthetic asynchronous-patient world with ground-truth disease state.
//!
//! Each patient has fixed anatomy (smooth ellipses and bands) and a latent
//! disease state s(t) in [0,1] following a seeded reflecting random walk.
//! Images render the anatomy plus an opacity blob whose radius and intensity
//! grow monotonically with s at acquisition time; EHR channels are noisy
//! readouts of s and its finite differences on an irregular hourly grid with
//! missingness. The blob geometry is fixed in image coordinates and kept
//! clear of the anatomy edges so a local background-subtracted statistic
//! inverts the render map (see [`measure_opacity`]).

use crate::dataset::{EhrSeries, ImageSample, PatientRecord};
use crate::error::{Error, Result};
use crate::seed::{child_seed, rng};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub image_size: usize,
    /// Must divide `image_size`; echoed from the VAE compression ratio.
    pub compression: usize,
    pub n_patients: usize,
    /// Number of dynamic EHR channels K (channel 0 reads out s).
    pub ehr_channels: usize,
    /// Per-hour standard deviation of the state random walk.
    pub state_noise: f64,
    /// Observation noise on EHR readouts.
    pub observation_noise: f64,
    /// Per-(hour, channel) observation probability.
    pub obs_prob: f64,
    /// Stay length range in hours (inclusive).
    pub stay_hours: (i64, i64),
    /// First image hour range (inclusive; may start before admission).
    pub first_image_hour: (i64, i64),
    /// Short inter-image gap: min + Exp(mean_excess), in hours.
    pub gap_short: (f64, f64),
    /// Long inter-image gap and its probability.
    pub gap_long: (f64, f64),
    pub gap_long_prob: f64,
    /// Force the initial state instead of drawing it uniformly.
    pub initial_state: Option<f64>,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            compression: 8,
            n_patients: 280,
            ehr_channels: 6,
            state_noise: 0.04,
            observation_noise: 0.08,
            obs_prob: 0.5,
            stay_hours: (56, 68),
            first_image_hour: (-6, 0),
            gap_short: (6.0, 8.0),
            gap_long: (36.0, 14.0),
            gap_long_prob: 0.45,
            initial_state: None,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.compression == 0 || self.image_size % self.compression != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a multiple of compression {}",
                self.image_size, self.compression
            )));
        }
        if self.state_noise < 0.0 || self.observation_noise < 0.0 {
            return Err(Error::config("noise levels must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.obs_prob) {
            return Err(Error::config("obs_prob must lie in [0,1]"));
        }
        if self.ehr_channels == 0 {
            return Err(Error::config("need at least one EHR channel"));
        }
        Ok(())
    }
}

/// Per-patient anatomy; constant across a patient's images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Anatomy {
    pub body_cx: f64,
    pub body_cy: f64,
    pub body_rx: f64,
    pub body_ry: f64,
    pub body_intensity: f64,
    pub core_cy: f64,
    pub core_rx: f64,
    pub core_ry: f64,
    pub core_intensity: f64,
    pub band_y: [f64; 2],
    pub band_gain: f64,
}

impl Anatomy {
    fn sample(r: &mut impl Rng) -> Self {
        Self {
            body_cx: r.gen_range(0.50..0.51),
            body_cy: r.gen_range(0.51..0.53),
            body_rx: r.gen_range(0.37..0.42),
            body_ry: r.gen_range(0.42..0.46),
            body_intensity: r.gen_range(0.18..0.30),
            core_cy: r.gen_range(0.68..0.72),
            core_rx: r.gen_range(0.08..0.12),
            core_ry: r.gen_range(0.08..0.11),
            core_intensity: r.gen_range(0.06..0.12),
            band_y: [r.gen_range(0.60..0.64), r.gen_range(0.70..0.74)],
            band_gain: r.gen_range(0.03..0.08),
        }
    }

    /// Mid-range anatomy used to build the opacity calibration curve.
    pub fn canonical() -> Self {
        Self {
            body_cx: 0.505,
            body_cy: 0.52,
            body_rx: 0.395,
            body_ry: 0.44,
            body_intensity: 0.24,
            core_cy: 0.70,
            core_rx: 0.10,
            core_ry: 0.095,
            core_intensity: 0.09,
            band_y: [0.62, 0.72],
            band_gain: 0.055,
        }
    }
}

/// Ground truth for oracle use: anatomy plus the state path.
#[derive(Debug, Clone)]
pub struct PatientTruth {
    pub anatomy: Anatomy,
    /// Hour of `state[0]` (walks start before the first possible image).
    pub hour0: i64,
    /// s(hour0 + i) for each i.
    pub state: Vec<f64>,
}

impl PatientTruth {
    pub fn s_at(&self, hour: i64) -> f64 {
        let idx = (hour - self.hour0).clamp(0, self.state.len() as i64 - 1) as usize;
        self.state[idx]
    }
}

// Fixed blob geometry, fractions of the image side. The measurement disk
// contains the blob at every s; the background annulus stays inside the
// smooth body interior for every anatomy in the sampling ranges.
const BLOB_CX: f64 = 0.36;
const BLOB_CY: f64 = 0.34;
const BLOB_RMAX: f64 = 0.13;
const BLOB_GAIN: f64 = 0.55;
const MEAS_DISK: f64 = 0.15;
const ANNULUS: (f64, f64) = (0.17, 0.20);
const BACKGROUND: f64 = 0.03;

fn soft_edge(d: f64, sharp: f64) -> f64 {
    1.0 / (1.0 + ((d - 1.0) * sharp).exp())
}

/// Render one frame of a patient at disease state `s`.
pub fn render_image(anatomy: &Anatomy, s: f64, size: usize) -> Array2<f64> {
    let n = size as f64;
    let mut img = Array2::from_elem((size, size), BACKGROUND);
    let blob_r = BLOB_RMAX * s.clamp(0.0, 1.0) * n;
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 / n, yi as f64 / n);
            let mut v = img[[yi, xi]];
            let db = ((x - anatomy.body_cx) / anatomy.body_rx).powi(2)
                + ((y - anatomy.body_cy) / anatomy.body_ry).powi(2);
            let body = soft_edge(db.sqrt(), 8.0);
            v += anatomy.body_intensity * body;
            let dc = ((x - anatomy.body_cx) / anatomy.core_rx).powi(2)
                + ((y - anatomy.core_cy) / anatomy.core_ry).powi(2);
            v += anatomy.core_intensity * soft_edge(dc.sqrt(), 6.0);
            for by in anatomy.band_y {
                v += anatomy.band_gain * (-((y - by) / 0.02).powi(2)).exp() * body;
            }
            if blob_r > 0.25 {
                let dx = xi as f64 - BLOB_CX * n;
                let dy = yi as f64 - BLOB_CY * n;
                let d = (dx * dx + dy * dy).sqrt();
                v += BLOB_GAIN * s * soft_edge(d / blob_r, 0.9 * blob_r.max(2.0));
            }
            img[[yi, xi]] = v.clamp(0.0, 1.0);
        }
    }
    img
}

/// Background-subtracted blob statistic: mean over the measurement disk
/// minus mean over the surrounding annulus.
fn blob_statistic(pixels: &Array2<f64>) -> f64 {
    let size = pixels.nrows();
    let n = size as f64;
    let (cx, cy) = (BLOB_CX * n, BLOB_CY * n);
    let (mut disk_sum, mut disk_n) = (0.0, 0usize);
    let (mut ann_sum, mut ann_n) = (0.0, 0usize);
    for yi in 0..size {
        for xi in 0..pixels.ncols() {
            let d = ((xi as f64 - cx).powi(2) + (yi as f64 - cy).powi(2)).sqrt() / n;
            if d <= MEAS_DISK {
                disk_sum += pixels[[yi, xi]];
                disk_n += 1;
            } else if d >= ANNULUS.0 && d <= ANNULUS.1 {
                ann_sum += pixels[[yi, xi]];
                ann_n += 1;
            }
        }
    }
    disk_sum / disk_n.max(1) as f64 - ann_sum / ann_n.max(1) as f64
}

fn calibration_curve(size: usize) -> Vec<(f64, f64)> {
    static CACHE: OnceLock<Mutex<BTreeMap<usize, Vec<(f64, f64)>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(size)
        .or_insert_with(|| {
            let anatomy = Anatomy::canonical();
            (0..=100)
                .map(|i| {
                    let s = i as f64 / 100.0;
                    (blob_statistic(&render_image(&anatomy, s, size)), s)
                })
                .collect()
        })
        .clone()
}

/// Invert the rendering map: estimate s in [0,1] from measured blob
/// statistics via the calibration curve for this image size.
pub fn measure_opacity(pixels: &Array2<f64>) -> f64 {
    let curve = calibration_curve(pixels.nrows());
    let stat = blob_statistic(pixels);
    // The curve is monotone increasing in s; interpolate piecewise.
    if stat <= curve[0].0 {
        return 0.0;
    }
    for w in curve.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if stat >= x0 && stat <= x1 {
            if (x1 - x0).abs() < 1e-12 {
                return y0;
            }
            return (y0 + (stat - x0) / (x1 - x0) * (y1 - y0)).clamp(0.0, 1.0);
        }
    }
    1.0
}

fn normal(r: &mut impl Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Generate one patient deterministically from its own seed.
pub fn generate_patient(
    config: &WorldConfig,
    patient_seed: u64,
) -> Result<(PatientRecord, PatientTruth)> {
    config.validate()?;
    let mut r = rng(patient_seed);

    let anatomy = Anatomy::sample(&mut r);
    let stay = r.gen_range(config.stay_hours.0..=config.stay_hours.1);
    let hour0 = config.first_image_hour.0.min(0) - 2;

    // Reflecting random walk on [0,1].
    let mut state = Vec::with_capacity((stay - hour0 + 1) as usize);
    let mut s = config
        .initial_state
        .unwrap_or_else(|| r.gen_range(0.15..0.85));
    for _ in hour0..=stay {
        state.push(s);
        let mut next = s + config.state_noise * normal(&mut r);
        loop {
            if next < 0.0 {
                next = -next;
            } else if next > 1.0 {
                next = 2.0 - next;
            } else {
                break;
            }
        }
        s = next;
    }
    let truth = PatientTruth {
        anatomy,
        hour0,
        state,
    };

    // Image acquisition times.
    let mut image_hours = vec![r.gen_range(config.first_image_hour.0..=config.first_image_hour.1)];
    loop {
        let last = *image_hours.last().unwrap();
        let gap = if r.gen::<f64>() < config.gap_long_prob {
            config.gap_long.0 + rand_exp(&mut r, config.gap_long.1)
        } else {
            config.gap_short.0 + rand_exp(&mut r, config.gap_short.1)
        };
        let next = last + (gap.round() as i64).max(1);
        if next > stay {
            break;
        }
        image_hours.push(next);
    }

    let images: Vec<ImageSample> = image_hours
        .iter()
        .map(|&h| {
            let s_h = truth.s_at(h);
            ImageSample {
                pixels: render_image(&truth.anatomy, s_h, config.image_size),
                taken_at: h,
                abnormality: vec![s_h > 0.5],
            }
        })
        .collect();

    // EHR readouts on the hourly grid with per-entry missingness.
    let k = config.ehr_channels;
    let phase = r.gen_range(0.0..std::f64::consts::TAU);
    let mut ar = 0.0f64;
    let mut hours = Vec::new();
    let mut values = Vec::new();
    let mut mask = Vec::new();
    for h in 0..=stay {
        let s_h = truth.s_at(h);
        let s_prev = truth.s_at(h - 1);
        ar = 0.9 * ar + 0.1 * normal(&mut r);
        let so = config.observation_noise;
        let mut row_vals = vec![0.0; k];
        let mut row_mask = vec![false; k];
        for c in 0..k {
            let raw = match c {
                0 => s_h + so * normal(&mut r),
                1 => 5.0 * (s_h - s_prev) + so * normal(&mut r),
                2 => ar,
                3 => 0.5 * ((h as f64) * std::f64::consts::TAU / 24.0 + phase).sin()
                    + so * normal(&mut r),
                4 => 0.5 * s_h + 0.5 * ar + so * normal(&mut r),
                _ => normal(&mut r),
            };
            let observed = r.gen::<f64>() < config.obs_prob;
            if observed {
                row_vals[c] = raw;
                row_mask[c] = true;
            }
        }
        if row_mask.iter().any(|&m| m) {
            hours.push(h);
            values.extend(row_vals);
            mask.extend(row_mask);
        }
    }
    let t = hours.len();
    let series = EhrSeries {
        values: Array2::from_shape_vec((t, k), values).unwrap(),
        mask: Array2::from_shape_vec((t, k), mask).unwrap(),
        hours,
        static_vars: vec![(r.gen_range(35.0..90.0) - 60.0) / 15.0, r.gen_range(0..2) as f64],
    };

    let s_end = truth.s_at(stay);
    let mean_s: f64 = {
        let from = (0 - truth.hour0) as usize;
        let seg = &truth.state[from..];
        seg.iter().sum::<f64>() / seg.len() as f64
    };
    let record = PatientRecord {
        id: String::new(), // assigned by the world generator
        images,
        series,
        stay_hours: stay,
        mortality: vec![s_end > 0.7],
        phenotype: vec![s_end > 0.4, s_end > 0.7, mean_s > 0.5],
    };
    Ok((record, truth))
}

fn rand_exp(r: &mut impl Rng, mean: f64) -> f64 {
    let u: f64 = r.gen_range(1e-12..1.0);
    -mean * u.ln()
}

/// Generate the whole world; patients derive child seeds and can be built in
/// parallel, collected in index order.
pub fn generate_world(config: &WorldConfig) -> Result<Vec<(PatientRecord, PatientTruth)>> {
    config.validate()?;
    let mut out: Vec<(PatientRecord, PatientTruth)> = (0..config.n_patients)
        .into_par_iter()
        .map(|i| {
            let seed = child_seed(config.seed, "synth-patient", i as u64);
            generate_patient(config, seed).map(|(mut rec, truth)| {
                rec.id = format!("p{i:04}");
                (rec, truth)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    Ok(out)
}

/// Write the cohort in the exact on-disk layout consumed by the dataset
/// loader, plus a truth.csv per patient for oracle use only.
pub fn write_world(config: &WorldConfig, root: &Path) -> Result<()> {
    let world = generate_world(config)?;
    for (rec, truth) in &world {
        write_patient(root, rec, truth)?;
    }
    Ok(())
}

fn write_patient(root: &Path, rec: &PatientRecord, truth: &PatientTruth) -> Result<()> {
    let dir = root.join(&rec.id);
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| Error::io(images_dir.display().to_string(), e))?;

    for img in &rec.images {
        crate::dataset::write_gray_png(
            &images_dir.join(format!("{}.png", img.taken_at)),
            &img.pixels,
        )?;
    }

    let k = rec.series.channels();
    let ehr_path = dir.join("ehr.csv");
    let mut w = std::fs::File::create(&ehr_path)
        .map_err(|e| Error::io(ehr_path.display().to_string(), e))?;
    let mut header = String::from("hour");
    for c in 0..k {
        header.push_str(&format!(",v{c}"));
    }
    for c in 0..k {
        header.push_str(&format!(",m{c}"));
    }
    writeln!(w, "{header}").map_err(|e| Error::io(ehr_path.display().to_string(), e))?;
    for (r_idx, &h) in rec.series.hours.iter().enumerate() {
        let mut line = format!("{h}");
        for c in 0..k {
            line.push_str(&format!(",{:.6}", rec.series.values[[r_idx, c]]));
        }
        for c in 0..k {
            line.push_str(&format!(",{}", rec.series.mask[[r_idx, c]] as u8));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(ehr_path.display().to_string(), e))?;
    }

    let mut abnormality = BTreeMap::new();
    for img in &rec.images {
        abnormality.insert(
            img.taken_at.to_string(),
            img.abnormality.iter().map(|&b| b as u8).collect::<Vec<u8>>(),
        );
    }
    let labels = serde_json::json!({
        "stay_hours": rec.stay_hours,
        "static": rec.series.static_vars,
        "abnormality": abnormality,
        "task_mortality": rec.mortality.iter().map(|&b| b as u8).collect::<Vec<u8>>(),
        "task_phenotype": rec.phenotype.iter().map(|&b| b as u8).collect::<Vec<u8>>(),
    });
    let labels_path = dir.join("labels.json");
    std::fs::write(&labels_path, serde_json::to_string_pretty(&labels).unwrap())
        .map_err(|e| Error::io(labels_path.display().to_string(), e))?;

    let truth_path = dir.join("truth.csv");
    let mut tw = std::fs::File::create(&truth_path)
        .map_err(|e| Error::io(truth_path.display().to_string(), e))?;
    writeln!(tw, "hour,s").map_err(|e| Error::io(truth_path.display().to_string(), e))?;
    for (i, &s) in truth.state.iter().enumerate() {
        writeln!(tw, "{},{:.6}", truth.hour0 + i as i64, s)
            .map_err(|e| Error::io(truth_path.display().to_string(), e))?;
    }
    Ok(())
}

/// Oracle-side reader for truth.csv (only the evaluate --oracle-opacity path
/// may call this; training code never reads it).
pub fn read_truth(root: &Path, patient_id: &str) -> Result<Vec<(i64, f64)>> {
    let path = root.join(patient_id).join("truth.csv");
    let text =
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let mut parts = line.split(',');
        let h: i64 = parts
            .next()
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| Error::data(format!("{}: bad truth row", path.display())))?;
        let s: f64 = parts
            .next()
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| Error::data(format!("{}: bad truth row", path.display())))?;
        out.push((h, s));
    }
    Ok(out)
}
