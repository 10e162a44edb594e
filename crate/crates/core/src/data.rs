//! Multi-rater datasets: binary morphology, synthetic rater simulation,
//! dataset generation, the JSON manifest and image loading.
//!
//! Images are stored as 16-bit grayscale PNG and masks as 8-bit PNG with
//! values {0, 255}. The manifest lists paths relative to its own directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::metrics::SampleSet;

pub const MANIFEST_VERSION: u32 = 1;

/// Raw intensities above this value are foreground in generated images
/// (before normalization, with zero noise).
pub const RAW_FOREGROUND_THRESHOLD: f64 = 0.5;

/// Loaded images span `[-1 + NORMALIZE_MARGIN, 1 - NORMALIZE_MARGIN]`.
pub const NORMALIZE_MARGIN: f64 = 1e-3;

const MAX_SHAPE_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaterOp {
    Erode,
    Dilate,
    Identity,
}

impl RaterOp {
    pub fn name(self) -> &'static str {
        match self {
            RaterOp::Erode => "erode",
            RaterOp::Dilate => "dilate",
            RaterOp::Identity => "identity",
        }
    }
}

impl FromStr for RaterOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "erode" | "erosion" => Ok(RaterOp::Erode),
            "dilate" | "dilation" => Ok(RaterOp::Dilate),
            "identity" => Ok(RaterOp::Identity),
            _ => Err(Error::UnknownOp(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Offsets of the discrete disc: `dy^2 + dx^2 <= radius^2`.
pub fn disc_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn morph(mask: &Mask, radius: usize, erode: bool) -> Mask {
    let offsets = disc_offsets(radius);
    let (h, w) = (mask.height as isize, mask.width as isize);
    let mut out = Grid::filled(mask.height, mask.width, 0u8);
    for y in 0..h {
        for x in 0..w {
            let hit = |&(dy, dx): &(isize, isize)| {
                let (sy, sx) = (y + dy, x + dx);
                if sy < 0 || sx < 0 || sy >= h || sx >= w {
                    // outside the grid counts as foreground for erosion and
                    // background for dilation, keeping the two dual
                    return erode;
                }
                *mask.get(sy as usize, sx as usize) != 0
            };
            let v = if erode { offsets.iter().all(hit) } else { offsets.iter().any(hit) };
            *out.get_mut(y as usize, x as usize) = u8::from(v);
        }
    }
    out
}

/// Binary erosion by a disc of the given radius.
pub fn erode(mask: &Mask, se_radius: usize) -> Mask {
    morph(mask, se_radius, true)
}

/// Binary dilation by a disc of the given radius.
pub fn dilate(mask: &Mask, se_radius: usize) -> Mask {
    morph(mask, se_radius, false)
}

/// One simulated annotation per op, in order.
pub fn simulate_raters(base_mask: &Mask, rater_ops: &[RaterOp], se_radius: usize) -> Vec<Mask> {
    rater_ops
        .iter()
        .map(|op| match op {
            RaterOp::Erode => erode(base_mask, se_radius),
            RaterOp::Dilate => dilate(base_mask, se_radius),
            RaterOp::Identity => base_mask.clone(),
        })
        .collect()
}

/// [`simulate_raters`] taking op names.
pub fn simulate_raters_named(base_mask: &Mask, rater_ops: &[&str], se_radius: usize) -> Result<Vec<Mask>> {
    let ops = rater_ops.iter().map(|s| s.parse()).collect::<Result<Vec<RaterOp>>>()?;
    Ok(simulate_raters(base_mask, &ops, se_radius))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_cases: usize,
    pub image_size: usize,
    /// Upper bound on ellipses per image (at least one is drawn).
    pub num_shapes: usize,
    pub se_radius: usize,
    pub noise_std: f64,
    pub rater_ops: Vec<RaterOp>,
    pub seed: u64,
    /// Fraction of cases assigned to the test split.
    pub test_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_cases: 50,
            image_size: 64,
            num_shapes: 2,
            se_radius: 2,
            noise_std: 0.05,
            rater_ops: vec![RaterOp::Erode, RaterOp::Identity, RaterOp::Dilate],
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_cases == 0 || self.image_size < 4 || self.num_shapes == 0 || self.se_radius == 0 {
            return Err(Error::Config(
                "num_cases, num_shapes and se_radius must be >= 1 and image_size >= 4".into(),
            ));
        }
        if self.rater_ops.is_empty() {
            return Err(Error::Config("rater_ops must list at least one operation".into()));
        }
        if !(self.noise_std >= 0.0) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("noise_std must be >= 0 and test_fraction in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn test_count(&self) -> usize {
        (self.num_cases as f64 * self.test_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiRaterCase {
    pub case_id: String,
    /// Normalized to (-1, 1).
    pub image: Grid<f32>,
    pub rater_masks: Vec<Mask>,
    pub rater_ids: Option<Vec<String>>,
    pub split: Split,
}

impl MultiRaterCase {
    pub fn sample_set(&self) -> Result<SampleSet> {
        SampleSet::new(self.rater_masks.clone())
    }

    pub fn rater_count(&self) -> usize {
        self.rater_masks.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestCase {
    pub id: String,
    pub image: String,
    pub masks: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub raters: Vec<String>,
    pub se_radius: usize,
    pub seed: u64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub image_size: usize,
    pub cases: Vec<ManifestCase>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if let Some(c) = self.cases.iter().find(|c| c.masks.len() != self.raters.len()) {
            return Err(Error::Config(format!(
                "case `{}` lists {} masks but the manifest declares {} raters",
                c.id,
                c.masks.len(),
                self.raters.len()
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(values: &Grid<f64>, sigma: f64) -> Grid<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = (values.height as isize, values.width as isize);
    let pass = |src: &Grid<f64>, horizontal: bool| {
        let mut out = src.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, i) in (-radius..=radius).enumerate() {
                    let (sy, sx) = if horizontal {
                        (y, (x + i).clamp(0, w - 1))
                    } else {
                        ((y + i).clamp(0, h - 1), x)
                    };
                    acc += kernel[k] * src.get(sy as usize, sx as usize);
                }
                *out.get_mut(y as usize, x as usize) = acc / norm;
            }
        }
        out
    };
    pass(&pass(values, true), false)
}

fn render_ellipses<R: Rng>(rng: &mut R, size: usize, count: usize, margin: f64) -> Mask {
    let mut mask = Grid::filled(size, size, 0u8);
    let s = size as f64;
    for _ in 0..count {
        let a = rng.gen_range(s / 10.0..s / 5.0);
        let b = rng.gen_range(s / 10.0..s / 5.0);
        let reach = a.max(b) + margin;
        let cx = rng.gen_range(reach..(s - reach).max(reach + 1e-9));
        let cy = rng.gen_range(reach..(s - reach).max(reach + 1e-9));
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (sin, cos) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (dx * cos + dy * sin) / a;
                let v = (-dx * sin + dy * cos) / b;
                if u * u + v * v <= 1.0 {
                    *mask.get_mut(y, x) = 1;
                }
            }
        }
    }
    mask
}

fn touches_border(mask: &Mask) -> bool {
    let (h, w) = mask.shape();
    (0..w).any(|x| *mask.get(0, x) != 0 || *mask.get(h - 1, x) != 0)
        || (0..h).any(|y| *mask.get(y, 0) != 0 || *mask.get(y, w - 1) != 0)
}

/// One generated case before it is written to disk.
#[derive(Clone, Debug)]
pub struct SyntheticCase {
    pub base_mask: Mask,
    /// Raw intensity quantized to 16 bits.
    pub raw_image: Grid<u16>,
    pub rater_masks: Vec<Mask>,
}

/// Per-case random stream keyed by (seed, case index).
fn case_stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn synthesize_case(config: &GenConfig, index: usize) -> Result<SyntheticCase> {
    config.validate()?;
    let mut rng = case_stream(config.seed, index);
    let size = config.image_size;
    let margin = config.se_radius as f64 + 1.0;
    let mut base = None;
    for _ in 0..MAX_SHAPE_ATTEMPTS {
        let count = rng.gen_range(1..=config.num_shapes);
        let candidate = render_ellipses(&mut rng, size, count, margin);
        let eroded = erode(&candidate, config.se_radius);
        if eroded.count() >= 4 && !touches_border(&dilate(&candidate, config.se_radius)) {
            base = Some(candidate);
            break;
        }
    }
    let base_mask = base.ok_or_else(|| {
        Error::Generation(format!(
            "case {index}: no valid shape within {MAX_SHAPE_ATTEMPTS} attempts (image_size {size}, se_radius {})",
            config.se_radius
        ))
    })?;

    let blurred = gaussian_blur(&base_mask.map(|&v| v as f64), 1.5);
    let (fx, fy): (f64, f64) = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0));
    let (px, py): (f64, f64) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
    let tau = std::f64::consts::TAU;
    let mut raw = Grid::filled(size, size, 0u16);
    for y in 0..size {
        for x in 0..size {
            let texture = 0.075
                * (1.0 + (tau * fx * x as f64 / size as f64 + px).sin() * (tau * fy * y as f64 / size as f64 + py).cos());
            let noise: f64 = if config.noise_std > 0.0 {
                config.noise_std * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let v = 0.5 * *base_mask.get(y, x) as f64 + 0.3 * blurred.get(y, x) + texture + noise;
            *raw.get_mut(y, x) = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        }
    }
    let rater_masks = simulate_raters(&base_mask, &config.rater_ops, config.se_radius);
    Ok(SyntheticCase {
        base_mask,
        raw_image: raw,
        rater_masks,
    })
}

/// Affine map of the stored range onto `(-1, 1)`; constant images map to 0.
pub fn normalize_image<T: Copy + Into<f64>>(raw: &Grid<T>) -> Grid<f32> {
    let (lo, hi) = raw
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v.into()), hi.max(v.into())));
    if !(hi > lo) {
        return raw.map(|_| 0.0);
    }
    let scale = 1.0 - NORMALIZE_MARGIN;
    raw.map(|&v| (scale * (2.0 * (v.into() - lo) / (hi - lo) - 1.0)) as f32)
}

fn write_u16_png(path: &Path, grid: &Grid<u16>) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(grid.width as u32, grid.height as u32, grid.data.clone()).expect("buffer sized");
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        mask.width as u32,
        mask.height as u32,
        mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect(),
    )
    .expect("buffer sized");
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Writes a real-valued map as 16-bit PNG, scaling `[0, max]` to full range.
pub fn write_scaled_png(path: &Path, values: &Grid<f64>, max: f64) -> Result<()> {
    let q = values.map(|&v| ((v / max).clamp(0.0, 1.0) * 65535.0).round() as u16);
    write_u16_png(path, &q)
}

/// Reads a grayscale PNG as (values, full-scale value).
fn read_gray(path: &Path) -> Result<(Grid<f64>, f64)> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
    }
    let img = image::open(path).map_err(|e| Error::parse(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (data, full): (Vec<f64>, f64) = match img {
        image::DynamicImage::ImageLuma8(b) => (b.into_raw().into_iter().map(f64::from).collect(), 255.0),
        other => (other.into_luma16().into_raw().into_iter().map(f64::from).collect(), 65535.0),
    };
    Ok((Grid::from_vec(h, w, data)?, full))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates the synthetic dataset under `output_dir` and writes
/// `manifest.json` there.
pub fn generate_dataset(config: &GenConfig, output_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    ensure_dir(&output_dir.join("images"))?;
    ensure_dir(&output_dir.join("masks"))?;
    let width = config.num_cases.saturating_sub(1).to_string().len().max(3);
    let test_start = config.num_cases - config.test_count();
    let mut cases = Vec::with_capacity(config.num_cases);
    for i in 0..config.num_cases {
        let synth = synthesize_case(config, i)?;
        let id = format!("case_{i:0width$}");
        let image_rel = format!("images/{id}.png");
        write_u16_png(&output_dir.join(&image_rel), &synth.raw_image)?;
        let mut masks = Vec::with_capacity(synth.rater_masks.len());
        for (r, mask) in synth.rater_masks.iter().enumerate() {
            let rel = format!("masks/{id}_r{r}.png");
            write_mask_png(&output_dir.join(&rel), mask)?;
            masks.push(rel);
        }
        cases.push(ManifestCase {
            id,
            image: image_rel,
            masks,
            split: if i >= test_start { Split::Test } else { Split::Train },
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        raters: config.rater_ops.iter().map(|op| op.name().to_string()).collect(),
        se_radius: config.se_radius,
        seed: config.seed,
        noise_std: config.noise_std,
        image_size: config.image_size,
        cases,
    };
    manifest.save(&output_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Loads one manifest entry; `base_dir` is the manifest's directory.
pub fn load_case(entry: &ManifestCase, base_dir: &Path, rater_ids: Option<&[String]>) -> Result<MultiRaterCase> {
    let (raw, _) = read_gray(&base_dir.join(&entry.image))?;
    let image = normalize_image(&raw);
    let mut rater_masks = Vec::with_capacity(entry.masks.len());
    for rel in &entry.masks {
        let path = base_dir.join(rel);
        let (values, full) = read_gray(&path)?;
        if values.shape() != image.shape() {
            return Err(Error::Shape(format!(
                "{}: mask {}x{} vs image {}x{}",
                path.display(),
                values.height,
                values.width,
                image.height,
                image.width
            )));
        }
        rater_masks.push(values.map(|&v| u8::from(v >= 0.5 * full)));
    }
    if rater_masks.is_empty() {
        return Err(Error::EmptySet("case masks"));
    }
    Ok(MultiRaterCase {
        case_id: entry.id.clone(),
        image,
        rater_masks,
        rater_ids: rater_ids.map(<[String]>::to_vec),
        split: entry.split,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cases: Vec<MultiRaterCase>,
}

impl Dataset {
    pub fn new(cases: Vec<MultiRaterCase>) -> Self {
        Self { cases }
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let cases = manifest
            .cases
            .iter()
            .map(|c| load_case(c, &base, Some(&manifest.raters)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cases })
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    /// Common rater count; errors when cases disagree.
    pub fn rater_count(&self) -> Result<usize> {
        let first = self.cases.first().ok_or(Error::EmptySet("dataset"))?.rater_count();
        if let Some(c) = self.cases.iter().find(|c| c.rater_count() != first) {
            return Err(Error::Config(format!(
                "case `{}` has {} raters, expected {first}",
                c.case_id,
                c.rater_count()
            )));
        }
        Ok(first)
    }

    pub fn split(&self, split: Split) -> Dataset {
        Dataset::new(self.cases.iter().filter(|c| c.split == split).cloned().collect())
    }

    /// Training pool: every case not in the test split.
    pub fn training_pool(&self) -> Dataset {
        Dataset::new(self.cases.iter().filter(|c| c.split != Split::Test).cloned().collect())
    }

    /// Single-rater view holding only rater `r`'s masks.
    pub fn select_rater(&self, r: usize) -> Result<Dataset> {
        let cases = self
            .cases
            .iter()
            .map(|c| {
                let mask = c.rater_masks.get(r).ok_or_else(|| Error::MissingRater {
                    case: c.case_id.clone(),
                    rater: r,
                })?;
                Ok(MultiRaterCase {
                    rater_masks: vec![mask.clone()],
                    rater_ids: c.rater_ids.as_ref().and_then(|ids| ids.get(r)).map(|id| vec![id.clone()]),
                    ..c.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::new(cases))
    }
}

/// Independently permutes each case's rater order with a seeded stream per
/// case. The set of masks per case is unchanged.
pub fn shuffle_annotations(dataset: &Dataset, seed: u64) -> Dataset {
    let cases = dataset
        .cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut order: Vec<usize> = (0..c.rater_count()).collect();
            let mut rng = case_stream(seed, i);
            order.shuffle(&mut rng);
            MultiRaterCase {
                rater_masks: order.iter().map(|&j| c.rater_masks[j].clone()).collect(),
                rater_ids: c.rater_ids.as_ref().map(|ids| order.iter().filter_map(|&j| ids.get(j).cloned()).collect()),
                ..c.clone()
            }
        })
        .collect();
    Dataset::new(cases)
}

/// Crops image and masks to the central `size x size` window.
pub fn center_crop(case: &MultiRaterCase, size: usize) -> Result<MultiRaterCase> {
    let (h, w) = case.image.shape();
    if size == 0 || size > h || size > w {
        return Err(Error::Shape(format!("cannot crop {h}x{w} to {size}x{size}")));
    }
    let (y0, x0) = ((h - size) / 2, (w - size) / 2);
    fn crop<T: Copy>(g: &Grid<T>, y0: usize, x0: usize, size: usize) -> Grid<T> {
        let mut data = Vec::with_capacity(size * size);
        for y in y0..y0 + size {
            data.extend_from_slice(&g.data[y * g.width + x0..y * g.width + x0 + size]);
        }
        Grid {
            height: size,
            width: size,
            data,
        }
    }
    Ok(MultiRaterCase {
        image: crop(&case.image, y0, x0, size),
        rater_masks: case.rater_masks.iter().map(|m| crop(m, y0, x0, size)).collect(),
        ..case.clone()
    })
}
