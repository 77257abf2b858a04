//! Procedural street scenes: layered label maps drawn from a fixed grammar
//! and rendered with domain-specific appearance.
//!
//! Rows from top to bottom: sky, a building skyline, a sidewalk band, then
//! road to the bottom edge. Cars sit entirely inside road rows, pedestrians
//! inside sidewalk rows.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_manifest, write_manifest, MANIFEST};
use crate::error::{Error, Result};
use crate::losses::LabelMap;
use crate::numerics::bten::{sha256_hex, Bten, BtenData};
use crate::numerics::Tensor;

pub const NUM_CLASSES: usize = 6;
pub const SKY: u8 = 0;
pub const BUILDING: u8 = 1;
pub const SIDEWALK: u8 = 2;
pub const ROAD: u8 = 3;
pub const CAR: u8 = 4;
pub const PEDESTRIAN: u8 = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["sky", "building", "sidewalk", "road", "car", "pedestrian"];

/// Inclusive integer range.
pub type Span = (usize, usize);

/// Scene grammar shared by every domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Row of the first sidewalk row (before the domain shift).
    pub horizon: Span,
    pub sidewalk_rows: Span,
    pub building_height: Span,
    pub building_width: Span,
    pub cars: Span,
    pub car_height: Span,
    pub car_width: Span,
    pub pedestrians: Span,
    pub pedestrian_height: Span,
    pub pedestrian_width: Span,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            horizon: (12, 16),
            sidewalk_rows: (3, 5),
            building_height: (3, 10),
            building_width: (3, 9),
            cars: (0, 3),
            car_height: (3, 5),
            car_width: (4, 8),
            pedestrians: (0, 3),
            pedestrian_height: (2, 3),
            pedestrian_width: (1, 2),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let spans = [
            ("horizon", self.horizon),
            ("sidewalk_rows", self.sidewalk_rows),
            ("building_height", self.building_height),
            ("building_width", self.building_width),
            ("cars", self.cars),
            ("car_height", self.car_height),
            ("car_width", self.car_width),
            ("pedestrians", self.pedestrians),
            ("pedestrian_height", self.pedestrian_height),
            ("pedestrian_width", self.pedestrian_width),
        ];
        if let Some((name, _)) = spans.iter().find(|(_, (lo, hi))| lo > hi) {
            return Err(Error::invalid(format!("scene.{name}: empty range")));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::invalid(format!(
                "scene must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        let nonzero = [
            ("sidewalk_rows", self.sidewalk_rows.0),
            ("building_width", self.building_width.0),
            ("car_height", self.car_height.0),
            ("car_width", self.car_width.0),
            ("pedestrian_height", self.pedestrian_height.0),
            ("pedestrian_width", self.pedestrian_width.0),
        ];
        if let Some((name, _)) = nonzero.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("scene.{name} must be >= 1")));
        }
        // Worst case: latest horizon plus widest sidewalk plus tallest car
        // must fit; the sky must keep at least one row.
        let last = self.horizon.1 + 2 + self.sidewalk_rows.1 + self.car_height.1;
        if self.horizon.0 < 3 || last > self.height {
            return Err(Error::invalid(format!(
                "scene.horizon {:?} leaves no room for all bands in {} rows",
                self.horizon, self.height
            )));
        }
        if self.car_width.1 > self.width || self.pedestrian_height.1 > self.sidewalk_rows.0 {
            return Err(Error::invalid(
                "objects must fit their band (car_width <= width, pedestrian_height <= sidewalk_rows)",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(Error::invalid(format!("unknown domain {s:?} (source|target)"))),
        }
    }

    fn stream(self) -> u64 {
        match self {
            Domain::Source => 1,
            Domain::Target => 2,
        }
    }
}

/// Appearance of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub colors: [[f64; 3]; NUM_CLASSES],
    pub noise_std: f64,
    pub brightness: f64,
    /// Added to the sampled horizon row.
    pub horizon_shift: i64,
}

impl DomainParams {
    /// Bright, clean rendering.
    pub fn source() -> Self {
        Self {
            colors: [
                [0.55, 0.75, 0.95],
                [0.65, 0.45, 0.35],
                [0.80, 0.75, 0.65],
                [0.40, 0.40, 0.45],
                [0.90, 0.20, 0.20],
                [0.95, 0.85, 0.20],
            ],
            noise_std: 0.03,
            brightness: 0.0,
            horizon_shift: 0,
        }
    }

    /// Darker, noisier, recoloured rendering with a lowered horizon.
    pub fn target() -> Self {
        Self {
            colors: [
                [0.60, 0.77, 0.95],
                [0.67, 0.50, 0.40],
                [0.72, 0.67, 0.75],
                [0.40, 0.40, 0.45],
                [0.75, 0.30, 0.30],
                [0.90, 0.77, 0.25],
            ],
            noise_std: 0.06,
            brightness: -0.15,
            horizon_shift: 1,
        }
    }

    pub fn for_domain(d: Domain) -> Self {
        match d {
            Domain::Source => Self::source(),
            Domain::Target => Self::target(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("domain colours must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("domain noise_std must be >= 0"));
        }
        if !self.brightness.is_finite() {
            return Err(Error::invalid("domain brightness must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `H×W×3`, values in `[0, 1]` and exactly representable as f32.
    pub image: Tensor,
    pub labels: LabelMap,
    pub domain: Domain,
    pub seed: u64,
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): Span) -> usize {
    rng.random_range(lo..=hi)
}

/// Samples a label map from the grammar.
pub fn generate_labels(cfg: &SceneConfig, horizon_shift: i64, rng: &mut ChaCha8Rng) -> LabelMap {
    let (h, w) = (cfg.height, cfg.width);
    let horizon = (draw(rng, cfg.horizon) as i64 + horizon_shift).clamp(2, h as i64 - 2) as usize;
    let sidewalk = draw(rng, cfg.sidewalk_rows).min(h - horizon - 1);
    let road_start = horizon + sidewalk;
    let mut lab = vec![ROAD; h * w];
    for r in 0..road_start {
        let class = if r < horizon { SKY } else { SIDEWALK };
        lab[r * w..(r + 1) * w].fill(class);
    }
    // Skyline: consecutive blocks of random width and height.
    let mut col = 0;
    while col < w {
        let bw = draw(rng, cfg.building_width).min(w - col);
        let bh = draw(rng, cfg.building_height).min(horizon - 1);
        for r in horizon - bh..horizon {
            lab[r * w + col..r * w + col + bw].fill(BUILDING);
        }
        col += bw;
    }
    for _ in 0..draw(rng, cfg.cars) {
        let ch = draw(rng, cfg.car_height).min(h - road_start);
        let cw = draw(rng, cfg.car_width);
        let r0 = rng.random_range(road_start..=h - ch);
        let c0 = rng.random_range(0..=w - cw);
        for r in r0..r0 + ch {
            lab[r * w + c0..r * w + c0 + cw].fill(CAR);
        }
    }
    for _ in 0..draw(rng, cfg.pedestrians) {
        let ph = draw(rng, cfg.pedestrian_height).min(sidewalk);
        let pw = draw(rng, cfg.pedestrian_width);
        let r0 = rng.random_range(horizon..=road_start - ph);
        let c0 = rng.random_range(0..=w - pw);
        for r in r0..r0 + ph {
            lab[r * w + c0..r * w + c0 + pw].fill(PEDESTRIAN);
        }
    }
    LabelMap {
        height: h,
        width: w,
        labels: lab,
    }
}

/// `colour[class] + brightness + N(0, noise²)`, clipped to `[0, 1]` and
/// rounded to f32 precision.
pub fn render(labels: &LabelMap, dom: &DomainParams, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(labels.labels.len() * 3);
    for &l in &labels.labels {
        for ch in 0..3 {
            let noise = if dom.noise_std > 0.0 {
                dom.noise_std * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let v = (dom.colors[l as usize][ch] + dom.brightness + noise).clamp(0.0, 1.0);
            data.push(v as f32 as f64);
        }
    }
    Tensor::new(vec![labels.height, labels.width, 3], data).expect("consistent shape")
}

pub fn generate_scene(cfg: &SceneConfig, dom: &DomainParams, domain: Domain, seed: u64) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain.stream());
    let labels = generate_labels(cfg, dom.horizon_shift, &mut rng);
    let image = render(&labels, dom, &mut rng);
    SceneSample {
        image,
        labels,
        domain,
        seed,
    }
}

/// First rule of the grammar a label map breaks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    SkyBelowRoad { col: usize },
    CarOffRoad { row: usize, col: usize },
    PedestrianOffSidewalk { row: usize, col: usize },
    LabelOutOfRange { index: usize },
}

/// Checks the hard ordering rules: in every column all sky lies above all
/// road; cars occupy only rows that hold road; pedestrians only rows that
/// hold sidewalk.
pub fn validate_structure(labels: &LabelMap) -> std::result::Result<(), Violation> {
    let (h, w) = (labels.height, labels.width);
    if let Some(index) = labels.labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(Violation::LabelOutOfRange { index });
    }
    for col in 0..w {
        let column = (0..h).map(|r| labels.get(r, col));
        let last_sky = column.clone().rposition(|l| l == SKY);
        let first_road = column.clone().position(|l| l == ROAD);
        if let (Some(s), Some(r)) = (last_sky, first_road) {
            if s > r {
                return Err(Violation::SkyBelowRoad { col });
            }
        }
    }
    let row_has = |r: usize, class: u8| (0..w).any(|c| labels.get(r, c) == class);
    for row in 0..h {
        let (road, walk) = (row_has(row, ROAD), row_has(row, SIDEWALK));
        for col in 0..w {
            match labels.get(row, col) {
                CAR if !road => return Err(Violation::CarOffRoad { row, col }),
                PEDESTRIAN if !walk => return Err(Violation::PedestrianOffSidewalk { row, col }),
                _ => {}
            }
        }
    }
    Ok(())
}

/// One-hot with label smoothing `eps`, plus uniform noise in
/// `[−noise_amp, noise_amp]`, renormalized per pixel. Output shape is
/// `H×W×C`.
pub fn labels_to_flow_input(labels: &LabelMap, classes: usize, eps: f64, noise_amp: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels_to_flow_input_with(labels, classes, eps, noise_amp, &mut rng)
}

pub fn labels_to_flow_input_with(
    labels: &LabelMap,
    classes: usize,
    eps: f64,
    noise_amp: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if !(0.0..0.5).contains(&eps) || !(noise_amp >= 0.0) || classes < 2 {
        return Err(Error::invalid(format!(
            "flow input needs eps in [0, 0.5), noise_amp >= 0, >= 2 classes; got {eps}, {noise_amp}, {classes}"
        )));
    }
    let mut t = labels.one_hot(classes)?;
    let off = eps / (classes - 1) as f64;
    for row in t.data_mut().chunks_mut(classes) {
        for v in row.iter_mut() {
            *v = if *v == 1.0 { 1.0 - eps } else { off };
            if noise_amp > 0.0 {
                *v += rng.random_range(-noise_amp..=noise_amp);
            }
        }
        if noise_amp > 0.0 {
            // Noise below eps/(C-1) would go negative; clip before renormalizing.
            row.iter_mut().for_each(|v| *v = v.max(1e-6));
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(t)
}

/// In-memory dataset; images are `N×H×W×3`, labels row-major `N·H·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub manifest: DatasetManifest,
    pub images: Tensor,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub domain: Domain,
    pub seed: u64,
    pub n: usize,
    pub scene: SceneConfig,
    pub appearance: DomainParams,
    pub images_sha256: String,
    pub labels_sha256: String,
    /// SHA-256 over both encoded files, images first.
    pub content_hash: String,
    #[serde(default)]
    pub config_hash: String,
}

const IMAGES: &str = "images.ten";
const LABELS: &str = "labels.ten";

impl SceneDataset {
    /// Sample `i` uses seed `seed ^ i`.
    pub fn generate(cfg: &SceneConfig, dom: &DomainParams, domain: Domain, n: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        dom.validate()?;
        if n == 0 {
            return Err(Error::invalid("dataset size n must be >= 1"));
        }
        let samples: Vec<SceneSample> = (0..n)
            .map(|i| generate_scene(cfg, dom, domain, seed ^ i as u64))
            .collect();
        let images = Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let labels = samples.iter().flat_map(|s| s.labels.labels.iter().copied()).collect();
        let mut ds = Self {
            manifest: DatasetManifest {
                kind: "scenes".into(),
                domain,
                seed,
                n,
                scene: cfg.clone(),
                appearance: dom.clone(),
                images_sha256: String::new(),
                labels_sha256: String::new(),
                content_hash: String::new(),
                config_hash: String::new(),
            },
            images,
            labels,
        };
        ds.refresh_hashes()?;
        Ok(ds)
    }

    fn encoded(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let m = &self.manifest;
        let img = Bten::f32(&self.images).encode()?;
        let lab = Bten::u8(vec![m.n, m.scene.height, m.scene.width], self.labels.clone()).encode()?;
        Ok((img, lab))
    }

    fn refresh_hashes(&mut self) -> Result<()> {
        let (img, lab) = self.encoded()?;
        self.manifest.images_sha256 = sha256_hex(&img);
        self.manifest.labels_sha256 = sha256_hex(&lab);
        self.manifest.content_hash = sha256_hex(&[img, lab].concat());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.manifest.n
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.n == 0
    }

    pub fn height(&self) -> usize {
        self.manifest.scene.height
    }

    pub fn width(&self) -> usize {
        self.manifest.scene.width
    }

    pub fn image(&self, i: usize) -> Result<Tensor> {
        self.images.index_first(i)
    }

    pub fn label_map(&self, i: usize) -> LabelMap {
        let p = self.height() * self.width();
        LabelMap {
            height: self.height(),
            width: self.width(),
            labels: self.labels[i * p..(i + 1) * p].to_vec(),
        }
    }

    /// Stacked images and concatenated labels of the given samples.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<u8>)> {
        let imgs = idx.iter().map(|&i| self.image(i)).collect::<Result<Vec<_>>>()?;
        let labels = idx.iter().flat_map(|&i| self.label_map(i).labels).collect();
        Ok((Tensor::stack(&imgs)?, labels))
    }

    /// Fraction of pixels per class.
    pub fn class_histogram(&self) -> [f64; NUM_CLASSES] {
        let mut h = [0.0; NUM_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1.0;
        }
        let n = self.labels.len() as f64;
        h.map(|v| v / n)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (img, lab) = self.encoded()?;
        for (name, bytes) in [(IMAGES, &img), (LABELS, &lab)] {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        write_manifest(dir, &self.manifest)
    }

    /// Loads and verifies every hash recorded in the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_manifest(dir)?;
        if manifest.kind != "scenes" {
            return Err(Error::corrupt(dir.join(MANIFEST), format!("kind {:?} is not a dataset", manifest.kind)));
        }
        let img = Bten::read_verified(&dir.join(IMAGES), &manifest.images_sha256)?;
        let lab = Bten::read_verified(&dir.join(LABELS), &manifest.labels_sha256)?;
        let (h, w, n) = (manifest.scene.height, manifest.scene.width, manifest.n);
        if img.shape != [n, h, w, 3] || lab.shape != [n, h, w] {
            return Err(Error::corrupt(dir, "tensor shapes disagree with manifest"));
        }
        let labels = match lab.data {
            BtenData::U8(v) => v,
            _ => return Err(Error::corrupt(dir.join(LABELS), "labels must be u8")),
        };
        let ds = Self {
            manifest,
            images: img.to_tensor()?,
            labels,
        };
        let (ib, lb) = ds.encoded()?;
        if sha256_hex(&[ib, lb].concat()) != ds.manifest.content_hash {
            return Err(Error::corrupt(dir.join(MANIFEST), "content hash mismatch"));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_noise_free_rendering() {
        let cfg = SceneConfig::default();
        let dom = DomainParams::source();
        let a = generate_scene(&cfg, &dom, Domain::Source, 17);
        assert_eq!(a, generate_scene(&cfg, &dom, Domain::Source, 17));
        let clean = DomainParams {
            noise_std: 0.0,
            brightness: 0.0,
            ..dom
        };
        let s = generate_scene(&cfg, &clean, Domain::Source, 5);
        for (i, &l) in s.labels.labels.iter().enumerate() {
            for ch in 0..3 {
                assert_eq!(s.image.data()[i * 3 + ch], clean.colors[l as usize][ch] as f32 as f64);
            }
        }
    }

    #[test]
    fn validator_rejects_broken_maps() {
        let mut m = LabelMap::new(4, 2, vec![SKY, SKY, ROAD, ROAD, SIDEWALK, SIDEWALK, ROAD, ROAD]).unwrap();
        assert!(validate_structure(&m).is_ok());
        m.labels[4] = SKY;
        assert_eq!(validate_structure(&m), Err(Violation::SkyBelowRoad { col: 0 }));
        m.labels[4] = SIDEWALK;
        m.labels[0] = CAR;
        assert_eq!(validate_structure(&m), Err(Violation::CarOffRoad { row: 0, col: 0 }));
        m.labels[0] = PEDESTRIAN;
        assert!(matches!(validate_structure(&m), Err(Violation::PedestrianOffSidewalk { .. })));
        m.labels[0] = 9;
        assert!(matches!(validate_structure(&m), Err(Violation::LabelOutOfRange { .. })));
    }

    #[test]
    fn flow_input_closed_forms() {
        let m = LabelMap::new(1, 2, vec![0, 5]).unwrap();
        let t = labels_to_flow_input(&m, 6, 0.0, 0.0, 1).unwrap();
        assert_eq!(t, m.one_hot(6).unwrap());
        let t = labels_to_flow_input(&m, 6, 0.05, 0.0, 1).unwrap();
        assert_eq!(&t.data()[..6], &[0.95, 0.01, 0.01, 0.01, 0.01, 0.01]);
        assert!(labels_to_flow_input(&m, 6, 0.5, 0.0, 1).is_err());
        assert!(labels_to_flow_input(&m, 6, 0.1, -1.0, 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SceneConfig::default().validate().is_ok());
        let small = SceneConfig {
            height: 8,
            ..SceneConfig::default()
        };
        assert!(small.validate().is_err());
        let bad = DomainParams {
            noise_std: -1.0,
            ..DomainParams::source()
        };
        assert!(bad.validate().is_err());
        assert!(SceneDataset::generate(&SceneConfig::default(), &DomainParams::source(), Domain::Source, 0, 1).is_err());
    }
}
