//! Deterministic synthetic road-scene corpora with exact masks.
//!
//! Every image is a stack of horizontal bands: a background band on top and
//! one or more road-class bands below. Pixels take their class colour, plus
//! the scenario tint, plus Gaussian noise. Scenarios are drawn from a fixed
//! mixture, so the corpus can be made as imbalanced as needed.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::manifest::{
    default_class_names, DatasetManifest, ImageRecord, RoadType, ScenarioTag, Split, TimeOfDay, Weather,
};
use crate::raster::{Mask, Raster};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPalette {
    pub class: u8,
    pub mean: [f32; 3],
    pub sigma: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub tag: ScenarioTag,
    pub weight: f64,
    /// Additive RGB shift applied to every pixel.
    pub tint: [f32; 3],
    /// Candidate band sequences below the background band, top to bottom.
    pub layouts: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub class_names: Vec<String>,
    pub palette: Vec<ClassPalette>,
    pub background_class: u8,
    /// Share of rows given to the background band (0 disables it).
    pub sky_fraction: f64,
    /// Maximum random shift, in rows, of each band boundary.
    pub jitter: usize,
    pub scenarios: Vec<ScenarioSpec>,
    pub corpus_size: usize,
    pub labeled_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

/// In-memory corpus: manifest plus images and exact masks in record order.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub manifest: DatasetManifest,
    pub images: Vec<Raster>,
    pub masks: Vec<Mask>,
}

const fn tag(weather: Weather) -> ScenarioTag {
    ScenarioTag {
        weather,
        time: TimeOfDay::Day,
        road_type: RoadType::Rural,
    }
}

impl SynthSpec {
    /// Four weather scenarios with mixture 0.8 / 0.1 / 0.05 / 0.05. Each
    /// scenario has its own tint and its own scenario-specific road class,
    /// with four band layouts per scenario. Six classes are active.
    pub fn imbalanced(corpus_size: usize, seed: u64) -> Self {
        // indices into the default class list
        const BG: u8 = 0;
        const ASPHALT: u8 = 1;
        const GRAVEL: u8 = 3;
        const BOGGY: u8 = 4;
        const WET: u8 = 7;
        const EARTHEN: u8 = 10;
        let palette = vec![
            ClassPalette { class: BG, mean: [120.0, 170.0, 230.0], sigma: 6.0 },
            ClassPalette { class: ASPHALT, mean: [90.0, 90.0, 95.0], sigma: 9.0 },
            ClassPalette { class: EARTHEN, mean: [170.0, 110.0, 60.0], sigma: 9.0 },
            ClassPalette { class: WET, mean: [40.0, 60.0, 140.0], sigma: 9.0 },
            ClassPalette { class: GRAVEL, mean: [200.0, 200.0, 185.0], sigma: 9.0 },
            ClassPalette { class: BOGGY, mean: [60.0, 115.0, 40.0], sigma: 9.0 },
        ];
        let layouts = |special: u8| vec![vec![ASPHALT, special], vec![special, ASPHALT], vec![special], vec![ASPHALT, special, ASPHALT]];
        let scenarios = vec![
            ScenarioSpec { tag: tag(Weather::Sunny), weight: 0.8, tint: [6.0, 6.0, 0.0], layouts: vec![vec![ASPHALT], vec![EARTHEN], vec![ASPHALT, EARTHEN], vec![EARTHEN, ASPHALT]] },
            ScenarioSpec { tag: tag(Weather::Rainy), weight: 0.1, tint: [-12.0, -10.0, 0.0], layouts: layouts(WET) },
            ScenarioSpec { tag: tag(Weather::Foggy), weight: 0.05, tint: [12.0, 12.0, 14.0], layouts: layouts(GRAVEL) },
            ScenarioSpec { tag: tag(Weather::Snowy), weight: 0.05, tint: [20.0, 20.0, 25.0], layouts: layouts(BOGGY) },
        ];
        SynthSpec {
            height: 16,
            width: 16,
            class_names: default_class_names(),
            palette,
            background_class: BG,
            sky_fraction: 0.35,
            jitter: 1,
            scenarios,
            corpus_size,
            labeled_fraction: 0.14,
            val_fraction: 0.0,
            test_fraction: 0.0,
            seed,
        }
    }

    /// The `imbalanced` preset at benchmark scale: 16000 images split
    /// 10% labeled, 2% validation, 3% test, the rest unlabeled.
    pub fn benchmark(seed: u64) -> Self {
        SynthSpec {
            labeled_fraction: 0.1,
            val_fraction: 0.02,
            test_fraction: 0.03,
            ..Self::imbalanced(16000, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if self.scenarios.is_empty() {
            return Err(Error::invalid("scenario mixture is empty"));
        }
        let total: f64 = self.scenarios.iter().map(|s| s.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.scenarios.iter().any(|s| s.weight.is_nan() || s.weight < 0.0) {
            return Err(Error::invalid(format!("scenario mixture sums to {total}, expected 1")));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction < 1.0) {
            return Err(Error::invalid("labeled fraction must lie in (0, 1)"));
        }
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0)
            || self.labeled_fraction + self.val_fraction + self.test_fraction > 1.0 + 1e-12
        {
            return Err(Error::invalid("split fractions must be non-negative and sum to at most 1"));
        }
        if !(0.0..1.0).contains(&self.sky_fraction) {
            return Err(Error::invalid("sky fraction must lie in [0, 1)"));
        }
        let classes = self.class_names.len();
        for p in &self.palette {
            if p.sigma.is_nan() || p.sigma < 0.0 {
                return Err(Error::invalid(format!("class {} has negative sigma", p.class)));
            }
            if p.class as usize >= classes {
                return Err(Error::invalid(format!("palette class {} out of range", p.class)));
            }
        }
        let has = |c: u8| self.palette.iter().any(|p| p.class == c);
        if self.sky_fraction > 0.0 && !has(self.background_class) {
            return Err(Error::invalid("background class has no palette entry"));
        }
        for s in &self.scenarios {
            if s.layouts.is_empty() || s.layouts.iter().any(|l| l.is_empty()) {
                return Err(Error::invalid(format!("scenario {:?} needs non-empty layouts", s.tag)));
            }
            if let Some(c) = s.layouts.iter().flatten().find(|&&c| !has(c)) {
                return Err(Error::invalid(format!("layout class {c} has no palette entry")));
            }
        }
        Ok(())
    }

    fn palette_of(&self, class: u8) -> &ClassPalette {
        self.palette.iter().find(|p| p.class == class).expect("validated palette")
    }

    /// Band layout of one image as a per-row class list.
    fn row_classes(&self, layout: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
        let h = self.height;
        let mut jitter = |base: usize, lo: usize, hi: usize| -> usize {
            let j = self.jitter as i64;
            let shift = if j > 0 { rng.random_range(-j..=j) } else { 0 };
            (base as i64 + shift).clamp(lo as i64, hi as i64) as usize
        };
        let sky = if self.sky_fraction > 0.0 {
            let base = (h as f64 * self.sky_fraction).round() as usize;
            jitter(base, 1, h.saturating_sub(layout.len()).max(1))
        } else {
            0
        };
        let road = h - sky;
        let mut bounds = vec![sky];
        for b in 1..layout.len() {
            let base = sky + (b * road) / layout.len();
            let lo = bounds[b - 1];
            bounds.push(jitter(base, lo, h));
        }
        bounds.push(h);
        let mut rows = vec![self.background_class; sky];
        for (band, &class) in layout.iter().enumerate() {
            rows.extend(std::iter::repeat_n(class, bounds[band + 1] - bounds[band]));
        }
        rows
    }

    fn render(&self, scenario: &ScenarioSpec, rng: &mut ChaCha8Rng) -> (Raster, Mask) {
        let layout = &scenario.layouts[rng.random_range(0..scenario.layouts.len())];
        let rows = self.row_classes(layout, rng);
        let mut img = Raster::filled(self.height, self.width, [0, 0, 0]);
        let mut mask = Vec::with_capacity(self.height * self.width);
        for (r, &class) in rows.iter().enumerate() {
            let p = self.palette_of(class);
            for c in 0..self.width {
                let mut px = [0u8; 3];
                for (ch, out) in px.iter_mut().enumerate() {
                    let noise = if p.sigma > 0.0 {
                        Normal::new(0.0, p.sigma as f64).unwrap().sample(rng)
                    } else {
                        0.0
                    };
                    let v = p.mean[ch] as f64 + scenario.tint[ch] as f64 + noise;
                    *out = v.round().clamp(0.0, 255.0) as u8;
                }
                img.set_pixel(r, c, px);
                mask.push(class);
            }
        }
        (img, Mask::new(self.height, self.width, mask).expect("mask shape"))
    }
}

fn image_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 over (seed, index)
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate(spec: &SynthSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let n = spec.corpus_size;
    let weights = WeightedIndex::new(spec.scenarios.iter().map(|s| s.weight))
        .map_err(|e| Error::invalid(format!("scenario weights: {e}")))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_labeled = (spec.labeled_fraction * n as f64).round() as usize;
    let n_val = (spec.val_fraction * n as f64).round() as usize;
    let n_test = ((spec.test_fraction * n as f64).round() as usize).min(n - n_labeled - n_val);
    let mut splits = vec![Split::Unlabeled; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_labeled {
            Split::LabeledTrain
        } else if rank < n_labeled + n_val {
            Split::Val
        } else if rank < n_labeled + n_val + n_test {
            Split::Test
        } else {
            Split::Unlabeled
        };
    }

    let width = n.saturating_sub(1).to_string().len().max(5);
    let mut records = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for (i, &split) in splits.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(spec.seed, i as u64));
        let scenario = &spec.scenarios[weights.sample(&mut rng)];
        let (img, mask) = spec.render(scenario, &mut rng);
        let id = format!("img{i:0width$}");
        records.push(ImageRecord {
            image_path: format!("images/{id}.ppm").into(),
            label_path: split.requires_label().then(|| format!("masks/{id}.pgm").into()),
            scenario: scenario.tag,
            split,
            id,
        });
        images.push(img);
        masks.push(mask);
    }
    Ok(GeneratedCorpus {
        manifest: DatasetManifest::new(spec.class_names.clone(), records)?,
        images,
        masks,
    })
}

impl GeneratedCorpus {
    /// Writes `manifest.jsonl`, `images/*.ppm` and `masks/*.pgm` (masks for
    /// every record; only labeled splits reference theirs).
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        for ((r, img), mask) in self.manifest.records().iter().zip(&self.images).zip(&self.masks) {
            img.write_ppm(&dir.join(&r.image_path))?;
            mask.write_pgm(&dir.join("masks").join(format!("{}.pgm", r.id)))?;
        }
        self.manifest.save(&dir.join("manifest.jsonl"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::ScenarioAxis;

    fn single_class(sigma: f32) -> SynthSpec {
        SynthSpec {
            height: 6,
            width: 5,
            class_names: default_class_names(),
            palette: vec![ClassPalette { class: 1, mean: [80.0, 90.0, 100.0], sigma }],
            background_class: 0,
            sky_fraction: 0.0,
            jitter: 0,
            scenarios: vec![ScenarioSpec {
                tag: tag(Weather::Sunny),
                weight: 1.0,
                tint: [0.0; 3],
                layouts: vec![vec![1]],
            }],
            corpus_size: 4,
            labeled_fraction: 0.5,
            val_fraction: 0.0,
            test_fraction: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn noiseless_single_class_is_constant() {
        let c = generate(&single_class(0.0)).unwrap();
        for (img, mask) in c.images.iter().zip(&c.masks) {
            assert_eq!(*img, Raster::filled(6, 5, [80, 90, 100]));
            assert_eq!(*mask, Mask::filled(6, 5, 1));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec::imbalanced(50, 8);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.manifest.to_text(), b.manifest.to_text());
        let c = generate(&SynthSpec { seed: 9, ..spec }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn labeled_fraction_count() {
        let c = generate(&SynthSpec::imbalanced(1000, 1)).unwrap();
        let counts = c.manifest.split_counts();
        assert_eq!(counts[&Split::LabeledTrain], 140);
        assert_eq!(counts[&Split::Unlabeled], 860);
    }

    #[test]
    fn mixture_counts_within_three_sigma() {
        let spec = SynthSpec::imbalanced(1000, 21);
        let c = generate(&spec).unwrap();
        for s in &spec.scenarios {
            let count = c
                .manifest
                .records()
                .iter()
                .filter(|r| r.scenario.value(ScenarioAxis::Weather) == s.tag.weather.as_str())
                .count() as f64;
            let mean = 1000.0 * s.weight;
            let sd = (1000.0 * s.weight * (1.0 - s.weight)).sqrt();
            assert!((count - mean).abs() <= 3.0 * sd, "{:?}: {count} vs {mean}", s.tag.weather);
        }
    }

    #[test]
    fn noiseless_colour_identifies_class() {
        let mut spec = SynthSpec::imbalanced(40, 2);
        spec.palette.iter_mut().for_each(|p| p.sigma = 0.0);
        spec.scenarios.iter_mut().for_each(|s| s.tint = [0.0; 3]);
        let c = generate(&spec).unwrap();
        let mut colour_to_class = std::collections::HashMap::new();
        for (img, mask) in c.images.iter().zip(&c.masks) {
            for r in 0..img.height() {
                for col in 0..img.width() {
                    let prev = colour_to_class.insert(img.pixel(r, col), mask.get(r, col));
                    assert!(prev.is_none_or(|p| p == mask.get(r, col)));
                }
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = single_class(1.0);
        s.scenarios[0].weight = 0.9;
        assert!(generate(&s).is_err());
        let mut s = single_class(-1.0);
        assert!(generate(&s).is_err());
        s = single_class(1.0);
        s.labeled_fraction = 1.0;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn background_on_top() {
        let c = generate(&SynthSpec::imbalanced(20, 5)).unwrap();
        for m in &c.masks {
            assert_eq!(m.get(0, 0), 0);
            assert_ne!(m.get(m.height() - 1, 0), 0);
        }
    }

    #[test]
    fn written_corpus_reloads() {
        let c = generate(&SynthSpec::imbalanced(6, 5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write_to(dir.path()).unwrap();
        let m = DatasetManifest::load(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m, c.manifest);
        let first = &m.records()[0];
        assert_eq!(Raster::read_ppm(&dir.path().join(&first.image_path)).unwrap(), c.images[0]);
    }
}
