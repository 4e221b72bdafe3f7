//! Seeded synthetic scenes, their long/short captions, and feature-grid "images".
//!
//! Scenes come in sibling groups: every member of a group shares the base
//! scene's attributes and differs from it in the color of one non-primary
//! attribute, so only the long caption can tell siblings apart.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vocab::{COLORS, OBJECTS, POSITIONS};
use crate::error::{ensure, Result};
use crate::numerics::Matrix;

/// Seed of the fixed visual codebook shared by every generated corpus.
const WORLD_SEED: u64 = 0x5eed_c0de_b00c;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_attributes: usize,
    pub primary_count: usize,
    /// Scenes per sibling group (1 disables siblings).
    pub group_size: usize,
    pub grid: usize,
    /// Dimension of each grid cell's feature vector.
    pub feature_dim: usize,
    /// Salience of attribute `i` is `salience_decay^i`.
    pub salience_decay: f64,
    /// Spatial spread of an attribute around its region center, in cells.
    pub spread: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_attributes: 6,
            primary_count: 2,
            group_size: 4,
            grid: 4,
            feature_dim: 24,
            salience_decay: 0.9,
            spread: 0.7,
            noise: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_attributes >= 1, "scenes need at least one attribute");
        ensure!(
            self.primary_count >= 1 && self.primary_count <= self.n_attributes,
            "primary_count {} must be in 1..={}",
            self.primary_count,
            self.n_attributes
        );
        ensure!(
            self.n_attributes <= POSITIONS.len(),
            "at most {} attributes fit the position layout",
            POSITIONS.len()
        );
        ensure!(self.group_size >= 1, "group_size must be positive");
        ensure!(self.grid >= 1 && self.feature_dim >= 1, "grid and feature_dim must be positive");
        ensure!(
            self.salience_decay > 0.0 && self.salience_decay < 1.0,
            "salience_decay must lie in (0, 1)"
        );
        ensure!(self.spread > 0.0 && self.noise >= 0.0, "spread must be positive, noise non-negative");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub object: usize,
    pub color: usize,
    pub position: usize,
    pub salience: f64,
}

impl Attribute {
    pub fn object_name(&self) -> &'static str {
        OBJECTS[self.object]
    }
    pub fn color_name(&self) -> &'static str {
        COLORS[self.color]
    }
    pub fn position_name(&self) -> &'static str {
        POSITIONS[self.position]
    }
    /// "a red car"
    pub fn noun_phrase(&self) -> String {
        format!("a {} {}", self.color_name(), self.object_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: u64,
    pub group_id: u64,
    /// Most salient first; salience strictly decreasing.
    pub attributes: Vec<Attribute>,
    pub primary_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub long_text: String,
    pub short_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: SceneSpec,
    pub captions: CaptionPair,
    /// `grid² × feature_dim`, cells row-major.
    pub image: Matrix<f32>,
}

fn join_phrases(phrases: &[String]) -> String {
    match phrases.len() {
        0 => String::new(),
        1 => phrases[0].clone(),
        n => format!("{} and {}", phrases[..n - 1].join(" , "), phrases[n - 1]),
    }
}

/// Long caption: every attribute with color and region. Short caption: the
/// primary attributes' color and object only.
pub fn render_captions(scene: &SceneSpec) -> CaptionPair {
    let long: Vec<String> = scene
        .attributes
        .iter()
        .map(|a| format!("{} located at the {}", a.noun_phrase(), a.position_name()))
        .collect();
    let short: Vec<String> = scene.attributes[..scene.primary_count]
        .iter()
        .map(Attribute::noun_phrase)
        .collect();
    CaptionPair {
        long_text: format!("the image shows {} .", join_phrases(&long)),
        short_text: format!("the image shows {} .", join_phrases(&short)),
    }
}

/// Fixed per-object and per-color feature vectors.
#[derive(Debug, Clone)]
pub struct Codebook {
    objects: Vec<Vec<f64>>,
    colors: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED ^ dim as u64);
        let scale = 1.0 / (dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    (0..dim)
                        .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z })
                        .collect::<Vec<f64>>()
                })
                .collect()
        };
        let objects = draw(OBJECTS.len());
        let colors = draw(COLORS.len());
        Self { objects, colors }
    }

    pub fn attribute_vector(&self, a: &Attribute) -> Vec<f64> {
        self.objects[a.object]
            .iter()
            .zip(&self.colors[a.color])
            .map(|(o, c)| o + c)
            .collect()
    }
}

/// Cell-grid coordinates of a named region's center.
fn region_center(position: usize, grid: usize) -> (f64, f64) {
    let step = (grid as f64 - 1.0) / 2.0;
    ((position / 3) as f64 * step, (position % 3) as f64 * step)
}

const MIN_CELL_WEIGHT: f64 = 0.1;

/// Renders the scene as a `grid² × feature_dim` grid; each attribute
/// contributes near its region, scaled by its salience.
pub fn render_image(
    scene: &SceneSpec,
    cfg: &SynthConfig,
    codebook: &Codebook,
    rng: &mut ChaCha8Rng,
) -> Matrix<f32> {
    let g = cfg.grid;
    let mut img = vec![0.0f64; g * g * cfg.feature_dim];
    for a in &scene.attributes {
        let v = codebook.attribute_vector(a);
        let (cr, cc) = region_center(a.position, g);
        for r in 0..g {
            for c in 0..g {
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                let w = (-d2 / (2.0 * cfg.spread * cfg.spread)).exp();
                if w < MIN_CELL_WEIGHT {
                    continue;
                }
                let cell = &mut img[(r * g + c) * cfg.feature_dim..(r * g + c + 1) * cfg.feature_dim];
                for (x, vi) in cell.iter_mut().zip(&v) {
                    *x += a.salience * w * vi;
                }
            }
        }
    }
    if cfg.noise > 0.0 {
        for x in img.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x += cfg.noise * z;
        }
    }
    Matrix::from_vec(g * g, cfg.feature_dim, img.into_iter().map(|x| x as f32).collect())
        .expect("grid buffer sized from config")
}

fn base_scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig, scene_id: u64, group_id: u64) -> SceneSpec {
    let mut positions: Vec<usize> = (0..POSITIONS.len()).collect();
    positions.shuffle(rng);
    let mut objects: Vec<usize> = (0..OBJECTS.len()).collect();
    objects.shuffle(rng);
    let attributes = (0..cfg.n_attributes)
        .map(|i| Attribute {
            object: objects[i],
            color: rng.random_range(0..COLORS.len()),
            position: positions[i],
            salience: cfg.salience_decay.powi(i as i32),
        })
        .collect();
    SceneSpec {
        scene_id,
        group_id,
        attributes,
        primary_count: cfg.primary_count,
    }
}

fn recolor(rng: &mut ChaCha8Rng, old: usize, avoid: &[usize]) -> usize {
    loop {
        let c = rng.random_range(0..COLORS.len());
        if c != old && !avoid.contains(&c) {
            return c;
        }
    }
}

/// Scene specs in sibling groups of `cfg.group_size`; the first member of
/// every group is the base scene, each other member recolors one distinct
/// non-primary attribute of it.
pub fn generate_scenes(seed: u64, n_scenes: usize, cfg: &SynthConfig) -> Result<Vec<SceneSpec>> {
    cfg.validate()?;
    ensure!(n_scenes >= 1, "n_scenes must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(n_scenes);
    let tail: Vec<usize> = (cfg.primary_count..cfg.n_attributes).collect();
    let mut group_id = 0u64;
    while scenes.len() < n_scenes {
        let base = base_scene(&mut rng, cfg, scenes.len() as u64, group_id);
        let mut order = tail.clone();
        order.shuffle(&mut rng);
        let mut used: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_attributes];
        scenes.push(base.clone());
        for s in 1..cfg.group_size {
            if scenes.len() == n_scenes || order.is_empty() {
                break;
            }
            let j = order[(s - 1) % order.len()];
            let mut sib = base.clone();
            sib.scene_id = scenes.len() as u64;
            let old = base.attributes[j].color;
            let new = recolor(&mut rng, old, &used[j]);
            used[j].push(new);
            sib.attributes[j].color = new;
            scenes.push(sib);
        }
        group_id += 1;
    }
    Ok(scenes)
}

/// Deterministic corpus of `(scene, captions, image)` triples under `seed`.
pub fn generate_dataset(seed: u64, n_scenes: usize, cfg: &SynthConfig) -> Result<Vec<Sample>> {
    let scenes = generate_scenes(seed, n_scenes, cfg)?;
    let codebook = Codebook::new(cfg.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    Ok(scenes
        .into_iter()
        .map(|scene| {
            let captions = render_captions(&scene);
            let image = render_image(&scene, cfg, &codebook, &mut rng);
            Sample {
                scene,
                captions,
                image,
            }
        })
        .collect())
}

/// One zero-shot class: a (color, object) pair and its name as it appears in captions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSpec {
    pub color: usize,
    pub object: usize,
}

impl ClassSpec {
    pub fn name(&self) -> String {
        format!("{} {}", COLORS[self.color], OBJECTS[self.object])
    }
}

/// Eight color/object classes with distinct objects and colors.
pub fn default_classes() -> Vec<ClassSpec> {
    (0..8).map(|i| ClassSpec { color: i, object: i }).collect()
}

/// Images whose most salient attribute is the class pair; the remaining
/// attributes are random and never use a class object.
pub fn generate_classification_set(
    seed: u64,
    per_class: usize,
    classes: &[ClassSpec],
    cfg: &SynthConfig,
) -> Result<Vec<(Matrix<f32>, usize)>> {
    cfg.validate()?;
    ensure!(!classes.is_empty(), "need at least one class");
    let codebook = Codebook::new(cfg.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_objects: Vec<usize> = classes.iter().map(|c| c.object).collect();
    let mut out = Vec::with_capacity(per_class * classes.len());
    for i in 0..per_class {
        for (label, class) in classes.iter().enumerate() {
            let mut scene = base_scene(&mut rng, cfg, (i * classes.len() + label) as u64, 0);
            let mut free: Vec<usize> = (0..OBJECTS.len())
                .filter(|o| !class_objects.contains(o))
                .collect();
            free.shuffle(&mut rng);
            for (k, a) in scene.attributes.iter_mut().enumerate() {
                a.object = free[k];
            }
            scene.attributes[0].object = class.object;
            scene.attributes[0].color = class.color;
            out.push((render_image(&scene, cfg, &codebook, &mut rng), label));
        }
    }
    Ok(out)
}
