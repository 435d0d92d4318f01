//! Reproducible synthetic scenes: RGB image, pseudo-depth, box annotations and
//! held-out instance masks.

mod annotations;

pub use annotations::{
    annotations_from_scenes, load_annotations, load_eval_masks, load_training_set,
    save_annotations, write_dataset, AnnotationRecord, AnnotationSet, CategoryRecord, EvalMasks,
    ImageRecord, ANNOTATIONS_FILE, EVAL_MASKS_FILE,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagegrid::{resize_bilinear, PixelBox, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Ellipse,
    Rectangle,
    Capsule,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Ellipse, Shape::Rectangle, Shape::Capsule];

    pub fn category_id(self) -> u32 {
        match self {
            Shape::Ellipse => 1,
            Shape::Rectangle => 2,
            Shape::Capsule => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Ellipse => "ellipse",
            Shape::Rectangle => "rectangle",
            Shape::Capsule => "capsule",
        }
    }

    pub fn from_name(name: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// How object colours relate to the background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ColorMode {
    /// Object colours differ from the background by at least this RGB distance.
    Distinct(f64),
    /// Object colours sit this RGB distance away from the local background colour.
    Camouflaged(f64),
}

/// Corruption applied to clean depth to mimic a monocular predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthNoise {
    /// Truncation radius of the Gaussian blur (sigma = radius / 2); 0 disables it.
    pub blur_radius: usize,
    /// Peak amplitude of the additive low-frequency noise field.
    pub amplitude: f64,
    /// Control-grid resolution of the noise field.
    pub grid: usize,
    /// Exponent of the monotone remap `d -> d^gamma`.
    pub gamma: f64,
}

impl DepthNoise {
    pub const NONE: DepthNoise = DepthNoise {
        blur_radius: 0,
        amplitude: 0.0,
        grid: 4,
        gamma: 1.0,
    };

    /// Largest shift the noise and remap can apply to an interior pixel.
    pub fn bound(&self) -> f64 {
        let remap = if (self.gamma - 1.0).abs() < 1e-12 {
            0.0
        } else {
            // max over d in [0,1] of |d^g - d| is attained at d* = g^(-1/(g-1))
            let d = self.gamma.powf(-1.0 / (self.gamma - 1.0));
            (d.powf(self.gamma) - d).abs()
        };
        self.amplitude + remap
    }
}

impl Default for DepthNoise {
    fn default() -> Self {
        DepthNoise {
            blur_radius: 1,
            amplitude: 0.03,
            grid: 4,
            gamma: 1.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<Shape>,
    /// Semi-axis range for sampled shapes, in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    pub allow_overlap: bool,
    pub color_mode: ColorMode,
    /// Paint object-coloured blobs on the background (colour edges without depth edges).
    pub color_distractors: bool,
    /// Uniform per-pixel colour noise amplitude.
    pub texture_noise: f64,
    pub depth_noise: DepthNoise,
    /// Depth range shared by all object bands (nearer = larger).
    pub object_depth: (f64, f64),
    /// Background depth range, far at the top of the image.
    pub background_depth: (f64, f64),
    pub max_retries: usize,
}

impl SceneConfig {
    /// Three well-separated, clearly coloured objects.
    pub fn easy() -> Self {
        SceneConfig {
            height: 96,
            width: 96,
            min_objects: 3,
            max_objects: 3,
            shapes: Shape::ALL.to_vec(),
            min_radius: 9.0,
            max_radius: 16.0,
            allow_overlap: false,
            color_mode: ColorMode::Distinct(0.45),
            color_distractors: false,
            texture_noise: 0.02,
            depth_noise: DepthNoise::default(),
            object_depth: (0.45, 0.95),
            background_depth: (0.05, 0.28),
            max_retries: 500,
        }
    }

    /// Overlapping objects whose colours blend into the background, plus colour distractors.
    pub fn hard() -> Self {
        SceneConfig {
            allow_overlap: true,
            color_mode: ColorMode::Camouflaged(0.08),
            color_distractors: true,
            texture_noise: 0.03,
            ..SceneConfig::easy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("scene size {}x{} too small", self.height, self.width));
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects".into());
        }
        if self.shapes.is_empty() && self.max_objects > 0 {
            return bad("shape palette is empty".into());
        }
        if !(self.min_radius >= 2.0 && self.min_radius <= self.max_radius) {
            return bad(format!(
                "radius range [{}, {}] invalid",
                self.min_radius, self.max_radius
            ));
        }
        let (lo, hi) = self.object_depth;
        let (blo, bhi) = self.background_depth;
        if !(0.0 <= blo && blo <= bhi && bhi < lo && lo < hi && hi <= 1.0) {
            return bad("depth ranges must satisfy 0 <= background < objects <= 1".into());
        }
        if self.depth_noise.gamma <= 0.0 || self.depth_noise.amplitude < 0.0 {
            return bad("depth noise gamma must be > 0 and amplitude >= 0".into());
        }
        Ok(())
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig::easy()
    }
}

/// One object to rasterise, in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
    pub color: [f64; 3],
    /// (far, near) depth values; near > far.
    pub depth_band: (f64, f64),
}

impl ObjectSpec {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        match self.shape {
            Shape::Ellipse => (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0,
            Shape::Rectangle => u.abs() <= self.rx && v.abs() <= self.ry,
            Shape::Capsule => {
                let (long, short, along, across) = if self.rx >= self.ry {
                    (self.rx, self.ry, u, v)
                } else {
                    (self.ry, self.rx, v, u)
                };
                let half = long - short;
                let t = along.clamp(-half, half);
                (along - t).powi(2) + across.powi(2) <= short * short
            }
        }
    }

    /// Conservative axis-aligned extent.
    fn extent(&self) -> f64 {
        self.rx.max(self.ry)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub bbox: PixelBox,
    pub category: u32,
    /// Visible-region mask; evaluation only.
    pub gt_mask: Raster,
    /// (far, near) depth band of the clean object surface.
    pub depth_band: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Raster,
    pub pseudo_depth: Raster,
    /// Sorted near first.
    pub instances: Vec<Instance>,
    pub seed: u64,
}

/// A box and its category: everything the trainer may see about an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub bbox: PixelBox,
    pub category: u32,
}

/// Trainer-visible scene. It has no mask field on purpose.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainScene {
    pub id: u64,
    pub image: Raster,
    pub pseudo_depth: Raster,
    pub annotations: Vec<BoxAnnotation>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn training_view(&self, id: u64) -> TrainScene {
        TrainScene {
            id,
            image: self.image.clone(),
            pseudo_depth: self.pseudo_depth.clone(),
            annotations: self
                .instances
                .iter()
                .map(|i| BoxAnnotation {
                    bbox: i.bbox,
                    category: i.category,
                })
                .collect(),
        }
    }
}

/// Seed of scene `index` in a dataset with the given master seed.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(0x5EED)))
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `count` scenes, each from its own RNG stream, in parallel.
pub fn generate_dataset(config: &SceneConfig, master_seed: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(config, scene_seed(master_seed, i)))
        .collect()
}

pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(config.min_objects..=config.max_objects);
    let background = random_color(&mut rng, 0.2, 0.8);
    let bands = depth_bands(config.object_depth, n);

    for _ in 0..config.max_retries.max(1) {
        let Some(objects) = sample_objects(config, &mut rng, n, background, &bands) else {
            continue;
        };
        let scene = render_scene_with(config, &objects, background, seed, &mut rng)?;
        if scene_is_valid(config, &scene, &objects) {
            return Ok(scene);
        }
    }
    Err(Error::Placement {
        seed,
        reason: format!(
            "could not place {n} objects in {}x{} after {} attempts",
            config.height, config.width, config.max_retries
        ),
    })
}

/// Rasterises explicit objects over a plain background. Useful for hand-built fixtures.
pub fn render_scene(config: &SceneConfig, objects: &[ObjectSpec], seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = random_color(&mut rng, 0.2, 0.8);
    render_scene_with(config, objects, background, seed, &mut rng)
}

/// Evenly spaced (far, near) bands, returned near first.
fn depth_bands((lo, hi): (f64, f64), n: usize) -> Vec<(f64, f64)> {
    if n == 0 {
        return Vec::new();
    }
    let slot = (hi - lo) / n as f64;
    (0..n)
        .rev()
        .map(|i| {
            let base = lo + i as f64 * slot;
            (base + 0.15 * slot, base + 0.85 * slot)
        })
        .collect()
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn object_color(
    rng: &mut ChaCha8Rng,
    mode: ColorMode,
    background: [f64; 3],
    taken: &[[f64; 3]],
) -> [f64; 3] {
    match mode {
        ColorMode::Distinct(min_dist) => {
            let mut best = random_color(rng, 0.05, 0.95);
            for _ in 0..64 {
                let c = random_color(rng, 0.05, 0.95);
                let ok = color_distance(c, background) >= min_dist
                    && taken.iter().all(|t| color_distance(c, *t) >= 0.6 * min_dist);
                if ok {
                    return c;
                }
                if color_distance(c, background) > color_distance(best, background) {
                    best = c;
                }
            }
            best
        }
        ColorMode::Camouflaged(delta) => {
            let dir: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            let mut c = background;
            for k in 0..3 {
                c[k] = (c[k] + delta * dir[k] / norm).clamp(0.0, 1.0);
            }
            c
        }
    }
}

fn sample_objects(
    config: &SceneConfig,
    rng: &mut ChaCha8Rng,
    n: usize,
    background: [f64; 3],
    bands: &[(f64, f64)],
) -> Option<Vec<ObjectSpec>> {
    let (h, w) = (config.height as f64, config.width as f64);
    let margin = 2.0;
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for band in bands.iter().take(n) {
        let shape = config.shapes[rng.gen_range(0..config.shapes.len())];
        let rx = rng.gen_range(config.min_radius..=config.max_radius);
        let ry = rng.gen_range(config.min_radius..=config.max_radius);
        let angle = match shape {
            Shape::Rectangle => rng.gen_range(-0.4..0.4),
            _ => rng.gen_range(0.0..std::f64::consts::PI),
        };
        let ext = rx.max(ry);
        if 2.0 * (ext + margin) >= h.min(w) {
            return None;
        }
        let mut placed = None;
        for _ in 0..50 {
            let (cx, cy) = if config.allow_overlap && !objects.is_empty() && rng.gen_bool(0.7) {
                // Push towards an existing object so occlusions actually happen.
                let other = &objects[rng.gen_range(0..objects.len())];
                let reach = 0.9 * (other.extent() + ext);
                (
                    other.cx + rng.gen_range(-reach..reach),
                    other.cy + rng.gen_range(-reach..reach),
                )
            } else {
                (
                    rng.gen_range(ext + margin..w - ext - margin),
                    rng.gen_range(ext + margin..h - ext - margin),
                )
            };
            if cx - ext < margin || cy - ext < margin || cx + ext > w - margin - 1.0 || cy + ext > h - margin - 1.0 {
                continue;
            }
            let clear = config.allow_overlap
                || objects.iter().all(|o| {
                    let gap = o.extent() + ext + 4.0;
                    (o.cx - cx).abs() > gap || (o.cy - cy).abs() > gap
                });
            if clear {
                placed = Some((cx, cy));
                break;
            }
        }
        let (cx, cy) = placed?;
        let color = object_color(rng, config.color_mode, background, &colors);
        colors.push(color);
        objects.push(ObjectSpec {
            shape,
            cx,
            cy,
            rx,
            ry,
            angle,
            color,
            depth_band: *band,
        });
    }
    Some(objects)
}

fn render_scene_with(
    config: &SceneConfig,
    objects: &[ObjectSpec],
    background: [f64; 3],
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Scene> {
    let (h, w) = (config.height, config.width);
    let (bg_far, bg_near) = config.background_depth;
    let mut depth = Raster::from_fn(h, w, |y, x| {
        let t = y as f64 / (h - 1) as f64;
        let tilt = 0.02 * (x as f64 / (w - 1) as f64 - 0.5);
        (bg_far + (bg_near - bg_far) * t + tilt).clamp(0.0, 1.0)
    });
    let mut image = Raster::zeros(h, w, 3);
    for y in 0..h {
        let shade = 0.92 + 0.08 * y as f64 / (h - 1) as f64;
        for x in 0..w {
            for c in 0..3 {
                image.set(y, x, c, (background[c] * shade).clamp(0.0, 1.0));
            }
        }
    }

    if config.color_distractors {
        let count = rng.gen_range(2..=4);
        for _ in 0..count {
            let blob = ObjectSpec {
                shape: Shape::Ellipse,
                cx: rng.gen_range(0.0..w as f64),
                cy: rng.gen_range(0.0..h as f64),
                rx: rng.gen_range(config.min_radius * 0.5..=config.max_radius),
                ry: rng.gen_range(config.min_radius * 0.5..=config.max_radius),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                color: object_color(rng, ColorMode::Distinct(0.35), background, &[]),
                depth_band: (0.0, 0.0),
            };
            paint(&mut image, &blob);
        }
    }

    // Far to near, so nearer objects overwrite farther ones.
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[a].depth_band.1.total_cmp(&objects[b].depth_band.1));
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    let mut full_area = vec![0usize; objects.len()];
    for &k in &order {
        let obj = &objects[k];
        let (top, bottom) = (obj.cy - obj.extent(), obj.cy + obj.extent());
        for y in 0..h {
            for x in 0..w {
                if !obj.contains(x as f64, y as f64) {
                    continue;
                }
                full_area[k] += 1;
                owner[y * w + x] = Some(k);
                let t = ((y as f64 - top) / (bottom - top)).clamp(0.0, 1.0);
                let (far, near) = obj.depth_band;
                depth.set(y, x, 0, far + (near - far) * t);
                let shade = 0.9 + 0.1 * t;
                for c in 0..3 {
                    image.set(y, x, c, (obj.color[c] * shade).clamp(0.0, 1.0));
                }
            }
        }
    }

    if config.texture_noise > 0.0 {
        let a = config.texture_noise;
        for v in image.data_mut() {
            *v = (*v + rng.gen_range(-a..=a)).clamp(0.0, 1.0);
        }
    }

    // 8-bit quantisation, so PNG storage round-trips exactly.
    for v in image.data_mut() {
        *v = (*v * 255.0).round() / 255.0;
    }

    let mut instances: Vec<Instance> = objects
        .iter()
        .enumerate()
        .map(|(k, obj)| {
            let gt_mask = Raster::from_fn(h, w, |y, x| {
                if owner[y * w + x] == Some(k) {
                    1.0
                } else {
                    0.0
                }
            });
            Instance {
                bbox: PixelBox::from_mask(&gt_mask, 0.5),
                category: obj.shape.category_id(),
                gt_mask,
                depth_band: obj.depth_band,
            }
        })
        .collect();
    instances.sort_by(|a, b| b.depth_band.1.total_cmp(&a.depth_band.1));

    let pseudo_depth = corrupt_depth(&depth, &config.depth_noise, splitmix64(seed ^ 0xD3F7));
    Ok(Scene {
        image,
        pseudo_depth,
        instances,
        seed,
    })
}

fn paint(image: &mut Raster, obj: &ObjectSpec) {
    for y in 0..image.height() {
        for x in 0..image.width() {
            if obj.contains(x as f64, y as f64) {
                for c in 0..3 {
                    image.set(y, x, c, obj.color[c]);
                }
            }
        }
    }
}

fn scene_is_valid(config: &SceneConfig, scene: &Scene, objects: &[ObjectSpec]) -> bool {
    scene.instances.iter().all(|inst| {
        let visible = inst.gt_mask.data().iter().filter(|&&v| v > 0.5).count();
        let obj = objects
            .iter()
            .find(|o| o.depth_band == inst.depth_band)
            .expect("instance comes from an object");
        let full = (0..config.height)
            .flat_map(|y| (0..config.width).map(move |x| (x, y)))
            .filter(|&(x, y)| obj.contains(x as f64, y as f64))
            .count();
        !inst.bbox.is_empty() && visible >= 40 && 2 * visible >= full
    })
}

/// Blur, low-frequency noise and a monotone remap; output stays in [0,1].
pub fn corrupt_depth(depth: &Raster, noise: &DepthNoise, seed: u64) -> Raster {
    let mut out = if noise.blur_radius > 0 {
        gaussian_blur(depth, noise.blur_radius)
    } else {
        depth.clone()
    };

    if noise.amplitude > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = noise.grid.max(2);
        let coarse = Raster::from_fn(g, g, |_, _| rng.gen_range(-noise.amplitude..=noise.amplitude));
        let field = resize_bilinear(&coarse, depth.height(), depth.width())
            .expect("non-empty rasters");
        for (v, n) in out.data_mut().iter_mut().zip(field.data()) {
            *v += n;
        }
    }

    let (lo, hi) = out.min_max();
    if lo < 0.0 || hi > 1.0 {
        let span = (hi - lo).max(1e-12);
        let (tlo, thi) = (lo.max(0.0), hi.min(1.0));
        for v in out.data_mut() {
            *v = tlo + (*v - lo) / span * (thi - tlo);
        }
    }

    if noise.gamma != 1.0 {
        for v in out.data_mut() {
            *v = v.clamp(0.0, 1.0).powf(noise.gamma);
        }
    }
    out
}

/// Separable Gaussian blur with sigma = radius / 2, truncated at `radius`, edge-replicated.
pub fn gaussian_blur(src: &Raster, radius: usize) -> Raster {
    let sigma = radius as f64 / 2.0;
    let r = radius as isize;
    let mut kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);

    let (h, w, c) = (src.height(), src.width(), src.channels());
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Raster::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let acc = (-r..=r)
                    .zip(&kernel)
                    .map(|(i, k)| k * src.get(y, clamp(x as isize + i, w), ch))
                    .sum();
                tmp.set(y, x, ch, acc);
            }
        }
    }
    let mut out = Raster::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let acc = (-r..=r)
                    .zip(&kernel)
                    .map(|(i, k)| k * tmp.get(clamp(y as isize + i, h), x, ch))
                    .sum();
                out.set(y, x, ch, acc);
            }
        }
    }
    out
}
