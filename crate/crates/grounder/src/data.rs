//! Deterministic synthetic referring-expression data: shape scenes, templated
//! expressions, a fixed vocabulary, raster rendering and dataset export.
//!
//! Every sample is a pure function of its seed. Rendering uses integer-grid
//! coverage tests with no anti-aliasing so image bytes are identical across
//! platforms.

use crate::boxes::{iou, BoundingBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("generation exhausted after {0} attempts")]
    GenerationExhausted(usize),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad image file: {0}")]
    BadImageFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
    pub fn word(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
    pub fn word(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
    pub fn rgb(&self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];
    pub fn word(&self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Left,
    Right,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Left, Relation::Right, Relation::Above, Relation::Below];
    pub fn word(&self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }
    fn holds(&self, a: &SceneObject, b: &SceneObject) -> bool {
        match self {
            Relation::Left => a.center.0 < b.center.0,
            Relation::Right => a.center.0 > b.center.0,
            Relation::Above => a.center.1 < b.center.1,
            Relation::Below => a.center.1 > b.center.1,
        }
    }
}

/// Fixed ordered word list; ids are stable across runs.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<&'static str>,
}

impl Vocab {
    pub fn standard() -> Vocab {
        let mut words = vec!["<pad>", "<unk>", "the", "of"];
        words.extend(Shape::ALL.iter().map(|s| s.word()));
        words.extend(Color::ALL.iter().map(|c| c.word()));
        words.extend(Size::ALL.iter().map(|s| s.word()));
        words.extend(Relation::ALL.iter().map(|r| r.word()));
        Vocab { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.words
            .iter()
            .position(|w| *w == word)
            .map(|i| i as u32)
            .unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> &'static str {
        self.words.get(id as usize).copied().unwrap_or("<unk>")
    }
}

/// In-vocab words map to ids, OOV to UNK, right-padded/truncated to `len`.
pub fn tokenize_expression(words: &[String], vocab: &Vocab, len: usize) -> Vec<u32> {
    assert!(len >= 1);
    let mut ids: Vec<u32> = words.iter().take(len).map(|w| vocab.id(w)).collect();
    ids.resize(len, PAD_ID);
    ids
}

pub fn detokenize(ids: &[u32], vocab: &Vocab) -> Vec<String> {
    ids.iter()
        .take_while(|&&id| id != PAD_ID)
        .map(|&id| vocab.word(id).to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Pixel center (x, y).
    pub center: (f64, f64),
    /// Pixel extent (w, h).
    pub extent: (f64, f64),
}

impl SceneObject {
    pub fn pixel_box(&self) -> BoundingBox {
        BoundingBox {
            cx: self.center.0,
            cy: self.center.1,
            w: self.extent.0,
            h: self.extent.1,
        }
    }

    pub fn normalized_box(&self, canvas: usize) -> BoundingBox {
        let c = canvas as f64;
        BoundingBox {
            cx: self.center.0 / c,
            cy: self.center.1 / c,
            w: self.extent.0 / c,
            h: self.extent.1 / c,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub canvas_size: usize,
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub canvas_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability of forcing a same-shape distractor into the scene.
    pub ambiguity_bias: f64,
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            canvas_size: 64,
            min_objects: 2,
            max_objects: 4,
            ambiguity_bias: 0.5,
            max_attempts: 200,
        }
    }
}

impl GenConfig {
    pub fn check(&self) -> Result<(), DataError> {
        if self.canvas_size < 32 {
            return Err(DataError::InvalidConfig("canvas_size must be >= 32".into()));
        }
        if self.min_objects < 1 || self.max_objects < self.min_objects || self.max_objects > 4 {
            return Err(DataError::InvalidConfig(
                "object count bounds must satisfy 1 <= min <= max <= 4".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub seed: u64,
    /// Row-major [S x S x 3], values in [0, 1].
    pub image: Vec<f64>,
    pub expression: Vec<String>,
    pub word_ids: Vec<u32>,
    pub gt_box: BoundingBox,
    pub ambiguous: bool,
    // extras for oracle baselines; not part of the export schema
    pub object_boxes: Vec<BoundingBox>,
    pub target_index: usize,
}

fn object_px(size: Size, canvas: usize) -> f64 {
    // sized so even small objects span several patches
    match size {
        Size::Small => (canvas as f64 * 0.28).round(),
        Size::Large => (canvas as f64 * 0.42).round(),
    }
}

fn sample_scene(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Option<Scene> {
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let force_ambiguous = rng.gen_bool(cfg.ambiguity_bias);
    let canvas = cfg.canvas_size as f64;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for idx in 0..n {
        let mut placed = false;
        for _ in 0..40 {
            let shape = if force_ambiguous && idx == 1 {
                objects[0].shape
            } else {
                Shape::ALL[rng.gen_range(0..Shape::ALL.len())]
            };
            let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
            let size = Size::ALL[rng.gen_range(0..Size::ALL.len())];
            let px = object_px(size, cfg.canvas_size);
            let half = px / 2.0;
            let lo = half.ceil() as i64;
            let hi = canvas as i64 - half.ceil() as i64;
            if hi <= lo {
                continue;
            }
            let cx = rng.gen_range(lo..hi) as f64;
            let cy = rng.gen_range(lo..hi) as f64;
            let cand = SceneObject { shape, color, size, center: (cx, cy), extent: (px, px) };
            let overlaps = objects.iter().any(|o| {
                iou(&o.pixel_box(), &cand.pixel_box()).map(|v| v >= 0.1).unwrap_or(true)
            });
            if !overlaps {
                objects.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(Scene { objects, canvas_size: cfg.canvas_size })
}

#[derive(Debug, Clone)]
enum Predicate {
    Attr { shape: Shape, color: Color, size: Option<Size> },
    Rel { shape: Shape, relation: Relation, ref_color: Color, ref_shape: Shape },
}

impl Predicate {
    fn matches(&self, scene: &Scene, idx: usize) -> bool {
        let o = &scene.objects[idx];
        match self {
            Predicate::Attr { shape, color, size } => {
                o.shape == *shape
                    && o.color == *color
                    && size.map(|s| o.size == s).unwrap_or(true)
            }
            Predicate::Rel { shape, relation, ref_color, ref_shape } => {
                o.shape == *shape
                    && scene.objects.iter().enumerate().any(|(j, r)| {
                        j != idx
                            && r.color == *ref_color
                            && r.shape == *ref_shape
                            && relation.holds(o, r)
                    })
            }
        }
    }

    fn words(&self) -> Vec<String> {
        match self {
            Predicate::Attr { shape, color, size } => {
                let mut w = vec!["the".to_string()];
                if let Some(s) = size {
                    w.push(s.word().to_string());
                }
                w.push(color.word().to_string());
                w.push(shape.word().to_string());
                w
            }
            Predicate::Rel { shape, relation, ref_color, ref_shape } => vec![
                "the".into(),
                shape.word().into(),
                relation.word().into(),
                "of".into(),
                "the".into(),
                ref_color.word().into(),
                ref_shape.word().into(),
            ],
        }
    }
}

/// Exhaustive uniqueness check: the predicate must match exactly the target.
fn uniquely_refers(pred: &Predicate, scene: &Scene, target: usize) -> bool {
    let matches: Vec<usize> = (0..scene.objects.len())
        .filter(|&i| pred.matches(scene, i))
        .collect();
    matches == [target]
}

fn candidate_predicates(
    scene: &Scene,
    target: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Predicate> {
    let t = &scene.objects[target];
    let mut cands = vec![
        Predicate::Attr { shape: t.shape, color: t.color, size: None },
        Predicate::Attr { shape: t.shape, color: t.color, size: Some(t.size) },
    ];
    for rel in Relation::ALL {
        for (j, r) in scene.objects.iter().enumerate() {
            if j != target && rel.holds(t, r) {
                cands.push(Predicate::Rel {
                    shape: t.shape,
                    relation: rel,
                    ref_color: r.color,
                    ref_shape: r.shape,
                });
            }
        }
    }
    // deterministic shuffle so expression style varies across samples
    for i in (1..cands.len()).rev() {
        let j = rng.gen_range(0..=i);
        cands.swap(i, j);
    }
    cands
}

/// Deterministic sample generation: same seed, identical bytes.
pub fn generate_sample(
    seed: u64,
    cfg: &GenConfig,
    vocab: &Vocab,
    max_text_len: usize,
) -> Result<Sample, DataError> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts {
        let Some(scene) = sample_scene(&mut rng, cfg) else { continue };
        let target = rng.gen_range(0..scene.objects.len());
        let cands = candidate_predicates(&scene, target, &mut rng);
        let Some(pred) = cands.iter().find(|p| uniquely_refers(p, &scene, target)) else {
            continue;
        };
        let expression = pred.words();
        if expression.len() > max_text_len {
            continue;
        }
        let word_ids = tokenize_expression(&expression, vocab, max_text_len);
        let t = &scene.objects[target];
        let ambiguous = scene
            .objects
            .iter()
            .enumerate()
            .any(|(j, o)| j != target && o.shape == t.shape);
        let image = render_scene(&scene, cfg.canvas_size);
        return Ok(Sample {
            seed,
            image,
            expression,
            word_ids,
            gt_box: t.normalized_box(cfg.canvas_size),
            ambiguous,
            object_boxes: scene
                .objects
                .iter()
                .map(|o| o.normalized_box(cfg.canvas_size))
                .collect(),
            target_index: target,
        });
    }
    Err(DataError::GenerationExhausted(cfg.max_attempts))
}

/// Rasterize filled shapes over a coordinate-ramp background (red channel
/// 0.5, green rising left to right, blue rising top to bottom). The ramp acts
/// as a high-amplitude positional code in pixel space, so shapes punch
/// position-revealing holes into it. Coverage is decided at pixel centers; no
/// anti-aliasing.
pub fn render_scene(scene: &Scene, size: usize) -> Vec<f64> {
    let mut image = vec![0.0; size * size * 3];
    let denom = (size - 1).max(1) as f64;
    for y in 0..size {
        for x in 0..size {
            let base = (y * size + x) * 3;
            image[base] = 0.5;
            image[base + 1] = x as f64 / denom;
            image[base + 2] = y as f64 / denom;
        }
    }
    for o in &scene.objects {
        let rgb = o.color.rgb();
        let (cx, cy) = o.center;
        let (w, h) = o.extent;
        let x0 = ((cx - w / 2.0).floor().max(0.0)) as usize;
        let x1 = ((cx + w / 2.0).ceil().min(size as f64)) as usize;
        let y0 = ((cy - h / 2.0).floor().max(0.0)) as usize;
        let y1 = ((cy + h / 2.0).ceil().min(size as f64)) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                let inside = match o.shape {
                    Shape::Square => {
                        (px - cx).abs() <= w / 2.0 && (py - cy).abs() <= h / 2.0
                    }
                    Shape::Circle => {
                        let r = w / 2.0;
                        (px - cx).powi(2) + (py - cy).powi(2) <= r * r
                    }
                    Shape::Triangle => {
                        // upward triangle: apex at top-center of the box
                        let top = cy - h / 2.0;
                        let dy = py - top;
                        dy >= 0.0 && dy <= h && (px - cx).abs() <= dy / h * (w / 2.0)
                    }
                };
                if inside {
                    let base = (y * size + x) * 3;
                    image[base..base + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    image
}

#[derive(Debug)]
pub struct Split {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

/// Disjoint seed ranges for the two splits, derived from one base seed.
pub fn make_split(
    cfg: &GenConfig,
    n_train: usize,
    n_eval: usize,
    seed: u64,
    vocab: &Vocab,
    max_text_len: usize,
) -> Result<Split, DataError> {
    if n_train == 0 || n_eval == 0 {
        return Err(DataError::InvalidConfig("n_train and n_eval must be >= 1".into()));
    }
    let base = seed << 32;
    let gen = |idx: u64| generate_sample(base + idx, cfg, vocab, max_text_len);
    let train = (0..n_train as u64).map(gen).collect::<Result<Vec<_>, _>>()?;
    let eval = (n_train as u64..(n_train + n_eval) as u64)
        .map(gen)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Split { train, eval })
}

/// Manifest line schema for dataset export.
#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    pub expression: Vec<String>,
    pub word_ids: Vec<u32>,
    pub gt_box: BoundingBox,
    pub ambiguous: bool,
    pub image_file: String,
}

/// Write `manifest.jsonl` plus one raw image file per sample: header of three
/// little-endian u32 (width, height, channels), then row-major f32 pixels.
pub fn export_dataset(dir: &Path, samples: &[Sample], canvas: usize) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = std::fs::File::create(dir.join("manifest.jsonl"))?;
    for (i, s) in samples.iter().enumerate() {
        let image_file = format!("sample_{i:06}.bin");
        write_image(&dir.join(&image_file), &s.image, canvas, canvas, 3)?;
        let entry = ManifestEntry {
            seed: s.seed,
            expression: s.expression.clone(),
            word_ids: s.word_ids.clone(),
            gt_box: s.gt_box,
            ambiguous: s.ambiguous,
            image_file,
        };
        writeln!(manifest, "{}", serde_json::to_string(&entry).expect("serialize"))?;
    }
    Ok(())
}

pub fn write_image(
    path: &Path,
    data: &[f64],
    width: usize,
    height: usize,
    channels: usize,
) -> Result<(), DataError> {
    debug_assert_eq!(data.len(), width * height * channels);
    let mut buf = Vec::with_capacity(12 + data.len() * 4);
    for v in [width as u32, height as u32, channels as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<(Vec<f64>, usize, usize, usize), DataError> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header)?;
    let width = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() != width * height * channels * 4 {
        return Err(DataError::BadImageFile(format!(
            "expected {} pixel bytes, found {}",
            width * height * channels * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((data, width, height, channels))
}
