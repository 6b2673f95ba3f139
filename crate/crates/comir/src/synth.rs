//! Synthetic benchmarks: a grid-scene dataset (rendered images plus templated
//! modification texts) and an attribute-description corpus with one-word-edit
//! pairs sampled on the fly.
//!
//! Dataset layout on disk:
//!   images/           lossless PNGs named by content hash
//!   triplets.ndjson   one `QueryTriplet` per line
//!   scenes.ndjson     image id -> symbolic scene (enables offline validation)
//!   vocab.txt         one word per line, `<pad>` / `<oov>` first
//!   manifest.json     generation config, seed, file pointers

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::Vocab;
use crate::error::{Error, Result};

pub const GRID: usize = 3;
pub const NUM_CELLS: usize = GRID * GRID;
pub const MIN_OBJECTS: usize = 2;
pub const MAX_OBJECTS: usize = 6;

/// Eight-color palette, chosen to stay distinct from the white background and
/// from each other after 8-bit quantization.
pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 70]),
    ("blue", [50, 90, 220]),
    ("yellow", [235, 220, 50]),
    ("cyan", [60, 200, 220]),
    ("purple", [150, 60, 200]),
    ("brown", [140, 90, 40]),
    ("gray", [128, 128, 128]),
];

pub const POSITION_WORDS: [&str; NUM_CELLS] = [
    "top-left",
    "top-center",
    "top-right",
    "middle-left",
    "middle-center",
    "middle-right",
    "bottom-left",
    "bottom-center",
    "bottom-right",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Rectangle,
}

pub const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Rectangle];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Rectangle => "rectangle",
        }
    }

    pub fn from_word(w: &str) -> Result<Self> {
        SHAPES
            .into_iter()
            .find(|s| s.word() == w)
            .ok_or_else(|| Error::Data(format!("unknown shape word {w:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    pub fn from_word(w: &str) -> Result<Self> {
        match w {
            "small" => Ok(Size::Small),
            "large" => Ok(Size::Large),
            _ => Err(Error::Data(format!("unknown size word {w:?}"))),
        }
    }
}

pub fn color_index(word: &str) -> Result<usize> {
    COLORS
        .iter()
        .position(|(w, _)| *w == word)
        .ok_or_else(|| Error::Data(format!("unknown color word {word:?}")))
}

pub fn position_index(word: &str) -> Result<usize> {
    POSITION_WORDS
        .iter()
        .position(|w| *w == word)
        .ok_or_else(|| Error::Data(format!("unknown position word {word:?}")))
}

/// One object in a grid cell. `cell` is row-major in `0..9`, `color` indexes
/// the palette.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Object {
    pub cell: usize,
    pub color: usize,
    pub shape: Shape,
    pub size: Size,
}

/// Symbolic scene: at most one object per cell, at least one object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<Object>,
}

impl SceneSpec {
    pub fn new(mut objects: Vec<Object>) -> Result<Self> {
        if objects.is_empty() {
            return Err(Error::Data("scene must contain at least one object".into()));
        }
        objects.sort();
        let mut cells = BTreeSet::new();
        for o in &objects {
            if o.cell >= NUM_CELLS || o.color >= COLORS.len() {
                return Err(Error::Data(format!("object out of range: {o:?}")));
            }
            if !cells.insert(o.cell) {
                return Err(Error::Data(format!("two objects in cell {}", o.cell)));
            }
        }
        Ok(SceneSpec { objects })
    }

    pub fn occupied_cells(&self) -> BTreeSet<usize> {
        self.objects.iter().map(|o| o.cell).collect()
    }
}

/// A scene edit realizable by one of the three text templates. Descriptors are
/// fully attributed (position + size + color + shape), so a descriptor matches
/// at most one object in a valid scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Modification {
    Add { object: Object },
    Remove { object: Object },
    Change { object: Object, new_color: usize },
}

/// Apply an edit, producing the target scene. Errors on inapplicable edits:
/// occupied add cell, descriptor with no match, or (defensively) an ambiguous
/// descriptor.
pub fn apply_modification(scene: &SceneSpec, m: &Modification) -> Result<SceneSpec> {
    match *m {
        Modification::Add { object } => {
            if scene.occupied_cells().contains(&object.cell) {
                return Err(Error::Data(format!("add target cell {} occupied", object.cell)));
            }
            let mut objs = scene.objects.clone();
            objs.push(object);
            SceneSpec::new(objs)
        }
        Modification::Remove { object } => {
            let matches: Vec<usize> = scene
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| **o == object)
                .map(|(i, _)| i)
                .collect();
            match matches.len() {
                0 => Err(Error::Data(format!("no object matches descriptor {object:?}"))),
                1 => {
                    let mut objs = scene.objects.clone();
                    objs.remove(matches[0]);
                    SceneSpec::new(objs)
                }
                _ => Err(Error::Data(format!("ambiguous descriptor {object:?}"))),
            }
        }
        Modification::Change { object, new_color } => {
            if new_color >= COLORS.len() {
                return Err(Error::Data(format!("color index {new_color} out of range")));
            }
            let matches: Vec<usize> = scene
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| **o == object)
                .map(|(i, _)| i)
                .collect();
            match matches.len() {
                0 => Err(Error::Data(format!("no object matches descriptor {object:?}"))),
                1 => {
                    let mut objs = scene.objects.clone();
                    objs[matches[0]].color = new_color;
                    SceneSpec::new(objs)
                }
                _ => Err(Error::Data(format!("ambiguous descriptor {object:?}"))),
            }
        }
    }
}

/// Fill the modification text templates:
///   add:    "add <size> <color> <shape> to <position>"
///   remove: "remove <position> <size> <color> <shape>"
///   change: "make <position> <size> <color> object <new-color>"
pub fn realize_text(m: &Modification) -> String {
    match *m {
        Modification::Add { object: o } => format!(
            "add {} {} {} to {}",
            o.size.word(),
            COLORS[o.color].0,
            o.shape.word(),
            POSITION_WORDS[o.cell]
        ),
        Modification::Remove { object: o } => format!(
            "remove {} {} {} {}",
            POSITION_WORDS[o.cell],
            o.size.word(),
            COLORS[o.color].0,
            o.shape.word()
        ),
        Modification::Change { object: o, new_color } => format!(
            "make {} {} {} object {}",
            POSITION_WORDS[o.cell],
            o.size.word(),
            COLORS[o.color].0,
            COLORS[new_color].0
        ),
    }
}

/// Inverse of [`realize_text`]. The change template omits the object's shape,
/// so the parsed descriptor must be completed against the source scene.
pub fn parse_text(text: &str, scene: &SceneSpec) -> Result<Modification> {
    let t: Vec<&str> = text.split_whitespace().collect();
    match t.as_slice() {
        ["add", size, color, shape, "to", pos] => Ok(Modification::Add {
            object: Object {
                cell: position_index(pos)?,
                color: color_index(color)?,
                shape: Shape::from_word(shape)?,
                size: Size::from_word(size)?,
            },
        }),
        ["remove", pos, size, color, shape] => Ok(Modification::Remove {
            object: Object {
                cell: position_index(pos)?,
                color: color_index(color)?,
                shape: Shape::from_word(shape)?,
                size: Size::from_word(size)?,
            },
        }),
        ["make", pos, size, color, "object", new_color] => {
            let cell = position_index(pos)?;
            let color = color_index(color)?;
            let size = Size::from_word(size)?;
            let obj = scene
                .objects
                .iter()
                .find(|o| o.cell == cell && o.color == color && o.size == size)
                .copied()
                .ok_or_else(|| {
                    Error::Data(format!("change text references no object: {text:?}"))
                })?;
            Ok(Modification::Change { object: obj, new_color: color_index(new_color)? })
        }
        _ => Err(Error::Data(format!("unparseable modification text: {text:?}"))),
    }
}

/// All 32 (shape, color) combinations.
pub fn all_combos() -> Vec<(Shape, usize)> {
    SHAPES
        .into_iter()
        .flat_map(|s| (0..COLORS.len()).map(move |c| (s, c)))
        .collect()
}

/// Uniform scene with 2-6 objects drawn from the given attribute combinations.
pub fn generate_scene_from<R: Rng>(rng: &mut R, combos: &[(Shape, usize)]) -> SceneSpec {
    assert!(!combos.is_empty());
    let n = rng.gen_range(MIN_OBJECTS..=MAX_OBJECTS);
    let mut cells: Vec<usize> = (0..NUM_CELLS).collect();
    cells.shuffle(rng);
    let objects = cells[..n]
        .iter()
        .map(|&cell| {
            let &(shape, color) = combos.choose(rng).unwrap();
            let size = if rng.gen_bool(0.5) { Size::Small } else { Size::Large };
            Object { cell, color, shape, size }
        })
        .collect();
    SceneSpec::new(objects).expect("generated scene is valid by construction")
}

pub fn generate_scene<R: Rng>(rng: &mut R) -> SceneSpec {
    generate_scene_from(rng, &all_combos())
}

/// Sample an applicable, unambiguous modification for a scene. Attribute draws
/// stay inside `combos` so split holdouts are preserved.
pub fn random_modification<R: Rng>(
    rng: &mut R,
    scene: &SceneSpec,
    combos: &[(Shape, usize)],
) -> Modification {
    let occupied = scene.occupied_cells();
    let empty: Vec<usize> = (0..NUM_CELLS).filter(|c| !occupied.contains(c)).collect();
    // Objects whose shape admits at least one alternative color within combos.
    let changeable: Vec<Object> = scene
        .objects
        .iter()
        .copied()
        .filter(|o| combos.iter().any(|&(s, c)| s == o.shape && c != o.color))
        .collect();
    let mut kinds = Vec::new();
    if !empty.is_empty() {
        kinds.push(0);
    }
    if scene.objects.len() > MIN_OBJECTS - 1 && scene.objects.len() >= 2 {
        kinds.push(1);
    }
    if !changeable.is_empty() {
        kinds.push(2);
    }
    match *kinds.choose(rng).expect("some modification is always applicable") {
        0 => {
            let cell = *empty.choose(rng).unwrap();
            let &(shape, color) = combos.choose(rng).unwrap();
            let size = if rng.gen_bool(0.5) { Size::Small } else { Size::Large };
            Modification::Add { object: Object { cell, color, shape, size } }
        }
        1 => Modification::Remove { object: *scene.objects.choose(rng).unwrap() },
        _ => {
            let object = *changeable.choose(rng).unwrap();
            let colors: Vec<usize> = combos
                .iter()
                .filter(|&&(s, c)| s == object.shape && c != object.color)
                .map(|&(_, c)| c)
                .collect();
            Modification::Change { object, new_color: *colors.choose(rng).unwrap() }
        }
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn cell_rect(cell: usize, size: usize) -> (usize, usize, usize, usize) {
    let row = cell / GRID;
    let col = cell % GRID;
    let y0 = row * size / GRID;
    let y1 = (row + 1) * size / GRID;
    let x0 = col * size / GRID;
    let x1 = (col + 1) * size / GRID;
    (x0, x1, y0, y1)
}

fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Rectangle => dx.abs() <= r && dy.abs() <= 0.55 * r,
        // Upward triangle: apex at the top of the bounding box.
        Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

fn draw_object(img: &mut Array3<f64>, obj: &Object, size: usize) {
    let (x0, x1, y0, y1) = cell_rect(obj.cell, size);
    let (w, h) = ((x1 - x0) as f64, (y1 - y0) as f64);
    let (cx, cy) = (x0 as f64 + w / 2.0, y0 as f64 + h / 2.0);
    let frac = match obj.size {
        Size::Small => 0.50,
        Size::Large => 0.82,
    };
    let r = frac * w.min(h) / 2.0;
    let rgb = COLORS[obj.color].1;
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if inside(obj.shape, dx, dy, r) {
                for ch in 0..3 {
                    img[[ch, y, x]] = rgb[ch] as f64 / 255.0;
                }
            }
        }
    }
}

/// Rasterize a scene to `[3, size, size]` in `[0, 1]`, white background.
pub fn render(scene: &SceneSpec, size: usize) -> Array3<f64> {
    let mut img = Array3::from_elem((3, size, size), 1.0);
    for obj in &scene.objects {
        draw_object(&mut img, obj, size);
    }
    img
}

fn to_rgb8(img: &Array3<f64>) -> Vec<u8> {
    let (_, h, w) = img.dim();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push((img[[ch, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Deterministic PNG bytes for a rendered image (also the basis of image ids).
pub fn png_bytes(img: &Array3<f64>) -> Result<Vec<u8>> {
    use image::codecs::png::PngEncoder;
    use image::ImageEncoder;
    let (_, h, w) = img.dim();
    let raw = to_rgb8(img);
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(&raw, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::Data(format!("png encode failed: {e}")))?;
    Ok(buf)
}

pub fn image_id(png: &[u8]) -> String {
    let digest = Sha256::digest(png);
    hex::encode(&digest[..8])
}

/// Decode a dataset PNG back to `[3, H, W]` in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dataset build
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTriplet {
    pub source_id: String,
    pub text: String,
    pub target_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CssDatasetConfig {
    pub train_triplets: usize,
    pub test_triplets: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Partition the 32 (shape, color) combinations disjointly between splits.
    pub holdout: bool,
}

impl Default for CssDatasetConfig {
    fn default() -> Self {
        CssDatasetConfig {
            train_triplets: 4000,
            test_triplets: 1000,
            image_size: 64,
            seed: 0,
            holdout: true,
        }
    }
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub kind: String,
    pub images_dir: String,
    pub triplets_file: String,
    pub scenes_file: String,
    pub vocab_file: String,
    pub image_size: usize,
    pub seed: u64,
    pub gen_config: serde_json::Value,
}

fn write_ndjson<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_ndjson<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

struct SceneWriter {
    images_dir: PathBuf,
    size: usize,
    scenes: BTreeMap<String, SceneSpec>,
}

impl SceneWriter {
    fn persist(&mut self, scene: &SceneSpec) -> Result<String> {
        let png = png_bytes(&render(scene, self.size))?;
        let id = image_id(&png);
        if let Some(existing) = self.scenes.get(&id) {
            if existing != scene {
                return Err(Error::Data(format!("image id collision on {id}")));
            }
        } else {
            fs::write(self.images_dir.join(format!("{id}.png")), &png)?;
            self.scenes.insert(id.clone(), scene.clone());
        }
        Ok(id)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneRecord {
    id: String,
    scene: SceneSpec,
}

fn finish_manifest(
    root: &Path,
    kind: &str,
    image_size: usize,
    seed: u64,
    gen_config: serde_json::Value,
    triplets: &[QueryTriplet],
    scenes: &BTreeMap<String, SceneSpec>,
) -> Result<DatasetManifest> {
    write_ndjson(&root.join("triplets.ndjson"), triplets)?;
    let scene_rows: Vec<SceneRecord> = scenes
        .iter()
        .map(|(id, scene)| SceneRecord { id: id.clone(), scene: scene.clone() })
        .collect();
    write_ndjson(&root.join("scenes.ndjson"), &scene_rows)?;

    let vocab = Vocab::build(triplets.iter().map(|t| t.text.as_str()));
    fs::write(root.join("vocab.txt"), vocab.words().join("\n") + "\n")?;

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        kind: kind.to_string(),
        images_dir: "images".into(),
        triplets_file: "triplets.ndjson".into(),
        scenes_file: "scenes.ndjson".into(),
        vocab_file: "vocab.txt".into(),
        image_size,
        seed,
        gen_config,
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Split the 32 (shape, color) combinations into disjoint halves with a
/// dedicated RNG stream so the partition depends only on the seed.
pub fn holdout_combos(seed: u64) -> (Vec<(Shape, usize)>, Vec<(Shape, usize)>) {
    let mut combos = all_combos();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f6d626f73);
    combos.shuffle(&mut rng);
    let test = combos.split_off(combos.len() / 2);
    (combos, test)
}

/// Generate the grid-scene benchmark and write it under `root`.
pub fn build_css_style_dataset(root: &Path, cfg: &CssDatasetConfig) -> Result<DatasetManifest> {
    if cfg.train_triplets == 0 || cfg.test_triplets == 0 {
        return Err(Error::Config("triplet counts must be positive".into()));
    }
    if cfg.image_size < 24 {
        return Err(Error::Config(format!("image_size {} too small to render", cfg.image_size)));
    }
    let images_dir = root.join("images");
    fs::create_dir_all(&images_dir)?;

    let (train_combos, test_combos) = if cfg.holdout {
        holdout_combos(cfg.seed)
    } else {
        (all_combos(), all_combos())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut writer = SceneWriter { images_dir, size: cfg.image_size, scenes: BTreeMap::new() };
    let mut triplets = Vec::with_capacity(cfg.train_triplets + cfg.test_triplets);
    for (split, count, combos) in [
        (Split::Train, cfg.train_triplets, &train_combos),
        (Split::Test, cfg.test_triplets, &test_combos),
    ] {
        for _ in 0..count {
            let scene = generate_scene_from(&mut rng, combos);
            let m = random_modification(&mut rng, &scene, combos);
            let target = apply_modification(&scene, &m)?;
            let text = realize_text(&m);
            let source_id = writer.persist(&scene)?;
            let target_id = writer.persist(&target)?;
            triplets.push(QueryTriplet { source_id, text, target_id, split });
        }
    }

    finish_manifest(
        root,
        "css-grid",
        cfg.image_size,
        cfg.seed,
        serde_json::to_value(cfg)?,
        &triplets,
        &writer.scenes,
    )
}

// ---------------------------------------------------------------------------
// Attribute-description corpus (one-word-edit pairs)
// ---------------------------------------------------------------------------

/// An item described by 3-5 attribute words: [size, color, shape] plus an
/// optional position word and an optional finish word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FashionItem {
    pub image_id: String,
    pub words: Vec<String>,
}

const FINISH_WORDS: [&str; 2] = ["plain", "shaded"];

fn item_scene_and_bg(words: &[String]) -> Result<(SceneSpec, f64)> {
    let size = Size::from_word(&words[0])?;
    let color = color_index(&words[1])?;
    let shape = Shape::from_word(&words[2])?;
    let cell = if words.len() >= 4 { position_index(&words[3])? } else { 4 };
    let bg = if words.len() == 5 && words[4] == "shaded" { 0.82 } else { 1.0 };
    let scene = SceneSpec::new(vec![Object { cell, color, shape, size }])?;
    Ok((scene, bg))
}

/// Rasterize a described item: a single object over a plain or shaded ground.
pub fn render_item(words: &[String], size: usize) -> Result<Array3<f64>> {
    let (scene, bg) = item_scene_and_bg(words)?;
    let mut img = Array3::from_elem((3, size, size), bg);
    for obj in &scene.objects {
        draw_object(&mut img, obj, size);
    }
    Ok(img)
}

fn random_item_words<R: Rng>(rng: &mut R) -> Vec<String> {
    let len = rng.gen_range(3..=5);
    let size = if rng.gen_bool(0.5) { Size::Small } else { Size::Large };
    let color = rng.gen_range(0..COLORS.len());
    let shape = *SHAPES.choose(rng).unwrap();
    let mut words = vec![
        size.word().to_string(),
        COLORS[color].0.to_string(),
        shape.word().to_string(),
    ];
    if len >= 4 {
        words.push(POSITION_WORDS[rng.gen_range(0..NUM_CELLS)].to_string());
    }
    if len == 5 {
        words.push(FINISH_WORDS[rng.gen_range(0..2)].to_string());
    }
    words
}

/// In-memory corpus with a Hamming-1 pair sampler: two items pair up when
/// their descriptions have the same length and differ in exactly one word; the
/// modification text is the target's differing word.
pub struct FashionCorpus {
    pub items: Vec<FashionItem>,
    partners: Vec<Vec<(usize, usize)>>,
}

impl FashionCorpus {
    pub fn new(items: Vec<FashionItem>) -> Self {
        // Bucket by (slot index, description with that slot blanked).
        let mut buckets: BTreeMap<(usize, Vec<String>), Vec<usize>> = BTreeMap::new();
        for (i, item) in items.iter().enumerate() {
            for slot in 0..item.words.len() {
                let mut key = item.words.clone();
                key[slot] = String::new();
                buckets.entry((slot, key)).or_default().push(i);
            }
        }
        let mut partners = vec![Vec::new(); items.len()];
        for ((slot, _), members) in &buckets {
            for &i in members {
                for &j in members {
                    if i != j && items[i].words[*slot] != items[j].words[*slot] {
                        partners[i].push((j, *slot));
                    }
                }
            }
        }
        for p in &mut partners {
            p.sort();
            p.dedup();
        }
        FashionCorpus { items, partners }
    }

    pub fn partners(&self, i: usize) -> &[(usize, usize)] {
        &self.partners[i]
    }

    /// Sample a (source, target, text) pair uniformly over pairable sources.
    pub fn sample_pair<R: Rng>(&self, rng: &mut R) -> Result<(usize, usize, String)> {
        let pairable: Vec<usize> =
            (0..self.items.len()).filter(|&i| !self.partners[i].is_empty()).collect();
        if pairable.is_empty() {
            return Err(Error::Data("no one-word-edit pairs in corpus".into()));
        }
        let i = *pairable.choose(rng).unwrap();
        let &(j, slot) = self.partners[i].choose(rng).unwrap();
        Ok((i, j, self.items[j].words[slot].clone()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FashionDatasetConfig {
    pub items: usize,
    pub train_triplets: usize,
    pub test_triplets: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for FashionDatasetConfig {
    fn default() -> Self {
        FashionDatasetConfig {
            items: 400,
            train_triplets: 4000,
            test_triplets: 1000,
            image_size: 64,
            seed: 0,
        }
    }
}

/// Build the attribute-description benchmark: items are rendered once, then
/// one-word-edit triplets are materialized from per-split item pools.
pub fn build_fashion_style_dataset(
    root: &Path,
    cfg: &FashionDatasetConfig,
) -> Result<DatasetManifest> {
    if cfg.items < 4 || cfg.train_triplets == 0 || cfg.test_triplets == 0 {
        return Err(Error::Config("fashion dataset config too small".into()));
    }
    let images_dir = root.join("images");
    fs::create_dir_all(&images_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scenes = BTreeMap::new();
    let mut items = Vec::with_capacity(cfg.items);
    let mut seen = BTreeSet::new();
    while items.len() < cfg.items {
        let words = random_item_words(&mut rng);
        if !seen.insert(words.clone()) {
            continue;
        }
        let img = render_item(&words, cfg.image_size)?;
        let png = png_bytes(&img)?;
        let id = image_id(&png);
        fs::write(images_dir.join(format!("{id}.png")), &png)?;
        let (scene, _) = item_scene_and_bg(&words)?;
        scenes.insert(id.clone(), scene);
        items.push(FashionItem { image_id: id, words });
    }
    write_ndjson(&root.join("items.ndjson"), &items)?;

    let cut = cfg.items * 4 / 5;
    let pools = [
        (Split::Train, cfg.train_triplets, FashionCorpus::new(items[..cut].to_vec())),
        (Split::Test, cfg.test_triplets, FashionCorpus::new(items[cut..].to_vec())),
    ];
    let mut triplets = Vec::new();
    for (split, count, corpus) in &pools {
        for _ in 0..*count {
            let (i, j, text) = corpus.sample_pair(&mut rng)?;
            triplets.push(QueryTriplet {
                source_id: corpus.items[i].image_id.clone(),
                text,
                target_id: corpus.items[j].image_id.clone(),
                split: *split,
            });
        }
    }

    finish_manifest(
        root,
        "fashion-attr",
        cfg.image_size,
        cfg.seed,
        serde_json::to_value(cfg)?,
        &triplets,
        &scenes,
    )
}

// ---------------------------------------------------------------------------
// Loading and validation
// ---------------------------------------------------------------------------

/// A dataset loaded from disk, ready for training and evaluation.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub triplets: Vec<QueryTriplet>,
    pub scenes: BTreeMap<String, SceneSpec>,
    pub vocab: Vocab,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Dataset> {
        let manifest_path = root.join("manifest.json");
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        let triplets: Vec<QueryTriplet> = read_ndjson(&root.join(&manifest.triplets_file))?;
        let scene_rows: Vec<SceneRecord> = read_ndjson(&root.join(&manifest.scenes_file))?;
        let scenes = scene_rows.into_iter().map(|r| (r.id, r.scene)).collect();
        let words: Vec<String> = fs::read_to_string(root.join(&manifest.vocab_file))?
            .lines()
            .map(|l| l.to_string())
            .filter(|l| !l.is_empty())
            .collect();
        let vocab = Vocab::from_words(words)?;
        Ok(Dataset { root: root.to_path_buf(), manifest, triplets, scenes, vocab })
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join(&self.manifest.images_dir).join(format!("{id}.png"))
    }

    pub fn load_image(&self, id: &str) -> Result<Array3<f64>> {
        load_png(&self.image_path(id))
    }

    pub fn split(&self, split: Split) -> Vec<&QueryTriplet> {
        self.triplets.iter().filter(|t| t.split == split).collect()
    }
}

/// Full offline validation pass: no dangling image references, no split
/// leaks, and (for grid-scene data with `deep`) every triplet's text applied
/// to its source scene reproduces the target scene and the stored pixels.
pub fn validate_manifest(root: &Path, deep: bool) -> Result<()> {
    let ds = Dataset::load(root)?;
    if ds.triplets.is_empty() {
        return Err(Error::Data("manifest contains no triplets".into()));
    }

    let mut split_ids: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
    for t in &ds.triplets {
        for id in [&t.source_id, &t.target_id] {
            if !ds.image_path(id).is_file() {
                return Err(Error::Data(format!("dangling image reference {id}")));
            }
            split_ids.entry(t.split).or_default().insert(id);
        }
        for w in t.text.split_whitespace() {
            let toks = ds.vocab.encode(w, 1)?;
            if toks[0] == crate::encoders::OOV_INDEX {
                return Err(Error::Data(format!("vocabulary does not cover {w:?}")));
            }
        }
    }
    if let (Some(tr), Some(te)) = (split_ids.get(&Split::Train), split_ids.get(&Split::Test)) {
        if tr.intersection(te).next().is_some() {
            return Err(Error::Data("image id shared between train and test splits".into()));
        }
    }

    if ds.manifest.kind == "css-grid" {
        let holdout = ds
            .manifest
            .gen_config
            .get("holdout")
            .and_then(|v| v.as_bool())
            .unwrap_or(false);
        if holdout {
            let mut split_combos: BTreeMap<Split, BTreeSet<(Shape, usize)>> = BTreeMap::new();
            for (split, ids) in &split_ids {
                let set = split_combos.entry(*split).or_default();
                for id in ids {
                    let scene = ds
                        .scenes
                        .get(*id)
                        .ok_or_else(|| Error::Data(format!("no scene record for {id}")))?;
                    set.extend(scene.objects.iter().map(|o| (o.shape, o.color)));
                }
            }
            if let (Some(tr), Some(te)) =
                (split_combos.get(&Split::Train), split_combos.get(&Split::Test))
            {
                if tr.intersection(te).next().is_some() {
                    return Err(Error::Data(
                        "holdout violated: attribute combination in both splits".into(),
                    ));
                }
            }
        }
        for t in &ds.triplets {
            let src = ds
                .scenes
                .get(&t.source_id)
                .ok_or_else(|| Error::Data(format!("no scene record for {}", t.source_id)))?;
            let tgt = ds
                .scenes
                .get(&t.target_id)
                .ok_or_else(|| Error::Data(format!("no scene record for {}", t.target_id)))?;
            let m = parse_text(&t.text, src)?;
            let applied = apply_modification(src, &m)?;
            if &applied != tgt {
                return Err(Error::Data(format!(
                    "text {:?} does not map source scene to target scene",
                    t.text
                )));
            }
        }
    }

    if deep {
        for (id, scene) in &ds.scenes {
            let stored = fs::read(ds.image_path(id))?;
            let png = if ds.manifest.kind == "fashion-attr" {
                // Item renders depend on the description's finish word, which
                // the scene record does not carry; check the hash only.
                stored.clone()
            } else {
                png_bytes(&render(scene, ds.manifest.image_size))?
            };
            if png != stored || image_id(&stored) != *id {
                return Err(Error::Data(format!("stored pixels for {id} do not match")));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn seeded_generation_reproducible_and_valid() {
        let a: Vec<SceneSpec> = {
            let mut r = rng(5);
            (0..50).map(|_| generate_scene(&mut r)).collect()
        };
        let b: Vec<SceneSpec> = {
            let mut r = rng(5);
            (0..50).map(|_| generate_scene(&mut r)).collect()
        };
        assert_eq!(a, b);

        let mut r = rng(6);
        for _ in 0..10_000 {
            let s = generate_scene(&mut r);
            let cells = s.occupied_cells();
            assert_eq!(cells.len(), s.objects.len(), "cell reuse in {s:?}");
            assert!((MIN_OBJECTS..=MAX_OBJECTS).contains(&s.objects.len()));
        }
    }

    #[test]
    fn attribute_marginals_approximately_uniform() {
        // Chi-square upper critical values at p = 0.01.
        fn chi2(counts: &[usize], critical: f64) {
            let total: usize = counts.iter().sum();
            let expect = total as f64 / counts.len() as f64;
            let stat: f64 = counts
                .iter()
                .map(|&c| (c as f64 - expect).powi(2) / expect)
                .sum();
            assert!(stat < critical, "chi2 {stat} over counts {counts:?}");
        }
        let mut r = rng(7);
        let mut colors = [0usize; 8];
        let mut shapes = [0usize; 4];
        let mut sizes = [0usize; 2];
        let mut cells = [0usize; NUM_CELLS];
        for _ in 0..10_000 {
            for o in generate_scene(&mut r).objects {
                colors[o.color] += 1;
                shapes[SHAPES.iter().position(|&s| s == o.shape).unwrap()] += 1;
                sizes[(o.size == Size::Large) as usize] += 1;
                cells[o.cell] += 1;
            }
        }
        chi2(&colors, 18.48); // df = 7
        chi2(&shapes, 11.34); // df = 3
        chi2(&sizes, 6.63); // df = 1
        chi2(&cells, 20.09); // df = 8
    }

    #[test]
    fn empty_cells_stay_background_and_edits_are_local() {
        let base = SceneSpec::new(vec![Object {
            cell: 4,
            color: 0,
            shape: Shape::Circle,
            size: Size::Large,
        }])
        .unwrap();
        let img = render(&base, 64);
        // Everything outside the center cell is background white.
        let (x0, x1, y0, y1) = cell_rect(4, 64);
        for y in 0..64 {
            for x in 0..64 {
                if !(x0..x1).contains(&x) || !(y0..y1).contains(&y) {
                    for ch in 0..3 {
                        assert_eq!(img[[ch, y, x]], 1.0);
                    }
                }
            }
        }
        // Adding one object changes only that object's cell block.
        let extra = Object { cell: 2, color: 3, shape: Shape::Square, size: Size::Small };
        let with = apply_modification(&base, &Modification::Add { object: extra }).unwrap();
        let img2 = render(&with, 64);
        let (ax0, ax1, ay0, ay1) = cell_rect(2, 64);
        for y in 0..64 {
            for x in 0..64 {
                let in_block = (ax0..ax1).contains(&x) && (ay0..ay1).contains(&y);
                for ch in 0..3 {
                    if !in_block {
                        assert_eq!(img[[ch, y, x]], img2[[ch, y, x]]);
                    }
                }
            }
        }
    }

    #[test]
    fn render_injective_over_ten_thousand_scenes() {
        let mut r = rng(11);
        let mut seen: BTreeMap<String, SceneSpec> = BTreeMap::new();
        for _ in 0..10_000 {
            let s = generate_scene(&mut r);
            let raw = to_rgb8(&render(&s, 64));
            let key = hex::encode(Sha256::digest(&raw));
            if let Some(prev) = seen.get(&key) {
                assert_eq!(prev, &s, "distinct scenes rendered identically");
            } else {
                seen.insert(key, s);
            }
        }
    }

    #[test]
    fn add_remove_and_change_identities() {
        let mut r = rng(13);
        for _ in 0..200 {
            let scene = generate_scene(&mut r);
            let empty: Vec<usize> =
                (0..NUM_CELLS).filter(|c| !scene.occupied_cells().contains(c)).collect();
            let obj = Object {
                cell: empty[0],
                color: 2,
                shape: Shape::Triangle,
                size: Size::Small,
            };
            let added = apply_modification(&scene, &Modification::Add { object: obj }).unwrap();
            let back =
                apply_modification(&added, &Modification::Remove { object: obj }).unwrap();
            assert_eq!(back, scene);

            let o = scene.objects[0];
            let same =
                apply_modification(&scene, &Modification::Change { object: o, new_color: o.color })
                    .unwrap();
            assert_eq!(same, scene);
        }
    }

    #[test]
    fn generated_modifications_always_applicable() {
        let combos = all_combos();
        let mut r = rng(17);
        for _ in 0..10_000 {
            let scene = generate_scene(&mut r);
            let m = random_modification(&mut r, &scene, &combos);
            apply_modification(&scene, &m).expect("generated modification must apply");
        }
    }

    #[test]
    fn templates_and_round_trip_parsing() {
        let o = Object { cell: 2, color: 1, shape: Shape::Rectangle, size: Size::Small };
        assert_eq!(
            realize_text(&Modification::Add { object: o }),
            "add small green rectangle to top-right"
        );
        let r7 = Object { cell: 7, color: 0, shape: Shape::Circle, size: Size::Small };
        assert_eq!(
            realize_text(&Modification::Remove { object: r7 }),
            "remove bottom-center small red circle"
        );
        let c6 = Object { cell: 6, color: 1, shape: Shape::Square, size: Size::Large };
        assert_eq!(
            realize_text(&Modification::Change { object: c6, new_color: 7 }),
            "make bottom-left large green object gray"
        );

        // Round trip over generated pairs, including change texts that need
        // the scene to recover the shape.
        let combos = all_combos();
        let mut r = rng(19);
        for _ in 0..500 {
            let scene = generate_scene(&mut r);
            let m = random_modification(&mut r, &scene, &combos);
            let parsed = parse_text(&realize_text(&m), &scene).unwrap();
            assert_eq!(parsed, m);
        }
        assert!(parse_text("paint everything blue", &SceneSpec::new(vec![o]).unwrap()).is_err());
    }

    #[test]
    fn text_length_fits_token_budget() {
        let combos = all_combos();
        let mut r = rng(23);
        for _ in 0..500 {
            let scene = generate_scene(&mut r);
            let m = random_modification(&mut r, &scene, &combos);
            assert!(realize_text(&m).split_whitespace().count() <= 6);
        }
    }

    #[test]
    fn css_dataset_build_holdout_and_reproducibility() {
        let cfg = CssDatasetConfig {
            train_triplets: 40,
            test_triplets: 12,
            image_size: 32,
            seed: 42,
            holdout: true,
        };
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        build_css_style_dataset(dir_a.path(), &cfg).unwrap();
        build_css_style_dataset(dir_b.path(), &cfg).unwrap();
        validate_manifest(dir_a.path(), true).unwrap();

        // Byte-identical regeneration.
        for name in ["triplets.ndjson", "scenes.ndjson", "vocab.txt", "manifest.json"] {
            assert_eq!(
                fs::read(dir_a.path().join(name)).unwrap(),
                fs::read(dir_b.path().join(name)).unwrap(),
                "{name} differs between identical-seed builds"
            );
        }
        let list = |d: &Path| -> Vec<String> {
            let mut v: Vec<String> = fs::read_dir(d.join("images"))
                .unwrap()
                .map(|e| e.unwrap().file_name().into_string().unwrap())
                .collect();
            v.sort();
            v
        };
        assert_eq!(list(dir_a.path()), list(dir_b.path()));

        // Holdout scan: no (shape, color) combination crosses splits, and the
        // split image-id sets are disjoint.
        let ds = Dataset::load(dir_a.path()).unwrap();
        let combos_of = |split: Split| -> BTreeSet<(Shape, usize)> {
            ds.split(split)
                .iter()
                .flat_map(|t| [&t.source_id, &t.target_id])
                .flat_map(|id| ds.scenes[id].objects.iter())
                .map(|o| (o.shape, o.color))
                .collect()
        };
        let train_c = combos_of(Split::Train);
        let test_c = combos_of(Split::Test);
        assert!(train_c.intersection(&test_c).next().is_none());
        assert!(!train_c.is_empty() && !test_c.is_empty());

        let ids = |split: Split| -> BTreeSet<String> {
            ds.split(split)
                .iter()
                .flat_map(|t| [t.source_id.clone(), t.target_id.clone()])
                .collect()
        };
        assert!(ids(Split::Train).intersection(&ids(Split::Test)).next().is_none());

        // Different seed changes content.
        let dir_c = tempdir().unwrap();
        build_css_style_dataset(dir_c.path(), &CssDatasetConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(
            fs::read(dir_a.path().join("triplets.ndjson")).unwrap(),
            fs::read(dir_c.path().join("triplets.ndjson")).unwrap()
        );
    }

    #[test]
    fn validation_catches_corruption() {
        let cfg = CssDatasetConfig {
            train_triplets: 10,
            test_triplets: 4,
            image_size: 32,
            seed: 1,
            holdout: true,
        };
        let dir = tempdir().unwrap();
        build_css_style_dataset(dir.path(), &cfg).unwrap();

        // Dangling image reference.
        let ds = Dataset::load(dir.path()).unwrap();
        let victim = ds.image_path(&ds.triplets[0].source_id);
        let bytes = fs::read(&victim).unwrap();
        fs::remove_file(&victim).unwrap();
        assert!(validate_manifest(dir.path(), false).is_err());
        fs::write(&victim, &bytes).unwrap();
        validate_manifest(dir.path(), true).unwrap();

        // Corrupted pixels caught by the deep check.
        let other = ds.image_path(&ds.triplets[1].target_id);
        let mut png = render(&ds.scenes[&ds.triplets[1].target_id], 32);
        png[[0, 0, 0]] = 0.0;
        fs::write(&other, png_bytes(&png).unwrap()).unwrap();
        assert!(validate_manifest(dir.path(), true).is_err());
    }

    #[test]
    fn fashion_pairs_are_hamming_one() {
        let mut r = rng(29);
        let items: Vec<FashionItem> = (0..300)
            .map(|i| FashionItem { image_id: format!("it{i}"), words: random_item_words(&mut r) })
            .collect();
        let corpus = FashionCorpus::new(items);
        for _ in 0..500 {
            let (i, j, text) = corpus.sample_pair(&mut r).unwrap();
            let (a, b) = (&corpus.items[i].words, &corpus.items[j].words);
            assert_eq!(a.len(), b.len());
            let diff: Vec<usize> = (0..a.len()).filter(|&k| a[k] != b[k]).collect();
            assert_eq!(diff.len(), 1, "{a:?} vs {b:?}");
            assert_eq!(text, b[diff[0]]);
            assert!(b.contains(&text) && !a.contains(&text));
        }
    }

    #[test]
    fn fashion_sampler_reaches_every_pairable_item() {
        let mut r = rng(31);
        let items: Vec<FashionItem> = (0..80)
            .map(|i| FashionItem { image_id: format!("it{i}"), words: random_item_words(&mut r) })
            .collect();
        let corpus = FashionCorpus::new(items);
        // Graph scan: symmetric partner relation, and every item with a
        // partner is sampleable as a source.
        let pairable: BTreeSet<usize> =
            (0..corpus.items.len()).filter(|&i| !corpus.partners(i).is_empty()).collect();
        for &i in &pairable {
            for &(j, slot) in corpus.partners(i) {
                assert!(corpus.partners(j).iter().any(|&(k, s)| k == i && s == slot));
            }
        }
        let mut seen = BTreeSet::new();
        for _ in 0..20_000 {
            let (i, _, _) = corpus.sample_pair(&mut r).unwrap();
            seen.insert(i);
            if seen.len() == pairable.len() {
                break;
            }
        }
        assert_eq!(seen, pairable);
    }

    #[test]
    fn fashion_dataset_build_roundtrip() {
        let cfg = FashionDatasetConfig {
            items: 60,
            train_triplets: 40,
            test_triplets: 10,
            image_size: 32,
            seed: 3,
        };
        let dir = tempdir().unwrap();
        build_fashion_style_dataset(dir.path(), &cfg).unwrap();
        validate_manifest(dir.path(), true).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.split(Split::Train).len(), 40);
        assert_eq!(ds.split(Split::Test).len(), 10);
        let img = ds.load_image(&ds.triplets[0].source_id).unwrap();
        assert_eq!(img.dim(), (3, 32, 32));
    }
}
