//! Deterministic synthetic datasets: colored shapes on a grid, their
//! captions, and question-answer conversations about them.
//!
//! Record `i` of a dataset is generated from its own RNG seeded by
//! `(seed, i)`, so output is identical whether records are produced serially
//! or in parallel.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::conversation::{CaptionRecord, ConversationRecord, Turn};
use super::Image;
use crate::error::{Error, Result};

pub const DEFAULT_IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
        }
    }
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub color: Color,
    pub shape: Shape,
    pub row: usize,
    pub col: usize,
}

impl SceneObject {
    pub fn describe(&self) -> String {
        format!("a {} {}", self.color.name(), self.shape.name())
    }
}

/// Objects in row-major cell order. Objects in one scene have distinct
/// cells, colors and shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub grid: usize,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng, grid: usize, max_objects: usize) -> Scene {
        let count = rng.random_range(1..=max_objects.min(2));
        let mut cells: Vec<usize> = (0..grid * grid).collect();
        let mut colors = Color::ALL.to_vec();
        let mut shapes = Shape::ALL.to_vec();
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let cell = cells.remove(rng.random_range(0..cells.len()));
            let color = colors.remove(rng.random_range(0..colors.len()));
            let shape = shapes.remove(rng.random_range(0..shapes.len()));
            objects.push(SceneObject {
                color,
                shape,
                row: cell / grid,
                col: cell % grid,
            });
        }
        objects.sort_by_key(|o| (o.row, o.col));
        Scene { grid, objects }
    }

    /// Exhaustive description: `a {color} {shape}` for one object, and for
    /// two objects the first (in row-major order) placed `above` or `left
    /// of` the second.
    pub fn caption(&self) -> String {
        match self.objects.as_slice() {
            [only] => only.describe(),
            [a, b] => {
                let relation = if a.row < b.row { "above" } else { "left of" };
                format!("{} {relation} {}", a.describe(), b.describe())
            }
            _ => self
                .objects
                .iter()
                .map(SceneObject::describe)
                .collect::<Vec<_>>()
                .join(" and "),
        }
    }

    /// Draws the scene on a black `size × size` canvas. Each object fills
    /// its grid cell minus a margin.
    pub fn render(&self, size: usize) -> Image {
        let mut img = Image::blank(size, size);
        let cell = size / self.grid;
        let offset = (size - cell * self.grid) / 2;
        let margin = (cell / 8).max(1);
        for o in &self.objects {
            let x0 = offset + o.col * cell + margin;
            let y0 = offset + o.row * cell + margin;
            let extent = cell - 2 * margin;
            let rgb = o.color.rgb();
            let center = extent as f64 / 2.0;
            for dy in 0..extent {
                for dx in 0..extent {
                    let (px, py) = (dx as f64 + 0.5, dy as f64 + 0.5);
                    let inside = match o.shape {
                        Shape::Square => true,
                        Shape::Circle => (px - center).powi(2) + (py - center).powi(2) <= center * center,
                        Shape::Triangle => (px - center).abs() <= center * py / extent as f64,
                    };
                    if inside {
                        img.set_pixel(y0 + dy, x0 + dx, rgb);
                    }
                }
            }
        }
        img
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn record_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index as u64)));
    rng.set_stream(stream);
    rng
}

fn check_grid(grid: usize, n: usize) -> Result<()> {
    if !(2..=3).contains(&grid) {
        return Err(Error::Contract(format!("grid must be 2 or 3, got {grid}")));
    }
    if n == 0 {
        return Err(Error::Contract("dataset size must be at least 1".into()));
    }
    Ok(())
}

/// Scenes underlying [`synth_shapes_dataset`].
pub fn synth_scenes(seed: u64, n: usize, grid: usize) -> Result<Vec<Scene>> {
    check_grid(grid, n)?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| Scene::random(&mut record_rng(seed, i, 1), grid, 2))
        .collect())
}

/// `n` caption records of rendered scenes; the caption is a pure function of
/// the scene's object list.
pub fn synth_shapes_dataset(seed: u64, n: usize, grid: usize, image_size: usize) -> Result<Vec<CaptionRecord>> {
    let scenes = synth_scenes(seed, n, grid)?;
    Ok(scenes
        .par_iter()
        .map(|s| CaptionRecord {
            image: s.render(image_size),
            caption: s.caption(),
        })
        .collect())
}

const OPPOSITES: [(&str, &str); 6] = [
    ("up", "down"),
    ("big", "small"),
    ("hot", "cold"),
    ("left", "right"),
    ("yes", "no"),
    ("day", "night"),
];
const WORDS: [&str; 8] = ["red", "tree", "cat", "sun", "blue", "moon", "dog", "star"];
const NUMBER_WORDS: [&str; 4] = ["zero", "one", "two", "three"];

fn text_question(rng: &mut ChaCha8Rng) -> (String, String) {
    match rng.random_range(0..5) {
        0 => {
            let (a, b) = (rng.random_range(0..10), rng.random_range(0..10));
            (format!("what is {a} plus {b}?"), (a + b).to_string())
        }
        1 => {
            let n = rng.random_range(0..20);
            (format!("what comes after {n}?"), (n + 1).to_string())
        }
        2 => {
            let a = WORDS.choose(rng).expect("non-empty");
            let b = WORDS.choose(rng).expect("non-empty");
            (format!("repeat: {a} {b}"), format!("{a} {b}"))
        }
        3 => {
            let (a, b) = (rng.random_range(0..10), rng.random_range(0..10));
            let ans = if a > b { "yes" } else { "no" };
            (format!("is {a} greater than {b}?"), ans.to_string())
        }
        _ => {
            let (a, b) = *OPPOSITES.choose(rng).expect("non-empty");
            if rng.random_bool(0.5) {
                (format!("what is the opposite of {a}?"), b.to_string())
            } else {
                (format!("what is the opposite of {b}?"), a.to_string())
            }
        }
    }
}

/// Question kinds asked about a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisualQuestion {
    Describe,
    ColorOf(Shape),
    ShapeOf(Color),
    Count,
}

impl VisualQuestion {
    pub fn text(self) -> String {
        match self {
            VisualQuestion::Describe => "what is in the image?".into(),
            VisualQuestion::ColorOf(s) => format!("what color is the {}?", s.name()),
            VisualQuestion::ShapeOf(c) => format!("what shape is the {} object?", c.name()),
            VisualQuestion::Count => "how many objects are there?".into(),
        }
    }

    /// Ground-truth answer from scene metadata.
    pub fn answer(self, scene: &Scene) -> Option<String> {
        match self {
            VisualQuestion::Describe => Some(scene.caption()),
            VisualQuestion::ColorOf(s) => scene
                .objects
                .iter()
                .find(|o| o.shape == s)
                .map(|o| o.color.name().to_string()),
            VisualQuestion::ShapeOf(c) => scene
                .objects
                .iter()
                .find(|o| o.color == c)
                .map(|o| o.shape.name().to_string()),
            VisualQuestion::Count => NUMBER_WORDS.get(scene.objects.len()).map(|s| s.to_string()),
        }
    }
}

fn visual_question(rng: &mut ChaCha8Rng, scene: &Scene) -> VisualQuestion {
    let obj = scene.objects.choose(rng).expect("scenes have objects");
    match rng.random_range(0..4) {
        0 => VisualQuestion::Describe,
        1 => VisualQuestion::ColorOf(obj.shape),
        2 => VisualQuestion::ShapeOf(obj.color),
        _ => VisualQuestion::Count,
    }
}

/// An instruction record with the scene it was generated from (absent for
/// text-only records).
#[derive(Debug, Clone)]
pub struct InstructionSample {
    pub record: ConversationRecord,
    pub scene: Option<Scene>,
}

/// Whether record `i` of `n` is text-only for a given text fraction; spreads
/// exactly `floor(n·fraction)` text-only records evenly.
fn is_text_only(i: usize, fraction: f64) -> bool {
    ((i + 1) as f64 * fraction).floor() > (i as f64 * fraction).floor()
}

/// Instruction conversations mixing text-only question answering with
/// questions about synthetic images. About 30% of records carry a second
/// question round.
pub fn synth_instruction_samples(
    seed: u64,
    n: usize,
    text_fraction: f64,
    grid: usize,
    image_size: usize,
) -> Result<Vec<InstructionSample>> {
    check_grid(grid, n)?;
    if !(0.0..=1.0).contains(&text_fraction) {
        return Err(Error::Contract(format!("text fraction {text_fraction} outside [0, 1]")));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = record_rng(seed, i, 2);
            let rounds = if rng.random_bool(0.3) { 2 } else { 1 };
            let mut turns = Vec::new();
            if is_text_only(i, text_fraction) {
                for _ in 0..rounds {
                    let (q, a) = text_question(&mut rng);
                    turns.push(Turn::user(q));
                    turns.push(Turn::assistant(a));
                }
                return Ok(InstructionSample {
                    record: ConversationRecord::new(turns, None)?,
                    scene: None,
                });
            }
            let scene = Scene::random(&mut rng, grid, 2);
            for _ in 0..rounds {
                let q = visual_question(&mut rng, &scene);
                let a = q.answer(&scene).expect("questions are drawn from the scene");
                turns.push(Turn::user(q.text()));
                turns.push(Turn::assistant(a));
            }
            Ok(InstructionSample {
                record: ConversationRecord::new(turns, Some(scene.render(image_size)))?,
                scene: Some(scene),
            })
        })
        .collect()
}

pub fn synth_instruction_dataset(
    seed: u64,
    n: usize,
    text_fraction: f64,
    grid: usize,
    image_size: usize,
) -> Result<Vec<ConversationRecord>> {
    Ok(synth_instruction_samples(seed, n, text_fraction, grid, image_size)?
        .into_iter()
        .map(|s| s.record)
        .collect())
}

/// A held-out visual question with its expected answer.
#[derive(Debug, Clone)]
pub struct QaProbe {
    pub image: Image,
    pub question: String,
    pub answer: String,
}

/// Single-object scenes asked "what is in the image?"; the answer names one
/// of the nine color–shape pairs.
pub fn synth_qa_probes(seed: u64, n: usize, grid: usize, image_size: usize) -> Result<Vec<QaProbe>> {
    check_grid(grid, n)?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let scene = Scene::random(&mut record_rng(seed, i, 3), grid, 1);
            QaProbe {
                image: scene.render(image_size),
                question: VisualQuestion::Describe.text(),
                answer: scene.caption(),
            }
        })
        .collect())
}
