//! Procedural captioned scenes: one flat-colored shape on a gray background.
//! Captions fully determine images, so generated images can be scored by a
//! program.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// Background value shared by all channels.
pub const BACKGROUND: f32 = 0.0;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

word_enum!(Shape { Square => "square", Circle => "circle", Triangle => "triangle" });
word_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
word_enum!(Position { Left => "left", Right => "right", Top => "top", Bottom => "bottom", Center => "center" });
word_enum!(Size { Small => "small", Large => "large" });

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub position: Position,
    pub size: Size,
}

/// A caption that may mention only some attributes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PartialSpec {
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub position: Option<Position>,
    pub size: Option<Size>,
}

const FILLER: &[&str] = &["a", "an", "the", "on", "at", "in", "of", "image"];

impl PartialSpec {
    pub fn matches(&self, spec: &SceneSpec) -> bool {
        self.shape.is_none_or(|s| s == spec.shape)
            && self.color.is_none_or(|c| c == spec.color)
            && self.position.is_none_or(|p| p == spec.position)
            && self.size.is_none_or(|s| s == spec.size)
    }

    pub fn is_complete(&self) -> bool {
        self.complete().is_some()
    }

    pub fn complete(&self) -> Option<SceneSpec> {
        Some(SceneSpec { shape: self.shape?, color: self.color?, position: self.position?, size: self.size? })
    }
}

/// Parses a caption; each attribute may appear at most once and at least
/// one attribute must appear. Filler words are ignored.
pub fn parse_caption(caption: &str) -> Result<PartialSpec> {
    let err = || Error::UnparseableCaption(caption.to_string());
    let mut spec = PartialSpec::default();
    fn set<T>(slot: &mut Option<T>, v: T) -> bool {
        slot.replace(v).is_none()
    }
    for word in caption.split_whitespace() {
        let w = word.to_ascii_lowercase();
        let ok = if let Some(s) = Shape::from_word(&w) {
            set(&mut spec.shape, s)
        } else if let Some(c) = Color::from_word(&w) {
            set(&mut spec.color, c)
        } else if let Some(p) = Position::from_word(&w) {
            set(&mut spec.position, p)
        } else if let Some(s) = Size::from_word(&w) {
            set(&mut spec.size, s)
        } else {
            FILLER.contains(&w.as_str())
        };
        if !ok {
            return Err(err());
        }
    }
    if spec == PartialSpec::default() {
        return Err(err());
    }
    Ok(spec)
}

impl SceneSpec {
    pub fn new(shape: Shape, color: Color, position: Position, size: Size) -> Self {
        Self { shape, color, position, size }
    }

    /// Every spec in the grammar, in a fixed order.
    pub fn all() -> Vec<SceneSpec> {
        let mut out = Vec::with_capacity(120);
        for &shape in Shape::ALL {
            for &color in Color::ALL {
                for &position in Position::ALL {
                    for &size in Size::ALL {
                        out.push(SceneSpec { shape, color, position, size });
                    }
                }
            }
        }
        out
    }

    pub fn caption(&self) -> String {
        format!("{} {} {} {}", self.size, self.color, self.shape, self.position)
    }

    /// Center of the shape in pixel coordinates.
    pub fn anchor(&self, height: usize, width: usize) -> (f64, f64) {
        let (h, w) = (height as f64, width as f64);
        let (near, far) = (5.0 / 16.0, 11.0 / 16.0);
        match self.position {
            Position::Center => (w / 2.0, h / 2.0),
            Position::Left => (w * near, h / 2.0),
            Position::Right => (w * far, h / 2.0),
            Position::Top => (w / 2.0, h * near),
            Position::Bottom => (w / 2.0, h * far),
        }
    }

    /// Side length of the shape's bounding box.
    pub fn extent(&self, height: usize, width: usize) -> f64 {
        let base = height.min(width) as f64;
        match self.size {
            Size::Small => base * 6.0 / 16.0,
            Size::Large => base * 10.0 / 16.0,
        }
    }

    /// Whether the pixel at row `y`, column `x` lies inside the shape.
    pub fn covers(&self, height: usize, width: usize, y: usize, x: usize) -> bool {
        let (cx, cy) = self.anchor(height, width);
        let half = self.extent(height, width) / 2.0;
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        match self.shape {
            Shape::Square => dx.abs() < half && dy.abs() < half,
            Shape::Circle => dx * dx + dy * dy < half * half,
            Shape::Triangle => {
                let rel = (dy + half) / (2.0 * half);
                rel > 0.0 && rel < 1.0 && dx.abs() < half * rel
            }
        }
    }

    /// Renders the scene as a `3 x height x width` image.
    pub fn render(&self, height: usize, width: usize) -> Image {
        let mut img = Image::zeros(3, height, width);
        img.data.fill(BACKGROUND);
        let rgb = self.color.rgb();
        for y in 0..height {
            for x in 0..width {
                if self.covers(height, width, y, x) {
                    for (c, &v) in rgb.iter().enumerate() {
                        img.set(c, y, x, v);
                    }
                }
            }
        }
        img
    }

    /// Applies an edit instruction from the synthetic grammar.
    pub fn apply_instruction(&self, instruction: &str) -> Result<SceneSpec> {
        let err = || Error::UnknownInstruction(instruction.to_string());
        let words: Vec<&str> = instruction.split_whitespace().collect();
        let mut out = *self;
        match words.as_slice() {
            ["keep", "it"] => {}
            ["make", "it", w] => {
                if let Some(c) = Color::from_word(w) {
                    out.color = c;
                } else if let Some(s) = Size::from_word(w) {
                    out.size = s;
                } else {
                    return Err(err());
                }
            }
            ["move", "it", w] => out.position = Position::from_word(w).ok_or_else(err)?,
            ["turn", "it", "into", "a", w] => out.shape = Shape::from_word(w).ok_or_else(err)?,
            _ => return Err(err()),
        }
        Ok(out)
    }
}

/// Instruction strings for each kind of edit.
pub fn color_instruction(c: Color) -> String {
    format!("make it {c}")
}

pub fn size_instruction(s: Size) -> String {
    format!("make it {s}")
}

pub fn move_instruction(p: Position) -> String {
    format!("move it {p}")
}

pub fn shape_instruction(s: Shape) -> String {
    format!("turn it into a {s}")
}

pub const IDENTITY_INSTRUCTION: &str = "keep it";
