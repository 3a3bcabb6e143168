//! Procedurally rendered shape scenes with template captions and an exact
//! attribute oracle.
//!
//! Images are `3×32×32` tensors in `[-1, 1]`; the caption grammar is
//! `a {size} {color} {shape} at the {position} on a {background} background`.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IMAGE_HW: usize = 32;
pub const CHANNELS: usize = 3;
/// Minimum per-attribute confidence for the oracle to vouch for a field.
pub const CONFIDENCE_THRESHOLD: f64 = 0.5;

macro_rules! closed_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).expect("listed")
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

closed_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle" });
closed_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
closed_enum!(Size { Small => "small", Large => "large" });
closed_enum!(Position { Top => "top", Bottom => "bottom", Left => "left", Right => "right", Center => "center" });
closed_enum!(Background { Dark => "dark", Light => "light" });

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }
}

impl Size {
    /// Half-extent in pixels.
    pub fn radius(self) -> f64 {
        match self {
            Size::Small => 4.0,
            Size::Large => 7.0,
        }
    }
}

impl Position {
    /// Shape centre `(x, y)` in pixel units.
    pub fn center(self) -> (f64, f64) {
        match self {
            Position::Top => (16.0, 8.0),
            Position::Bottom => (16.0, 24.0),
            Position::Left => (8.0, 16.0),
            Position::Right => (24.0, 16.0),
            Position::Center => (16.0, 16.0),
        }
    }
}

impl Background {
    pub fn level(self) -> f64 {
        match self {
            Background::Dark => -0.5,
            Background::Light => 0.5,
        }
    }
}

/// Ground-truth scene attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub position: Position,
    pub background: Background,
}

/// Slot indices of the caption grammar.
pub mod slot {
    pub const SIZE: usize = 1;
    pub const COLOR: usize = 2;
    pub const SHAPE: usize = 3;
    pub const POSITION: usize = 6;
    pub const BACKGROUND: usize = 9;
    pub const CAPTION_WORDS: usize = 11;
}

impl SceneSpec {
    /// All 240 scenes in a fixed order.
    pub fn enumerate() -> Vec<SceneSpec> {
        let mut out = Vec::with_capacity(240);
        for &shape in Shape::ALL {
            for &color in Color::ALL {
                for &size in Size::ALL {
                    for &position in Position::ALL {
                        for &background in Background::ALL {
                            out.push(SceneSpec {
                                shape,
                                color,
                                size,
                                position,
                                background,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.random_range(0..Color::ALL.len())],
            size: Size::ALL[rng.random_range(0..Size::ALL.len())],
            position: Position::ALL[rng.random_range(0..Position::ALL.len())],
            background: Background::ALL[rng.random_range(0..Background::ALL.len())],
        }
    }

    pub fn caption(&self) -> String {
        caption_grammar(self)
    }
}

pub fn caption_grammar(spec: &SceneSpec) -> String {
    format!(
        "a {} {} {} at the {} on a {} background",
        spec.size, spec.color, spec.shape, spec.position, spec.background
    )
}

/// Per-slot parse of a generated caption. Slots are read by position when
/// the caption has the grammar's word count; otherwise every slot is `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CaptionSlots {
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub size: Option<Size>,
    pub position: Option<Position>,
    pub background: Option<Background>,
    /// Fixed grammar words all in place.
    pub well_formed: bool,
}

impl CaptionSlots {
    pub fn spec(&self) -> Option<SceneSpec> {
        Some(SceneSpec {
            shape: self.shape?,
            color: self.color?,
            size: self.size?,
            position: self.position?,
            background: self.background?,
        })
    }
}

pub fn parse_caption(caption: &str) -> CaptionSlots {
    let words: Vec<&str> = caption.split_whitespace().collect();
    if words.len() != slot::CAPTION_WORDS {
        return CaptionSlots::default();
    }
    let fixed = [(0, "a"), (4, "at"), (5, "the"), (7, "on"), (8, "a"), (10, "background")];
    CaptionSlots {
        size: Size::from_word(words[slot::SIZE]),
        color: Color::from_word(words[slot::COLOR]),
        shape: Shape::from_word(words[slot::SHAPE]),
        position: Position::from_word(words[slot::POSITION]),
        background: Background::from_word(words[slot::BACKGROUND]),
        well_formed: fixed.iter().all(|&(i, w)| words[i] == w),
    }
}

/// Whether pixel `(x, y)` lies inside the shape.
fn inside(shape: Shape, size: Size, position: Position, x: usize, y: usize) -> bool {
    let (cx, cy) = position.center();
    let r = size.radius();
    let dx = x as f64 + 0.5 - cx;
    let dy = y as f64 + 0.5 - cy;
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
    }
}

fn template(shape: Shape, size: Size, position: Position) -> Vec<bool> {
    let mut m = vec![false; IMAGE_HW * IMAGE_HW];
    for y in 0..IMAGE_HW {
        for x in 0..IMAGE_HW {
            m[y * IMAGE_HW + x] = inside(shape, size, position, x, y);
        }
    }
    m
}

/// Rasterizes a scene to a `(3, 32, 32)` tensor.
pub fn render(spec: &SceneSpec) -> Array3<f32> {
    let bg = spec.background.level() as f32;
    let rgb = spec.color.rgb();
    let mut img = Array3::from_elem((CHANNELS, IMAGE_HW, IMAGE_HW), bg);
    for y in 0..IMAGE_HW {
        for x in 0..IMAGE_HW {
            if inside(spec.shape, spec.size, spec.position, x, y) {
                for c in 0..CHANNELS {
                    img[[c, y, x]] = rgb[c] as f32;
                }
            }
        }
    }
    img
}

/// A recovered attribute with the oracle's confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attr<T> {
    pub value: T,
    pub confidence: f64,
}

impl<T> Attr<T> {
    pub fn confident(&self) -> bool {
        self.confidence >= CONFIDENCE_THRESHOLD
    }
}

/// Oracle output: a best guess per attribute, each with a confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub shape: Attr<Shape>,
    pub color: Attr<Color>,
    pub size: Attr<Size>,
    pub position: Attr<Position>,
    pub background: Attr<Background>,
}

impl Classification {
    pub fn spec(&self) -> SceneSpec {
        SceneSpec {
            shape: self.shape.value,
            color: self.color.value,
            size: self.size.value,
            position: self.position.value,
            background: self.background.value,
        }
    }

    pub fn confidences(&self) -> [f64; 5] {
        [
            self.shape.confidence,
            self.color.confidence,
            self.size.confidence,
            self.position.confidence,
            self.background.confidence,
        ]
    }

    /// Fields below [`CONFIDENCE_THRESHOLD`].
    pub fn flagged(&self) -> Vec<&'static str> {
        let names = ["shape", "color", "size", "position", "background"];
        names
            .iter()
            .zip(self.confidences())
            .filter(|(_, c)| *c < CONFIDENCE_THRESHOLD)
            .map(|(n, _)| *n)
            .collect()
    }
}

/// Rule-based attribute recovery. Exact on clean renders.
///
/// Background comes from the border statistics, the foreground mask from
/// per-pixel deviation against that background, shape/size/position from the
/// best-overlapping template among the 30 closed-set templates, and colour
/// from the mean foreground pixel.
pub fn oracle_classify(image: &Array3<f32>) -> Result<Classification> {
    if image.dim() != (CHANNELS, IMAGE_HW, IMAGE_HW) {
        return Err(Error::Shape(format!(
            "oracle expects (3, 32, 32), got {:?}",
            image.dim()
        )));
    }
    let n = IMAGE_HW;
    let mut border = Vec::with_capacity(CHANNELS * 4 * n);
    for c in 0..CHANNELS {
        for i in 0..n {
            border.push(image[[c, 0, i]] as f64);
            border.push(image[[c, n - 1, i]] as f64);
            if i > 0 && i < n - 1 {
                border.push(image[[c, i, 0]] as f64);
                border.push(image[[c, i, n - 1]] as f64);
            }
        }
    }
    let mean = border.iter().sum::<f64>() / border.len() as f64;
    let std = (border.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / border.len() as f64).sqrt();
    let background = *Background::ALL
        .iter()
        .min_by(|a, b| {
            (mean - a.level())
                .abs()
                .total_cmp(&(mean - b.level()).abs())
        })
        .expect("nonempty");
    let bg_conf = (1.0 - ((mean - background.level()).abs() + std) / 0.5).clamp(0.0, 1.0);

    let level = background.level();
    let mut mask = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let dev = (0..CHANNELS)
                .map(|c| (image[[c, y, x]] as f64 - level).abs())
                .fold(0.0, f64::max);
            mask[y * n + x] = dev > 0.75;
        }
    }

    let mut scored = Vec::with_capacity(30);
    for &shape in Shape::ALL {
        for &size in Size::ALL {
            for &position in Position::ALL {
                let t = template(shape, size, position);
                let (mut inter, mut uni) = (0usize, 0usize);
                for (a, b) in t.iter().zip(&mask) {
                    inter += (*a && *b) as usize;
                    uni += (*a || *b) as usize;
                }
                let iou = if uni == 0 { 0.0 } else { inter as f64 / uni as f64 };
                scored.push((iou, shape, size, position));
            }
        }
    }
    let best = *scored
        .iter()
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .expect("30 templates");
    let conf_for = |differs: &dyn Fn(&(f64, Shape, Size, Position)) -> bool| {
        let rival = scored
            .iter()
            .filter(|s| differs(s))
            .map(|s| s.0)
            .fold(0.0, f64::max);
        let margin = best.0 - rival;
        best.0 * (margin / 0.05).min(1.0)
    };
    let shape_conf = conf_for(&|s| s.1 != best.1);
    let size_conf = conf_for(&|s| s.2 != best.2);
    let pos_conf = conf_for(&|s| s.3 != best.3);

    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for y in 0..n {
        for x in 0..n {
            if mask[y * n + x] {
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += image[[c, y, x]] as f64;
                }
                count += 1;
            }
        }
    }
    let (color, color_conf) = if count == 0 {
        (Color::Red, 0.0)
    } else {
        let m = sum.map(|s| s / count as f64);
        let (dist, color) = Color::ALL
            .iter()
            .map(|&c| {
                let p = c.rgb();
                let d = ((m[0] - p[0]).powi(2) + (m[1] - p[1]).powi(2) + (m[2] - p[2]).powi(2)).sqrt();
                (d, c)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("four colours");
        (color, (1.0 - dist).clamp(0.0, 1.0))
    };

    Ok(Classification {
        shape: Attr {
            value: best.1,
            confidence: shape_conf,
        },
        color: Attr {
            value: color,
            confidence: color_conf,
        },
        size: Attr {
            value: best.2,
            confidence: size_conf,
        },
        position: Attr {
            value: best.3,
            confidence: pos_conf,
        },
        background: Attr {
            value: background,
            confidence: bg_conf,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: Array3<f32>,
    pub caption: String,
    pub spec: SceneSpec,
}

impl SynthSample {
    pub fn from_spec(spec: SceneSpec) -> Self {
        Self {
            image: render(&spec),
            caption: caption_grammar(&spec),
            spec,
        }
    }
}

/// Scene for dataset index `index`: a pure function of `(seed, index)`.
pub fn spec_at(seed: u64, index: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    SceneSpec::random(&mut rng)
}

/// `n` i.i.d. uniform scenes.
pub fn make_dataset(n: usize, seed: u64) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::Data("dataset size must be positive".into()));
    }
    Ok((0..n as u64)
        .map(|i| SynthSample::from_spec(spec_at(seed, i)))
        .collect())
}

/// Every grammar caption, one per scene.
pub fn all_captions() -> Vec<String> {
    SceneSpec::enumerate().iter().map(caption_grammar).collect()
}

/// Writes `{split}.images.f32` (raw little-endian f32, CHW per image) and
/// `{split}.tsv` (`index, caption, shape, color, size, position, background`).
pub fn export_split(dir: &Path, split: &str, samples: &[SynthSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut img = BufWriter::new(File::create(dir.join(format!("{split}.images.f32")))?);
    let mut tsv = BufWriter::new(File::create(dir.join(format!("{split}.tsv")))?);
    writeln!(tsv, "index\tcaption\tshape\tcolor\tsize\tposition\tbackground")?;
    for (i, s) in samples.iter().enumerate() {
        for &v in s.image.iter() {
            img.write_f32::<LittleEndian>(v)?;
        }
        writeln!(
            tsv,
            "{i}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.caption, s.spec.shape, s.spec.color, s.spec.size, s.spec.position, s.spec.background
        )?;
    }
    img.flush()?;
    tsv.flush()?;
    Ok(())
}

/// Reads a split written by [`export_split`].
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<SynthSample>> {
    let tsv = BufReader::new(File::open(dir.join(format!("{split}.tsv")))?);
    let mut img = BufReader::new(File::open(dir.join(format!("{split}.images.f32")))?);
    let mut out = Vec::new();
    for (lineno, line) in tsv.lines().enumerate().skip(1) {
        let line = line?;
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Data(format!("{split}.tsv line {}: malformed record", lineno + 1));
        if f.len() != 7 {
            return Err(bad());
        }
        let spec = SceneSpec {
            shape: Shape::from_word(f[2]).ok_or_else(bad)?,
            color: Color::from_word(f[3]).ok_or_else(bad)?,
            size: Size::from_word(f[4]).ok_or_else(bad)?,
            position: Position::from_word(f[5]).ok_or_else(bad)?,
            background: Background::from_word(f[6]).ok_or_else(bad)?,
        };
        let mut image = Array3::<f32>::zeros((CHANNELS, IMAGE_HW, IMAGE_HW));
        for v in image.iter_mut() {
            *v = img.read_f32::<LittleEndian>()?;
        }
        out.push(SynthSample {
            image,
            caption: f[1].to_string(),
            spec,
        });
    }
    let mut rest = Vec::new();
    img.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Data(format!(
            "{split}.images.f32 has {} trailing bytes",
            rest.len()
        )));
    }
    Ok(out)
}
