//! Problem records, the procedural mini-RPM generator, and ingestion of
//! the public PGM-style record format.

mod pgm;
mod synth;

pub use pgm::{load_archive_index, load_record, write_archive, PgmArchive};
pub use synth::{
    generate_problem, render_scene, CellScene, GeneratedProblem, LineSpec, ShapeSpec,
    SynthDataset, COLOR_LEVELS, LINE_TYPES, MAX_COUNT, POSITIONS, SHAPE_TYPES, SIZE_LEVELS,
};

use candle_core::{Device, Tensor};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nets::{META_BITS, RES};

pub const NUM_CONTEXT: usize = 8;
pub const NUM_CHOICES: usize = 8;

/// A single grayscale panel with pixel values in [0,1].
#[derive(Clone, PartialEq, Debug)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    pub fn set_max(&mut self, y: usize, x: usize, v: f32) {
        let p = &mut self.data[y * self.w + x];
        if v > *p {
            *p = v;
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum ObjectKind {
    Shape,
    Line,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Attribute {
    Type,
    Color,
    Size,
    Number,
    Position,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Relation {
    Constant,
    Progression,
    Union,
}

/// `(object, attribute)` pair identifying which rule family a problem
/// exercises; used for the per-rule evaluation breakdown.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct RuleTag {
    pub object: ObjectKind,
    pub attribute: Attribute,
}

impl fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectKind::Shape => "shape",
            ObjectKind::Line => "line",
        })
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attribute::Type => "type",
            Attribute::Color => "color",
            Attribute::Size => "size",
            Attribute::Number => "number",
            Attribute::Position => "position",
        })
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Constant => "constant",
            Relation::Progression => "progression",
            Relation::Union => "union",
        })
    }
}

impl fmt::Display for RuleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.object, self.attribute)
    }
}

/// One grid rule: which attribute of which object kind follows which
/// row/column relation.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct RuleSpec {
    pub object: ObjectKind,
    pub attribute: Attribute,
    pub relation: Relation,
}

impl RuleSpec {
    pub fn tag(&self) -> RuleTag {
        RuleTag {
            object: self.object,
            attribute: self.attribute,
        }
    }

    /// Lines carry only type and color in the mini-generator.
    pub fn validate(&self) -> Result<()> {
        if self.object == ObjectKind::Line
            && !matches!(self.attribute, Attribute::Type | Attribute::Color)
        {
            return Err(Error::config(format!(
                "attribute {} is not legal for lines",
                self.attribute
            )));
        }
        if self.relation == Relation::Progression {
            // A three-step progression needs at least three ordered values.
            if synth::domain_size(self.object, self.attribute) < 3 {
                return Err(Error::config(format!(
                    "attribute {} has too few values for a progression",
                    self.attribute
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for RuleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.object, self.attribute, self.relation)
    }
}

impl FromStr for RuleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('.').collect();
        if parts.len() != 3 {
            return Err(Error::config(format!(
                "rule spec must be object.attribute.relation, got {s:?}"
            )));
        }
        let object = match parts[0] {
            "shape" => ObjectKind::Shape,
            "line" => ObjectKind::Line,
            o => return Err(Error::config(format!("unknown object kind {o:?}"))),
        };
        let attribute = match parts[1] {
            "type" => Attribute::Type,
            "color" => Attribute::Color,
            "size" => Attribute::Size,
            "number" => Attribute::Number,
            "position" => Attribute::Position,
            a => return Err(Error::config(format!("unknown attribute {a:?}"))),
        };
        let relation = match parts[2] {
            "constant" => Relation::Constant,
            "progression" => Relation::Progression,
            "union" => Relation::Union,
            r => return Err(Error::config(format!("unknown relation {r:?}"))),
        };
        let spec = RuleSpec {
            object,
            attribute,
            relation,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Slot of a `(object, attribute)` pair in the 12-bit meta vector.
/// Slots 0-4 cover the shape attributes, 5-6 the line attributes, the
/// remainder is zero padding.
pub fn meta_slot(tag: RuleTag) -> usize {
    match (tag.object, tag.attribute) {
        (ObjectKind::Shape, Attribute::Type) => 0,
        (ObjectKind::Shape, Attribute::Color) => 1,
        (ObjectKind::Shape, Attribute::Size) => 2,
        (ObjectKind::Shape, Attribute::Number) => 3,
        (ObjectKind::Shape, Attribute::Position) => 4,
        (ObjectKind::Line, Attribute::Type) => 5,
        (ObjectKind::Line, Attribute::Color) => 6,
        (ObjectKind::Line, _) => unreachable!("validated rule spec"),
    }
}

pub fn meta_vector(tags: &[RuleTag]) -> [u8; META_BITS] {
    let mut meta = [0u8; META_BITS];
    for tag in tags {
        meta[meta_slot(*tag)] = 1;
    }
    meta
}

/// One puzzle: eight context panels (grid positions 1..8, row-major,
/// position 9 missing), eight choice panels with exactly one correct.
#[derive(Clone, Debug)]
pub struct RPMProblem {
    pub context: Vec<Image>,
    pub choices: Vec<Image>,
    pub target_index: usize,
    pub meta: [u8; META_BITS],
    pub rule_tags: Vec<RuleTag>,
}

impl RPMProblem {
    pub fn new(
        context: Vec<Image>,
        choices: Vec<Image>,
        target_index: usize,
        meta: [u8; META_BITS],
        rule_tags: Vec<RuleTag>,
    ) -> Result<Self> {
        if context.len() != NUM_CONTEXT {
            return Err(Error::record(format!(
                "expected {NUM_CONTEXT} context images, got {}",
                context.len()
            )));
        }
        if choices.len() != NUM_CHOICES {
            return Err(Error::record(format!(
                "expected {NUM_CHOICES} choice images, got {}",
                choices.len()
            )));
        }
        if target_index >= NUM_CHOICES {
            return Err(Error::record(format!(
                "target index {target_index} outside [0,{}]",
                NUM_CHOICES - 1
            )));
        }
        let (h, w) = (context[0].h, context[0].w);
        for img in context.iter().chain(choices.iter()) {
            if img.h != h || img.w != w {
                return Err(Error::record("images must share identical dimensions"));
            }
        }
        if meta.iter().any(|b| *b > 1) {
            return Err(Error::record("meta entries must be 0 or 1"));
        }
        Ok(Self {
            context,
            choices,
            target_index,
            meta,
            rule_tags,
        })
    }

    pub fn target(&self) -> &Image {
        &self.choices[self.target_index]
    }
}

/// Splits a problem for the generation pathway: deep copies, so later
/// mutation of the problem's choices cannot reach the returned context.
pub fn split_for_generation(problem: &RPMProblem) -> (Vec<Image>, Vec<Image>, usize) {
    (
        problem.context.clone(),
        problem.choices.clone(),
        problem.target_index,
    )
}

/// Stacks images into an (N, 1, H, W) tensor.
pub fn images_to_tensor(images: &[Image], dev: &Device) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::shape("cannot build a tensor from zero images"));
    }
    let (h, w) = (images[0].h, images[0].w);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), dev)?)
}

/// A training batch of B problems, images stacked to tensors.
pub struct Batch {
    /// (B, 8, 1, RES, RES)
    pub context: Tensor,
    /// (B, 8, 1, RES, RES)
    pub choices: Tensor,
    pub target: Vec<usize>,
    /// (B, 12) float 0/1 targets
    pub meta: Tensor,
}

impl Batch {
    pub fn from_problems(problems: &[RPMProblem], dev: &Device) -> Result<Self> {
        let b = problems.len();
        if b == 0 {
            return Err(Error::shape("empty batch"));
        }
        let mut ctx = Vec::with_capacity(b * NUM_CONTEXT * RES * RES);
        let mut cho = Vec::with_capacity(b * NUM_CHOICES * RES * RES);
        let mut meta = Vec::with_capacity(b * META_BITS);
        let mut target = Vec::with_capacity(b);
        for p in problems {
            for img in &p.context {
                if img.h != RES || img.w != RES {
                    return Err(Error::shape(format!(
                        "batching expects {RES}x{RES} panels, got {}x{}",
                        img.h, img.w
                    )));
                }
                ctx.extend_from_slice(&img.data);
            }
            for img in &p.choices {
                cho.extend_from_slice(&img.data);
            }
            meta.extend(p.meta.iter().map(|b| *b as f32));
            target.push(p.target_index);
        }
        Ok(Self {
            context: Tensor::from_vec(ctx, (b, NUM_CONTEXT, 1, RES, RES), dev)?,
            choices: Tensor::from_vec(cho, (b, NUM_CHOICES, 1, RES, RES), dev)?,
            target,
            meta: Tensor::from_vec(meta, (b, META_BITS), dev)?,
        })
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

/// A source of problems indexable by position; generation and ingestion
/// are pure, so sources are safely shared across threads.
pub trait ProblemSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<RPMProblem>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_problem() -> RPMProblem {
        let img = Image::zeros(RES, RES);
        RPMProblem::new(
            vec![img.clone(); 8],
            vec![img; 8],
            3,
            [0; META_BITS],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn problem_invariants_enforced() {
        let img = Image::zeros(RES, RES);
        assert!(RPMProblem::new(vec![img.clone(); 7], vec![img.clone(); 8], 0, [0; 12], vec![]).is_err());
        assert!(RPMProblem::new(vec![img.clone(); 8], vec![img.clone(); 8], 8, [0; 12], vec![]).is_err());
        let mut bad_meta = [0u8; 12];
        bad_meta[0] = 2;
        assert!(RPMProblem::new(vec![img.clone(); 8], vec![img; 8], 0, bad_meta, vec![]).is_err());
    }

    #[test]
    fn split_has_no_aliasing() {
        let mut p = tiny_problem();
        let (ctx, _, idx) = split_for_generation(&p);
        assert_eq!(ctx.len(), 8);
        assert_eq!(idx, 3);
        p.choices[0].data[0] = 1.0;
        p.context[0].data[0] = 1.0;
        assert_eq!(ctx[0].data[0], 0.0);
        // Round trip: context and choices recombine to the original 16.
        let (ctx2, cho2, _) = split_for_generation(&p);
        assert_eq!(ctx2.len() + cho2.len(), 16);
    }

    #[test]
    fn rule_spec_parsing_and_validation() {
        let spec: RuleSpec = "shape.number.progression".parse().unwrap();
        assert_eq!(spec.object, ObjectKind::Shape);
        assert_eq!(spec.attribute, Attribute::Number);
        assert_eq!(spec.relation, Relation::Progression);
        assert_eq!(spec.to_string(), "shape.number.progression");

        assert!("line.size.constant".parse::<RuleSpec>().is_err());
        assert!("line.number.constant".parse::<RuleSpec>().is_err());
        assert!("blob.number.constant".parse::<RuleSpec>().is_err());
        assert!("line.type.constant".parse::<RuleSpec>().is_ok());
    }

    #[test]
    fn meta_vector_slots() {
        let tag = RuleTag {
            object: ObjectKind::Shape,
            attribute: Attribute::Number,
        };
        let meta = meta_vector(&[tag]);
        assert_eq!(meta[3], 1);
        assert_eq!(meta.iter().map(|v| *v as usize).sum::<usize>(), 1);
    }
}
