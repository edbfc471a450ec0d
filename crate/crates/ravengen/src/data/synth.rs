//! Procedural mini-RPM generator: simple anti-aliased primitives on a
//! 3x3 virtual sub-grid, rules with known ground truth, distractors that
//! change the rule-governed attribute of the true answer to a lawless
//! value. When the attribute domain has fewer than seven wrong values,
//! repeated values re-sample the distracting placement so all sixteen
//! panels stay distinct.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::path::Path;

use super::{
    meta_vector, Attribute, Image, ObjectKind, ProblemSource, RPMProblem, Relation, RuleSpec,
};
use crate::error::{Error, Result};
use crate::nets::RES;

pub const SHAPE_TYPES: usize = 4; // circle, triangle, square, diamond
pub const COLOR_LEVELS: usize = 5;
pub const SIZE_LEVELS: usize = 4;
pub const MAX_COUNT: usize = 5; // number attribute covers counts 1..=5
pub const POSITIONS: usize = 9; // 3x3 sub-grid
pub const LINE_TYPES: usize = 4; // horizontal, vertical, two diagonals

pub(crate) fn domain_size(object: ObjectKind, attribute: Attribute) -> usize {
    match (object, attribute) {
        (_, Attribute::Type) => {
            if object == ObjectKind::Shape {
                SHAPE_TYPES
            } else {
                LINE_TYPES
            }
        }
        (_, Attribute::Color) => COLOR_LEVELS,
        (ObjectKind::Shape, Attribute::Size) => SIZE_LEVELS,
        (ObjectKind::Shape, Attribute::Number) => MAX_COUNT,
        (ObjectKind::Shape, Attribute::Position) => POSITIONS,
        (ObjectKind::Line, _) => 0,
    }
}

/// One shape inside a panel. All shapes of a panel share type, color and
/// size in this generator; positions index the 3x3 sub-grid.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct ShapeSpec {
    pub shape_type: u8,
    pub color: u8,
    pub size: u8,
    pub position: u8,
}

/// One full-panel line.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct LineSpec {
    pub line_type: u8,
    pub color: u8,
}

/// Symbolic description of a panel; the renderer and the rule checker
/// both work from this, never from pixels.
#[derive(Clone, PartialEq, Eq, Debug, Hash, Default)]
pub struct CellScene {
    pub shapes: Vec<ShapeSpec>,
    pub lines: Vec<LineSpec>,
}

/// A generated problem together with the scene descriptions behind it,
/// so rule checkers can operate symbolically.
#[derive(Clone, Debug)]
pub struct GeneratedProblem {
    pub problem: RPMProblem,
    /// Scenes of the full 3x3 grid; `grid[2][2]` is the true answer.
    pub grid: Vec<Vec<CellScene>>,
    /// Scenes of the eight choice panels, aligned with `problem.choices`.
    pub choice_scenes: Vec<CellScene>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn spec_fingerprint(spec: &RuleSpec) -> u64 {
    let mut h = 0u64;
    for b in spec.to_string().bytes() {
        h = splitmix64(h ^ b as u64);
    }
    h
}

/// Lawful attribute-value matrix for the 3x3 grid. Constant rules repeat
/// one value; progressions step by +1 along every row with columns
/// constant; unions arrange three distinct values as a latin square.
fn value_matrix(relation: Relation, domain: usize, rng: &mut ChaCha12Rng) -> Vec<Vec<u8>> {
    match relation {
        Relation::Constant => {
            let v = rng.random_range(0..domain) as u8;
            vec![vec![v; 3]; 3]
        }
        Relation::Progression => {
            let v0 = rng.random_range(0..domain - 2) as u8;
            vec![vec![v0, v0 + 1, v0 + 2]; 3]
        }
        Relation::Union => {
            let mut values: Vec<u8> = (0..domain as u8).collect();
            values.shuffle(rng);
            let set = [values[0], values[1], values[2]];
            let mut offsets = [0usize, 1, 2];
            offsets.shuffle(rng);
            (0..3)
                .map(|i| (0..3).map(|j| set[(offsets[i] + j) % 3]).collect())
                .collect()
        }
    }
}

fn sample_positions(count: usize, rng: &mut ChaCha12Rng) -> Vec<u8> {
    let mut all: Vec<u8> = (0..POSITIONS as u8).collect();
    all.shuffle(rng);
    let mut pos: Vec<u8> = all.into_iter().take(count).collect();
    pos.sort_unstable();
    pos
}

fn build_shape_cell(
    attribute: Attribute,
    value: u8,
    rng: &mut ChaCha12Rng,
) -> CellScene {
    let shape_type = rng.random_range(0..SHAPE_TYPES) as u8;
    let color = rng.random_range(0..COLOR_LEVELS) as u8;
    let size = rng.random_range(0..SIZE_LEVELS) as u8;
    let (shape_type, color, size) = match attribute {
        Attribute::Type => (value, color, size),
        Attribute::Color => (shape_type, value, size),
        Attribute::Size => (shape_type, color, value),
        _ => (shape_type, color, size),
    };
    let positions = match attribute {
        Attribute::Number => sample_positions(value as usize + 1, rng),
        Attribute::Position => vec![value],
        _ => sample_positions(rng.random_range(1..=3), rng),
    };
    CellScene {
        shapes: positions
            .into_iter()
            .map(|position| ShapeSpec {
                shape_type,
                color,
                size,
                position,
            })
            .collect(),
        lines: vec![],
    }
}

fn build_line_cell(attribute: Attribute, value: u8, rng: &mut ChaCha12Rng) -> CellScene {
    let line_type = rng.random_range(0..LINE_TYPES) as u8;
    let color = rng.random_range(0..COLOR_LEVELS) as u8;
    let (line_type, color) = match attribute {
        Attribute::Type => (value, color),
        Attribute::Color => (line_type, value),
        _ => (line_type, color),
    };
    CellScene {
        shapes: vec![],
        lines: vec![LineSpec { line_type, color }],
    }
}

fn build_cell(spec: &RuleSpec, value: u8, rng: &mut ChaCha12Rng) -> CellScene {
    match spec.object {
        ObjectKind::Shape => build_shape_cell(spec.attribute, value, rng),
        ObjectKind::Line => build_line_cell(spec.attribute, value, rng),
    }
}

/// Rewrites the rule-governed attribute of a copied scene to `value`.
fn perturb_rule_attribute(
    scene: &CellScene,
    spec: &RuleSpec,
    value: u8,
    rng: &mut ChaCha12Rng,
) -> CellScene {
    let mut out = scene.clone();
    match (spec.object, spec.attribute) {
        (ObjectKind::Shape, Attribute::Type) => {
            for s in &mut out.shapes {
                s.shape_type = value;
            }
        }
        (ObjectKind::Shape, Attribute::Color) => {
            for s in &mut out.shapes {
                s.color = value;
            }
        }
        (ObjectKind::Shape, Attribute::Size) => {
            for s in &mut out.shapes {
                s.size = value;
            }
        }
        (ObjectKind::Shape, Attribute::Number) => {
            let proto = out.shapes[0];
            out.shapes = sample_positions(value as usize + 1, rng)
                .into_iter()
                .map(|position| ShapeSpec { position, ..proto })
                .collect();
        }
        (ObjectKind::Shape, Attribute::Position) => {
            for s in &mut out.shapes {
                s.position = value;
            }
        }
        (ObjectKind::Line, Attribute::Type) => {
            for l in &mut out.lines {
                l.line_type = value;
            }
        }
        (ObjectKind::Line, Attribute::Color) => {
            for l in &mut out.lines {
                l.color = value;
            }
        }
        _ => unreachable!("validated rule spec"),
    }
    out
}

/// Mutates a non-rule attribute so a repeated wrong value still yields a
/// distinct panel. Never touches the rule-governed attribute.
fn diversify_distracting(scene: &mut CellScene, spec: &RuleSpec, rng: &mut ChaCha12Rng) {
    match (spec.object, spec.attribute) {
        (ObjectKind::Shape, Attribute::Number) | (ObjectKind::Shape, Attribute::Type)
        | (ObjectKind::Shape, Attribute::Color) | (ObjectKind::Shape, Attribute::Size) => {
            let positions = sample_positions(scene.shapes.len(), rng);
            for (s, p) in scene.shapes.iter_mut().zip(positions) {
                s.position = p;
            }
        }
        (ObjectKind::Shape, Attribute::Position) => {
            let c = rng.random_range(0..COLOR_LEVELS) as u8;
            for s in &mut scene.shapes {
                s.color = c;
            }
        }
        (ObjectKind::Line, Attribute::Type) => {
            let c = rng.random_range(0..COLOR_LEVELS) as u8;
            for l in &mut scene.lines {
                l.color = c;
            }
        }
        (ObjectKind::Line, _) => {
            let t = rng.random_range(0..LINE_TYPES) as u8;
            for l in &mut scene.lines {
                l.line_type = t;
            }
        }
    }
}

/// Generates one problem. Pure in `(spec, seed)`: the same arguments
/// always produce bit-identical panels.
pub fn generate_problem(spec: &RuleSpec, distractor_count: usize, seed: u64) -> Result<GeneratedProblem> {
    spec.validate()?;
    if distractor_count != 7 {
        return Err(Error::config(format!(
            "the grid format fixes distractor_count at 7, got {distractor_count}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(seed ^ spec_fingerprint(spec)));
    let domain = domain_size(spec.object, spec.attribute);
    let values = value_matrix(spec.relation, domain, &mut rng);

    let grid: Vec<Vec<CellScene>> = (0..3)
        .map(|i| {
            (0..3)
                .map(|j| build_cell(spec, values[i][j], &mut rng))
                .collect()
        })
        .collect();

    let answer_value = values[2][2];
    let target_scene = grid[2][2].clone();

    // Wrong values for the rule attribute, cycled when the domain is
    // smaller than seven; repeated values get a fresh distracting
    // presentation so the panels stay distinct.
    let mut wrong: Vec<u8> = (0..domain as u8).filter(|v| *v != answer_value).collect();
    wrong.shuffle(&mut rng);
    let mut distractor_scenes = Vec::with_capacity(7);
    let mut seen = std::collections::HashSet::new();
    seen.insert(target_scene.clone());
    for k in 0..7 {
        let value = wrong[k % wrong.len()];
        let mut scene = perturb_rule_attribute(&target_scene, spec, value, &mut rng);
        let mut guard = 0;
        while seen.contains(&scene) {
            diversify_distracting(&mut scene, spec, &mut rng);
            guard += 1;
            if guard > 256 {
                return Err(Error::config(
                    "could not build seven distinct distractors; attribute domain too small",
                ));
            }
        }
        seen.insert(scene.clone());
        distractor_scenes.push(scene);
    }

    let target_index = rng.random_range(0..8);
    let mut choice_scenes = Vec::with_capacity(8);
    let mut d = distractor_scenes.into_iter();
    for i in 0..8 {
        if i == target_index {
            choice_scenes.push(target_scene.clone());
        } else {
            choice_scenes.push(d.next().expect("seven distractors"));
        }
    }

    let context: Vec<Image> = (0..8)
        .map(|p| render_scene(&grid[p / 3][p % 3]))
        .collect();
    let choices: Vec<Image> = choice_scenes.iter().map(render_scene).collect();
    let tags = vec![spec.tag()];
    let problem = RPMProblem::new(context, choices, target_index, meta_vector(&tags), tags)?;
    Ok(GeneratedProblem {
        problem,
        grid,
        choice_scenes,
    })
}

// ---- rendering ------------------------------------------------------

const SUBCELL: f32 = RES as f32 / 3.0;
const LINE_THICKNESS: f32 = 3.0;

fn color_level(level: u8) -> f32 {
    0.4 + 0.15 * level as f32
}

fn size_radius(level: u8) -> f32 {
    5.0 + 2.0 * level as f32
}

fn position_center(position: u8) -> (f32, f32) {
    let row = (position / 3) as f32;
    let col = (position % 3) as f32;
    ((col + 0.5) * SUBCELL, (row + 0.5) * SUBCELL)
}

fn paint_bbox(
    img: &mut Image,
    cx: f32,
    cy: f32,
    r: f32,
    color: f32,
    coverage: impl Fn(f32, f32) -> f32,
) {
    let y0 = (cy - r - 1.5).floor().max(0.0) as usize;
    let y1 = ((cy + r + 1.5).ceil() as usize).min(img.h);
    let x0 = (cx - r - 1.5).floor().max(0.0) as usize;
    let x1 = ((cx + r + 1.5).ceil() as usize).min(img.w);
    for y in y0..y1 {
        for x in x0..x1 {
            let cov = coverage(x as f32 + 0.5, y as f32 + 0.5).clamp(0.0, 1.0);
            if cov > 0.0 {
                img.set_max(y, x, cov * color);
            }
        }
    }
}

fn draw_shape(img: &mut Image, shape: &ShapeSpec) {
    let (cx, cy) = position_center(shape.position);
    let r = size_radius(shape.size);
    let color = color_level(shape.color);
    match shape.shape_type {
        0 => paint_bbox(img, cx, cy, r, color, |px, py| {
            r + 0.5 - ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
        }),
        1 => {
            // Upward triangle inscribed in the radius-r circle.
            let s = r * 0.866_025_4;
            let top = (cx, cy - r);
            let left = (cx - s, cy + r * 0.5);
            let right = (cx + s, cy + r * 0.5);
            let edges = [(top, right), (right, left), (left, top)];
            paint_bbox(img, cx, cy, r, color, move |px, py| {
                let mut d = f32::INFINITY;
                for ((ax, ay), (bx, by)) in edges {
                    let (ex, ey) = (bx - ax, by - ay);
                    let len = (ex * ex + ey * ey).sqrt();
                    // Inside is to the left of each directed edge.
                    let cross = (ex * (py - ay) - ey * (px - ax)) / len;
                    d = d.min(cross);
                }
                d + 0.5
            })
        }
        2 => paint_bbox(img, cx, cy, r, color, |px, py| {
            let dx = (px - cx).abs();
            let dy = (py - cy).abs();
            r + 0.5 - dx.max(dy)
        }),
        _ => paint_bbox(img, cx, cy, r, color, |px, py| {
            let d = (px - cx).abs() + (py - cy).abs();
            (r - d) * std::f32::consts::FRAC_1_SQRT_2 + 0.5
        }),
    }
}

fn draw_line(img: &mut Image, line: &LineSpec) {
    let color = color_level(line.color);
    let half = LINE_THICKNESS * 0.5;
    let mid = RES as f32 * 0.5;
    for y in 0..img.h {
        for x in 0..img.w {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let dist = match line.line_type {
                0 => (py - mid).abs(),
                1 => (px - mid).abs(),
                2 => (py - px).abs() * std::f32::consts::FRAC_1_SQRT_2,
                _ => (py + px - RES as f32).abs() * std::f32::consts::FRAC_1_SQRT_2,
            };
            let cov = (half - dist + 0.5).clamp(0.0, 1.0);
            if cov > 0.0 {
                img.set_max(y, x, cov * color);
            }
        }
    }
}

/// Renders a scene onto a black RES x RES panel, brightness composited
/// with max so overlaps stay in [0,1].
pub fn render_scene(scene: &CellScene) -> Image {
    let mut img = Image::zeros(RES, RES);
    for line in &scene.lines {
        draw_line(&mut img, line);
    }
    for shape in &scene.shapes {
        draw_shape(&mut img, shape);
    }
    img
}

// ---- dataset --------------------------------------------------------

/// A virtual dataset: problems are generated on demand, deterministically
/// in `(rules, seed, index)`. Index `i` uses rule `i % rules.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub specs: Vec<RuleSpec>,
    pub count: usize,
    pub seed: u64,
}

impl SynthDataset {
    pub fn new(specs: Vec<RuleSpec>, count: usize, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::config("synthetic dataset needs at least one rule"));
        }
        for s in &specs {
            s.validate()?;
        }
        Ok(Self { specs, count, seed })
    }

    pub fn generated(&self, index: usize) -> Result<GeneratedProblem> {
        let spec = &self.specs[index % self.specs.len()];
        generate_problem(spec, 7, splitmix64(self.seed) ^ splitmix64(index as u64 + 1))
    }

    /// Key=value manifest describing the dataset.
    pub fn to_manifest(&self) -> String {
        let rules: Vec<String> = self.specs.iter().map(|s| s.to_string()).collect();
        format!(
            "format = ravengen-synth-v1\ncount = {}\nseed = {}\nrules = {}\n",
            self.count,
            self.seed,
            rules.join(", ")
        )
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut count = None;
        let mut seed = None;
        let mut rules = None;
        let mut format_ok = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("manifest line {} is not key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "format" => {
                    if value != "ravengen-synth-v1" {
                        return Err(Error::config(format!("unknown manifest format {value:?}")));
                    }
                    format_ok = true;
                }
                "count" => {
                    count = Some(value.parse::<usize>().map_err(|e| {
                        Error::config(format!("bad count {value:?}: {e}"))
                    })?)
                }
                "seed" => {
                    seed = Some(value.parse::<u64>().map_err(|e| {
                        Error::config(format!("bad seed {value:?}: {e}"))
                    })?)
                }
                "rules" => {
                    rules = Some(
                        value
                            .split(',')
                            .map(|r| r.trim().parse::<RuleSpec>())
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                k => return Err(Error::config(format!("unknown manifest key {k:?}"))),
            }
        }
        if !format_ok {
            return Err(Error::config("manifest missing format key"));
        }
        Self::new(
            rules.ok_or_else(|| Error::config("manifest missing rules"))?,
            count.ok_or_else(|| Error::config("manifest missing count"))?,
            seed.ok_or_else(|| Error::config("manifest missing seed"))?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_manifest())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_manifest(&std::fs::read_to_string(path)?)
    }
}

impl ProblemSource for SynthDataset {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<RPMProblem> {
        Ok(self.generated(index)?.problem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(s: &str) -> RuleSpec {
        s.parse().unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec("shape.number.progression");
        let a = generate_problem(&s, 7, 42).unwrap();
        let b = generate_problem(&s, 7, 42).unwrap();
        for (x, y) in a.problem.context.iter().zip(&b.problem.context) {
            assert_eq!(x.data, y.data);
        }
        for (x, y) in a.problem.choices.iter().zip(&b.problem.choices) {
            assert_eq!(x.data, y.data);
        }
        assert_eq!(a.problem.target_index, b.problem.target_index);

        let c = generate_problem(&s, 7, 43).unwrap();
        assert_ne!(
            a.problem.context[0].data, c.problem.context[0].data,
            "different seeds should differ"
        );
    }

    #[test]
    fn constant_number_rule_keeps_counts() {
        let s = spec("shape.number.constant");
        let g = generate_problem(&s, 7, 5).unwrap();
        let count = g.grid[0][0].shapes.len();
        for row in &g.grid {
            for cell in row {
                assert_eq!(cell.shapes.len(), count);
            }
        }
    }

    #[test]
    fn distractors_differ_from_target() {
        for seed in 0..20 {
            let g = generate_problem(&spec("shape.number.progression"), 7, seed).unwrap();
            let target = &g.choice_scenes[g.problem.target_index];
            let mut distinct = std::collections::HashSet::new();
            for (i, scene) in g.choice_scenes.iter().enumerate() {
                assert!(distinct.insert(scene.clone()), "choices must be distinct");
                if i != g.problem.target_index {
                    assert_ne!(
                        scene.shapes.len(),
                        target.shapes.len(),
                        "number-rule distractor must change the count"
                    );
                }
            }
        }
    }

    #[test]
    fn distractor_count_must_be_seven() {
        assert!(generate_problem(&spec("shape.number.constant"), 6, 0).is_err());
    }

    #[test]
    fn rendering_stays_in_range_and_draws_something() {
        for kind in ["shape.type.union", "line.type.constant", "line.color.union"] {
            let g = generate_problem(&spec(kind), 7, 11).unwrap();
            for img in g.problem.context.iter().chain(g.problem.choices.iter()) {
                assert!(img.data.iter().all(|p| (0.0..=1.0).contains(p)));
                assert!(img.data.iter().any(|p| *p > 0.2), "panel should be non-empty");
            }
        }
    }

    #[test]
    fn dataset_manifest_round_trip() {
        let ds = SynthDataset::new(
            vec![spec("shape.number.constant"), spec("line.type.union")],
            128,
            9,
        )
        .unwrap();
        let text = ds.to_manifest();
        let back = SynthDataset::from_manifest(&text).unwrap();
        assert_eq!(ds, back);

        assert!(SynthDataset::from_manifest("count = 3\n").is_err());
        assert!(SynthDataset::from_manifest("format = ravengen-synth-v1\nbogus = 1\n").is_err());
    }

    #[test]
    fn dataset_problems_vary_and_are_pure() {
        let ds = SynthDataset::new(vec![spec("shape.number.constant")], 16, 3).unwrap();
        let a = ds.get(0).unwrap();
        let b = ds.get(1).unwrap();
        let a2 = ds.get(0).unwrap();
        assert_eq!(a.context[0].data, a2.context[0].data);
        assert_ne!(a.context[0].data, b.context[0].data);
    }
}
