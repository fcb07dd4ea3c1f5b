//! Seeded generation of the three training mask families: random
//! rectangles, free-form brush strokes, and cellular-automata blobs.
//!
//! Every generator is a pure function of its [`MaskSpec`]; the same spec
//! (including seed) always produces a bit-identical mask. Families with
//! hole-fraction bounds resample with a derived sub-seed until the fraction
//! lands inside the bounds, up to a fixed retry budget.

use crate::error::{Error, Result};
use crate::image::MaskTensor;
use crate::rng::Rng;

pub const RETRY_BUDGET: usize = 100;

/// Reference size for the pixel-unit defaults below; other sizes scale
/// brush widths and segment lengths proportionally.
const REFERENCE_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct RectParams {
    /// Lower/upper bound on the side length as a fraction of each dimension.
    pub lo: f64,
    pub hi: f64,
}

impl Default for RectParams {
    fn default() -> Self {
        RectParams { lo: 0.3, hi: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreeformParams {
    pub strokes: (usize, usize),
    pub vertices: (usize, usize),
    /// Brush diameter in pixels (at the mask's own scale).
    pub brush_width: (usize, usize),
    pub max_angle_step: f64,
    /// Segment length range in pixels.
    pub segment_len: (f64, f64),
    pub bounds: Option<(f64, f64)>,
}

impl FreeformParams {
    /// Defaults tuned at 256x256 (strokes 1-8, vertices 4-12, width 12-40),
    /// with pixel units scaled for other sizes.
    pub fn for_size(h: usize, w: usize) -> Self {
        let s = h.min(w) as f64 / REFERENCE_SIZE as f64;
        let px = |v: f64| (v * s).round().max(1.0);
        FreeformParams {
            strokes: (1, 8),
            vertices: (4, 12),
            brush_width: (px(12.0) as usize, px(40.0) as usize),
            max_angle_step: std::f64::consts::FRAC_PI_2,
            segment_len: (px(16.0), px(64.0)),
            bounds: Some((0.05, 0.5)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellularParams {
    pub init_density: f64,
    /// A cell turns on iff at least this many of its 3x3 neighborhood
    /// (self included, zero-padded border) are on.
    pub threshold: usize,
    pub iterations: usize,
    pub grid: usize,
    pub bounds: Option<(f64, f64)>,
}

impl CellularParams {
    pub fn for_size(h: usize, w: usize) -> Self {
        CellularParams {
            init_density: 0.5,
            threshold: 5,
            iterations: 4,
            grid: 64.min(h.min(w)),
            bounds: Some((0.1, 0.7)),
        }
    }
}

/// The rule identifier recorded in mask manifests.
pub const CELLULAR_RULE: &str = "moore-5/9-it4";

#[derive(Debug, Clone, PartialEq)]
pub enum MaskKind {
    Rect(RectParams),
    Freeform(FreeformParams),
    Cellular(CellularParams),
}

impl MaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            MaskKind::Rect(_) => "rect",
            MaskKind::Freeform(_) => "freeform",
            MaskKind::Cellular(_) => "cellular",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            MaskKind::Rect(_) => 1,
            MaskKind::Freeform(_) => 2,
            MaskKind::Cellular(_) => 3,
        }
    }

    /// Kind with size-scaled default parameters.
    pub fn default_for(name: &str, h: usize, w: usize) -> Result<Self> {
        match name {
            "rect" => Ok(MaskKind::Rect(RectParams::default())),
            "freeform" => Ok(MaskKind::Freeform(FreeformParams::for_size(h, w))),
            "cellular" => Ok(MaskKind::Cellular(CellularParams::for_size(h, w))),
            other => Err(Error::InvalidArgument(format!(
                "unknown mask kind '{other}' (rect, freeform or cellular)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, height: usize, width: usize, seed: u64) -> Self {
        MaskSpec {
            kind,
            height,
            width,
            seed,
        }
    }

    fn rng(&self, attempt: usize) -> Rng {
        Rng::from_key(&[self.seed, self.kind.tag(), attempt as u64])
    }

    /// One-line parameter summary for manifests.
    pub fn describe(&self) -> String {
        match &self.kind {
            MaskKind::Rect(p) => format!("kind=rect lo={} hi={}", p.lo, p.hi),
            MaskKind::Freeform(p) => format!(
                "kind=freeform strokes={}-{} vertices={}-{} width={}-{} bounds={}",
                p.strokes.0,
                p.strokes.1,
                p.vertices.0,
                p.vertices.1,
                p.brush_width.0,
                p.brush_width.1,
                bounds_str(p.bounds),
            ),
            MaskKind::Cellular(p) => format!(
                "kind=cellular rule={CELLULAR_RULE} density={} grid={} bounds={}",
                p.init_density,
                p.grid,
                bounds_str(p.bounds),
            ),
        }
    }
}

fn bounds_str(b: Option<(f64, f64)>) -> String {
    match b {
        Some((lo, hi)) => format!("{lo}-{hi}"),
        None => "none".into(),
    }
}

/// Fraction of hole pixels in a mask.
pub fn hole_fraction(m: &MaskTensor) -> f64 {
    m.count_ones() as f64 / (m.height() * m.width()) as f64
}

/// Generate a mask of the spec's kind.
pub fn generate(spec: &MaskSpec) -> Result<MaskTensor> {
    match &spec.kind {
        MaskKind::Rect(_) => gen_rect(spec),
        MaskKind::Freeform(_) => gen_freeform(spec),
        MaskKind::Cellular(_) => gen_cellular(spec),
    }
}

/// Single axis-aligned rectangle with side lengths drawn uniformly from
/// `[lo*dim, hi*dim]` and position uniform among in-frame placements.
pub fn gen_rect(spec: &MaskSpec) -> Result<MaskTensor> {
    let MaskKind::Rect(p) = &spec.kind else {
        return Err(Error::InvalidArgument("gen_rect needs a rect spec".into()));
    };
    if !(0.0 < p.lo && p.lo <= p.hi && p.hi < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rect fractions must satisfy 0 < lo <= hi < 1, got {}..{}",
            p.lo, p.hi
        )));
    }
    let (h, w) = (spec.height, spec.width);
    let side = |dim: usize, rng: &mut Rng| -> Result<usize> {
        let lo = (p.lo * dim as f64).ceil() as usize;
        let hi = (p.hi * dim as f64).floor() as usize;
        if lo == 0 || lo > hi || hi > dim {
            return Err(Error::InvalidArgument(format!(
                "no rectangle side in [{}, {}] fits dimension {dim}",
                p.lo, p.hi
            )));
        }
        Ok(rng.range_usize(lo, hi))
    };
    let mut rng = spec.rng(0);
    let rect_h = side(h, &mut rng)?;
    let rect_w = side(w, &mut rng)?;
    let top = rng.range_usize(0, h - rect_h);
    let left = rng.range_usize(0, w - rect_w);
    let mut m = MaskTensor::new(h, w);
    for y in top..top + rect_h {
        for x in left..left + rect_w {
            m.set(y, x, 1);
        }
    }
    Ok(m)
}

fn stamp_disk(m: &mut MaskTensor, cy: f64, cx: f64, r: f64) {
    let (h, w) = (m.height() as isize, m.width() as isize);
    let y0 = ((cy - r).floor() as isize).max(0);
    let y1 = ((cy + r).ceil() as isize).min(h - 1);
    let x0 = ((cx - r).floor() as isize).max(0);
    let x1 = ((cx + r).ceil() as isize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= r * r {
                m.set(y as usize, x as usize, 1);
            }
        }
    }
}

fn stamp_segment(m: &mut MaskTensor, from: (f64, f64), to: (f64, f64), r: f64) {
    let dist = ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt();
    let steps = (dist / (r.max(1.0) * 0.25)).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        stamp_disk(
            m,
            from.0 + (to.0 - from.0) * t,
            from.1 + (to.1 - from.1) * t,
            r,
        );
    }
}

/// Union of random brush strokes: each stroke walks from a random start
/// point through angle-bounded segments, rasterized as thick lines with
/// disk caps.
pub fn gen_freeform(spec: &MaskSpec) -> Result<MaskTensor> {
    let MaskKind::Freeform(p) = &spec.kind else {
        return Err(Error::InvalidArgument(
            "gen_freeform needs a freeform spec".into(),
        ));
    };
    if p.brush_width.0 == 0 || p.vertices.0 == 0 || p.strokes.0 == 0 {
        return Err(Error::InvalidArgument(
            "freeform counts and widths must be positive".into(),
        ));
    }
    let (h, w) = (spec.height as f64, spec.width as f64);
    for attempt in 0..RETRY_BUDGET {
        let mut rng = spec.rng(attempt);
        let mut m = MaskTensor::new(spec.height, spec.width);
        let strokes = rng.range_usize(p.strokes.0, p.strokes.1);
        for _ in 0..strokes {
            let width = rng.range_usize(p.brush_width.0, p.brush_width.1);
            let r = (width / 2) as f64;
            let vertices = rng.range_usize(p.vertices.0, p.vertices.1);
            let mut y = rng.uniform_in(0.0, h);
            let mut x = rng.uniform_in(0.0, w);
            let mut angle = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
            stamp_disk(&mut m, y, x, r);
            for _ in 1..vertices {
                angle += rng.uniform_in(-p.max_angle_step, p.max_angle_step);
                let len = rng.uniform_in(p.segment_len.0, p.segment_len.1);
                let ny = (y + len * angle.sin()).clamp(-r, h - 1.0 + r);
                let nx = (x + len * angle.cos()).clamp(-r, w - 1.0 + r);
                stamp_segment(&mut m, (y, x), (ny, nx), r);
                y = ny;
                x = nx;
            }
        }
        match p.bounds {
            None => return Ok(m),
            Some((lo, hi)) => {
                let f = hole_fraction(&m);
                if f >= lo && f <= hi {
                    return Ok(m);
                }
            }
        }
    }
    let (lo, hi) = p.bounds.unwrap_or((0.0, 1.0));
    Err(Error::Generation(format!(
        "freeform mask could not reach hole fraction in [{lo}, {hi}] within {RETRY_BUDGET} attempts"
    )))
}

/// One smoothing step of the binary automaton: a cell turns on iff at least
/// `threshold` of the 9 samples in its 3x3 Moore neighborhood (self
/// included) are on. Border samples clamp to the nearest in-frame cell,
/// which keeps both the all-ones and the all-zeros grid exact fixed points.
fn cellular_step(grid: &[u8], g_h: usize, g_w: usize, threshold: usize, next: &mut [u8]) {
    for y in 0..g_h {
        for x in 0..g_w {
            let mut count = 0;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let ny = (y as i32 + dy).clamp(0, g_h as i32 - 1) as usize;
                    let nx = (x as i32 + dx).clamp(0, g_w as i32 - 1) as usize;
                    count += grid[ny * g_w + nx] as usize;
                }
            }
            next[y * g_w + x] = (count >= threshold) as u8;
        }
    }
}

/// Bernoulli-seeded coarse grid smoothed by a majority-style automaton and
/// nearest-neighbor resampled to the mask size.
pub fn gen_cellular(spec: &MaskSpec) -> Result<MaskTensor> {
    let MaskKind::Cellular(p) = &spec.kind else {
        return Err(Error::InvalidArgument(
            "gen_cellular needs a cellular spec".into(),
        ));
    };
    if p.grid == 0 || !(0.0..=1.0).contains(&p.init_density) {
        return Err(Error::InvalidArgument(
            "cellular grid must be positive and density within [0,1]".into(),
        ));
    }
    let g = p.grid;
    for attempt in 0..RETRY_BUDGET {
        let mut rng = spec.rng(attempt);
        let mut grid: Vec<u8> = (0..g * g)
            .map(|_| rng.bernoulli(p.init_density) as u8)
            .collect();
        let mut next = vec![0u8; g * g];
        for _ in 0..p.iterations {
            cellular_step(&grid, g, g, p.threshold, &mut next);
            std::mem::swap(&mut grid, &mut next);
        }
        let mut m = MaskTensor::new(spec.height, spec.width);
        for y in 0..spec.height {
            let gy = y * g / spec.height;
            for x in 0..spec.width {
                let gx = x * g / spec.width;
                m.set(y, x, grid[gy * g + gx]);
            }
        }
        match p.bounds {
            None => return Ok(m),
            Some((lo, hi)) => {
                let f = hole_fraction(&m);
                if f >= lo && f <= hi {
                    return Ok(m);
                }
            }
        }
    }
    let (lo, hi) = p.bounds.unwrap_or((0.0, 1.0));
    Err(Error::Generation(format!(
        "cellular mask could not reach hole fraction in [{lo}, {hi}] within {RETRY_BUDGET} attempts"
    )))
}
