//! Command implementations behind the `deepgin` binary: mask generation,
//! training, tiled inference and evaluation. Each returns `Result<()>`;
//! the binary maps error kinds onto the stable exit codes
//! (0 success, 2 usage/input, 3 generation failure, 4 numerical failure).

use std::path::{Path, PathBuf};

use crate::config::{self};
use crate::data;
use crate::error::{Error, Result};
use crate::image::{self, ImageTensor, MaskTensor};
use crate::mask::{self, MaskKind, MaskSpec};
use crate::model::DeepGin;
use crate::nn::{EvalCtx, ParamStore};
use crate::train::{RunDriver, Stage, Trainer};

/// Exit code for an error, per the documented contract.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Generation(_) => 3,
        Error::NonFinite { .. } => 4,
        _ => 2,
    }
}

// ---------------------------------------------------------------------------
// maskgen
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MaskgenArgs {
    pub kind: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Override the kind's hole-fraction bounds (freeform/cellular).
    pub bounds: Option<(f64, f64)>,
}

/// Write `count` deterministic masks plus a sidecar manifest. Mask `i`
/// derives its seed from `(seed, i)`, so the whole corpus is reproducible
/// from the command line alone.
pub fn run_maskgen(args: &MaskgenArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut manifest = String::new();
    for i in 0..args.count {
        let mut kind = MaskKind::default_for(&args.kind, args.height, args.width)?;
        if let Some(bounds) = args.bounds {
            match &mut kind {
                MaskKind::Rect(_) => {
                    return Err(Error::InvalidArgument(
                        "--bounds applies to freeform/cellular masks".into(),
                    ))
                }
                MaskKind::Freeform(p) => p.bounds = Some(bounds),
                MaskKind::Cellular(p) => p.bounds = Some(bounds),
            }
        }
        let spec = MaskSpec::new(
            kind,
            args.height,
            args.width,
            crate::rng::derive_key(&[args.seed, i as u64]),
        );
        let m = mask::generate(&spec)?;
        let name = format!("{}-{:04}.png", args.kind, i);
        image::save_mask_png(&m, args.out.join(&name))?;
        manifest.push_str(&format!(
            "file={name} base_seed={} index={i} mask_seed={} fraction={:.6} {}\n",
            args.seed,
            spec.seed,
            mask::hole_fraction(&m),
            spec.describe(),
        ));
    }
    let manifest_path = args.out.join("manifest.txt");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelect {
    Warmup,
    Main,
    Both,
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub preset: String,
    pub config: Option<PathBuf>,
    pub set: Vec<(String, String)>,
    pub stage: StageSelect,
    pub resume: Option<PathBuf>,
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let settings = config::resolve(&args.preset, args.config.as_deref(), &args.set)?;
    let files = data::list_pngs(&args.data)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no PNG files under {}",
            args.data.display()
        )));
    }
    let images: Vec<ImageTensor> = files
        .iter()
        .map(image::load_png)
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let trainer = match &args.resume {
        Some(ckpt) => Trainer::load_checkpoint(ckpt, &settings)?,
        None => Trainer::new(settings)?,
    };
    let mut driver = RunDriver {
        trainer,
        out_dir: args.out.clone(),
    };
    let stages = match args.stage {
        StageSelect::Warmup => (true, false),
        StageSelect::Main => (false, true),
        StageSelect::Both => (true, true),
    };
    driver.run(&images, stages)
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct InferArgs {
    pub ckpt: PathBuf,
    pub inputs: Vec<PathBuf>,
    /// Directory of mask PNGs paired by filename; otherwise masks are
    /// generated from `mask_kind`/`mask_seed` at each input's size.
    pub masks: Option<PathBuf>,
    pub mask_kind: String,
    pub mask_seed: u64,
    pub out: PathBuf,
    pub raw: bool,
    pub coarse: bool,
    pub workers: usize,
}

/// Nearest-neighbor resize of a binary mask.
fn resize_mask_nearest(m: &MaskTensor, oh: usize, ow: usize) -> MaskTensor {
    let mut out = MaskTensor::new(oh, ow);
    for y in 0..oh {
        let sy = (y * m.height()) / oh;
        for x in 0..ow {
            let sx = (x * m.width()) / ow;
            out.set(y, x, m.get(sy, sx));
        }
    }
    out
}

struct TiledOutput {
    composite: ImageTensor,
    raw: ImageTensor,
    coarse: ImageTensor,
}

/// The large-image path: decompose into tiles by strided sub-sampling, run
/// the model per tile, regroup, and replace valid pixels from the input.
/// Inputs whose dims are not equal multiples of the tile size are resized
/// to the nearest square multiple and back.
fn infer_one(
    model: &DeepGin,
    params: &ParamStore,
    input: &ImageTensor,
    m: &MaskTensor,
) -> Result<TiledOutput> {
    if m.height() != input.height() || m.width() != input.width() {
        return Err(Error::InvalidArgument(format!(
            "mask {}x{} does not match image {}x{}",
            m.height(),
            m.width(),
            input.height(),
            input.width()
        )));
    }
    let tile = model.cfg.image_size;
    let (oh, ow) = (input.height(), input.width());
    let needs_resize = oh != ow || oh % tile != 0;
    let side = tile * oh.max(ow).div_ceil(tile);
    let (work_img, work_mask) = if needs_resize {
        (
            image::resize_bilinear(input, side, side)?,
            resize_mask_nearest(m, side, side),
        )
    } else {
        (input.clone(), m.clone())
    };
    let masked = data::masked_input(&work_img, &work_mask);
    let (in_tiles, layout) = data::tile_decompose(&masked, tile)?;
    let (mask_tiles, _) = data::tile_decompose_mask(&work_mask, tile)?;

    let mut ctx = EvalCtx::new();
    let binding = params.bind(&mut ctx, false);
    let mut out_tiles = Vec::with_capacity(in_tiles.len());
    let mut coarse_tiles = Vec::with_capacity(in_tiles.len());
    for (t_in, t_mask) in in_tiles.iter().zip(&mask_tiles) {
        let res = model.infer_bound(&mut ctx, &binding, t_in, t_mask, None)?;
        out_tiles.push(res.i_out);
        coarse_tiles.push(res.i_coarse);
    }
    let raw_full = data::tile_regroup(&out_tiles, &layout)?;
    let coarse_full = data::tile_regroup(&coarse_tiles, &layout)?;
    let (raw, coarse) = if needs_resize {
        (
            image::resize_bilinear(&raw_full, oh, ow)?,
            image::resize_bilinear(&coarse_full, oh, ow)?,
        )
    } else {
        (raw_full, coarse_full)
    };
    let composite = image::composite(&raw, input, m)?;
    Ok(TiledOutput {
        composite,
        raw,
        coarse,
    })
}

/// Deterministic order-preserving parallel map over indexed work items.
fn indexed_parallel<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut slots: Vec<Option<R>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots_mutex = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots_mutex.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.unwrap()).collect()
}

pub fn run_infer(args: &InferArgs) -> Result<()> {
    if args.inputs.is_empty() {
        return Err(Error::InvalidArgument("no input images given".into()));
    }
    let (settings, params) = crate::train::load_generator_params(&args.ckpt)?;
    let model = DeepGin::new(settings.model.clone())?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    // load everything up front so worker threads stay pure
    let mut jobs: Vec<(String, ImageTensor, MaskTensor)> = Vec::new();
    for (idx, path) in args.inputs.iter().enumerate() {
        let img = image::load_png(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("input{idx}"));
        let m = match &args.masks {
            Some(dir) => {
                let mask_path = dir.join(path.file_name().unwrap());
                image::load_mask_png(&mask_path)?
            }
            None => {
                let kind = MaskKind::default_for(&args.mask_kind, img.height(), img.width())?;
                let spec = MaskSpec::new(
                    kind,
                    img.height(),
                    img.width(),
                    crate::rng::derive_key(&[args.mask_seed, idx as u64]),
                );
                mask::generate(&spec)?
            }
        };
        jobs.push((name, img, m));
    }

    let results = indexed_parallel(&jobs, args.workers, |_, (name, img, m)| {
        infer_one(&model, &params, img, m).map(|out| (name.clone(), out))
    });
    for r in results {
        let (name, out) = r?;
        image::save_png(&out.composite, args.out.join(format!("{name}.png")))?;
        if args.raw {
            image::save_png(&out.raw, args.out.join(format!("{name}_raw.png")))?;
        }
        if args.coarse {
            image::save_png(&out.coarse, args.out.join(format!("{name}_coarse.png")))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub completed: PathBuf,
    pub gt: PathBuf,
    pub out: PathBuf,
    pub workers: usize,
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    let report = evaluate_parallel(&args.completed, &args.gt, args.workers)?;
    std::fs::write(&args.out, report.to_csv()).map_err(|e| Error::io(&args.out, e))?;
    print!("{report}");
    Ok(())
}

fn evaluate_parallel(
    completed: &Path,
    gt: &Path,
    workers: usize,
) -> Result<crate::metrics::EvalReport> {
    if workers <= 1 {
        return crate::metrics::evaluate_dataset(completed, gt);
    }
    let c_files = data::list_pngs(completed)?;
    // reuse the sequential path for pairing validation
    let probe = crate::metrics::evaluate_dataset(completed, gt);
    if probe.is_err() {
        return probe;
    }
    let rows = indexed_parallel(&c_files, workers, |_, path| -> Result<crate::metrics::EvalRow> {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let a = image::load_png(path)?;
        let b = image::load_png(gt.join(&name))?;
        Ok(crate::metrics::EvalRow {
            name,
            psnr: crate::metrics::psnr(&a, &b)?,
            ssim: crate::metrics::ssim(&a, &b)?,
            l1_pct: crate::metrics::mean_l1_pct(&a, &b)?,
        })
    });
    let rows: Result<Vec<_>> = rows.into_iter().collect();
    Ok(crate::metrics::EvalReport::from_rows(rows?, None))
}

/// Stage flag parser shared with the binary.
impl std::str::FromStr for StageSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(StageSelect::Warmup),
            "main" => Ok(StageSelect::Main),
            "both" => Ok(StageSelect::Both),
            other => Err(Error::InvalidArgument(format!(
                "stage '{other}' (warmup, main or both)"
            ))),
        }
    }
}

impl Stage {
    pub fn select(self) -> StageSelect {
        match self {
            Stage::Warmup => StageSelect::Warmup,
            Stage::Main => StageSelect::Main,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maskgen_is_byte_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        for out in [&out_a, &out_b] {
            run_maskgen(&MaskgenArgs {
                kind: "rect".into(),
                count: 5,
                height: 64,
                width: 64,
                seed: 7,
                out: out.clone(),
                bounds: None,
            })
            .unwrap();
        }
        for i in 0..5 {
            let name = format!("rect-{i:04}.png");
            assert_eq!(
                std::fs::read(out_a.join(&name)).unwrap(),
                std::fs::read(out_b.join(&name)).unwrap()
            );
        }
        assert_eq!(
            std::fs::read(out_a.join("manifest.txt")).unwrap(),
            std::fs::read(out_b.join("manifest.txt")).unwrap()
        );
        let manifest = std::fs::read_to_string(out_a.join("manifest.txt")).unwrap();
        assert_eq!(manifest.lines().count(), 5);
        assert!(manifest.contains("kind=rect"));
    }

    #[test]
    fn maskgen_unattainable_bounds_is_generation_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_maskgen(&MaskgenArgs {
            kind: "cellular".into(),
            count: 1,
            height: 64,
            width: 64,
            seed: 1,
            out: dir.path().join("m"),
            bounds: Some((0.99, 1.0)),
        })
        .unwrap_err();
        assert_eq!(exit_code(&err), 3);
    }

    #[test]
    fn exit_codes_stable() {
        assert_eq!(exit_code(&Error::Generation("x".into())), 3);
        assert_eq!(
            exit_code(&Error::NonFinite {
                term: "l_total".into()
            }),
            4
        );
        assert_eq!(exit_code(&Error::InvalidArgument("x".into())), 2);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
    }
}
