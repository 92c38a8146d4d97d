//! Training sources, batches and image pyramids.

use std::path::{Path, PathBuf};
use std::process::Command;

use image::{ImageReader, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::kernels::{avg_pool2, resize_bilinear};
use crate::tensor::{Scalar, Tensor};

const FRAME_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    SingleImage,
    SingleVideo,
}

/// Training frames as `(1, 3, H, W)` tensors in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSource {
    pub kind: SourceKind,
    pub images: Vec<Tensor<f32>>,
    pub native_size: (usize, usize),
}

impl TrainingSource {
    pub fn new(kind: SourceKind, images: Vec<Tensor<f32>>) -> Result<Self> {
        ensure!(!images.is_empty(), Data, "training source has no frames");
        match kind {
            SourceKind::SingleImage => ensure!(
                images.len() == 1,
                Data,
                "single image source has {} frames",
                images.len()
            ),
            SourceKind::SingleVideo => ensure!(
                images.len() >= 2,
                Data,
                "video source needs at least 2 frames"
            ),
        }
        let shape = images[0].shape();
        ensure!(
            shape[0] == 1 && shape[1] == 3,
            Data,
            "frames must have shape (1, 3, H, W), got {shape:?}"
        );
        for (i, im) in images.iter().enumerate() {
            ensure!(
                im.shape() == shape,
                Data,
                "frame {i} has shape {:?}, expected {shape:?}",
                im.shape()
            );
            ensure!(
                im.data().iter().all(|v| (-1.0..=1.0).contains(v)),
                Data,
                "frame {i} has values outside [-1, 1]"
            );
        }
        Ok(Self {
            kind,
            images,
            native_size: (shape[2], shape[3]),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Copy with every frame bilinearly resized; `native_size` is kept.
    pub fn resized(&self, size: (usize, usize)) -> Self {
        let images = self.images.iter().map(|im| resize_to(im, size)).collect();
        Self {
            kind: self.kind,
            images,
            native_size: self.native_size,
        }
    }
}

fn resize_to<T: Scalar>(im: &Tensor<T>, size: (usize, usize)) -> Tensor<T> {
    if (im.height(), im.width()) == size {
        im.clone()
    } else {
        resize_bilinear(im, size.0, size.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub target_size: (usize, usize),
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.batch_size >= 2,
            Config,
            "batch size must be at least 2, got {}",
            self.batch_size
        );
        ensure!(
            self.target_size.0 >= 1 && self.target_size.1 >= 1,
            Config,
            "empty target size"
        );
        Ok(())
    }
}

/// Reads an image file into a `(1, 3, H, W)` tensor in `[-1, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        raw[(y * w + x) * 3 + c] as f32 / 127.5 - 1.0
    })
}

/// Quantizes sample `n` of a batch in `[-1, 1]` to 8-bit RGB.
pub fn tensor_to_rgb<T: Scalar>(images: &Tensor<T>, n: usize) -> RgbImage {
    let [_, c, h, w] = images.shape();
    assert_eq!(c, 3, "expected RGB tensor");
    let s = images.sample(n);
    let mut raw = vec![0u8; h * w * 3];
    for ch in 0..3 {
        for i in 0..h * w {
            let v = ((s[ch * h * w + i].as_f64() + 1.0) * 127.5)
                .round()
                .clamp(0.0, 255.0);
            raw[i * 3 + ch] = v as u8;
        }
    }
    RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches")
}

/// Writes sample `n` of a batch as a PNG (or any format implied by the extension).
pub fn save_image<T: Scalar>(images: &Tensor<T>, n: usize, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    tensor_to_rgb(images, n)
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Pixels of white padding between grid cells.
pub const GRID_PADDING: usize = 2;

/// Tiles a batch into a grid with `cols` columns, in batch order.
pub fn tile_grid<T: Scalar>(images: &Tensor<T>, cols: usize) -> Tensor<T> {
    let [n, c, h, w] = images.shape();
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let p = GRID_PADDING;
    let (gh, gw) = (rows * h + (rows + 1) * p, cols * w + (cols + 1) * p);
    let mut grid = Tensor::full([1, c, gh, gw], T::one());
    for i in 0..n {
        let (oy, ox) = (p + (i / cols) * (h + p), p + (i % cols) * (w + p));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    grid.set([0, ch, oy + y, ox + x], images.at([i, ch, y, x]));
                }
            }
        }
    }
    grid
}

pub fn save_grid<T: Scalar>(images: &Tensor<T>, cols: usize, path: &Path) -> Result<()> {
    save_image(&tile_grid(images, cols), 0, path)
}

fn is_frame(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files in `dir`, sorted by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_frame(&p) {
            frames.push(p);
        }
    }
    frames.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(frames)
}

/// Loads a single image file, or a directory of frames for a video source.
pub fn load_source(path: &Path, kind: SourceKind) -> Result<TrainingSource> {
    load_source_with_workers(path, kind, 1)
}

/// Environment variable holding the number of frame-loading threads.
pub const WORKERS_ENV: &str = "SIV_NUM_WORKERS";

/// Loader thread count from the environment; 1 when unset or unparsable.
pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Decodes frames on up to `workers` threads. Frame order is the sorted file order
/// regardless of the thread count.
fn load_frames(frames: &[PathBuf], workers: usize) -> Result<Vec<Tensor<f32>>> {
    let workers = workers.clamp(1, frames.len().max(1));
    if workers == 1 {
        return frames.iter().map(|f| load_image(f)).collect();
    }
    let chunk = frames.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = frames
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|f| load_image(f))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(frames.len());
        for h in handles {
            out.extend(h.join().expect("frame loader thread panicked")?);
        }
        Ok(out)
    })
}

pub fn load_source_with_workers(
    path: &Path,
    kind: SourceKind,
    workers: usize,
) -> Result<TrainingSource> {
    ensure!(
        path.exists(),
        Data,
        "source {} does not exist",
        path.display()
    );
    let images = match kind {
        SourceKind::SingleImage => {
            ensure!(
                path.is_file(),
                Data,
                "single image source {} is not a file",
                path.display()
            );
            vec![load_image(path)?]
        }
        SourceKind::SingleVideo => {
            ensure!(
                path.is_dir(),
                Data,
                "video source {} must be a directory of frames",
                path.display()
            );
            let frames = list_frames(path)?;
            ensure!(
                !frames.is_empty(),
                Data,
                "no image files in {}",
                path.display()
            );
            load_frames(&frames, workers)?
        }
    };
    if let Some((i, im)) = images
        .iter()
        .enumerate()
        .find(|(_, im)| im.shape() != images[0].shape())
    {
        return Err(Error::Data(format!(
            "frame {i} is {}x{}, frame 0 is {}x{}",
            im.height(),
            im.width(),
            images[0].height(),
            images[0].width()
        )));
    }
    TrainingSource::new(kind, images)
}

/// Extracts the frames of a video file into `out_dir` with an external `ffmpeg`.
pub fn extract_frames(video: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let status = Command::new("ffmpeg")
        .arg("-loglevel")
        .arg("error")
        .arg("-i")
        .arg(video)
        .arg(out_dir.join("%05d.png"))
        .status()
        .map_err(|e| Error::Data(format!("could not run ffmpeg for frame extraction: {e}")))?;
    ensure!(
        status.success(),
        Data,
        "ffmpeg failed on {} with {status}",
        video.display()
    );
    list_frames(out_dir)
}

/// A batch of `(batch_size, 3, H, W)` frames at the target size and the source index
/// of each sample. Video frames are drawn uniformly with replacement.
pub fn make_batch<R: Rng + ?Sized>(
    src: &TrainingSource,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    spec.validate()?;
    let indices: Vec<usize> = match src.kind {
        SourceKind::SingleImage => vec![0; spec.batch_size],
        SourceKind::SingleVideo => (0..spec.batch_size)
            .map(|_| rng.random_range(0..src.len()))
            .collect(),
    };
    let frames: Vec<Tensor<f32>> = indices
        .iter()
        .map(|&i| resize_to(&src.images[i], spec.target_size))
        .collect();
    Ok((Tensor::stack(&frames), indices))
}

/// Area-averaged pyramid, coarsest first, ending with `batch` itself.
pub fn build_image_pyramid<T: Scalar>(
    batch: &Tensor<T>,
    n_levels: usize,
) -> Result<Vec<Tensor<T>>> {
    ensure!(n_levels >= 1, Argument, "pyramid needs at least one level");
    let f = 1usize << (n_levels - 1);
    ensure!(
        batch.height().is_multiple_of(f) && batch.width().is_multiple_of(f),
        Argument,
        "{}x{} is not divisible by {f}",
        batch.height(),
        batch.width()
    );
    let mut levels = vec![batch.clone()];
    for _ in 1..n_levels {
        let next = avg_pool2(levels.last().expect("non-empty"));
        levels.push(next);
    }
    levels.reverse();
    Ok(levels)
}
