//! Dataset ingestion and batching.
//!
//! A dataset on disk is a root directory holding `metadata.json` plus one
//! subdirectory per clip, each containing that clip's frame images:
//!
//! ```text
//! root/
//!   metadata.json            {"<clip_id>": {"label": "REAL" | "FAKE"}, ...}
//!   <clip_id>/<frame files>  PPM (P6, 8-bit) required; PNG (8-bit RGB) also accepted
//! ```
//!
//! Extra keys inside each metadata entry are tolerated so label files from
//! common deepfake corpora (which add `split`, `original`, and similar
//! fields) load unchanged. This module turns that layout into [`ClipRecord`]s,
//! cuts deterministic stratified train/validation/test partitions, and yields
//! `[B, T, H, W, 3]` batches rescaled to `[0, 1]`, with no augmentation of
//! any kind (in particular no flips).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, Scalar, SeededRng, Tensor};

/// Binary clip label. `Real` is class index 0, `Fake` class index 1; `Fake`
/// is the positive class throughout the crate (detection framing).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Index of this label in one-hot rows and probability columns.
    pub fn class_index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    /// Strict parse of the on-disk label string: exactly `"REAL"` or
    /// `"FAKE"`, upper case.
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "REAL" => Ok(Label::Real),
            "FAKE" => Ok(Label::Fake),
            other => Err(Error::Data(format!(
                "label '{other}' is not \"REAL\" or \"FAKE\""
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "REAL",
            Label::Fake => "FAKE",
        }
    }
}

/// One clip ready for batching: an id, an ordered list of exactly
/// `frames_per_clip` frame paths (short clips are padded by repeating the
/// last frame), and a label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub frame_paths: Vec<PathBuf>,
    pub label: Label,
}

/// Result of scanning a dataset root: the usable clips plus human-readable
/// warnings for entries that were skipped (directories without labels,
/// labels without directories, an empty metadata file).
#[derive(Clone, Debug)]
pub struct ClipScan {
    pub clips: Vec<ClipRecord>,
    pub warnings: Vec<String>,
}

/// Deterministic three-way partition of clip ids. Fractions are fixed by the
/// pipeline contract: 20% of all clips become the test split, then 20% of
/// the remaining pool becomes validation and the rest trains. The same
/// `(ids, seed)` always reproduces the same plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    /// Fraction of all clips carved off for the test split (fixed at 0.2).
    pub test_fraction: f64,
    /// Fraction of the remaining pool carved off for validation (fixed at
    /// 0.2).
    pub validation_fraction: f64,
}

#[derive(Deserialize)]
struct MetadataEntry {
    label: String,
    // Other keys (e.g. "split", "original") are intentionally tolerated.
}

/// Reads and validates `root/metadata.json`, returning clip id → label in
/// id order.
///
/// Errors: missing file or a label string other than `"REAL"`/`"FAKE"` are
/// dataset errors; malformed JSON is a format error carrying line, column,
/// and byte offset.
pub fn load_metadata(root: &Path) -> Result<BTreeMap<String, Label>> {
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "dataset root '{}' is not a directory",
            root.display()
        )));
    }
    let path = root.join("metadata.json");
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Data(format!(
                "missing metadata.json in '{}'",
                root.display()
            )))
        }
        Err(e) => return Err(e.into()),
    };
    let raw: BTreeMap<String, MetadataEntry> =
        serde_json::from_slice(&bytes).map_err(|e| json_format_error(&path, &bytes, &e))?;
    let mut labels = BTreeMap::new();
    for (clip_id, entry) in raw {
        let label = Label::parse(&entry.label)
            .map_err(|e| Error::Data(format!("clip '{clip_id}': {e}")))?;
        labels.insert(clip_id, label);
    }
    Ok(labels)
}

/// Converts a `serde_json` parse error into a format error that names the
/// file and includes the byte offset alongside line/column.
fn json_format_error(path: &Path, bytes: &[u8], err: &serde_json::Error) -> Error {
    let (line, column) = (err.line(), err.column());
    let mut offset = 0usize;
    let mut seen_lines = 1usize;
    for (i, &b) in bytes.iter().enumerate() {
        if seen_lines == line {
            offset = i + column.saturating_sub(1);
            break;
        }
        if b == b'\n' {
            seen_lines += 1;
        }
    }
    Error::Format(format!(
        "malformed JSON in '{}' at line {line} column {column} (byte offset {offset}): {err}",
        path.display()
    ))
}

/// Scans the labeled clip directories under `root` and assembles one
/// [`ClipRecord`] per clip.
///
/// Frames are the `.ppm`/`.png` files in each clip directory, ordered by
/// lexicographic file name; the first `frames_per_clip` are kept and clips
/// with fewer repeat their last frame up to length. A labeled directory
/// containing no frame images is an error; a labeled entry whose directory
/// is missing, or a directory with no metadata entry, is skipped with a
/// warning.
pub fn build_clips(
    root: &Path,
    metadata: &BTreeMap<String, Label>,
    frames_per_clip: usize,
) -> Result<ClipScan> {
    if frames_per_clip == 0 {
        return Err(Error::Argument("frames_per_clip must be at least 1".into()));
    }
    let mut clips = Vec::new();
    let mut warnings = Vec::new();
    if metadata.is_empty() {
        warnings.push("metadata.json lists no clips".to_string());
    }
    for (clip_id, &label) in metadata {
        let dir = root.join(clip_id);
        if !dir.is_dir() {
            warnings.push(format!(
                "clip '{clip_id}': listed in metadata.json but directory is missing; skipped"
            ));
            continue;
        }
        let mut names: Vec<String> = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            if !entry.file_type()?.is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let lower = name.to_ascii_lowercase();
            if lower.ends_with(".ppm") || lower.ends_with(".png") {
                names.push(name);
            }
        }
        if names.is_empty() {
            return Err(Error::Data(format!(
                "clip '{clip_id}': no frame images (.ppm/.png) in '{}'",
                dir.display()
            )));
        }
        names.sort();
        names.truncate(frames_per_clip);
        let mut frame_paths: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).collect();
        while frame_paths.len() < frames_per_clip {
            let last = frame_paths.last().expect("at least one frame").clone();
            frame_paths.push(last);
        }
        clips.push(ClipRecord {
            clip_id: clip_id.clone(),
            frame_paths,
            label,
        });
    }
    let mut unlabeled: Vec<String> = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if !metadata.contains_key(&name) {
            unlabeled.push(name);
        }
    }
    unlabeled.sort();
    for name in unlabeled {
        warnings.push(format!(
            "directory '{name}' has no metadata.json entry; skipped"
        ));
    }
    Ok(ClipScan { clips, warnings })
}

/// Cuts a seeded stratified train/validation/test partition of `clips`.
///
/// Clip ids are grouped by label, each group is shuffled by a generator
/// seeded with `seed`, and each group is cut with integer flooring: 1/5 of
/// the group becomes test, then 1/5 of the remaining pool becomes
/// validation. Finally each partition is shuffled once more so labels
/// interleave. Partitions are disjoint and exhaustive, and the same
/// `(clips, seed)` input reproduces the identical plan.
pub fn split_dataset(clips: &[ClipRecord], seed: u64) -> Result<SplitPlan> {
    if clips.len() < 3 {
        return Err(Error::Data(format!(
            "need at least 3 clips to split into three partitions, got {}",
            clips.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for clip in clips {
        if !seen.insert(clip.clip_id.as_str()) {
            return Err(Error::Data(format!("duplicate clip id '{}'", clip.clip_id)));
        }
    }
    let mut real: Vec<String> = Vec::new();
    let mut fake: Vec<String> = Vec::new();
    for clip in clips {
        match clip.label {
            Label::Real => real.push(clip.clip_id.clone()),
            Label::Fake => fake.push(clip.clip_id.clone()),
        }
    }
    let mut rng = SeededRng::new(seed);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for group in [&mut real, &mut fake] {
        rng.shuffle(group);
        let test_count = group.len() / 5;
        let (test_part, pool) = group.split_at(test_count);
        let validation_count = pool.len() / 5;
        let (validation_part, train_part) = pool.split_at(validation_count);
        test.extend_from_slice(test_part);
        validation.extend_from_slice(validation_part);
        train.extend_from_slice(train_part);
    }
    rng.shuffle(&mut train);
    rng.shuffle(&mut validation);
    rng.shuffle(&mut test);
    Ok(SplitPlan {
        train,
        validation,
        test,
        seed,
        test_fraction: 0.2,
        validation_fraction: 0.2,
    })
}

/// Resolves a list of plan ids back to owned clip records, in id-list order.
/// Unknown ids are dataset errors.
pub fn select_clips(clips: &[ClipRecord], ids: &[String]) -> Result<Vec<ClipRecord>> {
    let by_id: BTreeMap<&str, &ClipRecord> =
        clips.iter().map(|c| (c.clip_id.as_str(), c)).collect();
    let mut selected = Vec::with_capacity(ids.len());
    for id in ids {
        match by_id.get(id.as_str()) {
            Some(&clip) => selected.push(clip.clone()),
            None => {
                return Err(Error::Data(format!(
                    "clip id '{id}' from the split plan has no record"
                )))
            }
        }
    }
    Ok(selected)
}

/// Streaming batcher over a fixed clip order.
///
/// Yields `(frames, labels)` pairs where `frames` is `[B, T, H, W, 3]` with
/// values in `[0, 1]` and `labels` is one-hot `[B, 2]`. Frames whose source
/// extents differ from the target are bilinearly resized *before* the
/// rescale to `[0, 1]`; matching extents pass through untouched. The final
/// batch may be short. Iterating the same clips twice yields bitwise
/// identical batches in identical order.
pub struct Batches<'a, T: Scalar> {
    clips: &'a [ClipRecord],
    batch_size: usize,
    frames: usize,
    height: usize,
    width: usize,
    cursor: usize,
    failed: bool,
    _marker: std::marker::PhantomData<T>,
}

/// Builds a [`Batches`] iterator over `clips` targeting `[T, H, W, 3]` clip
/// tensors. Every record must carry exactly `frames` frame paths.
pub fn batch_iterator<'a, T: Scalar>(
    clips: &'a [ClipRecord],
    batch_size: usize,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Batches<'a, T>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be at least 1".into()));
    }
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::Argument(
            "target frame extents must all be at least 1".into(),
        ));
    }
    for clip in clips {
        if clip.frame_paths.len() != frames {
            return Err(Error::Data(format!(
                "clip '{}' has {} frame paths but the batcher expects {frames}",
                clip.clip_id,
                clip.frame_paths.len()
            )));
        }
    }
    Ok(Batches {
        clips,
        batch_size,
        frames,
        height,
        width,
        cursor: 0,
        failed: false,
        _marker: std::marker::PhantomData,
    })
}

impl<T: Scalar> Batches<'_, T> {
    fn load_batch(&self, chunk: &[ClipRecord]) -> Result<(Tensor<T>, Tensor<T>)> {
        let b = chunk.len();
        let clip_len = self.frames * self.height * self.width * 3;
        let mut frame_data: Vec<T> = Vec::with_capacity(b * clip_len);
        let mut label_data: Vec<T> = vec![T::zero(); b * 2];
        let max = T::from_f64(255.0);
        for (i, clip) in chunk.iter().enumerate() {
            for path in &clip.frame_paths {
                let decoded: Tensor<T> = decode_image(path)
                    .map_err(|e| Error::Data(format!("frame '{}': {e}", path.display())))?;
                let resized = resize_bilinear(&decoded, self.height, self.width);
                frame_data.extend(resized.data().iter().map(|&v| v / max));
            }
            label_data[i * 2 + chunk[i].label.class_index()] = T::one();
        }
        let frames = Tensor::new(&[b, self.frames, self.height, self.width, 3], frame_data)?;
        let labels = Tensor::new(&[b, 2], label_data)?;
        Ok((frames, labels))
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Result<(Tensor<T>, Tensor<T>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.cursor >= self.clips.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.clips.len());
        let chunk = &self.clips[self.cursor..end];
        self.cursor = end;
        match self.load_batch(chunk) {
            Ok(batch) => Some(Ok(batch)),
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// Decodes one image file into a `[H, W, 3]` tensor with values in
/// `0..=255`.
///
/// Binary 8-bit PPM (`P6`, maxval 255) is the native format; 8-bit RGB PNG
/// is also accepted. Anything else — including 16-bit PPM, grayscale or
/// alpha PNG, and truncated payloads — is a format error naming the file.
pub fn decode_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read image '{}': {e}", path.display())))?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes).map_err(|e| prefix_path(path, e))
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a]) {
        decode_png(&bytes).map_err(|e| prefix_path(path, e))
    } else if bytes.starts_with(b"P1")
        || bytes.starts_with(b"P2")
        || bytes.starts_with(b"P3")
        || bytes.starts_with(b"P4")
        || bytes.starts_with(b"P5")
    {
        Err(Error::Format(format!(
            "'{}': only binary RGB (P6) netpbm images are supported",
            path.display()
        )))
    } else {
        Err(Error::Format(format!(
            "'{}': unrecognized image format (expected PPM P6 or PNG)",
            path.display()
        )))
    }
}

fn prefix_path(path: &Path, err: Error) -> Error {
    match err {
        Error::Format(msg) => Error::Format(format!("'{}': {msg}", path.display())),
        other => other,
    }
}

/// Parses a P6 PPM payload. Header tokens may be separated by arbitrary
/// whitespace and `#` comments; exactly one whitespace byte separates the
/// maxval from the pixel bytes.
fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 2; // past the "P6" magic
    let width = ppm_header_int(bytes, &mut pos)?;
    let height = ppm_header_int(bytes, &mut pos)?;
    let maxval = ppm_header_int(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "PPM maxval {maxval} unsupported; only 8-bit (maxval 255) images are accepted"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!(
            "PPM extents {width}x{height} must be positive"
        )));
    }
    // The single whitespace byte after the maxval token.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::Format(
                "PPM header is not followed by a whitespace byte".into(),
            ))
        }
    }
    let expected = width * height * 3;
    let payload = &bytes[pos.min(bytes.len())..];
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated PPM payload: expected {expected} pixel bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "trailing bytes after PPM payload: expected {expected} pixel bytes, found {}",
            payload.len()
        )));
    }
    let data: Vec<T> = payload.iter().map(|&b| T::from_f64(f64::from(b))).collect();
    Tensor::new(&[height, width, 3], data)
}

/// Reads the next unsigned decimal token from a PPM header, skipping
/// whitespace and `#` comments.
fn ppm_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while matches!(bytes.get(*pos), Some(b) if b.is_ascii_digit()) {
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::Format(
            "PPM header ended before all of width, height, and maxval were read".into(),
        ));
    }
    let token = std::str::from_utf8(&bytes[start..*pos]).expect("digits are UTF-8");
    token
        .parse::<usize>()
        .map_err(|e| Error::Format(format!("PPM header value '{token}' out of range: {e}")))
}

fn decode_png<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let image = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("PNG decode failed: {e}")))?;
    match image {
        image::DynamicImage::ImageRgb8(rgb) => {
            let (width, height) = (rgb.width() as usize, rgb.height() as usize);
            let data: Vec<T> = rgb
                .into_raw()
                .iter()
                .map(|&b| T::from_f64(f64::from(b)))
                .collect();
            Tensor::new(&[height, width, 3], data)
        }
        other => Err(Error::Format(format!(
            "PNG must be 8-bit RGB, got {other:?} pixels",
        ))),
    }
}

/// Serializes `height * width * 3` interleaved RGB bytes as a P6 PPM file
/// body (maxval 255).
pub fn encode_ppm(pixels: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    if pixels.len() != height * width * 3 {
        return Err(Error::Argument(format!(
            "pixel buffer holds {} bytes but {height}x{width} RGB needs {}",
            pixels.len(),
            height * width * 3
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Writes `encode_ppm` output to `path`.
pub fn write_ppm(path: &Path, pixels: &[u8], height: usize, width: usize) -> Result<()> {
    let bytes = encode_ppm(pixels, height, width)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Recipe for a generated dataset with a class-dependent planted pattern:
/// every frame is seeded mid-gray noise, and frames of `Fake` clips
/// additionally carry a solid white square patch at a fixed position. The
/// patch is the only class-correlated signal, which makes the dataset both
/// quickly learnable and spatially attributable.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub real_clips: usize,
    pub fake_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Top row of the planted patch.
    pub patch_row: usize,
    /// Left column of the planted patch.
    pub patch_col: usize,
    /// Patch side length in pixels.
    pub patch_size: usize,
    pub seed: u64,
}

impl SyntheticDataset {
    /// Row and column ranges covered by the planted patch.
    pub fn patch_footprint(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        (
            self.patch_row..self.patch_row + self.patch_size,
            self.patch_col..self.patch_col + self.patch_size,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.real_clips + self.fake_clips == 0 {
            return Err(Error::Argument(
                "synthetic dataset needs at least one clip".into(),
            ));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Argument(
                "synthetic frame extents must all be at least 1".into(),
            ));
        }
        if self.patch_size == 0
            || self.patch_row + self.patch_size > self.height
            || self.patch_col + self.patch_size > self.width
        {
            return Err(Error::Argument(format!(
                "patch {}x{} at ({}, {}) does not fit inside {}x{} frames",
                self.patch_size,
                self.patch_size,
                self.patch_row,
                self.patch_col,
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

/// Writes a [`SyntheticDataset`] under `root` (creating it), producing
/// `metadata.json` plus one PPM frame directory per clip. Clip ids are
/// `real_NNN` / `fake_NNN`. Output bytes are fully determined by the spec,
/// including its seed.
pub fn write_synthetic_dataset(root: &Path, spec: &SyntheticDataset) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(root)?;
    let mut metadata = BTreeMap::new();
    let mut rng = SeededRng::new(spec.seed);
    for label in [Label::Real, Label::Fake] {
        let clip_count = match label {
            Label::Real => spec.real_clips,
            Label::Fake => spec.fake_clips,
        };
        for index in 0..clip_count {
            let clip_id = format!("{}_{index:03}", label.as_str().to_ascii_lowercase());
            let dir = root.join(&clip_id);
            fs::create_dir_all(&dir)?;
            for frame in 0..spec.frames {
                let pixels = synthetic_frame(spec, label, &mut rng);
                write_ppm(
                    &dir.join(format!("frame_{frame:02}.ppm")),
                    &pixels,
                    spec.height,
                    spec.width,
                )?;
            }
            metadata.insert(clip_id, serde_json::json!({ "label": label.as_str() }));
        }
    }
    let body = serde_json::to_vec_pretty(&metadata).expect("metadata serializes");
    fs::write(root.join("metadata.json"), body)?;
    Ok(())
}

fn synthetic_frame(spec: &SyntheticDataset, label: Label, rng: &mut SeededRng) -> Vec<u8> {
    let mut pixels = vec![0u8; spec.height * spec.width * 3];
    for px in pixels.iter_mut() {
        *px = 96 + (rng.next_f64() * 64.0) as u8;
    }
    if label == Label::Fake {
        let (rows, cols) = spec.patch_footprint();
        for r in rows {
            for c in cols.clone() {
                let base = (r * spec.width + c) * 3;
                pixels[base..base + 3].fill(255);
            }
        }
    }
    pixels
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use tempfile::TempDir;

    fn write_clip_dir(root: &Path, clip_id: &str, frame_names: &[&str]) {
        let dir = root.join(clip_id);
        fs::create_dir_all(&dir).unwrap();
        for name in frame_names {
            let pixels = vec![10u8; 2 * 2 * 3];
            write_ppm(&dir.join(name), &pixels, 2, 2).unwrap();
        }
    }

    fn write_metadata(root: &Path, body: &str) {
        fs::write(root.join("metadata.json"), body).unwrap();
    }

    #[test]
    fn metadata_round_trip_with_directories() {
        let tmp = TempDir::new().unwrap();
        write_metadata(
            tmp.path(),
            r#"{"a": {"label": "FAKE"}, "b": {"label": "REAL"}}"#,
        );
        write_clip_dir(tmp.path(), "a", &["f0.ppm"]);
        write_clip_dir(tmp.path(), "b", &["f0.ppm"]);
        let metadata = load_metadata(tmp.path()).unwrap();
        assert_eq!(metadata.len(), 2);
        assert_eq!(metadata["a"], Label::Fake);
        assert_eq!(metadata["b"], Label::Real);
        let scan = build_clips(tmp.path(), &metadata, 5).unwrap();
        assert_eq!(scan.clips.len(), 2);
        assert!(scan.warnings.is_empty());
    }

    #[test]
    fn metadata_tolerates_extra_entry_fields() {
        let tmp = TempDir::new().unwrap();
        write_metadata(
            tmp.path(),
            r#"{"a": {"label": "FAKE", "split": "train", "original": "b.mp4"}}"#,
        );
        let metadata = load_metadata(tmp.path()).unwrap();
        assert_eq!(metadata["a"], Label::Fake);
    }

    #[test]
    fn metadata_rejects_wrong_case_label() {
        let tmp = TempDir::new().unwrap();
        write_metadata(tmp.path(), r#"{"a": {"label": "Fake"}}"#);
        let err = load_metadata(tmp.path()).unwrap_err();
        match err {
            Error::Data(msg) => {
                assert!(msg.contains("'a'"), "{msg}");
                assert!(msg.contains("Fake"), "{msg}");
            }
            other => panic!("expected Data error, got {other:?}"),
        }
    }

    #[test]
    fn metadata_missing_file_is_a_dataset_error() {
        let tmp = TempDir::new().unwrap();
        assert!(matches!(
            load_metadata(tmp.path()),
            Err(Error::Data(msg)) if msg.contains("metadata.json")
        ));
    }

    #[test]
    fn metadata_parse_error_reports_byte_offset() {
        let tmp = TempDir::new().unwrap();
        write_metadata(tmp.path(), "{\n  \"a\": oops\n}");
        let err = load_metadata(tmp.path()).unwrap_err();
        match err {
            Error::Format(msg) => {
                assert!(msg.contains("line 2"), "{msg}");
                assert!(msg.contains("byte offset"), "{msg}");
            }
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_metadata_yields_no_clips_and_a_warning() {
        let tmp = TempDir::new().unwrap();
        write_metadata(tmp.path(), "{}");
        let metadata = load_metadata(tmp.path()).unwrap();
        let scan = build_clips(tmp.path(), &metadata, 5).unwrap();
        assert!(scan.clips.is_empty());
        assert_eq!(scan.warnings.len(), 1);
        assert!(scan.warnings[0].contains("no clips"));
    }

    #[test]
    fn clips_take_first_frames_in_lexicographic_order() {
        let tmp = TempDir::new().unwrap();
        write_metadata(tmp.path(), r#"{"a": {"label": "REAL"}}"#);
        // Written out of order; selection must be name-sorted.
        write_clip_dir(
            tmp.path(),
            "a",
            &[
                "f06.ppm", "f00.ppm", "f03.ppm", "f01.ppm", "f04.ppm", "f02.ppm", "f05.ppm",
            ],
        );
        let metadata = load_metadata(tmp.path()).unwrap();
        let scan = build_clips(tmp.path(), &metadata, 5).unwrap();
        let names: Vec<String> = scan.clips[0]
            .frame_paths
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            ["f00.ppm", "f01.ppm", "f02.ppm", "f03.ppm", "f04.ppm"]
        );
    }

    #[test]
    fn short_clips_repeat_the_last_frame() {
        let tmp = TempDir::new().unwrap();
        write_metadata(tmp.path(), r#"{"a": {"label": "REAL"}}"#);
        write_clip_dir(tmp.path(), "a", &["f0.ppm", "f1.ppm", "f2.ppm"]);
        let metadata = load_metadata(tmp.path()).unwrap();
        let scan = build_clips(tmp.path(), &metadata, 5).unwrap();
        let names: Vec<String> = scan.clips[0]
            .frame_paths
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["f0.ppm", "f1.ppm", "f2.ppm", "f2.ppm", "f2.ppm"]);
    }

    #[test]
    fn empty_clip_directory_is_an_error_naming_the_clip() {
        let tmp = TempDir::new().unwrap();
        write_metadata(tmp.path(), r#"{"empty_one": {"label": "REAL"}}"#);
        fs::create_dir_all(tmp.path().join("empty_one")).unwrap();
        let metadata = load_metadata(tmp.path()).unwrap();
        let err = build_clips(tmp.path(), &metadata, 5).unwrap_err();
        assert!(matches!(err, Error::Data(msg) if msg.contains("empty_one")));
    }

    #[test]
    fn skipped_directories_are_reported() {
        let tmp = TempDir::new().unwrap();
        write_metadata(
            tmp.path(),
            r#"{"present": {"label": "REAL"}, "ghost": {"label": "FAKE"}}"#,
        );
        write_clip_dir(tmp.path(), "present", &["f0.ppm"]);
        write_clip_dir(tmp.path(), "stray", &["f0.ppm"]);
        let metadata = load_metadata(tmp.path()).unwrap();
        let scan = build_clips(tmp.path(), &metadata, 5).unwrap();
        assert_eq!(scan.clips.len(), 1);
        assert_eq!(scan.clips[0].clip_id, "present");
        assert!(scan.warnings.iter().any(|w| w.contains("'ghost'")));
        assert!(scan.warnings.iter().any(|w| w.contains("'stray'")));
    }

    fn fake_records(real: usize, fake: usize) -> Vec<ClipRecord> {
        let mut clips = Vec::new();
        for i in 0..real {
            clips.push(ClipRecord {
                clip_id: format!("real_{i:05}"),
                frame_paths: vec![PathBuf::from("unused.ppm"); 5],
                label: Label::Real,
            });
        }
        for i in 0..fake {
            clips.push(ClipRecord {
                clip_id: format!("fake_{i:05}"),
                frame_paths: vec![PathBuf::from("unused.ppm"); 5],
                label: Label::Fake,
            });
        }
        clips
    }

    #[test]
    fn split_is_deterministic_disjoint_and_exhaustive() {
        let clips = fake_records(5, 5);
        let a = split_dataset(&clips, 7).unwrap();
        let b = split_dataset(&clips, 7).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&clips, 8).unwrap();
        assert_ne!(a, c, "different seeds should cut different plans");

        let mut all: Vec<&String> = a.train.iter().chain(&a.validation).chain(&a.test).collect();
        all.sort();
        let distinct: BTreeSet<&&String> = all.iter().collect();
        assert_eq!(distinct.len(), clips.len(), "partitions overlap");
        assert_eq!(all.len(), clips.len(), "partitions miss clips");
    }

    #[test]
    fn split_counts_follow_the_floor_rule() {
        // 2000 + 2948 unbalanced clips: per label, 1/5 floors to test, then
        // 1/5 of the remainder floors to validation.
        let clips = fake_records(2000, 2948);
        let plan = split_dataset(&clips, 1).unwrap();
        assert_eq!(plan.test.len(), 400 + 589);
        assert_eq!(plan.validation.len(), 320 + 471);
        assert_eq!(plan.train.len(), 1280 + 1888);
        // The published reference partition for 4,948 clips is 3,958
        // pool / 792 validation / 989 test; flooring lands within one clip
        // of each.
        let pool = plan.train.len() + plan.validation.len();
        assert!((pool as i64 - 3958).abs() <= 1, "pool {pool}");
        assert!((plan.validation.len() as i64 - 792).abs() <= 1);
        assert!((plan.test.len() as i64 - 989).abs() <= 1);
    }

    #[test]
    fn split_keeps_partitions_stratified() {
        let clips = fake_records(300, 700);
        let plan = split_dataset(&clips, 3).unwrap();
        let global_fake = 0.7;
        for (name, ids) in [
            ("train", &plan.train),
            ("validation", &plan.validation),
            ("test", &plan.test),
        ] {
            let fake = ids.iter().filter(|id| id.starts_with("fake")).count();
            let ratio = fake as f64 / ids.len() as f64;
            assert!(
                (ratio - global_fake).abs() < 0.05,
                "{name} fake ratio {ratio}"
            );
        }
    }

    #[test]
    fn split_rejects_too_few_clips_and_duplicates() {
        assert!(matches!(
            split_dataset(&fake_records(1, 1), 0),
            Err(Error::Data(_))
        ));
        let mut clips = fake_records(2, 2);
        clips[1].clip_id = clips[0].clip_id.clone();
        assert!(matches!(
            split_dataset(&clips, 0),
            Err(Error::Data(msg)) if msg.contains("duplicate")
        ));
    }

    #[test]
    fn select_clips_resolves_ids_and_rejects_unknown() {
        let clips = fake_records(2, 2);
        let ids = vec![clips[3].clip_id.clone(), clips[0].clip_id.clone()];
        let picked = select_clips(&clips, &ids).unwrap();
        assert_eq!(picked[0].clip_id, clips[3].clip_id);
        assert_eq!(picked[1].clip_id, clips[0].clip_id);
        let missing = vec!["nope".to_string()];
        assert!(matches!(
            select_clips(&clips, &missing),
            Err(Error::Data(_))
        ));
    }

    /// Writes `count` clips of 4x4 frames whose pixel bytes are all `value`,
    /// with the given label, returning the records.
    fn uniform_dataset(root: &Path, count: usize, value: u8) -> Vec<ClipRecord> {
        let mut meta = BTreeMap::new();
        for i in 0..count {
            let id = format!("clip_{i:02}");
            let dir = root.join(&id);
            fs::create_dir_all(&dir).unwrap();
            for f in 0..2 {
                let pixels = vec![value; 4 * 4 * 3];
                write_ppm(&dir.join(format!("f{f}.ppm")), &pixels, 4, 4).unwrap();
            }
            meta.insert(id, if i % 2 == 0 { Label::Real } else { Label::Fake });
        }
        let body: BTreeMap<&String, serde_json::Value> = meta
            .iter()
            .map(|(id, l)| (id, serde_json::json!({ "label": l.as_str() })))
            .collect();
        fs::write(
            root.join("metadata.json"),
            serde_json::to_vec(&body).unwrap(),
        )
        .unwrap();
        build_clips(root, &meta, 2).unwrap().clips
    }

    #[test]
    fn batches_have_documented_sizes_shapes_and_values() {
        let tmp = TempDir::new().unwrap();
        let clips = uniform_dataset(tmp.path(), 9, 255);
        let batches: Vec<_> = batch_iterator::<f32>(&clips, 4, 2, 4, 4)
            .unwrap()
            .map(|r| r.unwrap())
            .collect();
        let sizes: Vec<usize> = batches.iter().map(|(x, _)| x.shape()[0]).collect();
        assert_eq!(sizes, [4, 4, 1]);
        for (x, y) in &batches {
            assert_eq!(&x.shape()[1..], &[2, 4, 4, 3]);
            assert_eq!(y.shape(), &[x.shape()[0], 2]);
            // Pixel byte 255 must rescale to exactly 1.0.
            assert!(x.data().iter().all(|&v| v == 1.0));
            for row in 0..y.shape()[0] {
                assert_eq!(y.data()[row * 2] + y.data()[row * 2 + 1], 1.0);
            }
        }
        // Labels alternate REAL (index 0) / FAKE (index 1) by construction.
        let (_, y0) = &batches[0];
        assert_eq!(y0.data()[0], 1.0);
        assert_eq!(y0.data()[3], 1.0);
    }

    #[test]
    fn zero_pixels_rescale_to_zero() {
        let tmp = TempDir::new().unwrap();
        let clips = uniform_dataset(tmp.path(), 1, 0);
        let (x, _) = batch_iterator::<f32>(&clips, 4, 2, 4, 4)
            .unwrap()
            .next()
            .unwrap()
            .unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matching_extents_pass_through_and_iteration_repeats_bitwise() {
        let tmp = TempDir::new().unwrap();
        let dir = tmp.path().join("a");
        fs::create_dir_all(&dir).unwrap();
        let mut rng = SeededRng::new(5);
        let pixels: Vec<u8> = (0..4 * 4 * 3)
            .map(|_| (rng.next_f64() * 256.0) as u8)
            .collect();
        write_ppm(&dir.join("f0.ppm"), &pixels, 4, 4).unwrap();
        let clips = vec![ClipRecord {
            clip_id: "a".into(),
            frame_paths: vec![dir.join("f0.ppm")],
            label: Label::Fake,
        }];
        let load = || {
            batch_iterator::<f32>(&clips, 1, 1, 4, 4)
                .unwrap()
                .next()
                .unwrap()
                .unwrap()
        };
        let (x1, _) = load();
        let (x2, _) = load();
        assert_eq!(x1.data(), x2.data(), "re-iteration must be bitwise equal");
        for (i, &b) in pixels.iter().enumerate() {
            assert_eq!(x1.data()[i], b as f32 / 255.0);
        }
    }

    #[test]
    fn differing_extents_are_resized_bilinearly() {
        let tmp = TempDir::new().unwrap();
        let dir = tmp.path().join("a");
        fs::create_dir_all(&dir).unwrap();
        // Constant image: resizing must preserve the constant exactly.
        write_ppm(&dir.join("f0.ppm"), &[51u8; 6 * 8 * 3], 6, 8).unwrap();
        let clips = vec![ClipRecord {
            clip_id: "a".into(),
            frame_paths: vec![dir.join("f0.ppm")],
            label: Label::Real,
        }];
        let (x, _) = batch_iterator::<f32>(&clips, 1, 1, 4, 4)
            .unwrap()
            .next()
            .unwrap()
            .unwrap();
        assert_eq!(x.shape(), &[1, 1, 4, 4, 3]);
        for &v in x.data() {
            assert!((v - 51.0 / 255.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batcher_surfaces_decode_failures_as_data_errors_naming_the_file() {
        let tmp = TempDir::new().unwrap();
        let dir = tmp.path().join("bad");
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("f0.ppm"), b"P6\n2 2\n255\nshort").unwrap();
        let clips = vec![ClipRecord {
            clip_id: "bad".into(),
            frame_paths: vec![dir.join("f0.ppm")],
            label: Label::Real,
        }];
        let mut it = batch_iterator::<f32>(&clips, 1, 1, 2, 2).unwrap();
        match it.next().unwrap() {
            Err(Error::Data(msg)) => assert!(msg.contains("f0.ppm"), "{msg}"),
            other => panic!("expected Data error, got {other:?}"),
        }
        assert!(it.next().is_none(), "iterator must stop after a failure");
    }

    #[test]
    fn batcher_rejects_bad_construction() {
        let clips = fake_records(1, 0);
        assert!(matches!(
            batch_iterator::<f32>(&clips, 0, 5, 4, 4),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            batch_iterator::<f32>(&clips, 1, 3, 4, 4),
            Err(Error::Data(_)),
        ));
    }

    #[test]
    fn ppm_decode_reads_known_bytes_exactly() {
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("img.ppm");
        let pixels: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        fs::write(&path, encode_ppm(&pixels, 2, 2).unwrap()).unwrap();
        let img: Tensor<f64> = decode_image(&path).unwrap();
        assert_eq!(img.shape(), &[2, 2, 3]);
        for (i, &b) in pixels.iter().enumerate() {
            assert_eq!(img.data()[i], f64::from(b));
        }
    }

    #[test]
    fn ppm_decode_handles_header_comments() {
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("img.ppm");
        let mut bytes = b"P6\n# a comment line\n1 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        fs::write(&path, bytes).unwrap();
        let img: Tensor<f32> = decode_image(&path).unwrap();
        assert_eq!(img.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn ppm_decode_rejects_bad_payloads() {
        let tmp = TempDir::new().unwrap();
        let cases: Vec<(&str, Vec<u8>)> = vec![
            (
                "sixteen_bit.ppm",
                b"P6\n1 1\n65535\n\x00\x01\x00\x02\x00\x03".to_vec(),
            ),
            ("gray.pgm", b"P5\n1 1\n255\n\x7f".to_vec()),
            ("truncated.ppm", b"P6\n2 2\n255\n\x01\x02\x03".to_vec()),
            ("trailing.ppm", {
                let mut v = encode_ppm(&[0u8; 3], 1, 1).unwrap();
                v.push(0);
                v
            }),
            ("garbage.bin", b"not an image at all".to_vec()),
            ("cut_header.ppm", b"P6\n2 ".to_vec()),
        ];
        for (name, bytes) in cases {
            let path = tmp.path().join(name);
            fs::write(&path, bytes).unwrap();
            let result = decode_image::<f32>(&path);
            assert!(
                matches!(result, Err(Error::Format(_))),
                "{name} should be a format error, got {result:?}"
            );
        }
    }

    #[test]
    fn ppm_round_trip_is_bitwise() {
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("img.ppm");
        let mut rng = SeededRng::new(11);
        let pixels: Vec<u8> = (0..17 * 9 * 3)
            .map(|_| (rng.next_f64() * 256.0) as u8)
            .collect();
        write_ppm(&path, &pixels, 17, 9).unwrap();
        let img: Tensor<f64> = decode_image(&path).unwrap();
        assert_eq!(img.shape(), &[17, 9, 3]);
        let back: Vec<u8> = img.data().iter().map(|&v| v as u8).collect();
        assert_eq!(back, pixels);
    }

    #[test]
    fn png_rgb8_decodes_and_other_pixel_types_fail() {
        let tmp = TempDir::new().unwrap();
        let rgb_path = tmp.path().join("img.png");
        let rgb =
            image::RgbImage::from_fn(3, 2, |x, y| image::Rgb([x as u8 * 10, y as u8 * 10, 7]));
        rgb.save_with_format(&rgb_path, image::ImageFormat::Png)
            .unwrap();
        let img: Tensor<f32> = decode_image(&rgb_path).unwrap();
        assert_eq!(img.shape(), &[2, 3, 3]);
        assert_eq!(img.data()[0], 0.0);
        assert_eq!(img.data()[5], 7.0);
        assert_eq!(img.data()[(3 + 1) * 3], 10.0); // row 1, col 1, red

        let rgba_path = tmp.path().join("img_rgba.png");
        let rgba = image::RgbaImage::from_pixel(2, 2, image::Rgba([1, 2, 3, 4]));
        rgba.save_with_format(&rgba_path, image::ImageFormat::Png)
            .unwrap();
        assert!(matches!(
            decode_image::<f32>(&rgba_path),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn synthetic_dataset_plants_the_patch_only_in_fake_clips() {
        let tmp = TempDir::new().unwrap();
        let spec = SyntheticDataset {
            real_clips: 2,
            fake_clips: 2,
            frames: 2,
            height: 12,
            width: 12,
            patch_row: 2,
            patch_col: 4,
            patch_size: 4,
            seed: 21,
        };
        write_synthetic_dataset(tmp.path(), &spec).unwrap();
        let metadata = load_metadata(tmp.path()).unwrap();
        assert_eq!(metadata.len(), 4);
        let scan = build_clips(tmp.path(), &metadata, spec.frames).unwrap();
        assert!(scan.warnings.is_empty());
        let (rows, cols) = spec.patch_footprint();
        for clip in &scan.clips {
            let frame: Tensor<f64> = decode_image(&clip.frame_paths[0]).unwrap();
            let mut patch_all_white = true;
            for r in rows.clone() {
                for c in cols.clone() {
                    for ch in 0..3 {
                        if frame.data()[(r * spec.width + c) * 3 + ch] != 255.0 {
                            patch_all_white = false;
                        }
                    }
                }
            }
            match clip.label {
                Label::Fake => assert!(patch_all_white, "{} lacks its patch", clip.clip_id),
                Label::Real => assert!(!patch_all_white, "{} grew a patch", clip.clip_id),
            }
            // Background stays in the mid-gray band.
            let corner = frame.data()[0];
            assert!((96.0..160.0).contains(&corner), "corner {corner}");
        }
    }

    #[test]
    fn synthetic_dataset_is_byte_deterministic() {
        let spec = SyntheticDataset {
            real_clips: 1,
            fake_clips: 1,
            frames: 2,
            height: 8,
            width: 8,
            patch_row: 1,
            patch_col: 1,
            patch_size: 3,
            seed: 9,
        };
        let tmp_a = TempDir::new().unwrap();
        let tmp_b = TempDir::new().unwrap();
        write_synthetic_dataset(tmp_a.path(), &spec).unwrap();
        write_synthetic_dataset(tmp_b.path(), &spec).unwrap();
        for rel in [
            "metadata.json",
            "real_000/frame_00.ppm",
            "fake_000/frame_01.ppm",
        ] {
            let a = fs::read(tmp_a.path().join(rel)).unwrap();
            let b = fs::read(tmp_b.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between runs");
        }
    }

    #[test]
    fn synthetic_dataset_rejects_out_of_bounds_patch() {
        let tmp = TempDir::new().unwrap();
        let spec = SyntheticDataset {
            real_clips: 1,
            fake_clips: 1,
            frames: 1,
            height: 8,
            width: 8,
            patch_row: 6,
            patch_col: 0,
            patch_size: 4,
            seed: 0,
        };
        assert!(matches!(
            write_synthetic_dataset(tmp.path(), &spec),
            Err(Error::Argument(_))
        ));
    }
}
