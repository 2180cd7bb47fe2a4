//! From raster strips and building coordinates to a deduplicated, split
//! chip dataset described by a manifest CSV.
//!
//! A strip is `<id>.png` plus `<id>.geo`, a text sidecar holding the six
//! affine coefficients `a b c d e f` one per line:
//! `lon = a + b·col + c·row`, `lat = d + e·col + f·row`.
//! An optional `strips.csv` (`strip_id,capture_epoch,phase`) fixes the scan
//! order and marks each strip `pre` or `post` event. Damaged buildings are
//! cropped from post-event strips, undamaged ones from pre-event strips.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use rand::seq::SliceRandom;

use crate::augment::substream;
use crate::error::{Error, Result};
use crate::optim::Dataset;
use crate::tensor::{resize_bilinear, Scalar, Tensor};

/// Window extent used when none is configured.
pub const DEFAULT_WINDOW_PX: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoTransform {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl GeoTransform {
    pub const IDENTITY: GeoTransform = GeoTransform {
        a: 0.0,
        b: 1.0,
        c: 0.0,
        d: 0.0,
        e: 0.0,
        f: 1.0,
    };

    pub fn new(coeffs: [f64; 6]) -> Result<Self> {
        let [a, b, c, d, e, f] = coeffs;
        let gt = GeoTransform { a, b, c, d, e, f };
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite geo-transform coefficient in {coeffs:?}")));
        }
        gt.determinant()?;
        Ok(gt)
    }

    pub fn coefficients(&self) -> [f64; 6] {
        [self.a, self.b, self.c, self.d, self.e, self.f]
    }

    /// Determinant of the linear part, rejected when it is negligible
    /// relative to the size of the entries.
    fn determinant(&self) -> Result<f64> {
        let det = self.b * self.f - self.c * self.e;
        let scale = (self.b.abs() + self.c.abs()) * (self.e.abs() + self.f.abs());
        if scale == 0.0 || det.abs() <= 1e-12 * scale {
            return Err(Error::validation(format!(
                "geo-transform linear part [{}, {}; {}, {}] is singular",
                self.b, self.c, self.e, self.f
            )));
        }
        Ok(det)
    }

    pub fn pixel_to_lonlat(&self, col: f64, row: f64) -> (f64, f64) {
        (self.a + self.b * col + self.c * row, self.d + self.e * col + self.f * row)
    }

    /// Fractional pixel position of a coordinate.
    ///
    /// The result carries the round-off of the forward map divided by the
    /// pixel size: with degree offsets near 100 and 1e-5° pixels that is
    /// on the order of 1e-9 px.
    pub fn lonlat_to_pixel(&self, lon: f64, lat: f64) -> Result<(f64, f64)> {
        let det = self.determinant()?;
        let (dl, dt) = (lon - self.a, lat - self.d);
        Ok(((self.f * dl - self.c * dt) / det, (self.b * dt - self.e * dl) / det))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let values: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if values.len() != 6 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("expected 6 coefficients, found {}", values.len()),
            });
        }
        let mut coeffs = [0.0; 6];
        for (slot, v) in coeffs.iter_mut().zip(&values) {
            *slot = v.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                message: format!("coefficient {v:?} is not a number"),
            })?;
        }
        Self::new(coeffs).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_sidecar(&self) -> String {
        self.coefficients().iter().map(|v| format!("{v}\n")).collect()
    }
}

/// An 8-bit image as a `C×H×W` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[ch * h * w + y as usize * w + x as usize] = px[ch] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("buffer matches extents")
}

/// Writes a `3×H×W` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_chip(chip: &Tensor<f32>, path: &Path) -> Result<()> {
    let [c, h, w] = chip.shape() else {
        return Err(Error::shape(format!("chip must be C×H×W, got {:?}", chip.shape())));
    };
    if *c != 3 {
        return Err(Error::shape(format!("chip must have 3 channels, got {c}")));
    }
    let (h, w) = (*h, *w);
    let d = chip.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    });
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Debug)]
pub struct Raster {
    pub image: Tensor<f32>,
    pub transform: GeoTransform,
}

pub fn load_raster(image_path: &Path, sidecar_path: &Path) -> Result<Raster> {
    if !sidecar_path.exists() {
        return Err(Error::Format {
            path: sidecar_path.to_path_buf(),
            message: "geo-transform sidecar is missing".into(),
        });
    }
    let transform = GeoTransform::read(sidecar_path)?;
    Ok(Raster {
        image: load_image(image_path)?,
        transform,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Undamaged,
    Damaged,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Damaged => "damaged",
            Label::Undamaged => "undamaged",
        }
    }

    pub fn value(self) -> u8 {
        match self {
            Label::Damaged => 1,
            Label::Undamaged => 0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "damaged" | "1" => Ok(Label::Damaged),
            "undamaged" | "0" => Ok(Label::Undamaged),
            other => Err(Error::validation(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildingRecord {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub label: Label,
    pub source: String,
}

fn header_index(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        message: format!("missing column {name:?}"),
    })
}

fn format_err(path: &Path, line: u64, message: impl fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    }
}

/// Reads `id,lon,lat,label[,source]`. Ids must be unique.
pub fn read_buildings(path: &Path) -> Result<Vec<BuildingRecord>> {
    read_building_table(path, true)
}

/// Like [`read_buildings`] but the label column is optional. Rows without
/// a label are treated as damaged so that they are cropped from
/// post-event strips.
pub fn read_sites(path: &Path) -> Result<Vec<BuildingRecord>> {
    read_building_table(path, false)
}

fn read_building_table(path: &Path, labelled: bool) -> Result<Vec<BuildingRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let col = |name| header_index(&headers, name, path);
    let (i_id, i_lon, i_lat) = (col("id")?, col("lon")?, col("lat")?);
    let i_label = if labelled {
        Some(col("label")?)
    } else {
        headers.iter().position(|h| h.trim() == "label")
    };
    let i_source = headers.iter().position(|h| h.trim() == "source");

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let number = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format_err(path, line, format!("{:?} is not a finite number", field(i))))
        };
        let id = field(i_id).to_string();
        if id.is_empty() {
            return Err(format_err(path, line, "empty id"));
        }
        if !seen.insert(id.clone()) {
            return Err(format_err(path, line, format!("duplicate id {id:?}")));
        }
        out.push(BuildingRecord {
            lon: number(i_lon)?,
            lat: number(i_lat)?,
            label: match i_label.map(field) {
                Some(v) if labelled || !v.is_empty() => v.parse().map_err(|e| format_err(path, line, e))?,
                _ => Label::Damaged,
            },
            source: i_source.map(|i| field(i).to_string()).unwrap_or_default(),
            id,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExcludeReason {
    /// The window reaches past the strip edge.
    EdgeOverflow,
    /// The building's pixel lies outside every candidate strip.
    OutOfBounds,
    /// No strip of the matching phase exists.
    NoStrip,
    /// Every chip for the coordinate is totally black.
    NoUsableImage,
    FlaggedBlack,
    FlaggedCloud,
    /// Listed in the operator exclusion file.
    Operator,
}

impl ExcludeReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExcludeReason::EdgeOverflow => "edge_overflow",
            ExcludeReason::OutOfBounds => "out_of_bounds",
            ExcludeReason::NoStrip => "no_strip",
            ExcludeReason::NoUsableImage => "no_usable_image",
            ExcludeReason::FlaggedBlack => "flagged_black",
            ExcludeReason::FlaggedCloud => "flagged_cloud",
            ExcludeReason::Operator => "operator",
        }
    }

    const ALL: [ExcludeReason; 7] = [
        ExcludeReason::EdgeOverflow,
        ExcludeReason::OutOfBounds,
        ExcludeReason::NoStrip,
        ExcludeReason::NoUsableImage,
        ExcludeReason::FlaggedBlack,
        ExcludeReason::FlaggedCloud,
        ExcludeReason::Operator,
    ];
}

impl fmt::Display for ExcludeReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExcludeReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown exclusion reason {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Crop {
    Chip(Tensor<f32>),
    Excluded(ExcludeReason),
}

/// Cuts a `window × window` chip centred on the building's nearest pixel.
/// The window starts `window / 2` pixels before the centre.
pub fn crop_window(raster: &Tensor<f32>, gt: &GeoTransform, record: &BuildingRecord, window: usize) -> Result<Crop> {
    if window == 0 {
        return Err(Error::validation("window extent must be positive"));
    }
    let [c, h, w] = raster.shape() else {
        return Err(Error::shape(format!("raster must be C×H×W, got {:?}", raster.shape())));
    };
    let (c, h, w) = (*c, *h, *w);
    let (col, row) = gt.lonlat_to_pixel(record.lon, record.lat)?;
    let (col, row) = (col.round(), row.round());
    if !(col >= 0.0 && row >= 0.0 && col < w as f64 && row < h as f64) {
        return Ok(Crop::Excluded(ExcludeReason::OutOfBounds));
    }
    let half = (window / 2) as i64;
    let (x0, y0) = (col as i64 - half, row as i64 - half);
    if x0 < 0 || y0 < 0 || x0 + window as i64 > w as i64 || y0 + window as i64 > h as i64 {
        return Ok(Crop::Excluded(ExcludeReason::EdgeOverflow));
    }
    let (x0, y0) = (x0 as usize, y0 as usize);
    let mut data = Vec::with_capacity(c * window * window);
    for ch in 0..c {
        for y in y0..y0 + window {
            let start = ch * h * w + y * w + x0;
            data.extend_from_slice(&raster.data()[start..start + window]);
        }
    }
    Ok(Crop::Chip(Tensor::from_vec(&[c, window, window], data)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityThresholds {
    /// A pixel is black when every channel is below this.
    pub black_pixel: f64,
    /// A pixel is cloud when luma exceeds this ...
    pub cloud_luma: f64,
    /// ... and its channel spread stays below this.
    pub cloud_spread: f64,
    /// Chips at or above this black fraction count as totally black.
    pub totally_black: f64,
    /// Chips above this black fraction are flagged.
    pub max_black_fraction: f64,
    /// Chips above this cloud score are flagged.
    pub max_cloud_score: f64,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        QualityThresholds {
            black_pixel: 0.02,
            cloud_luma: 0.85,
            cloud_spread: 0.08,
            totally_black: 0.999,
            max_black_fraction: 0.05,
            max_cloud_score: 0.30,
        }
    }
}

impl QualityThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("black pixel level", self.black_pixel),
            ("cloud luma", self.cloud_luma),
            ("cloud spread", self.cloud_spread),
            ("totally-black fraction", self.totally_black),
            ("black fraction limit", self.max_black_fraction),
            ("cloud score limit", self.max_cloud_score),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// `(black_fraction, cloud_score)` of a `C×H×W` chip. Luma uses Rec. 601
/// weights for three channels and the single value otherwise.
pub fn quality_metrics(chip: &Tensor<f32>, t: &QualityThresholds) -> Result<(f64, f64)> {
    let [c, h, w] = chip.shape() else {
        return Err(Error::shape(format!("chip must be C×H×W, got {:?}", chip.shape())));
    };
    let (c, plane) = (*c, h * w);
    if c == 0 || plane == 0 {
        return Err(Error::shape("chip is empty"));
    }
    let d = chip.data();
    let (mut black, mut cloud) = (0usize, 0usize);
    for i in 0..plane {
        let px = (0..c).map(|ch| d[ch * plane + i] as f64);
        let (lo, hi) = px.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if hi < t.black_pixel {
            black += 1;
        }
        let luma = if c == 3 {
            0.299 * d[i] as f64 + 0.587 * d[plane + i] as f64 + 0.114 * d[2 * plane + i] as f64
        } else {
            px.sum::<f64>() / c as f64
        };
        if luma > t.cloud_luma && hi - lo < t.cloud_spread {
            cloud += 1;
        }
    }
    Ok((black as f64 / plane as f64, cloud as f64 / plane as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    /// Member of the balanced test set, and therefore also of the unbalanced one.
    TestBalanced,
    /// Member of the unbalanced test set only.
    TestUnbalanced,
    None,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestBalanced => "test_balanced",
            Split::TestUnbalanced => "test_unbalanced",
            Split::None => "none",
        }
    }

    /// Whether a row tagged `row` belongs to the evaluation set named by `self`.
    pub fn contains(self, row: Split) -> bool {
        match self {
            Split::TestUnbalanced => matches!(row, Split::TestBalanced | Split::TestUnbalanced),
            _ => self == row,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Split::Train, Split::Val, Split::TestBalanced, Split::TestUnbalanced, Split::None]
            .into_iter()
            .find(|x| x.as_str() == s.trim())
            .ok_or_else(|| Error::validation(format!("unknown split {s:?}")))
    }
}

/// One manifest row: a building and the chip chosen for it, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct ChipRecord {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub label: Label,
    /// Relative to the manifest's directory; empty when no chip was kept.
    pub chip_path: String,
    pub window_px: usize,
    /// Strip id the chip came from.
    pub source: String,
    pub capture_epoch: Option<i64>,
    pub black_fraction: Option<f64>,
    pub cloud_score: Option<f64>,
    pub exclude_reason: Option<ExcludeReason>,
    pub split: Split,
}

impl ChipRecord {
    pub fn excluded(&self) -> bool {
        self.exclude_reason.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CandidateOutcome {
    Chip { black_fraction: f64, cloud_score: f64 },
    Excluded(ExcludeReason),
}

/// One strip's attempt at a coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub source: String,
    pub capture_epoch: Option<i64>,
    pub outcome: CandidateOutcome,
}

pub fn chip_relative_path(id: &str) -> String {
    format!("chips/{id}.png")
}

/// Picks at most one chip per building and applies the quality rules.
///
/// `candidates[i]` lists building `i`'s crops in strip scan order. The
/// first chip that is not totally black is kept; later ones are ignored.
/// Without an operator list, kept chips over the black or cloud limits are
/// excluded as flagged. With an operator list, the list alone decides which
/// kept chips are excluded.
pub fn dedup_and_filter(
    records: &[BuildingRecord],
    candidates: &[Vec<Candidate>],
    window_px: usize,
    thresholds: &QualityThresholds,
    operator_exclusions: Option<&HashSet<String>>,
) -> Result<Vec<ChipRecord>> {
    if records.len() != candidates.len() {
        return Err(Error::validation(format!(
            "{} buildings but {} candidate lists",
            records.len(),
            candidates.len()
        )));
    }
    let mut out: Vec<ChipRecord> = records
        .iter()
        .zip(candidates)
        .map(|(rec, cands)| {
            let mut row = ChipRecord {
                id: rec.id.clone(),
                lon: rec.lon,
                lat: rec.lat,
                label: rec.label,
                chip_path: String::new(),
                window_px,
                source: String::new(),
                capture_epoch: None,
                black_fraction: None,
                cloud_score: None,
                exclude_reason: None,
                split: Split::None,
            };
            let usable = cands.iter().find(|c| {
                matches!(c.outcome, CandidateOutcome::Chip { black_fraction, .. } if black_fraction < thresholds.totally_black)
            });
            let Some(kept) = usable else {
                let first_chip = cands.iter().find(|c| matches!(c.outcome, CandidateOutcome::Chip { .. }));
                row.exclude_reason = Some(match first_chip {
                    Some(c) => {
                        if let CandidateOutcome::Chip { black_fraction, cloud_score } = c.outcome {
                            row.source = c.source.clone();
                            row.capture_epoch = c.capture_epoch;
                            row.black_fraction = Some(black_fraction);
                            row.cloud_score = Some(cloud_score);
                        }
                        ExcludeReason::NoUsableImage
                    }
                    None if cands.is_empty() => ExcludeReason::NoStrip,
                    None if cands.iter().any(|c| c.outcome == CandidateOutcome::Excluded(ExcludeReason::EdgeOverflow)) => {
                        ExcludeReason::EdgeOverflow
                    }
                    None => ExcludeReason::OutOfBounds,
                });
                return row;
            };
            let CandidateOutcome::Chip { black_fraction, cloud_score } = kept.outcome else {
                unreachable!("usable candidates are chips")
            };
            row.chip_path = chip_relative_path(&rec.id);
            row.source = kept.source.clone();
            row.capture_epoch = kept.capture_epoch;
            row.black_fraction = Some(black_fraction);
            row.cloud_score = Some(cloud_score);
            row.exclude_reason = match operator_exclusions {
                Some(list) => list.contains(&rec.id).then_some(ExcludeReason::Operator),
                None if black_fraction > thresholds.max_black_fraction => Some(ExcludeReason::FlaggedBlack),
                None if cloud_score > thresholds.max_cloud_score => Some(ExcludeReason::FlaggedCloud),
                None => None,
            };
            row
        })
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// One building id per line; blank lines and `#` comments are ignored.
pub fn read_exclusions(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pre,
    Post,
    /// No strips.csv: the strip serves both classes.
    Any,
}

impl Phase {
    fn serves(self, label: Label) -> bool {
        match self {
            Phase::Any => true,
            Phase::Pre => label == Label::Undamaged,
            Phase::Post => label == Label::Damaged,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StripInfo {
    pub id: String,
    pub image_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub capture_epoch: Option<i64>,
    pub phase: Phase,
}

/// Lists the strips of a directory in scan order: the order of `strips.csv`
/// when present, otherwise sorted by id.
pub fn scan_strips(dir: &Path) -> Result<Vec<StripInfo>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    let info = |id: &str, capture_epoch, phase| {
        let sidecar_path = dir.join(format!("{id}.geo"));
        if !sidecar_path.exists() {
            return Err(Error::Format {
                path: sidecar_path,
                message: format!("strip {id} has no geo-transform sidecar"),
            });
        }
        Ok(StripInfo {
            id: id.to_string(),
            image_path: dir.join(format!("{id}.png")),
            sidecar_path,
            capture_epoch,
            phase,
        })
    };

    let meta_path = dir.join("strips.csv");
    if !meta_path.exists() {
        return ids.iter().map(|id| info(id, None, Phase::Any)).collect();
    }
    let mut reader = csv::Reader::from_path(&meta_path).map_err(|e| Error::csv(&meta_path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(&meta_path, e))?.clone();
    let i_id = header_index(&headers, "strip_id", &meta_path)?;
    let i_epoch = header_index(&headers, "capture_epoch", &meta_path)?;
    let i_phase = header_index(&headers, "phase", &meta_path)?;
    let mut listed = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::csv(&meta_path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let id = field(i_id);
        if !ids.iter().any(|x| x == id) {
            return Err(format_err(&meta_path, line, format!("strip {id:?} has no image")));
        }
        if listed.iter().any(|s: &StripInfo| s.id == id) {
            return Err(format_err(&meta_path, line, format!("strip {id:?} listed twice")));
        }
        let epoch = match field(i_epoch) {
            "" => None,
            v => Some(v.parse().map_err(|_| format_err(&meta_path, line, format!("bad capture epoch {v:?}")))?),
        };
        let phase = match field(i_phase) {
            "pre" => Phase::Pre,
            "post" => Phase::Post,
            v => return Err(format_err(&meta_path, line, format!("phase must be pre or post, got {v:?}"))),
        };
        listed.push(info(id, epoch, phase)?);
    }
    if let Some(missing) = ids.iter().find(|id| !listed.iter().any(|s| &s.id == *id)) {
        return Err(Error::Format {
            path: meta_path,
            message: format!("strip {missing:?} is not listed"),
        });
    }
    Ok(listed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropConfig {
    pub window_px: usize,
    pub thresholds: QualityThresholds,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            window_px: DEFAULT_WINDOW_PX,
            thresholds: QualityThresholds::default(),
        }
    }
}

/// Crops every building from the strips in `strip_dir` in scan order and
/// returns each building's candidates. Strips are loaded one at a time.
/// `on_chip` receives the first chip of each building that is not totally
/// black; later strips are not tried for that building.
pub fn crop_candidates(
    buildings: &[BuildingRecord],
    strip_dir: &Path,
    cfg: &CropConfig,
    mut on_chip: impl FnMut(usize, &Tensor<f32>) -> Result<()>,
) -> Result<Vec<Vec<Candidate>>> {
    cfg.thresholds.validate()?;
    if cfg.window_px == 0 {
        return Err(Error::validation("window extent must be positive"));
    }
    let strips = scan_strips(strip_dir)?;
    let mut candidates: Vec<Vec<Candidate>> = vec![Vec::new(); buildings.len()];
    let mut resolved = vec![false; buildings.len()];
    for strip in &strips {
        let raster = load_raster(&strip.image_path, &strip.sidecar_path)?;
        for (i, rec) in buildings.iter().enumerate() {
            if resolved[i] || !strip.phase.serves(rec.label) {
                continue;
            }
            let outcome = match crop_window(&raster.image, &raster.transform, rec, cfg.window_px)? {
                Crop::Excluded(reason) => CandidateOutcome::Excluded(reason),
                Crop::Chip(chip) => {
                    let (black_fraction, cloud_score) = quality_metrics(&chip, &cfg.thresholds)?;
                    if black_fraction < cfg.thresholds.totally_black {
                        on_chip(i, &chip)?;
                        resolved[i] = true;
                    }
                    CandidateOutcome::Chip { black_fraction, cloud_score }
                }
            };
            candidates[i].push(Candidate {
                source: strip.id.clone(),
                capture_epoch: strip.capture_epoch,
                outcome,
            });
        }
    }
    Ok(candidates)
}

/// [`crop_candidates`] plus [`dedup_and_filter`], writing kept chips under
/// `out_dir/chips/`.
pub fn build_manifest(
    buildings: &[BuildingRecord],
    strip_dir: &Path,
    out_dir: &Path,
    cfg: &CropConfig,
    operator_exclusions: Option<&HashSet<String>>,
) -> Result<Vec<ChipRecord>> {
    let candidates = crop_candidates(buildings, strip_dir, cfg, |i, chip| {
        save_chip(chip, &out_dir.join(chip_relative_path(&buildings[i].id)))
    })?;
    dedup_and_filter(buildings, &candidates, cfg.window_px, &cfg.thresholds, operator_exclusions)
}

/// Re-expresses chip paths relative to `to_dir` after moving a manifest
/// from `from_dir`. Chips outside `to_dir` keep an absolute path.
pub fn rebase_chip_paths(rows: &mut [ChipRecord], from_dir: &Path, to_dir: &Path) -> Result<()> {
    let abs = |p: &Path| std::path::absolute(p).map_err(|e| Error::io(p, e));
    let (from_dir, to_dir) = (abs(from_dir)?, abs(to_dir)?);
    if from_dir == to_dir {
        return Ok(());
    }
    for r in rows.iter_mut().filter(|r| !r.chip_path.is_empty()) {
        let full = from_dir.join(&r.chip_path);
        r.chip_path = match full.strip_prefix(&to_dir) {
            Ok(rel) => rel.to_string_lossy().into_owned(),
            Err(_) => full.to_string_lossy().into_owned(),
        };
    }
    Ok(())
}

pub const MANIFEST_COLUMNS: [&str; 13] = [
    "id",
    "lon",
    "lat",
    "label",
    "chip_path",
    "window_px",
    "source",
    "capture_epoch",
    "black_fraction",
    "cloud_score",
    "excluded",
    "exclude_reason",
    "split",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_manifest(rows: &[ChipRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    writer.write_record(MANIFEST_COLUMNS).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        writer
            .write_record([
                r.id.clone(),
                r.lon.to_string(),
                r.lat.to_string(),
                r.label.to_string(),
                r.chip_path.clone(),
                r.window_px.to_string(),
                r.source.clone(),
                opt(r.capture_epoch),
                opt(r.black_fraction),
                opt(r.cloud_score),
                (r.excluded() as u8).to_string(),
                opt(r.exclude_reason),
                r.split.to_string(),
            ])
            .map_err(|e| Error::csv(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ChipRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    if headers.iter().ne(MANIFEST_COLUMNS) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("manifest header must be {}", MANIFEST_COLUMNS.join(",")),
        });
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |what: &str, v: &str| format_err(path, line, format!("bad {what} {v:?}"));
        let f = |i: usize| row.get(i).unwrap_or("");
        let num = |i: usize| f(i).parse::<f64>().map_err(|_| bad(MANIFEST_COLUMNS[i], f(i)));
        let opt_num = |i: usize| -> Result<Option<f64>> {
            if f(i).is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let exclude_reason = match f(11) {
            "" => None,
            v => Some(v.parse().map_err(|_| bad("exclude_reason", v))?),
        };
        let excluded = match f(10) {
            "1" => true,
            "0" => false,
            v => return Err(bad("excluded flag", v)),
        };
        if excluded != exclude_reason.is_some() {
            return Err(format_err(path, line, "excluded flag disagrees with exclude_reason"));
        }
        let rec = ChipRecord {
            id: f(0).to_string(),
            lon: num(1)?,
            lat: num(2)?,
            label: f(3).parse().map_err(|_| bad("label", f(3)))?,
            chip_path: f(4).to_string(),
            window_px: f(5).parse().map_err(|_| bad("window_px", f(5)))?,
            source: f(6).to_string(),
            capture_epoch: match f(7) {
                "" => None,
                v => Some(v.parse().map_err(|_| bad("capture_epoch", v))?),
            },
            black_fraction: opt_num(8)?,
            cloud_score: opt_num(9)?,
            exclude_reason,
            split: f(12).parse().map_err(|_| bad("split", f(12)))?,
        };
        if !seen.insert(rec.id.clone()) {
            return Err(format_err(path, line, format!("duplicate id {:?}", rec.id)));
        }
        if rec.excluded() && rec.split != Split::None {
            return Err(format_err(path, line, "excluded row carries a split"));
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub balanced_test_per_class: usize,
    pub unbalanced_negatives: usize,
    /// Positives per negative in the unbalanced test set.
    pub unbalanced_ratio: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_per_class: 5000,
            val_per_class: 1000,
            balanced_test_per_class: 1000,
            unbalanced_negatives: 1000,
            unbalanced_ratio: 8,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn unbalanced_positives(&self) -> usize {
        self.unbalanced_negatives * self.unbalanced_ratio
    }

    /// Rows of `label` the spec consumes.
    pub fn required(&self, label: Label) -> usize {
        let test = match label {
            Label::Damaged => self.unbalanced_positives(),
            Label::Undamaged => self.unbalanced_negatives,
        };
        self.train_per_class + self.val_per_class + test.max(self.balanced_test_per_class)
    }

    /// The unbalanced test set contains the balanced one, so it must be at
    /// least as large in each class.
    pub fn validate(&self) -> Result<()> {
        let n = self.balanced_test_per_class;
        if self.unbalanced_negatives < n || self.unbalanced_positives() < n {
            return Err(Error::validation(format!(
                "unbalanced test set ({} positives, {} negatives) must contain the balanced one ({n} per class)",
                self.unbalanced_positives(),
                self.unbalanced_negatives
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: [usize; 2],
    pub val: [usize; 2],
    pub test_balanced: [usize; 2],
    pub test_unbalanced: [usize; 2],
}

/// Assigns splits to the non-excluded rows.
///
/// Each class is shuffled with its own seeded stream, then cut into train,
/// val, balanced test, and the extra rows that complete the unbalanced test
/// set. Counts in the result are indexed by label value; `test_unbalanced`
/// counts the whole unbalanced set, balanced rows included.
pub fn make_splits(rows: &mut [ChipRecord], spec: &SplitSpec) -> Result<SplitCounts> {
    spec.validate()?;
    for r in rows.iter_mut() {
        r.split = Split::None;
    }
    let mut counts = SplitCounts::default();
    for label in [Label::Damaged, Label::Undamaged] {
        let mut pool: Vec<usize> = (0..rows.len())
            .filter(|&i| !rows[i].excluded() && rows[i].label == label)
            .collect();
        pool.sort_by(|&a, &b| rows[a].id.cmp(&rows[b].id));
        let required = spec.required(label);
        if pool.len() < required {
            return Err(Error::Sizing {
                class: label.to_string(),
                required,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut substream(spec.seed, label.value() as u64));
        let unbalanced = match label {
            Label::Damaged => spec.unbalanced_positives(),
            Label::Undamaged => spec.unbalanced_negatives,
        };
        let cuts = [
            (Split::Train, spec.train_per_class),
            (Split::Val, spec.val_per_class),
            (Split::TestBalanced, spec.balanced_test_per_class),
            (Split::TestUnbalanced, unbalanced - spec.balanced_test_per_class),
        ];
        let mut it = pool.into_iter();
        for (split, n) in cuts {
            for i in it.by_ref().take(n) {
                rows[i].split = split;
            }
        }
        let k = label.value() as usize;
        counts.train[k] = spec.train_per_class;
        counts.val[k] = spec.val_per_class;
        counts.test_balanced[k] = spec.balanced_test_per_class;
        counts.test_unbalanced[k] = unbalanced;
    }
    Ok(counts)
}

/// Rows belonging to an evaluation set.
pub fn select_split(rows: &[ChipRecord], split: Split) -> Vec<&ChipRecord> {
    rows.iter().filter(|r| !r.excluded() && split.contains(r.split)).collect()
}

/// Chips read from disk on demand and resized to the network input.
pub struct ChipDataset {
    paths: Vec<PathBuf>,
    labels: Vec<u8>,
    shape: Vec<usize>,
}

impl ChipDataset {
    /// `base` is the manifest's directory; chips are resized to `h × w`.
    pub fn new(rows: &[&ChipRecord], base: &Path, h: usize, w: usize) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.chip_path.is_empty()) {
            return Err(Error::validation(format!("row {} has no chip", r.id)));
        }
        Ok(ChipDataset {
            paths: rows.iter().map(|r| base.join(&r.chip_path)).collect(),
            labels: rows.iter().map(|r| r.label.value()).collect(),
            shape: vec![3, h, w],
        })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, index: usize) -> Result<Tensor<f32>> {
        let chip = load_image(&self.paths[index])?;
        resize_bilinear(&chip, self.shape[1], self.shape[2])
    }
}

impl<T: Scalar> Dataset<T> for ChipDataset {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn sample_shape(&self) -> &[usize] {
        &self.shape
    }

    fn sample(&self, index: usize) -> Result<(Tensor<T>, T)> {
        Ok((self.image(index)?.cast(), T::from_f64(self.labels[index] as f64)))
    }
}

/// Per-class counts of non-excluded rows.
pub fn class_counts(rows: &[ChipRecord]) -> HashMap<Label, usize> {
    let mut out = HashMap::new();
    for r in rows.iter().filter(|r| !r.excluded()) {
        *out.entry(r.label).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn building(id: &str, lon: f64, lat: f64, label: Label) -> BuildingRecord {
        BuildingRecord {
            id: id.into(),
            lon,
            lat,
            label,
            source: String::new(),
        }
    }

    #[test]
    fn identity_and_scaled_transforms() {
        let id = GeoTransform::new([0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(id.pixel_to_lonlat(10.0, 20.0), (10.0, 20.0));
        assert_eq!(id.lonlat_to_pixel(10.0, 20.0).unwrap(), (10.0, 20.0));

        let gt = GeoTransform::new([-95.0, 1e-5, 0.0, 29.0, 0.0, -1e-5]).unwrap();
        let (lon, lat) = gt.pixel_to_lonlat(100.0, 200.0);
        assert!((lon - -94.999).abs() < 1e-12);
        assert!((lat - 28.998).abs() < 1e-12);
    }

    #[test]
    fn sheared_inverse_matches_linear_solve() {
        let gt = GeoTransform::new([3.0, 0.7, 0.2, -1.0, -0.3, 1.1]).unwrap();
        let (lon, lat) = (5.5, 2.25);
        // Cramer's rule on [b c; e f]·[col; row] = [lon − a; lat − d].
        let (r0, r1) = (lon - 3.0, lat + 1.0);
        let det = 0.7 * 1.1 - 0.2 * -0.3;
        let col = (r0 * 1.1 - 0.2 * r1) / det;
        let row = (0.7 * r1 - -0.3 * r0) / det;
        let (c, r) = gt.lonlat_to_pixel(lon, lat).unwrap();
        assert!((c - col).abs() < 1e-12 && (r - row).abs() < 1e-12);
    }

    #[test]
    fn singular_and_malformed_sidecars() {
        assert!(GeoTransform::new([0.0, 1.0, 2.0, 0.0, 2.0, 4.0]).is_err());
        assert!(GeoTransform::new([0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        let p = Path::new("x.geo");
        assert!(matches!(GeoTransform::parse("1\n2\n3\n", p), Err(Error::Format { .. })));
        assert!(matches!(GeoTransform::parse("0\n1\n0\n0\n0\nz\n", p), Err(Error::Format { .. })));
        let gt = GeoTransform::parse("-95\n1e-5\n0\n29\n0\n-1e-5\n", p).unwrap();
        assert_eq!(GeoTransform::parse(&gt.to_sidecar(), p).unwrap(), gt);
    }

    #[test]
    fn png_roundtrip_scales_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let vals: Vec<f32> = (0..48).map(|i| (i * 5) as f32 / 255.0).collect();
        let mut full = vals.clone();
        full[0] = 1.0;
        let chip = Tensor::from_vec(&[3, 4, 4], full).unwrap();
        save_chip(&chip, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data()[0], 1.0);
        assert_eq!(back, chip);
    }

    fn constant_raster(h: usize, w: usize, v: f32) -> Tensor<f32> {
        Tensor::new(&[3, h, w], v).unwrap()
    }

    #[test]
    fn crop_at_centre_and_edges() {
        let raster = Tensor::from_vec(&[3, 300, 400], (0..3 * 300 * 400).map(|i| (i % 251) as f32 / 251.0).collect()).unwrap();
        let gt = GeoTransform::IDENTITY;
        let centre = building("a", 200.0, 150.0, Label::Damaged);
        let Crop::Chip(chip) = crop_window(&raster, &gt, &centre, 128).unwrap() else {
            panic!("centre crop excluded")
        };
        assert_eq!(chip.shape(), &[3, 128, 128]);
        // Top-left of the chip is pixel (200 − 64, 150 − 64) of the strip.
        assert_eq!(chip.at(&[1, 0, 0]), raster.at(&[1, 86, 136]));
        assert_eq!(chip.at(&[2, 127, 127]), raster.at(&[2, 213, 263]));

        let corner = building("b", 0.0, 0.0, Label::Damaged);
        assert_eq!(crop_window(&raster, &gt, &corner, 128).unwrap(), Crop::Excluded(ExcludeReason::EdgeOverflow));
        let outside = building("c", -5.0, 10.0, Label::Damaged);
        assert_eq!(crop_window(&raster, &gt, &outside, 128).unwrap(), Crop::Excluded(ExcludeReason::OutOfBounds));
        // The last window that fits: centre 400 − 64 would end at column 400.
        let right = building("d", 336.0, 150.0, Label::Damaged);
        assert!(matches!(crop_window(&raster, &gt, &right, 128).unwrap(), Crop::Chip(_)));
        let over = building("e", 336.6, 150.0, Label::Damaged);
        assert_eq!(crop_window(&raster, &gt, &over, 128).unwrap(), Crop::Excluded(ExcludeReason::EdgeOverflow));

        let flat = constant_raster(50, 50, 0.25);
        let Crop::Chip(c) = crop_window(&flat, &gt, &building("f", 25.0, 25.0, Label::Undamaged), 32).unwrap() else {
            panic!()
        };
        assert!(c.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn quality_metric_fixtures() {
        let t = QualityThresholds::default();
        assert_eq!(quality_metrics(&constant_raster(8, 8, 0.0), &t).unwrap(), (1.0, 0.0));
        assert_eq!(quality_metrics(&constant_raster(8, 8, 1.0), &t).unwrap(), (0.0, 1.0));
        let mut half = constant_raster(8, 8, 0.5);
        for ch in 0..3 {
            for y in 0..4 {
                for x in 0..8 {
                    half.data_mut()[ch * 64 + y * 8 + x] = 0.0;
                }
            }
        }
        assert_eq!(quality_metrics(&half, &t).unwrap(), (0.5, 0.0));
        // Bright but saturated is not cloud.
        let mut red = constant_raster(2, 2, 0.0);
        red.data_mut()[..4].fill(1.0);
        red.data_mut()[4..8].fill(1.0);
        assert_eq!(quality_metrics(&red, &t).unwrap().1, 0.0);
    }

    fn chip(source: &str, black: f64, cloud: f64) -> Candidate {
        Candidate {
            source: source.into(),
            capture_epoch: None,
            outcome: CandidateOutcome::Chip {
                black_fraction: black,
                cloud_score: cloud,
            },
        }
    }

    fn excluded(source: &str, reason: ExcludeReason) -> Candidate {
        Candidate {
            source: source.into(),
            capture_epoch: None,
            outcome: CandidateOutcome::Excluded(reason),
        }
    }

    #[test]
    fn dedup_rules() {
        let t = QualityThresholds::default();
        let recs = vec![
            building("a", 0.0, 0.0, Label::Damaged),
            building("b", 0.0, 0.0, Label::Damaged),
            building("c", 0.0, 0.0, Label::Undamaged),
            building("d", 0.0, 0.0, Label::Undamaged),
            building("e", 0.0, 0.0, Label::Undamaged),
            building("f", 0.0, 0.0, Label::Damaged),
        ];
        let cands = vec![
            vec![chip("s1", 1.0, 0.0), chip("s2", 0.01, 0.0), chip("s3", 0.0, 0.0)],
            vec![chip("s1", 0.999, 0.0), chip("s2", 1.0, 0.0)],
            vec![excluded("s1", ExcludeReason::OutOfBounds), excluded("s2", ExcludeReason::EdgeOverflow)],
            vec![],
            vec![chip("s1", 0.2, 0.0)],
            vec![chip("s1", 0.0, 0.5)],
        ];
        let rows = dedup_and_filter(&recs, &cands, 128, &t, None).unwrap();
        assert_eq!(rows[0].source, "s2");
        assert_eq!(rows[0].exclude_reason, None);
        assert_eq!(rows[0].chip_path, "chips/a.png");
        assert_eq!(rows[1].exclude_reason, Some(ExcludeReason::NoUsableImage));
        assert_eq!(rows[1].chip_path, "");
        assert_eq!(rows[2].exclude_reason, Some(ExcludeReason::EdgeOverflow));
        assert_eq!(rows[3].exclude_reason, Some(ExcludeReason::NoStrip));
        assert_eq!(rows[4].exclude_reason, Some(ExcludeReason::FlaggedBlack));
        assert_eq!(rows[5].exclude_reason, Some(ExcludeReason::FlaggedCloud));

        let operator: HashSet<String> = ["a".to_string()].into();
        let rows = dedup_and_filter(&recs, &cands, 128, &t, Some(&operator)).unwrap();
        assert_eq!(rows[0].exclude_reason, Some(ExcludeReason::Operator));
        assert_eq!(rows[4].exclude_reason, None);
        assert_eq!(rows[5].exclude_reason, None);
        assert_eq!(rows[1].exclude_reason, Some(ExcludeReason::NoUsableImage));
    }

    #[test]
    fn exclusion_file_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ex.txt");
        std::fs::write(&p, "# reviewed\nb1\n\n  b2  # cloudy\n#b3\n").unwrap();
        let set = read_exclusions(&p).unwrap();
        assert_eq!(set, ["b1".to_string(), "b2".to_string()].into());
    }

    fn synthetic_rows(pos: usize, neg: usize) -> Vec<ChipRecord> {
        let mk = |i: usize, label| ChipRecord {
            id: format!("{i:06}"),
            lon: 0.0,
            lat: 0.0,
            label,
            chip_path: chip_relative_path(&format!("{i:06}")),
            window_px: 128,
            source: "s".into(),
            capture_epoch: Some(7),
            black_fraction: Some(0.0),
            cloud_score: Some(0.0),
            exclude_reason: None,
            split: Split::None,
        };
        (0..pos).map(|i| mk(i, Label::Damaged)).chain((pos..pos + neg).map(|i| mk(i, Label::Undamaged))).collect()
    }

    fn tally(rows: &[ChipRecord], split: Split) -> [usize; 2] {
        let mut out = [0; 2];
        for r in select_split(rows, split) {
            out[r.label.value() as usize] += 1;
        }
        out
    }

    #[test]
    fn default_splits_on_full_sized_manifest() {
        let mut rows = synthetic_rows(14_284, 7_209);
        let counts = make_splits(&mut rows, &SplitSpec::default()).unwrap();
        assert_eq!(tally(&rows, Split::Train), [5000, 5000]);
        assert_eq!(tally(&rows, Split::Val), [1000, 1000]);
        assert_eq!(tally(&rows, Split::TestBalanced), [1000, 1000]);
        assert_eq!(tally(&rows, Split::TestUnbalanced), [1000, 8000]);
        assert_eq!(counts.test_unbalanced, [1000, 8000]);

        let mut again = synthetic_rows(14_284, 7_209);
        make_splits(&mut again, &SplitSpec::default()).unwrap();
        assert_eq!(rows, again);
        let mut other = synthetic_rows(14_284, 7_209);
        make_splits(&mut other, &SplitSpec { seed: 1, ..SplitSpec::default() }).unwrap();
        assert_ne!(rows, other);
    }

    #[test]
    fn sizing_error_names_the_short_class() {
        let mut rows = synthetic_rows(14_284, 6_000);
        match make_splits(&mut rows, &SplitSpec::default()) {
            Err(Error::Sizing { class, required, available }) => {
                assert_eq!((class.as_str(), required, available), ("undamaged", 7000, 6000));
            }
            other => panic!("expected sizing error, got {other:?}"),
        }
        let bad = SplitSpec {
            unbalanced_negatives: 10,
            ..SplitSpec::default()
        };
        assert!(make_splits(&mut rows, &bad).is_err());
    }

    #[test]
    fn excluded_rows_never_get_a_split() {
        let mut rows = synthetic_rows(40, 40);
        for r in rows.iter_mut().step_by(3) {
            r.exclude_reason = Some(ExcludeReason::Operator);
        }
        let spec = SplitSpec {
            train_per_class: 10,
            val_per_class: 5,
            balanced_test_per_class: 2,
            unbalanced_negatives: 2,
            unbalanced_ratio: 3,
            seed: 4,
        };
        make_splits(&mut rows, &spec).unwrap();
        assert!(rows.iter().filter(|r| r.excluded()).all(|r| r.split == Split::None));
        assert_eq!(tally(&rows, Split::TestUnbalanced), [2, 6]);
    }

    #[test]
    fn manifest_roundtrip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut rows = synthetic_rows(3, 2);
        rows[1].exclude_reason = Some(ExcludeReason::EdgeOverflow);
        rows[1].chip_path.clear();
        rows[1].black_fraction = None;
        rows[2].split = Split::Val;
        rows[0].lon = -94.999_123_456_789;
        write_manifest(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "id,lon,lat,label,chip_path,window_px,source,capture_epoch,black_fraction,cloud_score,excluded,exclude_reason,split\n"
        ));
        assert!(!text.contains('\r'));
        assert_eq!(read_manifest(&path).unwrap(), rows);
    }

    #[test]
    fn buildings_csv_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        std::fs::write(&p, "id,lon,lat,label\nb1,-95.1,29.7,damaged\nb2,-95.2,29.8,undamaged\n").unwrap();
        let recs = read_buildings(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].label, Label::Undamaged);
        std::fs::write(&p, "id,lon,lat,label\nb1,-95.1,29.7,damaged\nb1,-95.2,29.8,undamaged\n").unwrap();
        assert!(read_buildings(&p).is_err());
        std::fs::write(&p, "id,lon,lat,label\nb1,nan,29.7,damaged\n").unwrap();
        assert!(read_buildings(&p).is_err());
        std::fs::write(&p, "id,lon,label\nb1,1,damaged\n").unwrap();
        assert!(read_buildings(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pixel_roundtrip(coeffs in proptest::array::uniform6(-2.0f64..2.0), col in -500.0f64..500.0, row in -500.0f64..500.0) {
            let mut coeffs = coeffs;
            coeffs[0] *= 500.0;
            coeffs[3] *= 500.0;
            if let Ok(gt) = GeoTransform::new(coeffs) {
                let det = (coeffs[1] * coeffs[5] - coeffs[2] * coeffs[4]).abs();
                proptest::prop_assume!(det > 0.1);
                let (lon, lat) = gt.pixel_to_lonlat(col, row);
                let (c, r) = gt.lonlat_to_pixel(lon, lat).unwrap();
                prop_assert!((c - col).abs() <= 1e-9 && (r - row).abs() <= 1e-9);
            }
        }

        #[test]
        fn metrics_stay_in_unit_range(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let chip = Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap();
            let (b, c) = quality_metrics(&chip, &QualityThresholds::default()).unwrap();
            prop_assert!((0.0..=1.0).contains(&b) && (0.0..=1.0).contains(&c));
        }

        #[test]
        fn at_most_one_usable_chip_per_id(seed in any::<u64>(), n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let recs: Vec<_> = (0..n).map(|i| building(&format!("b{i}"), 0.0, 0.0, Label::Damaged)).collect();
            let cands: Vec<Vec<Candidate>> = (0..n)
                .map(|_| {
                    (0..rng.random_range(0..5))
                        .map(|s| chip(&format!("s{s}"), if rng.random_bool(0.5) { 1.0 } else { rng.random::<f64>() * 0.1 }, 0.0))
                        .collect()
                })
                .collect();
            let rows = dedup_and_filter(&recs, &cands, 64, &QualityThresholds::default(), None).unwrap();
            prop_assert_eq!(rows.len(), n);
            let mut ids = HashSet::new();
            for r in rows.iter().filter(|r| !r.excluded()) {
                prop_assert!(ids.insert(r.id.clone()));
            }
        }
    }
}
