//! File formats and configuration parsing.
//!
//! - Images: binary 16-bit portable graymaps. Intensities are mapped linearly from a
//!   caller-chosen range onto `0..=65535` and clipped.
//! - Displacement fields: `DRPCAF1` magic, then `m`, `n`, `N` as little-endian `u32`,
//!   then `N·m·n·2` little-endian `f64` ordered frame, pixel (row-major), component.
//!   Values are in pixel units.
//! - Landmarks: one `frame,landmark,x,y` line per landmark, coordinates in pixels.
//! - Configuration: TOML with exactly the keys of the corresponding struct.
//! - Tables: comma-separated with a header line.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::codecs::pnm::{GraymapHeader, PnmEncoder, SampleEncoding};
use image::{ImageBuffer, ImageReader, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DisplacementField, Image, LandmarkSet, Spacing};
use crate::multilevel::{RegistrationConfig, StepDiagnostics};
use crate::synth::{EllipseSceneConfig, LandscapeRow};

pub const FIELD_MAGIC: &[u8; 7] = b"DRPCAF1";

/// Intensity range stored in graymaps of nonnegative images.
pub const UNIT_RANGE: [f64; 2] = [0.0, 1.0];
/// Intensity range stored in graymaps of signed images such as sparse residuals.
pub const SIGNED_RANGE: [f64; 2] = [-1.0, 1.0];

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::from(e).context(format!("creating {}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::from(e).context(format!("opening {}", path.display())))
}

fn quantize(v: f64, range: [f64; 2]) -> u16 {
    let t = ((v - range[0]) / (range[1] - range[0])).clamp(0.0, 1.0);
    (t * 65535.0).round() as u16
}

/// Encodes `image` as a binary 16-bit graymap.
pub fn write_pgm<W: Write>(writer: W, image: &Image, range: [f64; 2]) -> Result<()> {
    if !(range[1] > range[0]) {
        return Err(Error::invalid(format!("empty intensity range {range:?}")));
    }
    let data: Vec<u16> = image.values().iter().map(|&v| quantize(v, range)).collect();
    let buffer: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(image.cols() as u32, image.rows() as u32, data)
            .ok_or_else(|| Error::dims("image buffer size"))?;
    let header = GraymapHeader {
        encoding: SampleEncoding::Binary,
        height: image.rows() as u32,
        width: image.cols() as u32,
        maxwhite: 65535,
    };
    let encoder = PnmEncoder::new(writer).with_header(header.into());
    buffer
        .write_with_encoder(encoder)
        .map_err(|e| Error::Format(format!("graymap encoding: {e}")))
}

pub fn save_pgm(path: &Path, image: &Image, range: [f64; 2]) -> Result<()> {
    let mut w = create(path)?;
    write_pgm(&mut w, image, range)?;
    w.flush()?;
    Ok(())
}

/// Reads any graymap (8- or 16-bit) with intensities scaled to `[0, 1]`.
pub fn load_pgm(path: &Path) -> Result<Image> {
    let reader = ImageReader::with_format(open(path)?, image::ImageFormat::Pnm);
    let decoded = reader.decode().map_err(|e| format_err(path, e))?;
    let gray = decoded.into_luma16();
    let (cols, rows) = gray.dimensions();
    let values = gray.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    Image::new(rows as usize, cols as usize, values)
}

/// Serializes full-resolution fields; all must share one grid.
pub fn write_fields<W: Write>(mut writer: W, fields: &[DisplacementField]) -> Result<()> {
    let first = fields.first().ok_or_else(|| Error::invalid("no fields to write"))?;
    let (m, n) = (first.rows(), first.cols());
    if fields.iter().any(|f| f.rows() != m || f.cols() != n) {
        return Err(Error::dims("fields of different sizes"));
    }
    let as_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::invalid(format!("{v} exceeds u32")));
    writer.write_all(FIELD_MAGIC)?;
    for v in [m, n, fields.len()] {
        writer.write_all(&as_u32(v)?.to_le_bytes())?;
    }
    for f in fields {
        for i in 0..m {
            for j in 0..n {
                for c in f.at(i, j) {
                    writer.write_all(&c.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_fields<R: Read>(mut reader: R) -> Result<Vec<DisplacementField>> {
    let mut magic = [0u8; 7];
    reader.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(Error::Format("missing DRPCAF1 magic".into()));
    }
    let mut word = [0u8; 4];
    let mut dims = [0usize; 3];
    for d in &mut dims {
        reader.read_exact(&mut word)?;
        *d = u32::from_le_bytes(word) as usize;
    }
    let [m, n, frames] = dims;
    let mn = m * n;
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != frames * mn * 16 {
        return Err(Error::Format(format!(
            "field payload of {} bytes does not match {m}x{n}x{frames}",
            bytes.len()
        )));
    }
    let mut chunks = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut values = vec![0.0; 2 * mn];
        for p in 0..mn {
            values[p] = chunks.next().unwrap();
            values[mn + p] = chunks.next().unwrap();
        }
        out.push(DisplacementField::from_values(m, n, Spacing::UNIT, values)?);
    }
    Ok(out)
}

pub fn save_fields(path: &Path, fields: &[DisplacementField]) -> Result<()> {
    let mut w = create(path)?;
    write_fields(&mut w, fields)?;
    w.flush()?;
    Ok(())
}

pub fn load_fields(path: &Path) -> Result<Vec<DisplacementField>> {
    read_fields(open(path)?).map_err(|e| e.context(format!("reading {}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkLine {
    frame: usize,
    landmark: usize,
    x: f64,
    y: f64,
}

pub fn write_landmarks<W: Write>(writer: W, frames: &[LandmarkSet]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for (frame, set) in frames.iter().enumerate() {
        for (landmark, p) in set.positions().iter().enumerate() {
            w.serialize(LandmarkLine {
                frame,
                landmark,
                x: p[0],
                y: p[1],
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses landmark lines; frames and landmark indices must be dense and every frame
/// must list the same landmarks.
pub fn read_landmarks<R: Read>(reader: R) -> Result<Vec<LandmarkSet>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut frames: Vec<Vec<Option<[f64; 2]>>> = Vec::new();
    for line in r.deserialize::<LandmarkLine>() {
        let line = line.map_err(csv_err)?;
        if frames.len() <= line.frame {
            frames.resize(line.frame + 1, Vec::new());
        }
        let set = &mut frames[line.frame];
        if set.len() <= line.landmark {
            set.resize(line.landmark + 1, None);
        }
        if set[line.landmark].replace([line.x, line.y]).is_some() {
            return Err(Error::Format(format!(
                "landmark {} listed twice in frame {}",
                line.landmark, line.frame
            )));
        }
    }
    let count = frames.first().map_or(0, Vec::len);
    frames
        .into_iter()
        .enumerate()
        .map(|(k, set)| {
            if set.len() != count || set.iter().any(Option::is_none) {
                return Err(Error::Format(format!("frame {k} does not list landmarks 0..{count}")));
            }
            LandmarkSet::new(set.into_iter().flatten().collect())
        })
        .collect()
}

pub fn save_landmarks(path: &Path, frames: &[LandmarkSet]) -> Result<()> {
    write_landmarks(create(path)?, frames)
}

pub fn load_landmarks(path: &Path) -> Result<Vec<LandmarkSet>> {
    read_landmarks(open(path)?).map_err(|e| e.context(format!("reading {}", path.display())))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::invalid(format!("configuration: {}", e.message())))
}

/// Parses and validates a registration configuration. Missing keys take defaults.
pub fn parse_registration_config(text: &str) -> Result<RegistrationConfig> {
    let config: RegistrationConfig = parse_toml(text)?;
    config.validate()?;
    Ok(config)
}

pub fn registration_config_to_toml(config: &RegistrationConfig) -> String {
    toml::to_string(config).expect("registration config serializes")
}

/// Synthetic scene request: image size and frame count, with optional geometry
/// overrides in output pixels. Unset geometry keys are the reference scene rescaled to
/// the requested size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_size")]
    pub rows: usize,
    #[serde(default = "default_size")]
    pub cols: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semi_axes: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_center: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stripe_period: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stripe_levels: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rectangle: Option<[[f64; 2]; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_inset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_thickness: Option<f64>,
}

fn default_size() -> usize {
    crate::synth::REFERENCE_SIZE as usize
}

fn default_frames() -> usize {
    10
}

impl Default for SynthConfig {
    fn default() -> Self {
        parse_toml("").expect("empty synth config")
    }
}

impl SynthConfig {
    pub fn scene(&self) -> Result<EllipseSceneConfig> {
        let mut s = EllipseSceneConfig::scaled(self.rows, self.cols, self.frames);
        macro_rules! apply {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { s.$f = v; })* };
        }
        apply!(
            semi_axes,
            path_center,
            path_radius,
            stripe_period,
            stripe_levels,
            rectangle,
            frame_inset,
            frame_thickness
        );
        s.validate()?;
        Ok(s)
    }
}

pub fn parse_synth_config(text: &str) -> Result<SynthConfig> {
    let config: SynthConfig = parse_toml(text)?;
    config.scene()?;
    Ok(config)
}

pub fn synth_config_to_toml(config: &SynthConfig) -> String {
    toml::to_string(config).expect("synth config serializes")
}

#[derive(Serialize)]
struct DiagnosticsLine {
    level: usize,
    step: usize,
    nu: f64,
    norm_estimate: f64,
    solver_iters: usize,
    residual: f64,
    data_energy: f64,
    tv_energy: f64,
}

pub fn write_diagnostics<W: Write>(writer: W, steps: &[StepDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in steps {
        w.serialize(DiagnosticsLine {
            level: s.level,
            step: s.step,
            nu: s.nu,
            norm_estimate: s.norm_estimate,
            solver_iters: s.solver_iterations,
            residual: s.residual,
            data_energy: s.data_energy,
            tv_energy: s.tv_energy,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SingularValueLine {
    level: usize,
    step: usize,
    index: usize,
    value: f64,
}

/// One line per singular value of `L − L̄` per linearization step.
pub fn write_singular_values<W: Write>(writer: W, steps: &[StepDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in steps {
        for (index, &value) in s.singular_values.iter().enumerate() {
            w.serialize(SingularValueLine {
                level: s.level,
                step: s.step,
                index,
                value,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct LandscapeLine {
    j: i64,
    total_energy: f64,
    term1: Option<f64>,
    term2: Option<f64>,
}

/// Landscape table; the decomposition columns stay empty for metrics without them.
pub fn write_landscape<W: Write>(writer: W, rows: &[LandscapeRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(LandscapeLine {
            j: r.step,
            total_energy: r.total,
            term1: r.term1,
            term2: r.term2,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct AccuracyLine {
    landmark: usize,
    before: f64,
    after: f64,
}

pub fn write_landmark_accuracy<W: Write>(writer: W, before: &[f64], after: &[f64]) -> Result<()> {
    if before.len() != after.len() {
        return Err(Error::dims("before/after accuracy lengths differ"));
    }
    let mut w = csv::Writer::from_writer(writer);
    for (landmark, (&b, &a)) in before.iter().zip(after).enumerate() {
        w.serialize(AccuracyLine {
            landmark,
            before: b,
            after: a,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
