//! Command execution. Outputs are written into a staging directory inside the target and
//! moved into place only after every file, including the manifest, has been written.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use drpca::grid::map_landmarks;
use drpca::io::{self, SIGNED_RANGE, UNIT_RANGE};
use drpca::metrics::{landmark_accuracy, MetricSettings};
use drpca::multilevel::register;
use drpca::synth::{generate_ellipse_sequence, landscape, DeformationSchedule};
use log::{info, warn};
use tempfile::TempDir;

use crate::manifest::{self, FileRecord, Invocation, RunManifest, Timing, MANIFEST_VERSION};
use crate::Failure;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const FIELDS_NAME: &str = "fields.drpcaf";
pub const LANDMARKS_NAME: &str = "landmarks.txt";

/// Where a command's files go: a directory plus, for single-table commands, the table name.
#[derive(Clone, Debug)]
pub struct Destination {
    pub dir: PathBuf,
    pub table: Option<String>,
    pub manifest: String,
}

impl Destination {
    pub fn directory(dir: &Path) -> Self {
        Destination {
            dir: dir.to_path_buf(),
            table: None,
            manifest: MANIFEST_NAME.into(),
        }
    }

    pub fn table(path: &Path) -> Result<Self, Failure> {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Failure::Usage(format!("{} is not a file path", path.display())))?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        Ok(Destination {
            dir,
            table: Some(name.to_string()),
            manifest: format!("{name}.manifest.json"),
        })
    }
}

struct Staging {
    dir: TempDir,
    names: Vec<String>,
}

impl Staging {
    fn new(target: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(target).map_err(|e| Failure::io(format!("creating {}", target.display()), e))?;
        let dir = tempfile::Builder::new()
            .prefix(".drpca-staging-")
            .tempdir_in(target)
            .map_err(|e| Failure::io(format!("staging in {}", target.display()), e))?;
        Ok(Staging { dir, names: Vec::new() })
    }

    fn file(&mut self, name: impl Into<String>) -> PathBuf {
        let name = name.into();
        let path = self.dir.path().join(&name);
        self.names.push(name);
        path
    }

    fn create(&mut self, name: impl Into<String>) -> Result<BufWriter<File>, Failure> {
        let path = self.file(name);
        File::create(&path)
            .map(BufWriter::new)
            .map_err(|e| Failure::io(format!("creating {}", path.display()), e))
    }

    fn records(&self) -> Result<Vec<FileRecord>, Failure> {
        self.names
            .iter()
            .map(|n| manifest::record(&self.dir.path().join(n), Path::new(n)))
            .collect()
    }

    fn commit(self, target: &Path, manifest_name: &str, manifest_json: &str) -> Result<(), Failure> {
        let staged = self.dir.path().join(manifest_name);
        fs::write(&staged, manifest_json).map_err(|e| Failure::io(format!("writing {}", staged.display()), e))?;
        for name in self.names.iter().map(String::as_str).chain([manifest_name]) {
            let to = target.join(name);
            fs::rename(self.dir.path().join(name), &to)
                .map_err(|e| Failure::io(format!("moving output to {}", to.display()), e))?;
        }
        Ok(())
    }
}

fn finish(w: BufWriter<File>) -> Result<(), Failure> {
    w.into_inner()
        .map_err(|e| Failure::io("flushing output", e.into_error()))?
        .sync_all()
        .map_err(|e| Failure::io("flushing output", e))
}

struct Clock(Vec<Timing>, Instant);

impl Clock {
    fn start() -> Self {
        Clock(Vec::new(), Instant::now())
    }

    fn lap(&mut self, phase: &str) {
        let now = Instant::now();
        self.0.push(Timing {
            phase: phase.into(),
            seconds: (now - self.1).as_secs_f64(),
        });
        self.1 = now;
    }
}

/// Runs `invocation`, writes its outputs and manifest under `dest`, and returns the manifest.
pub fn run(invocation: &Invocation, dest: &Destination) -> Result<RunManifest, Failure> {
    let inputs = invocation
        .inputs()
        .into_iter()
        .map(|p| manifest::record(p, p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut staging = Staging::new(&dest.dir)?;
    let mut clock = Clock::start();
    let mut level_spacing = None;
    match invocation {
        Invocation::Synth { config } => {
            let scene = config.scene()?;
            let seq = generate_ellipse_sequence(&scene)?;
            clock.lap("generate");
            for (k, im) in seq.images.iter().enumerate() {
                io::save_pgm(&staging.file(format!("frame_{k:03}.pgm")), im, UNIT_RANGE)?;
            }
            let mut w = staging.create(LANDMARKS_NAME)?;
            io::write_landmarks(&mut w, &seq.landmarks)?;
            finish(w)?;
            clock.lap("write");
        }
        Invocation::Register { images, config } => {
            let group = load_images(images)?;
            clock.lap("load");
            let result = register(&group, config)?;
            clock.lap("register");
            info!(
                "registered {} images; final nu {:.6e} of initial {:.6e}",
                group.len(),
                result.final_nu,
                result.initial_nuclear_norm
            );
            io::save_fields(&staging.file(FIELDS_NAME), &result.fields)?;
            for (k, ((warped, low_rank), sparse)) in result
                .warped
                .iter()
                .zip(&result.low_rank)
                .zip(&result.sparse)
                .enumerate()
            {
                io::save_pgm(&staging.file(format!("warped_{k:03}.pgm")), warped, UNIT_RANGE)?;
                io::save_pgm(&staging.file(format!("lowrank_{k:03}.pgm")), low_rank, UNIT_RANGE)?;
                io::save_pgm(&staging.file(format!("sparse_{k:03}.pgm")), sparse, SIGNED_RANGE)?;
            }
            let mut w = staging.create("diagnostics.csv")?;
            io::write_diagnostics(&mut w, &result.diagnostics)?;
            finish(w)?;
            let mut w = staging.create("singular_values.csv")?;
            io::write_singular_values(&mut w, &result.diagnostics)?;
            finish(w)?;
            level_spacing = Some(
                (0..config.levels)
                    .map(|l| f64::from(1u32 << (config.levels - 1 - l)))
                    .collect(),
            );
            clock.lap("write");
        }
        Invocation::Landscape {
            images,
            metric,
            kind,
            k,
        } => {
            let group = load_images(images)?;
            clock.lap("load");
            let rows = landscape(
                &group,
                *metric,
                *kind,
                *k,
                &DeformationSchedule::default(),
                &MetricSettings::default(),
            )?;
            clock.lap("landscape");
            let mut w = staging.create(table_name(dest)?)?;
            io::write_landscape(&mut w, &rows)?;
            finish(w)?;
            clock.lap("write");
        }
        Invocation::EvalLandmarks { landmarks, fields } => {
            let frames = io::load_landmarks(landmarks)?;
            let fields = io::load_fields(fields)?;
            if frames.len() != fields.len() {
                return Err(Failure::Usage(format!(
                    "{} landmark frames but {} fields",
                    frames.len(),
                    fields.len()
                )));
            }
            clock.lap("load");
            let before = landmark_accuracy(&frames)?;
            let mut mapped = Vec::with_capacity(frames.len());
            for (k, (set, field)) in frames.iter().zip(&fields).enumerate() {
                let m = map_landmarks(set, field)?;
                if !m.unconverged.is_empty() {
                    warn!("frame {k}: landmarks {:?} did not converge", m.unconverged);
                }
                mapped.push(m.landmarks);
            }
            let after = landmark_accuracy(&mapped)?;
            clock.lap("evaluate");
            let mut w = staging.create(table_name(dest)?)?;
            io::write_landmark_accuracy(&mut w, &before, &after)?;
            finish(w)?;
            clock.lap("write");
        }
    }
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        invocation: invocation.clone(),
        inputs,
        outputs: staging.records()?,
        level_spacing,
        timings: clock.0,
    };
    staging.commit(&dest.dir, &dest.manifest, &manifest::to_json(&manifest))?;
    Ok(manifest)
}

fn table_name(dest: &Destination) -> Result<String, Failure> {
    dest.table
        .clone()
        .ok_or_else(|| Failure::Usage("table commands need an output file".into()))
}

fn load_images(paths: &[PathBuf]) -> Result<Vec<drpca::grid::Image>, Failure> {
    if paths.len() < 2 {
        return Err(Failure::Usage(format!("need at least two images, got {}", paths.len())));
    }
    Ok(paths.iter().map(|p| io::load_pgm(p)).collect::<Result<Vec<_>, _>>()?)
}

/// Expands each argument as a glob (or literal path), sorted, as absolute paths.
pub fn expand_images(patterns: &[String]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for pattern in patterns {
        let mut matched: Vec<PathBuf> = glob::glob(pattern)
            .map_err(|e| Failure::Usage(format!("bad pattern {pattern}: {e}")))?
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::io(format!("expanding {pattern}"), e.into()))?;
        if matched.is_empty() {
            return Err(Failure::Usage(format!("{pattern} matches no files")));
        }
        matched.sort();
        out.extend(matched);
    }
    out.into_iter().map(|p| absolute(&p)).collect()
}

pub fn absolute(path: &Path) -> Result<PathBuf, Failure> {
    fs::canonicalize(path).map_err(|e| Failure::io(format!("resolving {}", path.display()), e))
}

/// Repeats the run recorded in `manifest_path` into `out` and checks every output hash.
pub fn rerun(manifest_path: &Path, out: &Path) -> Result<(), Failure> {
    let recorded = manifest::load(manifest_path)?;
    for input in &recorded.inputs {
        let now = manifest::sha256_file(&input.path)?;
        if now != input.sha256 {
            return Err(Failure::Mismatch(format!(
                "input {} changed since the run",
                input.path.display()
            )));
        }
    }
    let manifest_name = manifest_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Failure::Usage("manifest path has no file name".into()))?;
    let dest = match recorded.invocation {
        Invocation::Synth { .. } | Invocation::Register { .. } => Destination {
            dir: out.to_path_buf(),
            table: None,
            manifest: manifest_name.into(),
        },
        Invocation::Landscape { .. } | Invocation::EvalLandmarks { .. } => Destination {
            dir: out.to_path_buf(),
            table: recorded.outputs.first().map(|r| r.path.to_string_lossy().into_owned()),
            manifest: manifest_name.into(),
        },
    };
    let repeated = run(&recorded.invocation, &dest)?;
    if repeated.outputs != recorded.outputs {
        let differing: Vec<String> = recorded
            .outputs
            .iter()
            .filter(|r| !repeated.outputs.contains(r))
            .map(|r| r.path.display().to_string())
            .collect();
        return Err(Failure::Mismatch(format!(
            "outputs differ from the recorded run: {differing:?}"
        )));
    }
    info!("rerun reproduced {} outputs", repeated.outputs.len());
    Ok(())
}

impl From<drpca::Error> for Failure {
    fn from(e: drpca::Error) -> Self {
        use drpca::Error as E;
        let msg = e.to_string();
        if e.is_numeric() {
            return Failure::Numeric(msg);
        }
        match e.root() {
            E::InvalidArgument(_) | E::DimensionMismatch(_) => Failure::Usage(msg),
            _ => Failure::Io(msg),
        }
    }
}
