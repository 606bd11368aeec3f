//! Frame files come in two shapes, told apart by their header:
//!
//! * outcomes: `scene,posture,frame,evaded` with `evaded` one of 0/1/true/false;
//! * detections: `scene,posture,frame,subject_x1,subject_y1,subject_x2,subject_y2,label,score,x1,y1,x2,y2`,
//!   one row per detection. A frame without detections has a single row whose
//!   last six fields are empty.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use envpatch::attack::{DetectionSet, ScoredBox, PERSON_CLASS};
use envpatch::evaluation::{asr, frame_evaded, mean_asr};
use envpatch::geometry::BBox;
use serde::{Deserialize, Serialize};

use crate::run::write_csv;

const OUTCOME_HEADER: [&str; 4] = ["scene", "posture", "frame", "evaded"];
const DETECTION_HEADER: [&str; 13] = [
    "scene",
    "posture",
    "frame",
    "subject_x1",
    "subject_y1",
    "subject_x2",
    "subject_y2",
    "label",
    "score",
    "x1",
    "y1",
    "x2",
    "y2",
];
pub const MEAN_ROW: &str = "MEAN";

#[derive(Debug, Args)]
pub struct EvalFramesArgs {
    /// Frame outcome or detection CSV.
    pub input: PathBuf,
    /// Report CSV path; the report is always printed.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scene: String,
    /// Posture name, or `MEAN` for the per-scene average.
    pub posture: String,
    pub frames: usize,
    pub evaded: usize,
    /// Percentage. On the mean row: the average of the posture percentages.
    pub asr: f64,
}

enum Frame {
    Outcome(bool),
    Detections { subject: BBox, boxes: Vec<ScoredBox> },
}

impl Frame {
    fn evaded(&self) -> Result<bool> {
        Ok(match self {
            Frame::Outcome(e) => *e,
            Frame::Detections { subject, boxes } => {
                frame_evaded(&DetectionSet::new(boxes.clone())?, subject, PERSON_CLASS)
            }
        })
    }
}

#[derive(Default)]
struct Sequences {
    order: Vec<(String, String)>,
    frames: HashMap<(String, String), BTreeMap<u64, Frame>>,
}

impl Sequences {
    fn entry(&mut self, scene: &str, posture: &str) -> &mut BTreeMap<u64, Frame> {
        let key = (scene.to_string(), posture.to_string());
        if !self.frames.contains_key(&key) {
            self.order.push(key.clone());
        }
        self.frames.entry(key).or_default()
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

fn parse_f64(field: &str, name: &str) -> std::result::Result<f64, String> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("{name} `{field}` is not a finite number"))
}

fn parse_box(fields: &[&str], names: &[&str]) -> std::result::Result<BBox, String> {
    let mut v = [0.0; 4];
    for (k, slot) in v.iter_mut().enumerate() {
        *slot = parse_f64(fields[k], names[k])?;
    }
    BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
}

fn parse_row(seq: &mut Sequences, detections: bool, f: &[&str]) -> std::result::Result<(), String> {
    let (scene, posture) = (f[0].trim(), f[1].trim());
    if scene.is_empty() || posture.is_empty() {
        return Err("scene and posture must be non-empty".into());
    }
    if posture == MEAN_ROW {
        return Err(format!("posture name `{MEAN_ROW}` is reserved"));
    }
    let frame: u64 = f[2].trim().parse().map_err(|_| format!("frame `{}` is not an index", f[2]))?;
    if !detections {
        let evaded = parse_bool(f[3]).ok_or_else(|| format!("evaded `{}` is not a boolean", f[3]))?;
        if seq.entry(scene, posture).insert(frame, Frame::Outcome(evaded)).is_some() {
            return Err(format!("duplicate frame {frame}"));
        }
        return Ok(());
    }
    let subject = parse_box(&f[3..7], &DETECTION_HEADER[3..7])?;
    let det = if f[7..].iter().all(|s| s.trim().is_empty()) {
        None
    } else {
        let label: usize = match f[7].trim() {
            "person" => PERSON_CLASS,
            l => l.parse().map_err(|_| format!("label `{l}` is not a class index"))?,
        };
        let score = parse_f64(f[8], "score")?;
        let bbox = parse_box(&f[9..13], &DETECTION_HEADER[9..13])?;
        Some(ScoredBox { bbox, label, score })
    };
    let frames = seq.entry(scene, posture);
    match frames.entry(frame).or_insert_with(|| Frame::Detections {
        subject,
        boxes: Vec::new(),
    }) {
        Frame::Detections { subject: s, boxes } => {
            if *s != subject {
                return Err(format!("frame {frame} repeats with a different subject box"));
            }
            boxes.extend(det);
        }
        Frame::Outcome(_) => unreachable!("one file holds one row shape"),
    }
    Ok(())
}

fn read_sequences(path: &Path) -> Result<Sequences> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let detections = if header == OUTCOME_HEADER {
        false
    } else if header == DETECTION_HEADER {
        true
    } else {
        return Err(envpatch::Error::Data(format!(
            "{}: line 1: header must be `{}` or `{}`",
            path.display(),
            OUTCOME_HEADER.join(","),
            DETECTION_HEADER.join(",")
        ))
        .into());
    };
    let width = header.len();
    let mut seq = Sequences::default();
    let mut problems = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let fields: Vec<&str> = record.iter().collect();
        let outcome = if fields.len() != width {
            Err(format!("expected {width} fields, found {}", fields.len()))
        } else {
            parse_row(&mut seq, detections, &fields)
        };
        if let Err(msg) = outcome {
            problems.push(format!("line {line}: {msg}"));
        }
    }
    if !problems.is_empty() {
        return Err(envpatch::Error::Data(format!("{}: {}", path.display(), problems.join("; "))).into());
    }
    if seq.order.is_empty() {
        return Err(envpatch::Error::Data(format!("{}: no frames", path.display())).into());
    }
    Ok(seq)
}

/// Posture rows in order of first appearance, each scene closed by its mean row.
pub fn report(path: &Path) -> Result<Vec<ReportRow>> {
    let seq = read_sequences(path)?;
    let mut scenes: Vec<&str> = Vec::new();
    for (scene, _) in &seq.order {
        if !scenes.contains(&scene.as_str()) {
            scenes.push(scene);
        }
    }
    let mut rows = Vec::new();
    for scene in scenes {
        let mut posture_rows = Vec::new();
        for key in seq.order.iter().filter(|k| k.0 == scene) {
            let outcomes = seq.frames[key].values().map(Frame::evaded).collect::<Result<Vec<_>>>()?;
            posture_rows.push(ReportRow {
                scene: scene.to_string(),
                posture: key.1.clone(),
                frames: outcomes.len(),
                evaded: outcomes.iter().filter(|&&e| e).count(),
                asr: asr(&outcomes)?,
            });
        }
        let rates: Vec<f64> = posture_rows.iter().map(|r| r.asr).collect();
        let mean = ReportRow {
            scene: scene.to_string(),
            posture: MEAN_ROW.into(),
            frames: posture_rows.iter().map(|r| r.frames).sum(),
            evaded: posture_rows.iter().map(|r| r.evaded).sum(),
            asr: mean_asr(&rates)?,
        };
        rows.extend(posture_rows);
        rows.push(mean);
    }
    Ok(rows)
}

pub fn execute(args: &EvalFramesArgs) -> Result<()> {
    let rows = report(&args.input)?;
    if let Some(out) = &args.output {
        write_csv(out, &rows)?;
    }
    println!("{:<16} {:<12} {:>7} {:>7} {:>8}", "scene", "posture", "frames", "evaded", "ASR");
    for r in &rows {
        println!(
            "{:<16} {:<12} {:>7} {:>7} {:>8.2}",
            r.scene, r.posture, r.frames, r.evaded, r.asr
        );
    }
    Ok(())
}
