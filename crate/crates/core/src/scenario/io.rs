//! Scene files: UTF-8 JSON Lines. The first line is a header object, each
//! following line holds one scene. Numbers are written with 17 significant
//! digits so that a save/load cycle reproduces every `f64` exactly.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Deserialize;

use super::types::{AgentState, AgentTrack, AgentType, Polyline, PolylineKind, Scene, SceneMap, POLYLINE_POINTS};
use crate::error::{Error, Result};

pub const SCENE_FORMAT: &str = "parkdiffusion-scenes";
pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    /// Number of scene lines; optional for hand-written files.
    #[serde(default)]
    scenes: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    dt: f64,
    agents: Vec<AgentRecord>,
    map: MapRecord,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentRecord {
    id: u64,
    #[serde(rename = "type")]
    agent_type: String,
    states: Vec<[f64; 6]>,
    valid: Vec<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MapRecord {
    soft: Vec<Vec<[f64; 2]>>,
    soft_types: Vec<u8>,
    hard: Vec<Vec<[f64; 2]>>,
    hard_types: Vec<u8>,
}

fn num(out: &mut String, x: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::NonFinite("scene value is not finite".into()));
    }
    write!(out, "{x:.16e}").expect("writing to a String");
    Ok(())
}

fn polylines(out: &mut String, polys: &[Polyline]) -> Result<()> {
    out.push('[');
    for (i, p) in polys.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        for (j, q) in p.points.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push('[');
            num(out, q[0])?;
            out.push(',');
            num(out, q[1])?;
            out.push(']');
        }
        out.push(']');
    }
    out.push(']');
    Ok(())
}

fn codes(out: &mut String, polys: &[Polyline]) {
    let list: Vec<String> = polys.iter().map(|p| p.kind.code().to_string()).collect();
    write!(out, "[{}]", list.join(",")).expect("writing to a String");
}

/// Serializes one scene as a single JSON line (without the newline).
pub(crate) fn scene_line(scene: &Scene) -> Result<String> {
    let mut out = String::with_capacity(4096);
    out.push_str("{\"dt\":");
    num(&mut out, scene.dt)?;
    out.push_str(",\"agents\":[");
    for (i, a) in scene.agents.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        if a.states.len() != a.valid.len() {
            return Err(Error::Contract(format!("agent {} has mismatched state and mask lengths", a.id)));
        }
        write!(out, "{{\"id\":{},\"type\":\"{}\",\"states\":[", a.id, a.agent_type).expect("writing to a String");
        for (j, s) in a.states.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push('[');
            for (k, x) in s.to_array().into_iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                num(&mut out, x)?;
            }
            out.push(']');
        }
        out.push_str("],\"valid\":[");
        let flags: Vec<&str> = a.valid.iter().map(|&v| if v { "true" } else { "false" }).collect();
        out.push_str(&flags.join(","));
        out.push_str("]}");
    }
    out.push_str("],\"map\":{\"soft\":");
    polylines(&mut out, &scene.map.soft)?;
    out.push_str(",\"soft_types\":");
    codes(&mut out, &scene.map.soft);
    out.push_str(",\"hard\":");
    polylines(&mut out, &scene.map.hard)?;
    out.push_str(",\"hard_types\":");
    codes(&mut out, &scene.map.hard);
    out.push_str("}}");
    Ok(out)
}

fn header_line(count: usize) -> String {
    format!("{{\"format\":\"{SCENE_FORMAT}\",\"version\":{SCENE_FORMAT_VERSION},\"scenes\":{count}}}")
}

pub fn write_scenes<W: Write>(scenes: &[Scene], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", header_line(scenes.len()))?;
    for s in scenes {
        let line = scene_line(s).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_scenes(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // validate everything before touching the file
    let lines = scenes.iter().map(scene_line).collect::<Result<Vec<_>>>()?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{}", header_line(lines.len()))?;
        for l in &lines {
            w.write_all(l.as_bytes())?;
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn convert_polylines(line: usize, pts: Vec<Vec<[f64; 2]>>, types: Vec<u8>, what: &str) -> Result<Vec<Polyline>> {
    if pts.len() != types.len() {
        return Err(parse_err(line, format!("{what}: {} polylines but {} type codes", pts.len(), types.len())));
    }
    pts.into_iter()
        .zip(types)
        .map(|(points, code)| {
            if points.len() != POLYLINE_POINTS {
                return Err(parse_err(
                    line,
                    format!("{what}: polyline has {} points, expected {POLYLINE_POINTS}", points.len()),
                ));
            }
            let kind = PolylineKind::from_code(code)
                .ok_or_else(|| parse_err(line, format!("{what}: unknown polyline type {code}")))?;
            Ok(Polyline { points, kind })
        })
        .collect()
}

fn parse_scene(line: usize, text: &str) -> Result<Scene> {
    let rec: SceneRecord = serde_json::from_str(text).map_err(|e| parse_err(line, e.to_string()))?;
    let agents = rec
        .agents
        .into_iter()
        .map(|a| {
            let agent_type: AgentType = a
                .agent_type
                .parse()
                .map_err(|_| parse_err(line, format!("unknown agent type {:?}", a.agent_type)))?;
            if a.states.len() != a.valid.len() {
                return Err(parse_err(line, format!("agent {}: {} states but {} mask entries", a.id, a.states.len(), a.valid.len())));
            }
            Ok(AgentTrack {
                id: a.id,
                agent_type,
                states: a.states.into_iter().map(AgentState::from_array).collect(),
                valid: a.valid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        dt: rec.dt,
        agents,
        map: SceneMap {
            soft: convert_polylines(line, rec.map.soft, rec.map.soft_types, "soft")?,
            hard: convert_polylines(line, rec.map.hard, rec.map.hard_types, "hard")?,
        },
    })
}

/// Reads a scene file from any reader. Line numbers in errors are 1-based.
pub fn read_scenes<R: Read>(r: R) -> Result<Vec<Scene>> {
    let mut lines = BufReader::new(r).lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "missing header")),
    };
    let h: Header = serde_json::from_str(&header).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if h.format != SCENE_FORMAT {
        return Err(parse_err(1, format!("unexpected format {:?}", h.format)));
    }
    if h.version != SCENE_FORMAT_VERSION {
        return Err(parse_err(1, format!("unsupported version {}", h.version)));
    }
    let mut scenes = Vec::new();
    for (i, l) in lines.enumerate() {
        let line = i + 2;
        let l = l.map_err(|e| parse_err(line, e.to_string()))?;
        if l.trim().is_empty() {
            continue;
        }
        scenes.push(parse_scene(line, &l)?);
    }
    if let Some(n) = h.scenes {
        if n != scenes.len() {
            return Err(parse_err(scenes.len() + 2, format!("header announces {n} scenes, file holds {}", scenes.len())));
        }
    }
    Ok(scenes)
}

pub fn load_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_scenes(f)
}
