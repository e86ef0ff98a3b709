//! Scene files: versioned JSON and the little-endian `R3DS` container.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Scene;
use crate::error::{Error, Result};

pub const SCENE_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"R3DS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneFormat {
    Json,
    Binary,
}

impl std::str::FromStr for SceneFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "bin" | "binary" => Ok(Self::Binary),
            other => Err(Error::Config(format!("unknown scene format `{other}`"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    n_points: usize,
    n_categories: usize,
    has_colors: bool,
    has_normals: bool,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    header: Header,
    positions: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    colors: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normals: Option<Vec<f64>>,
    superpoint_id: Vec<i64>,
    instance_id: Vec<i64>,
    semantic_label: Vec<i64>,
}

fn flatten(v: &[[f64; 3]]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn triples(field: &str, flat: Vec<f64>, n: usize) -> Result<Vec<[f64; 3]>> {
    if flat.len() != 3 * n {
        return Err(Error::validation(
            field,
            format!("expected {} values, got {}", 3 * n, flat.len()),
        ));
    }
    Ok(flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn to_file(scene: &Scene) -> SceneFile {
    SceneFile {
        header: Header {
            version: SCENE_FORMAT_VERSION,
            n_points: scene.len(),
            n_categories: scene.category_count(),
            has_colors: scene.colors().is_some(),
            has_normals: scene.normals().is_some(),
        },
        positions: flatten(scene.positions()),
        colors: scene.colors().map(flatten),
        normals: scene.normals().map(flatten),
        superpoint_id: scene.superpoint_id().iter().map(|&s| s as i64).collect(),
        instance_id: scene.instance_id().to_vec(),
        semantic_label: scene.semantic_label().to_vec(),
    }
}

fn from_file(f: SceneFile) -> Result<Scene> {
    let h = &f.header;
    if h.version != SCENE_FORMAT_VERSION {
        return Err(Error::validation("header.version", format!("unsupported version {}", h.version)));
    }
    if h.has_colors != f.colors.is_some() {
        return Err(Error::validation("colors", "presence disagrees with header"));
    }
    if h.has_normals != f.normals.is_some() {
        return Err(Error::validation("normals", "presence disagrees with header"));
    }
    let n = h.n_points;
    let positions = triples("positions", f.positions, n)?;
    let colors = f.colors.map(|c| triples("colors", c, n)).transpose()?;
    let normals = f.normals.map(|c| triples("normals", c, n)).transpose()?;
    Scene::new(
        positions,
        colors,
        normals,
        f.superpoint_id,
        f.instance_id,
        f.semantic_label,
        h.n_categories,
    )
}

pub fn scene_to_bytes(scene: &Scene, format: SceneFormat) -> Result<Vec<u8>> {
    match format {
        SceneFormat::Json => Ok(serde_json::to_vec(&to_file(scene))?),
        SceneFormat::Binary => {
            let n = scene.len();
            let mut out = Vec::with_capacity(32 + n * (9 * 8 + 12));
            out.extend_from_slice(MAGIC);
            out.extend_from_slice(&SCENE_FORMAT_VERSION.to_le_bytes());
            out.extend_from_slice(&(n as u64).to_le_bytes());
            out.extend_from_slice(&(scene.category_count() as u32).to_le_bytes());
            out.push(scene.colors().is_some() as u8);
            out.push(scene.normals().is_some() as u8);
            let mut put_triples = |v: &[[f64; 3]]| {
                for x in v.iter().flatten() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            };
            put_triples(scene.positions());
            if let Some(c) = scene.colors() {
                put_triples(c);
            }
            if let Some(nm) = scene.normals() {
                put_triples(nm);
            }
            for &s in scene.superpoint_id() {
                out.extend_from_slice(&(s as i32).to_le_bytes());
            }
            for &i in scene.instance_id() {
                out.extend_from_slice(&(i as i32).to_le_bytes());
            }
            for &l in scene.semantic_label() {
                out.extend_from_slice(&(l as i32).to_le_bytes());
            }
            Ok(out)
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse("truncated R3DS container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn i32s(&mut self, n: usize) -> Result<Vec<i64>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as i64)
            .collect())
    }
}

pub fn scene_from_bytes(bytes: &[u8]) -> Result<Scene> {
    if bytes.len() >= 4 && &bytes[..4] == MAGIC {
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u32()?;
        let n = r.u64()? as usize;
        let n_categories = r.u32()? as usize;
        let has_colors = r.u8()? != 0;
        let has_normals = r.u8()? != 0;
        let file = SceneFile {
            header: Header {
                version,
                n_points: n,
                n_categories,
                has_colors,
                has_normals,
            },
            positions: r.f64s(3 * n)?,
            colors: if has_colors { Some(r.f64s(3 * n)?) } else { None },
            normals: if has_normals { Some(r.f64s(3 * n)?) } else { None },
            superpoint_id: r.i32s(n)?,
            instance_id: r.i32s(n)?,
            semantic_label: r.i32s(n)?,
        };
        if r.pos != bytes.len() {
            return Err(Error::Parse("trailing bytes after R3DS payload".into()));
        }
        from_file(file)
    } else {
        let file: SceneFile =
            serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("scene JSON: {e}")))?;
        from_file(file)
    }
}

/// Reads a scene in either format (detected by the `R3DS` magic).
pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    scene_from_bytes(&fs::read(path)?)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>, format: SceneFormat) -> Result<()> {
    fs::write(path, scene_to_bytes(scene, format)?)?;
    Ok(())
}

impl SceneFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Json => "json",
            Self::Binary => "r3ds",
        }
    }
}

/// Writes `scene_000.<ext>`, `scene_001.<ext>`, ... into `dir`, creating it.
pub fn save_dataset(scenes: &[Scene], dir: impl AsRef<Path>, format: SceneFormat) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let path = dir.join(format!("scene_{i:03}.{}", format.extension()));
        save_scene(scene, &path, format)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Loads every `.json` and `.r3ds` file of `dir` in file-name order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "r3ds")));
    paths.sort();
    paths.iter().map(load_scene).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"header":{"version":1,"n_points":2,"n_categories":2,"has_colors":false,"has_normals":false},
            "positions":[0,0,0, 1,0,0],"superpoint_id":[5,5],"instance_id":[0,0],"semantic_label":[1,1]}"#
    }

    #[test]
    fn generated_scenes_round_trip_exactly() {
        let cfg = crate::scene::SynthConfig {
            scene_count: 5,
            seed: 11,
            ..Default::default()
        };
        for scene in crate::scene::synth_dataset(&cfg).unwrap() {
            for format in [SceneFormat::Json, SceneFormat::Binary] {
                let back = scene_from_bytes(&scene_to_bytes(&scene, format).unwrap()).unwrap();
                assert_eq!(back, scene, "{format:?}");
            }
        }
    }

    #[test]
    fn minimal_json_loads() {
        let s = scene_from_bytes(minimal().as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.superpoint_count(), 1);
        assert_eq!(s.superpoint_id(), &[0, 0]);
    }

    #[test]
    fn mixed_labels_fail_validation() {
        let text = minimal().replace("\"semantic_label\":[1,1]", "\"semantic_label\":[0,1]");
        assert!(matches!(
            scene_from_bytes(text.as_bytes()),
            Err(Error::Validation { ref field, .. }) if field == "semantic_label"
        ));
    }

    #[test]
    fn garbage_is_a_parse_error() {
        assert!(matches!(scene_from_bytes(b"{nope"), Err(Error::Parse(_))));
        assert!(matches!(scene_from_bytes(b"R3DS\x01"), Err(Error::Parse(_))));
    }

    #[test]
    fn header_count_mismatch_is_reported() {
        let text = minimal().replace("\"n_points\":2", "\"n_points\":3");
        assert!(matches!(
            scene_from_bytes(text.as_bytes()),
            Err(Error::Validation { .. })
        ));
    }
}
