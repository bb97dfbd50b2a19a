//! Synthetic indoor scenes, the keyframe file format and dataset loading.

mod format;
mod scene;

pub use format::{keyframe_from_bytes, keyframe_to_bytes, parse_ply, read_keyframe, write_keyframe};
pub use scene::{default_palette, sample_room, ClassStyle, Shape, FLOOR, WALL};

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metric::PlaceRecord;
use crate::pointcloud::{dist2, RgbPointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
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
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::usage(format!("unknown split {s:?}"))),
        }
    }
}

/// One stored observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub cloud: RgbPointCloud,
    pub record: PlaceRecord,
    pub split: Split,
}

/// Parameters of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub rooms: usize,
    /// Range of room side lengths, meters.
    pub extent: (f64, f64),
    pub height: f64,
    /// Inclusive range of objects per room.
    pub objects: (usize, usize),
    pub keyframes_per_room: usize,
    /// Mean distance between surface samples, meters.
    pub spacing: f64,
    pub view_radius: f64,
    pub camera_height: f64,
    /// Trajectory ellipse semi-axes as a fraction of the room extent.
    pub trajectory: f64,
    pub dropout: f64,
    pub color_jitter: f64,
    pub val_rooms: usize,
    pub test_rooms: usize,
    pub palette: Vec<ClassStyle>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            rooms: 10,
            extent: (4.5, 7.5),
            height: 2.6,
            objects: (4, 8),
            keyframes_per_room: 8,
            spacing: 0.1,
            view_radius: 2.5,
            camera_height: 1.2,
            trajectory: 0.18,
            dropout: 0.2,
            color_jitter: 0.05,
            val_rooms: 1,
            test_rooms: 2,
            palette: default_palette(),
        }
    }
}

impl SceneSpec {
    pub fn classes(&self) -> usize {
        self.palette.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.rooms < 3 {
            return bad(format!("at least 3 rooms are needed for three splits, got {}", self.rooms));
        }
        if self.val_rooms == 0 || self.test_rooms == 0 || self.val_rooms + self.test_rooms >= self.rooms {
            return bad("every split needs at least one room".into());
        }
        let (lo, hi) = self.extent;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("room extent range ({lo}, {hi}) is degenerate"));
        }
        if !(self.height > 0.0 && self.spacing > 0.0 && self.view_radius > 0.0) {
            return bad("height, spacing and view radius must be positive".into());
        }
        if self.objects.0 > self.objects.1 {
            return bad("object count range is inverted".into());
        }
        if self.keyframes_per_room == 0 {
            return bad("rooms need at least one keyframe".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..0.5).contains(&self.color_jitter) {
            return bad("dropout must be in [0, 1) and color jitter in [0, 0.5)".into());
        }
        if !(0.0..0.5).contains(&self.trajectory) {
            return bad("trajectory fraction must be in [0, 0.5)".into());
        }
        if self.palette.len() < 3 || self.palette.len() > 255 {
            return bad("palette needs floor, wall and at least one object class".into());
        }
        Ok(())
    }

    pub fn room_id(&self, room: usize) -> String {
        format!("room_{room:03}")
    }

    fn split_of(&self, room: usize) -> Split {
        let train = self.rooms - self.val_rooms - self.test_rooms;
        if room < train {
            Split::Train
        } else if room < train + self.val_rooms {
            Split::Val
        } else {
            Split::Test
        }
    }

    fn room_seed(&self, room: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add((room as u64 + 1).wrapping_mul(0xbf58_476d_1ce4_e5b9))
    }
}

fn generate_room(spec: &SceneSpec, room: usize) -> Result<Vec<Keyframe>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.room_seed(room));
    let ex = rng.random_range(spec.extent.0..=spec.extent.1);
    let ey = rng.random_range(spec.extent.0..=spec.extent.1);
    let objects = rng.random_range(spec.objects.0..=spec.objects.1);
    let surface = sample_room((ex, ey), spec.height, objects, &spec.palette, spec.spacing, &mut rng);
    let phase = rng.random_range(0.0..2.0 * PI);
    let r2 = spec.view_radius * spec.view_radius;
    let room_id = spec.room_id(room);
    let split = spec.split_of(room);
    let mut out = Vec::with_capacity(spec.keyframes_per_room);
    for k in 0..spec.keyframes_per_room {
        let a = phase + 2.0 * PI * k as f64 / spec.keyframes_per_room as f64;
        let eye = [
            ex / 2.0 + spec.trajectory * ex * a.cos(),
            ey / 2.0 + spec.trajectory * ey * a.sin(),
            spec.camera_height,
        ];
        let (mut pos, mut col, mut lab) = (Vec::new(), Vec::new(), Vec::new());
        for (i, p) in surface.points.iter().enumerate() {
            if dist2(p, &eye) > r2 || rng.random::<f64>() < spec.dropout {
                continue;
            }
            pos.push(p.map(|v| v as f32 as f64));
            let jitter = |c: f64, rng: &mut ChaCha8Rng| {
                let j = rng.random_range(-spec.color_jitter..=spec.color_jitter);
                ((c + j).clamp(0.0, 1.0) * 255.0).round() / 255.0
            };
            col.push(surface.colors[i].map(|c| jitter(c, &mut rng)));
            lab.push(surface.labels[i]);
        }
        if pos.is_empty() {
            return Err(Error::Spec(format!("keyframe {k} of {room_id} sees no points")));
        }
        let cloud = RgbPointCloud::new(pos, col, Some(lab))?;
        let centroid = cloud.centroid().expect("non-empty");
        let id = u32::try_from(room * spec.keyframes_per_room + k).map_err(|_| Error::Spec("too many keyframes".into()))?;
        out.push(Keyframe {
            cloud,
            record: PlaceRecord { id, room: room_id.clone(), centroid },
            split,
        });
    }
    Ok(out)
}

/// Generate every keyframe of the spec. A pure function of the spec: each
/// room draws from its own derived seed, so rooms can be built in parallel.
pub fn generate(spec: &SceneSpec) -> Result<Vec<Keyframe>> {
    spec.validate()?;
    let rooms = (0..spec.rooms)
        .into_par_iter()
        .map(|r| generate_room(spec, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(rooms.into_iter().flatten().collect())
}

fn keyframe_path(root: &Path, kf: &Keyframe) -> std::path::PathBuf {
    root.join(kf.split.as_str())
        .join(&kf.record.room)
        .join(format!("{}.aegi", kf.record.id))
}

/// Write keyframes as `<root>/<split>/<room>/<id>.aegi` plus `manifest.txt`.
pub fn write_dataset(root: impl AsRef<Path>, keyframes: &[Keyframe]) -> Result<()> {
    let root = root.as_ref();
    let mut manifest = String::from("# id room split cx cy cz\n");
    for kf in keyframes {
        let path = keyframe_path(root, kf);
        fs::create_dir_all(path.parent().expect("keyframe path has a parent"))?;
        write_keyframe(&path, &kf.record.room, &kf.cloud)?;
        let c = kf.record.centroid;
        manifest.push_str(&format!(
            "{} {} {} {:?} {:?} {:?}\n",
            kf.record.id, kf.record.room, kf.split, c[0], c[1], c[2]
        ));
    }
    fs::write(root.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Generate and write a dataset in one step.
pub fn generate_to(spec: &SceneSpec, root: impl AsRef<Path>) -> Result<Vec<Keyframe>> {
    let kfs = generate(spec)?;
    write_dataset(root, &kfs)?;
    Ok(kfs)
}

/// Manifest rows: place record and split of every keyframe.
pub fn read_manifest(root: impl AsRef<Path>) -> Result<Vec<(PlaceRecord, Split)>> {
    let path = root.as_ref().join("manifest.txt");
    let text = fs::read_to_string(&path)?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(at, format!("bad manifest line {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let id = f[0].parse().map_err(|_| bad())?;
        let split = f[2].parse().map_err(|_| bad())?;
        let mut centroid = [0.0; 3];
        for (c, s) in centroid.iter_mut().zip(&f[3..]) {
            *c = s.parse().map_err(|_| bad())?;
        }
        out.push((PlaceRecord { id, room: f[1].to_string(), centroid }, split));
    }
    Ok(out)
}

/// Load every keyframe listed in the manifest, optionally only one split.
/// Each file's room and recomputed centroid must agree with the manifest.
pub fn load(root: impl AsRef<Path>, split: Option<Split>) -> Result<Vec<Keyframe>> {
    let root = root.as_ref();
    let mut out = Vec::new();
    for (record, s) in read_manifest(root)? {
        if split.is_some_and(|want| want != s) {
            continue;
        }
        let path = root.join(s.as_str()).join(&record.room).join(format!("{}.aegi", record.id));
        let (room, cloud) = read_keyframe(&path)?;
        if room != record.room {
            return Err(Error::usage(format!(
                "{} holds room {room}, manifest says {}",
                path.display(),
                record.room
            )));
        }
        let c = cloud
            .centroid()
            .ok_or_else(|| Error::usage(format!("{} is empty", path.display())))?;
        if dist2(&c, &record.centroid).sqrt() > 1e-6 {
            return Err(Error::usage(format!("centroid of {} disagrees with the manifest", path.display())));
        }
        out.push(Keyframe { cloud, record, split: s });
    }
    Ok(out)
}

/// Import an ASCII PLY cloud as a test-split keyframe.
pub fn import_ply(path: impl AsRef<Path>, room: &str, id: u32) -> Result<Keyframe> {
    let text = fs::read_to_string(path)?;
    let cloud = parse_ply(&text)?;
    let centroid = cloud
        .centroid()
        .ok_or_else(|| Error::DegenerateInput("PLY file has no vertices".into()))?;
    Ok(Keyframe {
        cloud,
        record: PlaceRecord { id, room: room.to_string(), centroid },
        split: Split::Test,
    })
}

#[cfg(test)]
mod tests;
