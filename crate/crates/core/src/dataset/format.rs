use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::pointcloud::{RgbPointCloud, UNLABELED};

const MAGIC: &[u8; 4] = b"AEGI";
const VERSION: u32 = 1;

fn color_byte(c: f64) -> u8 {
    (c * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Serialize a keyframe cloud. Positions are stored as `f32` and colors as
/// bytes, so clouds whose values are already at that precision round-trip
/// exactly.
pub fn keyframe_to_bytes(room: &str, cloud: &RgbPointCloud) -> Result<Vec<u8>> {
    let n = u32::try_from(cloud.len()).map_err(|_| Error::usage("cloud too large for a keyframe file"))?;
    let mut w = Writer::default();
    w.raw(MAGIC);
    w.u32(VERSION);
    w.u32(n);
    w.string(room)?;
    for i in 0..cloud.len() {
        for &p in &cloud.positions()[i] {
            w.f32(p as f32);
        }
        for &c in &cloud.colors()[i] {
            w.u8(color_byte(c));
        }
        w.u8(cloud.labels()[i]);
    }
    Ok(w.buf)
}

/// Parse a keyframe file into its room id and cloud.
pub fn keyframe_from_bytes(bytes: &[u8]) -> Result<(String, RgbPointCloud)> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let n = r.u32("point count")? as usize;
    let room = r.string("room id")?;
    // 16 bytes per point; reject impossible counts before allocating
    if (n as u64) * 16 > bytes.len() as u64 - r.offset() {
        return r.fail(format!("truncated: {n} points declared"));
    }
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let p = [r.f32("x")? as f64, r.f32("y")? as f64, r.f32("z")? as f64];
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(at, "non-finite position"));
        }
        positions.push(p);
        colors.push([r.u8("red")?, r.u8("green")?, r.u8("blue")?].map(|c| c as f64 / 255.0));
        labels.push(r.u8("label")?);
    }
    r.finish()?;
    Ok((room, RgbPointCloud::new(positions, colors, Some(labels))?))
}

pub fn write_keyframe(path: impl AsRef<Path>, room: &str, cloud: &RgbPointCloud) -> Result<()> {
    fs::write(path, keyframe_to_bytes(room, cloud)?)?;
    Ok(())
}

pub fn read_keyframe(path: impl AsRef<Path>) -> Result<(String, RgbPointCloud)> {
    keyframe_from_bytes(&fs::read(path)?)
}

/// Parse an ASCII PLY point cloud with `x y z red green blue` vertex
/// properties and an optional `label`. Colors 0–255 are divided by 255.
pub fn parse_ply(text: &str) -> Result<RgbPointCloud> {
    let end = text.len() as u64;
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n').map(|l| {
        let at = offset;
        offset += l.len() as u64;
        (at, l.trim())
    });
    let bad = |at: u64, m: String| Error::format(at, m);
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(bad(0, "missing ply signature".into())),
    }
    let mut vertices = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut ascii = false;
    let mut before_vertex = 0usize;
    loop {
        let (at, line) = lines.next().ok_or_else(|| bad(end, "header ends without end_header".into()))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => ascii = true,
            ["format", other, ..] => return Err(bad(at, format!("unsupported PLY format {other}"))),
            ["element", "vertex", n] => {
                vertices = Some(n.parse::<usize>().map_err(|_| bad(at, format!("bad vertex count {n}")))?);
                in_vertex = true;
            }
            ["element", _, n] => {
                if vertices.is_none() {
                    before_vertex += n.parse::<usize>().map_err(|_| bad(at, format!("bad element count {n}")))?;
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => return Err(bad(at, "list property on vertices".into())),
            ["property", _, name] if in_vertex => props.push((*name).to_string()),
            ["comment", ..] | ["obj_info", ..] | ["property", ..] | [] => {}
            _ => return Err(bad(at, format!("unexpected header line {line:?}"))),
        }
    }
    if !ascii {
        return Err(bad(0, "PLY format line missing".into()));
    }
    let n = vertices.ok_or_else(|| bad(0, "no vertex element".into()))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let need = |name: &str| col(name).ok_or_else(|| bad(0, format!("vertex property {name} missing")));
    let idx = [need("x")?, need("y")?, need("z")?, need("red")?, need("green")?, need("blue")?];
    let label = col("label");
    for _ in 0..before_vertex {
        lines.next().ok_or_else(|| bad(end, "truncated element data".into()))?;
    }
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for v in 0..n {
        let (at, line) = lines.next().ok_or_else(|| bad(end, format!("truncated after {v} of {n} vertices")))?;
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != props.len() {
            return Err(bad(at, format!("vertex {v} has {} values, expected {}", vals.len(), props.len())));
        }
        let num = |i: usize| -> Result<f64> {
            vals[i]
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| bad(at, format!("vertex {v}: bad number {:?}", vals[i])))
        };
        positions.push([num(idx[0])?, num(idx[1])?, num(idx[2])?]);
        let mut c = [0.0; 3];
        for (k, slot) in c.iter_mut().enumerate() {
            let raw = num(idx[3 + k])?;
            if !(0.0..=255.0).contains(&raw) {
                return Err(bad(at, format!("vertex {v}: color {raw} outside 0-255")));
            }
            *slot = raw / 255.0;
        }
        colors.push(c);
        labels.push(match label {
            Some(li) => {
                let l = num(li)?;
                if !(0.0..=f64::from(UNLABELED)).contains(&l) || l.fract() != 0.0 {
                    return Err(bad(at, format!("vertex {v}: bad label {l}")));
                }
                l as u8
            }
            None => UNLABELED,
        });
    }
    RgbPointCloud::new(positions, colors, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RgbPointCloud {
        RgbPointCloud::new(
            vec![[0.5, -1.25, 2.0], [f64::from(1e-3_f32), 3.0, 0.0]],
            vec![[1.0, 0.0, 128.0 / 255.0], [3.0 / 255.0, 1.0, 1.0]],
            Some(vec![2, UNLABELED]),
        )
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let b = keyframe_to_bytes("kitchen", &sample()).unwrap();
        assert_eq!(&b[..4], b"AEGI");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 7);
        assert_eq!(b.len(), 14 + 7 + 2 * 16);
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let (room, back) = keyframe_from_bytes(&keyframe_to_bytes("r1", &c).unwrap()).unwrap();
        assert_eq!(room, "r1");
        assert_eq!(back, c);
    }

    #[test]
    fn every_truncation_fails_closed() {
        let b = keyframe_to_bytes("r", &sample()).unwrap();
        for cut in 0..b.len() {
            assert!(matches!(keyframe_from_bytes(&b[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = b.clone();
        bad[1] = b'X';
        assert!(matches!(keyframe_from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = b;
        bad.push(0);
        assert!(keyframe_from_bytes(&bad).is_err());
    }

    #[test]
    fn ply_colors_are_scaled_by_255() {
        let text = "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\nproperty float x\nproperty float y\n\
                    property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
                    property uchar label\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n\
                    0 0 0 255 0 51 3\n1.5 2 -1 10 20 30 255\n";
        let c = parse_ply(text).unwrap();
        assert_eq!(c.colors()[0], [1.0, 0.0, 51.0 / 255.0]);
        assert_eq!(c.colors()[1][1], 20.0 / 255.0);
        assert_eq!(c.labels(), &[3, UNLABELED]);
        assert_eq!(c.positions()[1], [1.5, 2.0, -1.0]);
        let no_label = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n\
                        property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n1 2 3 0 0 0\n";
        assert_eq!(parse_ply(no_label).unwrap().labels(), &[UNLABELED]);
        assert!(parse_ply(&no_label[..no_label.len() - 6]).is_err());
        assert!(parse_ply(&no_label.replace("property uchar blue\n", "")).is_err());
    }
}
