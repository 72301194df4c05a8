//! File formats: CSMUV1 surface maps, 16-bit PGM rasters with JSON
//! sidecars, PPM visualizations, and the CSV/JSON tables used by the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, HypothesisRecord, HypothesisSet};
use crate::correspondence::TransferResult;
use crate::error::{CsmError, Result};
use crate::losses::LossScalars;
use crate::metrics::EvalRecord;
use crate::scenegen::KeypointObs;
use crate::surface_map::{Mask, SurfaceMap, Vec3};

pub const CSMUV_MAGIC: &[u8; 7] = b"CSMUV1\0";

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CsmError::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CsmError::io(path, e))
}

fn parse_err(path: &Path, msg: impl Into<String>) -> CsmError {
    CsmError::Parse {
        file: path.display().to_string(),
        line: 0,
        msg: msg.into(),
    }
}

pub fn encode_csmuv(map: &SurfaceMap) -> Vec<u8> {
    let n = map.len();
    let mut out = Vec::with_capacity(7 + 8 + 16 * n);
    out.extend_from_slice(CSMUV_MAGIC);
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    for d in &map.dirs {
        for v in [d.x, d.y, d.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &p in &map.fg_prob {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

/// Decodes a CSMUV1 buffer. Directions are widened as stored (not
/// renormalized), so decode → encode reproduces the bytes.
pub fn decode_csmuv(bytes: &[u8]) -> std::result::Result<SurfaceMap, String> {
    if bytes.len() < 15 || &bytes[..7] != CSMUV_MAGIC {
        return Err("missing CSMUV1 magic".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (u32_at(7), u32_at(11));
    let n = h.checked_mul(w).ok_or("image size overflows")?;
    let expected = n.checked_mul(16).and_then(|b| b.checked_add(15)).ok_or("image size overflows")?;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes for {h}x{w}, found {}", bytes.len()));
    }
    let f32_at = |k: usize| f32::from_le_bytes(bytes[15 + 4 * k..19 + 4 * k].try_into().expect("4 bytes")) as f64;
    let dirs = (0..n)
        .map(|i| Vec3::new(f32_at(3 * i), f32_at(3 * i + 1), f32_at(3 * i + 2)))
        .collect();
    let fg_prob = (0..n).map(|i| f32_at(3 * n + i)).collect();
    SurfaceMap::new(w, h, dirs, fg_prob).map_err(|e| e.to_string())
}

pub fn write_csmuv(map: &SurfaceMap, path: &Path) -> Result<()> {
    write_bytes(path, &encode_csmuv(map))
}

pub fn read_csmuv(path: &Path) -> Result<SurfaceMap> {
    decode_csmuv(&read_bytes(path)?).map_err(|m| parse_err(path, m))
}

/// Affine map from stored 16-bit values: `value = offset + scale · raw`.
/// Raw `background` marks +∞ (depth maps only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgmScale {
    pub offset: f64,
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<u16>,
}

pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

fn encode_pgm16(width: usize, height: usize, raw: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in raw {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// Parses binary PGM (8- or 16-bit). Returns width, height, maxval, samples.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, u16, Vec<u16>), String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("unsupported PGM magic '{}'", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM header field '{s}'"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(format!("bad PGM maxval {maxval}"));
    }
    pos += 1;
    let n = w * h;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    if bytes.len() < pos + need {
        return Err("truncated PGM data".into());
    }
    let data = &bytes[pos..pos + need];
    let raw = if wide {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        data.iter().map(|&b| b as u16).collect()
    };
    Ok((w, h, maxval as u16, raw))
}

fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| parse_err(path, e.to_string()))
}

/// Writes a mask (values in [0, 1]) as 16-bit PGM plus sidecar.
pub fn write_mask_pgm(mask: &Mask, path: &Path) -> Result<()> {
    let raw: Vec<u16> = mask.fg.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    write_bytes(path, &encode_pgm16(mask.width, mask.height, &raw))?;
    write_json(
        &PgmScale {
            offset: 0.0,
            scale: 1.0 / 65535.0,
            background: None,
        },
        &sidecar_path(path),
    )
}

/// Reads a mask PGM. Without a sidecar, samples are divided by maxval.
pub fn read_mask_pgm(path: &Path) -> Result<Mask> {
    let (w, h, maxval, raw) = decode_pgm(&read_bytes(path)?).map_err(|m| parse_err(path, m))?;
    let side = sidecar_path(path);
    let scale = if side.exists() {
        read_json::<PgmScale>(&side)?
    } else {
        PgmScale {
            offset: 0.0,
            scale: 1.0 / maxval as f64,
            background: None,
        }
    };
    let fg = raw.iter().map(|&r| (scale.offset + scale.scale * r as f64).clamp(0.0, 1.0)).collect();
    Mask::new(w, h, fg)
}

/// Writes a depth-like raster affinely quantized to 16 bits; non-finite
/// values become the background code 65535.
pub fn write_depth_pgm(width: usize, height: usize, values: &[f64], path: &Path) -> Result<()> {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (offset, scale) = if lo.is_finite() && hi > lo {
        (lo, (hi - lo) / 65534.0)
    } else if lo.is_finite() {
        (lo, 1.0)
    } else {
        (0.0, 1.0)
    };
    let raw: Vec<u16> = values
        .iter()
        .map(|&v| {
            if v.is_finite() {
                ((v - offset) / scale).round().clamp(0.0, 65534.0) as u16
            } else {
                65535
            }
        })
        .collect();
    write_bytes(path, &encode_pgm16(width, height, &raw))?;
    write_json(
        &PgmScale {
            offset,
            scale,
            background: Some(65535),
        },
        &sidecar_path(path),
    )
}

pub fn read_depth_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let (w, h, _, raw) = decode_pgm(&read_bytes(path)?).map_err(|m| parse_err(path, m))?;
    let s: PgmScale = read_json(&sidecar_path(path))?;
    let values = raw
        .iter()
        .map(|&r| {
            if Some(r) == s.background {
                f64::INFINITY
            } else {
                s.offset + s.scale * r as f64
            }
        })
        .collect();
    Ok((w, h, values))
}

/// Side-by-side visualization: mask in gray, then directions as RGB.
pub fn write_visualization_ppm(mask: &Mask, map: &SurfaceMap, path: &Path) -> Result<()> {
    let (w, h) = (map.width, map.height);
    let rgb = map.to_rgb();
    let mut out = format!("P6\n{} {h}\n255\n", 2 * w).into_bytes();
    for y in 0..h {
        for x in 0..w {
            let g = (mask.fg[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.extend_from_slice(&[g, g, g]);
        }
        for x in 0..w {
            let i = y * w + x;
            let c = if map.fg_prob[i] >= 0.5 { rgb[i] } else { [0, 0, 0] };
            out.extend_from_slice(&c);
        }
    }
    write_bytes(path, &out)
}

pub fn write_camera(cam: &Camera, path: &Path) -> Result<()> {
    write_json(cam, path)
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    let cam: Camera = read_json(path)?;
    cam.validate()?;
    Ok(cam)
}

pub fn write_cameras(cams: &[Camera], path: &Path) -> Result<()> {
    write_json(cams, path)
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let cams: Vec<Camera> = read_json(path)?;
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

pub fn write_hypotheses(h: &HypothesisSet, path: &Path) -> Result<()> {
    write_json(&h.to_records(), path)
}

pub fn read_hypotheses(path: &Path) -> Result<HypothesisSet> {
    let records: Vec<HypothesisRecord> = read_json(path)?;
    HypothesisSet::from_records(&records)
}

pub fn write_json_value<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    write_json(value, path)
}

pub fn read_json_value<T: DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path)
}

fn csv_err(path: &Path, e: csv::Error) -> CsmError {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(err) = e.into_kind() {
            return CsmError::io(path, err);
        }
        unreachable!("io error kind checked above");
    }
    match e.position() {
        Some(p) => CsmError::Parse {
            file: path.display().to_string(),
            line: p.line() as usize,
            msg: e.to_string(),
        },
        None => CsmError::Csv(e),
    }
}

fn write_csv<T: Serialize>(rows: &[T], header: &[&str], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CsmError::io(path, e))
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub cyc: f64,
    pub vis: f64,
    pub mask: f64,
    pub div: f64,
    pub fg: f64,
    pub total: f64,
}

pub fn write_losses_csv(history: &[LossScalars], path: &Path) -> Result<()> {
    let rows: Vec<LossRow> = history
        .iter()
        .enumerate()
        .map(|(iteration, s)| LossRow {
            iteration,
            cyc: s.cyc,
            vis: s.vis,
            mask: s.mask,
            div: s.div,
            fg: s.fg,
            total: s.total,
        })
        .collect();
    write_csv(&rows, &["iteration", "cyc", "vis", "mask", "div", "fg", "total"], path)
}

pub fn read_losses_csv(path: &Path) -> Result<Vec<LossRow>> {
    read_csv(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct KeypointRow {
    name: String,
    x: f64,
    y: f64,
    visible: u8,
}

pub fn write_keypoints_csv(kps: &[KeypointObs], path: &Path) -> Result<()> {
    let rows: Vec<KeypointRow> = kps
        .iter()
        .map(|k| KeypointRow {
            name: k.name.clone(),
            x: k.x,
            y: k.y,
            visible: k.visible as u8,
        })
        .collect();
    write_csv(&rows, &["name", "x", "y", "visible"], path)
}

pub fn read_keypoints_csv(path: &Path) -> Result<Vec<KeypointObs>> {
    let rows: Vec<KeypointRow> = read_csv(path)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.visible > 1 {
                return Err(CsmError::Parse {
                    file: path.display().to_string(),
                    line: i + 2,
                    msg: format!("visible must be 0 or 1, got {}", r.visible),
                });
            }
            Ok(KeypointObs {
                name: r.name,
                x: r.x,
                y: r.y,
                visible: r.visible == 1,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub distance: f64,
    pub confidence: f64,
    pub corresponds: u8,
}

impl TransferRow {
    pub fn new(name: &str, r: &TransferResult) -> Self {
        TransferRow {
            name: name.to_string(),
            x: r.target_pixel[0],
            y: r.target_pixel[1],
            distance: r.distance_3d,
            confidence: r.confidence,
            corresponds: r.corresponds as u8,
        }
    }
}

pub fn write_transfers_csv(rows: &[TransferRow], path: &Path) -> Result<()> {
    write_csv(rows, &["name", "x", "y", "distance", "confidence", "corresponds"], path)
}

pub fn read_transfers_csv(path: &Path) -> Result<Vec<TransferRow>> {
    read_csv(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RecordRow {
    id: u64,
    pred_x: f64,
    pred_y: f64,
    confidence: f64,
    gt_x: f64,
    gt_y: f64,
    gt_present: u8,
}

/// Records CSV; image size is not stored per row and is supplied by the
/// caller.
pub fn write_records_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    let rows: Vec<RecordRow> = records
        .iter()
        .map(|r| {
            let g = r.gt.unwrap_or([0.0, 0.0]);
            RecordRow {
                id: r.id,
                pred_x: r.pred[0],
                pred_y: r.pred[1],
                confidence: r.confidence,
                gt_x: g[0],
                gt_y: g[1],
                gt_present: r.gt.is_some() as u8,
            }
        })
        .collect();
    write_csv(&rows, &["id", "pred_x", "pred_y", "confidence", "gt_x", "gt_y", "gt_present"], path)
}

pub fn read_records_csv(path: &Path, height: usize, width: usize) -> Result<Vec<EvalRecord>> {
    let rows: Vec<RecordRow> = read_csv(path)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.gt_present > 1 || !r.confidence.is_finite() {
                return Err(CsmError::Parse {
                    file: path.display().to_string(),
                    line: i + 2,
                    msg: "gt_present must be 0 or 1 and confidence finite".into(),
                });
            }
            Ok(EvalRecord {
                id: r.id,
                pred: [r.pred_x, r.pred_y],
                confidence: r.confidence,
                gt: (r.gt_present == 1).then_some([r.gt_x, r.gt_y]),
                height,
                width,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::render_depth;
    use crate::template::{make_icosphere_template, RadialProfile};

    #[test]
    fn csmuv_layout_and_round_trip() {
        let dirs = vec![Vec3::x(), Vec3::new(0.0, 0.6, 0.8), -Vec3::z(), Vec3::y(), Vec3::z(), Vec3::x()];
        let map = SurfaceMap::new(3, 2, dirs, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        let bytes = encode_csmuv(&map);
        assert_eq!(&bytes[..7], b"CSMUV1\0");
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[11..15].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 15 + 6 * 16);
        assert_eq!(f32::from_le_bytes(bytes[15..19].try_into().unwrap()), 1.0);
        let back = decode_csmuv(&bytes).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        for (a, b) in back.dirs.iter().zip(&map.dirs) {
            assert!((a - b).norm() < 1e-7);
        }
        assert_eq!(back.fg_prob, map.fg_prob);
        assert_eq!(encode_csmuv(&back), bytes);
        assert!(decode_csmuv(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_csmuv(b"CSMUV2\0\0\0\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn mask_and_depth_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Mask::new(3, 1, vec![0.0, 1.0, 0.5]).unwrap();
        let p = dir.path().join("m.pgm");
        write_mask_pgm(&mask, &p).unwrap();
        let back = read_mask_pgm(&p).unwrap();
        assert_eq!(back.fg[..2], [0.0, 1.0]);
        assert!((back.fg[2] - 0.5).abs() < 1e-4);
        // 8-bit PGM without a sidecar.
        let p8 = dir.path().join("m8.pgm");
        fs::write(&p8, b"P5\n# comment\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(read_mask_pgm(&p8).unwrap().fg, vec![0.0, 1.0]);

        let t = make_icosphere_template(2, RadialProfile::Sphere).unwrap();
        let cam = Camera::new(8.0, [8.0, 8.0], [0.1, 0.2, 0.3]).unwrap();
        let d = render_depth(&t, &cam, 16, 16);
        let pd = dir.path().join("d.pgm");
        write_depth_pgm(16, 16, &d.depth, &pd).unwrap();
        let (w, h, back) = read_depth_pgm(&pd).unwrap();
        assert_eq!((w, h), (16, 16));
        let step = 16.0 / 65534.0;
        for (a, b) in d.depth.iter().zip(&back) {
            assert_eq!(a.is_finite(), b.is_finite());
            if a.is_finite() {
                assert!((a - b).abs() <= step);
            }
        }
    }

    #[test]
    fn table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let kps = vec![
            KeypointObs { name: "kp00".into(), x: 1.5, y: 2.25, visible: true },
            KeypointObs { name: "kp01".into(), x: -3.0, y: 0.0, visible: false },
        ];
        let p = dir.path().join("k.csv");
        write_keypoints_csv(&kps, &p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("name,x,y,visible\nkp00,1.5,2.25,1\n"));
        assert_eq!(read_keypoints_csv(&p).unwrap(), kps);

        let recs = vec![
            EvalRecord { id: 3, pred: [1.0, 2.0], confidence: 0.5, gt: Some([1.0, 2.5]), height: 4, width: 8 },
            EvalRecord { id: 4, pred: [0.0, 0.0], confidence: 0.25, gt: None, height: 4, width: 8 },
        ];
        let pr = dir.path().join("r.csv");
        write_records_csv(&recs, &pr).unwrap();
        assert_eq!(read_records_csv(&pr, 4, 8).unwrap(), recs);

        let hs = HypothesisSet::new(
            vec![Camera::new(2.0, [1.0, 2.0], [0.1, 0.2, 0.3]).unwrap(), Camera::default()],
            vec![0.5, -1.0],
        )
        .unwrap();
        let ph = dir.path().join("h.json");
        write_hypotheses(&hs, &ph).unwrap();
        let back = read_hypotheses(&ph).unwrap();
        assert_eq!(back.cameras, hs.cameras);
        assert_eq!(back.logits, hs.logits);

        let hist = vec![LossScalars { cyc: 1.0, vis: 0.5, mask: 0.25, div: -2.0, fg: 0.1, total: 0.0 }];
        let pl = dir.path().join("l.csv");
        write_losses_csv(&hist, &pl).unwrap();
        let text = fs::read_to_string(&pl).unwrap();
        assert!(text.starts_with("iteration,cyc,vis,mask,div,fg,total\n0,1.0,0.5,0.25,-2.0,0.1,0.0"));
        assert_eq!(read_losses_csv(&pl).unwrap()[0].div, -2.0);

        fs::write(&p, "name,x,y,visible\nkp,1,2,7\n").unwrap();
        assert!(matches!(read_keypoints_csv(&p), Err(CsmError::Parse { line: 2, .. })));
    }

    #[test]
    fn visualization_header() {
        let dir = tempfile::tempdir().unwrap();
        let map = SurfaceMap::new(2, 1, vec![Vec3::x(); 2], vec![1.0, 0.0]).unwrap();
        let mask = Mask::new(2, 1, vec![1.0, 0.0]).unwrap();
        let p = dir.path().join("v.ppm");
        write_visualization_ppm(&mask, &map, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P6\n4 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[255, 255, 255, 0, 0, 0, 255, 128, 128, 0, 0, 0]);
    }
}
