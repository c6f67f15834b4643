//! File formats: PLY point clouds, JSON poses/tracks/manifests, KITTI
//! scans and calibration, PPM images, and cloud colorization.
//!
//! Structured files are JSON objects carrying a `format_version` field.
//! Loaders validate the whole document and report every violation at once.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::{CameraIntrinsics, Se3};
use crate::pipeline::{CalibrationInputs, GroundTruth, PipelineConfig};
use crate::visual_ba::{FeatureTrack, Observation};

pub use crate::synth::RgbImage;

pub const FORMAT_VERSION: u32 = 1;

/// Largest accepted deviation of a pose quaternion from unit norm.
const QUATERNION_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {location}: {message}", path.display())]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },
    #[error("{}: unsupported layout: {message}", path.display())]
    UnsupportedLayout { path: PathBuf, message: String },
    #[error("{}: {} schema violation(s):\n  {}", path.display(), errors.len(), errors.join("\n  "))]
    Schema { path: PathBuf, errors: Vec<String> },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

// ---------------------------------------------------------------- PLY

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    F32,
    F64,
}

impl Scalar {
    fn size(self) -> usize {
        match self {
            Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    X,
    Y,
    Z,
    Intensity,
}

struct PlyHeader {
    format: PlyFormat,
    count: usize,
    properties: Vec<(Field, Scalar)>,
    /// Byte offset of the first data byte.
    data_start: usize,
    /// Number of header lines, for ASCII line numbers.
    header_lines: usize,
}

fn parse_ply_header(path: &Path, bytes: &[u8]) -> Result<PlyHeader, IoError> {
    let parse = |line: usize, message: String| IoError::Parse {
        path: path.to_path_buf(),
        location: format!("line {line}"),
        message,
    };
    let unsupported = |message: String| IoError::UnsupportedLayout {
        path: path.to_path_buf(),
        message,
    };
    let mut format = None;
    let mut count = None;
    let mut properties: Vec<(Field, Scalar)> = Vec::new();
    let mut in_vertex = false;
    let mut offset = 0;
    let mut line_no = 0;
    loop {
        let Some(end) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(parse(line_no + 1, "header is not terminated by end_header".into()));
        };
        let raw = &bytes[offset..offset + end];
        offset += end + 1;
        line_no += 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| parse(line_no, "header is not valid UTF-8".into()))?
            .trim_end_matches('\r');
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if line_no == 1 {
            if tokens != ["ply"] {
                return Err(parse(1, format!("expected magic 'ply', found '{line}'")));
            }
            continue;
        }
        match tokens.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", kind, version] => {
                if *version != "1.0" {
                    return Err(unsupported(format!("PLY version {version}")));
                }
                format = Some(match *kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLe,
                    other => return Err(unsupported(format!("format {other}"))),
                });
            }
            ["element", name, n] => {
                let n: usize = n
                    .parse()
                    .map_err(|_| parse(line_no, format!("bad element count '{n}'")))?;
                if *name == "vertex" {
                    if count.is_some() {
                        return Err(parse(line_no, "duplicate vertex element".into()));
                    }
                    count = Some(n);
                    in_vertex = true;
                } else if n > 0 {
                    return Err(unsupported(format!("element '{name}'")));
                } else {
                    in_vertex = false;
                }
            }
            ["property", "list", ..] => {
                return Err(unsupported(format!("list property in '{line}'")));
            }
            ["property", ty, name] => {
                if !in_vertex {
                    continue;
                }
                let scalar = match *ty {
                    "float" | "float32" => Scalar::F32,
                    "double" | "float64" => Scalar::F64,
                    other => {
                        return Err(unsupported(format!("property '{name}' has type {other}")));
                    }
                };
                let field = match *name {
                    "x" => Field::X,
                    "y" => Field::Y,
                    "z" => Field::Z,
                    "intensity" => Field::Intensity,
                    other => return Err(unsupported(format!("property '{other}'"))),
                };
                if properties.iter().any(|(f, _)| *f == field) {
                    return Err(parse(line_no, format!("duplicate property '{name}'")));
                }
                properties.push((field, scalar));
            }
            ["end_header"] => break,
            _ => return Err(parse(line_no, format!("unrecognized header line '{line}'"))),
        }
    }
    let format = format.ok_or_else(|| parse(line_no, "missing format line".into()))?;
    let count = count.ok_or_else(|| parse(line_no, "missing vertex element".into()))?;
    for (f, name) in [(Field::X, "x"), (Field::Y, "y"), (Field::Z, "z")] {
        if !properties.iter().any(|(p, _)| *p == f) {
            return Err(unsupported(format!("vertex property '{name}' is missing")));
        }
    }
    Ok(PlyHeader {
        format,
        count,
        properties,
        data_start: offset,
        header_lines: line_no,
    })
}

fn assemble_cloud(header: &PlyHeader, rows: Vec<[f64; 4]>) -> PointCloud {
    let has_intensity = header.properties.iter().any(|(f, _)| *f == Field::Intensity);
    PointCloud {
        points: rows.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect(),
        intensity: has_intensity.then(|| rows.iter().map(|r| r[3]).collect()),
    }
}

fn slot(f: Field) -> usize {
    match f {
        Field::X => 0,
        Field::Y => 1,
        Field::Z => 2,
        Field::Intensity => 3,
    }
}

/// Reads an ASCII or binary little-endian PLY with float/double `x, y, z`
/// and an optional `intensity`.
pub fn load_cloud(path: &Path) -> Result<PointCloud, IoError> {
    let bytes = read_bytes(path)?;
    let header = parse_ply_header(path, &bytes)?;
    let data = &bytes[header.data_start..];
    let rows = match header.format {
        PlyFormat::Ascii => parse_ascii_rows(path, &header, data)?,
        PlyFormat::BinaryLe => parse_binary_rows(path, &header, data)?,
    };
    let cloud = assemble_cloud(&header, rows);
    cloud
        .validate()
        .map_err(|e| IoError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(cloud)
}

fn parse_ascii_rows(path: &Path, header: &PlyHeader, data: &[u8]) -> Result<Vec<[f64; 4]>, IoError> {
    let text = std::str::from_utf8(data).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        location: format!("byte {}", header.data_start + e.valid_up_to()),
        message: "vertex data is not valid UTF-8".into(),
    })?;
    let mut rows = Vec::with_capacity(header.count);
    let mut lines = text.lines().enumerate();
    let mut last_line = header.header_lines;
    while rows.len() < header.count {
        let Some((k, line)) = lines.next() else {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                location: format!("line {}", last_line + 1),
                message: format!("expected {} vertices, found {}", header.count, rows.len()),
            });
        };
        let line_no = header.header_lines + k + 1;
        last_line = line_no;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != header.properties.len() {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                location: format!("line {line_no}"),
                message: format!(
                    "expected {} values per vertex, found {}",
                    header.properties.len(),
                    tokens.len()
                ),
            });
        }
        let mut row = [0.0; 4];
        for ((field, scalar), tok) in header.properties.iter().zip(&tokens) {
            let v: f64 = match scalar {
                Scalar::F32 => tok.parse::<f32>().map(f64::from),
                Scalar::F64 => tok.parse::<f64>(),
            }
            .map_err(|_| IoError::Parse {
                path: path.to_path_buf(),
                location: format!("line {line_no}"),
                message: format!("'{tok}' is not a number"),
            })?;
            row[slot(*field)] = v;
        }
        rows.push(row);
    }
    Ok(rows)
}

fn parse_binary_rows(path: &Path, header: &PlyHeader, data: &[u8]) -> Result<Vec<[f64; 4]>, IoError> {
    let stride: usize = header.properties.iter().map(|(_, s)| s.size()).sum();
    let needed = stride * header.count;
    if data.len() < needed {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            location: format!("byte {}", header.data_start + data.len()),
            message: format!(
                "expected {} vertices ({needed} bytes), found {} bytes",
                header.count,
                data.len()
            ),
        });
    }
    let rows = data[..needed]
        .chunks_exact(stride)
        .map(|rec| {
            let mut row = [0.0; 4];
            let mut at = 0;
            for (field, scalar) in &header.properties {
                row[slot(*field)] = match scalar {
                    Scalar::F32 => f64::from(f32::from_le_bytes(rec[at..at + 4].try_into().unwrap())),
                    Scalar::F64 => f64::from_le_bytes(rec[at..at + 8].try_into().unwrap()),
                };
                at += scalar.size();
            }
            row
        })
        .collect();
    Ok(rows)
}

/// Writes a binary little-endian PLY with double precision fields.
pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    if let Some(i) = &cloud.intensity {
        if i.len() != cloud.points.len() {
            return Err(IoError::Invalid(format!(
                "{} intensities for {} points",
                i.len(),
                cloud.points.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(200 + cloud.points.len() * 32);
    let mut h = String::new();
    h.push_str("ply\nformat binary_little_endian 1.0\n");
    let _ = writeln!(h, "element vertex {}", cloud.points.len());
    h.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.intensity.is_some() {
        h.push_str("property double intensity\n");
    }
    h.push_str("end_header\n");
    out.extend_from_slice(h.as_bytes());
    for (k, p) in cloud.points.iter().enumerate() {
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(i) = &cloud.intensity {
            out.extend_from_slice(&i[k].to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

/// Writes the colored points of a cloud as an ASCII PLY with `r, g, b`.
pub fn save_colored_cloud(path: &Path, cloud: &ColoredCloud) -> Result<(), IoError> {
    let colored: Vec<(&Vector3<f64>, [u8; 3])> = cloud
        .points
        .iter()
        .zip(&cloud.colors)
        .filter_map(|(p, c)| c.map(|c| (p, c)))
        .collect();
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", colored.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for (p, c) in colored {
        let _ = writeln!(s, "{} {} {} {} {} {}", p.x, p.y, p.z, c[0], c[1], c[2]);
    }
    write_bytes(path, s.as_bytes())
}

// ---------------------------------------------------------------- KITTI

/// Reads a KITTI velodyne scan: packed little-endian `f32` records of
/// `x, y, z, intensity`.
pub fn load_kitti_scan(path: &Path) -> Result<PointCloud, IoError> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 16 != 0 {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            location: format!("byte {}", bytes.len() - bytes.len() % 16),
            message: format!("file size {} is not a multiple of the 16-byte record", bytes.len()),
        });
    }
    let f = |b: &[u8]| f64::from(f32::from_le_bytes(b.try_into().unwrap()));
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut intensity = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        points.push(Vector3::new(f(&rec[0..4]), f(&rec[4..8]), f(&rec[8..12])));
        intensity.push(f(&rec[12..16]));
    }
    let cloud = PointCloud {
        points,
        intensity: Some(intensity),
    };
    cloud
        .validate()
        .map_err(|e| IoError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(cloud)
}

/// Projection matrices and the velodyne-to-camera-0 transform of a KITTI
/// `calib.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiCalibration {
    /// `P0 … P3`, row-major 3×4.
    pub projections: Vec<[f64; 12]>,
    /// Velodyne to rectified camera 0.
    pub cam0_from_velo: Se3,
}

impl KittiCalibration {
    /// Pinhole intrinsics of camera `cam` (distortion-free, as rectified).
    pub fn intrinsics(&self, cam: usize, width: u32, height: u32) -> Result<CameraIntrinsics, IoError> {
        let p = self.projection(cam)?;
        CameraIntrinsics::new(p[0], p[5], p[2], p[6], 0.0, 0.0, width, height)
            .map_err(|e| IoError::Invalid(e.to_string()))
    }

    /// Camera `cam` to velodyne, the extrinsics this crate estimates.
    pub fn extrinsics(&self, cam: usize) -> Result<Se3, IoError> {
        let p = self.projection(cam)?;
        // P = K [I | b]: the rectified cameras differ by a pure offset b
        let b = Vector3::new(p[3] / p[0], p[7] / p[5], p[11]);
        let cam_from_cam0 = Se3::new(nalgebra::UnitQuaternion::identity(), b);
        Ok(cam_from_cam0.compose(&self.cam0_from_velo).inverse())
    }

    fn projection(&self, cam: usize) -> Result<&[f64; 12], IoError> {
        self.projections
            .get(cam)
            .ok_or_else(|| IoError::Invalid(format!("calibration has no P{cam}")))
    }
}

fn parse_numbers(path: &Path, line_no: usize, text: &str, n: usize) -> Result<Vec<f64>, IoError> {
    let vals: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse).collect();
    let vals = vals.map_err(|_| IoError::Parse {
        path: path.to_path_buf(),
        location: format!("line {line_no}"),
        message: "non-numeric value".into(),
    })?;
    if vals.len() != n {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            location: format!("line {line_no}"),
            message: format!("expected {n} values, found {}", vals.len()),
        });
    }
    Ok(vals)
}

fn se3_from_3x4(m: &[f64]) -> Se3 {
    let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    Se3::from_rotation_matrix(&r, Vector3::new(m[3], m[7], m[11]))
}

/// Parses a KITTI odometry `calib.txt` (`P0:` … `P3:`, `Tr:`).
pub fn load_kitti_calibration(path: &Path) -> Result<KittiCalibration, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut projections: Vec<Option<[f64; 12]>> = vec![None; 4];
    let mut tr = None;
    for (k, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let key = key.trim();
        let slot = match key {
            "P0" => Some(0),
            "P1" => Some(1),
            "P2" => Some(2),
            "P3" => Some(3),
            _ => None,
        };
        if let Some(s) = slot {
            let v = parse_numbers(path, k + 1, rest, 12)?;
            projections[s] = Some(v.try_into().unwrap());
        } else if key == "Tr" || key == "Tr_velo_to_cam" {
            tr = Some(se3_from_3x4(&parse_numbers(path, k + 1, rest, 12)?));
        }
    }
    let mut errors = Vec::new();
    for (i, p) in projections.iter().enumerate() {
        if p.is_none() {
            errors.push(format!("missing P{i}"));
        }
    }
    if tr.is_none() {
        errors.push("missing Tr".into());
    }
    if !errors.is_empty() {
        return Err(IoError::Schema {
            path: path.to_path_buf(),
            errors,
        });
    }
    Ok(KittiCalibration {
        projections: projections.into_iter().map(Option::unwrap).collect(),
        cam0_from_velo: tr.unwrap(),
    })
}

/// Parses a KITTI pose file (camera `i` to world, one 3×4 row per line) and
/// returns first-camera-to-camera-`i` transforms.
pub fn load_kitti_poses(path: &Path) -> Result<Vec<Se3>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut world_from_cam = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        world_from_cam.push(se3_from_3x4(&parse_numbers(path, k + 1, line, 12)?));
    }
    let Some(first) = world_from_cam.first().copied() else {
        return Ok(Vec::new());
    };
    Ok(world_from_cam.iter().map(|w| w.inverse().compose(&first)).collect())
}

// ---------------------------------------------------------------- PPM

/// Writes a binary PPM (`P6`, maxval 255).
pub fn save_ppm(path: &Path, image: &RgbImage) -> Result<(), IoError> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    write_bytes(path, &out)
}

/// Reads a binary PPM (`P6`, maxval 255); `#` comments are allowed in the
/// header.
pub fn load_ppm(path: &Path) -> Result<RgbImage, IoError> {
    let bytes = read_bytes(path)?;
    let parse = |offset: usize, message: String| IoError::Parse {
        path: path.to_path_buf(),
        location: format!("byte {offset}"),
        message,
    };
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse(pos, "truncated header".into()));
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if fields[0].1 != "P6" {
        return Err(IoError::UnsupportedLayout {
            path: path.to_path_buf(),
            message: format!("image type {} (only P6 is read)", fields[0].1),
        });
    }
    let num = |(off, s): &(usize, String)| s.parse::<u32>().map_err(|_| parse(*off, format!("bad number '{s}'")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(IoError::UnsupportedLayout {
            path: path.to_path_buf(),
            message: format!("maxval {maxval} (only 255 is read)"),
        });
    }
    pos += 1;
    let n = w as usize * h as usize * 3;
    if bytes.len() < pos + n {
        return Err(parse(
            bytes.len(),
            format!("expected {n} pixel bytes, found {}", bytes.len().saturating_sub(pos)),
        ));
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data: bytes[pos..pos + n].to_vec(),
    })
}

// ---------------------------------------------------------------- colorization

#[derive(Debug, Clone, PartialEq)]
pub struct ColoredCloud {
    pub points: Vec<Vector3<f64>>,
    /// `None` for points outside the image or behind the camera.
    pub colors: Vec<Option<[u8; 3]>>,
}

impl ColoredCloud {
    pub fn colored_count(&self) -> usize {
        self.colors.iter().filter(|c| c.is_some()).count()
    }
}

/// Colors every point of `cloud` with the nearest image pixel.
///
/// `lidar_from_cloud` maps cloud coordinates into the LiDAR frame the image
/// was taken at (identity for a scan of that frame); points then reach the
/// camera through the inverse extrinsics.
pub fn colorize(
    cloud: &PointCloud,
    image: &RgbImage,
    intrinsics: &CameraIntrinsics,
    extrinsics: &Se3,
    lidar_from_cloud: &Se3,
) -> ColoredCloud {
    let camera_from_cloud = extrinsics.inverse().compose(lidar_from_cloud);
    let colors = cloud
        .points
        .iter()
        .map(|p| {
            let pc = camera_from_cloud.transform(p);
            if pc.z <= 0.0 {
                return None;
            }
            let px = intrinsics.project(&pc).ok()?;
            let (c, r) = (px.x.round(), px.y.round());
            let inside = c >= 0.0 && r >= 0.0 && c < f64::from(image.width) && r < f64::from(image.height);
            inside.then(|| image.get(c as u32, r as u32))
        })
        .collect();
    ColoredCloud {
        points: cloud.points.clone(),
        colors,
    }
}

// ---------------------------------------------------------------- schema checking

/// Collects every violation found while walking a JSON document.
struct Checker {
    errors: Vec<String>,
}

impl Checker {
    fn new() -> Self {
        Self { errors: Vec::new() }
    }

    fn fail(&mut self, msg: String) {
        self.errors.push(msg);
    }

    fn object<'a>(
        &mut self,
        v: &'a Value,
        at: &str,
        required: &[&str],
        optional: &[&str],
    ) -> Option<&'a Map<String, Value>> {
        let Some(obj) = v.as_object() else {
            self.fail(format!("{at}: expected an object"));
            return None;
        };
        for key in required {
            if !obj.contains_key(*key) {
                self.fail(format!("{at}: missing field '{key}'"));
            }
        }
        for key in obj.keys() {
            if !required.contains(&key.as_str()) && !optional.contains(&key.as_str()) {
                self.fail(format!("{at}: unknown field '{key}'"));
            }
        }
        Some(obj)
    }

    fn version(&mut self, obj: &Map<String, Value>, at: &str) {
        match obj.get("format_version") {
            Some(v) if v.as_u64() == Some(u64::from(FORMAT_VERSION)) => {}
            Some(v) => self.fail(format!("{at}.format_version: expected {FORMAT_VERSION}, found {v}")),
            None => {}
        }
    }

    fn number(&mut self, v: &Value, at: &str) -> Option<f64> {
        match v.as_f64() {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                self.fail(format!("{at}: expected a finite number, found {v}"));
                None
            }
        }
    }

    fn index(&mut self, v: &Value, at: &str) -> Option<usize> {
        match v.as_u64() {
            Some(x) => Some(x as usize),
            None => {
                self.fail(format!("{at}: expected a non-negative integer, found {v}"));
                None
            }
        }
    }

    fn string<'a>(&mut self, v: &'a Value, at: &str) -> Option<&'a str> {
        let s = v.as_str();
        if s.is_none() {
            self.fail(format!("{at}: expected a string, found {v}"));
        }
        s
    }

    fn array<'a>(&mut self, v: &'a Value, at: &str) -> Option<&'a Vec<Value>> {
        let a = v.as_array();
        if a.is_none() {
            self.fail(format!("{at}: expected an array"));
        }
        a
    }

    fn numbers<const N: usize>(&mut self, v: &Value, at: &str) -> Option<[f64; N]> {
        let a = self.array(v, at)?;
        if a.len() != N {
            self.fail(format!("{at}: expected {N} numbers, found {}", a.len()));
            return None;
        }
        let mut out = [0.0; N];
        let mut ok = true;
        for (k, x) in a.iter().enumerate() {
            match self.number(x, &format!("{at}[{k}]")) {
                Some(x) => out[k] = x,
                None => ok = false,
            }
        }
        ok.then_some(out)
    }

    fn pose(&mut self, v: &Value, at: &str) -> Option<Se3> {
        let a: [f64; 7] = self.numbers(v, at)?;
        let norm = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2] + a[3] * a[3]).sqrt();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOL {
            self.fail(format!("{at}: quaternion norm {norm} is not 1"));
            return None;
        }
        Some(Se3::from_array(&a))
    }

    fn intrinsics(&mut self, v: &Value, at: &str) -> Option<CameraIntrinsics> {
        const KEYS: [&str; 8] = ["fx", "fy", "cx", "cy", "k1", "k2", "width", "height"];
        let obj = self.object(v, at, &KEYS, &[])?;
        let mut vals = [0.0; 6];
        let mut ok = true;
        for (k, key) in KEYS[..6].iter().enumerate() {
            match obj.get(*key).and_then(|x| self.number(x, &format!("{at}.{key}"))) {
                Some(x) => vals[k] = x,
                None => ok = false,
            }
        }
        let mut size = [0u32; 2];
        for (k, key) in KEYS[6..].iter().enumerate() {
            match obj.get(*key).map(|x| (x, x.as_u64())) {
                Some((_, Some(n))) if n > 0 && n <= u64::from(u32::MAX) => size[k] = n as u32,
                Some((x, _)) => {
                    self.fail(format!("{at}.{key}: expected a positive integer, found {x}"));
                    ok = false;
                }
                None => ok = false,
            }
        }
        if !ok {
            return None;
        }
        match CameraIntrinsics::new(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], size[0], size[1]) {
            Ok(d) => Some(d),
            Err(e) => {
                self.fail(format!("{at}: {e}"));
                None
            }
        }
    }

    fn finish<T>(self, path: &Path, value: Option<T>) -> Result<T, IoError> {
        match (self.errors.is_empty(), value) {
            (true, Some(v)) => Ok(v),
            (_, _) => Err(IoError::Schema {
                path: path.to_path_buf(),
                errors: if self.errors.is_empty() {
                    vec!["invalid document".into()]
                } else {
                    self.errors
                },
            }),
        }
    }
}

fn read_json(path: &Path) -> Result<Value, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })
}

fn write_json(path: &Path, value: &Value) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

// ---------------------------------------------------------------- poses and tracks

fn poses_from_value(v: &Value, c: &mut Checker) -> Option<Vec<Se3>> {
    let obj = c.object(v, "$", &["format_version", "poses"], &[])?;
    c.version(obj, "$");
    let rows = c.array(obj.get("poses")?, "$.poses")?;
    let poses: Vec<Option<Se3>> = rows
        .iter()
        .enumerate()
        .map(|(k, r)| c.pose(r, &format!("$.poses[{k}]")))
        .collect();
    poses.into_iter().collect()
}

/// Reads `{"format_version": 1, "poses": [[qw, qx, qy, qz, tx, ty, tz], …]}`.
pub fn load_poses(path: &Path) -> Result<Vec<Se3>, IoError> {
    let v = read_json(path)?;
    let mut c = Checker::new();
    let poses = poses_from_value(&v, &mut c);
    c.finish(path, poses)
}

pub fn save_poses(path: &Path, poses: &[Se3]) -> Result<(), IoError> {
    let rows: Vec<[f64; 7]> = poses.iter().map(Se3::to_array).collect();
    write_json(path, &json!({ "format_version": FORMAT_VERSION, "poses": rows }))
}

fn tracks_from_value(v: &Value, c: &mut Checker) -> Option<Vec<FeatureTrack>> {
    let obj = c.object(v, "$", &["format_version", "tracks"], &[])?;
    c.version(obj, "$");
    let Some(map) = obj.get("tracks")?.as_object() else {
        c.fail("$.tracks: expected an object keyed by point id".into());
        return None;
    };
    let mut tracks = Vec::with_capacity(map.len());
    let mut ok = true;
    for (key, obs) in map {
        let at = format!("$.tracks.{key}");
        let Ok(point_id) = key.parse::<usize>() else {
            c.fail(format!("{at}: point id '{key}' is not a non-negative integer"));
            ok = false;
            continue;
        };
        let Some(rows) = c.array(obs, &at) else {
            ok = false;
            continue;
        };
        if rows.len() < 2 {
            c.fail(format!("{at}: {} observation(s), at least 2 are required", rows.len()));
            ok = false;
        }
        let mut observations = Vec::with_capacity(rows.len());
        let mut frames = BTreeSet::new();
        for (k, row) in rows.iter().enumerate() {
            let at = format!("{at}[{k}]");
            let Some(a) = c.array(row, &at) else {
                ok = false;
                continue;
            };
            if a.len() != 4 {
                c.fail(format!("{at}: expected [frame, u, v, sigma], found {} values", a.len()));
                ok = false;
                continue;
            }
            let frame = c.index(&a[0], &format!("{at}.frame"));
            let u = c.number(&a[1], &format!("{at}.u"));
            let vv = c.number(&a[2], &format!("{at}.v"));
            let sigma = c.number(&a[3], &format!("{at}.sigma"));
            if let Some(s) = sigma {
                if s <= 0.0 {
                    c.fail(format!("{at}.sigma: {s} is not positive"));
                    ok = false;
                }
            }
            if let Some(f) = frame {
                if !frames.insert(f) {
                    c.fail(format!("{at}.frame: frame {f} observed twice"));
                    ok = false;
                }
            }
            match (frame, u, vv, sigma) {
                (Some(f), Some(u), Some(vv), Some(s)) => {
                    observations.push(Observation::isotropic(f, Vector2::new(u, vv), s))
                }
                _ => ok = false,
            }
        }
        tracks.push(FeatureTrack { point_id, observations });
    }
    tracks.sort_by_key(|t| t.point_id);
    ok.then_some(tracks)
}

/// Reads `{"format_version": 1, "tracks": {"<point_id>": [[frame, u, v, sigma], …]}}`.
/// Tracks come back sorted by point id.
pub fn load_tracks(path: &Path) -> Result<Vec<FeatureTrack>, IoError> {
    let v = read_json(path)?;
    let mut c = Checker::new();
    let tracks = tracks_from_value(&v, &mut c);
    c.finish(path, tracks)
}

/// Fails on observations whose covariance is not `σ²·I`, since the file
/// stores a single sigma.
pub fn save_tracks(path: &Path, tracks: &[FeatureTrack]) -> Result<(), IoError> {
    let mut map = Map::new();
    let mut sorted: Vec<&FeatureTrack> = tracks.iter().collect();
    sorted.sort_by_key(|t| t.point_id);
    for t in sorted {
        let mut rows = Vec::with_capacity(t.observations.len());
        for o in &t.observations {
            let c = o.covariance;
            if c[(0, 1)] != 0.0 || c[(1, 0)] != 0.0 || c[(0, 0)] != c[(1, 1)] {
                return Err(IoError::Invalid(format!(
                    "track {} frame {}: pixel covariance is not isotropic",
                    t.point_id, o.frame
                )));
            }
            rows.push(json!([o.frame, o.pixel.x, o.pixel.y, c[(0, 0)].sqrt()]));
        }
        if map.insert(t.point_id.to_string(), Value::Array(rows)).is_some() {
            return Err(IoError::Invalid(format!("duplicate track {}", t.point_id)));
        }
    }
    write_json(path, &json!({ "format_version": FORMAT_VERSION, "tracks": map }))
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEntry {
    pub cloud: PathBuf,
    pub width: u32,
    pub height: u32,
    pub image: Option<PathBuf>,
}

/// Parsed manifest with paths resolved against its directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub frames: Vec<FrameEntry>,
    pub tracks: PathBuf,
    pub camera_poses: PathBuf,
    pub lidar_poses: Option<PathBuf>,
    pub initial_intrinsics: CameraIntrinsics,
    pub initial_extrinsics: Se3,
    pub initial_scale: Option<f64>,
    pub ground_truth: Option<GroundTruth>,
    pub config: Option<PipelineConfig>,
}

const MANIFEST_REQUIRED: [&str; 6] = [
    "format_version",
    "frames",
    "tracks",
    "camera_poses",
    "initial_intrinsics",
    "initial_extrinsics",
];
const MANIFEST_OPTIONAL: [&str; 4] = ["lidar_poses", "initial_scale", "ground_truth", "config"];

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, IoError> {
    let v = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut c = Checker::new();
    let manifest = manifest_from_value(&v, &base, &mut c);
    c.finish(path, manifest)
}

fn manifest_from_value(v: &Value, base: &Path, c: &mut Checker) -> Option<DatasetManifest> {
    let obj = c.object(v, "$", &MANIFEST_REQUIRED, &MANIFEST_OPTIONAL)?;
    c.version(obj, "$");
    let resolve = |s: &str| base.join(s);

    let frames = obj.get("frames").and_then(|f| c.array(f, "$.frames")).map(|rows| {
        rows.iter()
            .enumerate()
            .map(|(k, row)| {
                let at = format!("$.frames[{k}]");
                let o = c.object(row, &at, &["cloud", "width", "height"], &["image"])?;
                let cloud = o.get("cloud").and_then(|x| c.string(x, &format!("{at}.cloud")));
                let width = o.get("width").and_then(|x| c.index(x, &format!("{at}.width")));
                let height = o.get("height").and_then(|x| c.index(x, &format!("{at}.height")));
                let image = match o.get("image") {
                    Some(x) => Some(c.string(x, &format!("{at}.image"))?),
                    None => None,
                };
                Some(FrameEntry {
                    cloud: resolve(cloud?),
                    width: width? as u32,
                    height: height? as u32,
                    image: image.map(resolve),
                })
            })
            .collect::<Vec<_>>()
    });
    let tracks = obj.get("tracks").and_then(|x| c.string(x, "$.tracks")).map(resolve);
    let camera_poses = obj
        .get("camera_poses")
        .and_then(|x| c.string(x, "$.camera_poses"))
        .map(resolve);
    let lidar_poses = obj
        .get("lidar_poses")
        .map(|x| c.string(x, "$.lidar_poses").map(resolve));
    let intr = obj
        .get("initial_intrinsics")
        .and_then(|x| c.intrinsics(x, "$.initial_intrinsics"));
    let extr = obj
        .get("initial_extrinsics")
        .and_then(|x| c.pose(x, "$.initial_extrinsics"));
    let scale = match obj.get("initial_scale") {
        Some(x) => match c.number(x, "$.initial_scale") {
            Some(s) if s > 0.0 => Some(Some(s)),
            Some(s) => {
                c.fail(format!("$.initial_scale: {s} is not positive"));
                None
            }
            None => None,
        },
        None => Some(None),
    };
    let gt = match obj.get("ground_truth") {
        Some(x) => ground_truth_from_value(x, c).map(Some),
        None => Some(None),
    };
    let config = match obj.get("config") {
        Some(x) => match serde_json::from_value::<PipelineConfig>(x.clone()) {
            Ok(cfg) => Some(Some(cfg)),
            Err(e) => {
                c.fail(format!("$.config: {e}"));
                None
            }
        },
        None => Some(None),
    };

    let frames: Vec<FrameEntry> = frames?.into_iter().collect::<Option<_>>()?;
    if frames.len() < 2 {
        c.fail(format!("$.frames: {} frame(s), at least 2 are required", frames.len()));
    }
    if let Some(d) = intr {
        for (k, f) in frames.iter().enumerate() {
            if (f.width, f.height) != (d.width, d.height) {
                c.fail(format!(
                    "$.frames[{k}]: image size {}x{} differs from the intrinsics' {}x{}",
                    f.width, f.height, d.width, d.height
                ));
            }
        }
    }
    let lidar_poses = match lidar_poses {
        None => None,
        Some(p) => Some(p?),
    };
    Some(DatasetManifest {
        frames,
        tracks: tracks?,
        camera_poses: camera_poses?,
        lidar_poses,
        initial_intrinsics: intr?,
        initial_extrinsics: extr?,
        initial_scale: scale?,
        ground_truth: gt?,
        config: config?,
    })
}

fn ground_truth_from_value(v: &Value, c: &mut Checker) -> Option<GroundTruth> {
    let obj = c.object(v, "$.ground_truth", &["intrinsics", "extrinsics"], &["scale"])?;
    let intr = obj
        .get("intrinsics")
        .and_then(|x| c.intrinsics(x, "$.ground_truth.intrinsics"));
    let extr = obj
        .get("extrinsics")
        .and_then(|x| c.pose(x, "$.ground_truth.extrinsics"));
    let scale = match obj.get("scale") {
        Some(x) => Some(c.number(x, "$.ground_truth.scale")?),
        None => None,
    };
    Some(GroundTruth {
        intrinsics: intr?,
        extrinsics: extr?,
        scale,
    })
}

fn intrinsics_value(d: &CameraIntrinsics) -> Value {
    json!({
        "fx": d.fx, "fy": d.fy, "cx": d.cx, "cy": d.cy, "k1": d.k1, "k2": d.k2,
        "width": d.width, "height": d.height,
    })
}

/// Loads every file a manifest references and checks cross-file
/// consistency.
pub fn load_inputs(manifest: &DatasetManifest) -> Result<CalibrationInputs, IoError> {
    let clouds = manifest
        .frames
        .iter()
        .map(|f| load_cloud(&f.cloud))
        .collect::<Result<Vec<_>, _>>()?;
    let tracks = load_tracks(&manifest.tracks)?;
    let camera_poses = load_poses(&manifest.camera_poses)?;
    let lidar_poses = manifest.lidar_poses.as_deref().map(load_poses).transpose()?;
    let inputs = CalibrationInputs {
        clouds,
        tracks,
        camera_poses,
        initial_intrinsics: manifest.initial_intrinsics,
        initial_extrinsics: manifest.initial_extrinsics,
        initial_scale: manifest.initial_scale,
        lidar_poses,
        ground_truth: manifest.ground_truth,
    };
    inputs.validate().map_err(IoError::Invalid)?;
    Ok(inputs)
}

/// Writes `inputs` as a manifest directory: `manifest.json`, `clouds/`,
/// `tracks.json`, `camera_poses.json` and, when present, `lidar_poses.json`.
/// `images` are relative paths recorded per frame.
pub fn save_inputs(
    dir: &Path,
    inputs: &CalibrationInputs,
    config: Option<&PipelineConfig>,
    images: Option<&[String]>,
) -> Result<PathBuf, IoError> {
    inputs.validate().map_err(IoError::Invalid)?;
    if let Some(im) = images {
        if im.len() != inputs.clouds.len() {
            return Err(IoError::Invalid(format!(
                "{} images for {} frames",
                im.len(),
                inputs.clouds.len()
            )));
        }
    }
    let d = &inputs.initial_intrinsics;
    let mut frames = Vec::with_capacity(inputs.clouds.len());
    for (k, cloud) in inputs.clouds.iter().enumerate() {
        let rel = format!("clouds/{k:04}.ply");
        save_cloud(&dir.join(&rel), cloud)?;
        let mut f = json!({ "cloud": rel, "width": d.width, "height": d.height });
        if let Some(im) = images {
            f["image"] = Value::String(im[k].clone());
        }
        frames.push(f);
    }
    save_tracks(&dir.join("tracks.json"), &inputs.tracks)?;
    save_poses(&dir.join("camera_poses.json"), &inputs.camera_poses)?;
    let mut m = json!({
        "format_version": FORMAT_VERSION,
        "frames": frames,
        "tracks": "tracks.json",
        "camera_poses": "camera_poses.json",
        "initial_intrinsics": intrinsics_value(d),
        "initial_extrinsics": inputs.initial_extrinsics.to_array(),
    });
    if let Some(lp) = &inputs.lidar_poses {
        save_poses(&dir.join("lidar_poses.json"), lp)?;
        m["lidar_poses"] = json!("lidar_poses.json");
    }
    if let Some(s) = inputs.initial_scale {
        m["initial_scale"] = json!(s);
    }
    if let Some(gt) = &inputs.ground_truth {
        let mut g = json!({
            "intrinsics": intrinsics_value(&gt.intrinsics),
            "extrinsics": gt.extrinsics.to_array(),
        });
        if let Some(s) = gt.scale {
            g["scale"] = json!(s);
        }
        m["ground_truth"] = g;
    }
    if let Some(cfg) = config {
        m["config"] = serde_json::to_value(cfg).map_err(|e| IoError::Invalid(e.to_string()))?;
    }
    let path = dir.join("manifest.json");
    write_json(&path, &m)?;
    Ok(path)
}

/// Reads a pipeline configuration file.
pub fn load_config(path: &Path) -> Result<PipelineConfig, IoError> {
    let v = read_json(path)?;
    let cfg: PipelineConfig = serde_json::from_value(v).map_err(|e| IoError::Schema {
        path: path.to_path_buf(),
        errors: vec![e.to_string()],
    })?;
    if cfg.format_version != crate::pipeline::CONFIG_FORMAT_VERSION {
        return Err(IoError::Schema {
            path: path.to_path_buf(),
            errors: vec![format!(
                "format_version: expected {}, found {}",
                crate::pipeline::CONFIG_FORMAT_VERSION,
                cfg.format_version
            )],
        });
    }
    Ok(cfg)
}

/// Serializes any value as pretty JSON.
pub fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let v = serde_json::to_value(value).map_err(|e| IoError::Invalid(e.to_string()))?;
    write_json(path, &v)
}

/// Deserializes a JSON file with serde, for reports and checkpoints.
pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let v = read_json(path)?;
    serde_json::from_value(v).map_err(|e| IoError::Schema {
        path: path.to_path_buf(),
        errors: vec![e.to_string()],
    })
}
