//! File formats: PLY and XYZ point clouds, PFM and PNG images, camera files.

use crate::error::{Error, Result};
use crate::geometry::{Camera, ImagePlanes, PointCloud, RenderedImage};
use nalgebra::{Matrix3, Vector3};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

// ---------------------------------------------------------------------------
// PLY
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "uchar" | "uint8" => ScalarType::U8,
            "char" | "int8" => ScalarType::I8,
            "ushort" | "uint16" => ScalarType::U16,
            "short" | "int16" => ScalarType::I16,
            "uint" | "uint32" => ScalarType::U32,
            "int" | "int32" => ScalarType::I32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::U8 | ScalarType::I8 => 1,
            ScalarType::U16 | ScalarType::I16 => 2,
            ScalarType::U32 | ScalarType::I32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read_f64(self, bytes: &[u8]) -> f64 {
        match self {
            ScalarType::U8 => bytes[0] as f64,
            ScalarType::I8 => bytes[0] as i8 as f64,
            ScalarType::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ScalarType::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

/// Load a point cloud from PLY (ASCII or binary little-endian). Requires
/// x, y, z and nx, ny, nz vertex properties; red/green/blue `uchar`
/// properties map to albedo in [0,1], defaulting to white when absent.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    // Header is ASCII, terminated by "end_header\n".
    let header_end = find_header_end(&bytes)
        .ok_or_else(|| Error::parse(path, "missing end_header"))?;
    let header_text = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::parse(path, "header is not valid UTF-8"))?;
    let mut lines = header_text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::parse(path, "not a PLY file (missing magic)"));
    }

    let mut format: Option<PlyFormat> = None;
    let mut vertex_count: Option<usize> = None;
    let mut properties: Vec<(String, ScalarType)> = Vec::new();
    let mut in_vertex_element = false;
    let mut vertex_seen = false;
    for raw in lines {
        let line = raw.trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => match tok.next() {
                Some("ascii") => format = Some(PlyFormat::Ascii),
                Some("binary_little_endian") => format = Some(PlyFormat::BinaryLittleEndian),
                other => {
                    return Err(Error::parse(
                        path,
                        format!("unsupported PLY format {other:?}"),
                    ))
                }
            },
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = tok.next().unwrap_or("");
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::parse(path, "bad element count"))?;
                if name == "vertex" {
                    if vertex_seen {
                        return Err(Error::parse(path, "duplicate vertex element"));
                    }
                    vertex_count = Some(count);
                    in_vertex_element = true;
                    vertex_seen = true;
                } else {
                    if !vertex_seen {
                        return Err(Error::parse(
                            path,
                            format!("element `{name}` precedes vertex element"),
                        ));
                    }
                    in_vertex_element = false;
                }
            }
            Some("property") => {
                if !in_vertex_element {
                    continue;
                }
                let ty = tok.next().unwrap_or("");
                if ty == "list" {
                    return Err(Error::parse(path, "list property on vertex element"));
                }
                let scalar = ScalarType::parse(ty)
                    .ok_or_else(|| Error::parse(path, format!("unknown type `{ty}`")))?;
                let name = tok
                    .next()
                    .ok_or_else(|| Error::parse(path, "property without name"))?;
                properties.push((name.to_string(), scalar));
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(Error::parse(path, format!("unknown header entry `{other}`")))
            }
            None => {}
        }
    }
    let format = format.ok_or_else(|| Error::parse(path, "missing format line"))?;
    let vertex_count = vertex_count.ok_or_else(|| Error::parse(path, "missing vertex element"))?;

    let find = |name: &str| properties.iter().position(|(n, _)| n == name);
    let px = [find("x"), find("y"), find("z")];
    let pn = [find("nx"), find("ny"), find("nz")];
    let pc = [find("red"), find("green"), find("blue")];
    if px.iter().any(Option::is_none) {
        return Err(Error::parse(path, "missing x/y/z properties"));
    }
    if pn.iter().any(Option::is_none) {
        return Err(Error::parse(
            path,
            "missing nx/ny/nz normal properties (normal estimation is not supported)",
        ));
    }
    let has_rgb = pc.iter().all(Option::is_some);

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(vertex_count);
    match format {
        PlyFormat::Ascii => {
            let body = std::str::from_utf8(&bytes[header_end..])
                .map_err(|_| Error::parse(path, "ASCII body is not valid UTF-8"))?;
            let mut tokens = body.split_whitespace();
            for v in 0..vertex_count {
                let mut row = Vec::with_capacity(properties.len());
                for (name, _) in &properties {
                    let tok = tokens.next().ok_or_else(|| {
                        Error::parse(path, format!("vertex {v}: missing value for {name}"))
                    })?;
                    row.push(tok.parse::<f64>().map_err(|_| {
                        Error::parse(path, format!("vertex {v}: bad value `{tok}` for {name}"))
                    })?);
                }
                rows.push(row);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = properties.iter().map(|(_, t)| t.size()).sum();
            let body = &bytes[header_end..];
            if body.len() < stride * vertex_count {
                return Err(Error::parse(
                    path,
                    format!(
                        "binary body too short: {} bytes for {} vertices of {} bytes",
                        body.len(),
                        vertex_count,
                        stride
                    ),
                ));
            }
            for v in 0..vertex_count {
                let mut off = v * stride;
                let mut row = Vec::with_capacity(properties.len());
                for (_, t) in &properties {
                    row.push(t.read_f64(&body[off..off + t.size()]));
                    off += t.size();
                }
                rows.push(row);
            }
        }
    }

    let mut positions = Vec::with_capacity(vertex_count);
    let mut normals = Vec::with_capacity(vertex_count);
    let mut albedo = Vec::with_capacity(vertex_count);
    for (v, row) in rows.iter().enumerate() {
        positions.push(Vector3::new(
            row[px[0].unwrap()],
            row[px[1].unwrap()],
            row[px[2].unwrap()],
        ));
        let n = Vector3::new(row[pn[0].unwrap()], row[pn[1].unwrap()], row[pn[2].unwrap()]);
        let len = n.norm();
        if !(len.is_finite() && len > 0.0) {
            return Err(Error::parse(path, format!("vertex {v}: zero-length normal")));
        }
        normals.push(n / len);
        if has_rgb {
            albedo.push(Vector3::new(
                row[pc[0].unwrap()] / 255.0,
                row[pc[1].unwrap()] / 255.0,
                row[pc[2].unwrap()] / 255.0,
            ));
        } else {
            albedo.push(Vector3::new(1.0, 1.0, 1.0));
        }
    }
    PointCloud::with_attributes(positions, normals, albedo, vec![1.0; vertex_count])
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let needle = b"end_header";
    let pos = bytes
        .windows(needle.len())
        .position(|w| w == needle)?;
    // Skip to just past the newline that terminates the line.
    let mut end = pos + needle.len();
    while end < bytes.len() && bytes[end] != b'\n' {
        end += 1;
    }
    Some((end + 1).min(bytes.len()))
}

/// Write a cloud as PLY: positions and normals in double precision plus
/// 8-bit albedo.
pub fn write_ply(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let fmt_line = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let header = format!(
        "ply\nformat {} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty double nx\nproperty double ny\nproperty double nz\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        fmt_line,
        cloud.len()
    );
    w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    match format {
        PlyFormat::Ascii => {
            for i in 0..cloud.len() {
                let p = cloud.positions[i];
                let n = cloud.normals[i];
                let a = cloud.albedo[i];
                writeln!(
                    w,
                    "{} {} {} {} {} {} {} {} {}",
                    p.x,
                    p.y,
                    p.z,
                    n.x,
                    n.y,
                    n.z,
                    to_u8(a.x),
                    to_u8(a.y),
                    to_u8(a.z)
                )
                .map_err(|e| Error::io(path, e))?;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for i in 0..cloud.len() {
                let p = cloud.positions[i];
                let n = cloud.normals[i];
                let a = cloud.albedo[i];
                for v in [p.x, p.y, p.z, n.x, n.y, n.z] {
                    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
                }
                w.write_all(&[to_u8(a.x), to_u8(a.y), to_u8(a.z)])
                    .map_err(|e| Error::io(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Debug dump of a gradient buffer: gradients occupy the normal slots so
/// standard viewers can display them as vector glyphs.
pub fn write_gradient_ply(
    path: &Path,
    cloud: &PointCloud,
    gradients: &[Vector3<f64>],
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = format!(
        "ply\nformat ascii 1.0\ncomment nx ny nz carry per-point gradients\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty double nx\nproperty double ny\nproperty double nz\nend_header\n",
        cloud.len()
    );
    w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    for (p, g) in cloud.positions.iter().zip(gradients) {
        writeln!(w, "{} {} {} {} {} {}", p.x, p.y, p.z, g.x, g.y, g.z)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// XYZ
// ---------------------------------------------------------------------------

/// Whitespace-separated `x y z nx ny nz` lines. Lines with positions only
/// are rejected because downstream stages need normals.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::parse(path, format!("line {}: bad number `{t}`", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        match vals.len() {
            6 => {
                positions.push(Vector3::new(vals[0], vals[1], vals[2]));
                let n = Vector3::new(vals[3], vals[4], vals[5]);
                let len = n.norm();
                if !(len.is_finite() && len > 0.0) {
                    return Err(Error::parse(
                        path,
                        format!("line {}: zero-length normal", lineno + 1),
                    ));
                }
                normals.push(n / len);
            }
            3 => {
                return Err(Error::parse(
                    path,
                    format!(
                        "line {}: positions without normals (normal estimation is not supported)",
                        lineno + 1
                    ),
                ))
            }
            n => {
                return Err(Error::parse(
                    path,
                    format!("line {}: expected 3 or 6 values, got {n}", lineno + 1),
                ))
            }
        }
    }
    PointCloud::new(positions, normals)
}

/// Load a cloud by extension (.ply or .xyz).
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => read_ply(path),
        Some("xyz") => read_xyz(path),
        other => Err(Error::MissingInput(format!(
            "unsupported cloud format {other:?} for {}",
            path.display()
        ))),
    }
}

// ---------------------------------------------------------------------------
// PFM
// ---------------------------------------------------------------------------

/// Write a float image as PFM ("PF" for 3 channels, "Pf" for 1), little
/// endian, rows bottom-to-top, no clamping.
pub fn write_pfm(path: &Path, img: &ImagePlanes) -> Result<()> {
    let channels = img.channels();
    if channels != 1 && channels != 3 {
        return Err(Error::ShapeMismatch(format!(
            "PFM supports 1 or 3 channels, got {channels}"
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let magic = if channels == 3 { "PF" } else { "Pf" };
    write!(w, "{}\n{} {}\n-1.0\n", magic, img.width(), img.height())
        .map_err(|e| Error::io(path, e))?;
    for y in (0..img.height()).rev() {
        for x in 0..img.width() {
            for c in 0..channels {
                let v = img.get(c, y, x) as f32;
                w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<ImagePlanes> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    // Header: magic, whitespace, width, height, scale, single whitespace.
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated PFM header"));
        }
        // Consume exactly one whitespace after the token.
        pos += 1;
        Ok(String::from_utf8_lossy(&bytes[start..pos - 1]).into_owned())
    };
    let magic = next_token(&bytes)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::parse(path, format!("bad PFM magic `{other}`"))),
    };
    let width: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| Error::parse(path, "bad PFM width"))?;
    let height: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| Error::parse(path, "bad PFM height"))?;
    let scale: f64 = next_token(&bytes)?
        .parse()
        .map_err(|_| Error::parse(path, "bad PFM scale"))?;
    let little_endian = scale < 0.0;
    if !little_endian {
        return Err(Error::parse(path, "big-endian PFM is not supported"));
    }
    let expected = width * height * channels * 4;
    if bytes.len() < pos + expected {
        return Err(Error::parse(
            path,
            format!("PFM body too short: {} < {}", bytes.len() - pos, expected),
        ));
    }
    let mut img = ImagePlanes::new(width, height, channels);
    let mut off = pos;
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                img.set(c, y, x, v as f64);
                off += 4;
            }
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

/// 8-bit PNG; values clamped to [0,1] and scaled. Three channels write RGB,
/// one channel writes grayscale.
pub fn write_png(path: &Path, img: &ImagePlanes) -> Result<()> {
    let w = img.width() as u32;
    let h = img.height() as u32;
    let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let result = match img.channels() {
        3 => {
            let mut out = image::RgbImage::new(w, h);
            for y in 0..img.height() {
                for x in 0..img.width() {
                    out.put_pixel(
                        x as u32,
                        y as u32,
                        image::Rgb([
                            quantize(img.get(0, y, x)),
                            quantize(img.get(1, y, x)),
                            quantize(img.get(2, y, x)),
                        ]),
                    );
                }
            }
            out.save(path)
        }
        1 => {
            let mut out = image::GrayImage::new(w, h);
            for y in 0..img.height() {
                for x in 0..img.width() {
                    out.put_pixel(x as u32, y as u32, image::Luma([quantize(img.get(0, y, x))]));
                }
            }
            out.save(path)
        }
        c => {
            return Err(Error::ShapeMismatch(format!(
                "PNG supports 1 or 3 channels, got {c}"
            )))
        }
    };
    result.map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: format!("PNG encode failed: {e}"),
    })
}

/// Read a PNG as linear-free values: raw bytes divided by 255, no sRGB
/// conversion.
pub fn read_png(path: &Path) -> Result<ImagePlanes> {
    let img = image::open(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: format!("PNG decode failed: {e}"),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = ImagePlanes::new(w as usize, h as usize, 3);
    for y in 0..h {
        for x in 0..w {
            let p = rgb.get_pixel(x, y);
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p.0[c] as f64 / 255.0);
            }
        }
    }
    Ok(out)
}

/// Save a rendered image by extension: .png (clamped 8-bit) or .pfm
/// (lossless float).
pub fn write_image(path: &Path, img: &RenderedImage) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(path, &img.planes),
        Some("pfm") => write_pfm(path, &img.planes),
        other => Err(Error::MissingInput(format!(
            "unsupported image format {other:?} for {}",
            path.display()
        ))),
    }
}

/// Load a reference image: .pfm preferred (exact floats), .png accepted with
/// values taken as raw bytes / 255.
pub fn read_reference_image(path: &Path) -> Result<ImagePlanes> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => read_pfm(path),
        Some("png") => read_png(path),
        other => Err(Error::MissingInput(format!(
            "unsupported reference format {other:?} for {}",
            path.display()
        ))),
    }
}

// ---------------------------------------------------------------------------
// Camera files
// ---------------------------------------------------------------------------

/// Plain-text camera: 9 rotation entries row-major, 3 translation entries,
/// focal length in pixels, width and height. `#` starts a comment.
pub fn write_camera(path: &Path, camera: &Camera) -> Result<()> {
    let mut s = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(s, "# rotation (row-major), translation, focal_px, width height");
    for r in 0..3 {
        let _ = writeln!(
            s,
            "{} {} {}",
            camera.rotation[(r, 0)],
            camera.rotation[(r, 1)],
            camera.rotation[(r, 2)]
        );
    }
    let _ = writeln!(
        s,
        "{} {} {}",
        camera.translation.x, camera.translation.y, camera.translation.z
    );
    let _ = writeln!(s, "{}", camera.focal_px);
    let _ = writeln!(s, "{} {}", camera.width, camera.height);
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tokens: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split_whitespace())
        .collect();
    if tokens.len() != 15 {
        return Err(Error::parse(
            path,
            format!("expected 15 numbers, found {}", tokens.len()),
        ));
    }
    let nums: Vec<f64> = tokens
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(path, format!("bad number `{t}`")))
        })
        .collect::<Result<_>>()?;
    let rotation = Matrix3::new(
        nums[0], nums[1], nums[2], nums[3], nums[4], nums[5], nums[6], nums[7], nums[8],
    );
    let translation = Vector3::new(nums[9], nums[10], nums[11]);
    let focal = nums[12];
    let width = nums[13] as u32;
    let height = nums[14] as u32;
    Camera::new(rotation, translation, focal, width, height)
}
