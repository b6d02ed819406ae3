//! Software rasterizer for multi-channel attribute images.
//!
//! Conventions:
//! - Pixel centers sit at integer + 0.5; `u` grows right, `v` grows down.
//! - Perspective cameras use a pinhole with +z forward and +y down in
//!   camera space; a point needs camera z > 1e-6.
//! - Orthographic cameras look down camera -z with +y up; depth is -z and
//!   `scale` is pixels per meter.
//! - A mirrored camera flips `u -> width - u`. The canonical back camera is
//!   the front camera turned 180 degrees about +y and mirrored, so a world
//!   point lands on the same pixel column in both views.
//! - Coverage is binary at pixel centers with a top-left fill rule. Depth
//!   ties keep the lowest triangle index. No backface culling.

use std::io::BufWriter;
use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3};

use crate::body::{lbs_pose, PoseParams, ShapeParams, SkinnedBody};
use crate::error::{param_err, Error, Result};
use crate::mesh::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Perspective { fx: f64, fy: f64, cx: f64, cy: f64 },
    Orthographic { scale: f64, cx: f64, cy: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub projection: Projection,
    /// World-from-camera rotation.
    pub rotation: Matrix3<f64>,
    /// Camera origin in world coordinates.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
    pub mirror_x: bool,
}

/// Continuous pixel position and depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Camera {
    pub fn new(
        projection: Projection,
        rotation: Matrix3<f64>,
        translation: Vec3,
        width: usize,
        height: usize,
        mirror_x: bool,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return param_err("image size must be at least 1x1");
        }
        match projection {
            Projection::Perspective { fx, fy, .. } if fx <= 0.0 || fy <= 0.0 => {
                return param_err("focal lengths must be positive")
            }
            Projection::Orthographic { scale, .. } if scale <= 0.0 => {
                return param_err("orthographic scale must be positive")
            }
            _ => {}
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if err > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return param_err("camera rotation is not a proper rotation");
        }
        Ok(Self {
            projection,
            rotation,
            translation,
            width,
            height,
            mirror_x,
        })
    }

    /// Canonical front view: orthographic, looking down world -z from
    /// z = 2, covering [-extent, extent] vertically.
    pub fn front_ortho(width: usize, height: usize, extent: f64) -> Result<Self> {
        Self::new(
            Projection::Orthographic {
                scale: height as f64 / (2.0 * extent),
                cx: width as f64 / 2.0,
                cy: height as f64 / 2.0,
            },
            Matrix3::identity(),
            Vec3::new(0.0, 0.0, 2.0),
            width,
            height,
            false,
        )
    }

    /// Canonical back view, mirrored to align with [`Camera::front_ortho`].
    pub fn back_ortho(width: usize, height: usize, extent: f64) -> Result<Self> {
        Self::new(
            Projection::Orthographic {
                scale: height as f64 / (2.0 * extent),
                cx: width as f64 / 2.0,
                cy: height as f64 / 2.0,
            },
            Matrix3::from_diagonal(&Vec3::new(-1.0, 1.0, -1.0)),
            Vec3::new(0.0, 0.0, -2.0),
            width,
            height,
            true,
        )
    }

    /// Perspective front view from `distance` meters along +z with a
    /// vertical field of view covering [-extent, extent] at the origin.
    pub fn front_perspective(width: usize, height: usize, extent: f64, distance: f64) -> Result<Self> {
        let f = height as f64 / 2.0 * distance / extent;
        // +z forward, +y down: rotate 180 degrees about x
        Self::new(
            Projection::Perspective {
                fx: f,
                fy: f,
                cx: width as f64 / 2.0,
                cy: height as f64 / 2.0,
            },
            Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)),
            Vec3::new(0.0, 0.0, distance),
            width,
            height,
            false,
        )
    }

    pub fn back_perspective(width: usize, height: usize, extent: f64, distance: f64) -> Result<Self> {
        let mut cam = Self::front_perspective(width, height, extent, distance)?;
        cam.rotation = Matrix3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0));
        cam.translation = Vec3::new(0.0, 0.0, -distance);
        cam.mirror_x = true;
        Ok(cam)
    }

    pub fn is_perspective(&self) -> bool {
        matches!(self.projection, Projection::Perspective { .. })
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation.transpose() * (x - self.translation)
    }

    /// Project a world point.
    pub fn project(&self, x: &Vec3) -> Result<Projected> {
        let p = self.to_camera(x);
        let (mut u, v, depth) = match self.projection {
            Projection::Orthographic { scale, cx, cy } => (cx + scale * p.x, cy - scale * p.y, -p.z),
            Projection::Perspective { fx, fy, cx, cy } => {
                if p.z <= 1e-6 {
                    return Err(Error::Projection(format!(
                        "point at camera depth {} is not in front of the camera",
                        p.z
                    )));
                }
                (cx + fx * p.x / p.z, cy + fy * p.y / p.z, p.z)
            }
        };
        if self.mirror_x {
            u = self.width as f64 - u;
        }
        Ok(Projected { u, v, depth })
    }

    /// Projection plus d(u, v)/d(world x).
    pub fn project_with_jacobian(&self, x: &Vec3) -> Result<(Projected, Matrix2x3<f64>)> {
        let proj = self.project(x)?;
        let rt = self.rotation.transpose();
        let p = rt * (x - self.translation);
        let local = match self.projection {
            Projection::Orthographic { scale, .. } => {
                Matrix2x3::new(scale, 0.0, 0.0, 0.0, -scale, 0.0)
            }
            Projection::Perspective { fx, fy, .. } => {
                let iz = 1.0 / p.z;
                Matrix2x3::new(
                    fx * iz,
                    0.0,
                    -fx * p.x * iz * iz,
                    0.0,
                    fy * iz,
                    -fy * p.y * iz * iz,
                )
            }
        };
        let mut j = local * rt;
        if self.mirror_x {
            j.row_mut(0).neg_mut();
        }
        Ok((proj, j))
    }

    /// True when (u, v) provably ignore world z: orthographic with image
    /// axes orthogonal to world z, exactly.
    pub fn pixel_ignores_world_z(&self) -> bool {
        !self.is_perspective() && self.rotation[(2, 0)] == 0.0 && self.rotation[(2, 1)] == 0.0
    }
}

/// H x W x C float raster with a coverage mask. Uncovered pixels are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub mask: Vec<bool>,
}

impl AttributeImage {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
            mask: vec![false; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return param_err("attribute image data length mismatch");
        }
        let mask = data
            .chunks_exact(channels)
            .map(|px| px.iter().any(|&x| x != 0.0))
            .collect();
        Ok(Self {
            height,
            width,
            channels,
            data,
            mask,
        })
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn covered(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn coverage(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Zero every uncovered pixel.
    pub fn enforce_mask(&mut self) {
        for (px, &m) in self.data.chunks_exact_mut(self.channels).zip(&self.mask) {
            if !m {
                px.fill(0.0);
            }
        }
    }

    /// Channel-wise concatenation; the mask is the union.
    pub fn concat(images: &[&AttributeImage]) -> Result<AttributeImage> {
        let first = images.first().ok_or_else(|| Error::Param("nothing to concatenate".into()))?;
        if images
            .iter()
            .any(|i| i.height != first.height || i.width != first.width)
        {
            return param_err("images must share H x W");
        }
        let channels = images.iter().map(|i| i.channels).sum();
        let mut out = AttributeImage::new(first.height, first.width, channels);
        for p in 0..first.height * first.width {
            let mut off = p * channels;
            for img in images {
                out.data[off..off + img.channels]
                    .copy_from_slice(&img.data[p * img.channels..(p + 1) * img.channels]);
                off += img.channels;
                out.mask[p] |= img.mask[p];
            }
        }
        Ok(out)
    }
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Top or left edge for a triangle with positive [`edge`] area.
fn is_top_left(a: (f64, f64), b: (f64, f64)) -> bool {
    let (du, dv) = (b.0 - a.0, b.1 - a.1);
    (dv == 0.0 && du > 0.0) || dv < 0.0
}

/// Rasterize a mesh with `channels` attributes per vertex (row-major in
/// `attributes`). Triangles with a vertex behind a perspective camera are
/// skipped.
pub fn rasterize(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    attributes: &[f32],
    channels: usize,
    camera: &Camera,
) -> Result<AttributeImage> {
    if attributes.len() != vertices.len() * channels {
        return param_err(format!(
            "{} attribute values for {} vertices x {channels} channels",
            attributes.len(),
            vertices.len()
        ));
    }
    let (w, h) = (camera.width, camera.height);
    let mut img = AttributeImage::new(h, w, channels);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let projected: Vec<Option<Projected>> = vertices.iter().map(|v| camera.project(v).ok()).collect();
    let perspective = camera.is_perspective();
    for face in faces {
        let mut idx = [face[0] as usize, face[1] as usize, face[2] as usize];
        let Some(mut p) = idx
            .iter()
            .map(|&i| projected[i])
            .collect::<Option<Vec<_>>>()
        else {
            continue;
        };
        let sc = |q: &Projected| (q.u, q.v);
        let mut area = edge(sc(&p[0]), sc(&p[1]), sc(&p[2]));
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            p.swap(1, 2);
            idx.swap(1, 2);
            area = -area;
        }
        let s = [sc(&p[0]), sc(&p[1]), sc(&p[2])];
        let umin = s.iter().map(|q| q.0).fold(f64::INFINITY, f64::min);
        let umax = s.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max);
        let vmin = s.iter().map(|q| q.1).fold(f64::INFINITY, f64::min);
        let vmax = s.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max);
        let x0 = ((umin - 0.5).ceil().max(0.0)) as usize;
        let y0 = ((vmin - 0.5).ceil().max(0.0)) as usize;
        let x1 = (umax - 0.5).floor().min(w as f64 - 1.0);
        let y1 = (vmax - 0.5).floor().min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        let tl = [
            is_top_left(s[1], s[2]),
            is_top_left(s[2], s[0]),
            is_top_left(s[0], s[1]),
        ];
        for y in y0..=y1 {
            for x in x0..=x1 {
                let pc = (x as f64 + 0.5, y as f64 + 0.5);
                let e = [edge(s[1], s[2], pc), edge(s[2], s[0], pc), edge(s[0], s[1], pc)];
                let inside = e
                    .iter()
                    .zip(&tl)
                    .all(|(&ei, &t)| ei > 0.0 || (ei == 0.0 && t));
                if !inside {
                    continue;
                }
                let b = [e[0] / area, e[1] / area, e[2] / area];
                let (depth, wts) = if perspective {
                    let iz = [b[0] / p[0].depth, b[1] / p[1].depth, b[2] / p[2].depth];
                    let sum = iz[0] + iz[1] + iz[2];
                    (1.0 / sum, [iz[0] / sum, iz[1] / sum, iz[2] / sum])
                } else {
                    (b[0] * p[0].depth + b[1] * p[1].depth + b[2] * p[2].depth, b)
                };
                let pix = y * w + x;
                if depth < zbuf[pix] {
                    zbuf[pix] = depth;
                    img.mask[pix] = true;
                    let out = &mut img.data[pix * channels..(pix + 1) * channels];
                    for (c, o) in out.iter_mut().enumerate() {
                        let a = |k: usize| attributes[idx[k] * channels + c] as f64;
                        *o = (wts[0] * a(0) + wts[1] * a(1) + wts[2] * a(2)) as f32;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Dense 6-channel control image: template coordinates then posed positions.
pub fn render_control(
    body: &SkinnedBody,
    pose: &PoseParams,
    shape: &ShapeParams,
    camera: &Camera,
) -> Result<AttributeImage> {
    let posed = lbs_pose(body, pose, shape)?;
    let attrs: Vec<f32> = posed.control_attributes().into_iter().flatten().collect();
    rasterize(&posed.vertices, &posed.faces, &attrs, 6, camera)
}

/// Save a 3-channel image as 8-bit RGBA PNG; alpha carries coverage.
pub fn save_png(path: &Path, img: &AttributeImage) -> Result<()> {
    if img.channels != 3 {
        return param_err("PNG export needs a 3-channel image");
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgba);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    let mut bytes = Vec::with_capacity(img.width * img.height * 4);
    for (px, &m) in img.data.chunks_exact(3).zip(&img.mask) {
        for &c in px {
            bytes.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        bytes.push(if m { 255 } else { 0 });
    }
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(())
}

/// Load an 8-bit RGB or RGBA PNG. With alpha, coverage is alpha > 0;
/// without, any nonzero channel.
pub fn load_png(path: &Path) -> Result<AttributeImage> {
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image("only 8-bit PNGs are supported".into()));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Image(format!("unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut img = AttributeImage::new(h, w, 3);
    for (p, px) in buf[..w * h * stride].chunks_exact(stride).enumerate() {
        for c in 0..3 {
            img.data[p * 3 + c] = px[c] as f32 / 255.0;
        }
        img.mask[p] = if stride == 4 {
            px[3] > 0
        } else {
            px[..3].iter().any(|&c| c > 0)
        };
    }
    img.enforce_mask();
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::make_default_body;

    fn ortho(size: usize, scale: f64) -> Camera {
        Camera::new(
            Projection::Orthographic {
                scale,
                cx: size as f64 / 2.0,
                cy: size as f64 / 2.0,
            },
            Matrix3::identity(),
            Vec3::zeros(),
            size,
            size,
            false,
        )
        .unwrap()
    }

    #[test]
    fn ortho_optical_axis_hits_center() {
        let p = ortho(256, 1.0).project(&Vec3::new(0.0, 0.0, -1.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (128.0, 128.0, 1.0));
    }

    #[test]
    fn pinhole_projection() {
        let cam = Camera::new(
            Projection::Perspective {
                fx: 256.0,
                fy: 256.0,
                cx: 128.0,
                cy: 128.0,
            },
            Matrix3::identity(),
            Vec3::zeros(),
            256,
            256,
            false,
        )
        .unwrap();
        let p = cam.project(&Vec3::new(0.5, 0.0, 1.0)).unwrap();
        assert_eq!(p.u, 256.0);
        assert_eq!(p.depth, 1.0);
        assert!(matches!(
            cam.project(&Vec3::new(0.0, 0.0, -1.0)),
            Err(Error::Projection(_))
        ));
    }

    #[test]
    fn camera_validation() {
        let bad = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let proj = Projection::Orthographic {
            scale: 1.0,
            cx: 0.0,
            cy: 0.0,
        };
        assert!(Camera::new(proj, bad, Vec3::zeros(), 4, 4, false).is_err());
        assert!(Camera::new(proj, Matrix3::identity(), Vec3::zeros(), 0, 4, false).is_err());
    }

    #[test]
    fn back_camera_is_pixel_aligned_with_front() {
        let f = Camera::front_ortho(64, 64, 1.0).unwrap();
        let b = Camera::back_ortho(64, 64, 1.0).unwrap();
        let x = Vec3::new(0.3, -0.2, 0.1);
        let (pf, pb) = (f.project(&x).unwrap(), b.project(&x).unwrap());
        assert_eq!((pf.u, pf.v), (pb.u, pb.v));
        assert!(f.pixel_ignores_world_z() && b.pixel_ignores_world_z());
        // the back camera sees the far side first
        assert!(pb.depth > b.project(&Vec3::new(0.3, -0.2, -0.1)).unwrap().depth);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for cam in [
            Camera::back_ortho(32, 32, 1.0).unwrap(),
            Camera::front_perspective(32, 32, 1.0, 3.0).unwrap(),
            Camera::back_perspective(32, 32, 1.0, 3.0).unwrap(),
        ] {
            let x = Vec3::new(0.2, -0.3, 0.4);
            let (_, j) = cam.project_with_jacobian(&x).unwrap();
            for k in 0..3 {
                let mut dx = Vec3::zeros();
                dx[k] = 1e-6;
                let (a, b) = (cam.project(&(x + dx)).unwrap(), cam.project(&(x - dx)).unwrap());
                assert!(((a.u - b.u) / 2e-6 - j[(0, k)]).abs() < 1e-5);
                assert!(((a.v - b.v) / 2e-6 - j[(1, k)]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn constant_attribute_is_exact() {
        let cam = ortho(32, 10.0);
        let v = [
            Vec3::new(-1.0, -1.0, -1.0),
            Vec3::new(1.2, -0.7, -1.5),
            Vec3::new(0.1, 1.3, -2.0),
        ];
        let img = rasterize(&v, &[[0, 1, 2]], &[7.0, 7.0, 7.0], 1, &cam).unwrap();
        assert!(img.coverage() > 50);
        for p in 0..32 * 32 {
            if img.mask[p] {
                assert_eq!(img.data[p], 7.0);
            } else {
                assert_eq!(img.data[p], 0.0);
            }
        }
    }

    #[test]
    fn coverage_matches_half_space_oracle() {
        let cam = ortho(40, 1.0);
        // right triangle with vertices off pixel centers: pixel coords
        // (3.2, 4.1), (30.7, 4.1), (3.2, 35.3); world y flips
        let tri = [(3.2, 4.1), (30.7, 4.1), (3.2, 35.3)];
        let v: Vec<Vec3> = tri
            .iter()
            .map(|&(u, vv)| Vec3::new(u - 20.0, 20.0 - vv, -1.0))
            .collect();
        let img = rasterize(&v, &[[0, 1, 2]], &[0.0; 3], 1, &cam).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                // inside: px > 3.2, py > 4.1, below hypotenuse
                let hyp = (px - 3.2) / (30.7 - 3.2) + (py - 4.1) / (35.3 - 4.1);
                let inside = px > 3.2 && py > 4.1 && hyp < 1.0;
                assert_eq!(img.covered(y, x), inside, "pixel {x},{y}");
            }
        }
    }

    #[test]
    fn nearer_square_wins_overlap() {
        let cam = ortho(20, 5.0);
        let sq = |z: f64, off: f64| {
            vec![
                Vec3::new(-1.0 + off, -1.0, z),
                Vec3::new(1.0 + off, -1.0, z),
                Vec3::new(1.0 + off, 1.0, z),
                Vec3::new(-1.0 + off, 1.0, z),
            ]
        };
        let mut verts = sq(-2.0, 0.5); // far square, index 0..3, attribute b
        verts.extend(sq(-1.0, -0.5)); // near square, attribute a
        let faces = [[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]];
        let attrs = [2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0];
        let img = rasterize(&verts, &faces, &attrs, 1, &cam).unwrap();
        // overlap region x in (-0.5, 0.5)
        let p = cam.project(&Vec3::new(0.0, 0.0, -1.0)).unwrap();
        assert_eq!(img.pixel(p.v as usize, p.u as usize)[0], 1.0);
    }

    #[test]
    fn empty_mesh_gives_empty_coverage() {
        let img = rasterize(&[], &[], &[], 3, &ortho(8, 1.0)).unwrap();
        assert_eq!(img.coverage(), 0);
    }

    #[test]
    fn control_image_identity_pose_channels_agree() {
        let body = make_default_body(8, 2).unwrap();
        let cam = Camera::front_ortho(64, 64, 1.0).unwrap();
        let img = render_control(&body, &PoseParams::zero(16), &ShapeParams::zero(2), &cam).unwrap();
        assert!(img.coverage() > 300);
        for p in 0..64 * 64 {
            let px = &img.data[p * 6..p * 6 + 6];
            assert_eq!(&px[..3], &px[3..]);
        }
    }

    #[test]
    fn control_image_multires_consistency() {
        let body = make_default_body(12, 2).unwrap();
        let pose = PoseParams::zero(16);
        let shape = ShapeParams::zero(2);
        let lo = render_control(&body, &pose, &shape, &Camera::front_ortho(256, 256, 1.0).unwrap()).unwrap();
        let hi = render_control(&body, &pose, &shape, &Camera::front_ortho(512, 512, 1.0).unwrap()).unwrap();
        let mut agree = 0;
        for y in 0..256 {
            for x in 0..256 {
                let n = (0..4)
                    .filter(|k| hi.covered(2 * y + k / 2, 2 * x + k % 2))
                    .count();
                if (n >= 2) == lo.covered(y, x) {
                    agree += 1;
                }
            }
        }
        assert!(agree as f64 / (256.0 * 256.0) >= 0.98);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = AttributeImage::new(4, 5, 3);
        for p in 0..20 {
            if p % 3 != 0 {
                img.mask[p] = true;
                img.data[p * 3] = (p as f32) / 20.0;
                img.data[p * 3 + 2] = 1.0;
            }
        }
        let path = dir.path().join("x.png");
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.mask, img.mask);
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
