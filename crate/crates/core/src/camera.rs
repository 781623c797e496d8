//! Pinhole camera model, depth images and point clouds.
//!
//! Pixel `(u, v)` (column, row) has its center at image coordinate `(u, v)`,
//! so a camera with `cx = (width - 1) / 2` is left/right symmetric. Depth
//! value `0` marks an invalid pixel everywhere in the crate.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Intrinsics {
    /// 128×96 camera with a 71°×56° field of view.
    fn default() -> Self {
        Self::centered(128, 96, 90.0, 90.0)
    }
}

impl Intrinsics {
    /// Intrinsics with the principal point at the image center.
    pub fn centered(width: usize, height: usize, fx: f64, fy: f64) -> Self {
        Self {
            fx,
            fy,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(format!("{key}.{field}"), reason));
        if !(self.fx.is_finite() && self.fx > 0.0) {
            return bad("fx", "must be finite and > 0");
        }
        if !(self.fy.is_finite() && self.fy > 0.0) {
            return bad("fy", "must be finite and > 0");
        }
        if self.width == 0 || self.height == 0 {
            return bad("width", "image must have at least one pixel");
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return bad("cx", "must lie strictly inside the image width");
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return bad("cy", "must lie strictly inside the image height");
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Viewing ray through pixel `(u, v)` scaled so its optical z is 1.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Image-plane location of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Projects a camera-frame point. Returns `None` for points on or behind the
/// image plane.
pub fn project(intr: &Intrinsics, p_cam: &Vec3) -> Option<Projection> {
    if !(p_cam.z > 0.0) {
        return None;
    }
    Some(Projection {
        u: intr.fx * p_cam.x / p_cam.z + intr.cx,
        v: intr.fy * p_cam.y / p_cam.z + intr.cy,
        depth: p_cam.z,
    })
}

pub fn back_project(intr: &Intrinsics, u: f64, v: f64, depth: f64) -> Vec3 {
    intr.ray(u, v) * depth
}

/// Dense metric z-depth image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub intrinsics: Intrinsics,
    data: Vec<f64>,
}

impl DepthImage {
    pub fn zeros(intrinsics: Intrinsics) -> Self {
        Self {
            intrinsics,
            data: vec![0.0; intrinsics.pixel_count()],
        }
    }

    pub fn constant(intrinsics: Intrinsics, depth: f64) -> Self {
        Self {
            intrinsics,
            data: vec![depth; intrinsics.pixel_count()],
        }
    }

    /// Wraps a row-major buffer. Negative and non-finite values become 0.
    pub fn from_vec(intrinsics: Intrinsics, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != intrinsics.pixel_count() {
            return Err(Error::format(
                "depth image",
                format!(
                    "expected {} values, got {}",
                    intrinsics.pixel_count(),
                    data.len()
                ),
            ));
        }
        for d in &mut data {
            if !d.is_finite() || *d < 0.0 {
                *d = 0.0;
            }
        }
        Ok(Self { intrinsics, data })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.intrinsics.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, depth: f64) {
        let d = if depth.is_finite() && depth > 0.0 { depth } else { 0.0 };
        self.data[v * self.intrinsics.width + u] = d;
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }

    /// Iterates `(u, v, depth)` over valid pixels in row-major order.
    pub fn valid_pixels(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let w = self.intrinsics.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0.0)
            .map(move |(i, &d)| (i % w, i / w, d))
    }

    const MAGIC: &'static [u8; 4] = b"MNDP";

    /// Binary encoding: magic `MNDP`, u32 width, u32 height, six f64
    /// (fx, fy, cx, cy, width, height), then f32 depths, all little-endian.
    pub fn to_mndp_bytes(&self) -> Vec<u8> {
        let i = &self.intrinsics;
        let mut out = Vec::with_capacity(4 + 8 + 48 + 4 * self.data.len());
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&(i.width as u32).to_le_bytes());
        out.extend_from_slice(&(i.height as u32).to_le_bytes());
        for x in [i.fx, i.fy, i.cx, i.cy, i.width as f64, i.height as f64] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for &d in &self.data {
            out.extend_from_slice(&(d as f32).to_le_bytes());
        }
        out
    }

    pub fn from_mndp_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |r: &str| Error::format("MNDP", r);
        if bytes.len() < 60 || &bytes[..4] != Self::MAGIC {
            return Err(err("missing MNDP header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let (width, height) = (u32_at(4), u32_at(8));
        let intrinsics = Intrinsics {
            fx: f64_at(12),
            fy: f64_at(20),
            cx: f64_at(28),
            cy: f64_at(36),
            width,
            height,
        };
        let n = width
            .checked_mul(height)
            .ok_or_else(|| err("image size overflows"))?;
        if bytes.len() != 60 + 4 * n {
            return Err(err(&format!(
                "expected {} bytes of depth data, found {}",
                4 * n,
                bytes.len() - 60
            )));
        }
        let data = bytes[60..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        DepthImage::from_vec(intrinsics, data)
    }

    pub fn write_mndp(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_mndp_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_mndp(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_mndp_bytes(&buf)
    }

    /// 16-bit grayscale PNG in millimeters; depths above 65.535 m saturate.
    pub fn write_png_mm(&self, path: impl AsRef<Path>) -> Result<()> {
        let (w, h) = (self.width() as u32, self.height() as u32);
        let px: Vec<u16> = self
            .data
            .iter()
            .map(|&d| (d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, px)
            .expect("buffer size matches dimensions");
        img.save(path.as_ref())?;
        Ok(())
    }

    /// Reads a 16-bit millimeter PNG. The file carries no intrinsics, so the
    /// caller supplies them; the image size must match.
    pub fn read_png_mm(path: impl AsRef<Path>, intrinsics: Intrinsics) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)?.into_luma16();
        let (w, h) = img.dimensions();
        if w as usize != intrinsics.width || h as usize != intrinsics.height {
            return Err(Error::DimensionMismatch(
                w as usize,
                h as usize,
                intrinsics.width,
                intrinsics.height,
            ));
        }
        let data = img.into_raw().into_iter().map(|mm| mm as f64 / 1000.0).collect();
        DepthImage::from_vec(intrinsics, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CloudFrame {
    Camera,
    World,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub frame: CloudFrame,
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(frame: CloudFrame, points: Vec<Vec3>) -> Self {
        Self { frame, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Unprojects every valid pixel and maps it through `pose` (camera to world).
/// An identity pose yields a camera-frame cloud.
pub fn depth_to_pointcloud(img: &DepthImage, pose: &Pose) -> PointCloud {
    let intr = &img.intrinsics;
    let points = img
        .valid_pixels()
        .map(|(u, v, d)| pose.transform_point(&back_project(intr, u as f64, v as f64, d)))
        .collect();
    let frame = if *pose == Pose::identity() {
        CloudFrame::Camera
    } else {
        CloudFrame::World
    };
    PointCloud::new(frame, points)
}

/// Forward-warps `src` into a camera with intrinsics `dst_intr` located at
/// `src_to_dst` relative to the source camera (the pose maps source-frame
/// points into the destination frame). Each source point lands on the
/// nearest destination pixel; the smallest depth wins.
pub fn reproject_depth(src: &DepthImage, src_to_dst: &Pose, dst_intr: &Intrinsics) -> DepthImage {
    let mut out = DepthImage::zeros(*dst_intr);
    let (w, h) = (dst_intr.width as f64, dst_intr.height as f64);
    for (u, v, d) in src.valid_pixels() {
        let p = src_to_dst.transform_point(&back_project(&src.intrinsics, u as f64, v as f64, d));
        let Some(proj) = project(dst_intr, &p) else {
            continue;
        };
        let (pu, pv) = (proj.u.round(), proj.v.round());
        if pu < 0.0 || pv < 0.0 || pu >= w || pv >= h {
            continue;
        }
        let idx = pv as usize * dst_intr.width + pu as usize;
        let cur = out.data[idx];
        if cur == 0.0 || proj.depth < cur {
            out.data[idx] = proj.depth;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> Intrinsics {
        Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 101,
            height: 101,
        }
    }

    #[test]
    fn projection_of_axis_point_hits_principal_point() {
        let intr = small();
        let p = project(&intr, &Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (intr.cx, intr.cy, 2.0));
    }

    #[test]
    fn projection_hand_arithmetic() {
        let p = project(&small(), &Vec3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!((p.u, p.v), (100.0, 50.0));
    }

    #[test]
    fn behind_camera_is_not_projectable() {
        assert!(project(&small(), &Vec3::new(0.0, 0.0, -1.0)).is_none());
        assert!(project(&small(), &Vec3::new(1.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn intrinsics_validation_names_field() {
        let mut i = small();
        i.cx = 200.0;
        let e = i.validate("camera").unwrap_err().to_string();
        assert!(e.contains("camera.cx"), "{e}");
        assert!(Intrinsics::default().validate("camera").is_ok());
    }

    #[test]
    fn pointcloud_skips_invalid_pixels() {
        let intr = Intrinsics::centered(5, 5, 10.0, 10.0);
        assert!(depth_to_pointcloud(&DepthImage::zeros(intr), &Pose::identity()).is_empty());
        let mut img = DepthImage::zeros(intr);
        img.set(2, 2, 3.0);
        let cloud = depth_to_pointcloud(&img, &Pose::identity());
        assert_eq!(cloud.points, vec![Vec3::new(0.0, 0.0, 3.0)]);
        assert_eq!(cloud.frame, CloudFrame::Camera);
    }

    #[test]
    fn constant_depth_cloud_has_constant_z() {
        let img = DepthImage::constant(Intrinsics::default(), 2.5);
        let cloud = depth_to_pointcloud(&img, &Pose::identity());
        assert_eq!(cloud.len(), Intrinsics::default().pixel_count());
        assert!(cloud.points.iter().all(|p| p.z == 2.5));
    }

    #[test]
    fn reproject_identity_is_identity() {
        let intr = Intrinsics::default();
        let mut img = DepthImage::zeros(intr);
        for v in 0..intr.height {
            for u in 0..intr.width {
                if (u + v) % 3 != 0 {
                    img.set(u, v, 1.0 + 0.01 * u as f64 + 0.02 * v as f64);
                }
            }
        }
        let out = reproject_depth(&img, &Pose::identity(), &intr);
        for (u, v, d) in img.valid_pixels() {
            assert!((out.get(u, v) - d).abs() < 1e-12);
        }
    }

    #[test]
    fn reproject_narrower_focal_conserves_values() {
        let intr = Intrinsics::default();
        let mut img = DepthImage::zeros(intr);
        for v in 0..intr.height {
            for u in 0..intr.width {
                img.set(u, v, 2.0 + (u * 7 + v * 3) as f64 * 0.001);
            }
        }
        let mut half = intr;
        half.fx /= 2.0;
        half.fy /= 2.0;
        let out = reproject_depth(&img, &Pose::identity(), &half);
        let src: Vec<f64> = img.data().to_vec();
        let mut hits = 0;
        for (_, _, d) in out.valid_pixels() {
            hits += 1;
            assert!(src.iter().any(|&s| (s - d).abs() < 1e-12));
        }
        assert!(hits > 0 && hits < img.valid_count());
    }

    #[test]
    fn reproject_translated_wall() {
        let intr = Intrinsics::default();
        let img = DepthImage::constant(intr, 3.0);
        // Destination camera one meter behind the source.
        let shift = Pose::from_translation(Vec3::new(0.0, 0.0, 1.0));
        let out = reproject_depth(&img, &shift, &intr);
        assert!(out.valid_count() > 0);
        for (_, _, d) in out.valid_pixels() {
            assert!((d - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mndp_round_trip_and_rejects_garbage() {
        let intr = Intrinsics::centered(4, 3, 5.0, 6.0);
        let img = DepthImage::from_vec(intr, (0..12).map(|i| i as f64 * 0.25).collect()).unwrap();
        let bytes = img.to_mndp_bytes();
        assert_eq!(&bytes[..4], b"MNDP");
        assert_eq!(DepthImage::from_mndp_bytes(&bytes).unwrap(), img);
        assert!(DepthImage::from_mndp_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(DepthImage::from_mndp_bytes(b"nope").is_err());
    }

    #[test]
    fn png_millimeter_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let intr = Intrinsics::centered(6, 4, 5.0, 5.0);
        let img = DepthImage::from_vec(intr, (0..24).map(|i| i as f64 * 0.123).collect()).unwrap();
        img.write_png_mm(&path).unwrap();
        let back = DepthImage::read_png_mm(&path, intr).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.0005 + 1e-12);
        }
        assert_eq!(back.get(0, 0), 0.0);
        assert!(DepthImage::read_png_mm(&path, Intrinsics::centered(5, 4, 5.0, 5.0)).is_err());
    }

    proptest! {
        #[test]
        fn back_project_round_trip(u in 0.0f64..127.0, v in 0.0f64..95.0, d in 0.05f64..20.0) {
            let intr = Intrinsics::default();
            let p = back_project(&intr, u, v, d);
            let q = project(&intr, &p).unwrap();
            prop_assert!((q.u - u).abs() < 1e-9 && (q.v - v).abs() < 1e-9 && (q.depth - d).abs() < 1e-9);
            let p2 = back_project(&intr, q.u, q.v, q.depth);
            prop_assert!((p2 - p).norm() < 1e-9);
        }

        #[test]
        fn cloud_size_counts_valid_pixels(vals in prop::collection::vec(prop_oneof![Just(0.0f64), 0.1f64..10.0], 48)) {
            let intr = Intrinsics::centered(8, 6, 7.0, 7.0);
            let img = DepthImage::from_vec(intr, vals.clone()).unwrap();
            let n = vals.iter().filter(|&&d| d > 0.0).count();
            prop_assert_eq!(depth_to_pointcloud(&img, &Pose::identity()).len(), n);
        }
    }
}
