//! Sparse TSDF map: a hash map of lazily allocated dense voxel blocks.
//!
//! Integration is projective and per-voxel. For every voxel in a block that
//! the current frame can see, the voxel center is projected into the depth
//! image and the signed distance is taken along the optical axis:
//! `sdf = depth(pixel) - z_cam`. Voxels more than one truncation distance
//! behind the observed surface are left alone; everything else receives the
//! clamped, normalized value with unit weight.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{DepthImage, Intrinsics};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};

/// Fusion parameters. The defaults are sized for 2.5 m hallways flown at
/// 0.5 m/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsdfParams {
    /// Voxel edge length in meters.
    pub voxel_size: f64,
    /// Truncation distance in meters; must be at least two voxels.
    pub truncation: f64,
    /// Voxels per block edge.
    pub block_size: usize,
    /// Cap on accumulated observation weight.
    pub max_weight: f64,
    /// Depth readings beyond this range (meters) are ignored.
    pub max_depth: f64,
}

impl Default for TsdfParams {
    fn default() -> Self {
        Self {
            voxel_size: 0.10,
            truncation: 0.40,
            block_size: 8,
            max_weight: 100.0,
            max_depth: 5.0,
        }
    }
}

impl TsdfParams {
    pub fn validate(&self, key: &str) -> Result<()> {
        let k = |f: &str| format!("{key}.{f}");
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(Error::config(k("voxel_size"), "must be finite and > 0"));
        }
        if !(self.truncation.is_finite() && self.truncation >= 2.0 * self.voxel_size) {
            return Err(Error::config(k("truncation"), "must be at least 2 * voxel_size"));
        }
        if self.block_size == 0 || self.block_size > 64 {
            return Err(Error::config(k("block_size"), "must be in 1..=64"));
        }
        if !(self.max_weight.is_finite() && self.max_weight >= 1.0) {
            return Err(Error::config(k("max_weight"), "must be finite and >= 1"));
        }
        if !(self.max_depth.is_finite() && self.max_depth > 0.0) {
            return Err(Error::config(k("max_depth"), "must be finite and > 0"));
        }
        Ok(())
    }

    fn block_length(&self) -> f64 {
        self.voxel_size * self.block_size as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Voxel {
    /// Normalized truncated signed distance in [-1, 1]; positive on the free
    /// side of the surface.
    pub tsdf: f64,
    /// Accumulated observation weight; 0 means never observed.
    pub weight: f64,
}

/// Selects the voxels that count as obstacles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OccupancyFilter {
    pub min_weight: f64,
    /// Maximum |tsdf| (normalized) for a voxel to be treated as surface.
    pub tsdf_band: f64,
    /// World-frame height band in meters.
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for OccupancyFilter {
    fn default() -> Self {
        Self {
            min_weight: 1.0,
            tsdf_band: 0.3,
            z_min: 0.1,
            z_max: 1.5,
        }
    }
}

impl OccupancyFilter {
    pub fn validate(&self, key: &str) -> Result<()> {
        let k = |f: &str| format!("{key}.{f}");
        for (name, v) in [
            ("min_weight", self.min_weight),
            ("tsdf_band", self.tsdf_band),
            ("z_min", self.z_min),
            ("z_max", self.z_max),
        ] {
            if !v.is_finite() {
                return Err(Error::config(k(name), "must be finite"));
            }
        }
        if self.tsdf_band < 0.0 {
            return Err(Error::config(k("tsdf_band"), "must be >= 0"));
        }
        if self.z_min >= self.z_max {
            return Err(Error::config(k("z_min"), "must be below z_max"));
        }
        Ok(())
    }

    pub fn accepts(&self, voxel: &Voxel, center: &Vec3) -> bool {
        voxel.weight > 0.0
            && voxel.weight >= self.min_weight
            && voxel.tsdf.abs() <= self.tsdf_band
            && center.z >= self.z_min
            && center.z <= self.z_max
    }
}

pub type BlockCoord = [i32; 3];

#[derive(Debug, Clone)]
pub struct VoxelBlockGrid {
    params: TsdfParams,
    blocks: HashMap<BlockCoord, Box<[Voxel]>>,
}

impl VoxelBlockGrid {
    pub fn new(params: TsdfParams) -> Result<Self> {
        params.validate("fusion")?;
        Ok(Self {
            params,
            blocks: HashMap::new(),
        })
    }

    pub fn params(&self) -> &TsdfParams {
        &self.params
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn observed_voxel_count(&self) -> usize {
        self.blocks
            .values()
            .map(|b| b.iter().filter(|v| v.weight > 0.0).count())
            .sum()
    }

    pub fn clear(&mut self) {
        self.blocks.clear();
    }

    fn voxels_per_block(&self) -> usize {
        self.params.block_size.pow(3)
    }

    /// Sorted block coordinates; fixes the iteration order of every export.
    pub fn block_coords(&self) -> Vec<BlockCoord> {
        let mut keys: Vec<BlockCoord> = self.blocks.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    pub fn block_of(&self, p: &Vec3) -> BlockCoord {
        let l = self.params.block_length();
        [
            (p.x / l).floor() as i32,
            (p.y / l).floor() as i32,
            (p.z / l).floor() as i32,
        ]
    }

    /// World position of a voxel center.
    pub fn voxel_center(&self, block: &BlockCoord, local: [usize; 3]) -> Vec3 {
        voxel_center(&self.params, block, local)
    }

    /// Voxel containing world point `p`, if its block is allocated.
    pub fn voxel_at(&self, p: &Vec3) -> Option<Voxel> {
        let vs = self.params.voxel_size;
        let bs = self.params.block_size as i64;
        let g = [
            (p.x / vs).floor() as i64,
            (p.y / vs).floor() as i64,
            (p.z / vs).floor() as i64,
        ];
        let block = [
            g[0].div_euclid(bs) as i32,
            g[1].div_euclid(bs) as i32,
            g[2].div_euclid(bs) as i32,
        ];
        let local = [
            g[0].rem_euclid(bs) as usize,
            g[1].rem_euclid(bs) as usize,
            g[2].rem_euclid(bs) as usize,
        ];
        self.blocks
            .get(&block)
            .map(|b| b[local_index(self.params.block_size, local)])
    }

    /// Visits every allocated voxel with its world center, in sorted block
    /// order.
    pub fn for_each_voxel(&self, mut f: impl FnMut(Vec3, &Voxel)) {
        let bs = self.params.block_size;
        for key in self.block_coords() {
            let block = &self.blocks[&key];
            for (i, vox) in block.iter().enumerate() {
                f(self.voxel_center(&key, unravel(bs, i)), vox);
            }
        }
    }

    /// Fuses one depth frame taken from `camera_pose` (optical frame to
    /// world). Returns the number of voxels updated.
    pub fn integrate(&mut self, img: &DepthImage, camera_pose: &Pose) -> usize {
        let p = self.params;
        let intr = img.intrinsics;
        let usable = |d: f64| d > 0.0 && d <= p.max_depth;

        // Candidate blocks depend on this frame only: everything inside the
        // frustum out to the deepest usable reading plus truncation. New
        // blocks are kept only if one of their voxels is updated, so the
        // resulting map does not depend on integration order.
        let deepest = img
            .data()
            .iter()
            .copied()
            .filter(|&d| usable(d))
            .fold(0.0, f64::max);
        if deepest == 0.0 {
            return 0;
        }
        let far = deepest + p.truncation;
        let world_to_cam = camera_pose.inverse();
        let frustum = Frustum::new(&intr, far);
        let radius = 0.5 * p.block_length() * 3f64.sqrt();
        let bs = p.block_size;
        let half = 0.5 * (bs as f64 - 1.0);
        let (lo, hi) = frustum.world_bounds(&intr, camera_pose);
        let (blo, bhi) = (self.block_of(&lo), self.block_of(&hi));
        let mut candidates = Vec::new();
        for bz in blo[2]..=bhi[2] {
            for by in blo[1]..=bhi[1] {
                for bx in blo[0]..=bhi[0] {
                    let k = [bx, by, bz];
                    let c = voxel_center(&p, &k, [0, 0, 0]) + Vec3::repeat(half * p.voxel_size);
                    if frustum.intersects_sphere(&world_to_cam.transform_point(&c), radius) {
                        candidates.push(k);
                    }
                }
            }
        }

        let n = self.voxels_per_block();
        let mut work: Vec<(BlockCoord, Box<[Voxel]>, bool)> = candidates
            .into_iter()
            .map(|k| match self.blocks.remove(&k) {
                Some(b) => (k, b, true),
                None => (k, vec![Voxel::default(); n].into_boxed_slice(), false),
            })
            .collect();

        let counts: Vec<usize> = work
            .par_iter_mut()
            .map(|(key, block, _)| {
                let mut count = 0;
                for (i, vox) in block.iter_mut().enumerate() {
                    let c = voxel_center(&p, key, unravel(bs, i));
                    let pc = world_to_cam.transform_point(&c);
                    if !(pc.z > 0.0) {
                        continue;
                    }
                    let u = (intr.fx * pc.x / pc.z + intr.cx).round();
                    let v = (intr.fy * pc.y / pc.z + intr.cy).round();
                    if u < 0.0 || v < 0.0 || u >= intr.width as f64 || v >= intr.height as f64 {
                        continue;
                    }
                    let d = img.get(u as usize, v as usize);
                    if !usable(d) {
                        continue;
                    }
                    let sdf = d - pc.z;
                    if sdf < -p.truncation {
                        continue;
                    }
                    let obs = (sdf / p.truncation).clamp(-1.0, 1.0);
                    let w = vox.weight;
                    vox.tsdf = ((vox.tsdf * w + obs) / (w + 1.0)).clamp(-1.0, 1.0);
                    vox.weight = (w + 1.0).min(p.max_weight);
                    count += 1;
                }
                count
            })
            .collect();

        let mut updated = 0;
        for ((k, b, existed), c) in work.into_iter().zip(counts) {
            updated += c;
            if existed || c > 0 {
                self.blocks.insert(k, b);
            }
        }
        updated
    }

    /// Centers of voxels passing `f`: the obstacle set used by the planner.
    pub fn extract_occupied(&self, f: &OccupancyFilter) -> Vec<Vec3> {
        let mut out = Vec::new();
        self.for_each_voxel(|c, v| {
            if f.accepts(v, &c) {
                out.push(c);
            }
        });
        out
    }

    /// Writes occupied voxel centers as an ASCII PLY; returns the vertex
    /// count.
    pub fn export_ply(&self, f: &OccupancyFilter, path: impl AsRef<Path>) -> Result<usize> {
        let pts = self.extract_occupied(f);
        write_ply(&pts, path)?;
        Ok(pts.len())
    }

    /// Clears the map and re-fuses only the newest `k` frames of `history`.
    pub fn reset_window(&mut self, history: &FrameHistory, k: usize) -> Result<usize> {
        if k == 0 {
            return Err(Error::config("fusion.window", "must keep at least one frame"));
        }
        self.clear();
        let skip = history.len().saturating_sub(k);
        Ok(history
            .frames
            .iter()
            .skip(skip)
            .map(|fr| self.integrate(&fr.image, &fr.camera_pose))
            .sum())
    }

    const MAGIC: &'static [u8; 5] = b"MNVG1";

    /// Binary map dump: `MNVG1`, the fusion parameters, a block count, then
    /// each block's coordinate followed by its voxels (f64 tsdf, f64 weight),
    /// blocks in sorted order. Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&p.voxel_size.to_le_bytes());
        out.extend_from_slice(&p.truncation.to_le_bytes());
        out.extend_from_slice(&(p.block_size as u32).to_le_bytes());
        out.extend_from_slice(&p.max_weight.to_le_bytes());
        out.extend_from_slice(&p.max_depth.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u64).to_le_bytes());
        for key in self.block_coords() {
            for c in key {
                out.extend_from_slice(&c.to_le_bytes());
            }
            for v in self.blocks[&key].iter() {
                out.extend_from_slice(&v.tsdf.to_le_bytes());
                out.extend_from_slice(&v.weight.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(5)? != Self::MAGIC {
            return Err(Error::format("MNVG1", "bad magic"));
        }
        let params = TsdfParams {
            voxel_size: r.f64()?,
            truncation: r.f64()?,
            block_size: r.u32()? as usize,
            max_weight: r.f64()?,
            max_depth: r.f64()?,
        };
        params
            .validate("map")
            .map_err(|e| Error::format("MNVG1", e.to_string()))?;
        let count = r.u64()?;
        let n = params.block_size.pow(3);
        let mut blocks = HashMap::new();
        for _ in 0..count {
            let key = [r.i32()?, r.i32()?, r.i32()?];
            let mut block = Vec::with_capacity(n);
            for _ in 0..n {
                block.push(Voxel {
                    tsdf: r.f64()?,
                    weight: r.f64()?,
                });
            }
            blocks.insert(key, block.into_boxed_slice());
        }
        if r.pos != bytes.len() {
            return Err(Error::format("MNVG1", "trailing bytes"));
        }
        Ok(Self { params, blocks })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

fn voxel_center(p: &TsdfParams, block: &BlockCoord, local: [usize; 3]) -> Vec3 {
    let bs = p.block_size as f64;
    let c = |b: i32, l: usize| (b as f64 * bs + l as f64 + 0.5) * p.voxel_size;
    Vec3::new(c(block[0], local[0]), c(block[1], local[1]), c(block[2], local[2]))
}

fn local_index(bs: usize, l: [usize; 3]) -> usize {
    (l[2] * bs + l[1]) * bs + l[0]
}

fn unravel(bs: usize, i: usize) -> [usize; 3] {
    [i % bs, (i / bs) % bs, i / (bs * bs)]
}

/// Camera frustum as inward-facing planes through the optical center plus a
/// far plane, in the optical frame.
struct Frustum {
    normals: [Vec3; 4],
    far: f64,
}

impl Frustum {
    fn new(intr: &Intrinsics, far: f64) -> Self {
        let (u0, u1) = (-0.5 - intr.cx, intr.width as f64 - 0.5 - intr.cx);
        let (v0, v1) = (-0.5 - intr.cy, intr.height as f64 - 0.5 - intr.cy);
        let normals = [
            Vec3::new(intr.fx, 0.0, -u0).normalize(),
            Vec3::new(-intr.fx, 0.0, u1).normalize(),
            Vec3::new(0.0, intr.fy, -v0).normalize(),
            Vec3::new(0.0, -intr.fy, v1).normalize(),
        ];
        Self { normals, far }
    }

    /// World-frame bounding box of the frustum.
    fn world_bounds(&self, intr: &Intrinsics, camera_pose: &Pose) -> (Vec3, Vec3) {
        let (u0, u1) = (-0.5 - intr.cx, intr.width as f64 - 0.5 - intr.cx);
        let (v0, v1) = (-0.5 - intr.cy, intr.height as f64 - 0.5 - intr.cy);
        let mut lo = camera_pose.translation();
        let mut hi = lo;
        for (u, v) in [(u0, v0), (u0, v1), (u1, v0), (u1, v1)] {
            let c = Vec3::new(u / intr.fx, v / intr.fy, 1.0) * self.far;
            let w = camera_pose.transform_point(&c);
            lo = lo.inf(&w);
            hi = hi.sup(&w);
        }
        (lo, hi)
    }

    fn intersects_sphere(&self, c: &Vec3, r: f64) -> bool {
        c.z >= -r && c.z <= self.far + r && self.normals.iter().all(|n| n.dot(c) >= -r)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::format("MNVG1", "truncated"));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// A fused frame retained for sliding-window re-integration.
#[derive(Debug, Clone)]
pub struct Frame {
    pub image: DepthImage,
    pub camera_pose: Pose,
}

/// Bounded buffer of the most recent frames.
#[derive(Debug, Clone, Default)]
pub struct FrameHistory {
    frames: VecDeque<Frame>,
    capacity: Option<usize>,
}

impl FrameHistory {
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            frames: VecDeque::new(),
            capacity,
        }
    }

    pub fn push(&mut self, image: DepthImage, camera_pose: Pose) {
        self.frames.push_back(Frame { image, camera_pose });
        if let Some(cap) = self.capacity {
            while self.frames.len() > cap {
                self.frames.pop_front();
            }
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter()
    }
}

pub fn write_ply(points: &[Vec3], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", points.len())?;
        writeln!(w, "property float x")?;
        writeln!(w, "property float y")?;
        writeln!(w, "property float z")?;
        writeln!(w, "end_header")?;
        for p in points {
            writeln!(w, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Reads the vertices of an ASCII PLY written by [`write_ply`].
pub fn read_ply(path: impl AsRef<Path>) -> Result<Vec<Vec3>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut count = None;
    let bad = |r: &str| Error::format("PLY", r);
    loop {
        let line = lines
            .next()
            .ok_or_else(|| bad("missing end_header"))?
            .map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|_| bad("bad vertex count"))?);
        } else if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let mut pts = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| bad("fewer vertices than declared"))?
            .map_err(|e| Error::io(path, e))?;
        let xyz: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad vertex"))?;
        if xyz.len() != 3 {
            return Err(bad("vertex needs three coordinates"));
        }
        pts.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
    }
    Ok(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::camera_pose_from_body;

    /// Camera looking along world +x from (-0.05, 0.05, 0.45) so that voxel
    /// centers fall on integer optical-z multiples of 0.1.
    fn wall_setup() -> (VoxelBlockGrid, DepthImage, Pose) {
        let grid = VoxelBlockGrid::new(TsdfParams::default()).unwrap();
        let intr = Intrinsics::centered(65, 49, 60.0, 60.0);
        let img = DepthImage::constant(intr, 2.0);
        let body = Pose::from_position_yaw(Vec3::new(-0.05, 0.05, 0.45), 0.0);
        (grid, img, camera_pose_from_body(&body))
    }

    /// Independent per-voxel projective SDF: scans a dense box of voxel
    /// centers in front of the camera and computes each expected value
    /// directly from the constant wall depth.
    fn brute_force_wall(img: &DepthImage, cam: &Pose, p: &TsdfParams) -> Vec<(Vec3, f64)> {
        let inv = cam.inverse();
        let intr = img.intrinsics;
        let mut out = Vec::new();
        for i in -10..40 {
            for j in -30..30 {
                for k in -30..30 {
                    let c = Vec3::new(
                        (i as f64 + 0.5) * p.voxel_size,
                        (j as f64 + 0.5) * p.voxel_size,
                        (k as f64 + 0.5) * p.voxel_size,
                    );
                    let q = inv.transform_point(&c);
                    if q.z <= 0.0 {
                        continue;
                    }
                    let u = (intr.fx * q.x / q.z + intr.cx).round();
                    let v = (intr.fy * q.y / q.z + intr.cy).round();
                    if u < 0.0 || v < 0.0 || u >= intr.width as f64 || v >= intr.height as f64 {
                        continue;
                    }
                    let sdf = 2.0 - q.z;
                    if sdf < -p.truncation {
                        continue;
                    }
                    out.push((c, (sdf / p.truncation).clamp(-1.0, 1.0)));
                }
            }
        }
        out
    }

    #[test]
    fn empty_image_is_noop() {
        let (mut grid, img, cam) = wall_setup();
        let zero = DepthImage::zeros(img.intrinsics);
        assert_eq!(grid.integrate(&zero, &cam), 0);
        assert_eq!(grid.block_count(), 0);
    }

    #[test]
    fn wall_voxels_match_brute_force_oracle() {
        let (mut grid, img, cam) = wall_setup();
        let touched = grid.integrate(&img, &cam);
        assert!(touched > 0);
        // The voxel at camera-z 1.9 on the optical axis: world x = 1.85.
        let v = grid.voxel_at(&Vec3::new(1.85, 0.05, 0.45)).unwrap();
        assert!((v.tsdf - 0.25).abs() < 1e-9, "{v:?}");
        assert_eq!(v.weight, 1.0);
        let s = grid.voxel_at(&Vec3::new(1.95, 0.05, 0.45)).unwrap();
        assert!(s.tsdf.abs() < 0.5 * 0.1 / 0.4 + 1e-9);

        let oracle = brute_force_wall(&img, &cam, grid.params());
        let mut checked = 0;
        for (c, expected) in &oracle {
            if let Some(v) = grid.voxel_at(c) {
                if v.weight > 0.0 {
                    assert!((v.tsdf - expected).abs() < 1e-9, "at {c:?}");
                    checked += 1;
                }
            }
        }
        // Every voxel updated by integration is in the oracle set.
        assert_eq!(checked, touched);
        // Band voxels (|sdf| < trunc) must all have been allocated and updated.
        for (c, expected) in &oracle {
            if expected.abs() < 1.0 {
                let v = grid.voxel_at(c).expect("band voxel allocated");
                assert_eq!(v.weight, 1.0);
            }
        }
    }

    #[test]
    fn double_integration_is_idempotent_in_tsdf() {
        let (mut grid, img, cam) = wall_setup();
        grid.integrate(&img, &cam);
        let mut before = Vec::new();
        grid.for_each_voxel(|c, v| before.push((c, *v)));
        grid.integrate(&img, &cam);
        let mut i = 0;
        grid.for_each_voxel(|c, v| {
            let (c0, v0) = before[i];
            assert_eq!(c, c0);
            assert!((v.tsdf - v0.tsdf).abs() < 1e-9);
            assert_eq!(v.weight, (2.0 * v0.weight).min(100.0));
            i += 1;
        });
        assert_eq!(i, before.len());
    }

    #[test]
    fn weight_is_capped() {
        let params = TsdfParams { max_weight: 3.0, ..Default::default() };
        let (_, img, cam) = wall_setup();
        let mut grid = VoxelBlockGrid::new(params).unwrap();
        for _ in 0..5 {
            grid.integrate(&img, &cam);
        }
        grid.for_each_voxel(|_, v| assert!(v.weight <= 3.0 && (-1.0..=1.0).contains(&v.tsdf)));
    }

    #[test]
    fn extraction_hugs_the_wall() {
        let (mut grid, img, cam) = wall_setup();
        assert!(grid.extract_occupied(&OccupancyFilter::default()).is_empty());
        grid.integrate(&img, &cam);
        let occ = grid.extract_occupied(&OccupancyFilter::default());
        assert!(!occ.is_empty());
        // wall plane: world x = 1.95
        let margin = 3f64.sqrt() * 0.1;
        assert!(occ.iter().all(|c| (c.x - 1.95).abs() <= margin));
        let impossible = OccupancyFilter {
            min_weight: 101.0,
            ..Default::default()
        };
        assert!(grid.extract_occupied(&impossible).is_empty());
    }

    #[test]
    fn unobserved_voxels_never_occupied() {
        let grid_params = TsdfParams::default();
        let mut grid = VoxelBlockGrid::new(grid_params).unwrap();
        let (_, img, cam) = wall_setup();
        grid.integrate(&img, &cam);
        let loose = OccupancyFilter {
            min_weight: 0.0,
            tsdf_band: 1.0,
            z_min: -100.0,
            z_max: 100.0,
        };
        let occ = grid.extract_occupied(&loose);
        assert_eq!(occ.len(), grid.observed_voxel_count());
    }

    #[test]
    fn two_frames_commute() {
        let (_, img, cam) = wall_setup();
        let cam2 = camera_pose_from_body(&Pose::from_position_yaw(Vec3::new(0.3, -0.2, 0.45), 0.2));
        let mut img2 = img.clone();
        for v in 0..img2.height() {
            for u in 0..img2.width() {
                img2.set(u, v, 1.5 + 0.01 * u as f64);
            }
        }
        let mut a = VoxelBlockGrid::new(TsdfParams::default()).unwrap();
        a.integrate(&img, &cam);
        a.integrate(&img2, &cam2);
        let mut b = VoxelBlockGrid::new(TsdfParams::default()).unwrap();
        b.integrate(&img2, &cam2);
        b.integrate(&img, &cam);
        assert_eq!(a.block_coords(), b.block_coords());
        let mut va = Vec::new();
        a.for_each_voxel(|_, v| va.push(*v));
        let mut i = 0;
        b.for_each_voxel(|_, v| {
            assert!((v.tsdf - va[i].tsdf).abs() < 1e-6);
            assert_eq!(v.weight, va[i].weight);
            i += 1;
        });
    }

    fn frames() -> Vec<(DepthImage, Pose)> {
        let (_, img, _) = wall_setup();
        (0..3)
            .map(|i| {
                let body = Pose::from_position_yaw(Vec3::new(-0.05 + 0.2 * i as f64, 0.05, 0.45), 0.1 * i as f64);
                let mut im = img.clone();
                for u in 0..im.width() {
                    im.set(u, 3, 1.0 + 0.1 * i as f64);
                }
                (im, camera_pose_from_body(&body))
            })
            .collect()
    }

    fn snapshot(g: &VoxelBlockGrid) -> Vec<(Vec3, Voxel)> {
        let mut v = Vec::new();
        g.for_each_voxel(|c, x| {
            if x.weight > 0.0 {
                v.push((c, *x))
            }
        });
        v
    }

    #[test]
    fn sliding_window_equals_fresh_integration() {
        let fr = frames();
        let mut hist = FrameHistory::new(None);
        let mut full = VoxelBlockGrid::new(TsdfParams::default()).unwrap();
        for (im, p) in &fr {
            hist.push(im.clone(), *p);
            full.integrate(im, p);
        }
        let mut g = full.clone();
        g.reset_window(&hist, 5).unwrap();
        assert_eq!(snapshot(&g), snapshot(&full));

        g.reset_window(&hist, 2).unwrap();
        let mut fresh = VoxelBlockGrid::new(TsdfParams::default()).unwrap();
        fresh.integrate(&fr[1].0, &fr[1].1);
        fresh.integrate(&fr[2].0, &fr[2].1);
        assert_eq!(snapshot(&g), snapshot(&fresh));

        g.reset_window(&hist, 1).unwrap();
        let mut last = VoxelBlockGrid::new(TsdfParams::default()).unwrap();
        last.integrate(&fr[2].0, &fr[2].1);
        assert_eq!(snapshot(&g), snapshot(&last));
        assert!(g.reset_window(&hist, 0).is_err());
    }

    #[test]
    fn history_capacity_drops_oldest() {
        let mut h = FrameHistory::new(Some(2));
        for (im, p) in frames() {
            h.push(im, p);
        }
        assert_eq!(h.len(), 2);
    }

    #[test]
    fn ply_export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = OccupancyFilter::default();
        let empty = VoxelBlockGrid::new(TsdfParams::default()).unwrap();
        let p0 = dir.path().join("empty.ply");
        assert_eq!(empty.export_ply(&f, &p0).unwrap(), 0);
        assert!(read_ply(&p0).unwrap().is_empty());

        let (mut grid, img, cam) = wall_setup();
        grid.integrate(&img, &cam);
        let p1 = dir.path().join("wall.ply");
        let n = grid.export_ply(&f, &p1).unwrap();
        let occ = grid.extract_occupied(&f);
        assert_eq!(n, occ.len());
        let back = read_ply(&p1).unwrap();
        assert_eq!(back.len(), n);
        for (a, b) in occ.iter().zip(&back) {
            assert!((a - b).abs().max() < 1e-6);
        }
        assert!(read_ply(dir.path().join("missing.ply")).is_err());
    }

    #[test]
    fn map_serialization_round_trip() {
        let (mut grid, img, cam) = wall_setup();
        grid.integrate(&img, &cam);
        let bytes = grid.to_bytes();
        assert_eq!(&bytes[..5], b"MNVG1");
        let back = VoxelBlockGrid::from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), grid.params());
        assert_eq!(snapshot(&back), snapshot(&grid));
        assert_eq!(back.to_bytes(), bytes);
        assert!(VoxelBlockGrid::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn params_validation() {
        let p = TsdfParams { truncation: 0.15, ..Default::default() };
        let e = p.validate("fusion").unwrap_err().to_string();
        assert!(e.contains("fusion.truncation"));
        let f = OccupancyFilter {
            z_min: 2.0,
            ..Default::default()
        };
        assert!(f.validate("filter").is_err());
    }
}
