use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_action, Env, EnvError, Level, StepResult, TerminalKind};
use crate::homography::PatchGrid;
use crate::nets::ActionSpace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    /// Side of the square render in pixels.
    pub image: usize,
    /// Side of one patch in pixels.
    pub patch: usize,
    pub fov_deg: f64,
    pub pitch_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            image: 128,
            patch: 8,
            fov_deg: 90.0,
            pitch_deg: -30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiverConfig {
    pub segments: usize,
    /// Distance between consecutive spline control points.
    pub control_spacing: f64,
    /// River width `w`; water lies within `w/2` of the center line.
    pub width: f64,
    pub step_xy: f64,
    pub step_yaw_deg: f64,
    pub step_z: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub d_max: f64,
    pub yaw_limit_deg: f64,
    pub phi_lo: f64,
    pub phi_hi: f64,
    /// Number of sharp bends for easy, medium and hard.
    pub turns: [usize; 3],
    pub camera: CameraConfig,
}

impl Default for RiverConfig {
    fn default() -> Self {
        Self {
            segments: 40,
            control_spacing: 10.0,
            width: 6.0,
            step_xy: 0.5,
            step_yaw_deg: 15.0,
            step_z: 0.5,
            z_min: 2.0,
            z_max: 12.0,
            d_max: 6.0,
            yaw_limit_deg: 90.0,
            phi_lo: 0.15,
            phi_hi: 0.75,
            turns: [1, 2, 4],
            camera: CameraConfig::default(),
        }
    }
}

/// Camera position and heading; pitch is fixed by [`CameraConfig`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Heading in radians, counter-clockwise from +x.
    pub yaw: f64,
}

/// Closest center-line point to a query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nearest {
    pub dist: f64,
    pub segment: usize,
    /// Direction of the river at that point, in radians.
    pub tangent: f64,
}

/// Uniform bucket grid over polyline pieces, each piece registered in every
/// cell within `margin` of it.
#[derive(Clone, Debug)]
struct Buckets {
    x0: f64,
    y0: f64,
    cell: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl Buckets {
    fn new(points: &[[f64; 2]], margin: f64, cell: f64) -> Self {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in points {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        let (x0, y0) = (x0 - margin - cell, y0 - margin - cell);
        let nx = ((x1 + margin + cell - x0) / cell).ceil() as usize + 1;
        let ny = ((y1 + margin + cell - y0) / cell).ceil() as usize + 1;
        let mut cells = vec![Vec::new(); nx * ny];
        for (k, w) in points.windows(2).enumerate() {
            let lo = |a: f64, b: f64, o: f64| (((a.min(b) - margin - o) / cell).floor().max(0.0)) as usize;
            let hi = |a: f64, b: f64, o: f64| ((a.max(b) + margin - o) / cell).floor() as usize;
            for iy in lo(w[0][1], w[1][1], y0)..=hi(w[0][1], w[1][1], y0).min(ny - 1) {
                for ix in lo(w[0][0], w[1][0], x0)..=hi(w[0][0], w[1][0], x0).min(nx - 1) {
                    cells[iy * nx + ix].push(k as u32);
                }
            }
        }
        Self { x0, y0, cell, nx, ny, cells }
    }

    fn get(&self, x: f64, y: f64) -> &[u32] {
        let fx = (x - self.x0) / self.cell;
        let fy = (y - self.y0) / self.cell;
        if !(fx >= 0.0 && fy >= 0.0) {
            return &[];
        }
        let (ix, iy) = (fx as usize, fy as usize);
        if ix >= self.nx || iy >= self.ny {
            return &[];
        }
        &self.cells[iy * self.nx + ix]
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

fn catmull_rom(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2], p3: [f64; 2], t: f64) -> [f64; 2] {
    let (t2, t3) = (t * t, t * t * t);
    let f = |i: usize| {
        0.5 * (2.0 * p1[i]
            + (p2[i] - p0[i]) * t
            + (2.0 * p0[i] - 5.0 * p1[i] + 4.0 * p2[i] - p3[i]) * t2
            + (3.0 * p1[i] - p0[i] - 3.0 * p2[i] + p3[i]) * t3)
    };
    [f(0), f(1)]
}

/// Wraps an angle to `(−π, π]`.
fn wrap(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

const PIECES_PER_SEGMENT: usize = 4;

/// River center line on the ground plane, resampled into equal-length
/// segments.
#[derive(Clone, Debug)]
pub struct RiverMap {
    control: Vec<[f64; 2]>,
    /// `segments · PIECES_PER_SEGMENT + 1` points equally spaced in arc length.
    points: Vec<[f64; 2]>,
    segments: usize,
    half_width: f64,
    d_max: f64,
    water: Buckets,
    near: Buckets,
}

impl RiverMap {
    /// Catmull-Rom spline through `control`, with mirrored end tangents.
    pub fn from_control(control: Vec<[f64; 2]>, segments: usize, width: f64, d_max: f64) -> Self {
        assert!(control.len() >= 2 && segments >= 1);
        let n = control.len();
        let ext = |i: isize| -> [f64; 2] {
            if i < 0 {
                [2.0 * control[0][0] - control[1][0], 2.0 * control[0][1] - control[1][1]]
            } else if i as usize >= n {
                [2.0 * control[n - 1][0] - control[n - 2][0], 2.0 * control[n - 1][1] - control[n - 2][1]]
            } else {
                control[i as usize]
            }
        };
        const DENSE: usize = 64;
        let mut dense = vec![control[0]];
        for s in 0..n - 1 {
            let (p0, p1, p2, p3) = (ext(s as isize - 1), ext(s as isize), ext(s as isize + 1), ext(s as isize + 2));
            for k in 1..=DENSE {
                dense.push(catmull_rom(p0, p1, p2, p3, k as f64 / DENSE as f64));
            }
        }
        let mut cum = vec![0.0];
        for w in dense.windows(2) {
            cum.push(cum.last().unwrap() + (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]));
        }
        let total = *cum.last().unwrap();
        let pieces = segments * PIECES_PER_SEGMENT;
        let mut points = Vec::with_capacity(pieces + 1);
        let mut j = 0;
        for k in 0..=pieces {
            let s = total * k as f64 / pieces as f64;
            while j + 2 < cum.len() && cum[j + 1] < s {
                j += 1;
            }
            let span = cum[j + 1] - cum[j];
            let f = if span > 0.0 { ((s - cum[j]) / span).clamp(0.0, 1.0) } else { 0.0 };
            points.push([
                dense[j][0] + f * (dense[j + 1][0] - dense[j][0]),
                dense[j][1] + f * (dense[j + 1][1] - dense[j][1]),
            ]);
        }
        let half_width = width / 2.0;
        Self {
            water: Buckets::new(&points, half_width, 2.0),
            near: Buckets::new(&points, d_max, 2.0),
            control,
            points,
            segments,
            half_width,
            d_max,
        }
    }

    /// Random meandering river heading roughly along +x with `turns` sharp
    /// bends; regenerated until the center line keeps clear of itself.
    pub fn generate<R: Rng>(rng: &mut R, turns: usize, cfg: &RiverConfig) -> Self {
        let length = cfg.segments as f64 * 2.0;
        let n = ((length / cfg.control_spacing).ceil() as usize).max(2) + 1;
        for _ in 0..1000 {
            let interior: Vec<usize> = (1..n - 1).collect();
            let bends: Vec<usize> = rand::seq::IndexedRandom::choose_multiple(&interior[..], rng, turns.min(interior.len()))
                .copied()
                .collect();
            let mut heading: f64 = 0.0;
            let mut control = vec![[0.0, 0.0]];
            for i in 1..n {
                let p = control[i - 1];
                control.push([p[0] + cfg.control_spacing * heading.cos(), p[1] + cfg.control_spacing * heading.sin()]);
                let delta = if bends.contains(&i) {
                    let mag = rng.random_range(40f64..70.0).to_radians();
                    if rng.random_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                } else {
                    rng.random_range(-5f64..5.0).to_radians()
                };
                heading += delta;
            }
            let map = Self::from_control(control, cfg.segments, cfg.width, cfg.d_max);
            if map.clear_of_itself(cfg.width) {
                return map;
            }
        }
        let control = (0..n).map(|i| [i as f64 * cfg.control_spacing, 0.0]).collect();
        Self::from_control(control, cfg.segments, cfg.width, cfg.d_max)
    }

    /// Points far apart along the river stay well apart on the ground.
    fn clear_of_itself(&self, width: f64) -> bool {
        let step = self.segment_length() / PIECES_PER_SEGMENT as f64;
        let skip = ((3.0 * width) / step).ceil() as usize;
        let p = &self.points;
        for i in 0..p.len() {
            for j in i + skip..p.len() {
                if (p[i][0] - p[j][0]).hypot(p[i][1] - p[j][1]) < 1.5 * width {
                    return false;
                }
            }
        }
        true
    }

    pub fn control(&self) -> &[[f64; 2]] {
        &self.control
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn segment_length(&self) -> f64 {
        let p = &self.points;
        (p[1][0] - p[0][0]).hypot(p[1][1] - p[0][1]) * PIECES_PER_SEGMENT as f64
    }

    /// Point at arc-length fraction `s ∈ [0, 1]` along the river, with the
    /// local tangent direction.
    pub fn point_at(&self, s: f64) -> ([f64; 2], f64) {
        let pieces = self.points.len() - 1;
        let f = s.clamp(0.0, 1.0) * pieces as f64;
        let k = (f.floor() as usize).min(pieces - 1);
        let (a, b) = (self.points[k], self.points[k + 1]);
        let t = f - k as f64;
        ([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], (b[1] - a[1]).atan2(b[0] - a[0]))
    }

    /// Closest center-line point, if one lies within `d_max`.
    pub fn nearest(&self, x: f64, y: f64) -> Option<Nearest> {
        let mut best: Option<(f64, usize)> = None;
        for &k in self.near.get(x, y) {
            let k = k as usize;
            let d = segment_distance([x, y], self.points[k], self.points[k + 1]);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, k));
            }
        }
        let (dist, k) = best?;
        if dist > self.d_max {
            return None;
        }
        let (a, b) = (self.points[k], self.points[k + 1]);
        Some(Nearest {
            dist,
            segment: k / PIECES_PER_SEGMENT,
            tangent: (b[1] - a[1]).atan2(b[0] - a[0]),
        })
    }

    pub fn is_water(&self, x: f64, y: f64) -> bool {
        self.water.get(x, y).iter().any(|&k| {
            let k = k as usize;
            segment_distance([x, y], self.points[k], self.points[k + 1]) <= self.half_width
        })
    }

    /// Full-resolution binary water image, row-major from the top row.
    pub fn render_image(&self, pose: &Pose, cam: &CameraConfig) -> Vec<bool> {
        let n = cam.image;
        let (cp, sp) = (cam.pitch_deg.to_radians().cos(), cam.pitch_deg.to_radians().sin());
        let (cy, sy) = (pose.yaw.cos(), pose.yaw.sin());
        let fwd = [cp * cy, cp * sy, sp];
        let right = [sy, -cy, 0.0];
        let up = [-sp * cy, -sp * sy, cp];
        let tan = (cam.fov_deg.to_radians() / 2.0).tan();
        let mut img = vec![false; n * n];
        for i in 0..n {
            let ny = (1.0 - 2.0 * (i as f64 + 0.5) / n as f64) * tan;
            let dz = fwd[2] + ny * up[2];
            if dz >= -1e-12 {
                continue;
            }
            let t = -pose.z / dz;
            for j in 0..n {
                let nx = (2.0 * (j as f64 + 0.5) / n as f64 - 1.0) * tan;
                let dx = fwd[0] + nx * right[0] + ny * up[0];
                let dy = fwd[1] + nx * right[1] + ny * up[1];
                img[i * n + j] = self.is_water(pose.x + t * dx, pose.y + t * dy);
            }
        }
        img
    }

    pub fn render(&self, pose: &Pose, cam: &CameraConfig) -> PatchGrid {
        patchify(&self.render_image(pose, cam), cam.image, cam.patch)
    }
}

/// Reduces a square binary image to patches: a patch is 1 when strictly more
/// than half of its pixels are set.
pub fn patchify(img: &[bool], size: usize, patch: usize) -> PatchGrid {
    assert_eq!(img.len(), size * size);
    assert!(patch > 0 && size % patch == 0);
    let g = size / patch;
    let mut counts = vec![0usize; g * g];
    for i in 0..size {
        for j in 0..size {
            if img[i * size + j] {
                counts[(i / patch) * g + j / patch] += 1;
            }
        }
    }
    let half = patch * patch;
    PatchGrid::new(g, g, counts.into_iter().map(|c| if 2 * c > half { 1.0 } else { 0.0 }).collect()).expect("binary patches")
}

/// A camera flying over a procedurally generated river, rewarded for each
/// new river segment it passes over.
///
/// Action branches (each `{0, 1, 2}` → `{−1, 0, +1}`): altitude, heading,
/// forward, sideways (positive is to the right).
pub struct PlanarRiver {
    cfg: RiverConfig,
    level: Level,
    timeout: usize,
    map: RiverMap,
    pose: Pose,
    visited: Vec<bool>,
    t: usize,
    done: bool,
}

impl PlanarRiver {
    pub fn new(level: Level, cfg: RiverConfig, timeout: usize) -> Self {
        let control = vec![[0.0, 0.0], [1.0, 0.0]];
        let map = RiverMap::from_control(control, cfg.segments, cfg.width, cfg.d_max);
        let mut env = Self {
            visited: vec![false; cfg.segments],
            cfg,
            level,
            timeout,
            map,
            pose: Pose {
                x: 0.0,
                y: 0.0,
                z: 0.0,
                yaw: 0.0,
            },
            t: 0,
            done: true,
        };
        env.reset(0);
        env
    }

    pub fn map(&self) -> &RiverMap {
        &self.map
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn config(&self) -> &RiverConfig {
        &self.cfg
    }

    /// Swaps in a river and clears the visit flags.
    pub fn set_map(&mut self, map: RiverMap) {
        self.visited = vec![false; map.segments()];
        self.map = map;
    }

    /// Moves the camera without stepping the episode.
    pub fn set_pose(&mut self, pose: Pose) -> PatchGrid {
        self.pose = pose;
        self.observe()
    }

    pub fn observe(&self) -> PatchGrid {
        self.map.render(&self.pose, &self.cfg.camera)
    }

    /// Band penalty on the water fraction of an observation.
    pub fn water_cost(&self, obs: &PatchGrid) -> f64 {
        let phi = obs.data().iter().sum::<f64>() / obs.data().len() as f64;
        let (lo, hi) = (self.cfg.phi_lo, self.cfg.phi_hi);
        if phi < lo {
            (lo - phi) / lo
        } else if phi > hi {
            (phi - hi) / (1.0 - hi)
        } else {
            0.0
        }
    }
}

impl Env for PlanarRiver {
    fn reset(&mut self, seed: u64) -> PatchGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.map = RiverMap::generate(&mut rng, self.cfg.turns[self.level.index()], &self.cfg);
        let s = rng.random_range(0.02..0.08);
        let ([x, y], tangent) = self.map.point_at(s);
        let lateral = rng.random_range(-1.0..1.0);
        self.pose = Pose {
            x: x - lateral * tangent.sin(),
            y: y + lateral * tangent.cos(),
            z: rng.random_range(5.0..7.0),
            yaw: wrap(tangent + rng.random_range(-10f64..10.0).to_radians()),
        };
        self.visited.iter_mut().for_each(|v| *v = false);
        if let Some(n) = self.map.nearest(self.pose.x, self.pose.y) {
            self.visited[n.segment] = true;
        }
        self.t = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &[usize]) -> Result<StepResult, EnvError> {
        check_action(&self.action_space(), action)?;
        if self.done {
            return Err(EnvError::Finished);
        }
        let d = |b: usize| action[b] as f64 - 1.0;
        let p = &mut self.pose;
        p.z += d(0) * self.cfg.step_z;
        p.yaw = wrap(p.yaw + d(1) * self.cfg.step_yaw_deg.to_radians());
        let (c, s) = (p.yaw.cos(), p.yaw.sin());
        let (fw, st) = (d(2) * self.cfg.step_xy, d(3) * self.cfg.step_xy);
        p.x += fw * c + st * s;
        p.y += fw * s - st * c;
        self.t += 1;

        let obs = self.observe();
        let near = self.map.nearest(self.pose.x, self.pose.y);
        let mut reward = 0.0;
        if let Some(n) = near {
            if n.dist <= self.cfg.width / 2.0 && !self.visited[n.segment] {
                self.visited[n.segment] = true;
                reward = 1.0;
            }
        }
        let z_ok = (self.cfg.z_min..=self.cfg.z_max).contains(&self.pose.z);
        let (cost, kind) = match near {
            Some(n) if z_ok => {
                if wrap(self.pose.yaw - n.tangent).abs() > self.cfg.yaw_limit_deg.to_radians() {
                    (0.5, TerminalKind::Minor)
                } else if self.t >= self.timeout {
                    (self.water_cost(&obs), TerminalKind::Timeout)
                } else {
                    (self.water_cost(&obs), TerminalKind::None)
                }
            }
            _ => (1.0, TerminalKind::Severe),
        };
        self.done = kind != TerminalKind::None;
        Ok(StepResult { obs, reward, cost, kind })
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::multi_discrete(&[3, 3, 3, 3])
    }

    fn obs_shape(&self) -> (usize, usize) {
        let g = self.cfg.camera.image / self.cfg.camera.patch;
        (g, g)
    }

    fn visited(&self) -> &[bool] {
        &self.visited
    }
}
