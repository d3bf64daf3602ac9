//! Procedural raycast LiDAR simulator.
//!
//! A scene is a ground plane at `z = 0` plus axis-aligned boxes (cars,
//! buildings and optional corridor walls), observed by a spinning sensor at
//! `(0, 0, h)`. Returned points are sensor-centered, so the ground sits at
//! `z = -h`. Intensity is the albedo of the hit surface times the pattern's
//! intensity scale.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, ProjectionConfig, RangeImage};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBox {
    pub center: [f64; 3],
    /// Full edge lengths along x, y, z.
    pub size: [f64; 3],
    pub albedo: f64,
}

impl SceneBox {
    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] - 0.5 * self.size[k])
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] + 0.5 * self.size[k])
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k])
    }

    /// Entry distance of the ray `o + t d`, for `t > 0`.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let (lo, hi) = (self.min(), self.max());
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k] < lo[k] || o[k] > hi[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[k];
            let (a, b) = ((lo[k] - o[k]) * inv, (hi[k] - o[k]) * inv);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1 && t0 > 1e-9).then_some(t0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub sensor_height: f64,
    pub ground: bool,
    pub ground_albedo: f64,
    pub boxes: Vec<SceneBox>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if !(self.sensor_height > 0.0) {
            return Err(Error::InvalidConfig("sensor height must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ground_albedo) {
            return Err(Error::InvalidConfig(
                "ground albedo must be in [0, 1]".into(),
            ));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if !b.size.iter().all(|&s| s > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "box {i} has non-positive extent"
                )));
            }
            if !(0.0..=1.0).contains(&b.albedo) {
                return Err(Error::InvalidConfig(format!(
                    "box {i} albedo outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn origin(&self) -> [f64; 3] {
        [0.0, 0.0, self.sensor_height]
    }

    /// Nearest hit `(t, albedo)` along a unit direction from the sensor.
    pub fn trace(&self, dir: [f64; 3]) -> Option<(f64, f64)> {
        let o = self.origin();
        let mut best: Option<(f64, f64)> = None;
        if self.ground && dir[2] < 0.0 {
            best = Some((-o[2] / dir[2], self.ground_albedo));
        }
        for b in &self.boxes {
            if let Some(t) = b.intersect(o, dir) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, b.albedo));
                }
            }
        }
        best
    }

    /// Plain-text `key = value` form; boxes are `box = cx cy cz sx sy sz albedo`.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "sensor_height = {}", self.sensor_height).unwrap();
        writeln!(s, "ground = {}", self.ground).unwrap();
        writeln!(s, "ground_albedo = {}", self.ground_albedo).unwrap();
        for b in &self.boxes {
            let [cx, cy, cz] = b.center;
            let [sx, sy, sz] = b.size;
            writeln!(s, "box = {cx} {cy} {cz} {sx} {sy} {sz} {}", b.albedo).unwrap();
        }
        s
    }

    pub fn from_config_str(text: &str) -> Result<Scene> {
        let bad = |line: usize, m: &str| Error::Format(format!("scene line {}: {m}", line + 1));
        let mut scene = Scene {
            seed: 0,
            sensor_height: 1.73,
            ground: true,
            ground_albedo: 0.3,
            boxes: Vec::new(),
        };
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(ln, "expected key = value"))?;
            let value = value.trim();
            let num = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| bad(ln, &format!("bad number {v:?}")))
            };
            match key.trim() {
                "seed" => scene.seed = value.parse().map_err(|_| bad(ln, "bad seed"))?,
                "sensor_height" => scene.sensor_height = num(value)?,
                "ground" => scene.ground = value.parse().map_err(|_| bad(ln, "bad bool"))?,
                "ground_albedo" => scene.ground_albedo = num(value)?,
                "box" => {
                    let v: Vec<f64> = value.split_whitespace().map(num).collect::<Result<_>>()?;
                    if v.len() != 7 {
                        return Err(bad(ln, "box needs 7 numbers"));
                    }
                    scene.boxes.push(SceneBox {
                        center: [v[0], v[1], v[2]],
                        size: [v[3], v[4], v[5]],
                        albedo: v[6],
                    });
                }
                other => return Err(bad(ln, &format!("unknown key {other:?}"))),
            }
        }
        scene.validate()?;
        Ok(scene)
    }
}

/// Knobs for [`build_scene`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Boxes are placed with their centers inside this radius (meters).
    pub radius: f64,
    /// Keep-out radius around the sensor.
    pub min_distance: f64,
    /// Probability of adding two corridor walls along the x axis.
    pub corridor_probability: f64,
    pub sensor_height: f64,
    pub ground_albedo: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            min_boxes: 2,
            max_boxes: 20,
            radius: 40.0,
            min_distance: 4.0,
            corridor_probability: 0.5,
            sensor_height: 1.73,
            ground_albedo: 0.3,
        }
    }
}

impl SceneParams {
    pub fn ground_only() -> Self {
        SceneParams {
            min_boxes: 0,
            max_boxes: 0,
            corridor_probability: 0.0,
            ..Default::default()
        }
    }

    pub fn with_boxes(n: usize) -> Self {
        SceneParams {
            min_boxes: n,
            max_boxes: n,
            corridor_probability: 0.0,
            ..Default::default()
        }
    }
}

/// Deterministic random scene for `seed`.
pub fn build_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    if params.min_boxes > params.max_boxes {
        return Err(Error::InvalidConfig("min_boxes > max_boxes".into()));
    }
    if !(params.radius > params.min_distance && params.min_distance >= 0.0) {
        return Err(Error::InvalidConfig(
            "need radius > min_distance >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(params.min_boxes..=params.max_boxes);
    let mut boxes = Vec::with_capacity(n + 2);
    while boxes.len() < n {
        let r = rng.gen_range(params.min_distance..params.radius);
        let a = rng.gen_range(-PI..PI);
        let size = if rng.gen_bool(0.7) {
            // car-like
            [
                rng.gen_range(3.5..5.0),
                rng.gen_range(1.6..2.0),
                rng.gen_range(1.4..1.9),
            ]
        } else {
            [
                rng.gen_range(4.0..12.0),
                rng.gen_range(4.0..12.0),
                rng.gen_range(3.0..10.0),
            ]
        };
        let b = SceneBox {
            center: [r * a.cos(), r * a.sin(), 0.5 * size[2]],
            size,
            albedo: rng.gen_range(0.05..1.0),
        };
        // Keep the sensor outside every box.
        let clearance = SceneBox {
            size: [size[0] + 2.0, size[1] + 2.0, size[2]],
            ..b
        };
        if !clearance.contains([0.0, 0.0, clearance.center[2]]) {
            boxes.push(b);
        }
    }
    if rng.gen_bool(params.corridor_probability) {
        let half_width = rng.gen_range(6.0..15.0);
        let height = rng.gen_range(3.0..12.0);
        let albedo = rng.gen_range(0.1..0.9);
        for side in [-1.0, 1.0] {
            boxes.push(SceneBox {
                center: [0.0, side * (half_width + 0.25), 0.5 * height],
                size: [2.0 * params.radius, 0.5, height],
                albedo,
            });
        }
    }
    let scene = Scene {
        seed,
        sensor_height: params.sensor_height,
        ground: true,
        ground_albedo: params.ground_albedo,
        boxes,
    };
    scene.validate()?;
    Ok(scene)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamPattern {
    /// Beam elevations above the horizon (radians), top beam first.
    pub elevations: Vec<f64>,
    pub azimuth_count: usize,
    /// Raw intensity units per unit albedo (255 mimics KITTI).
    pub intensity_scale: f64,
}

impl BeamPattern {
    /// One beam per row and one azimuth per column, aimed at pixel centers.
    pub fn for_projection(cfg: &ProjectionConfig) -> Self {
        BeamPattern {
            elevations: (0..cfg.height)
                .map(|r| PI / 2.0 - cfg.row_center(r))
                .collect(),
            azimuth_count: cfg.width,
            intensity_scale: cfg.intensity_divisor,
        }
    }

    pub fn kitti64() -> Self {
        Self::for_projection(&ProjectionConfig::kitti())
    }

    pub fn small256() -> Self {
        Self::for_projection(&ProjectionConfig::small())
    }

    pub fn validate(&self) -> Result<()> {
        if self.azimuth_count == 0 || self.elevations.is_empty() {
            return Err(Error::InvalidConfig(
                "beam pattern must be non-empty".into(),
            ));
        }
        if self.elevations.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::InvalidConfig(
                "beam elevations must be strictly decreasing".into(),
            ));
        }
        Ok(())
    }

    pub fn azimuth(&self, j: usize) -> f64 {
        -PI + (j as f64 + 0.5) * 2.0 * PI / self.azimuth_count as f64
    }

    pub fn direction(&self, beam: usize, j: usize) -> [f64; 3] {
        let (se, ce) = self.elevations[beam].sin_cos();
        let (sa, ca) = self.azimuth(j).sin_cos();
        [ce * ca, ce * sa, se]
    }
}

/// Casts every (beam, azimuth) ray and returns sensor-centered hits in
/// beam-major order.
pub fn raycast(scene: &Scene, pattern: &BeamPattern) -> Result<PointCloud> {
    scene.validate()?;
    pattern.validate()?;
    let rows = par::map_range(pattern.elevations.len(), |beam| {
        (0..pattern.azimuth_count)
            .filter_map(|j| {
                let d = pattern.direction(beam, j);
                scene.trace(d).map(|(t, albedo)| {
                    (
                        [t * d[0], t * d[1], t * d[2]],
                        albedo * pattern.intensity_scale,
                    )
                })
            })
            .collect::<Vec<_>>()
    });
    let mut pc = PointCloud::with_capacity(rows.iter().map(Vec::len).sum());
    for (p, r) in rows.into_iter().flatten() {
        pc.push(p, r)?;
    }
    Ok(pc)
}

/// Builds the scene for `seed`, scans it with one beam per image row and
/// projects the sweep.
pub fn render_range_image(
    seed: u64,
    params: &SceneParams,
    cfg: &ProjectionConfig,
) -> Result<RangeImage> {
    let scene = build_scene(seed, params)?;
    let pc = raycast(&scene, &BeamPattern::for_projection(cfg))?;
    crate::geometry::project(&pc, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bare(ground: bool) -> Scene {
        Scene {
            seed: 0,
            sensor_height: 2.0,
            ground,
            ground_albedo: 0.5,
            boxes: vec![],
        }
    }

    fn single_beam(elevation_deg: f64, azimuths: usize) -> BeamPattern {
        BeamPattern {
            elevations: vec![elevation_deg.to_radians()],
            azimuth_count: azimuths,
            intensity_scale: 255.0,
        }
    }

    /// Intersects the ray with each box face as a bounded plane, plus the
    /// ground, and takes the minimum. Independent of the slab method.
    fn brute_force_range(scene: &Scene, dir: [f64; 3]) -> Option<f64> {
        let o = scene.origin();
        let mut ts = Vec::new();
        if scene.ground && dir[2] < 0.0 {
            ts.push(-o[2] / dir[2]);
        }
        for b in &scene.boxes {
            let (lo, hi) = (b.min(), b.max());
            for axis in 0..3 {
                for plane in [lo[axis], hi[axis]] {
                    if dir[axis] == 0.0 {
                        continue;
                    }
                    let t = (plane - o[axis]) / dir[axis];
                    if t <= 0.0 {
                        continue;
                    }
                    let p: Vec<f64> = (0..3).map(|k| o[k] + t * dir[k]).collect();
                    let inside = (0..3)
                        .filter(|&k| k != axis)
                        .all(|k| p[k] >= lo[k] - 1e-9 && p[k] <= hi[k] + 1e-9);
                    if inside {
                        ts.push(t);
                    }
                }
            }
        }
        ts.into_iter().reduce(f64::min)
    }

    #[test]
    fn downward_beam_over_bare_ground() {
        let pc = raycast(&bare(true), &single_beam(-30.0, 8)).unwrap();
        assert_eq!(pc.len(), 8);
        for ([x, y, z], r) in pc.iter() {
            assert_relative_eq!((x * x + y * y + z * z).sqrt(), 4.0, epsilon = 1e-12);
            assert_relative_eq!(z, -2.0, epsilon = 1e-12);
            assert_relative_eq!(r, 127.5);
        }
    }

    #[test]
    fn horizontal_beam_hits_box_face() {
        let mut scene = bare(true);
        scene.boxes.push(SceneBox {
            center: [12.0, 0.0, 2.0],
            size: [4.0, 30.0, 4.0],
            albedo: 0.8,
        });
        // A single azimuth is centered on +x.
        let pattern = BeamPattern {
            elevations: vec![0.0],
            azimuth_count: 1,
            intensity_scale: 1.0,
        };
        let pc = raycast(&scene, &pattern).unwrap();
        assert_eq!(pc.len(), 1);
        let ahead = pc.iter().next().unwrap();
        assert_relative_eq!(ahead.0[0], 10.0, epsilon = 1e-9);
        assert_relative_eq!(ahead.1, 0.8);
    }

    #[test]
    fn empty_scene_returns_nothing() {
        let pc = raycast(&bare(false), &BeamPattern::small256()).unwrap();
        assert!(pc.is_empty());
    }

    #[test]
    fn build_scene_is_deterministic_and_bounded() {
        let p = SceneParams::default();
        assert_eq!(build_scene(11, &p).unwrap(), build_scene(11, &p).unwrap());
        assert_ne!(build_scene(11, &p).unwrap(), build_scene(12, &p).unwrap());

        let s = build_scene(3, &SceneParams::ground_only()).unwrap();
        assert!(s.boxes.is_empty() && s.ground);

        let p5 = SceneParams::with_boxes(5);
        let s = build_scene(7, &p5).unwrap();
        assert_eq!(s.boxes.len(), 5);
        for b in &s.boxes {
            let r = b.center[0].hypot(b.center[1]);
            assert!(r >= p5.min_distance && r < p5.radius, "box at {r} m");
            assert!(!b.contains(s.origin()));
        }
    }

    #[test]
    fn ranges_match_brute_force_oracle() {
        for seed in 0..6 {
            let scene = build_scene(seed, &SceneParams::default()).unwrap();
            let pattern = BeamPattern {
                elevations: (0..12)
                    .map(|k| (3.0 - 2.5 * k as f64).to_radians())
                    .collect(),
                azimuth_count: 90,
                intensity_scale: 1.0,
            };
            let pc = raycast(&scene, &pattern).unwrap();
            assert!(pc.len() <= 12 * 90);
            let mut k = 0;
            for beam in 0..12 {
                for j in 0..90 {
                    let d = pattern.direction(beam, j);
                    if let Some(t) = brute_force_range(&scene, d) {
                        let p = pc.positions()[k];
                        let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                        assert!((range - t).abs() < 1e-7, "seed {seed} beam {beam} az {j}");
                        k += 1;
                    }
                }
            }
            assert_eq!(k, pc.len());
        }
    }

    #[test]
    fn raycast_is_deterministic() {
        let scene = build_scene(5, &SceneParams::default()).unwrap();
        let p = BeamPattern::small256();
        assert_eq!(raycast(&scene, &p).unwrap(), raycast(&scene, &p).unwrap());
    }

    #[test]
    fn scene_config_round_trips() {
        let scene = build_scene(21, &SceneParams::default()).unwrap();
        let text = scene.to_config_string();
        assert_eq!(Scene::from_config_str(&text).unwrap(), scene);
        assert!(Scene::from_config_str("box = 1 2 3").is_err());
        assert!(Scene::from_config_str("colour = red").is_err());
    }

    #[test]
    fn pattern_validation() {
        let mut p = BeamPattern::kitti64();
        p.validate().unwrap();
        assert_eq!(p.elevations.len(), 64);
        p.elevations.swap(0, 1);
        assert!(p.validate().is_err());
    }
}
