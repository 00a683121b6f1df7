use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Oriented rectangle on the ground plane, serialized as
/// `[center_x, center_y, width, length, yaw]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 5]", into = "[f64; 5]")]
pub struct Object {
    pub center_x: f64,
    pub center_y: f64,
    pub width: f64,
    pub length: f64,
    pub yaw: f64,
}

impl From<[f64; 5]> for Object {
    fn from(a: [f64; 5]) -> Self {
        Self { center_x: a[0], center_y: a[1], width: a[2], length: a[3], yaw: a[4] }
    }
}

impl From<Object> for [f64; 5] {
    fn from(o: Object) -> Self {
        [o.center_x, o.center_y, o.width, o.length, o.yaw]
    }
}

impl Object {
    /// Whether world point `(x, y)` lies inside the rectangle (boundary included).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center_x, y - self.center_y);
        let (s, c) = self.yaw.sin_cos();
        let along = c * dx + s * dy;
        let across = -s * dx + c * dy;
        along.abs() <= self.length / 2.0 && across.abs() <= self.width / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Object>,
    pub world_extent: f64,
    pub seed: u64,
}

impl Scene {
    pub fn occupied(&self, x: f64, y: f64) -> bool {
        self.objects.iter().any(|o| o.contains(x, y))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Agent pose in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: normalize_angle(yaw) }
    }

    pub fn to_world(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * lx - s * ly, self.y + s * lx + c * ly)
    }

    pub fn to_local(&self, wx: f64, wy: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (wx - self.x, wy - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Maps any angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Objects are rectangles of width 1.6–2.4 m and length 3.0–5.0 m whose
/// centres are at least 3 m apart (best effort when the world is crowded).
pub fn generate_scene(seed: u64, n_objects: usize, world_extent: f64) -> Result<Scene> {
    if n_objects == 0 {
        return Err(Error::Invalid("a scene needs at least one object".into()));
    }
    if !(world_extent > 0.0) {
        return Err(Error::Invalid(format!("world extent must be positive, got {world_extent}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects: Vec<Object> = Vec::with_capacity(n_objects);
    while objects.len() < n_objects {
        let mut candidate = random_object(&mut rng, world_extent);
        for _ in 0..50 {
            let clear = objects
                .iter()
                .all(|o| (o.center_x - candidate.center_x).hypot(o.center_y - candidate.center_y) >= 3.0);
            if clear {
                break;
            }
            candidate = random_object(&mut rng, world_extent);
        }
        objects.push(candidate);
    }
    Ok(Scene { objects, world_extent, seed })
}

fn random_object(rng: &mut ChaCha8Rng, extent: f64) -> Object {
    Object {
        center_x: rng.random_range(-extent..=extent),
        center_y: rng.random_range(-extent..=extent),
        width: rng.random_range(1.6..=2.4),
        length: rng.random_range(3.0..=5.0),
        yaw: normalize_angle(rng.random_range(-PI..PI)),
    }
}

/// `count` viewpoints for one scene: the first uniformly near the world
/// centre, every other one `spacing` metres (a range) away from it, clamped
/// to the world.
pub fn sample_poses(seed: u64, count: usize, world_extent: f64, spacing: (f64, f64)) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let half = world_extent / 3.0;
    let ego = Pose::new(
        rng.random_range(-half..=half),
        rng.random_range(-half..=half),
        rng.random_range(-PI..PI),
    );
    let mut poses = vec![ego];
    for _ in 1..count {
        let d = rng.random_range(spacing.0..=spacing.1);
        let dir: f64 = rng.random_range(-PI..PI);
        let x = (ego.x + d * dir.cos()).clamp(-world_extent, world_extent);
        let y = (ego.y + d * dir.sin()).clamp(-world_extent, world_extent);
        poses.push(Pose::new(x, y, rng.random_range(-PI..PI)));
    }
    poses
}

/// Gaussian perturbation of position (std `sigma_xy`) and heading (std `sigma_yaw`).
pub fn apply_pose_noise<R: Rng + ?Sized>(pose: &Pose, sigma_xy: f64, sigma_yaw: f64, rng: &mut R) -> Pose {
    assert!(sigma_xy >= 0.0 && sigma_yaw >= 0.0, "noise std must be nonnegative");
    let zx: f64 = StandardNormal.sample(rng);
    let zy: f64 = StandardNormal.sample(rng);
    let zt: f64 = StandardNormal.sample(rng);
    Pose::new(pose.x + sigma_xy * zx, pose.y + sigma_xy * zy, pose.yaw + sigma_yaw * zt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_bounded() {
        let a = generate_scene(0, 5, 32.0).unwrap();
        let b = generate_scene(0, 5, 32.0).unwrap();
        let c = generate_scene(1, 5, 32.0).unwrap();
        assert_eq!(a.objects.len(), 5);
        assert_eq!(a.to_json(), b.to_json());
        assert_ne!(a.to_json(), c.to_json());
        for o in &a.objects {
            assert!(o.center_x.abs() <= 32.0 && o.center_y.abs() <= 32.0);
            assert!(o.width > 0.0 && o.length > 0.0);
        }
        assert!(generate_scene(0, 0, 32.0).is_err());
        assert!(generate_scene(0, 3, 0.0).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let s = generate_scene(42, 7, 24.0).unwrap();
        let text = s.to_json();
        assert!(text.contains("\"objects\":[["));
        assert_eq!(Scene::from_json(&text).unwrap(), s);
    }

    #[test]
    fn angles_normalise_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((normalize_angle(7.0) - (7.0 - 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn frame_transforms_invert() {
        let p = Pose::new(3.0, -2.0, 0.7);
        let (wx, wy) = p.to_world(1.5, 4.0);
        let (lx, ly) = p.to_local(wx, wy);
        assert!((lx - 1.5).abs() < 1e-12 && (ly - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_keeps_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Pose::new(1.0, 2.0, 0.5);
        assert_eq!(apply_pose_noise(&p, 0.0, 0.0, &mut rng), p);
    }

    #[test]
    fn noise_has_requested_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = Pose::new(0.0, 0.0, 0.0);
        let n = 10_000;
        let dx: Vec<f64> = (0..n).map(|_| apply_pose_noise(&p, 0.3, 0.01, &mut rng).x).collect();
        let mean = dx.iter().sum::<f64>() / n as f64;
        let std = (dx.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((std - 0.3).abs() < 0.015, "sample std {std}");
    }
}
