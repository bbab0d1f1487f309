//! Pinhole cameras and a geometric sphere detector.
//!
//! Camera frames follow the usual convention: the pose orientation columns
//! are the camera x (image right), y (image down) and z (optical axis) axes
//! expressed in the arm base frame.

use crate::rodkin::{centerline_samples, ArmConfig, KinematicsError, Pose, RodParams};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSpec {
    pub pose: Pose,
    pub focal_px: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraSpec {
    pub fn center(&self) -> PixelPoint {
        PixelPoint { u: self.width as f64 / 2.0, v: self.height as f64 / 2.0 }
    }

    /// Half the frame diagonal in pixels.
    pub fn half_diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64) / 2.0
    }

    pub fn contains(&self, p: &PixelPoint) -> bool {
        p.u >= 0.0 && p.u <= self.width as f64 && p.v >= 0.0 && p.v <= self.height as f64
    }

    /// Depth of a world point along the optical axis.
    pub fn depth(&self, p_world: &Vector3<f64>) -> f64 {
        self.to_camera(p_world).z
    }

    fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.pose.orientation.transpose() * (p_world - self.pose.position)
    }
}

/// Intrinsics shared by both cameras.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Intrinsics {
    pub focal_px: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self { focal_px: 500.0, width: 640, height: 480 }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.focal_px > 0.0 && self.focal_px.is_finite()) || self.width == 0 || self.height == 0 {
            return Err(format!("camera intrinsics must be positive, got {self:?}"));
        }
        Ok(())
    }
}

/// Placement of the fixed workspace camera.
///
/// The camera sits at `position` and looks toward `−y` (the workspace front),
/// pitched `pitch_deg` toward `+z`, which is the gravity direction along the
/// hanging arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseCameraPlacement {
    pub position: [f64; 3],
    pub pitch_deg: f64,
}

impl Default for BaseCameraPlacement {
    fn default() -> Self {
        Self { position: [0.0, 0.5, -0.35], pitch_deg: 45.0 }
    }
}

impl BaseCameraPlacement {
    pub fn camera(&self, intr: &Intrinsics) -> CameraSpec {
        let (s, c) = self.pitch_deg.to_radians().sin_cos();
        let z = Vector3::new(0.0, -c, s);
        let y = Vector3::new(0.0, s, c);
        let x = y.cross(&z);
        let orientation = Matrix3::from_columns(&[x, y, z]);
        CameraSpec {
            pose: Pose { position: Vector3::from(self.position), orientation },
            focal_px: intr.focal_px,
            width: intr.width,
            height: intr.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub centroid: PixelPoint,
    pub bbox: BoundingBox,
    pub visible: bool,
}

impl Detection {
    pub fn hidden() -> Self {
        Detection {
            centroid: PixelPoint { u: 0.0, v: 0.0 },
            bbox: BoundingBox { u_min: 0.0, v_min: 0.0, u_max: 0.0, v_max: 0.0 },
            visible: false,
        }
    }
}

/// Pinhole projection; `None` for points at or behind the image plane.
pub fn project_point(cam: &CameraSpec, p_world: &Vector3<f64>) -> Option<PixelPoint> {
    let q = cam.to_camera(p_world);
    if q.z <= 0.0 {
        return None;
    }
    let c = cam.center();
    Some(PixelPoint { u: c.u + cam.focal_px * q.x / q.z, v: c.v + cam.focal_px * q.y / q.z })
}

pub fn sphere_detection(cam: &CameraSpec, center: &Vector3<f64>, radius: f64) -> Detection {
    let depth = cam.depth(center);
    let Some(centroid) = project_point(cam, center) else {
        return Detection::hidden();
    };
    let half = cam.focal_px * radius / depth;
    let (w, h) = (cam.width as f64, cam.height as f64);
    let bbox = BoundingBox {
        u_min: (centroid.u - half).clamp(0.0, w),
        v_min: (centroid.v - half).clamp(0.0, h),
        u_max: (centroid.u + half).clamp(0.0, w),
        v_max: (centroid.v + half).clamp(0.0, h),
    };
    let visible = depth > radius && cam.contains(&centroid);
    Detection { centroid, bbox, visible }
}

/// Distal camera rigidly attached at the tip, looking along the tip z-axis.
pub fn distal_camera(tip: &Pose, template: &Intrinsics) -> CameraSpec {
    CameraSpec { pose: *tip, focal_px: template.focal_px, width: template.width, height: template.height }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Marker sphere centers from base to tip.
    pub markers: Vec<Vector3<f64>>,
    pub marker_radius: f64,
    pub target: Vector3<f64>,
    pub target_radius: f64,
}

pub const DEFAULT_TARGET_RADIUS: f64 = 0.015;

impl Scene {
    pub fn new(config: ArmConfig, rod: &RodParams, target: Vector3<f64>, target_radius: f64) -> Result<Self, KinematicsError> {
        let markers = centerline_samples(config, rod)?.into_iter().map(|p| p.position).collect();
        Ok(Scene { markers, marker_radius: rod.marker_radius, target, target_radius })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObservation {
    /// Tip-most arm marker in the base camera.
    pub base_tip: Detection,
    /// Target in the base camera.
    pub base_target: Detection,
    /// Target in the distal camera.
    pub distal_target: Detection,
}

/// Run the detector on both cameras. Occlusion is not modelled.
pub fn observe_scene(scene: &Scene, base_cam: &CameraSpec, distal_cam: &CameraSpec) -> SceneObservation {
    let tip = scene.markers.last().copied().unwrap_or_else(Vector3::zeros);
    SceneObservation {
        base_tip: sphere_detection(base_cam, &tip, scene.marker_radius),
        base_target: sphere_detection(base_cam, &scene.target, scene.target_radius),
        distal_target: sphere_detection(distal_cam, &scene.target, scene.target_radius),
    }
}

/// Add zero-mean Gaussian pixel noise to a visible detection.
pub fn with_pixel_noise<R: Rng + ?Sized>(det: Detection, sigma: f64, rng: &mut R) -> Detection {
    if sigma <= 0.0 || !det.visible {
        return det;
    }
    let du = sigma * rng.sample::<f64, _>(StandardNormal);
    let dv = sigma * rng.sample::<f64, _>(StandardNormal);
    Detection {
        centroid: PixelPoint { u: det.centroid.u + du, v: det.centroid.v + dv },
        bbox: BoundingBox {
            u_min: det.bbox.u_min + du,
            v_min: det.bbox.v_min + dv,
            u_max: det.bbox.u_max + du,
            v_max: det.bbox.v_max + dv,
        },
        visible: det.visible,
    }
}

/// Append detection rows `frame,object,u,v,visible`.
pub fn write_detections_csv<W: Write>(out: W, frames: &[(usize, SceneObservation)]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame", "object", "u", "v", "visible"])?;
    for (frame, obs) in frames {
        for (name, det) in [
            ("base_tip", &obs.base_tip),
            ("base_target", &obs.base_target),
            ("distal_target", &obs.distal_target),
        ] {
            w.write_record([
                frame.to_string(),
                name.to_string(),
                format!("{:.6}", det.centroid.u),
                format!("{:.6}", det.centroid.v),
                u8::from(det.visible).to_string(),
            ])?;
        }
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rodkin::{tip_pose, Pose};
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;

    fn axis_cam() -> CameraSpec {
        distal_camera(&Pose::identity(), &Intrinsics::default())
    }

    #[test]
    fn projection_center_and_offset() {
        let cam = axis_cam();
        assert_eq!(project_point(&cam, &Vector3::new(0.0, 0.0, 1.0)), Some(PixelPoint { u: 320.0, v: 240.0 }));
        let p = project_point(&cam, &Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert_relative_eq!(p.u, 370.0, epsilon = 1e-12);
        assert_relative_eq!(p.v, 240.0, epsilon = 1e-12);
        assert_eq!(project_point(&cam, &Vector3::new(0.0, 0.0, 0.0)), None);
        assert_eq!(project_point(&cam, &Vector3::new(0.0, 0.0, -1.0)), None);
    }

    #[test]
    fn sphere_bbox_scales_with_depth() {
        let d = sphere_detection(&axis_cam(), &Vector3::new(0.0, 0.0, 1.0), 0.015);
        assert!(d.visible);
        assert_eq!(d.centroid, PixelPoint { u: 320.0, v: 240.0 });
        assert_relative_eq!(d.bbox.u_max - d.centroid.u, 7.5, epsilon = 1e-12);
        assert_relative_eq!(d.centroid.v - d.bbox.v_min, 7.5, epsilon = 1e-12);
    }

    #[test]
    fn hidden_spheres() {
        let cam = axis_cam();
        assert!(!sphere_detection(&cam, &Vector3::new(0.0, 0.0, -0.5), 0.015).visible);
        // u = 320 + 500·x/z = 840 → x = 1.04 at z = 1
        let off = sphere_detection(&cam, &Vector3::new(1.04, 0.0, 1.0), 0.015);
        assert_relative_eq!(off.centroid.u, 840.0, epsilon = 1e-9);
        assert!(!off.visible);
        // Camera inside the sphere.
        assert!(!sphere_detection(&cam, &Vector3::new(0.0, 0.0, 0.01), 0.015).visible);
    }

    #[test]
    fn distal_camera_follows_tip() {
        let cam = axis_cam();
        assert_eq!(cam.pose.position, Vector3::zeros());
        assert_eq!(cam.pose.z_axis(), Vector3::z());

        let r = Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::FRAC_PI_2).into_inner();
        let tip = Pose { position: Vector3::new(0.1, 0.2, 0.3), orientation: r };
        let cam = distal_camera(&tip, &Intrinsics::default());
        assert_relative_eq!(cam.pose.z_axis(), r.column(2).into_owned());

        let rod = RodParams::default();
        let tip = tip_pose(ArmConfig::new(0.0, 7.0).unwrap(), &rod).unwrap();
        let cam = distal_camera(&tip, &Intrinsics::default());
        assert_relative_eq!(cam.pose.position, Vector3::new(0.0, 0.0, 0.3), epsilon = 1e-14);
        assert_relative_eq!(cam.pose.z_axis(), Vector3::z(), epsilon = 1e-14);
    }

    #[test]
    fn base_camera_is_a_rotation_and_pitched() {
        let cam = BaseCameraPlacement::default().camera(&Intrinsics::default());
        assert!(cam.pose.is_valid_rotation(1e-12));
        let z = cam.pose.z_axis();
        assert_relative_eq!(z.z.asin().to_degrees(), 45.0, epsilon = 1e-9);
    }

    #[test]
    fn observe_scene_center_law_and_purity() {
        let rod = RodParams::default();
        let intr = Intrinsics::default();
        let base = BaseCameraPlacement::default().camera(&intr);
        let cfg = ArmConfig::default();
        let tip = tip_pose(cfg, &rod).unwrap();
        for d in [0.02, 0.1, 0.7] {
            let scene = Scene::new(cfg, &rod, Vector3::new(0.0, 0.0, 0.3 + d), DEFAULT_TARGET_RADIUS).unwrap();
            let obs = observe_scene(&scene, &base, &distal_camera(&tip, &intr));
            assert!(obs.distal_target.visible);
            assert!(obs.distal_target.centroid.distance(&intr_center(&intr)) < 1e-6);
            assert_eq!(obs, observe_scene(&scene, &base, &distal_camera(&tip, &intr)));
        }
        let behind = Scene::new(cfg, &rod, Vector3::new(0.0, 0.0, 0.1), DEFAULT_TARGET_RADIUS).unwrap();
        assert!(!observe_scene(&behind, &base, &distal_camera(&tip, &intr)).distal_target.visible);
    }

    fn intr_center(i: &Intrinsics) -> PixelPoint {
        PixelPoint { u: i.width as f64 / 2.0, v: i.height as f64 / 2.0 }
    }

    #[test]
    fn continuity_under_small_target_motion() {
        let cam = axis_cam();
        let a = sphere_detection(&cam, &Vector3::new(0.05, -0.02, 0.5), 0.015);
        let b = sphere_detection(&cam, &Vector3::new(0.05 + 1e-6, -0.02, 0.5), 0.015);
        let bound = 2.0 * 1e-6 * 500.0 / 0.5;
        assert!(a.centroid.distance(&b.centroid) <= bound);
    }

    #[test]
    fn noise_leaves_hidden_detections_alone() {
        let mut rng = rand::thread_rng();
        let h = Detection::hidden();
        assert_eq!(with_pixel_noise(h, 3.0, &mut rng), h);
        let d = sphere_detection(&axis_cam(), &Vector3::new(0.0, 0.0, 1.0), 0.015);
        assert_eq!(with_pixel_noise(d, 0.0, &mut rng), d);
    }

    #[test]
    fn detections_csv_layout() {
        let d = sphere_detection(&axis_cam(), &Vector3::new(0.0, 0.0, 1.0), 0.015);
        let obs = SceneObservation { base_tip: d, base_target: Detection::hidden(), distal_target: d };
        let mut buf = Vec::new();
        write_detections_csv(&mut buf, &[(0, obs)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "frame,object,u,v,visible");
        assert_eq!(lines[1], "0,base_tip,320.000000,240.000000,1");
        assert_eq!(lines[2], "0,base_target,0.000000,0.000000,0");
        assert_eq!(lines.len(), 4);
    }
}
