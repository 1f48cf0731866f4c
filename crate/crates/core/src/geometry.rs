//! Coordinate transforms, point-cloud preprocessing and direction sampling.
//!
//! Angles follow the physics convention: `theta` is the polar angle measured
//! from +z in `[0, π]` and `phi` the azimuth from +x in `[0, 2π)`.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;

use crate::error::DomainError;

/// Default floor applied to eroded radii, in meters.
pub const DEFAULT_EPS_R: f64 = 0.05;

/// A direction on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub theta: f64,
    pub phi: f64,
}

impl Direction {
    pub fn new(theta: f64, phi: f64) -> Result<Self, DomainError> {
        check_angles(theta, phi)?;
        Ok(Self { theta, phi })
    }

    /// Direction of a non-zero vector. Returns `None` for the zero vector.
    pub fn from_vector(v: &Vector3<f64>) -> Option<Self> {
        let s = cart_to_sph(v);
        (s.r > 0.0).then_some(Self {
            theta: s.theta,
            phi: s.phi,
        })
    }

    pub fn unit(&self) -> Vector3<f64> {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        Vector3::new(st * cp, st * sp, ct)
    }
}

pub(crate) fn check_angles(theta: f64, phi: f64) -> Result<(), DomainError> {
    if !(0.0..=PI).contains(&theta) {
        return Err(DomainError::Theta(theta));
    }
    if !(0.0..TAU).contains(&phi) {
        return Err(DomainError::Phi(phi));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalPoint {
    pub r: f64,
    pub theta: f64,
    pub phi: f64,
}

impl SphericalPoint {
    pub fn direction(&self) -> Direction {
        Direction {
            theta: self.theta,
            phi: self.phi,
        }
    }
}

/// Maps an `atan2` result into `[0, 2π)`.
fn wrap_azimuth(phi: f64) -> f64 {
    let phi = if phi < 0.0 { phi + TAU } else { phi };
    // -tiny + 2π rounds to exactly 2π
    if phi >= TAU {
        0.0
    } else {
        phi
    }
}

/// Cartesian to spherical. The origin maps to `(0, 0, 0)`.
pub fn cart_to_sph(p: &Vector3<f64>) -> SphericalPoint {
    let r = p.norm();
    if r == 0.0 {
        return SphericalPoint {
            r: 0.0,
            theta: 0.0,
            phi: 0.0,
        };
    }
    // atan2 keeps full precision near the poles where acos(z/r) does not.
    let rho = p.x.hypot(p.y);
    let theta = rho.atan2(p.z);
    let phi = if rho == 0.0 {
        0.0
    } else {
        wrap_azimuth(p.y.atan2(p.x))
    };
    SphericalPoint { r, theta, phi }
}

pub fn sph_to_cart(s: &SphericalPoint) -> Vector3<f64> {
    let (st, ct) = s.theta.sin_cos();
    let (sp, cp) = s.phi.sin_cos();
    Vector3::new(s.r * st * cp, s.r * st * sp, s.r * ct)
}

/// Measurement points in the agent-centered frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    /// World position of the agent when the cloud was captured.
    pub frame_origin: Vector3<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, frame_origin: Vector3<f64>) -> Self {
        Self {
            points,
            frame_origin,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn map_radii(&self, f: impl Fn(f64) -> f64) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| {
                let r = p.norm();
                if r == 0.0 {
                    *p
                } else {
                    p * (f(r) / r)
                }
            })
            .collect();
        Self {
            points,
            frame_origin: self.frame_origin,
        }
    }
}

/// Projects points beyond `r_roi` radially onto the region-of-interest sphere.
pub fn clamp_to_roi(cloud: &PointCloud, r_roi: f64) -> PointCloud {
    assert!(r_roi > 0.0, "region of interest radius must be positive");
    // points already on the sphere up to rounding are left alone so that
    // clamping is idempotent
    let outside = r_roi * (1.0 + 1e-12);
    cloud.map_radii(|r| if r > outside { r_roi } else { r })
}

/// Shrinks every point radially by the agent radius, never below `eps_r`.
pub fn erode_by_agent_radius(cloud: &PointCloud, r_a: f64, eps_r: f64) -> PointCloud {
    assert!(r_a >= 0.0 && eps_r > 0.0);
    if r_a == 0.0 {
        return cloud.clone();
    }
    cloud.map_radii(|r| (r - r_a).max(eps_r))
}

/// Clamp to the region of interest, then erode by the agent radius.
pub fn preprocess_cloud(cloud: &PointCloud, r_roi: f64, r_a: f64, eps_r: f64) -> PointCloud {
    erode_by_agent_radius(&clamp_to_roi(cloud, r_roi), r_a, eps_r)
}

/// Settings of [`erode_by_agent_ball`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallErosion {
    pub r_roi: f64,
    /// Agent radius.
    pub r_a: f64,
    /// Each return `q` is widened by `spread·‖q‖`. With `spread` the angular
    /// covering radius of the ray set this accounts for surface between
    /// neighbouring rays.
    pub spread: f64,
    /// Extra clearance kept from every return where possible.
    pub buffer: f64,
    /// Fraction of the remaining distance to a return the agent may cover in
    /// one estimate once inside its buffer.
    pub approach: f64,
    /// Largest radius granted inside a buffer.
    pub eps_r: f64,
}

impl BallErosion {
    pub fn new(r_roi: f64, r_a: f64) -> Self {
        Self {
            r_roi,
            r_a,
            spread: 0.0,
            buffer: 0.0,
            approach: 0.0,
            eps_r: DEFAULT_EPS_R,
        }
    }
}

/// Radii below this are raised to it so that every output point keeps a
/// direction.
const MIN_RADIUS: f64 = 1e-9;

/// Free radius along each of `directions` for a ball of radius `r_a`, given
/// the raw measured returns of `cloud`.
///
/// Each return `q` is a sphere of radius `r_a + spread·‖q‖` the agent centre
/// must stay out of, surrounded by a buffer of width `buffer`. Along
/// direction `u` the result is the distance the centre can slide from the
/// origin before entering a buffer. Where that distance is short, up to
/// `eps_r` but at most `approach` times the distance to the inner sphere is
/// granted instead, so the field never collapses at a wall while the agent
/// still never enters an inner sphere. A sphere the centre already overlaps
/// limits only the directions that approach it. Results are capped at
/// `r_roi - r_a`; the output has one point per direction, in input order.
pub fn erode_by_agent_ball(
    cloud: &PointCloud,
    directions: &[Direction],
    e: &BallErosion,
) -> PointCloud {
    assert!(e.r_roi > e.r_a && e.r_a >= 0.0);
    assert!(
        e.spread >= 0.0 && e.buffer >= 0.0 && (0.0..1.0).contains(&e.approach) && e.eps_r >= 0.0
    );
    let cap = e.r_roi - e.r_a;
    let near: Vec<(Vector3<f64>, f64)> = cloud
        .points
        .iter()
        .filter_map(|p| {
            let inner = e.r_a + e.spread * p.norm();
            // points farther than this cannot constrain the region
            (p.norm() < cap + inner + e.buffer).then_some((*p, inner))
        })
        .collect();
    // distance along u to the sphere of radius `reach` around q
    let contact = |u: &Vector3<f64>, q: &Vector3<f64>, reach: f64| -> f64 {
        let along = u.dot(q);
        if along <= 0.0 {
            return f64::INFINITY;
        }
        let perp2 = q.norm_squared() - along * along;
        let reach2 = reach * reach;
        if perp2 >= reach2 {
            return f64::INFINITY;
        }
        along - (reach2 - perp2).sqrt()
    };
    let points = directions
        .iter()
        .map(|d| {
            let u = d.unit();
            let mut outer = f64::INFINITY;
            let mut inner = f64::INFINITY;
            for (q, r) in &near {
                outer = outer.min(contact(&u, q, r + e.buffer));
                inner = inner.min(contact(&u, q, *r));
            }
            let granted = e.eps_r.min(e.approach * inner);
            let free = outer.max(granted).min(cap);
            u * free.max(MIN_RADIUS)
        })
        .collect();
    PointCloud {
        points,
        frame_origin: cloud.frame_origin,
    }
}

/// Angular covering radius of `n` Fibonacci directions: every direction on
/// the sphere lies within about this angle of one of them. Uses the
/// hexagonal-packing cell of area `4π/n`.
pub fn fibonacci_covering_angle(n: usize) -> f64 {
    assert!(n > 0);
    let spacing = (8.0 * std::f64::consts::PI / (3f64.sqrt() * n as f64)).sqrt();
    spacing / 3f64.sqrt()
}

/// Region-of-interest radius: farthest reachable distance within the horizon
/// plus the agent radius.
pub fn roi_radius(max_speed: f64, horizon: f64, r_a: f64) -> f64 {
    assert!(max_speed >= 0.0 && horizon >= 0.0 && r_a >= 0.0);
    max_speed * horizon + r_a
}

/// `n` near-uniform directions on the Fibonacci spiral lattice.
pub fn fibonacci_directions(n: usize) -> Vec<Direction> {
    assert!(n >= 1, "need at least one direction");
    let golden_angle = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let theta = z.clamp(-1.0, 1.0).acos();
            let phi = (i as f64 * golden_angle).rem_euclid(TAU);
            Direction {
                theta,
                phi: if phi >= TAU { 0.0 } else { phi },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Vector3<f64>, b: &Vector3<f64>, tol: f64) -> bool {
        (a - b).norm() <= tol * (1.0 + b.norm())
    }

    #[test]
    fn cart_to_sph_examples() {
        let s = cart_to_sph(&Vector3::new(1.0, 0.0, 0.0));
        assert_eq!((s.r, s.phi), (1.0, 0.0));
        assert!((s.theta - PI / 2.0).abs() < 1e-15);

        let s = cart_to_sph(&Vector3::new(0.0, 0.0, -2.0));
        assert_eq!((s.r, s.theta, s.phi), (2.0, PI, 0.0));

        let s = cart_to_sph(&Vector3::new(1.0, 1.0, 2f64.sqrt()));
        assert!((s.r - 2.0).abs() < 1e-15);
        assert!((s.theta - PI / 4.0).abs() < 1e-15);
        assert!((s.phi - PI / 4.0).abs() < 1e-15);

        assert_eq!(
            cart_to_sph(&Vector3::zeros()),
            SphericalPoint {
                r: 0.0,
                theta: 0.0,
                phi: 0.0
            }
        );
    }

    #[test]
    fn sph_to_cart_examples() {
        let p = sph_to_cart(&SphericalPoint {
            r: 1.0,
            theta: PI / 2.0,
            phi: PI / 2.0,
        });
        assert!(close(&p, &Vector3::new(0.0, 1.0, 0.0), 1e-15));
        let p = sph_to_cart(&SphericalPoint {
            r: 0.0,
            theta: 0.0,
            phi: 0.0,
        });
        assert_eq!(p, Vector3::zeros());
        let p = sph_to_cart(&SphericalPoint {
            r: 2.0,
            theta: PI / 3.0,
            phi: PI,
        });
        assert!(close(&p, &Vector3::new(-3f64.sqrt(), 0.0, 1.0), 1e-15));
    }

    #[test]
    fn negative_zero_azimuth_stays_in_range() {
        let s = cart_to_sph(&Vector3::new(1.0, -1e-300, 0.0));
        assert!((0.0..TAU).contains(&s.phi));
    }

    #[test]
    fn clamp_examples() {
        let cloud = PointCloud::new(
            vec![Vector3::new(0.0, 3.0, 0.0), Vector3::new(10.0, 0.0, 0.0)],
            Vector3::zeros(),
        );
        let out = clamp_to_roi(&cloud, 5.0);
        assert_eq!(out.points[0], Vector3::new(0.0, 3.0, 0.0));
        assert_eq!(out.points[1], Vector3::new(5.0, 0.0, 0.0));
        assert!(clamp_to_roi(&PointCloud::default(), 5.0).is_empty());
    }

    #[test]
    fn erode_examples() {
        let cloud = PointCloud::new(
            vec![Vector3::new(5.0, 0.0, 0.0), Vector3::new(0.5, 0.0, 0.0)],
            Vector3::zeros(),
        );
        let out = erode_by_agent_radius(&cloud, 1.0, 0.05);
        assert_eq!(out.points[0], Vector3::new(4.0, 0.0, 0.0));
        assert!((out.points[1] - Vector3::new(0.05, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(erode_by_agent_radius(&cloud, 0.0, 0.05), cloud);
    }

    #[test]
    fn roi_examples() {
        assert_eq!(roi_radius(2.0, 2.0, 0.5), 4.5);
        assert_eq!(roi_radius(0.0, 3.0, 0.7), 0.7);
        assert_eq!(roi_radius(1.0, 1.0, 0.0), 1.0);
    }

    #[test]
    fn fibonacci_small_counts() {
        let one = fibonacci_directions(1);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].theta, PI / 2.0);

        let four = fibonacci_directions(4);
        for i in 0..4 {
            for j in i + 1..4 {
                assert!((four[i].unit() - four[j].unit()).norm() > 1e-3);
            }
        }
    }

    #[test]
    fn fibonacci_lattice_is_balanced() {
        let dirs = fibonacci_directions(1000);
        let mean: Vector3<f64> = dirs.iter().map(|d| d.unit()).sum::<Vector3<f64>>() / 1000.0;
        assert!(mean.norm() < 0.01, "mean norm {}", mean.norm());
    }

    #[test]
    fn fibonacci_min_separation_near_ideal_packing() {
        for &n in &[100usize, 400, 1000] {
            let units: Vec<_> = fibonacci_directions(n).iter().map(|d| d.unit()).collect();
            let mut min_sep = f64::INFINITY;
            for i in 0..n {
                for j in i + 1..n {
                    let c = units[i].dot(&units[j]).clamp(-1.0, 1.0);
                    min_sep = min_sep.min(c.acos());
                }
            }
            // hexagonal packing of n caps on the sphere
            let ideal = (8.0 * PI / (3f64.sqrt() * n as f64)).sqrt();
            assert!(min_sep >= ideal / 2.0, "n={n}: {min_sep} vs {ideal}");
        }
    }

    #[test]
    fn fibonacci_angles_in_range() {
        for &n in &[1usize, 2, 7, 1000, 100_000] {
            for d in fibonacci_directions(n) {
                assert!((0.0..=PI).contains(&d.theta));
                assert!((0.0..TAU).contains(&d.phi));
            }
        }
    }

    #[test]
    fn ball_erosion_matches_radial_head_on() {
        // a single return straight ahead: the ball touches it exactly when the
        // radial erosion says so
        let cloud = PointCloud::new(vec![Vector3::new(2.0, 0.0, 0.0)], Vector3::zeros());
        let dirs = [Direction::new(PI / 2.0, 0.0).unwrap()];
        let out = erode_by_agent_ball(&cloud, &dirs, &BallErosion::new(4.0, 0.5));
        assert!((out.points[0].x - 1.5).abs() < 1e-12);
    }

    #[test]
    fn ball_erosion_limits_oblique_approach_to_a_wall() {
        // wall x = 1 sampled densely; along 60° from the normal the radial
        // erosion leaves the ball penetrating the wall, the ball erosion doesn't
        let mut pts = Vec::new();
        for i in -400..=400 {
            for k in -20..=20 {
                pts.push(Vector3::new(1.0, i as f64 * 0.01, k as f64 * 0.01));
            }
        }
        let cloud = PointCloud::new(pts, Vector3::zeros());
        let dir = Direction::new(PI / 2.0, PI / 3.0).unwrap();
        let out = erode_by_agent_ball(&cloud, &[dir], &BallErosion::new(3.0, 0.5));
        let centre = out.points[0];
        assert!(1.0 - centre.x >= 0.5 - 1e-3, "gap {}", 1.0 - centre.x);
        let radial_hit = 1.0 / (PI / 3.0).cos();
        let radial_centre = dir.unit() * (radial_hit - 0.5);
        assert!(1.0 - radial_centre.x < 0.5);
    }

    #[test]
    fn ball_erosion_with_no_returns_is_roi_sphere() {
        let dirs = fibonacci_directions(10);
        let out = erode_by_agent_ball(&PointCloud::default(), &dirs, &BallErosion::new(3.0, 0.5));
        for p in out.points {
            assert!((p.norm() - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn ball_erosion_inside_buffer_approaches_geometrically() {
        let cloud = PointCloud::new(vec![Vector3::new(0.65, 0.0, 0.0)], Vector3::zeros());
        let e = BallErosion {
            buffer: 0.2,
            approach: 0.5,
            eps_r: 0.05,
            ..BallErosion::new(3.0, 0.5)
        };
        let ahead = Direction::new(PI / 2.0, 0.0).unwrap();
        let behind = Direction::new(PI / 2.0, PI).unwrap();
        let out = erode_by_agent_ball(&cloud, &[ahead, behind], &e);
        // inside the buffer, 0.15 to the inner sphere; half of it, capped at eps_r
        assert!((out.points[0].norm() - 0.05).abs() < 1e-12);
        assert!((out.points[1].norm() - 2.5).abs() < 1e-12);
        let close = PointCloud::new(vec![Vector3::new(0.54, 0.0, 0.0)], Vector3::zeros());
        let out = erode_by_agent_ball(&close, &[ahead], &e);
        assert!((out.points[0].norm() - 0.02).abs() < 1e-12);
    }

    fn arb_point() -> impl Strategy<Value = Vector3<f64>> {
        (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64)
            .prop_filter("non-origin", |(x, y, z)| x.abs() + y.abs() + z.abs() > 1e-6)
            .prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn spherical_round_trip(p in arb_point()) {
            let s = cart_to_sph(&p);
            prop_assert!((0.0..=PI).contains(&s.theta));
            prop_assert!((0.0..TAU).contains(&s.phi));
            let q = sph_to_cart(&s);
            prop_assert!((q - p).norm() <= 1e-9 * p.norm());
        }
    }

    proptest! {
        #[test]
        fn preprocessing_bounds_and_directions(
            pts in proptest::collection::vec(arb_point(), 0..50),
            r_roi in 1.0..20.0f64,
            r_a in 0.01..0.9f64,
        ) {
            let cloud = PointCloud::new(pts, Vector3::zeros());
            let clamped = clamp_to_roi(&cloud, r_roi);
            prop_assert_eq!(&clamp_to_roi(&clamped, r_roi), &clamped);
            let eroded = erode_by_agent_radius(&clamped, r_a, 0.05);
            for (p, q) in cloud.points.iter().zip(&eroded.points) {
                let n = q.norm();
                prop_assert!(n <= r_roi - r_a + 1e-12);
                prop_assert!(n >= 0.05 - 1e-15);
                prop_assert!((p / p.norm() - q / n).norm() <= 1e-12);
            }
        }
    }
}
