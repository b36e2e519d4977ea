//! Planar point-mass bodies and collision response.

use std::ops::{Add, AddAssign, Mul, Sub, SubAssign};

use rand::Rng;

use super::ActorKind;
use crate::trace::Event;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        (n > 0.0).then(|| self * (1.0 / n))
    }

    /// Left-hand perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        *self = *self + o;
    }
}

impl SubAssign for Vec2 {
    fn sub_assign(&mut self, o: Vec2) {
        *self = *self - o;
    }
}

/// The part of an actor's state that collision response reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    pub id: String,
    pub kind: ActorKind,
    pub pos: Vec2,
    pub vel: Vec2,
    pub mass: f64,
    pub radius: f64,
}

impl Body {
    pub fn overlaps(&self, other: &Body) -> bool {
        (other.pos - self.pos).norm() < self.radius + other.radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionOutcome {
    pub event_a: Event,
    pub event_b: Event,
    /// Whether an impulse was exchanged (bodies were approaching).
    pub impulse_applied: bool,
}

/// Exchanges an impulse along the center line when the bodies approach.
///
/// A pedestrian struck by a vehicle is reported as `destroyed`; every other
/// pairing reports `collision:<other>` on both sides. With `jitter > 0`, each
/// velocity component of a surviving body gets an extra uniform perturbation
/// in `[-jitter, jitter]` after the impulse.
pub fn resolve_collision<R: Rng>(
    a: &mut Body,
    b: &mut Body,
    restitution: f64,
    jitter: f64,
    rng: Option<&mut R>,
) -> CollisionOutcome {
    let normal = (b.pos - a.pos).normalized().unwrap_or(Vec2::new(1.0, 0.0));
    let approach = (b.vel - a.vel).dot(normal);
    let impulse_applied = approach < 0.0;
    if impulse_applied {
        let j = -(1.0 + restitution) * approach / (1.0 / a.mass + 1.0 / b.mass);
        a.vel -= normal * (j / a.mass);
        b.vel += normal * (j / b.mass);
    }

    let hit = |victim: &Body, striker: &Body| {
        victim.kind == ActorKind::Pedestrian && striker.kind == ActorKind::Vehicle
    };
    let event_a = if hit(a, b) { Event::Destroyed } else { Event::Collision(b.id.clone()) };
    let event_b = if hit(b, a) { Event::Destroyed } else { Event::Collision(a.id.clone()) };

    if jitter > 0.0 && impulse_applied {
        let rng = rng.expect("collision jitter needs an rng");
        for (body, event) in [(&mut *a, &event_a), (&mut *b, &event_b)] {
            if *event != Event::Destroyed {
                body.vel.x += rng.gen_range(-jitter..=jitter);
                body.vel.y += rng.gen_range(-jitter..=jitter);
            }
        }
    }
    CollisionOutcome { event_a, event_b, impulse_applied }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn body(id: &str, kind: ActorKind, x: f64, vx: f64, mass: f64) -> Body {
        Body { id: id.into(), kind, pos: Vec2::new(x, 0.0), vel: Vec2::new(vx, 0.0), mass, radius: 1.0 }
    }

    #[test]
    fn elastic_head_on_exchanges_velocities() {
        let mut a = body("a", ActorKind::Vehicle, 0.0, 3.0, 1500.0);
        let mut b = body("b", ActorKind::Vehicle, 1.5, -2.0, 1500.0);
        let out = resolve_collision::<ChaCha8Rng>(&mut a, &mut b, 1.0, 0.0, None);
        assert!(out.impulse_applied);
        assert_eq!(a.vel, Vec2::new(-2.0, 0.0));
        assert_eq!(b.vel, Vec2::new(3.0, 0.0));
        assert_eq!(out.event_a, Event::Collision("b".into()));
        assert_eq!(out.event_b, Event::Collision("a".into()));
    }

    #[test]
    fn separating_bodies_get_no_impulse() {
        let mut a = body("a", ActorKind::Vehicle, 0.0, -1.0, 1.0);
        let mut b = body("b", ActorKind::Vehicle, 1.5, 1.0, 1.0);
        let out = resolve_collision::<ChaCha8Rng>(&mut a, &mut b, 0.5, 0.0, None);
        assert!(!out.impulse_applied);
        assert_eq!(a.vel.x, -1.0);
    }

    #[test]
    fn zero_jitter_is_deterministic() {
        let run = || {
            let mut a = body("a", ActorKind::Vehicle, 0.0, 3.1, 1500.0);
            let mut b = body("b", ActorKind::Vehicle, 1.2, -0.7, 1200.0);
            resolve_collision::<ChaCha8Rng>(&mut a, &mut b, 0.5, 0.0, None);
            (a, b)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pedestrian_hit_by_vehicle_is_destroyed() {
        let mut car = body("v2", ActorKind::Vehicle, 0.0, 5.0, 1500.0);
        let mut ped = body("p3", ActorKind::Pedestrian, 1.2, 0.0, 80.0);
        let out = resolve_collision::<ChaCha8Rng>(&mut car, &mut ped, 0.5, 0.0, None);
        assert_eq!(out.event_a, Event::Collision("p3".into()));
        assert_eq!(out.event_b, Event::Destroyed);
    }

    #[test]
    fn jitter_is_bounded_and_spares_destroyed_bodies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut car = body("v", ActorKind::Vehicle, 0.0, 5.0, 1500.0);
            let mut ped = body("p", ActorKind::Pedestrian, 1.2, 0.0, 80.0);
            let mut reference = (car.clone(), ped.clone());
            resolve_collision::<ChaCha8Rng>(&mut reference.0, &mut reference.1, 0.5, 0.0, None);
            resolve_collision(&mut car, &mut ped, 0.5, 0.01, Some(&mut rng));
            assert!((car.vel.x - reference.0.vel.x).abs() <= 0.01);
            assert!((car.vel.y - reference.0.vel.y).abs() <= 0.01);
            assert_eq!(ped.vel, reference.1.vel);
        }
    }
}
