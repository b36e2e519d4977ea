//! A small 2D driving simulator used as the reference subject of audits.
//!
//! Vehicles are point masses following densified waypoint polylines under
//! PID speed and cross-track control; pedestrians do the same along A*
//! routes over a grid navmesh. The loop is fixed-step and single-threaded
//! and reads no clocks, so with every injector off a run is a pure function
//! of `(ScenarioSpec, seed)`. The injectors re-introduce specific kinds of
//! non-determinism on demand.

pub mod catalog;
pub mod nav;
pub mod physics;
pub mod pid;
pub mod scenario_file;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{valid_identifier, Event, Position, RunTrace, TraceSample};
use nav::{Cell, FrontierMode, NavGrid};
use physics::{resolve_collision, Body, Vec2};
use pid::{PidGains, PidState};

pub const DEFAULT_DT_PHYSICS: f64 = 0.05;
pub const DEFAULT_LOG_INTERVAL: f64 = 0.1;
pub const WAYPOINT_SPACING: f64 = 0.1;
pub const DEFAULT_RESTITUTION: f64 = 0.5;
pub const VEHICLE_RADIUS: f64 = 1.0;
pub const PEDESTRIAN_RADIUS: f64 = 0.3;

const VEHICLE_MASS: f64 = 1500.0;
const PEDESTRIAN_MASS: f64 = 80.0;
const VEHICLE_ACCEL_LIMIT: f64 = 6.0;
const PEDESTRIAN_ACCEL_LIMIT: f64 = 3.0;
/// Deceleration used to ramp the target speed down toward the final waypoint.
const BRAKE_DECEL: f64 = 2.0;
/// Rolling friction on a vehicle that lost control after an impact.
const COAST_FRICTION: f64 = 1.5;
const DRAG: f64 = 0.01;
const ARRIVAL_RADIUS: f64 = 0.25;
/// Avoidance slows to a stop at this clearance beyond the two radii.
const AVOIDANCE_STANDOFF: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("{what} cell {cell:?} is blocked or outside the navmesh")]
    BlockedCell { what: &'static str, cell: Cell },
    #[error("position {0:?} is outside the navmesh")]
    OffGrid(Position),
    #[error("goal {goal:?} is unreachable from {start:?}")]
    Unreachable { start: Cell, goal: Cell },
    #[error("scenario file: {0}")]
    Parse(String),
    #[error("unknown catalog scenario `{0}`")]
    UnknownScenario(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorKind {
    Vehicle,
    Pedestrian,
}

impl ActorKind {
    fn mass(self) -> f64 {
        match self {
            ActorKind::Vehicle => VEHICLE_MASS,
            ActorKind::Pedestrian => PEDESTRIAN_MASS,
        }
    }

    fn accel_limit(self) -> f64 {
        match self {
            ActorKind::Vehicle => VEHICLE_ACCEL_LIMIT,
            ActorKind::Pedestrian => PEDESTRIAN_ACCEL_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorSpec {
    pub actor_id: String,
    pub kind: ActorKind,
    pub start: Position,
    /// Polyline control points after `start`; densified at load time.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub waypoints: Vec<Position>,
    /// Navmesh goal; the route is planned with A*. Exclusive with `waypoints`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Position>,
    pub cruise_speed: f64,
    pub radius: f64,
    /// Slow down for actors ahead closer than this many meters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avoidance_range: Option<f64>,
}

/// Drops one physics sub-step in the tick containing `at_time`, in a
/// fraction `probability` of runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RareSubstepDrop {
    pub probability: f64,
    pub at_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectorConfig {
    /// Permute the order in which acceleration terms are summed every step.
    pub sum_order_shuffle: bool,
    /// Randomly drop or duplicate one sub-step in a logging tick.
    pub timestep_jitter: bool,
    pub timestep_jitter_probability: f64,
    /// When set, timestep jitter fires only while the modeled contention
    /// (see [`InjectorConfig::contention`]) exceeds this percentage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter_load_threshold: Option<f64>,
    pub astar_random_tiebreak: bool,
    /// Amplitude in m/s of the uniform perturbation added after an impulse.
    pub collision_impulse_jitter: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rare_substep_drop: Option<RareSubstepDrop>,
    /// Absent: injectors draw from OS entropy, i.e. are not reproducible.
    #[serde(with = "crate::u64_string::opt", skip_serializing_if = "Option::is_none")]
    pub entropy_seed: Option<u64>,
    /// Environment the run executes in, filled in by the orchestrator.
    pub ambient_load_percent: f64,
    pub ambient_nice: i32,
}

impl InjectorConfig {
    /// Modeled CPU contention seen by the simulator: the ambient load scaled
    /// by scheduling priority, from 0 at nice -20 to 1.95x at nice +19.
    pub fn contention(&self) -> f64 {
        self.ambient_load_percent * (1.0 + self.ambient_nice as f64 / 20.0)
    }

    pub fn timestep_jitter_active(&self) -> bool {
        self.timestep_jitter
            && self.timestep_jitter_probability > 0.0
            && self.jitter_load_threshold.is_none_or(|th| self.contention() > th)
    }

    pub fn any_active(&self) -> bool {
        self.sum_order_shuffle
            || self.timestep_jitter_active()
            || self.astar_random_tiebreak
            || self.collision_impulse_jitter > 0.0
            || self.rare_substep_drop.is_some_and(|d| d.probability > 0.0)
    }

    fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.timestep_jitter_probability) {
            return Err("timestep_jitter_probability must be in [0, 1]".into());
        }
        if !(self.collision_impulse_jitter >= 0.0 && self.collision_impulse_jitter.is_finite()) {
            return Err("collision_impulse_jitter must be a finite amplitude >= 0".into());
        }
        if let Some(d) = self.rare_substep_drop {
            if !(0.0..=1.0).contains(&d.probability) || !(d.at_time >= 0.0) {
                return Err("rare_substep_drop needs probability in [0, 1] and at_time >= 0".into());
            }
        }
        if !(-20..=19).contains(&self.ambient_nice) {
            return Err("ambient_nice must be within -20..=19".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario_id: String,
    /// Width and height in meters; the map spans `[0, w] x [0, h]`.
    pub map_bounds: [f64; 2],
    pub dt_physics: f64,
    pub log_interval: f64,
    pub max_sim_time: f64,
    #[serde(default)]
    pub stop_on_collision: bool,
    #[serde(default = "default_restitution")]
    pub restitution: f64,
    /// Seed-driven fractional spread of actor cruise speeds. Zero makes the
    /// seed irrelevant to the physics.
    #[serde(default)]
    pub speed_variation: f64,
    #[serde(default)]
    pub injectors: InjectorConfig,
    pub navmesh: NavGrid,
    pub actors: Vec<ActorSpec>,
}

fn default_restitution() -> f64 {
    DEFAULT_RESTITUTION
}

fn is_integer_multiple(big: f64, small: f64) -> bool {
    let r = big / small;
    r.round() >= 1.0 && (r - r.round()).abs() <= 1e-9
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidSpec(m));
        if !valid_identifier(&self.scenario_id) {
            return bad(format!("scenario_id `{}` is not a valid identifier", self.scenario_id));
        }
        if !(self.dt_physics > 0.0 && self.dt_physics.is_finite()) {
            return bad("dt_physics must be positive".into());
        }
        if !is_integer_multiple(self.log_interval, self.dt_physics) {
            return bad("log_interval must be a positive integer multiple of dt_physics".into());
        }
        if !is_integer_multiple(self.max_sim_time, self.log_interval) {
            return bad("max_sim_time must be a positive integer multiple of log_interval".into());
        }
        let [w, h] = self.map_bounds;
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return bad("map bounds must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.restitution) {
            return bad("restitution must be in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.speed_variation) {
            return bad("speed_variation must be in [0, 1)".into());
        }
        let g = &self.navmesh;
        if !(g.cell_size > 0.0) || g.cols == 0 || g.rows == 0 {
            return bad("navmesh needs a positive cell size and at least one cell".into());
        }
        self.injectors.validate().map_err(SimError::InvalidSpec)?;
        let inside = |p: &Position| p.is_finite() && p.x >= 0.0 && p.x <= w && p.y >= 0.0 && p.y <= h;
        let mut ids = BTreeSet::new();
        if self.actors.is_empty() {
            return bad("scenario has no actors".into());
        }
        for a in &self.actors {
            if !valid_identifier(&a.actor_id) || !ids.insert(a.actor_id.as_str()) {
                return bad(format!("actor id `{}` is invalid or repeated", a.actor_id));
            }
            if !(a.cruise_speed > 0.0 && a.cruise_speed.is_finite()) {
                return bad(format!("{}: cruise_speed must be positive", a.actor_id));
            }
            if !(a.radius > 0.0 && a.radius.is_finite()) {
                return bad(format!("{}: radius must be positive", a.actor_id));
            }
            if a.avoidance_range.is_some_and(|r| !(r > 0.0)) {
                return bad(format!("{}: avoidance_range must be positive", a.actor_id));
            }
            if a.goal.is_some() && !a.waypoints.is_empty() {
                return bad(format!("{}: give either waypoints or a goal, not both", a.actor_id));
            }
            let points = std::iter::once(&a.start).chain(&a.waypoints).chain(&a.goal);
            for p in points {
                if !inside(p) {
                    return bad(format!("{}: point {p:?} lies outside the map", a.actor_id));
                }
            }
        }
        Ok(())
    }

    pub fn max_steps(&self) -> u64 {
        (self.max_sim_time / self.dt_physics).round() as u64
    }
}

/// Resamples a polyline so consecutive points are at most `spacing` apart.
/// Vertices are kept; zero-length segments are skipped.
pub fn densify(points: &[Position], spacing: f64) -> Vec<Position> {
    let mut out = Vec::new();
    let Some(first) = points.first() else { return out };
    out.push(*first);
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = a.distance(&b);
        if len == 0.0 {
            continue;
        }
        let n = (len / spacing - 1e-9).ceil().max(1.0) as usize;
        for i in 1..=n {
            let f = i as f64 / n as f64;
            out.push(Position::new(
                a.x + (b.x - a.x) * f,
                a.y + (b.y - a.y) * f,
                a.z + (b.z - a.z) * f,
            ));
        }
    }
    out
}

/// Snaps `tick * interval` to the nearest nanosecond so logged times print
/// as short decimals.
fn grid_time(tick: u64, interval: f64) -> f64 {
    ((tick as f64 * interval) * 1e9).round() / 1e9
}

fn mix_seed(base: u64, stream: u64) -> u64 {
    // SplitMix64 finalizer.
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for run `index` from a campaign-level seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix_seed(base, index.wrapping_add(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Active,
    Arrived,
    /// A vehicle that lost control in a collision; it coasts to a stop.
    Disabled,
    Destroyed,
}

struct Actor {
    body: Body,
    path: Vec<Vec2>,
    cum: Vec<f64>,
    cursor: usize,
    lateral: PidState,
    speed: PidState,
    cruise: f64,
    avoidance: Option<f64>,
    status: Status,
    pending: Event,
    logged_out: bool,
}

impl Actor {
    fn new(spec: &ActorSpec, route: Vec<Position>, cruise: f64) -> Self {
        let path: Vec<Vec2> = route.iter().map(|p| Vec2::new(p.x, p.y)).collect();
        let mut cum = Vec::with_capacity(path.len());
        let mut acc = 0.0;
        for (i, p) in path.iter().enumerate() {
            if i > 0 {
                acc += (*p - path[i - 1]).norm();
            }
            cum.push(acc);
        }
        let start = Vec2::new(spec.start.x, spec.start.y);
        let (vel, status) = match path.len() {
            0 | 1 => (Vec2::ZERO, Status::Arrived),
            _ => ((path[1] - path[0]).normalized().unwrap_or(Vec2::ZERO) * cruise, Status::Active),
        };
        Actor {
            body: Body {
                id: spec.actor_id.clone(),
                kind: spec.kind,
                pos: start,
                vel,
                mass: spec.kind.mass(),
                radius: spec.radius,
            },
            path,
            cum,
            cursor: 0,
            lateral: PidState::new(PidGains::LATERAL),
            speed: PidState::new(PidGains::SPEED),
            cruise,
            avoidance: spec.avoidance_range,
            status,
            pending: Event::None,
            logged_out: false,
        }
    }

    fn last(&self) -> usize {
        self.path.len() - 1
    }

    fn advance_cursor(&mut self) {
        let pos = self.body.pos;
        while self.cursor < self.last()
            && (self.path[self.cursor + 1] - pos).norm() <= (self.path[self.cursor] - pos).norm()
        {
            self.cursor += 1;
        }
    }

    fn record(&mut self, event: Event) {
        if self.pending == Event::None || event == Event::Destroyed {
            self.pending = event;
        }
    }

    fn settled(&self) -> bool {
        match self.status {
            Status::Active => false,
            Status::Disabled => self.body.vel == Vec2::ZERO,
            Status::Arrived | Status::Destroyed => true,
        }
    }
}

struct Rngs {
    shuffle: ChaCha8Rng,
    tick: ChaCha8Rng,
    collision: ChaCha8Rng,
}

struct World<'a> {
    spec: &'a ScenarioSpec,
    actors: Vec<Actor>,
    contacts: BTreeSet<(usize, usize)>,
    rngs: Option<Rngs>,
    collided: bool,
}

impl World<'_> {
    /// Cruise target scaled down by obstacles ahead inside the avoidance range.
    fn avoidance_factor(&self, i: usize, heading: Vec2) -> f64 {
        let me = &self.actors[i];
        let Some(range) = me.avoidance else { return 1.0 };
        let mut factor: f64 = 1.0;
        for (j, other) in self.actors.iter().enumerate() {
            if j == i || other.status == Status::Destroyed {
                continue;
            }
            let offset = other.body.pos - me.body.pos;
            if offset.dot(heading) <= 0.0 {
                continue;
            }
            let d = offset.norm();
            let stop_at = me.body.radius + other.body.radius + AVOIDANCE_STANDOFF;
            if d < range {
                let f = ((d - stop_at) / (range - stop_at).max(1e-9)).clamp(0.0, 1.0);
                factor = factor.min(f);
            }
        }
        factor
    }

    fn control(&mut self, i: usize, dt: f64) -> Vec2 {
        self.actors[i].advance_cursor();
        let a = &self.actors[i];
        let seg = a.cursor.min(a.last() - 1);
        let origin = a.path[seg];
        let tangent = (a.path[seg + 1] - origin).normalized().unwrap_or(Vec2::new(1.0, 0.0));
        let normal = tangent.perp();
        let rel = a.body.pos - origin;
        let lateral_error = rel.dot(normal);
        let remaining = (a.cum[a.last()] - a.cum[seg] - rel.dot(tangent)).max(0.0);
        let along = a.body.vel.dot(tangent);
        let vel = a.body.vel;
        let factor = self.avoidance_factor(i, tangent);

        let a = &mut self.actors[i];
        let target = (a.cruise * factor).min((2.0 * BRAKE_DECEL * remaining).sqrt());
        let a_long = a.speed.step(target - along, dt);
        let a_lat = -a.lateral.step(lateral_error, dt);
        let limit = a.body.kind.accel_limit();

        let mut terms = [tangent * a_long, normal * a_lat, vel * -DRAG];
        if let Some(rngs) = self.rngs.as_mut().filter(|_| self.spec.injectors.sum_order_shuffle) {
            terms.shuffle(&mut rngs.shuffle);
        }
        let mut accel = Vec2::ZERO;
        for t in terms {
            accel += t;
        }
        let n = accel.norm();
        if n > limit {
            accel = accel * (limit / n);
        }
        accel
    }

    fn step(&mut self) -> bool {
        let dt = self.spec.dt_physics;
        let mut accels = vec![Vec2::ZERO; self.actors.len()];
        for (i, accel) in accels.iter_mut().enumerate() {
            if self.actors[i].status == Status::Active {
                *accel = self.control(i, dt);
            }
        }
        for (actor, accel) in self.actors.iter_mut().zip(accels) {
            match actor.status {
                Status::Active => {
                    actor.body.vel += accel * dt;
                    actor.body.pos += actor.body.vel * dt;
                    actor.advance_cursor();
                    let end = actor.path[actor.last()];
                    if actor.cursor == actor.last() && (actor.body.pos - end).norm() < ARRIVAL_RADIUS {
                        actor.status = Status::Arrived;
                        actor.body.vel = Vec2::ZERO;
                    }
                }
                Status::Disabled => {
                    let speed = actor.body.vel.norm();
                    if speed <= COAST_FRICTION * dt {
                        actor.body.vel = Vec2::ZERO;
                    } else {
                        actor.body.vel = actor.body.vel * (1.0 - COAST_FRICTION * dt / speed);
                    }
                    actor.body.pos += actor.body.vel * dt;
                }
                Status::Arrived | Status::Destroyed => {}
            }
        }
        self.resolve_contacts()
    }

    fn resolve_contacts(&mut self) -> bool {
        let jitter = self.spec.injectors.collision_impulse_jitter;
        let mut new_contact = false;
        for i in 0..self.actors.len() {
            for j in i + 1..self.actors.len() {
                if self.actors[i].status == Status::Destroyed || self.actors[j].status == Status::Destroyed {
                    continue;
                }
                if !self.actors[i].body.overlaps(&self.actors[j].body) {
                    self.contacts.remove(&(i, j));
                    continue;
                }
                let fresh = self.contacts.insert((i, j));
                let (left, right) = self.actors.split_at_mut(j);
                let (a, b) = (&mut left[i], &mut right[0]);
                let rng = self.rngs.as_mut().map(|r| &mut r.collision);
                let out = resolve_collision(&mut a.body, &mut b.body, self.spec.restitution, jitter, rng);
                if fresh {
                    new_contact = true;
                    for (actor, event) in [(a, out.event_a), (b, out.event_b)] {
                        actor.status = match (&event, actor.body.kind) {
                            (Event::Destroyed, _) => {
                                actor.body.vel = Vec2::ZERO;
                                Status::Destroyed
                            }
                            (_, ActorKind::Vehicle) => Status::Disabled,
                            (_, ActorKind::Pedestrian) => Status::Active,
                        };
                        actor.record(event);
                    }
                }
            }
        }
        self.collided |= new_contact;
        new_contact
    }

    fn log(&mut self, t: f64, out: &mut Vec<TraceSample>) {
        for actor in &mut self.actors {
            if actor.logged_out {
                continue;
            }
            let event = std::mem::replace(&mut actor.pending, Event::None);
            if event == Event::Destroyed {
                actor.logged_out = true;
            }
            out.push(TraceSample {
                t,
                actor_id: actor.body.id.clone(),
                position: Position::planar(actor.body.pos.x, actor.body.pos.y),
                event,
            });
        }
    }
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_TICK: u64 = 2;
const STREAM_ASTAR: u64 = 3;
const STREAM_COLLISION: u64 = 4;
const STREAM_RARE: u64 = 5;

/// Runs one simulation.
pub fn simulate(spec: &ScenarioSpec, seed: u64) -> Result<RunTrace, SimError> {
    spec.validate()?;
    let inj = &spec.injectors;
    let mut metadata = BTreeMap::new();

    let entropy = if inj.any_active() {
        let (base, source) = match inj.entropy_seed {
            Some(s) => (s, "seeded"),
            None => (rand::random::<u64>(), "os"),
        };
        metadata.insert("entropy_source".to_string(), source.to_string());
        metadata.insert("entropy_seed".to_string(), base.to_string());
        Some(base)
    } else {
        None
    };
    let stream = |tag: u64| ChaCha8Rng::seed_from_u64(mix_seed(entropy.unwrap_or(0), tag));

    let mut scenario_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut astar_rng = stream(STREAM_ASTAR);
    let mode = if inj.astar_random_tiebreak {
        FrontierMode::RandomTiebreak
    } else {
        FrontierMode::StableInsertionOrder
    };

    let mut specs: Vec<&ActorSpec> = spec.actors.iter().collect();
    specs.sort_by(|a, b| a.actor_id.cmp(&b.actor_id));
    let mut actors = Vec::with_capacity(specs.len());
    for a in specs {
        let route = match a.goal {
            Some(goal) => nav::plan_path(&spec.navmesh, a.start, goal, mode, Some(&mut astar_rng), WAYPOINT_SPACING)?,
            None => {
                let mut control = vec![a.start];
                control.extend(a.waypoints.iter().copied());
                densify(&control, WAYPOINT_SPACING)
            }
        };
        let spread = if spec.speed_variation > 0.0 {
            1.0 + scenario_rng.gen_range(-spec.speed_variation..=spec.speed_variation)
        } else {
            1.0
        };
        actors.push(Actor::new(a, route, a.cruise_speed * spread));
    }

    let mut world = World {
        spec,
        actors,
        contacts: BTreeSet::new(),
        rngs: entropy.map(|_| Rngs {
            shuffle: stream(STREAM_SHUFFLE),
            tick: stream(STREAM_TICK),
            collision: stream(STREAM_COLLISION),
        }),
        collided: false,
    };

    let substeps = (spec.log_interval / spec.dt_physics).round() as u64;
    let ticks = (spec.max_sim_time / spec.log_interval).round() as u64;
    let jitter_on = inj.timestep_jitter_active();
    let dropped_tick = inj.rare_substep_drop.and_then(|d| {
        let mut rng = stream(STREAM_RARE);
        rng.gen_bool(d.probability)
            .then(|| ((d.at_time / spec.log_interval).floor() as u64) + 1)
    });

    let mut samples = Vec::new();
    world.log(0.0, &mut samples);
    let mut physics_steps: u64 = 0;
    let mut termination = "max_time";
    for tick in 1..=ticks {
        let mut n = substeps;
        if jitter_on {
            let rng = &mut world.rngs.as_mut().expect("rngs exist when injectors are on").tick;
            if rng.gen_bool(inj.timestep_jitter_probability) {
                n = if rng.gen_bool(0.5) { n - 1 } else { n + 1 };
            }
        }
        if dropped_tick == Some(tick) {
            n = n.saturating_sub(1);
        }
        let mut stop = false;
        for _ in 0..n {
            physics_steps += 1;
            if world.step() && spec.stop_on_collision {
                stop = true;
                break;
            }
        }
        world.log(grid_time(tick, spec.log_interval), &mut samples);
        if stop {
            termination = "collision";
            break;
        }
        if world.actors.iter().all(Actor::settled) {
            termination = "settled";
            break;
        }
    }

    metadata.insert("physics_steps".to_string(), physics_steps.to_string());
    metadata.insert("termination".to_string(), termination.to_string());
    metadata.insert("collided".to_string(), world.collided.to_string());

    Ok(RunTrace {
        run_id: format!("{}-{}", spec.scenario_id, seed),
        scenario_id: spec.scenario_id.clone(),
        seed,
        dt_physics: spec.dt_physics,
        log_interval: spec.log_interval,
        samples,
        metadata,
    })
}

#[cfg(test)]
mod tests;
