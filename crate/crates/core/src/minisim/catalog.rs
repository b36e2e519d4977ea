//! Built-in scenarios at a T-junction on a 50 m x 30 m map.
//!
//! The main road runs east-west with lanes at y = 13 (eastbound) and
//! y = 17 (westbound); a side road joins from the south along x = 30.
//!
//! | id    | actors                       | collision              |
//! |-------|------------------------------|------------------------|
//! | test1 | two vehicles                 | none                   |
//! | test2 | two vehicles                 | vehicle and vehicle    |
//! | test3 | two vehicles, one pedestrian | none                   |
//! | test4 | two vehicles, one pedestrian | vehicle and pedestrian |
//! | test5 | two pedestrians              | none                   |
//! | test6 | two pedestrians              | pedestrian and pedestrian |

use super::nav::NavGrid;
use super::{
    ActorKind, ActorSpec, InjectorConfig, ScenarioSpec, SimError, DEFAULT_DT_PHYSICS, DEFAULT_LOG_INTERVAL,
    DEFAULT_RESTITUTION, PEDESTRIAN_RADIUS, VEHICLE_RADIUS,
};
use crate::trace::Position;

pub const CATALOG_IDS: [&str; 6] = ["test1", "test2", "test3", "test4", "test5", "test6"];

const MAP: [f64; 2] = [50.0, 30.0];
const MAX_SIM_TIME: f64 = 20.0;
const WALK_SPEED: f64 = 1.4;

/// Human-readable description of a catalog entry: (actors, collision type).
pub fn describe(id: &str) -> Option<(&'static str, &'static str)> {
    Some(match id {
        "test1" => ("two vehicles", "none"),
        "test2" => ("two vehicles", "vehicle-vehicle"),
        "test3" => ("two vehicles, pedestrian", "none"),
        "test4" => ("two vehicles, pedestrian", "vehicle-pedestrian"),
        "test5" => ("two pedestrians", "none"),
        "test6" => ("two pedestrians", "pedestrian-pedestrian"),
        _ => return None,
    })
}

fn navmesh() -> NavGrid {
    let mut grid = NavGrid::open(1.0, 50, 30);
    // Buildings on the four corners of the junction area.
    grid.block_rect(4.0, 1.0, 10.0, 8.0);
    grid.block_rect(38.0, 1.0, 46.0, 8.0);
    grid.block_rect(4.0, 22.0, 12.0, 28.0);
    grid.block_rect(36.0, 22.0, 46.0, 28.0);
    grid
}

fn p(x: f64, y: f64) -> Position {
    Position::planar(x, y)
}

fn vehicle(id: &str, start: Position, waypoints: Vec<Position>, speed: f64) -> ActorSpec {
    ActorSpec {
        actor_id: id.into(),
        kind: ActorKind::Vehicle,
        start,
        waypoints,
        goal: None,
        cruise_speed: speed,
        radius: VEHICLE_RADIUS,
        avoidance_range: None,
    }
}

fn pedestrian(id: &str, start: Position, goal: Position) -> ActorSpec {
    ActorSpec {
        actor_id: id.into(),
        kind: ActorKind::Pedestrian,
        start,
        waypoints: Vec::new(),
        goal: Some(goal),
        cruise_speed: WALK_SPEED,
        radius: PEDESTRIAN_RADIUS,
        avoidance_range: None,
    }
}

fn scenario(id: &str, actors: Vec<ActorSpec>) -> ScenarioSpec {
    ScenarioSpec {
        scenario_id: id.into(),
        map_bounds: MAP,
        dt_physics: DEFAULT_DT_PHYSICS,
        log_interval: DEFAULT_LOG_INTERVAL,
        max_sim_time: MAX_SIM_TIME,
        stop_on_collision: false,
        restitution: DEFAULT_RESTITUTION,
        speed_variation: 0.0,
        injectors: InjectorConfig::default(),
        navmesh: navmesh(),
        actors,
    }
}

/// Eastbound through-traffic on the main road.
fn main_road_car(id: &str, x0: f64, speed: f64) -> ActorSpec {
    vehicle(id, p(x0, 13.0), vec![p(48.0, 13.0)], speed)
}

/// A car coming up the side road and turning left (west) onto the main road.
fn side_road_car(id: &str, speed: f64) -> ActorSpec {
    vehicle(id, p(30.0, 1.0), vec![p(30.0, 17.0), p(2.0, 17.0)], speed)
}

/// Returns the catalog scenario with the given id.
pub fn scenario_by_id(id: &str) -> Result<ScenarioSpec, SimError> {
    let spec = match id {
        "test1" => scenario(id, vec![main_road_car("v1", 2.0, 10.0), side_road_car("v2", 3.0)]),
        "test2" => scenario(id, vec![main_road_car("v1", 2.0, 10.0), side_road_car("v2", 4.3)]),
        "test3" => scenario(
            id,
            vec![
                main_road_car("v1", 2.0, 10.0),
                side_road_car("v2", 3.0),
                pedestrian("p3", p(14.5, 5.5), p(18.5, 21.5)),
            ],
        ),
        "test4" => {
            let mut bystander = vehicle("v1", p(48.0, 17.0), vec![p(2.0, 17.0)], 2.0);
            bystander.avoidance_range = Some(6.0);
            scenario(
                id,
                vec![
                    bystander,
                    main_road_car("v2", 3.0, 5.0),
                    pedestrian("p3", p(32.5, 3.5), p(32.5, 21.5)),
                ],
            )
        }
        "test5" => scenario(
            id,
            vec![pedestrian("p1", p(14.5, 10.5), p(24.5, 20.5)), pedestrian("p2", p(28.5, 10.5), p(34.5, 20.5))],
        ),
        "test6" => scenario(
            id,
            vec![pedestrian("p1", p(20.5, 9.5), p(30.5, 19.5)), pedestrian("p2", p(30.5, 9.5), p(21.5, 19.5))],
        ),
        other => return Err(SimError::UnknownScenario(other.to_string())),
    };
    Ok(spec)
}

pub fn all() -> Vec<ScenarioSpec> {
    CATALOG_IDS
        .iter()
        .map(|id| scenario_by_id(id).expect("catalog ids are valid"))
        .collect()
}
