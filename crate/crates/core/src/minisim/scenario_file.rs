//! `#simvar-scenario v1` documents: a version line followed by TOML.

use std::path::Path;

use super::{catalog, ScenarioSpec, SimError};

pub const SCENARIO_MAGIC: &str = "#simvar-scenario v1";

pub fn to_string(spec: &ScenarioSpec) -> Result<String, SimError> {
    let body = toml::to_string(spec).map_err(|e| SimError::Parse(e.to_string()))?;
    Ok(format!("{SCENARIO_MAGIC}\n{body}"))
}

pub fn from_str(text: &str) -> Result<ScenarioSpec, SimError> {
    let first = text.lines().next().unwrap_or_default();
    if first.trim_end() != SCENARIO_MAGIC {
        return Err(SimError::Parse(format!("first line must be `{SCENARIO_MAGIC}`")));
    }
    let spec: ScenarioSpec = toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

pub fn write(spec: &ScenarioSpec, path: &Path) -> Result<(), SimError> {
    std::fs::write(path, to_string(spec)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<ScenarioSpec, SimError> {
    from_str(&std::fs::read_to_string(path)?)
}

/// Resolves a catalog id (`test1`..`test6`) or a path to a scenario file.
pub fn load(id_or_path: &str) -> Result<ScenarioSpec, SimError> {
    if catalog::CATALOG_IDS.contains(&id_or_path) {
        return catalog::scenario_by_id(id_or_path);
    }
    let path = Path::new(id_or_path);
    if path.exists() {
        return read(path);
    }
    Err(SimError::UnknownScenario(id_or_path.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_round_trips_through_text() {
        for spec in catalog::all() {
            let text = to_string(&spec).unwrap();
            assert!(text.starts_with(SCENARIO_MAGIC));
            assert_eq!(from_str(&text).unwrap(), spec);
        }
    }

    #[test]
    fn entropy_seed_survives_full_u64_range() {
        let mut spec = catalog::scenario_by_id("test2").unwrap();
        spec.injectors.entropy_seed = Some(u64::MAX - 3);
        spec.injectors.collision_impulse_jitter = 1e-2;
        let back = from_str(&to_string(&spec).unwrap()).unwrap();
        assert_eq!(back.injectors.entropy_seed, Some(u64::MAX - 3));
    }

    #[test]
    fn rejects_missing_version_line() {
        let spec = catalog::scenario_by_id("test1").unwrap();
        let text = to_string(&spec).unwrap();
        let body = text.split_once('\n').unwrap().1;
        assert!(matches!(from_str(body), Err(SimError::Parse(_))));
    }

    #[test]
    fn rejects_invalid_spec() {
        let mut spec = catalog::scenario_by_id("test1").unwrap();
        spec.log_interval = 0.07;
        let text = to_string(&spec).unwrap();
        assert!(matches!(from_str(&text), Err(SimError::InvalidSpec(_))));
    }

    #[test]
    fn load_resolves_ids_and_paths() {
        assert_eq!(load("test3").unwrap().scenario_id, "test3");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.scn");
        let mut spec = catalog::scenario_by_id("test5").unwrap();
        spec.scenario_id = "custom".into();
        write(&spec, &path).unwrap();
        assert_eq!(load(path.to_str().unwrap()).unwrap(), spec);
        assert!(matches!(load("nope"), Err(SimError::UnknownScenario(_))));
    }
}
