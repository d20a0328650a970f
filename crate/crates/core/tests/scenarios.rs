use std::path::PathBuf;

use tsc_core::sim::{Scenario, World};

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn shipped_files_match_builtins() {
    for name in ["merge", "weave", "loop"] {
        let file = Scenario::load(&dir().join(format!("{name}.toml"))).unwrap();
        assert_eq!(file, Scenario::builtin(name).unwrap(), "{name}");
        World::new(file).unwrap();
    }
}

#[test]
fn load_falls_back_to_builtin_names() {
    assert_eq!(Scenario::load("weave".as_ref()).unwrap(), Scenario::weave());
    assert!(Scenario::load("no/such/scenario.toml".as_ref()).is_err());
}

#[test]
fn rejects_unknown_keys_and_bad_values() {
    let mut s = Scenario::merge().to_toml_string().unwrap();
    s = s.replacen("dt = 0.05", "dt = 0.0", 1);
    assert!(Scenario::from_toml_str(&s).is_err());
    let extra = format!("colour = 3\n{}", Scenario::merge().to_toml_string().unwrap());
    assert!(Scenario::from_toml_str(&extra).is_err());
}
