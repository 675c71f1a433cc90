//! Scenario files shipped with the binary.

use crate::config::{ConfigError, Scenario};

pub struct Builtin {
    pub name: &'static str,
    pub source: &'static str,
}

macro_rules! builtins {
    ($($name:literal),* $(,)?) => {
        pub const BUILTINS: &[Builtin] = &[
            $(Builtin { name: $name, source: include_str!(concat!("../scenarios/", $name, ".json")) }),*
        ];
    };
}

builtins!(
    "planar_bm",
    "ou_2d",
    "example_3_8",
    "remark_2_1_12_i",
    "remark_2_1_12_ii",
    "example_3_2_1_4_ii",
    "corollary_3_1_3_demo",
    "superlinear_blowup",
);

pub fn find(name: &str) -> Option<&'static Builtin> {
    BUILTINS.iter().find(|b| b.name == name)
}

pub fn load(name: &str) -> Result<Scenario, ConfigError> {
    let b = find(name).ok_or_else(|| ConfigError::UnknownBuiltin(name.to_string()))?;
    Scenario::from_json(b.source)
}
