//! Config resolution: preset, then the TOML file, then `--set` pairs, then
//! dedicated flags. Later layers win.

use std::fs;
use std::path::Path;

use s3e_core::config::TrainConfig;
use s3e_core::{Error, Result};
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Reference widths and the 150 + 150 epoch schedule.
    #[default]
    Full,
    /// Small widths for 32×32 CPU runs.
    Desk,
}

impl Preset {
    pub fn config(self) -> TrainConfig {
        match self {
            Preset::Full => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
        }
    }
}

fn table_of(config: &TrainConfig) -> Table {
    toml::from_str(&config.to_toml()).expect("serialized config parses")
}

/// `value` as TOML when it parses, otherwise as a bare string.
fn parse_value(value: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

pub struct Layers<'a> {
    pub base: TrainConfig,
    pub file: Option<&'a Path>,
    pub sets: &'a [String],
    pub flags: Vec<(&'static str, Value)>,
}

pub fn resolve(layers: Layers<'_>) -> Result<TrainConfig> {
    let mut table = table_of(&layers.base);
    if let Some(path) = layers.file {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let file: Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        table.extend(file);
    }
    for pair in layers.sets {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {pair:?}")))?;
        table.insert(key.trim().to_string(), parse_value(value.trim()));
    }
    for (key, value) in layers.flags {
        table.insert(key.to_string(), value);
    }
    TrainConfig::from_toml(&toml::to_string(&table).expect("table serializes"))
}

/// Fields that fix parameter shapes or initialization.
pub fn architecture_differs(a: &TrainConfig, b: &TrainConfig) -> Option<&'static str> {
    let fields: [(&str, bool); 17] = [
        ("image_size", a.image_size != b.image_size),
        ("backbone_channels", a.backbone_channels != b.backbone_channels),
        ("backbone_layers", a.backbone_layers != b.backbone_layers),
        ("node_channels", a.node_channels != b.node_channels),
        ("coupling_channels", a.coupling_channels != b.coupling_channels),
        ("generator_channels", a.generator_channels != b.generator_channels),
        ("residual_blocks", a.residual_blocks != b.residual_blocks),
        ("fusion", a.fusion != b.fusion),
        ("critic_channels", a.critic_channels != b.critic_channels),
        ("critic_layers", a.critic_layers != b.critic_layers),
        ("critic_slope", a.critic_slope != b.critic_slope),
        ("perceptual_width", a.perceptual_width != b.perceptual_width),
        ("embed", a.embed != b.embed),
        ("hidden", a.hidden != b.hidden),
        ("attention", a.attention != b.attention),
        ("attend_source", a.attend_source != b.attend_source),
        ("perceptual_weights", a.perceptual_weights != b.perceptual_weights),
    ];
    fields.into_iter().find(|(_, differs)| *differs).map(|(name, _)| name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_layers_win() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        fs::write(&file, "lr = 0.5\nbatch_size = 3\ncritic_steps = 2\n").unwrap();
        let sets = vec!["batch_size = 7".to_string(), "out_dir=runs/x".to_string()];
        let c = resolve(Layers {
            base: TrainConfig::desk(),
            file: Some(&file),
            sets: &sets,
            flags: vec![("critic_steps", Value::Integer(4))],
        })
        .unwrap();
        assert_eq!(c.lr, 0.5);
        assert_eq!(c.batch_size, 7);
        assert_eq!(c.critic_steps, 4);
        assert_eq!(c.out_dir.as_deref(), Some(Path::new("runs/x")));
        assert_eq!(c.image_size, 32);
    }

    #[test]
    fn bad_keys_and_pairs_are_config_errors() {
        for sets in [
            vec!["nonsense = 1".to_string()],
            vec!["lr".to_string()],
            vec!["lr = -1.0".to_string()],
        ] {
            let r = resolve(Layers {
                base: TrainConfig::default(),
                file: None,
                sets: &sets,
                flags: Vec::new(),
            });
            assert!(matches!(r, Err(Error::Config(_))), "{sets:?}");
        }
    }

    #[test]
    fn architecture_check_ignores_training_knobs() {
        let a = TrainConfig::desk();
        let b = TrainConfig {
            lr: 0.1,
            batch_size: 9,
            ..a.clone()
        };
        assert_eq!(architecture_differs(&a, &b), None);
        let c = TrainConfig { hidden: 3, ..a.clone() };
        assert_eq!(architecture_differs(&a, &c), Some("hidden"));
    }
}
