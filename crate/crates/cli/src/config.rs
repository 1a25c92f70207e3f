//! Resolution of a run configuration: defaults, then the user's TOML file
//! merged over them, then the seed override.

use std::path::Path;

use radguard::pipeline::RunConfig;
use toml::{Table, Value};

use crate::CliError;

/// Merges `user` into `base` in place. Keys absent from `base` are rejected,
/// and a table whose `kind` tag differs from the default is taken whole.
pub fn merge(base: &mut Table, user: Table, prefix: &str) -> Result<(), CliError> {
    for (key, value) in user {
        let name = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        let Some(slot) = base.get_mut(&key) else {
            return Err(CliError::Validation(format!("unknown config key `{name}`")));
        };
        match (slot, value) {
            (Value::Table(b), Value::Table(u))
                if b.get("kind").is_none() || b.get("kind") == u.get("kind") =>
            {
                merge(b, u, &name)?;
            }
            (slot, value) => {
                if std::mem::discriminant(slot) != std::mem::discriminant(&value)
                    && !(slot.is_float() && value.is_integer())
                {
                    return Err(CliError::Validation(format!(
                        "config key `{name}` expects a {}, got a {}",
                        slot.type_str(),
                        value.type_str()
                    )));
                }
                *slot = match (slot.is_float(), value) {
                    (true, Value::Integer(i)) => Value::Float(i as f64),
                    (_, v) => v,
                };
            }
        }
    }
    Ok(())
}

pub fn to_table(config: &RunConfig) -> Result<Table, CliError> {
    Table::try_from(config).map_err(|e| CliError::Validation(format!("config serialization: {e}")))
}

pub fn resolve_text(text: Option<&str>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut table = to_table(&RunConfig::default())?;
    if let Some(text) = text {
        let user: Table = text
            .parse()
            .map_err(|e| CliError::Validation(format!("malformed config: {e}")))?;
        merge(&mut table, user, "")?;
    }
    let mut config: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Validation(format!("invalid config: {e}")))?;
    if let Some(seed) = seed {
        config = config.with_seed(seed);
    }
    config.validate()?;
    Ok(config)
}

pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    resolve_text(text.as_deref(), seed)
}

pub fn render(config: &RunConfig) -> Result<String, CliError> {
    toml::to_string_pretty(config)
        .map_err(|e| CliError::Validation(format!("config serialization: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let config = resolve_text(None, None).unwrap();
        assert_eq!(config, RunConfig::default());
        assert_eq!(
            resolve_text(Some(&render(&config).unwrap()), None).unwrap(),
            config
        );
    }

    #[test]
    fn user_values_override_defaults() {
        let config = resolve_text(
            Some("[protect]\nlambda_pro = 7\n[field.optimizer]\nsteps = 12\n"),
            None,
        )
        .unwrap();
        assert_eq!(config.protect.lambda_pro, 7.0);
        assert_eq!(config.field.optimizer.steps, 12);
        assert_eq!(config.protect.samples, RunConfig::default().protect.samples);
    }

    #[test]
    fn tagged_tables_switch_variant() {
        let config = resolve_text(
            Some("[protect.constraint]\nkind = \"fixed_eps\"\neps = 0.5\n"),
            None,
        )
        .unwrap();
        assert_eq!(
            config.protect.constraint,
            radguard::protect::ConstraintMode::FixedEps { eps: 0.5 }
        );
    }

    #[test]
    fn unknown_keys_and_wrong_types_are_rejected() {
        assert!(matches!(
            resolve_text(Some("lambda = 1\n"), None),
            Err(CliError::Validation(_))
        ));
        assert!(matches!(
            resolve_text(Some("[protect]\nlambda_pro = \"big\"\n"), None),
            Err(CliError::Validation(_))
        ));
        assert!(matches!(
            resolve_text(Some("[protect\n"), None),
            Err(CliError::Validation(_))
        ));
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let config = resolve_text(None, Some(9)).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.field.seed, 9);
        assert_eq!(config.protect.seed, 9);
        assert_eq!(config.scenes.rig.seed, 9);
    }
}
