//! Bundled configuration templates served by `get config`.
//!
//! Templates ship inside the binary; nothing is downloaded. They are
//! written to ./config/<name>.yaml and never overwritten without force.

use std::path::PathBuf;

use crate::error::{Error, Result};

const TEMPLATES: &[(&str, &str)] = &[
    ("exp", include_str!("../templates/exp.yaml")),
    ("fedavg", include_str!("../templates/fedavg.yaml")),
    ("fedprox", include_str!("../templates/fedprox.yaml")),
    ("scaffold", include_str!("../templates/scaffold.yaml")),
    ("fedopt", include_str!("../templates/fedopt.yaml")),
];

pub fn list_templates() -> Vec<&'static str> {
    TEMPLATES.iter().map(|(name, _)| *name).collect()
}

pub fn template_body(name: &str) -> Result<&'static str> {
    TEMPLATES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, body)| *body)
        .ok_or_else(|| {
            Error::config(
                "template",
                format!(
                    "unknown template `{name}`; available: {}",
                    list_templates().join(", ")
                ),
            )
        })
}

/// Write ./config/<name>.yaml, refusing to overwrite unless forced.
/// Returns the written path.
pub fn get_template(name: &str, force: bool) -> Result<PathBuf> {
    let body = template_body(name)?;
    let dir = PathBuf::from("config");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{name}.yaml"));
    if path.exists() && !force {
        return Err(Error::config(
            path.display().to_string(),
            "already exists; pass --force to overwrite",
        ));
    }
    std::fs::write(&path, body)?;
    Ok(path)
}
