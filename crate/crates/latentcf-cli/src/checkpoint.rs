//! Versioned checkpoint files: a key-value text manifest, then the tensor
//! payload as little-endian f64 in declaration order, protected by a CRC-32.
//! Saving is deterministic, so save -> load -> save reproduces the file
//! byte for byte.

use std::fs;
use std::path::Path;

use latentcf::attribution::{
    AttributeFamily, AttributeModel, AttributeSpec, DiameterSpec, Link, Penalty,
};
use latentcf::linear::LinearDirection;
use latentcf::nets::{Activation, Classifier, Mlp, MlpSpec, Vae};
use latentcf::tensor::Tensor;

use crate::error::{CliError, Result};

const HEADER: &str = "latentcf-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl Manifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn require(&self, path: &str, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| CliError::CkptFormat {
            path: path.to_string(),
            msg: format!("missing key '{key}'"),
        })
    }

    fn tensor(&self, path: &str, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CliError::CkptFormat {
                path: path.to_string(),
                msg: format!("missing tensor '{name}'"),
            })
    }
}

/// CRC-32 (IEEE, reflected) over the payload bytes.
fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

pub fn save_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    for (k, v) in &manifest.meta {
        if k.contains('\n') || v.contains('\n') || k.contains('=') {
            return Err(CliError::CkptFormat {
                path: path_str,
                msg: format!("meta entry '{k}' contains a reserved character"),
            });
        }
    }
    let mut payload = Vec::new();
    for t in &manifest.tensors {
        for v in &t.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut text = String::new();
    text.push_str(HEADER);
    text.push('\n');
    text.push_str(&format!("kind={}\n", manifest.kind));
    for (k, v) in &manifest.meta {
        text.push_str(&format!("{k}={v}\n"));
    }
    text.push_str(&format!("tensors={}\n", manifest.tensors.len()));
    for (i, t) in manifest.tensors.iter().enumerate() {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        text.push_str(&format!("tensor.{i}={}:{}\n", t.name, dims.join("x")));
    }
    text.push_str(&format!("payload_f64={}\n", payload.len() / 8));
    text.push_str(&format!("crc32={:08X}\n", crc32(&payload)));
    text.push_str("---\n");

    let mut bytes = text.into_bytes();
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path_str = path.as_ref().display().to_string();
    let bytes = fs::read(path.as_ref())?;
    let split = bytes
        .windows(4)
        .position(|w| w == b"---\n")
        .ok_or_else(|| CliError::CkptFormat {
            path: path_str.clone(),
            msg: "missing payload separator".into(),
        })?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| CliError::CkptFormat {
        path: path_str.clone(),
        msg: "manifest is not UTF-8".into(),
    })?;
    let payload = &bytes[split + 4..];

    let mut lines = header.lines();
    let first = lines.next().unwrap_or("");
    if first != HEADER {
        return Err(CliError::CkptVersion {
            path: path_str,
            found: first.to_string(),
            expected: HEADER.to_string(),
        });
    }

    let mut kind = String::new();
    let mut meta = Vec::new();
    let mut tensor_decls: Vec<(String, Vec<usize>)> = Vec::new();
    let mut payload_f64 = None;
    let mut crc_expected = None;
    for line in lines {
        let (key, value) = line.split_once('=').ok_or_else(|| CliError::CkptFormat {
            path: path_str.clone(),
            msg: format!("malformed line '{line}'"),
        })?;
        match key {
            "kind" => kind = value.to_string(),
            "tensors" => {}
            "payload_f64" => {
                payload_f64 = Some(value.parse::<usize>().map_err(|_| CliError::CkptFormat {
                    path: path_str.clone(),
                    msg: format!("bad payload count '{value}'"),
                })?)
            }
            "crc32" => {
                crc_expected =
                    Some(
                        u32::from_str_radix(value, 16).map_err(|_| CliError::CkptFormat {
                            path: path_str.clone(),
                            msg: format!("bad checksum '{value}'"),
                        })?,
                    )
            }
            _ if key.starts_with("tensor.") => {
                let (name, dims) =
                    value.rsplit_once(':').ok_or_else(|| CliError::CkptFormat {
                        path: path_str.clone(),
                        msg: format!("malformed tensor declaration '{value}'"),
                    })?;
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| {
                        d.parse::<usize>().map_err(|_| CliError::CkptFormat {
                            path: path_str.clone(),
                            msg: format!("bad dimension '{d}'"),
                        })
                    })
                    .collect::<Result<_>>()?;
                tensor_decls.push((name.to_string(), shape));
            }
            _ => meta.push((key.to_string(), value.to_string())),
        }
    }

    let count = payload_f64.ok_or_else(|| CliError::CkptFormat {
        path: path_str.clone(),
        msg: "missing payload_f64".into(),
    })?;
    if payload.len() != count * 8 {
        return Err(CliError::CkptTruncated {
            path: path_str,
            expected: count * 8,
            actual: payload.len(),
        });
    }
    let expected_crc = crc_expected.ok_or_else(|| CliError::CkptFormat {
        path: path_str.clone(),
        msg: "missing crc32".into(),
    })?;
    let actual_crc = crc32(payload);
    if actual_crc != expected_crc {
        return Err(CliError::CkptChecksum {
            path: path_str,
            expected: expected_crc,
            actual: actual_crc,
        });
    }

    let declared: usize = tensor_decls
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if declared != count {
        return Err(CliError::CkptFormat {
            path: path_str,
            msg: format!("tensor shapes hold {declared} values, payload has {count}"),
        });
    }

    let mut tensors = Vec::with_capacity(tensor_decls.len());
    let mut offset = 0usize;
    for (name, shape) in tensor_decls {
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = payload[offset * 8..(offset + numel) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += numel;
        tensors.push(NamedTensor {
            name,
            shape,
            values,
        });
    }

    Ok(Manifest {
        kind,
        meta,
        tensors,
    })
}

// ── model adapters ──────────────────────────────────────────────────────

fn mlp_meta(prefix: &str, mlp: &Mlp, meta: &mut Vec<(String, String)>) {
    let widths: Vec<String> = mlp.spec().widths.iter().map(|w| w.to_string()).collect();
    let acts: Vec<&str> = mlp.spec().activations.iter().map(|a| a.name()).collect();
    meta.push((format!("{prefix}widths"), widths.join(",")));
    meta.push((format!("{prefix}activations"), acts.join(",")));
}

fn mlp_tensors(prefix: &str, mlp: &Mlp, tensors: &mut Vec<NamedTensor>) {
    for (i, p) in mlp.params().iter().enumerate() {
        let kind = if i % 2 == 0 { "w" } else { "b" };
        tensors.push(NamedTensor {
            name: format!("{prefix}{kind}{}", i / 2),
            shape: p.shape().to_vec(),
            values: p.values().to_vec(),
        });
    }
}

fn parse_mlp(path: &str, manifest: &Manifest, prefix: &str) -> Result<Mlp> {
    let widths: Vec<usize> = manifest
        .require(path, &format!("{prefix}widths"))?
        .split(',')
        .map(|w| {
            w.parse::<usize>().map_err(|_| CliError::CkptFormat {
                path: path.to_string(),
                msg: format!("bad width '{w}'"),
            })
        })
        .collect::<Result<_>>()?;
    let activations: Vec<Activation> = manifest
        .require(path, &format!("{prefix}activations"))?
        .split(',')
        .map(|a| Activation::parse(a).map_err(CliError::from))
        .collect::<Result<_>>()?;
    let spec = MlpSpec::new(widths.clone(), activations).map_err(CliError::from)?;
    let mut params = Vec::new();
    for layer in 0..widths.len() - 1 {
        for kind in ["w", "b"] {
            let t = manifest.tensor(path, &format!("{prefix}{kind}{layer}"))?;
            params.push(
                Tensor::new(t.shape.clone(), t.values.clone())
                    .map_err(CliError::from)?
                    .tracked(),
            );
        }
    }
    Mlp::from_parts(spec, params).map_err(CliError::from)
}

pub fn save_classifier(path: impl AsRef<Path>, clf: &Classifier) -> Result<()> {
    let mut meta = Vec::new();
    meta.push(("classes".to_string(), clf.classes().to_string()));
    mlp_meta("", clf.mlp(), &mut meta);
    let mut tensors = Vec::new();
    mlp_tensors("", clf.mlp(), &mut tensors);
    save_manifest(
        path,
        &Manifest {
            kind: "classifier".into(),
            meta,
            tensors,
        },
    )
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<Classifier> {
    let path_str = path.as_ref().display().to_string();
    let manifest = load_manifest(path)?;
    if manifest.kind != "classifier" {
        return Err(CliError::CkptFormat {
            path: path_str,
            msg: format!("expected kind=classifier, found '{}'", manifest.kind),
        });
    }
    let mlp = parse_mlp(&path_str, &manifest, "")?;
    Classifier::from_mlp(mlp).map_err(CliError::from)
}

pub fn save_vae(path: impl AsRef<Path>, vae: &Vae) -> Result<()> {
    let mut meta = vec![
        ("latent_dim".to_string(), vae.latent_dim.to_string()),
        ("image_h".to_string(), vae.image_h.to_string()),
        ("image_w".to_string(), vae.image_w.to_string()),
    ];
    let mut tensors = Vec::new();
    for (name, mlp) in vae.blocks() {
        mlp_meta(&format!("{name}."), mlp, &mut meta);
        mlp_tensors(&format!("{name}."), mlp, &mut tensors);
    }
    save_manifest(
        path,
        &Manifest {
            kind: "vae".into(),
            meta,
            tensors,
        },
    )
}

pub fn load_vae(path: impl AsRef<Path>) -> Result<Vae> {
    let path_str = path.as_ref().display().to_string();
    let manifest = load_manifest(path)?;
    if manifest.kind != "vae" {
        return Err(CliError::CkptFormat {
            path: path_str,
            msg: format!("expected kind=vae, found '{}'", manifest.kind),
        });
    }
    let image_h = manifest
        .require(&path_str, "image_h")?
        .parse::<usize>()
        .map_err(|_| CliError::CkptFormat {
            path: path_str.clone(),
            msg: "bad image_h".into(),
        })?;
    let image_w = manifest
        .require(&path_str, "image_w")?
        .parse::<usize>()
        .map_err(|_| CliError::CkptFormat {
            path: path_str.clone(),
            msg: "bad image_w".into(),
        })?;
    let enc_trunk = parse_mlp(&path_str, &manifest, "enc_trunk.")?;
    let enc_mu = parse_mlp(&path_str, &manifest, "enc_mu.")?;
    let enc_logvar = parse_mlp(&path_str, &manifest, "enc_logvar.")?;
    let dec = parse_mlp(&path_str, &manifest, "dec.")?;
    Vae::from_parts(image_h, image_w, enc_trunk, enc_mu, enc_logvar, dec).map_err(CliError::from)
}

pub fn save_direction(path: impl AsRef<Path>, dir: &LinearDirection) -> Result<()> {
    save_manifest(
        path,
        &Manifest {
            kind: "direction".into(),
            meta: vec![("attribute".to_string(), dir.attribute.clone())],
            tensors: vec![
                NamedTensor {
                    name: "beta".into(),
                    shape: vec![dir.beta.len()],
                    values: dir.beta.clone(),
                },
                NamedTensor {
                    name: "intercept".into(),
                    shape: vec![1],
                    values: vec![dir.intercept],
                },
            ],
        },
    )
}

pub fn load_direction(path: impl AsRef<Path>) -> Result<LinearDirection> {
    let path_str = path.as_ref().display().to_string();
    let manifest = load_manifest(path)?;
    if manifest.kind != "direction" {
        return Err(CliError::CkptFormat {
            path: path_str,
            msg: format!("expected kind=direction, found '{}'", manifest.kind),
        });
    }
    let attribute = manifest.require(&path_str, "attribute")?.to_string();
    let beta = manifest.tensor(&path_str, "beta")?.values.clone();
    let intercept = manifest.tensor(&path_str, "intercept")?.values[0];
    Ok(LinearDirection {
        attribute,
        beta,
        intercept,
    })
}

fn penalty_str(p: &Penalty) -> String {
    match p {
        Penalty::None => "none".into(),
        Penalty::Ridge(l) => format!("ridge:{l}"),
        Penalty::Lasso(l) => format!("lasso:{l}"),
    }
}

pub fn parse_penalty(s: &str) -> Result<Penalty> {
    if s == "none" {
        return Ok(Penalty::None);
    }
    let parse_lambda = |v: &str| {
        v.parse::<f64>().map_err(|_| {
            CliError::Usage(format!("bad penalty strength '{v}' (expected a float)"))
        })
    };
    if let Some(v) = s.strip_prefix("ridge:") {
        return Ok(Penalty::Ridge(parse_lambda(v)?));
    }
    if let Some(v) = s.strip_prefix("lasso:") {
        return Ok(Penalty::Lasso(parse_lambda(v)?));
    }
    Err(CliError::Usage(format!(
        "unknown penalty '{s}' (expected none, ridge:<lambda>, or lasso:<lambda>)"
    )))
}

fn diameter_str(d: &DiameterSpec) -> String {
    match d {
        DiameterSpec::Known(v) => format!("known:{v}"),
        DiameterSpec::Limits { lo, hi } => format!("limits:{lo}:{hi}"),
        DiameterSpec::FromBackground => "background".into(),
    }
}

fn parse_diameter(path: &str, s: &str) -> Result<DiameterSpec> {
    let bad = |msg: String| CliError::CkptFormat {
        path: path.to_string(),
        msg,
    };
    if s == "background" {
        return Ok(DiameterSpec::FromBackground);
    }
    if let Some(v) = s.strip_prefix("known:") {
        return Ok(DiameterSpec::Known(
            v.parse().map_err(|_| bad(format!("bad diameter '{s}'")))?,
        ));
    }
    if let Some(rest) = s.strip_prefix("limits:") {
        let (lo, hi) = rest
            .split_once(':')
            .ok_or_else(|| bad(format!("bad diameter '{s}'")))?;
        return Ok(DiameterSpec::Limits {
            lo: lo.parse().map_err(|_| bad(format!("bad diameter '{s}'")))?,
            hi: hi.parse().map_err(|_| bad(format!("bad diameter '{s}'")))?,
        });
    }
    Err(bad(format!("bad diameter '{s}'")))
}

pub fn save_attribute_models(path: impl AsRef<Path>, models: &[AttributeModel]) -> Result<()> {
    let mut meta = vec![("count".to_string(), models.len().to_string())];
    let mut tensors = Vec::new();
    for (i, m) in models.iter().enumerate() {
        meta.push((format!("attr.{i}.name"), m.spec.name.clone()));
        meta.push((format!("attr.{i}.family"), m.spec.family.name().to_string()));
        meta.push((format!("attr.{i}.link"), m.link.name().to_string()));
        meta.push((format!("attr.{i}.penalty"), penalty_str(&m.penalty)));
        meta.push((
            format!("attr.{i}.diameter_spec"),
            diameter_str(&m.spec.diameter),
        ));
        meta.push((
            format!("attr.{i}.diameter"),
            m.resolved_diameter
                .map(|d| d.to_string())
                .unwrap_or_else(|| "unresolved".into()),
        ));
        tensors.push(NamedTensor {
            name: format!("attr.{i}.weights"),
            shape: vec![m.weights.len()],
            values: m.weights.clone(),
        });
        tensors.push(NamedTensor {
            name: format!("attr.{i}.intercept"),
            shape: vec![1],
            values: vec![m.intercept],
        });
    }
    save_manifest(
        path,
        &Manifest {
            kind: "attributes".into(),
            meta,
            tensors,
        },
    )
}

pub fn load_attribute_models(path: impl AsRef<Path>) -> Result<Vec<AttributeModel>> {
    let path_str = path.as_ref().display().to_string();
    let manifest = load_manifest(path)?;
    if manifest.kind != "attributes" {
        return Err(CliError::CkptFormat {
            path: path_str,
            msg: format!("expected kind=attributes, found '{}'", manifest.kind),
        });
    }
    let count: usize = manifest
        .require(&path_str, "count")?
        .parse()
        .map_err(|_| CliError::CkptFormat {
            path: path_str.clone(),
            msg: "bad count".into(),
        })?;
    let mut models = Vec::with_capacity(count);
    for i in 0..count {
        let name = manifest.require(&path_str, &format!("attr.{i}.name"))?.to_string();
        let family =
            AttributeFamily::parse(manifest.require(&path_str, &format!("attr.{i}.family"))?)
                .map_err(CliError::from)?;
        let link = Link::parse(manifest.require(&path_str, &format!("attr.{i}.link"))?)
            .map_err(CliError::from)?;
        let penalty = parse_penalty(manifest.require(&path_str, &format!("attr.{i}.penalty"))?)?;
        let diameter = parse_diameter(
            &path_str,
            manifest.require(&path_str, &format!("attr.{i}.diameter_spec"))?,
        )?;
        let resolved = match manifest.require(&path_str, &format!("attr.{i}.diameter"))? {
            "unresolved" => None,
            v => Some(v.parse::<f64>().map_err(|_| CliError::CkptFormat {
                path: path_str.clone(),
                msg: format!("bad resolved diameter '{v}'"),
            })?),
        };
        let weights = manifest
            .tensor(&path_str, &format!("attr.{i}.weights"))?
            .values
            .clone();
        let intercept = manifest
            .tensor(&path_str, &format!("attr.{i}.intercept"))?
            .values[0];
        models.push(AttributeModel {
            spec: AttributeSpec {
                name,
                family,
                diameter,
            },
            weights,
            intercept,
            link,
            penalty,
            resolved_diameter: resolved,
        });
    }
    Ok(models)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc32_matches_the_standard_check_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn manifest_round_trips_meta_and_tensors() {
        let dir = std::env::temp_dir().join(format!(
            "latentcf-ckpt-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        let manifest = Manifest {
            kind: "attributes".into(),
            meta: vec![("attr.0.name".into(), "digit=3".into())],
            tensors: vec![NamedTensor {
                name: "attr.0.weights".into(),
                shape: vec![2, 3],
                values: vec![1.0, -2.5, 0.0, f64::MIN_POSITIVE, 1e300, -0.0],
            }],
        };
        save_manifest(&path, &manifest).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, manifest);
        assert_eq!(loaded.get("attr.0.name"), Some("digit=3"));
    }
}
