use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::net::{Edge, EdgeKind, LayerKind, LayerSpec, NetworkSpec, Nonlinearity};

use super::{read_tensors, write_tensors, IoError};

pub const MANIFEST_FORMAT: &str = "gscc-net-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    input_resolution: [usize; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<String>,
    layers: Vec<LayerEntry>,
    edges: Vec<EdgeEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    id: usize,
    kind: String,
    in_channels: usize,
    out_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    prunable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeEntry {
    src: usize,
    dst: usize,
    kind: String,
}

/// Saves a network as a TOML manifest plus, when `weights_file` is given, a
/// `GSCCW1` container referenced relatively from the manifest.
pub fn save_network(
    path: &Path,
    net: &NetworkSpec,
    weights_file: Option<&str>,
) -> Result<(), IoError> {
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        input_resolution: {
            let (c, h, w) = net.input_resolution();
            [c, h, w]
        },
        weights: weights_file.map(str::to_owned),
        layers: net
            .layers()
            .iter()
            .map(|l| LayerEntry {
                id: l.id,
                kind: l.kind.name().to_string(),
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel: (l.kernel != (0, 0)).then_some([l.kernel.0, l.kernel.1]),
                stride: (l.stride != (1, 1)).then_some([l.stride.0, l.stride.1]),
                padding: (l.padding != (0, 0)).then_some([l.padding.0, l.padding.1]),
                activation: (l.activation == Nonlinearity::Relu).then(|| "relu".to_string()),
                prunable: l.prunable,
            })
            .collect(),
        edges: net
            .edges()
            .iter()
            .map(|e| EdgeEntry { src: e.src, dst: e.dst, kind: e.kind.name().to_string() })
            .collect(),
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| IoError::Manifest(e.to_string()))?;
    std::fs::write(path, text)?;

    if let Some(wf) = weights_file {
        let wpath = path.parent().unwrap_or_else(|| Path::new(".")).join(wf);
        let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
        for l in net.layers() {
            for (suffix, t) in [
                ("weight", &l.weights),
                ("bias", &l.bias),
                ("bn_mean", &l.bn_mean),
                ("bn_var", &l.bn_var),
            ] {
                if let Some(t) = t {
                    tensors.push((format!("layer{}.{}", l.id, suffix), t));
                }
            }
        }
        let refs: Vec<(&str, &Tensor<f32>)> =
            tensors.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        write_tensors(&wpath, &refs)?;
    }
    Ok(())
}

/// Loads a manifest (and its weight container, when referenced) into a
/// validated [`NetworkSpec`].
pub fn load_network(path: &Path) -> Result<NetworkSpec, IoError> {
    let text = std::fs::read_to_string(path)?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| IoError::Manifest(e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(IoError::Manifest(format!(
            "unsupported format {:?}, expected {MANIFEST_FORMAT:?}",
            manifest.format
        )));
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for e in &manifest.layers {
        let kind = LayerKind::from_name(&e.kind)
            .ok_or_else(|| IoError::Manifest(format!("layer {}: unknown kind {:?}", e.id, e.kind)))?;
        let mut l = LayerSpec::new(e.id, kind, e.in_channels, e.out_channels);
        if let Some([kh, kw]) = e.kernel {
            l = l.with_kernel(kh, kw);
        }
        if let Some([sh, sw]) = e.stride {
            l = l.with_stride(sh, sw);
        }
        if let Some([ph, pw]) = e.padding {
            l = l.with_padding(ph, pw);
        }
        match e.activation.as_deref() {
            None => {}
            Some("relu") => l = l.with_activation(Nonlinearity::Relu),
            Some(other) => {
                return Err(IoError::Manifest(format!(
                    "layer {}: unknown activation {other:?}",
                    e.id
                )))
            }
        }
        l = l.prunable(e.prunable);
        layers.push(l);
    }

    if let Some(wf) = &manifest.weights {
        let wpath = path.parent().unwrap_or_else(|| Path::new(".")).join(wf);
        for (name, t) in read_tensors(&wpath)? {
            let Some(rest) = name.strip_prefix("layer") else {
                return Err(IoError::Manifest(format!("unexpected tensor name {name:?}")));
            };
            let Some((id_str, field)) = rest.split_once('.') else {
                return Err(IoError::Manifest(format!("unexpected tensor name {name:?}")));
            };
            let id: usize = id_str
                .parse()
                .map_err(|_| IoError::Manifest(format!("bad layer id in {name:?}")))?;
            let layer = layers
                .iter_mut()
                .find(|l| l.id == id)
                .ok_or_else(|| IoError::Manifest(format!("tensor {name:?} has no layer")))?;
            match field {
                "weight" => layer.weights = Some(t),
                "bias" => layer.bias = Some(t),
                "bn_mean" => layer.bn_mean = Some(t),
                "bn_var" => layer.bn_var = Some(t),
                other => {
                    return Err(IoError::Manifest(format!("unknown tensor field {other:?}")))
                }
            }
        }
    }

    let edges = manifest
        .edges
        .iter()
        .map(|e| {
            EdgeKind::from_name(&e.kind)
                .map(|k| Edge::new(e.src, e.dst, k))
                .ok_or_else(|| IoError::Manifest(format!("unknown edge kind {:?}", e.kind)))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let [c, h, w] = manifest.input_resolution;
    Ok(NetworkSpec::new(layers, edges, (c, h, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toynets;

    #[test]
    fn manifest_roundtrip_with_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.toml");
        let net = toynets::bn_chain_net(5);
        save_network(&path, &net, Some("weights.gsccw")).unwrap();

        let got = load_network(&path).unwrap();
        assert_eq!(got.len(), net.len());
        for (a, b) in got.layers().iter().zip(net.layers()) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.out_channels, b.out_channels);
            assert_eq!(a.prunable, b.prunable);
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
            assert_eq!(a.bn_mean, b.bn_mean);
            assert_eq!(a.bn_var, b.bn_var);
        }
        assert_eq!(got.edges(), net.edges());
    }

    #[test]
    fn structure_only_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.toml");
        let net = toynets::toy_resnet(2);
        save_network(&path, &net, None).unwrap();
        let got = load_network(&path).unwrap();
        assert!(got.layer(1).weights.is_none());
        assert_eq!(got.edges(), net.edges());
    }

    #[test]
    fn invalid_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.toml");
        std::fs::write(&path, "format = \"gscc-net-v1\"\n").unwrap();
        assert!(matches!(load_network(&path), Err(IoError::Manifest(_))));
    }
}
