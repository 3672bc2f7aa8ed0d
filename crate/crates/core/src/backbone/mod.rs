//! Deep feature extractors and per-layer activation export.

pub mod ops;
mod residual;
mod small_cnn;

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;

use crate::config::{BackboneKind, PipelineConfig};
use crate::error::{Error, Result};
use crate::raster::{save_gray_png, Raster};

pub use residual::{ResidualNet, ResidualSpec};
pub use small_cnn::{
    image_to_chw, shape_trace, small_cnn_forward, SmallCnnGrads, SmallCnnParams, SmallCnnTrace,
};

const FACE_SEED_SALT: u64 = 0x00fa_ce00;
const BACKGROUND_SEED_SALT: u64 = 0x00b6_0000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerInfo {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    SmallCnn(SmallCnnParams),
    Residual(ResidualNet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneHandle {
    kind: BackboneKind,
    input_size: usize,
    layer_catalog: Vec<LayerInfo>,
    network: Network,
}

impl BackboneHandle {
    pub fn small_cnn(params: SmallCnnParams) -> Self {
        let names = ["conv1", "pool1", "conv2", "pool2", "conv3", "pool3"];
        let layer_catalog = names
            .iter()
            .enumerate()
            .map(|(i, n)| LayerInfo {
                id: i + 1,
                name: n.to_string(),
            })
            .collect();
        BackboneHandle {
            kind: BackboneKind::SmallCnn,
            input_size: params.input_size,
            layer_catalog,
            network: Network::SmallCnn(params),
        }
    }

    pub fn residual(net: ResidualNet, input_size: usize) -> Self {
        let layer_catalog = (1..=net.num_layers())
            .map(|id| LayerInfo {
                id,
                name: if id == 1 {
                    "stem".into()
                } else {
                    format!("block{}_conv{}", (id - 2) / 2 + 1, if id % 2 == 0 { 'a' } else { 'b' })
                },
            })
            .collect();
        BackboneHandle {
            kind: BackboneKind::ResidualTransfer,
            input_size,
            layer_catalog,
            network: Network::Residual(net),
        }
    }

    /// Face-stream backbone as configured. Residual weights are loaded from
    /// `residual_weights` when set, otherwise generated from the seed.
    pub fn face_from_config(cfg: &PipelineConfig) -> Result<Self> {
        let dim = cfg.deep_face_dim;
        let handle = match cfg.backbone_kind {
            BackboneKind::SmallCnn => BackboneHandle::small_cnn(SmallCnnParams::init(
                cfg.seed ^ FACE_SEED_SALT,
                cfg.image_size,
                cfg.cnn_channels,
                dim,
            )),
            BackboneKind::ResidualTransfer => {
                let net = match &cfg.residual_weights {
                    Some(p) => ResidualNet::load(p)?,
                    None => ResidualNet::random(
                        cfg.seed ^ FACE_SEED_SALT,
                        cfg.residual_depth,
                        cfg.residual_width,
                        dim,
                    ),
                };
                BackboneHandle::residual(net, cfg.image_size)
            }
        };
        if handle.output_dim() != dim {
            return Err(Error::Config(format!(
                "face backbone produces {} features, config deep_face_dim is {dim}",
                handle.output_dim()
            )));
        }
        Ok(handle)
    }

    /// Background-stream CNN: same architecture as the small face CNN,
    /// independent parameters.
    pub fn background_from_config(cfg: &PipelineConfig) -> Self {
        BackboneHandle::small_cnn(SmallCnnParams::init(
            cfg.seed ^ BACKGROUND_SEED_SALT,
            cfg.image_size,
            cfg.cnn_channels,
            cfg.background_dim,
        ))
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn output_dim(&self) -> usize {
        match &self.network {
            Network::SmallCnn(p) => p.output_dim(),
            Network::Residual(n) => n.output_dim(),
        }
    }

    pub fn layer_catalog(&self) -> &[LayerInfo] {
        &self.layer_catalog
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    /// Resizes to the backbone's input size when needed, then runs it.
    pub fn forward(&self, image: &Raster) -> Result<Vec<f64>> {
        let img = self.prepare(image);
        match &self.network {
            Network::SmallCnn(p) => small_cnn_forward(p, &img),
            Network::Residual(n) => Ok(n.forward(&img)),
        }
    }

    fn prepare<'a>(&self, image: &'a Raster) -> std::borrow::Cow<'a, Raster> {
        let s = self.input_size;
        if image.width() == s && image.height() == s {
            std::borrow::Cow::Borrowed(image)
        } else {
            std::borrow::Cow::Owned(image.resize(s, s))
        }
    }

    fn activations(&self, image: &Raster, ids: &[usize]) -> Result<Vec<(usize, ndarray::Array3<f64>)>> {
        let img = self.prepare(image);
        match &self.network {
            Network::SmallCnn(p) => {
                let trace = p.trace(&img)?;
                Ok(ids.iter().map(|id| (*id, trace.layers[id - 1].clone())).collect())
            }
            Network::Residual(n) => {
                let mut acts = n.activations(&img, ids);
                acts.sort_by_key(|(id, _)| ids.iter().position(|x| x == id));
                Ok(acts)
            }
        }
    }
}

/// Features from a residual transfer backbone.
pub fn transfer_features(handle: &BackboneHandle, image: &Raster) -> Result<Vec<f64>> {
    if handle.kind() != BackboneKind::ResidualTransfer {
        return Err(Error::Config(
            "transfer_features requires a residual_transfer backbone".into(),
        ));
    }
    handle.forward(image)
}

/// One channel of one layer, min-max scaled to [0, 1] (constant → zeros).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub layer: usize,
    pub channel: usize,
    pub grid: Array2<f32>,
}

fn min_max_scale(plane: ndarray::ArrayView2<f64>) -> Array2<f32> {
    let (lo, hi) = plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let range = hi - lo;
    if !(range > 1e-12) {
        return Array2::zeros(plane.dim());
    }
    plane.mapv(|v| ((v - lo) / range) as f32)
}

/// Activation grids for the requested layers. `channels` restricts which
/// channels are returned; `None` returns all of them.
pub fn feature_maps(
    handle: &BackboneHandle,
    image: &Raster,
    layer_ids: &[usize],
    channels: Option<&[usize]>,
) -> Result<Vec<FeatureMap>> {
    let valid: Vec<usize> = handle.layer_catalog().iter().map(|l| l.id).collect();
    if let Some(bad) = layer_ids.iter().find(|id| !valid.contains(id)) {
        return Err(Error::UnknownLayer {
            requested: *bad,
            valid,
        });
    }
    let mut out = Vec::new();
    for (layer, act) in handle.activations(image, layer_ids)? {
        let n = act.dim().0;
        let chosen: Vec<usize> = match channels {
            Some(c) => c.iter().copied().filter(|c| *c < n).collect(),
            None => (0..n).collect(),
        };
        for c in chosen {
            out.push(FeatureMap {
                layer,
                channel: c,
                grid: min_max_scale(act.index_axis(ndarray::Axis(0), c)),
            });
        }
    }
    Ok(out)
}

/// Writes `<sample_id>_layer<k>_ch<c>.png` for each map.
pub fn export_feature_maps(maps: &[FeatureMap], sample_id: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    maps.iter()
        .map(|m| {
            let p = dir.join(format!("{sample_id}_layer{}_ch{}.png", m.layer, m.channel));
            save_gray_png(&m.grid, &p)?;
            Ok(p)
        })
        .collect()
}
