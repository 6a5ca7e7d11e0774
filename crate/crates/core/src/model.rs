//! The matching network: optional pixel backbone, correlation, head.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{BackboneLayer, BackboneParams, CropGeometry};
use crate::head::{head_backward, head_forward_cached, HeadCache, HeadOutputGrads, HeadOutputs, HeadParams};
use crate::io;
use crate::matching::{self, dw_xcorr, dw_xcorr_backward, dw_xcorr_f32, svc_corr_backward, svc_corr_forward, SvcCache, SvcParams};
use crate::ops;
use crate::tensor::{KernelBank, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatcherKind {
    Dw,
    Svc,
}

impl std::str::FromStr for MatcherKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dw" => Ok(MatcherKind::Dw),
            "svc" => Ok(MatcherKind::Svc),
            _ => Err(Error::invalid("matcher", format!("unknown matcher `{s}` (expected dw or svc)"))),
        }
    }
}

impl std::fmt::Display for MatcherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MatcherKind::Dw => "dw",
            MatcherKind::Svc => "svc",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Matcher {
    DwXCorr,
    Svc(SvcParams),
}

impl Matcher {
    pub fn kind(&self) -> MatcherKind {
        match self {
            Matcher::DwXCorr => MatcherKind::Dw,
            Matcher::Svc(_) => MatcherKind::Svc,
        }
    }
}

/// Arithmetic precision of the correlation during tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Double,
    Single,
}

/// Architecture choices needed to rebuild a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub matcher: MatcherKind,
    pub channels: usize,
    /// Bottleneck reduction of the channel transform.
    pub reduction: usize,
    /// Pixel frames go through a toy backbone; feature frames bypass it.
    pub pixel_input: bool,
    pub geometry: CropGeometry,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            matcher: MatcherKind::Svc,
            channels: 16,
            reduction: 4,
            pixel_input: false,
            geometry: CropGeometry::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Option<BackboneParams>,
    pub matcher: Matcher,
    pub head: HeadParams,
}

#[derive(Debug, Clone)]
enum MatchCache {
    Dw { z: Tensor3, x: Tensor3 },
    Svc(SvcCache),
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    matching: MatchCache,
    head: HeadCache,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.geometry.validate()?;
        let backbone = if config.pixel_input {
            let bb = BackboneParams::toy(1, config.channels, rng);
            bb.validate(config.geometry.stride, config.channels)?;
            Some(bb)
        } else {
            None
        };
        let matcher = match config.matcher {
            MatcherKind::Dw => Matcher::DwXCorr,
            MatcherKind::Svc => Matcher::Svc(SvcParams::random(config.channels, config.reduction, rng)?),
        };
        let head = HeadParams::init(config.channels, rng);
        Ok(Model {
            config,
            backbone,
            matcher,
            head,
        })
    }

    /// Same structure with every parameter zeroed; used to hold cotangents.
    pub fn zeros_like(&self) -> Self {
        Model {
            config: self.config,
            backbone: self.backbone.as_ref().map(BackboneParams::zeros_like),
            matcher: match &self.matcher {
                Matcher::DwXCorr => Matcher::DwXCorr,
                Matcher::Svc(p) => Matcher::Svc(p.zeros_like()),
            },
            head: self.head.zeros_like(),
        }
    }

    /// Correlation stack between template and search features.
    pub fn respond(&self, z: &Tensor3, x: &Tensor3, precision: Precision) -> Result<Tensor3> {
        let spatial = match precision {
            Precision::Double => dw_xcorr(z, x)?,
            Precision::Single => dw_xcorr_f32(z, x)?,
        };
        match &self.matcher {
            Matcher::DwXCorr => Ok(spatial),
            Matcher::Svc(p) => {
                let g = self.config.geometry.template_cells;
                let (kh, kw) = (z.h().min(g).max(1), z.w().min(g).max(1));
                let tz = matching::ch_trans(z, &p.chtrans, kh, kw)?;
                let tx = matching::ch_trans(x, &p.chtrans, kh, kw)?;
                ops::add(&spatial, &matching::channel_weights(&tz, &tx, &p.phi2)?)
            }
        }
    }

    pub fn forward(&self, z: &Tensor3, x: &Tensor3, precision: Precision) -> Result<HeadOutputs> {
        let resp = self.respond(z, x, precision)?;
        head_forward_cached(&resp, &self.head).map(|(o, _)| o)
    }

    pub fn forward_cached(&self, z: &Tensor3, x: &Tensor3) -> Result<(HeadOutputs, ModelCache)> {
        let (resp, matching) = match &self.matcher {
            Matcher::DwXCorr => (
                dw_xcorr(z, x)?,
                MatchCache::Dw {
                    z: z.clone(),
                    x: x.clone(),
                },
            ),
            Matcher::Svc(p) => {
                let (r, c) = svc_corr_forward(z, x, p)?;
                (r, MatchCache::Svc(c))
            }
        };
        let (outs, head) = head_forward_cached(&resp, &self.head)?;
        Ok((outs, ModelCache { matching, head }))
    }

    /// Accumulates parameter cotangents into `grads` and returns the
    /// cotangents of the template and search features.
    pub fn backward(&self, cache: &ModelCache, outs: &HeadOutputs, g: &HeadOutputGrads, grads: &mut Model) -> Result<(Tensor3, Tensor3)> {
        let g_resp = head_backward(&self.head, &cache.head, outs, g, &mut grads.head)?;
        match (&self.matcher, &cache.matching, &mut grads.matcher) {
            (Matcher::DwXCorr, MatchCache::Dw { z, x }, _) => dw_xcorr_backward(z, x, &g_resp),
            (Matcher::Svc(p), MatchCache::Svc(c), Matcher::Svc(gp)) => svc_corr_backward(p, c, &g_resp, gp),
            _ => Err(Error::invalid("model_backward", "cache and gradient buffers do not match the matcher")),
        }
    }

    /// Parameter groups in a fixed order with stable names.
    pub fn banks(&self) -> Vec<(String, &KernelBank)> {
        let mut out = Vec::new();
        if let Some(bb) = &self.backbone {
            for (i, l) in bb.layers.iter().enumerate() {
                out.push((format!("backbone.{i}"), &l.bank));
            }
        }
        if let Matcher::Svc(p) = &self.matcher {
            out.push(("matcher.chtrans.phi1".into(), &p.chtrans.phi1));
            out.push(("matcher.chtrans.fc1".into(), &p.chtrans.fc1));
            out.push(("matcher.chtrans.fc2".into(), &p.chtrans.fc2));
            out.push(("matcher.phi2".into(), &p.phi2));
        }
        out.push(("head.trunk".into(), &self.head.trunk));
        out.push(("head.center".into(), &self.head.center));
        out.push(("head.offset".into(), &self.head.offset));
        out.push(("head.size".into(), &self.head.size));
        out
    }

    pub fn banks_mut(&mut self) -> Vec<(String, &mut KernelBank)> {
        let mut out = Vec::new();
        if let Some(bb) = &mut self.backbone {
            for (i, l) in bb.layers.iter_mut().enumerate() {
                out.push((format!("backbone.{i}"), &mut l.bank));
            }
        }
        if let Matcher::Svc(p) = &mut self.matcher {
            out.push(("matcher.chtrans.phi1".into(), &mut p.chtrans.phi1));
            out.push(("matcher.chtrans.fc1".into(), &mut p.chtrans.fc1));
            out.push(("matcher.chtrans.fc2".into(), &mut p.chtrans.fc2));
            out.push(("matcher.phi2".into(), &mut p.phi2));
        }
        out.push(("head.trunk".into(), &mut self.head.trunk));
        out.push(("head.center".into(), &mut self.head.center));
        out.push(("head.offset".into(), &mut self.head.offset));
        out.push(("head.size".into(), &mut self.head.size));
        out
    }

    pub fn param_count(&self) -> usize {
        self.banks().iter().map(|(_, b)| b.param_count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.banks().iter().all(|(_, b)| b.is_finite())
    }

    /// Writes `manifest.json` and one ST1 file per parameter group. Each file
    /// holds an `out x (in*kh*kw + 1) x 1` tensor: the weights of one output
    /// channel followed by its bias.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut groups = Vec::new();
        for (name, bank) in self.banks() {
            let per = bank.in_channels * bank.kh * bank.kw;
            let t = Tensor3::from_fn(bank.out_channels, per + 1, 1, |o, j, _| {
                if j < per {
                    bank.weights[o * per + j]
                } else {
                    bank.bias[o]
                }
            });
            let file = format!("{name}.st1");
            io::write_st1(dir.join(&file), &t)?;
            groups.push(GroupEntry {
                name,
                file,
                out_channels: bank.out_channels,
                in_channels: bank.in_channels,
                kh: bank.kh,
                kw: bank.kw,
            });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            config: self.config,
            backbone_strides: self
                .backbone
                .as_ref()
                .map(|b| b.layers.iter().map(|l| l.stride).collect())
                .unwrap_or_default(),
            groups,
        };
        io::write_json(dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = io::read_json(dir.join("manifest.json"))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Format {
                what: "parameter manifest",
                msg: format!("unsupported format `{}`", manifest.format),
            });
        }
        let mut model = skeleton(&manifest)?;
        let expected: Vec<String> = model.banks().into_iter().map(|(n, _)| n).collect();
        let found: Vec<String> = manifest.groups.iter().map(|g| g.name.clone()).collect();
        if expected != found {
            return Err(Error::Format {
                what: "parameter manifest",
                msg: format!("groups {found:?} do not match architecture {expected:?}"),
            });
        }
        for ((_, bank), entry) in model.banks_mut().into_iter().zip(&manifest.groups) {
            let t = io::read_st1(dir.join(&entry.file))?;
            let per = entry.in_channels * entry.kh * entry.kw;
            if (t.h(), t.w(), t.c()) != (entry.out_channels, per + 1, 1) {
                return Err(Error::Format {
                    what: "parameter group",
                    msg: format!("{} has shape {}, manifest says {}x{}x1", entry.file, t.shape(), entry.out_channels, per + 1),
                });
            }
            let mut weights = Vec::with_capacity(entry.out_channels * per);
            let mut bias = Vec::with_capacity(entry.out_channels);
            for o in 0..entry.out_channels {
                weights.extend((0..per).map(|j| t.get(o, j, 0)));
                bias.push(t.get(o, per, 0));
            }
            *bank = KernelBank::new(entry.out_channels, entry.in_channels, entry.kh, entry.kw, weights, bias)?;
        }
        Ok(model)
    }
}

const MANIFEST_FORMAT: &str = "stmatch-params-1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupEntry {
    name: String,
    file: String,
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config: ModelConfig,
    backbone_strides: Vec<usize>,
    groups: Vec<GroupEntry>,
}

fn skeleton(m: &Manifest) -> Result<Model> {
    let c = m.config.channels;
    let bank_dims = |name: &str| m.groups.iter().find(|g| g.name == name);
    let backbone = if m.config.pixel_input {
        let mut layers = Vec::new();
        for (i, &stride) in m.backbone_strides.iter().enumerate() {
            let g = bank_dims(&format!("backbone.{i}")).ok_or_else(|| Error::Format {
                what: "parameter manifest",
                msg: format!("missing backbone.{i}"),
            })?;
            layers.push(BackboneLayer {
                bank: KernelBank::zeros(g.out_channels, g.in_channels, g.kh, g.kw),
                stride,
            });
        }
        let bb = BackboneParams { layers };
        bb.validate(m.config.geometry.stride, c)?;
        Some(bb)
    } else {
        None
    };
    let matcher = match m.config.matcher {
        MatcherKind::Dw => Matcher::DwXCorr,
        MatcherKind::Svc => Matcher::Svc(SvcParams::zeros(c, m.config.reduction)?),
    };
    Ok(Model {
        config: m.config,
        backbone,
        matcher,
        head: HeadParams::zeros(c),
    })
}
