//! Forward pass of the factorised encoder.
//!
//! ```text
//! video ─ patch_embed ─ spatial_encode ─ [adapter_apply] ─ temporal_encode ─ head
//!          (per frame)    (per frame)      (per frame)        (across frames)
//! ```

use serde::{Deserialize, Serialize};

use super::config::FEModelConfig;
use super::params::{Group, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// Whether the adapter sits between the spatial and temporal stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Sfa,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Sfa => "sfa",
        })
    }
}

/// A model is a config plus the store it reads from.
pub struct FEModel<'a, F: Real> {
    pub config: &'a FEModelConfig,
    pub params: &'a ParamStore<F>,
}

/// Rearrange `[B, T, H, W, C]` pixels into `[B·T·N, P·P·C]` patch rows.
/// Patches are ordered row-major over the grid; each row is `(py, px, c)`.
pub fn patchify<F: Real>(video: &Tensor<F>, cfg: &FEModelConfig) -> Result<Tensor<F>> {
    let &[b, t, h, w, c] = video.shape() else {
        return Err(Error::InvalidShape {
            op: "patch_embed",
            reason: format!("expected video [B, T, H, W, C], got {:?}", video.shape()),
        });
    };
    if h != cfg.image_size || w != cfg.image_size || c != cfg.channels {
        return Err(Error::InvalidShape {
            op: "patch_embed",
            reason: format!(
                "frame {h}x{w}x{c} does not match config {0}x{0}x{1}",
                cfg.image_size, cfg.channels
            ),
        });
    }
    if t != cfg.num_frames {
        return Err(Error::FrameMismatch(format!(
            "video has {t} frames, model expects {}",
            cfg.num_frames
        )));
    }
    let p = cfg.patch_size;
    let side = h / p;
    let src = video.data();
    let mut out = Vec::with_capacity(src.len());
    for frame in src.chunks_exact(h * w * c) {
        for gy in 0..side {
            for gx in 0..side {
                for py in 0..p {
                    let row = (gy * p + py) * w * c + gx * p * c;
                    out.extend_from_slice(&frame[row..row + p * c]);
                }
            }
        }
    }
    Tensor::new(&[b * t * side * side, p * p * c], out)
}

impl<'a, F: Real> FEModel<'a, F> {
    pub fn new(config: &'a FEModelConfig, params: &'a ParamStore<F>) -> Self {
        FEModel { config, params }
    }

    fn p(&self, name: &str) -> Result<&Tensor<F>> {
        self.params.get(name)
    }

    fn layer_norm(&self, g: &Graph<F>, x: &Tensor<F>, prefix: &str) -> Result<Tensor<F>> {
        g.layer_norm(
            x,
            self.p(&format!("{prefix}.gamma"))?,
            self.p(&format!("{prefix}.beta"))?,
            LN_EPS,
        )
    }

    fn linear(&self, g: &Graph<F>, x: &Tensor<F>, prefix: &str) -> Result<Tensor<F>> {
        g.linear(
            x,
            self.p(&format!("{prefix}.weight"))?,
            self.p(&format!("{prefix}.bias"))?,
        )
    }

    /// Pre-norm transformer block over `[M, n, d]`.
    pub fn encoder_block(&self, g: &Graph<F>, x: &Tensor<F>, prefix: &str) -> Result<Tensor<F>> {
        let h = self.layer_norm(g, x, &format!("{prefix}.ln1"))?;
        let q = self.linear(g, &h, &format!("{prefix}.attn.q"))?;
        let k = self.linear(g, &h, &format!("{prefix}.attn.k"))?;
        let v = self.linear(g, &h, &format!("{prefix}.attn.v"))?;
        let a = g.attention(&q, &k, &v, self.config.heads)?;
        let o = self.linear(g, &a, &format!("{prefix}.attn.o"))?;
        let x = g.add(x, &o)?;
        let h = self.layer_norm(g, &x, &format!("{prefix}.ln2"))?;
        let h = g.gelu(&self.linear(g, &h, &format!("{prefix}.mlp.fc1"))?)?;
        let h = self.linear(g, &h, &format!("{prefix}.mlp.fc2"))?;
        g.add(&x, &h)
    }

    /// `[B, T, H, W, C]` → `[B, T, N + 1, d]`: per-frame patch projection,
    /// class token, spatial positional embedding.
    pub fn patch_embed(&self, g: &Graph<F>, video: &Tensor<F>) -> Result<Tensor<F>> {
        let cfg = self.config;
        let patches = patchify(video, cfg)?;
        let (b, t) = (video.shape()[0], video.shape()[1]);
        let n = cfg.num_patches();
        let x = self.linear(g, &patches, "spatial.patch_embed")?;
        let x = g.reshape(&x, &[b * t, n, cfg.hidden])?;
        let x = g.prepend_token(&x, self.p("spatial.cls_token")?)?;
        let x = g.add_broadcast(&x, self.p("spatial.pos_embed")?)?;
        g.reshape(&x, &[b, t, n + 1, cfg.hidden])
    }

    /// `[B, T, N + 1, d]` → `[B, T, d]`. Frames never attend to each other.
    pub fn spatial_encode(&self, g: &Graph<F>, tokens: &Tensor<F>) -> Result<Tensor<F>> {
        let &[b, t, n, d] = tokens.shape() else {
            return Err(Error::InvalidShape {
                op: "spatial_encode",
                reason: format!("expected [B, T, N + 1, d], got {:?}", tokens.shape()),
            });
        };
        let mut x = g.reshape(tokens, &[b * t, n, d])?;
        for i in 0..self.config.spatial_depth {
            x = self.encoder_block(g, &x, &format!("spatial.blocks.{i}"))?;
        }
        let cls = g.select_token(&x, 0)?;
        let cls = self.layer_norm(g, &cls, "spatial.ln_final")?;
        g.reshape(&cls, &[b, t, d])
    }

    /// Residual two-layer MLP applied to every frame representation.
    pub fn adapter_apply(&self, g: &Graph<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        if !self.params.has_group(Group::Adapter) {
            return Err(Error::MissingGroup("adapter"));
        }
        let h = g.gelu(&self.linear(g, x, "adapter.fc1")?)?;
        let h = self.linear(g, &h, "adapter.fc2")?;
        g.add(x, &h)
    }

    /// `[B, T, d]` → `[B, d]`.
    pub fn temporal_encode(&self, g: &Graph<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let &[_, t, _] = x.shape() else {
            return Err(Error::InvalidShape {
                op: "temporal_encode",
                reason: format!("expected [B, T, d], got {:?}", x.shape()),
            });
        };
        let pos = self.p("temporal.pos_embed")?;
        if pos.shape()[0] != t {
            return Err(Error::FrameMismatch(format!(
                "input has {t} frames but the temporal positional table has {}",
                pos.shape()[0]
            )));
        }
        let x = g.add_broadcast(x, pos)?;
        let mut x = g.prepend_token(&x, self.p("temporal.cls_token")?)?;
        for i in 0..self.config.temporal_depth {
            x = self.encoder_block(g, &x, &format!("temporal.blocks.{i}"))?;
        }
        let cls = g.select_token(&x, 0)?;
        self.layer_norm(g, &cls, "temporal.ln_final")
    }

    pub fn head(&self, g: &Graph<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.linear(g, x, "head")
    }

    /// Per-frame representations fed to the temporal stage.
    pub fn frame_features(&self, g: &Graph<F>, video: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        let x = self.spatial_encode(g, &self.patch_embed(g, video)?)?;
        match mode {
            Mode::Baseline => Ok(x),
            Mode::Sfa => self.adapter_apply(g, &x),
        }
    }

    /// Order-invariant control: logits from the mean of the per-frame
    /// representations, with no temporal stage.
    pub fn forward_mean_pooled(&self, g: &Graph<F>, video: &Tensor<F>) -> Result<Tensor<F>> {
        let x = self.frame_features(g, video, Mode::Baseline)?;
        self.head(g, &g.mean_tokens(&x)?)
    }

    /// Logits `[B, num_classes]`.
    pub fn forward(&self, g: &Graph<F>, video: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        if mode == Mode::Sfa && !self.params.has_group(Group::Adapter) {
            return Err(Error::MissingGroup("adapter"));
        }
        let x = self.frame_features(g, video, mode)?;
        let x = self.temporal_encode(g, &x)?;
        self.head(g, &x)
    }
}

/// Resample a `[T_src, d]` table to `T_dst` rows by piecewise-linear
/// interpolation, treating row `i` as a sample at `i / (T_src − 1)`.
pub fn interpolate_temporal_posemb<F: Real>(table: &Tensor<F>, t_dst: usize) -> Result<Tensor<F>> {
    let &[t_src, d] = table.shape() else {
        return Err(Error::InvalidShape {
            op: "interpolate_temporal_posemb",
            reason: format!("expected [T, d], got {:?}", table.shape()),
        });
    };
    if t_dst == t_src {
        return Ok(table.detached(false));
    }
    if t_dst == 0 || t_src < 2 {
        return Err(Error::InvalidShape {
            op: "interpolate_temporal_posemb",
            reason: format!("cannot resample {t_src} rows to {t_dst}"),
        });
    }
    let src = table.data();
    let mut out = Vec::with_capacity(t_dst * d);
    for i in 0..t_dst {
        let pos = if t_dst == 1 {
            0.0
        } else {
            i as f64 * (t_src - 1) as f64 / (t_dst - 1) as f64
        };
        let lo = (pos.floor() as usize).min(t_src - 2);
        let frac = F::from_f64_lossy(pos - lo as f64);
        let (a, b) = (&src[lo * d..(lo + 1) * d], &src[(lo + 1) * d..(lo + 2) * d]);
        out.extend(a.iter().zip(b).map(|(&x, &y)| x + (y - x) * frac));
    }
    Tensor::new(&[t_dst, d], out)
}
