use super::{Model, ModelError};
use crate::geogrid::{Heading, RelCoord, TILE_CENTERS};
use crate::numcore::{Gradients, Tape, Tensor, Var, EPS};

/// Loss weights for position and heading.
pub const LAMBDA_POS: f64 = 0.8;
pub const LAMBDA_HEADING: f64 = 0.2;
pub const SMOOTH_L1_BETA: f64 = 1.0;
/// Subtracted from every input pixel before the backbone.
pub const INPUT_MEAN: f64 = 0.5;

/// The four tiles of a block in canonical order, either as raw `[3, H, W]`
/// images (training mode) or as precomputed `[K·D]` descriptors
/// (operating mode).
#[derive(Debug, Clone, Copy)]
pub enum TileInput<'a> {
    Raw(&'a [Tensor]),
    Features(&'a [Tensor]),
}

/// Model parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Tape handles of every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Backbone features `[HW, D]`.
    pub f: Var,
    /// Non-local output `[HW, D]`; equals `f` when GLUF is disabled.
    pub x: Var,
    /// Soft assignments `[HW, K]`, when GLUF is enabled.
    pub w: Option<Var>,
    /// Affinities `[HW, K]`, when GLUF is enabled.
    pub rho: Option<Var>,
    /// Normalized cluster descriptors `[K, D]`, when GLUF is enabled.
    pub d_tilde: Option<Var>,
    pub u: Var,
    /// Tile descriptors `[4, KD]`.
    pub b: Var,
    /// Coordinate embeddings `[4, KD]`.
    pub e: Var,
    pub b_tilde: Var,
    /// `[4]`
    pub alpha: Var,
    /// `[1, 2]`
    pub q: Var,
    /// `[1, KD]`
    pub f_ca: Var,
    /// `[1, 2KD + 2]`
    pub phi: Var,
    /// `[1, 2]`
    pub p_hat: Var,
    /// `[1, 2]`, unnormalized
    pub h_raw: Var,
}

/// Values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub f: Tensor,
    pub x: Tensor,
    pub w: Option<Tensor>,
    pub rho: Option<Tensor>,
    pub d_tilde: Option<Tensor>,
    pub u: Tensor,
    pub b: Tensor,
    pub e: Tensor,
    pub b_tilde: Tensor,
    pub alpha: Tensor,
    pub q: Tensor,
    pub f_ca: Tensor,
    pub phi: Tensor,
    pub p_hat: Tensor,
    pub h_raw: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub rel: RelCoord,
    /// Unit-normalized heading; angle 0 when the raw output vanishes.
    pub heading: Heading,
    pub alpha: [f64; 4],
    pub q: [f64; 2],
}

/// Canonical tile coordinates as a `[4, 2]` tensor.
pub fn tile_centers() -> Tensor {
    Tensor::new(&[4, 2], TILE_CENTERS.iter().flatten().copied().collect()).expect("4x2")
}

impl Model {
    /// Records the parameters on `tape`; `trainable` leaves receive
    /// gradients.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        let vars = self.params.entries.iter().map(|p| tape.leaf(p.value.clone(), trainable)).collect();
        Bound { vars }
    }

    fn check_image(&self, t: &Tensor, what: &str) -> Result<(), ModelError> {
        let s = t.shape();
        if s.len() != 3
            || s[0] != 3
            || self.config.feature_side(s[1]).is_none()
            || self.config.feature_side(s[2]).is_none()
        {
            return Err(ModelError::Dimension(format!(
                "{what} must be [3, H, W] large enough for the backbone, got {s:?}"
            )));
        }
        Ok(())
    }

    /// Conv stages with ReLU; returns `F` as `[HW, D]`.
    pub fn backbone(&self, tape: &Tape, b: &Bound, img: Var) -> Result<Var, ModelError> {
        let mut h = img;
        for &(w, bias) in &self.params.layout.backbone {
            let c = tape.conv2d(h, b.vars[w], self.config.backbone_stride)?;
            h = tape.relu(tape.add_bias(c, b.vars[bias], 0)?);
        }
        let s = tape.shape(h);
        let flat = tape.reshape(h, &[s[0], s[1] * s[2]])?;
        Ok(tape.transpose(flat)?)
    }

    /// Embedded-Gaussian non-local block: `X = F + softmax(θφᵀ)·g·W_z`.
    pub fn nonlocal(&self, tape: &Tape, b: &Bound, f: Var) -> Result<Var, ModelError> {
        let l = &self.params.layout;
        let theta = tape.matmul(f, b.vars[l.nl_theta])?;
        let phi = tape.matmul(f, b.vars[l.nl_phi])?;
        let g = tape.matmul(f, b.vars[l.nl_g])?;
        let scores = tape.matmul(theta, tape.transpose(phi)?)?;
        let attn = tape.softmax(scores, 1)?;
        let y = tape.matmul(attn, g)?;
        let z = tape.matmul(y, b.vars[l.nl_z])?;
        Ok(tape.add(f, z)?)
    }

    /// Soft assignment `w = softmax_k(a_kᵀx_p − ‖a_k‖)` and affinity
    /// `ρ = ReLU(a_kᵀx_p)`, both `[HW, K]`.
    pub fn cluster_assign(&self, tape: &Tape, x: Var, centers: Var) -> Result<(Var, Var), ModelError> {
        let dots = tape.matmul(x, tape.transpose(centers)?)?;
        let norms = tape.norm(centers, 1)?;
        let logits = tape.add_bias(dots, tape.scale(norms, -1.0), 1)?;
        Ok((tape.softmax(logits, 1)?, tape.relu(dots)))
    }

    /// Aggregates `X` into the unit-norm descriptor `u` (`[1, KD]`).
    /// Returns `(u, w, ρ, d̃)`.
    pub fn gluf(&self, tape: &Tape, b: &Bound, x: Var) -> Result<(Var, Var, Var, Var), ModelError> {
        let (w, rho) = self.cluster_assign(tape, x, b.vars[self.params.layout.centers])?;
        let weight = tape.mul(w, rho)?;
        let d = tape.matmul(tape.transpose(weight)?, x)?;
        let d_tilde = tape.l2_normalize(d, 1, EPS)?;
        let flat = tape.reshape(d_tilde, &[1, self.config.kd()])?;
        let u = tape.l2_normalize(flat, 1, EPS)?;
        Ok((u, w, rho, d_tilde))
    }

    /// Global average of `F` repeated K times and normalized; stands in for
    /// GLUF when it is disabled.
    pub fn pooled(&self, tape: &Tape, f: Var) -> Result<Var, ModelError> {
        let hw = tape.shape(f)[0];
        let mean = tape.scale(tape.sum_axis(f, 0)?, 1.0 / hw as f64);
        let row = tape.reshape(mean, &[1, self.config.d])?;
        let rep = tape.concat(&vec![row; self.config.k], 1)?;
        Ok(tape.l2_normalize(rep, 1, EPS)?)
    }

    fn encode_full(&self, tape: &Tape, b: &Bound, img: &Tensor) -> Result<EncodeVars, ModelError> {
        self.check_image(img, "image")?;
        let mut centered = img.clone();
        centered.data_mut().iter_mut().for_each(|v| *v -= INPUT_MEAN);
        let input = tape.constant(centered);
        let f = self.backbone(tape, b, input)?;
        if self.config.toggles.use_gluf {
            let x = self.nonlocal(tape, b, f)?;
            let (u, w, rho, d_tilde) = self.gluf(tape, b, x)?;
            Ok(EncodeVars { f, x, u, w: Some(w), rho: Some(rho), d_tilde: Some(d_tilde) })
        } else {
            let u = self.pooled(tape, f)?;
            Ok(EncodeVars { f, x: f, u, w: None, rho: None, d_tilde: None })
        }
    }

    /// Descriptor `[1, KD]` of an image on `tape`; the shared encoder for
    /// UAV patches and tiles.
    pub fn encode(&self, tape: &Tape, b: &Bound, img: &Tensor) -> Result<Var, ModelError> {
        Ok(self.encode_full(tape, b, img)?.u)
    }

    /// Descriptor `[KD]` of one image, without gradients.
    pub fn encode_value(&self, img: &Tensor) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        let b = self.bind(&tape, false);
        let u = self.encode(&tape, &b, img)?;
        Ok(tape.value(u).reshaped(&[self.config.kd()])?)
    }

    /// Coordinate embeddings `E = RCE(𝒞)` (`[4, KD]`), or zeros when RCE is
    /// disabled.
    pub fn rce(&self, tape: &Tape, b: &Bound) -> Result<Var, ModelError> {
        if !self.config.toggles.use_rce {
            return Ok(tape.constant(Tensor::zeros(&[4, self.config.kd()])));
        }
        let mut y = tape.constant(tile_centers());
        for &(w, bias) in &self.params.layout.rce {
            y = tape.relu(tape.add_bias(tape.matmul(y, b.vars[w])?, b.vars[bias], 1)?);
        }
        Ok(y)
    }

    /// `α = softmax_j cos(u, b̃_j)` and `q = Σ α_j c_j` (`[1, 2]`).
    pub fn psg(&self, tape: &Tape, u: Var, b_tilde: Var) -> Result<(Var, Var), ModelError> {
        let cos = tape.cosine_rows(u, b_tilde, EPS)?;
        let alpha = tape.softmax(cos, 0)?;
        let row = tape.reshape(alpha, &[1, 4])?;
        let q = tape.matmul(row, tape.constant(tile_centers()))?;
        Ok((alpha, q))
    }

    /// Single-query attention `softmax(QKᵀ/√d)·V` with `Q = uW^Q`,
    /// `K = B̃W^K`, `V = B̃W^V`; returns `[1, KD]`.
    pub fn cross_attention(&self, tape: &Tape, b: &Bound, u: Var, b_tilde: Var) -> Result<Var, ModelError> {
        let l = &self.params.layout;
        let q = tape.matmul(u, b.vars[l.wq])?;
        let k = tape.matmul(b_tilde, b.vars[l.wk])?;
        let v = tape.matmul(b_tilde, b.vars[l.wv])?;
        let logits = tape.scale(tape.matmul(q, tape.transpose(k)?)?, 1.0 / (self.config.kd() as f64).sqrt());
        let a = tape.softmax(logits, 1)?;
        Ok(tape.matmul(a, v)?)
    }

    fn mlp(&self, tape: &Tape, b: &Bound, x: Var, layers: &[(usize, usize)]) -> Result<Var, ModelError> {
        let mut y = x;
        for (i, &(w, bias)) in layers.iter().enumerate() {
            y = tape.add_bias(tape.matmul(y, b.vars[w])?, b.vars[bias], 1)?;
            if i + 1 < layers.len() {
                y = tape.relu(y);
            }
        }
        Ok(y)
    }

    /// Position and raw heading outputs, each `[1, 2]`.
    pub fn heads(&self, tape: &Tape, b: &Bound, phi: Var) -> Result<(Var, Var), ModelError> {
        let l = &self.params.layout;
        Ok((self.mlp(tape, b, phi, &l.pos_head)?, self.mlp(tape, b, phi, &l.heading_head)?))
    }

    /// The full pass for one UAV patch against one block.
    pub fn forward_vars(
        &self,
        tape: &Tape,
        b: &Bound,
        uvp: &Tensor,
        tiles: TileInput,
    ) -> Result<ForwardVars, ModelError> {
        let kd = self.config.kd();
        let enc = self.encode_full(tape, b, uvp)?;
        let rows = match tiles {
            TileInput::Raw(imgs) => {
                if imgs.len() != 4 {
                    return Err(ModelError::Dimension(format!("expected 4 tiles, got {}", imgs.len())));
                }
                imgs.iter().map(|t| self.encode(tape, b, t)).collect::<Result<Vec<_>, _>>()?
            }
            TileInput::Features(feats) => {
                if feats.len() != 4 || feats.iter().any(|t| t.len() != kd) {
                    return Err(ModelError::Dimension(format!("expected 4 tile descriptors of length {kd}")));
                }
                feats
                    .iter()
                    .map(|t| Ok(tape.constant(t.clone().reshaped(&[1, kd])?)))
                    .collect::<Result<Vec<_>, ModelError>>()?
            }
        };
        let bmat = tape.concat(&rows, 0)?;
        let e = self.rce(tape, b)?;
        let b_tilde = tape.add(bmat, e)?;
        let (alpha, q_psg) = self.psg(tape, enc.u, b_tilde)?;
        let q = if self.config.toggles.use_psg { q_psg } else { tape.constant(Tensor::zeros(&[1, 2])) };
        let f_ca = if self.config.toggles.use_ca {
            self.cross_attention(tape, b, enc.u, b_tilde)?
        } else {
            tape.constant(Tensor::zeros(&[1, kd]))
        };
        let phi = tape.concat(&[enc.u, f_ca, q], 1)?;
        let (p_hat, h_raw) = self.heads(tape, b, phi)?;
        Ok(ForwardVars {
            f: enc.f,
            x: enc.x,
            w: enc.w,
            rho: enc.rho,
            d_tilde: enc.d_tilde,
            u: enc.u,
            b: bmat,
            e,
            b_tilde,
            alpha,
            q,
            f_ca,
            phi,
            p_hat,
            h_raw,
        })
    }

    pub fn forward(&self, uvp: &Tensor, tiles: TileInput) -> Result<ForwardTrace, ModelError> {
        let tape = Tape::new();
        let b = self.bind(&tape, false);
        let v = self.forward_vars(&tape, &b, uvp, tiles)?;
        let get = |x: Var| tape.value(x);
        Ok(ForwardTrace {
            f: get(v.f),
            x: get(v.x),
            w: v.w.map(get),
            rho: v.rho.map(get),
            d_tilde: v.d_tilde.map(get),
            u: get(v.u),
            b: get(v.b),
            e: get(v.e),
            b_tilde: get(v.b_tilde),
            alpha: get(v.alpha),
            q: get(v.q),
            f_ca: get(v.f_ca),
            phi: get(v.phi),
            p_hat: get(v.p_hat),
            h_raw: get(v.h_raw),
        })
    }

    pub fn predict(&self, uvp: &Tensor, tiles: TileInput) -> Result<Prediction, ModelError> {
        let t = self.forward(uvp, tiles)?;
        Ok(prediction_from(&t))
    }

    /// `λ_p·SmoothL1(p̂, rel) + λ_h·SmoothL1(ĥ, (cos θ, sin θ))` on the tape.
    pub fn loss(
        &self,
        tape: &Tape,
        p_hat: Var,
        h_raw: Var,
        rel: RelCoord,
        heading: Heading,
    ) -> Result<Var, ModelError> {
        let rel_t = tape.constant(Tensor::new(&[1, 2], vec![rel.x, rel.y])?);
        let h_t = tape.constant(Tensor::new(&[1, 2], heading.vec.to_vec())?);
        let lp = tape.smooth_l1(p_hat, rel_t, SMOOTH_L1_BETA)?;
        let lh = tape.smooth_l1(h_raw, h_t, SMOOTH_L1_BETA)?;
        Ok(tape.add(tape.scale(lp, LAMBDA_POS), tape.scale(lh, LAMBDA_HEADING))?)
    }

    /// Loss of one sample and its gradient for every parameter, in storage
    /// order.
    pub fn loss_and_grads(
        &self,
        uvp: &Tensor,
        tiles: TileInput,
        rel: RelCoord,
        heading: Heading,
    ) -> Result<(f64, Vec<Tensor>), ModelError> {
        let tape = Tape::new();
        let b = self.bind(&tape, true);
        let (loss, grads) = self.loss_on_tape(&tape, &b, uvp, tiles, rel, heading)?;
        Ok((loss, b.vars.iter().map(|v| grads.get(*v)).collect()))
    }

    fn loss_on_tape(
        &self,
        tape: &Tape,
        b: &Bound,
        uvp: &Tensor,
        tiles: TileInput,
        rel: RelCoord,
        heading: Heading,
    ) -> Result<(f64, Gradients), ModelError> {
        let v = self.forward_vars(tape, b, uvp, tiles)?;
        let loss = self.loss(tape, v.p_hat, v.h_raw, rel, heading)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), grads))
    }

    /// Loss of one sample without gradients.
    pub fn loss_value(
        &self,
        uvp: &Tensor,
        tiles: TileInput,
        rel: RelCoord,
        heading: Heading,
    ) -> Result<f64, ModelError> {
        let tape = Tape::new();
        let b = self.bind(&tape, false);
        let v = self.forward_vars(&tape, &b, uvp, tiles)?;
        let loss = self.loss(&tape, v.p_hat, v.h_raw, rel, heading)?;
        Ok(tape.value(loss).item())
    }
}

struct EncodeVars {
    f: Var,
    x: Var,
    u: Var,
    w: Option<Var>,
    rho: Option<Var>,
    d_tilde: Option<Var>,
}

pub fn prediction_from(t: &ForwardTrace) -> Prediction {
    let p = t.p_hat.data();
    let h = t.h_raw.data();
    let heading = Heading::from_vector([h[0], h[1]]).unwrap_or_else(|_| Heading::from_degrees(0.0));
    let a = t.alpha.data();
    Prediction {
        rel: RelCoord::new(p[0], p[1]),
        heading,
        alpha: [a[0], a[1], a[2], a[3]],
        q: [t.q.data()[0], t.q.data()[1]],
    }
}
