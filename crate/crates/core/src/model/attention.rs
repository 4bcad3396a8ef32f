//! Attention blocks of the decoder.

use crate::autodiff::{Array, Graph, Var};
use crate::camgeom::{bilinear_sample, project_points, CameraParams};
use crate::error::{shape_err, Result};

/// Anchor placed for joints behind a camera: far off every map, so all samples are zero.
const OFF_MAP: f64 = -1.0e6;

/// `x @ w (+ b)`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

/// Multi-head self-attention weights; all matrices are `[C, C]`, biases `[C]`.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttnWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Scaled dot-product self-attention over the rows of `x: [M, C]` with `heads` heads.
pub fn self_attention(g: &mut Graph, x: Var, w: &SelfAttnWeights, heads: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    if !c.is_multiple_of(heads) {
        return Err(shape_err!("{c} channels do not split into {heads} heads"));
    }
    let d = c / heads;
    let q = linear(g, x, w.wq, Some(w.bq))?;
    let k = linear(g, x, w.wk, Some(w.bk))?;
    let v = linear(g, x, w.wv, Some(w.bv))?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow(q, 1, h * d, d)?;
        let kh = g.narrow(k, 1, h * d, d)?;
        let vh = g.narrow(v, 1, h * d, d)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax(s, 1)?;
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    linear(g, cat, w.wo, Some(w.bo))
}

/// Projective attention weights, shared across views.
#[derive(Clone, Copy, Debug)]
pub struct ProjAttnWeights {
    /// `[C, 2K]` and `[2K]`: sampling offsets in feature cells.
    pub offset_w: Var,
    pub offset_b: Var,
    /// `[C, K]` and `[K]`: attention logits over the `K` points.
    pub attn_w: Var,
    pub attn_b: Var,
    /// `[C, C]`, applied to the attended feature of each view.
    pub value_w: Var,
    /// `[V * C, C]` and `[C]`: fuses the views.
    pub out_w: Var,
    pub out_b: Var,
}

/// Where projective attention sampled, in feature-grid coordinates.
#[derive(Clone, Debug, Default)]
pub struct ProjAttnTrace {
    /// Per view, `[M, 2]` anchors.
    pub anchors: Vec<Array>,
    /// Per view, `[M * K, 2]` sampling points, joint-major.
    pub points: Vec<Array>,
    /// Per view, whether each joint is in front of the camera.
    pub front: Vec<Vec<bool>>,
}

/// Projective attention of joint features `q: [M, C]` at positions `y: [M, 3]` over the
/// per-view feature maps `feats[v]: [C, H, W]`.
///
/// For each view the joint is projected to an anchor; the feature there is added to the
/// query, which predicts `K` offsets and softmax weights; the weighted sum of the
/// bilinear samples is projected by the value weight. Views are concatenated and fused.
/// Views behind which a joint lies contribute zero for that joint. `y` is used as given;
/// callers detach it to keep gradients out of the projection.
pub fn projective_attention(
    g: &mut Graph,
    q: Var,
    y: Var,
    feats: &[Var],
    cams: &[CameraParams],
    w: &ProjAttnWeights,
    points: usize,
) -> Result<(Var, ProjAttnTrace)> {
    if feats.len() != cams.len() || feats.is_empty() {
        return Err(shape_err!(
            "projective attention needs one camera per view, got {} maps and {} cameras",
            feats.len(),
            cams.len()
        ));
    }
    let (m, c) = (g.shape(q)[0], g.shape(q)[1]);
    if g.shape(y) != [m, 3] {
        return Err(shape_err!("positions must be [{m}, 3], got {:?}", g.shape(y)));
    }
    let k = points;
    let repeat: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let mut trace = ProjAttnTrace::default();
    let mut per_view = Vec::with_capacity(feats.len());
    for (&map, cam) in feats.iter().zip(cams) {
        let ms = g.shape(map).to_vec();
        if ms.len() != 3 || ms[0] != c {
            return Err(shape_err!("feature map must be [{c}, H, W], got {ms:?}"));
        }
        let (h, wd) = (ms[1], ms[2]);
        let (pix, front) = project_points(g, y, cam)?;
        let to_grid = g.constant(Array::from_vec(vec![
            wd as f64 / cam.width as f64,
            h as f64 / cam.height as f64,
        ]));
        let grid = g.mul(pix, to_grid)?;
        let keep: Vec<f64> = front.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
        let keep_v = g.constant(Array::new(&[m, 1], keep.clone())?);
        let anchors = if front.iter().all(|&f| f) {
            grid
        } else {
            let kept = g.mul(grid, keep_v)?;
            let far = g.constant(Array::new(
                &[m, 1],
                keep.iter().map(|f| (1.0 - f) * OFF_MAP).collect(),
            )?);
            g.add(kept, far)?
        };

        let at_anchor = bilinear_sample(g, map, anchors)?;
        let u = g.add(q, at_anchor)?;
        let offsets = linear(g, u, w.offset_w, Some(w.offset_b))?;
        let offsets = g.reshape(offsets, &[m * k, 2])?;
        let base = g.gather_rows(anchors, &repeat)?;
        let pts = g.add(base, offsets)?;
        let logits = linear(g, u, w.attn_w, Some(w.attn_b))?;
        let a = g.softmax(logits, 1)?;
        let a = g.reshape(a, &[m, k, 1])?;
        let samples = bilinear_sample(g, map, pts)?;
        let samples = g.reshape(samples, &[m, k, c])?;
        let weighted = g.mul(samples, a)?;
        let pooled = g.sum_axis(weighted, 1)?;
        let mut f = g.matmul(pooled, w.value_w)?;
        if !front.iter().all(|&f| f) {
            f = g.mul(f, keep_v)?;
        }

        trace.anchors.push(g.value(anchors).clone());
        trace.points.push(g.value(pts).clone());
        trace.front.push(front);
        per_view.push(f);
    }
    let cat = if per_view.len() == 1 {
        per_view[0]
    } else {
        g.concat(&per_view, 1)?
    };
    Ok((linear(g, cat, w.out_w, Some(w.out_b))?, trace))
}

/// All locations of all views as `[V * H * W, C]` tokens, view-major then row-major.
pub fn dense_tokens(g: &mut Graph, feats: &[Var]) -> Result<Var> {
    let mut toks = Vec::with_capacity(feats.len());
    for &f in feats {
        let s = g.shape(f).to_vec();
        if s.len() != 3 {
            return Err(shape_err!("feature map must be [C, H, W], got {s:?}"));
        }
        let flat = g.reshape(f, &[s[0], s[1] * s[2]])?;
        toks.push(g.transpose(flat)?);
    }
    if toks.len() == 1 {
        Ok(toks[0])
    } else {
        g.concat(&toks, 0)
    }
}

/// Single-head scaled dot-product attention of `q: [M, C]` over `tokens: [T, C]`.
/// Returns the attended values `[M, C]` and the weights `[M, T]`.
pub fn dense_attention(
    g: &mut Graph,
    q: Var,
    tokens: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<(Var, Var)> {
    let c = g.shape(q)[1];
    let qq = g.matmul(q, wq)?;
    let kk = g.matmul(tokens, wk)?;
    let vv = g.matmul(tokens, wv)?;
    let kt = g.transpose(kk)?;
    let s = g.matmul(qq, kt)?;
    let s = g.scale(s, 1.0 / (c as f64).sqrt())?;
    let a = g.softmax(s, 1)?;
    Ok((g.matmul(a, vv)?, a))
}
