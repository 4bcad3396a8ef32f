//! The multi-view pose transformer: joint queries, feature encoding with positional
//! channels, and a stack of decoder layers that progressively regress 3D joints.

mod attention;
mod checkpoint;
mod config;

pub use attention::{
    dense_attention, dense_tokens, linear, projective_attention, self_attention, ProjAttnTrace,
    ProjAttnWeights, SelfAttnWeights,
};
pub use checkpoint::{Checkpoint, Dtype, CHECKPOINT_VERSION};
pub use config::{AttentionMode, ModelConfig, PosEncoding, QueryMode};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Array, Bindings, Graph, ParamId, ParamStore, Var};
use crate::camgeom::{coord_field, ray_field_strided, CameraParams};
use crate::error::{shape_err, Error, Result};
use crate::scenegen::Scene;

const LN_EPS: f64 = 1e-5;
/// Prior probability behind the initial confidence bias.
const CONFIDENCE_PRIOR: f64 = 0.01;

/// Feature maps and cameras of one scene: everything the network reads.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    /// Per view `[C_in, H, W]`.
    pub features: &'a [Array],
    pub cameras: &'a [CameraParams],
}

impl<'a> From<&'a Scene> for ModelInput<'a> {
    fn from(s: &'a Scene) -> Self {
        Self {
            features: &s.features,
            cameras: &s.cameras,
        }
    }
}

/// Parameter handles of one decoder layer.
#[derive(Clone, Debug)]
struct LayerIds {
    sa: [ParamId; 8],
    ln: [ParamId; 6],
    pa: Option<[ParamId; 7]>,
    dense: Option<[ParamId; 5]>,
    ffn: [ParamId; 4],
    reg: [ParamId; 4],
    conf: [ParamId; 2],
}

#[derive(Clone, Debug)]
struct Ids {
    stem: [ParamId; 2],
    ray: [ParamId; 2],
    query: Vec<ParamId>,
    adapt: Option<ParamId>,
    init: [ParamId; 2],
    layers: Vec<LayerIds>,
}

/// Outputs of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    /// `[N, J, 3]`, meters, inside the workspace.
    pub poses: Var,
    /// `[N]`: mean of the joint confidences of each person.
    pub confidences: Var,
    /// `[M]` joint confidence logits.
    pub joint_logits: Var,
    /// `[M, 3]` offset proposed by this layer (before clamping to the workspace).
    pub offsets: Var,
    /// `[M, 3]` positions after this layer.
    pub positions: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[M, C]` joint queries.
    pub queries: Var,
    /// `[M, 3]` positions before the first layer.
    pub initial_positions: Var,
    pub layers: Vec<LayerOutput>,
    /// Per layer, where projective attention sampled (empty in dense mode).
    pub traces: Vec<ProjAttnTrace>,
}

impl ForwardOutput {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("at least one layer")
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Array {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.random_range(-a..=a)).collect()).expect("positive shape")
}

fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array {
    xavier(rng, &[fan_in, fan_out], fan_in, fan_out)
}

impl Model {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &config;
        let (c, cin, n, j, v, k, f) = (
            cfg.channels,
            cfg.in_channels,
            cfg.persons,
            cfg.joints,
            cfg.views,
            cfg.points,
            cfg.ffn(),
        );
        let mut ps = ParamStore::new();
        let stem = [
            ps.add("stem.w", xavier(&mut rng, &[c, cin, 3, 3], cin * 9, c * 9)),
            ps.add("stem.b", Array::zeros(&[c])),
        ];
        let p = cfg.pos_encoding.channels();
        let ray = [
            ps.add("rayconv.w", xavier(&mut rng, &[c, c + p, 1, 1], c + p, c)),
            ps.add("rayconv.b", Array::zeros(&[c])),
        ];
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut embed = |rows: usize| {
            Array::new(&[rows, c], (0..rows * c).map(|_| normal.sample(&mut rng)).collect())
                .expect("positive shape")
        };
        let query = match cfg.query_mode {
            QueryMode::PerJoint => vec![ps.add("query.joint_embed", embed(n * j))],
            QueryMode::Hierarchical | QueryMode::HierarchicalAdaptive => vec![
                ps.add("query.person", embed(n)),
                ps.add("query.joint", embed(j)),
            ],
        };
        let adapt = (cfg.query_mode == QueryMode::HierarchicalAdaptive)
            .then(|| ps.add("query.adapt_w", linear_init(&mut rng, v * cin, c)));
        let init = [
            ps.add("init.w", linear_init(&mut rng, c, 3)),
            ps.add("init.b", Array::zeros(&[3])),
        ];
        let conf_bias = -((1.0 - CONFIDENCE_PRIOR) / CONFIDENCE_PRIOR).ln();
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut add = |name: &str, a: Array| ps.add(format!("layer{l}.{name}"), a);
            let mut sa = Vec::new();
            for m in ["q", "k", "v", "o"] {
                sa.push(add(&format!("self_attn.w{m}"), linear_init(&mut rng, c, c)));
                sa.push(add(&format!("self_attn.b{m}"), Array::zeros(&[c])));
            }
            let mut ln = Vec::new();
            for i in 1..=3 {
                ln.push(add(&format!("norm{i}.gamma"), Array::full(&[c], 1.0)));
                ln.push(add(&format!("norm{i}.beta"), Array::zeros(&[c])));
            }
            let pa = (cfg.attention == AttentionMode::Projective).then(|| {
                // offsets start on a unit circle around the anchor
                let ring: Vec<f64> = (0..k)
                    .flat_map(|i| {
                        let t = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                        [t.cos(), t.sin()]
                    })
                    .collect();
                [
                    add("proj_attn.offset_w", Array::zeros(&[c, 2 * k])),
                    add("proj_attn.offset_b", Array::from_vec(ring)),
                    add("proj_attn.attn_w", Array::zeros(&[c, k])),
                    add("proj_attn.attn_b", Array::zeros(&[k])),
                    add("proj_attn.value_w", linear_init(&mut rng, c, c)),
                    add("proj_attn.out_w", linear_init(&mut rng, v * c, c)),
                    add("proj_attn.out_b", Array::zeros(&[c])),
                ]
            });
            let dense = (cfg.attention == AttentionMode::Dense).then(|| {
                [
                    add("dense_attn.wq", linear_init(&mut rng, c, c)),
                    add("dense_attn.wk", linear_init(&mut rng, c, c)),
                    add("dense_attn.wv", linear_init(&mut rng, c, c)),
                    add("dense_attn.wo", linear_init(&mut rng, c, c)),
                    add("dense_attn.bo", Array::zeros(&[c])),
                ]
            });
            let ffn = [
                add("ffn.w1", linear_init(&mut rng, c, f)),
                add("ffn.b1", Array::zeros(&[f])),
                add("ffn.w2", linear_init(&mut rng, f, c)),
                add("ffn.b2", Array::zeros(&[c])),
            ];
            let reg = [
                add("reg.w1", linear_init(&mut rng, c, c)),
                add("reg.b1", Array::zeros(&[c])),
                add("reg.w2", Array::zeros(&[c, 3])),
                add("reg.b2", Array::zeros(&[3])),
            ];
            let conf = [
                add("conf.w", linear_init(&mut rng, c, 1)),
                add("conf.b", Array::full(&[1], conf_bias)),
            ];
            layers.push(LayerIds {
                sa: sa.try_into().expect("eight self-attention tensors"),
                ln: ln.try_into().expect("six norm tensors"),
                pa,
                dense,
                ffn,
                reg,
                conf,
            });
        }
        Ok(Self {
            config,
            params: ps,
            ids: Ids {
                stem,
                ray,
                query,
                adapt,
                init,
                layers,
            },
        })
    }

    /// Rebuilds a model from a configuration and named tensors (e.g. a checkpoint).
    pub fn from_tensors<'a>(
        config: ModelConfig,
        tensors: impl IntoIterator<Item = (&'a str, &'a Array)>,
    ) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut seen = 0;
        for (name, value) in tensors {
            if model.params.id(name).is_some() {
                model.params.set(name, value.clone())?;
                seen += 1;
            }
        }
        if seen != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint provides {seen} of {} model tensors",
                model.params.len()
            )));
        }
        Ok(model)
    }

    /// Number of query-embedding parameters actually allocated.
    pub fn query_embedding_params(&self) -> usize {
        self.ids.query.iter().map(|&id| self.params.get(id).len()).sum()
    }

    fn check_input(&self, input: &ModelInput) -> Result<(usize, usize)> {
        let cfg = &self.config;
        if input.features.len() != cfg.views || input.cameras.len() != cfg.views {
            return Err(Error::Config(format!(
                "model expects {} views, got {} feature maps and {} cameras",
                cfg.views,
                input.features.len(),
                input.cameras.len()
            )));
        }
        let s = input.features[0].shape();
        if s.len() != 3 || s[0] != cfg.in_channels {
            return Err(Error::Config(format!(
                "model expects [{}, H, W] features, got {s:?}",
                cfg.in_channels
            )));
        }
        if input.features.iter().any(|f| f.shape() != s) {
            return Err(shape_err!("feature maps differ in shape"));
        }
        if cfg.attention == AttentionMode::Dense && cfg.views * s[1] * s[2] > cfg.dense_cap {
            return Err(Error::Config(format!(
                "dense attention over {} locations exceeds the cap of {}",
                cfg.views * s[1] * s[2],
                cfg.dense_cap
            )));
        }
        Ok((s[1], s[2]))
    }

    /// Positional channels for one view, `[P, H, W]`.
    pub fn positional_channels(&self, cam: &CameraParams, h: usize, w: usize) -> Result<Option<Array>> {
        Ok(match self.config.pos_encoding {
            PosEncoding::None => None,
            PosEncoding::Coords2d => Some(coord_field(h, w)),
            PosEncoding::Rays => {
                if !cam.width.is_multiple_of(w) || !cam.height.is_multiple_of(h) || cam.width / w != cam.height / h {
                    return Err(Error::Config(format!(
                        "{}x{} image is not an integer multiple of the {w}x{h} feature grid",
                        cam.width, cam.height
                    )));
                }
                Some(ray_field_strided(cam, cam.width / w, h, w).dirs)
            }
        })
    }

    /// Concatenates positional channels to `z: [C, H, W]` and applies the 1x1 convolution.
    pub fn rayconv(&self, g: &mut Graph, b: &Bindings, z: Var, pos: Option<&Array>) -> Result<Var> {
        let input = match pos {
            Some(p) => {
                let pv = g.constant(p.clone());
                g.concat(&[z, pv], 0)?
            }
            None => z,
        };
        let [w, bias] = self.ids.ray;
        g.conv2d(input, b.var(w), Some(b.var(bias)), 1, 0)
    }

    /// Encoded per-view feature maps `[C, H, W]`.
    pub fn encode(&self, g: &mut Graph, b: &Bindings, input: &ModelInput) -> Result<Vec<Var>> {
        let (h, w) = self.check_input(input)?;
        let [sw, sb] = self.ids.stem;
        let mut out = Vec::with_capacity(input.features.len());
        for (feat, cam) in input.features.iter().zip(input.cameras) {
            let z = g.constant(feat.clone());
            let s = g.conv2d(z, b.var(sw), Some(b.var(sb)), 1, 1)?;
            let s = g.relu(s)?;
            let pos = self.positional_channels(cam, h, w)?;
            out.push(self.rayconv(g, b, s, pos.as_ref())?);
        }
        Ok(out)
    }

    /// Joint queries `[M, C]`, person-major.
    pub fn build_queries(&self, g: &mut Graph, b: &Bindings, features: &[Array]) -> Result<Var> {
        let cfg = &self.config;
        let (n, j, c) = (cfg.persons, cfg.joints, cfg.channels);
        let q = match cfg.query_mode {
            QueryMode::PerJoint => b.var(self.ids.query[0]),
            QueryMode::Hierarchical | QueryMode::HierarchicalAdaptive => {
                let h = b.var(self.ids.query[0]);
                let l = b.var(self.ids.query[1]);
                let h = g.reshape(h, &[n, 1, c])?;
                let sum = g.add(h, l)?;
                g.reshape(sum, &[n * j, c])?
            }
        };
        let Some(adapt) = self.ids.adapt else {
            return Ok(q);
        };
        if features.len() != cfg.views {
            return Err(Error::Config(format!(
                "query adaptation expects {} views, got {}",
                cfg.views,
                features.len()
            )));
        }
        let pooled: Vec<f64> = features
            .iter()
            .flat_map(|f| {
                let (ch, plane) = (f.shape()[0], f.len() / f.shape()[0]);
                (0..ch).map(move |k| f.data()[k * plane..(k + 1) * plane].iter().sum::<f64>() / plane as f64)
            })
            .collect();
        if pooled.len() != cfg.views * cfg.in_channels {
            return Err(shape_err!("pooled feature has {} entries", pooled.len()));
        }
        let pooled = g.constant(Array::new(&[1, pooled.len()], pooled)?);
        let gvec = g.matmul(pooled, b.var(adapt))?;
        g.add(q, gvec)
    }

    /// `lo + sigmoid(q W + b) * extent`, `[M, 3]`.
    pub fn initial_positions(&self, g: &mut Graph, b: &Bindings, queries: Var) -> Result<Var> {
        let ws = &self.config.workspace;
        let [w, bias] = self.ids.init;
        let z = linear(g, queries, b.var(w), Some(b.var(bias)))?;
        let s = g.sigmoid(z)?;
        let ext = g.constant(Array::from_vec(ws.extents().to_vec()));
        let lo = g.constant(Array::from_vec(ws.lo.to_vec()));
        let scaled = g.mul(s, ext)?;
        g.add(scaled, lo)
    }

    fn layer(
        &self,
        g: &mut Graph,
        b: &Bindings,
        l: usize,
        x: Var,
        y: Var,
        feats: &[Var],
        dense: Option<Var>,
        cams: &[CameraParams],
    ) -> Result<(Var, LayerOutput, Option<ProjAttnTrace>)> {
        let cfg = &self.config;
        let ids = &self.ids.layers[l];
        let v = |id: ParamId| b.var(id);
        let s = &ids.sa;
        let sa_w = SelfAttnWeights {
            wq: v(s[0]),
            bq: v(s[1]),
            wk: v(s[2]),
            bk: v(s[3]),
            wv: v(s[4]),
            bv: v(s[5]),
            wo: v(s[6]),
            bo: v(s[7]),
        };
        let sa = self_attention(g, x, &sa_w, cfg.heads)?;
        let r = g.add(x, sa)?;
        let x = g.layer_norm(r, v(ids.ln[0]), v(ids.ln[1]), LN_EPS)?;

        let mut trace = None;
        let attended = match (ids.pa, ids.dense) {
            (Some(p), _) => {
                let w = ProjAttnWeights {
                    offset_w: v(p[0]),
                    offset_b: v(p[1]),
                    attn_w: v(p[2]),
                    attn_b: v(p[3]),
                    value_w: v(p[4]),
                    out_w: v(p[5]),
                    out_b: v(p[6]),
                };
                let anchors = if cfg.differentiable_anchors { y } else { g.detach(y) };
                let (out, t) = projective_attention(g, x, anchors, feats, cams, &w, cfg.points)?;
                trace = Some(t);
                out
            }
            (None, Some(d)) => {
                let tokens = dense.ok_or_else(|| Error::Usage("dense tokens missing".into()))?;
                let (att, _) = dense_attention(g, x, tokens, v(d[0]), v(d[1]), v(d[2]))?;
                linear(g, att, v(d[3]), Some(v(d[4])))?
            }
            (None, None) => unreachable!("every layer has an attention block"),
        };
        let r = g.add(x, attended)?;
        let x = g.layer_norm(r, v(ids.ln[2]), v(ids.ln[3]), LN_EPS)?;

        let h = linear(g, x, v(ids.ffn[0]), Some(v(ids.ffn[1])))?;
        let h = g.relu(h)?;
        let ff = linear(g, h, v(ids.ffn[2]), Some(v(ids.ffn[3])))?;
        let r = g.add(x, ff)?;
        let x = g.layer_norm(r, v(ids.ln[4]), v(ids.ln[5]), LN_EPS)?;

        let ws = &cfg.workspace;
        let h = linear(g, x, v(ids.reg[0]), Some(v(ids.reg[1])))?;
        let h = g.relu(h)?;
        let raw = linear(g, h, v(ids.reg[2]), Some(v(ids.reg[3])))?;
        let ext = g.constant(Array::from_vec(ws.extents().to_vec()));
        let offsets = g.mul(raw, ext)?;
        let moved = g.add(y, offsets)?;
        let positions = g.clamp_last(moved, &ws.lo, &ws.hi)?;

        let logit = linear(g, x, v(ids.conf[0]), Some(v(ids.conf[1])))?;
        let m = cfg.queries();
        let joint_logits = g.reshape(logit, &[m])?;
        let p = g.sigmoid(logit)?;
        let p = g.reshape(p, &[cfg.persons, cfg.joints])?;
        let confidences = g.mean_axis(p, 1)?;
        let poses = g.reshape(positions, &[cfg.persons, cfg.joints, 3])?;
        Ok((
            x,
            LayerOutput {
                poses,
                confidences,
                joint_logits,
                offsets,
                positions,
            },
            trace,
        ))
    }

    /// Full forward pass on a bound parameter set.
    pub fn forward(&self, g: &mut Graph, b: &Bindings, input: &ModelInput) -> Result<ForwardOutput> {
        let feats = self.encode(g, b, input)?;
        let queries = self.build_queries(g, b, input.features)?;
        let initial_positions = self.initial_positions(g, b, queries)?;
        let dense = match self.config.attention {
            AttentionMode::Dense => Some(dense_tokens(g, &feats)?),
            AttentionMode::Projective => None,
        };
        let mut x = queries;
        let mut y = initial_positions;
        let mut layers = Vec::with_capacity(self.config.layers);
        let mut traces = Vec::new();
        for l in 0..self.config.layers {
            let (nx, out, trace) = self.layer(g, b, l, x, y, &feats, dense, input.cameras)?;
            x = nx;
            y = out.positions;
            layers.push(out);
            traces.extend(trace);
        }
        Ok(ForwardOutput {
            queries,
            initial_positions,
            layers,
            traces,
        })
    }

    /// Inference: per-layer poses `[L, N, J, 3]` and person confidences `[L, N]`.
    pub fn predict(&self, input: &ModelInput) -> Result<(Array, Array)> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let out = self.forward(&mut g, &b, input)?;
        let cfg = &self.config;
        let mut poses = Vec::with_capacity(cfg.layers * cfg.queries() * 3);
        let mut conf = Vec::with_capacity(cfg.layers * cfg.persons);
        for l in &out.layers {
            poses.extend_from_slice(g.value(l.poses).data());
            conf.extend_from_slice(g.value(l.confidences).data());
        }
        Ok((
            Array::new(&[cfg.layers, cfg.persons, cfg.joints, 3], poses)?,
            Array::new(&[cfg.layers, cfg.persons], conf)?,
        ))
    }
}
