//! The perception/control network: two grid encoders (an atrous stage with
//! parallel dilation rates, then standard conv/pool stages), channel fusion
//! into a 192-wide latent, a GRU decode loop that emits waypoint deltas, and
//! command-indexed control MLPs with tanh/sigmoid output heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::Command;
use crate::geonav::{accumulate_waypoints, LocalPoint};
use crate::projection::{GridMode, ProjectedGrid, GRID_CHANNELS};
use crate::scalar::Scalar;
use crate::tensorgrad::{ConvGeom, GruVars, ParamId, Params, ShapeError, Tape, Tensor, Var};

pub const NUM_COMMANDS: usize = 3;
pub const WAYPOINT_STEPS: usize = 3;
/// GRU input: [wp_prev.x, wp_prev.y, rp1.x, rp1.y, rp2.x, rp2.y, omega_l, omega_r].
pub const GRU_INPUT_WIDTH: usize = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{context}: {source}")]
    Shape {
        context: &'static str,
        source: ShapeError,
    },
    #[error("grid {which} is {got_h}x{got_w} ({got_mode:?}), config wants {want_h}x{want_w} ({want_mode:?})")]
    GridMismatch {
        which: &'static str,
        got_h: usize,
        got_w: usize,
        got_mode: GridMode,
        want_h: usize,
        want_w: usize,
        want_mode: GridMode,
    },
    #[error("non-finite scalar input: {name}")]
    NonFinite { name: &'static str },
    #[error("encoder config invalid: {reason}")]
    BadConfig { reason: String },
}

fn shape_err(context: &'static str) -> impl FnOnce(ShapeError) -> ModelError {
    move |source| ModelError::Shape { context, source }
}

/// Which grid branches feed the fusion stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perspective {
    Both,
    FrontOnly,
    BevOnly,
}

impl Perspective {
    pub fn uses_front(self) -> bool {
        matches!(self, Perspective::Both | Perspective::FrontOnly)
    }
    pub fn uses_bev(self) -> bool {
        matches!(self, Perspective::Both | Perspective::BevOnly)
    }
}

/// One standard conv stage: 3x3 same-padded conv, relu, max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub out_channels: usize,
    pub pool: (usize, usize),
}

/// One encoder branch. The first stage runs two parallel 3x3 convs at
/// dilations 1 and 2 (half the channels each), concatenated, then pooled;
/// the remaining stages are standard conv/pool blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub mode: GridMode,
    /// Input dims (channels, height, width).
    pub input: (usize, usize, usize),
    /// Channel count after the parallel-dilation concat; must be even.
    pub atrous_channels: usize,
    pub atrous_pool: (usize, usize),
    pub stages: Vec<StageConfig>,
}

impl EncoderConfig {
    /// Output dims after all stages; pools floor-divide, same-padded convs
    /// keep spatial extent.
    pub fn out_dims(&self) -> (usize, usize, usize) {
        let (_, mut h, mut w) = self.input;
        h /= self.atrous_pool.0;
        w /= self.atrous_pool.1;
        let mut c = self.atrous_channels;
        for st in &self.stages {
            c = st.out_channels;
            h /= st.pool.0;
            w /= st.pool.1;
        }
        (c, h, w)
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.atrous_channels == 0 || self.atrous_channels % 2 != 0 {
            return Err(ModelError::BadConfig {
                reason: format!(
                    "atrous_channels must be positive and even, got {}",
                    self.atrous_channels
                ),
            });
        }
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(ModelError::BadConfig {
                reason: format!("empty input dims {:?}", self.input),
            });
        }
        let (oc, oh, ow) = self.out_dims();
        if oc == 0 || oh == 0 || ow == 0 {
            return Err(ModelError::BadConfig {
                reason: format!("pooling collapses {:?} to {:?}", self.input, (oc, oh, ow)),
            });
        }
        Ok(())
    }
}

/// Per-feature scales applied to the GRU scalar inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScales {
    pub waypoint: f64,
    pub route_point: f64,
    pub wheel_speed: f64,
}

impl Default for InputScales {
    fn default() -> Self {
        // route points sit ~12 m out; omega * wheel radius is linear speed
        InputScales {
            waypoint: 1.0,
            route_point: 1.0 / 12.0,
            wheel_speed: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub perspective: Perspective,
    pub front: EncoderConfig,
    pub bev: EncoderConfig,
    pub latent: usize,
    /// Channel count of the fusion pointwise conv output.
    pub fused_channels: usize,
    pub mlp_hidden: Vec<usize>,
    pub input_scales: InputScales,
}

impl ModelConfig {
    /// Desk-scale default sized for CPU training: both branches end at 64x4x8.
    pub fn desk_default() -> Self {
        ModelConfig {
            perspective: Perspective::Both,
            front: EncoderConfig {
                mode: GridMode::Front,
                input: (GRID_CHANNELS, 64, 512),
                atrous_channels: 8,
                atrous_pool: (2, 4),
                stages: vec![
                    StageConfig { out_channels: 16, pool: (2, 4) },
                    StageConfig { out_channels: 32, pool: (2, 2) },
                    StageConfig { out_channels: 64, pool: (2, 2) },
                ],
            },
            bev: EncoderConfig {
                mode: GridMode::Bev,
                input: (GRID_CHANNELS, 128, 256),
                atrous_channels: 8,
                atrous_pool: (4, 4),
                stages: vec![
                    StageConfig { out_channels: 16, pool: (2, 2) },
                    StageConfig { out_channels: 32, pool: (2, 2) },
                    StageConfig { out_channels: 64, pool: (2, 2) },
                ],
            },
            latent: 192,
            fused_channels: 128,
            mlp_hidden: vec![64, 64],
            input_scales: InputScales::default(),
        }
    }

    pub fn with_perspective(mut self, p: Perspective) -> Self {
        self.perspective = p;
        self
    }

    /// Channel count entering the fusion pointwise conv.
    fn fusion_input_channels(&self) -> usize {
        let f = self.front.out_dims().0;
        let b = self.bev.out_dims().0;
        match self.perspective {
            Perspective::Both => f + b,
            Perspective::FrontOnly => f,
            Perspective::BevOnly => b,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.perspective.uses_front() {
            self.front.validate()?;
        }
        if self.perspective.uses_bev() {
            self.bev.validate()?;
        }
        if self.perspective == Perspective::Both && self.front.out_dims() != self.bev.out_dims() {
            return Err(ModelError::BadConfig {
                reason: format!(
                    "encoder outputs differ: front {:?} vs bev {:?}",
                    self.front.out_dims(),
                    self.bev.out_dims()
                ),
            });
        }
        if self.latent == 0 || self.fused_channels == 0 {
            return Err(ModelError::BadConfig {
                reason: "latent and fused_channels must be positive".into(),
            });
        }
        if self.front.mode != GridMode::Front || self.bev.mode != GridMode::Bev {
            return Err(ModelError::BadConfig {
                reason: "front/bev encoder modes are swapped".into(),
            });
        }
        Ok(())
    }
}

/// One inference input: both grids plus the scalar navigation state.
#[derive(Debug, Clone, Copy)]
pub struct ObservationInput<'a> {
    pub front: &'a ProjectedGrid,
    pub bev: &'a ProjectedGrid,
    pub rp1: LocalPoint,
    pub rp2: LocalPoint,
    pub omega_l: f64,
    pub omega_r: f64,
    pub command: Command,
}

/// Decoded prediction: accumulated waypoints, their raw per-step deltas, and
/// the bounded control pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelOutput {
    pub waypoints: [LocalPoint; WAYPOINT_STEPS],
    pub deltas: [LocalPoint; WAYPOINT_STEPS],
    pub steering: f64,
    pub throttle: f64,
}

/// Forward results with the tape nodes needed to build training losses.
pub struct TracedOutput {
    /// Accumulated waypoints flattened to [wp1.x, wp1.y, ..., wp3.y].
    pub waypoint_vec: Var,
    pub steering: Var,
    pub throttle: Var,
    pub output: ModelOutput,
}

struct EncoderIds {
    atrous_w1: ParamId,
    atrous_b1: ParamId,
    atrous_w2: ParamId,
    atrous_b2: ParamId,
    stage_w: Vec<ParamId>,
    stage_b: Vec<ParamId>,
}

struct MlpIds {
    hidden_w: Vec<ParamId>,
    hidden_b: Vec<ParamId>,
    st_w: ParamId,
    st_b: ParamId,
    th_w: ParamId,
    th_b: ParamId,
}

struct GruIds {
    wz: ParamId,
    wr: ParamId,
    wc: ParamId,
    uz: ParamId,
    ur: ParamId,
    uc: ParamId,
    bz: ParamId,
    br: ParamId,
    bc: ParamId,
}

struct ModelIds {
    front: Option<EncoderIds>,
    bev: Option<EncoderIds>,
    fuse_pw_w: ParamId,
    fuse_pw_b: ParamId,
    fuse_dense_w: ParamId,
    fuse_dense_b: ParamId,
    gru: GruIds,
    wp_dx_w: ParamId,
    wp_dx_b: ParamId,
    wp_dy_w: ParamId,
    wp_dy_b: ParamId,
    cmd_mlps: Vec<MlpIds>,
}

pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: Params<S>,
    ids: ModelIds,
}

struct Init {
    rng: ChaCha20Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init { rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    /// Uniform Glorot sample with the given fan counts.
    fn weight<S: Scalar>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<S> {
        let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::cast_from((self.rng.gen::<f64>() * 2.0 - 1.0) * lim))
            .collect();
        Tensor::from_vec(shape, data).expect("init shape")
    }

    fn conv<S: Scalar>(&mut self, oc: usize, ic: usize, k: usize) -> Tensor<S> {
        self.weight(&[oc, ic, k, k], ic * k * k, oc * k * k)
    }

    fn dense<S: Scalar>(&mut self, out: usize, inp: usize) -> Tensor<S> {
        self.weight(&[out, inp], inp, out)
    }
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = Params::new();
        let mut init = Init::new(seed);

        let encoder = |params: &mut Params<S>, init: &mut Init, cfg: &EncoderConfig, tag: &str| {
            let half = cfg.atrous_channels / 2;
            let ic = cfg.input.0;
            let atrous_w1 = params.add(&format!("{tag}.atrous.d1.w"), init.conv(half, ic, 3));
            let atrous_b1 = params.add(&format!("{tag}.atrous.d1.b"), Tensor::zeros(&[half]));
            let atrous_w2 = params.add(&format!("{tag}.atrous.d2.w"), init.conv(half, ic, 3));
            let atrous_b2 = params.add(&format!("{tag}.atrous.d2.b"), Tensor::zeros(&[half]));
            let mut stage_w = Vec::new();
            let mut stage_b = Vec::new();
            let mut prev = cfg.atrous_channels;
            for (i, st) in cfg.stages.iter().enumerate() {
                stage_w.push(params.add(
                    &format!("{tag}.stage{i}.w"),
                    init.conv(st.out_channels, prev, 3),
                ));
                stage_b.push(params.add(
                    &format!("{tag}.stage{i}.b"),
                    Tensor::zeros(&[st.out_channels]),
                ));
                prev = st.out_channels;
            }
            EncoderIds { atrous_w1, atrous_b1, atrous_w2, atrous_b2, stage_w, stage_b }
        };

        let front = config
            .perspective
            .uses_front()
            .then(|| encoder(&mut params, &mut init, &config.front, "front"));
        let bev = config
            .perspective
            .uses_bev()
            .then(|| encoder(&mut params, &mut init, &config.bev, "bev"));

        let fuse_in = config.fusion_input_channels();
        let fc = config.fused_channels;
        let fuse_pw_w = params.add("fuse.pw.w", init.dense(fc, fuse_in));
        let fuse_pw_b = params.add("fuse.pw.b", Tensor::zeros(&[fc]));
        let fuse_dense_w = params.add("fuse.dense.w", init.dense(config.latent, fc));
        let fuse_dense_b = params.add("fuse.dense.b", Tensor::zeros(&[config.latent]));

        let l = config.latent;
        let gru = GruIds {
            wz: params.add("gru.wz", init.dense(l, GRU_INPUT_WIDTH)),
            wr: params.add("gru.wr", init.dense(l, GRU_INPUT_WIDTH)),
            wc: params.add("gru.wc", init.dense(l, GRU_INPUT_WIDTH)),
            uz: params.add("gru.uz", init.dense(l, l)),
            ur: params.add("gru.ur", init.dense(l, l)),
            uc: params.add("gru.uc", init.dense(l, l)),
            bz: params.add("gru.bz", Tensor::zeros(&[l])),
            br: params.add("gru.br", Tensor::zeros(&[l])),
            bc: params.add("gru.bc", Tensor::zeros(&[l])),
        };

        let wp_dx_w = params.add("wp.dx.w", init.dense(1, l));
        let wp_dx_b = params.add("wp.dx.b", Tensor::zeros(&[1]));
        let wp_dy_w = params.add("wp.dy.w", init.dense(1, l));
        let wp_dy_b = params.add("wp.dy.b", Tensor::zeros(&[1]));

        let mut cmd_mlps = Vec::with_capacity(NUM_COMMANDS);
        for c in 0..NUM_COMMANDS {
            let mut hidden_w = Vec::new();
            let mut hidden_b = Vec::new();
            let mut prev = l;
            for (i, &h) in config.mlp_hidden.iter().enumerate() {
                hidden_w.push(params.add(&format!("cmd{c}.h{i}.w"), init.dense(h, prev)));
                hidden_b.push(params.add(&format!("cmd{c}.h{i}.b"), Tensor::zeros(&[h])));
                prev = h;
            }
            let st_w = params.add(&format!("cmd{c}.st.w"), init.dense(1, prev));
            let st_b = params.add(&format!("cmd{c}.st.b"), Tensor::zeros(&[1]));
            let th_w = params.add(&format!("cmd{c}.th.w"), init.dense(1, prev));
            let th_b = params.add(&format!("cmd{c}.th.b"), Tensor::zeros(&[1]));
            cmd_mlps.push(MlpIds { hidden_w, hidden_b, st_w, st_b, th_w, th_b });
        }

        let ids = ModelIds {
            front,
            bev,
            fuse_pw_w,
            fuse_pw_b,
            fuse_dense_w,
            fuse_dense_b,
            gru,
            wp_dx_w,
            wp_dx_b,
            wp_dy_w,
            wp_dy_b,
            cmd_mlps,
        };
        Ok(Model { config, params, ids })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Parameters of the fusion dense layer, the shared trunk point where
    /// task-gradient norms are balanced.
    pub fn fusion_dense_ids(&self) -> [ParamId; 2] {
        [self.ids.fuse_dense_w, self.ids.fuse_dense_b]
    }

    fn encode_branch(
        &self,
        tape: &mut Tape<'_, S>,
        grid: &ProjectedGrid,
        enc: &EncoderIds,
        cfg: &EncoderConfig,
    ) -> Result<Var, ModelError> {
        let x = tape.constant(grid.as_tensor().cast::<S>());
        let w1 = tape.param(enc.atrous_w1);
        let b1 = tape.param(enc.atrous_b1);
        let w2 = tape.param(enc.atrous_w2);
        let b2 = tape.param(enc.atrous_b2);
        let a1 = tape.conv2d(x, w1, b1, ConvGeom::same(1)).map_err(shape_err("atrous d1"))?;
        let a2 = tape.conv2d(x, w2, b2, ConvGeom::same(2)).map_err(shape_err("atrous d2"))?;
        let cat = tape.concat_channels(a1, a2).map_err(shape_err("atrous concat"))?;
        let act = tape.relu(cat);
        let mut y = tape.max_pool2d(act, cfg.atrous_pool).map_err(shape_err("atrous pool"))?;
        for (i, st) in cfg.stages.iter().enumerate() {
            let w = tape.param(enc.stage_w[i]);
            let b = tape.param(enc.stage_b[i]);
            let c = tape.conv2d(y, w, b, ConvGeom::same(1)).map_err(shape_err("stage conv"))?;
            let r = tape.relu(c);
            y = tape.max_pool2d(r, st.pool).map_err(shape_err("stage pool"))?;
        }
        Ok(y)
    }

    /// Encoder features for one grid; exposed for feature inspection and the
    /// shape tests.
    pub fn encode(&self, grid: &ProjectedGrid) -> Result<Tensor<S>, ModelError> {
        let (enc, cfg) = match grid.mode {
            GridMode::Front => (self.ids.front.as_ref(), &self.config.front),
            GridMode::Bev => (self.ids.bev.as_ref(), &self.config.bev),
        };
        let enc = enc.ok_or(ModelError::BadConfig {
            reason: format!("{:?} branch disabled by perspective", grid.mode),
        })?;
        self.check_grid("grid", grid, cfg)?;
        let mut tape = Tape::new(&self.params);
        let y = self.encode_branch(&mut tape, grid, enc, cfg)?;
        Ok(tape.value(y).clone())
    }

    fn check_grid(
        &self,
        which: &'static str,
        grid: &ProjectedGrid,
        cfg: &EncoderConfig,
    ) -> Result<(), ModelError> {
        if grid.height != cfg.input.1 || grid.width != cfg.input.2 || grid.mode != cfg.mode {
            return Err(ModelError::GridMismatch {
                which,
                got_h: grid.height,
                got_w: grid.width,
                got_mode: grid.mode,
                want_h: cfg.input.1,
                want_w: cfg.input.2,
                want_mode: cfg.mode,
            });
        }
        Ok(())
    }

    /// Full forward pass on a caller-owned tape, returning loss-ready vars.
    pub fn forward_on(
        &self,
        tape: &mut Tape<'_, S>,
        obs: &ObservationInput<'_>,
    ) -> Result<TracedOutput, ModelError> {
        for (name, v) in [
            ("rp1.x", obs.rp1.x),
            ("rp1.y", obs.rp1.y),
            ("rp2.x", obs.rp2.x),
            ("rp2.y", obs.rp2.y),
            ("omega_l", obs.omega_l),
            ("omega_r", obs.omega_r),
        ] {
            if !v.is_finite() {
                return Err(ModelError::NonFinite { name });
            }
        }

        let front_feat = match &self.ids.front {
            Some(enc) => {
                self.check_grid("front", obs.front, &self.config.front)?;
                Some(self.encode_branch(tape, obs.front, enc, &self.config.front)?)
            }
            None => None,
        };
        let bev_feat = match &self.ids.bev {
            Some(enc) => {
                self.check_grid("bev", obs.bev, &self.config.bev)?;
                Some(self.encode_branch(tape, obs.bev, enc, &self.config.bev)?)
            }
            None => None,
        };

        let fused = match (front_feat, bev_feat) {
            (Some(f), Some(b)) => tape.concat_channels(f, b).map_err(shape_err("fuse concat"))?,
            (Some(f), None) => f,
            (None, Some(b)) => b,
            (None, None) => unreachable!("perspective always enables a branch"),
        };
        let pw_w = tape.param(self.ids.fuse_pw_w);
        let pw_b = tape.param(self.ids.fuse_pw_b);
        let pw = tape.pointwise_conv(fused, pw_w, pw_b).map_err(shape_err("fuse pointwise"))?;
        let pw_act = tape.relu(pw);
        let gap = tape.global_avg_pool(pw_act).map_err(shape_err("fuse gap"))?;
        let fd_w = tape.param(self.ids.fuse_dense_w);
        let fd_b = tape.param(self.ids.fuse_dense_b);
        let dense = tape.dense(gap, fd_w, fd_b).map_err(shape_err("fuse dense"))?;
        let latent = tape.tanh(dense);

        let gru_vars = GruVars {
            wz: tape.param(self.ids.gru.wz),
            wr: tape.param(self.ids.gru.wr),
            wc: tape.param(self.ids.gru.wc),
            uz: tape.param(self.ids.gru.uz),
            ur: tape.param(self.ids.gru.ur),
            uc: tape.param(self.ids.gru.uc),
            bz: tape.param(self.ids.gru.bz),
            br: tape.param(self.ids.gru.br),
            bc: tape.param(self.ids.gru.bc),
        };
        let sc = self.config.input_scales;
        let dx_w = tape.param(self.ids.wp_dx_w);
        let dx_b = tape.param(self.ids.wp_dx_b);
        let dy_w = tape.param(self.ids.wp_dy_w);
        let dy_b = tape.param(self.ids.wp_dy_b);

        // scalar inputs that repeat every decode step
        let nav_constants = tape.vector(&[
            S::cast_from(obs.rp1.x * sc.route_point),
            S::cast_from(obs.rp1.y * sc.route_point),
            S::cast_from(obs.rp2.x * sc.route_point),
            S::cast_from(obs.rp2.y * sc.route_point),
            S::cast_from(obs.omega_l * sc.wheel_speed),
            S::cast_from(obs.omega_r * sc.wheel_speed),
        ]);

        // decode loop; the waypoint feedback stays on-tape so gradients flow
        // through earlier deltas into later steps
        let mut hidden = latent;
        let mut deltas_f64 = [(0.0f64, 0.0f64); WAYPOINT_STEPS];
        let mut acc: Option<(Var, Var)> = None;
        let mut wp_vars: Vec<Var> = Vec::with_capacity(2 * WAYPOINT_STEPS);
        let wp_scale = S::cast_from(sc.waypoint);
        for step in 0..WAYPOINT_STEPS {
            let input = match acc {
                None => {
                    let origin = tape.vector(&[S::zero(), S::zero()]);
                    tape.concat_vec(&[origin, nav_constants])
                }
                Some((ax, ay)) => {
                    let sx = tape.scale(ax, wp_scale);
                    let sy = tape.scale(ay, wp_scale);
                    tape.concat_vec(&[sx, sy, nav_constants])
                }
            }
            .map_err(shape_err("gru input"))?;
            hidden = tape.gru_cell(input, hidden, &gru_vars).map_err(shape_err("gru step"))?;
            let dx = tape.dense(hidden, dx_w, dx_b).map_err(shape_err("wp dx"))?;
            let dy = tape.dense(hidden, dy_w, dy_b).map_err(shape_err("wp dy"))?;
            deltas_f64[step] = (
                tape.value(dx).data()[0].cast_f64(),
                tape.value(dy).data()[0].cast_f64(),
            );
            acc = Some(match acc {
                None => (dx, dy),
                Some((ax, ay)) => (
                    tape.add(ax, dx).map_err(shape_err("wp accumulate"))?,
                    tape.add(ay, dy).map_err(shape_err("wp accumulate"))?,
                ),
            });
            let (ax, ay) = acc.unwrap();
            wp_vars.push(ax);
            wp_vars.push(ay);
        }
        let waypoints = accumulate_waypoints(&deltas_f64, LocalPoint::new(0.0, 0.0))
            .expect("exactly three deltas");
        let waypoint_vec = tape.concat_vec(&wp_vars).map_err(shape_err("wp concat"))?;

        let mlp = &self.ids.cmd_mlps[obs.command.index()];
        let mut z = hidden;
        for i in 0..mlp.hidden_w.len() {
            let w = tape.param(mlp.hidden_w[i]);
            let b = tape.param(mlp.hidden_b[i]);
            let d = tape.dense(z, w, b).map_err(shape_err("mlp hidden"))?;
            z = tape.relu(d);
        }
        let st_w = tape.param(mlp.st_w);
        let st_b = tape.param(mlp.st_b);
        let th_w = tape.param(mlp.th_w);
        let th_b = tape.param(mlp.th_b);
        let st_lin = tape.dense(z, st_w, st_b).map_err(shape_err("steering head"))?;
        let steering = tape.tanh(st_lin);
        let th_lin = tape.dense(z, th_w, th_b).map_err(shape_err("throttle head"))?;
        let throttle = tape.sigmoid(th_lin);

        let output = ModelOutput {
            waypoints,
            deltas: [
                LocalPoint::new(deltas_f64[0].0, deltas_f64[0].1),
                LocalPoint::new(deltas_f64[1].0, deltas_f64[1].1),
                LocalPoint::new(deltas_f64[2].0, deltas_f64[2].1),
            ],
            steering: tape.value(steering).data()[0].cast_f64(),
            throttle: tape.value(throttle).data()[0].cast_f64(),
        };
        Ok(TracedOutput { waypoint_vec, steering, throttle, output })
    }

    /// Inference-only forward on a throwaway tape.
    pub fn forward(&self, obs: &ObservationInput<'_>) -> Result<ModelOutput, ModelError> {
        let mut tape = Tape::new(&self.params);
        Ok(self.forward_on(&mut tape, obs)?.output)
    }
}
