//! Radiance field, Perturbation Field and Sensitivity Field MLPs.
//!
//! All three share a positional-encoded position trunk of ReLU layers.
//! The radiance field emits `(c, σ)`; the perturbation field emits raw
//! `(δc, δσ)`; the sensitivity field emits `s ∈ (0, 1)` from position alone.

use diffcore::{Array, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{meta_field, Container};
use crate::error::{invalid, Result};
use crate::params::{Init, Linear, ParamStore};

/// NeRF-style frequency encoding: `[p, sin(2^k π p), cos(2^k π p), ...]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub bands: usize,
    pub include_input: bool,
}

impl PositionalEncoding {
    pub fn new(bands: usize, include_input: bool) -> Result<Self> {
        let pe = Self {
            bands,
            include_input,
        };
        pe.validate()?;
        Ok(pe)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 && !self.include_input {
            return invalid("positional encoding with no bands and no raw input is empty");
        }
        Ok(())
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (2 * self.bands + usize::from(self.include_input))
    }

    fn frequency(k: usize) -> f64 {
        (1u64 << k) as f64 * std::f64::consts::PI
    }

    /// Encodes each row of `x: [P, D]` on the tape.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.validate()?;
        let mut parts = Vec::with_capacity(2 * self.bands + 1);
        if self.include_input {
            parts.push(x);
        }
        for k in 0..self.bands {
            let scaled = tape.scale(x, Self::frequency(k));
            parts.push(tape.sin(scaled));
            parts.push(tape.cos(scaled));
        }
        Ok(tape.concat(&parts)?)
    }

    /// Plain-value encoding of a single vector.
    pub fn encode_vec(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if p.iter().any(|v| !v.is_finite()) {
            return invalid("positional encoding of a non-finite input");
        }
        let mut out = Vec::with_capacity(self.output_dim(p.len()));
        if self.include_input {
            out.extend_from_slice(p);
        }
        for k in 0..self.bands {
            let f = Self::frequency(k);
            out.extend(p.iter().map(|v| (v * f).sin()));
            out.extend(p.iter().map(|v| (v * f).cos()));
        }
        Ok(out)
    }
}

/// Query points for one forward pass, with per-config encoding memoized so
/// fields sharing a batch encode only once.
pub struct QueryBatch {
    pub positions: Var,
    pub directions: Var,
    len: usize,
    cache: Vec<(bool, PositionalEncoding, Var)>,
}

impl QueryBatch {
    pub fn new(tape: &Tape, positions: Var, directions: Var) -> Result<Self> {
        let (ps, ds) = (tape.shape(positions), tape.shape(directions));
        if ps.len() != 2 || ps[1] != 3 || ps != ds {
            return invalid(format!(
                "query batch shapes {ps:?} / {ds:?}, expected [P, 3]"
            ));
        }
        let len = ps[0];
        Ok(Self {
            positions,
            directions,
            len,
            cache: Vec::new(),
        })
    }

    /// Constant batch from plain arrays.
    pub fn from_arrays(tape: &mut Tape, positions: Array, directions: Array) -> Result<Self> {
        if !positions.all_finite() || !directions.all_finite() {
            return invalid("non-finite query point");
        }
        let p = tape.constant(positions);
        let d = tape.constant(directions);
        Self::new(tape, p, d)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn encoded(
        &mut self,
        tape: &mut Tape,
        direction: bool,
        pe: PositionalEncoding,
    ) -> Result<Var> {
        if let Some((_, _, v)) = self
            .cache
            .iter()
            .find(|(d, p, _)| *d == direction && *p == pe)
        {
            return Ok(*v);
        }
        let src = if direction {
            self.directions
        } else {
            self.positions
        };
        let v = pe.encode(tape, src)?;
        self.cache.push((direction, pe, v));
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DensityActivation {
    Softplus,
    Relu,
}

/// Shape of the shared MLP topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Hidden width of the position trunk and feature layer.
    pub width: usize,
    /// Number of ReLU layers in the trunk.
    pub depth: usize,
    /// Width of the view-dependent color layer.
    pub color_width: usize,
    pub position_encoding: PositionalEncoding,
    pub direction_encoding: PositionalEncoding,
}

impl MlpConfig {
    /// 4 × 256 trunk, 128-wide color layer, 12 position bands, 4 direction bands.
    pub fn full() -> Self {
        Self {
            width: 256,
            depth: 4,
            color_width: 128,
            position_encoding: PositionalEncoding {
                bands: 12,
                include_input: true,
            },
            direction_encoding: PositionalEncoding {
                bands: 4,
                include_input: true,
            },
        }
    }

    /// Narrow variant sized for single-core training runs.
    pub fn desk() -> Self {
        Self {
            width: 64,
            depth: 3,
            color_width: 32,
            position_encoding: PositionalEncoding {
                bands: 6,
                include_input: true,
            },
            direction_encoding: PositionalEncoding {
                bands: 2,
                include_input: true,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.color_width == 0 {
            return invalid("MLP width, depth and color width must be positive");
        }
        self.position_encoding.validate()?;
        self.direction_encoding.validate()
    }
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self::full()
    }
}

fn build_trunk(store: &mut ParamStore, cfg: &MlpConfig, rng: &mut ChaCha8Rng) -> Vec<Linear> {
    let mut layers = Vec::with_capacity(cfg.depth);
    let mut fan_in = cfg.position_encoding.output_dim(3);
    for i in 0..cfg.depth {
        layers.push(Linear::new(
            store,
            &format!("trunk.{i}"),
            fan_in,
            cfg.width,
            Init::GlorotUniform,
            rng,
        ));
        fan_in = cfg.width;
    }
    layers
}

fn run_trunk(tape: &mut Tape, vars: &[Var], layers: &[Linear], input: Var) -> Result<Var> {
    let mut h = input;
    for l in layers {
        let z = l.forward(tape, vars, h)?;
        h = tape.relu(z);
    }
    Ok(h)
}

/// Color and density for every point of a [`QueryBatch`].
#[derive(Clone, Copy, Debug)]
pub struct FieldOutput {
    /// `[P, 3]`
    pub color: Var,
    /// `[P, 1]`
    pub density: Var,
}

/// A single `(c, σ)` evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample {
    pub color: [f64; 3],
    pub density: f64,
}

fn check_point(x: [f64; 3], d: [f64; 3]) -> Result<()> {
    if x.iter().chain(&d).any(|v| !v.is_finite()) {
        return invalid("non-finite query");
    }
    let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return invalid(format!("direction norm {n} is not 1"));
    }
    Ok(())
}

/// Anything that can be queried as a frozen radiance field.
pub trait RadianceField {
    /// Frozen evaluation: outputs do not depend on any trainable leaf of
    /// `tape` other than those already in `batch`.
    fn evaluate(&self, tape: &mut Tape, batch: &mut QueryBatch) -> Result<FieldOutput>;

    /// Identity of the field's exact contents.
    fn checksum(&self) -> String;

    /// Single-point convenience query.
    fn query(&self, x: [f64; 3], d: [f64; 3]) -> Result<RadianceSample> {
        check_point(x, d)?;
        let mut tape = Tape::new();
        let mut batch = QueryBatch::from_arrays(
            &mut tape,
            Array::new(vec![1, 3], x.to_vec())?,
            Array::new(vec![1, 3], d.to_vec())?,
        )?;
        let out = self.evaluate(&mut tape, &mut batch)?;
        let c = tape.value(out.color).data();
        Ok(RadianceSample {
            color: [c[0], c[1], c[2]],
            density: tape.value(out.density).data()[0],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadianceFieldConfig {
    pub mlp: MlpConfig,
    pub density_activation: DensityActivation,
}

impl Default for RadianceFieldConfig {
    fn default() -> Self {
        Self {
            mlp: MlpConfig::full(),
            density_activation: DensityActivation::Softplus,
        }
    }
}

/// Softplus density head bias at initialization; keeps the untrained field
/// close to empty (σ ≈ 0.13) instead of softplus(0) ≈ 0.69.
const DENSITY_BIAS_INIT: f64 = -2.0;

/// The base radiance field `(x, d) -> (c, σ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceFieldModel {
    pub config: RadianceFieldConfig,
    pub params: ParamStore,
    trunk: Vec<Linear>,
    density: Linear,
    feature: Linear,
    color_hidden: Linear,
    color_out: Linear,
}

impl RadianceFieldModel {
    pub const KIND: &'static str = "radiance_field";

    pub fn new(config: RadianceFieldConfig, seed: u64) -> Result<Self> {
        let cfg = &config.mlp;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let trunk = build_trunk(&mut params, cfg, &mut rng);
        let g = Init::GlorotUniform;
        let density = Linear::new(&mut params, "density", cfg.width, 1, g, &mut rng);
        if config.density_activation == DensityActivation::Softplus {
            params.get_mut(density.bias_index()).data_mut()[0] = DENSITY_BIAS_INIT;
        }
        let feature = Linear::new(&mut params, "feature", cfg.width, cfg.width, g, &mut rng);
        let dir_dim = cfg.direction_encoding.output_dim(3);
        let color_hidden = Linear::new(
            &mut params,
            "color_hidden",
            cfg.width + dir_dim,
            cfg.color_width,
            g,
            &mut rng,
        );
        let color_out = Linear::new(&mut params, "color_out", cfg.color_width, 3, g, &mut rng);
        Ok(Self {
            config,
            params,
            trunk,
            density,
            feature,
            color_hidden,
            color_out,
        })
    }

    /// Forward pass with the weights already bound to `vars` (trainable or not).
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &mut QueryBatch,
    ) -> Result<FieldOutput> {
        let cfg = &self.config.mlp;
        let pos = batch.encoded(tape, false, cfg.position_encoding)?;
        let h = run_trunk(tape, vars, &self.trunk, pos)?;
        let raw = self.density.forward(tape, vars, h)?;
        let density = match self.config.density_activation {
            DensityActivation::Softplus => tape.softplus(raw),
            DensityActivation::Relu => tape.relu(raw),
        };
        let feat = self.feature.forward(tape, vars, h)?;
        let dir = batch.encoded(tape, true, cfg.direction_encoding)?;
        let joined = tape.concat(&[feat, dir])?;
        let hc = self.color_hidden.forward(tape, vars, joined)?;
        let hc = tape.relu(hc);
        let logits = self.color_out.forward(tape, vars, hc)?;
        let color = tape.sigmoid(logits);
        Ok(FieldOutput { color, density })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(Self::KIND, json!({ "config": self.config }));
        self.params.write_into(&mut c, "");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let config: RadianceFieldConfig = meta_field(&c.meta, "config")?;
        let mut m = Self::new(config, 0)?;
        m.params.read_from(c, "")?;
        Ok(m)
    }
}

impl RadianceField for RadianceFieldModel {
    fn evaluate(&self, tape: &mut Tape, batch: &mut QueryBatch) -> Result<FieldOutput> {
        let vars = self.params.bind(tape, false);
        self.forward(tape, &vars, batch)
    }

    fn checksum(&self) -> String {
        self.params.checksum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationFieldConfig {
    pub mlp: MlpConfig,
    pub embedding_dim: usize,
    /// Rows in the camera embedding table (one per training view).
    pub num_cameras: usize,
}

/// Output of the Perturbation Field before any constraint.
#[derive(Clone, Copy, Debug)]
pub struct RawPerturbation {
    /// `[P, 3]`
    pub color: Var,
    /// `[P, 1]`
    pub density: Var,
}

/// `G_p: (x, d, camera) -> (δc, δσ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationFieldModel {
    pub config: PerturbationFieldConfig,
    pub params: ParamStore,
    trunk: Vec<Linear>,
    density: Linear,
    feature: Linear,
    color_hidden: Linear,
    color_out: Linear,
    embedding: usize,
}

impl PerturbationFieldModel {
    pub const KIND: &'static str = "perturbation_field";

    /// Hidden layers are Glorot-initialized; both output heads start at zero
    /// so the untrained field perturbs nothing.
    pub fn new(config: PerturbationFieldConfig, seed: u64) -> Result<Self> {
        let cfg = &config.mlp;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let trunk = build_trunk(&mut params, cfg, &mut rng);
        let g = Init::GlorotUniform;
        let density = Linear::new(
            &mut params,
            "delta_density",
            cfg.width,
            1,
            Init::Zeros,
            &mut rng,
        );
        let feature = Linear::new(&mut params, "feature", cfg.width, cfg.width, g, &mut rng);
        let dir_dim = cfg.direction_encoding.output_dim(3);
        let color_hidden = Linear::new(
            &mut params,
            "color_hidden",
            cfg.width + dir_dim + config.embedding_dim,
            cfg.color_width,
            g,
            &mut rng,
        );
        let color_out = Linear::new(
            &mut params,
            "delta_color",
            cfg.color_width,
            3,
            Init::Zeros,
            &mut rng,
        );
        let table = (0..config.num_cameras * config.embedding_dim)
            .map(|_| rng.random_range(-0.1..=0.1))
            .collect();
        let embedding = params.push(
            "camera_embedding",
            Array::new(vec![config.num_cameras, config.embedding_dim], table)?,
        );
        Ok(Self {
            config,
            params,
            trunk,
            density,
            feature,
            color_hidden,
            color_out,
            embedding,
        })
    }

    pub fn embedding_index(&self) -> usize {
        self.embedding
    }

    /// `[P, E]` embedding rows for `camera`; unknown or absent ids use the
    /// mean of all rows.
    fn camera_rows(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        camera: Option<usize>,
        points: usize,
    ) -> Result<Var> {
        let (n, e) = (self.config.num_cameras, self.config.embedding_dim);
        let table = vars[self.embedding];
        let row = match camera {
            Some(id) if id < n => {
                let idx: Vec<usize> = (0..e).map(|j| id * e + j).collect();
                tape.gather(table, idx.into(), &[1, e])?
            }
            _ if n == 0 => tape.constant(Array::zeros(&[1, e])),
            _ => {
                let w = tape.constant(Array::full(&[1, n], 1.0 / n as f64));
                tape.matmul(w, table)?
            }
        };
        let idx: Vec<usize> = (0..points).flat_map(|_| 0..e).collect();
        Ok(tape.gather(row, idx.into(), &[points, e])?)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &mut QueryBatch,
        camera: Option<usize>,
    ) -> Result<RawPerturbation> {
        let cfg = &self.config.mlp;
        let pos = batch.encoded(tape, false, cfg.position_encoding)?;
        let h = run_trunk(tape, vars, &self.trunk, pos)?;
        let density = self.density.forward(tape, vars, h)?;
        let feat = self.feature.forward(tape, vars, h)?;
        let dir = batch.encoded(tape, true, cfg.direction_encoding)?;
        let mut parts = vec![feat, dir];
        if self.config.embedding_dim > 0 {
            parts.push(self.camera_rows(tape, vars, camera, batch.len())?);
        }
        let joined = tape.concat(&parts)?;
        let hc = self.color_hidden.forward(tape, vars, joined)?;
        let hc = tape.relu(hc);
        let color = self.color_out.forward(tape, vars, hc)?;
        Ok(RawPerturbation { color, density })
    }

    /// Plain-value single-point query, `(δc, δσ)`.
    pub fn query(
        &self,
        x: [f64; 3],
        d: [f64; 3],
        camera: Option<usize>,
    ) -> Result<([f64; 3], f64)> {
        check_point(x, d)?;
        let mut tape = Tape::new();
        let mut batch = QueryBatch::from_arrays(
            &mut tape,
            Array::new(vec![1, 3], x.to_vec())?,
            Array::new(vec![1, 3], d.to_vec())?,
        )?;
        let vars = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, &mut batch, camera)?;
        let c = tape.value(out.color).data();
        Ok(([c[0], c[1], c[2]], tape.value(out.density).data()[0]))
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) {
        self.params.write_into(c, prefix);
    }

    pub fn read_from(config: PerturbationFieldConfig, c: &Container, prefix: &str) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.read_from(c, prefix)?;
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitivityFieldConfig {
    pub mlp: MlpConfig,
}

/// `G_s: x -> s ∈ (0, 1)`. Has no direction input at all.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityFieldModel {
    pub config: SensitivityFieldConfig,
    pub params: ParamStore,
    trunk: Vec<Linear>,
    head: Linear,
}

impl SensitivityFieldModel {
    pub fn new(config: SensitivityFieldConfig, seed: u64) -> Result<Self> {
        config.mlp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let trunk = build_trunk(&mut params, &config.mlp, &mut rng);
        let head = Linear::new(
            &mut params,
            "sensitivity",
            config.mlp.width,
            1,
            Init::Zeros,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            trunk,
            head,
        })
    }

    /// `[P, 1]` sensitivities.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], batch: &mut QueryBatch) -> Result<Var> {
        let pos = batch.encoded(tape, false, self.config.mlp.position_encoding)?;
        self.forward_encoded(tape, vars, pos)
    }

    /// Forward from an already-encoded position; used when `x` itself is a
    /// differentiable input.
    pub fn forward_encoded(&self, tape: &mut Tape, vars: &[Var], encoded: Var) -> Result<Var> {
        let z = self.logit_encoded(tape, vars, encoded)?;
        Ok(tape.sigmoid(z))
    }

    /// `[P, 1]` pre-sigmoid values, so callers can form `1 − s` as
    /// `sigmoid(−z)` without cancellation.
    pub fn logit(&self, tape: &mut Tape, vars: &[Var], batch: &mut QueryBatch) -> Result<Var> {
        let pos = batch.encoded(tape, false, self.config.mlp.position_encoding)?;
        self.logit_encoded(tape, vars, pos)
    }

    fn logit_encoded(&self, tape: &mut Tape, vars: &[Var], encoded: Var) -> Result<Var> {
        let h = run_trunk(tape, vars, &self.trunk, encoded)?;
        Ok(self.head.forward(tape, vars, h)?)
    }

    pub fn query(&self, x: [f64; 3]) -> Result<f64> {
        if x.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite query");
        }
        let mut tape = Tape::new();
        let p = tape.constant(Array::new(vec![1, 3], x.to_vec())?);
        let enc = self.config.mlp.position_encoding.encode(&mut tape, p)?;
        let vars = self.params.bind(&mut tape, false);
        let s = self.forward_encoded(&mut tape, &vars, enc)?;
        Ok(tape.value(s).data()[0])
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) {
        self.params.write_into(c, prefix);
    }

    pub fn read_from(config: SensitivityFieldConfig, c: &Container, prefix: &str) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.read_from(c, prefix)?;
        Ok(m)
    }
}
