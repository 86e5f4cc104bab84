//! Network description, concrete forward evaluation, and the on-disk model
//! format including solver configuration.
//!
//! A model is `encoder -> ODE dynamics (integrated to t_end) -> decoder`.
//! Layers are affine maps, ReLUs, and time-concatenated affine maps whose
//! last input coordinate is the current integration time.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{AffineMap, Matrix, Vector};
use crate::solver::{SolverConfig, Tableau, VectorField};

/// One network layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Affine map over the state.
    Linear(AffineMap),
    /// Elementwise `max(0, x)`; preserves dimension.
    Relu,
    /// Affine map over `[state, time]`: the map's input dimension is the
    /// state dimension plus one, time appended as the last input.
    ConcatTimeLinear(AffineMap),
}

impl LayerSpec {
    /// Output dimension given an input dimension, checking compatibility.
    pub fn out_dim(&self, in_dim: usize) -> Result<usize> {
        match self {
            LayerSpec::Linear(m) => {
                if m.cols() != in_dim {
                    return Err(Error::DimensionMismatch {
                        context: "linear layer input",
                        expected: m.cols(),
                        got: in_dim,
                    });
                }
                Ok(m.rows())
            }
            LayerSpec::Relu => Ok(in_dim),
            LayerSpec::ConcatTimeLinear(m) => {
                if m.cols() != in_dim + 1 {
                    return Err(Error::DimensionMismatch {
                        context: "concat-time layer input",
                        expected: m.cols(),
                        got: in_dim + 1,
                    });
                }
                Ok(m.rows())
            }
        }
    }

    pub fn needs_time(&self) -> bool {
        matches!(self, LayerSpec::ConcatTimeLinear(_))
    }
}

/// Layer stack mapping `(z, t) -> dz/dt` with equal input and output
/// dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub layers: Vec<LayerSpec>,
    pub state_dim: usize,
}

impl Dynamics {
    pub fn new(layers: Vec<LayerSpec>, state_dim: usize) -> Result<Self> {
        let out = chain_out_dim(&layers, state_dim)?;
        if out != state_dim {
            return Err(Error::Invariant(format!(
                "dynamics output dim {out} differs from state dim {state_dim}"
            )));
        }
        Ok(Dynamics { layers, state_dim })
    }
}

impl VectorField for Dynamics {
    fn dim(&self) -> usize {
        self.state_dim
    }

    fn eval(&self, t: f64, z: &Vector) -> Result<Vector> {
        eval_layers(&self.layers, z, Some(t))
    }
}

/// What the decoder output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputRole {
    Classification,
    Regression,
}

/// Full model: encoder, ODE dynamics, decoder, and solver configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub encoder: Vec<LayerSpec>,
    pub dynamics: Dynamics,
    pub decoder: Vec<LayerSpec>,
    pub solver_cfg: SolverConfig,
    pub output: OutputRole,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.encoder.is_empty() {
            let enc_out = chain_out_dim(&self.encoder, self.input_dim()?)?;
            if enc_out != self.dynamics.state_dim {
                return Err(Error::Invariant(format!(
                    "encoder output dim {enc_out} differs from state dim {}",
                    self.dynamics.state_dim
                )));
            }
        }
        if !self.decoder.is_empty() {
            chain_out_dim(&self.decoder, self.dynamics.state_dim)?;
        }
        if self.encoder.iter().any(|l| l.needs_time())
            || self.decoder.iter().any(|l| l.needs_time())
        {
            return Err(Error::Invariant(
                "time-concatenated layers are only valid inside dynamics".into(),
            ));
        }
        self.solver_cfg.validate()
    }

    /// Dimension of the raw input (before the encoder).
    pub fn input_dim(&self) -> Result<usize> {
        match self.encoder.first() {
            None => Ok(self.dynamics.state_dim),
            Some(LayerSpec::Linear(m)) => Ok(m.cols()),
            Some(LayerSpec::Relu) => Err(Error::Invariant(
                "encoder cannot start with a ReLU (input dim unknown)".into(),
            )),
            Some(LayerSpec::ConcatTimeLinear(_)) => Err(Error::Invariant(
                "time-concatenated layers are only valid inside dynamics".into(),
            )),
        }
    }

    /// Dimension of the final output (after the decoder).
    pub fn output_dim(&self) -> Result<usize> {
        chain_out_dim(&self.decoder, self.dynamics.state_dim)
    }

    /// Exact concrete forward pass through the whole model.
    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        let z0 = eval_layers(&self.encoder, x, None)?;
        let (zt, _) = crate::solver::cas_integrate(&self.dynamics, &z0, &self.solver_cfg)?;
        eval_layers(&self.decoder, &zt, None)
    }
}

fn chain_out_dim(layers: &[LayerSpec], in_dim: usize) -> Result<usize> {
    let mut d = in_dim;
    for layer in layers {
        d = layer.out_dim(d)?;
    }
    Ok(d)
}

/// Exact concrete forward pass through a layer stack. `time` must be supplied
/// iff a time-concatenated layer is present.
pub fn eval_layers(layers: &[LayerSpec], input: &Vector, time: Option<f64>) -> Result<Vector> {
    let mut x = input.clone();
    for layer in layers {
        x = match layer {
            LayerSpec::Linear(m) => m.apply(&x)?,
            LayerSpec::Relu => Vector(x.0.iter().map(|v| v.max(0.0)).collect()),
            LayerSpec::ConcatTimeLinear(m) => {
                let t = time.ok_or(Error::MissingField("time for concat_time_linear"))?;
                let mut ext = x.0.clone();
                ext.push(t);
                m.apply(&Vector(ext))?
            }
        };
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// on-disk format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerFile {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DynamicsFile {
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
struct SolverFile {
    alpha: Option<u32>,
    tau: Option<f64>,
    h_min: Option<f64>,
    eta: Option<f64>,
    t_end: Option<f64>,
    order: Option<u32>,
    tableau: Option<String>,
    max_rejections_after_clip: Option<u32>,
    // not part of the required schema; kept so a config round-trips exactly
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    encoder: Vec<LayerFile>,
    dynamics: DynamicsFile,
    decoder: Vec<LayerFile>,
    solver: SolverFile,
    output: OutputRole,
}

fn layer_to_file(layer: &LayerSpec) -> LayerFile {
    match layer {
        LayerSpec::Relu => LayerFile {
            kind: "relu".into(),
            weight: None,
            bias: None,
        },
        LayerSpec::Linear(m) => LayerFile {
            kind: "linear".into(),
            weight: Some((0..m.rows()).map(|i| m.coeffs.row(i).to_vec()).collect()),
            bias: Some(m.offset.0.clone()),
        },
        LayerSpec::ConcatTimeLinear(m) => LayerFile {
            kind: "concat_time_linear".into(),
            weight: Some((0..m.rows()).map(|i| m.coeffs.row(i).to_vec()).collect()),
            bias: Some(m.offset.0.clone()),
        },
    }
}

fn layer_from_file(file: &LayerFile, location: &str) -> Result<LayerSpec> {
    let affine = |kind: &str| -> Result<AffineMap> {
        let weight = file.weight.as_ref().ok_or_else(|| Error::ModelParse {
            location: location.to_string(),
            message: format!("{kind} layer missing weight"),
        })?;
        let bias = file.bias.as_ref().ok_or_else(|| Error::ModelParse {
            location: location.to_string(),
            message: format!("{kind} layer missing bias"),
        })?;
        let m = Matrix::from_rows(weight)?;
        if !m.is_finite() || !bias.iter().all(|b| b.is_finite()) {
            return Err(Error::ModelParse {
                location: location.to_string(),
                message: "non-finite weight or bias".into(),
            });
        }
        AffineMap::new(m, Vector(bias.clone()))
    };
    match file.kind.as_str() {
        "relu" => Ok(LayerSpec::Relu),
        "linear" => Ok(LayerSpec::Linear(affine("linear")?)),
        "concat_time_linear" => Ok(LayerSpec::ConcatTimeLinear(affine("concat_time_linear")?)),
        other => Err(Error::ModelParse {
            location: location.to_string(),
            message: format!("unknown layer kind {other:?}"),
        }),
    }
}

fn solver_from_file(file: &SolverFile) -> Result<SolverConfig> {
    let tableau = match file
        .tableau
        .as_deref()
        .ok_or(Error::MissingField("solver_cfg.tableau"))?
    {
        "dopri5" => Tableau::Dopri5,
        "euler" => Tableau::Euler,
        "dopri8" => Tableau::Dopri8,
        other => {
            return Err(Error::ModelParse {
                location: "solver.tableau".into(),
                message: format!("unknown tableau {other:?}"),
            })
        }
    };
    let cfg = SolverConfig {
        alpha: file.alpha.ok_or(Error::MissingField("solver_cfg.alpha"))?,
        tau: file.tau.ok_or(Error::MissingField("solver_cfg.tau"))?,
        h_min: file.h_min.ok_or(Error::MissingField("solver_cfg.h_min"))?,
        eta: file.eta.ok_or(Error::MissingField("solver_cfg.eta"))?,
        beta: file.beta.unwrap_or(0.1),
        t_end: file.t_end.ok_or(Error::MissingField("solver_cfg.t_end"))?,
        order: file.order.ok_or(Error::MissingField("solver_cfg.order"))?,
        max_rejections_after_clip: file
            .max_rejections_after_clip
            .ok_or(Error::MissingField("solver_cfg.max_rejections_after_clip"))?,
        tableau,
        step_budget: None,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn model_to_file(spec: &ModelSpec) -> ModelFile {
    ModelFile {
        encoder: spec.encoder.iter().map(layer_to_file).collect(),
        dynamics: DynamicsFile {
            layers: spec.dynamics.layers.iter().map(layer_to_file).collect(),
        },
        decoder: spec.decoder.iter().map(layer_to_file).collect(),
        solver: SolverFile {
            alpha: Some(spec.solver_cfg.alpha),
            tau: Some(spec.solver_cfg.tau),
            h_min: Some(spec.solver_cfg.h_min),
            eta: Some(spec.solver_cfg.eta),
            t_end: Some(spec.solver_cfg.t_end),
            order: Some(spec.solver_cfg.order),
            tableau: Some(
                match spec.solver_cfg.tableau {
                    Tableau::Dopri5 => "dopri5",
                    Tableau::Euler => "euler",
                    Tableau::Dopri8 => "dopri8",
                }
                .into(),
            ),
            max_rejections_after_clip: Some(spec.solver_cfg.max_rejections_after_clip),
            beta: Some(spec.solver_cfg.beta),
        },
        output: spec.output,
    }
}

pub fn model_from_json(text: &str) -> Result<ModelSpec> {
    let file: ModelFile = serde_json::from_str(text)?;
    let encoder = file
        .encoder
        .iter()
        .enumerate()
        .map(|(i, l)| layer_from_file(l, &format!("encoder[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let dyn_layers = file
        .dynamics
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| layer_from_file(l, &format!("dynamics.layers[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let decoder = file
        .decoder
        .iter()
        .enumerate()
        .map(|(i, l)| layer_from_file(l, &format!("decoder[{i}]")))
        .collect::<Result<Vec<_>>>()?;

    let state_dim = dynamics_state_dim(&dyn_layers)?;
    let spec = ModelSpec {
        encoder,
        dynamics: Dynamics::new(dyn_layers, state_dim)?,
        decoder,
        solver_cfg: solver_from_file(&file.solver)?,
        output: file.output,
    };
    spec.validate()?;
    Ok(spec)
}

/// State dimension implied by the first dynamics layer.
fn dynamics_state_dim(layers: &[LayerSpec]) -> Result<usize> {
    match layers.first() {
        Some(LayerSpec::Linear(m)) => Ok(m.cols()),
        Some(LayerSpec::ConcatTimeLinear(m)) => {
            if m.cols() == 0 {
                return Err(Error::Invariant("empty concat-time layer".into()));
            }
            Ok(m.cols() - 1)
        }
        Some(LayerSpec::Relu) => Err(Error::Invariant(
            "dynamics cannot start with a ReLU (state dim unknown)".into(),
        )),
        None => Err(Error::Invariant("dynamics has no layers".into())),
    }
}

pub fn model_to_json(spec: &ModelSpec) -> Result<String> {
    Ok(serde_json::to_string_pretty(&model_to_file(spec))?)
}

pub fn load_model(path: &Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path)?;
    model_from_json(&text)
}

pub fn save_model(spec: &ModelSpec, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_json(spec)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// random model generation (test and demo plumbing)
// ---------------------------------------------------------------------------

/// Shape of a randomly generated model.
#[derive(Debug, Clone)]
pub struct RandomModelShape {
    pub state_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub with_encoder: bool,
    pub output: OutputRole,
}

impl Default for RandomModelShape {
    fn default() -> Self {
        RandomModelShape {
            state_dim: 3,
            hidden_dim: 4,
            out_dim: 2,
            with_encoder: false,
            output: OutputRole::Classification,
        }
    }
}

// weight scale keeps the dynamics mildly contractive so integrations
// neither blow up nor freeze the step controller
fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

/// Random small model with tame weights, suitable for solver and
/// verification exercises. Deterministic per seed.
pub fn random_model(shape: &RandomModelShape, seed: u64) -> ModelSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = shape.state_dim;
    let h = shape.hidden_dim;

    let w1 = random_matrix(&mut rng, h, d + 1, 1.0 / (d as f64 + 1.0));
    let b1 = Vector((0..h).map(|_| 0.0).collect());
    let w2 = random_matrix(&mut rng, d, h, 1.0 / h as f64);
    let b2 = Vector((0..d).map(|_| 0.0).collect());
    let dynamics = Dynamics::new(
        vec![
            LayerSpec::ConcatTimeLinear(AffineMap::new(w1, b1).unwrap()),
            LayerSpec::Relu,
            LayerSpec::Linear(AffineMap::new(w2, b2).unwrap()),
        ],
        d,
    )
    .unwrap();

    let encoder = if shape.with_encoder {
        let we = random_matrix(&mut rng, d, d, 1.0);
        let be = Vector((0..d).map(|_| rng.random_range(-0.1..0.1)).collect());
        vec![
            LayerSpec::Linear(AffineMap::new(we, be).unwrap()),
            LayerSpec::Relu,
        ]
    } else {
        Vec::new()
    };

    let wd = random_matrix(&mut rng, shape.out_dim, d, 1.0);
    let bd = Vector(
        (0..shape.out_dim)
            .map(|_| rng.random_range(-0.2..0.2))
            .collect(),
    );
    let decoder = vec![LayerSpec::Linear(AffineMap::new(wd, bd).unwrap())];

    let spec = ModelSpec {
        encoder,
        dynamics,
        decoder,
        solver_cfg: SolverConfig {
            alpha: 2,
            tau: 0.005,
            h_min: 0.02,
            eta: 0.1,
            beta: 0.1,
            t_end: 1.0,
            order: 5,
            max_rejections_after_clip: 2,
            tableau: Tableau::Dopri5,
            step_budget: None,
        },
        output: shape.output,
    };
    spec.validate().expect("generated model is valid");
    spec
}
