use super::{Gradients, Network, NnetError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-7,
    };

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "SGD",
            OptimizerKind::Adam { .. } => "Adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = NnetError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::ADAM),
            other => Err(NnetError::InvalidSpec(format!(
                "unknown optimizer {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        let spec = Self {
            kind,
            learning_rate,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::ADAM, learning_rate)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnetError::InvalidSpec(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } = self.kind
        {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 {
                return Err(NnetError::InvalidSpec(
                    "Adam betas must be in [0, 1) and epsilon > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One update of `params` in place. `step` is the 1-based update count used
/// for Adam's bias correction; `moments` is ignored by SGD.
pub fn optimizer_step(
    spec: &OptimizerSpec,
    params: &mut [f64],
    grads: &[f64],
    moments: &mut AdamMoments,
    step: u64,
) {
    assert_eq!(
        params.len(),
        grads.len(),
        "parameter and gradient lengths differ"
    );
    let lr = spec.learning_rate;
    match spec.kind {
        OptimizerKind::Sgd => {
            for (w, g) in params.iter_mut().zip(grads) {
                *w -= lr * g;
            }
        }
        OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } => {
            if moments.m.len() != params.len() {
                *moments = AdamMoments::zeros(params.len());
            }
            let t = step.max(1) as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for ((w, g), (m, v)) in params
                .iter_mut()
                .zip(grads)
                .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}

/// Stateful optimizer over a whole network.
#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    step: u64,
    state: Vec<Option<(AdamMoments, AdamMoments)>>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        Self {
            spec,
            step: 0,
            state: Vec::new(),
        }
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies `grads` to every trainable layer. Frozen layers are never touched.
    pub fn apply(&mut self, net: &mut Network, grads: &Gradients) {
        self.step += 1;
        if self.state.len() < net.layers().len() {
            self.state.resize(net.layers().len(), None);
        }
        for (idx, g) in grads.params.iter().enumerate() {
            let Some(g) = g else { continue };
            if net.layers()[idx].is_frozen() {
                continue;
            }
            let state = self.state[idx].get_or_insert_with(Default::default);
            let Some(p) = net.params_mut(idx) else {
                continue;
            };
            optimizer_step(
                &self.spec,
                &mut p.weights,
                &g.weights,
                &mut state.0,
                self.step,
            );
            optimizer_step(&self.spec, &mut p.bias, &g.bias, &mut state.1, self.step);
        }
    }
}
