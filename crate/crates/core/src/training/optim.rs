use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Weight decay, if any, is added to the gradient.
    Adam,
    /// Weight decay is applied directly to the parameters.
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            weight_decay,
            ..Self::adam()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// Adam / AdamW moment buffers for one parameter store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new<T: Scalar>(config: OptimizerConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Ok(Self {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one bias-corrected update with learning rate `lr`. Parameters
    /// without a gradient still receive decoupled weight decay.
    pub fn step<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Vec<T>)],
        lr: f64,
    ) {
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        let mut grad_of: Vec<Option<&[T]>> = vec![None; self.first.len()];
        for (id, g) in grads {
            grad_of[id.index()] = Some(g);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let grad = grad_of[k];
            let decoupled = c.kind == OptimizerKind::AdamW && c.weight_decay > 0.0;
            if grad.is_none() && !decoupled {
                continue;
            }
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let data = store.get_mut(id).data_mut();
            for j in 0..data.len() {
                let p = data[j].as_f64();
                let mut next = p;
                if c.kind == OptimizerKind::AdamW {
                    next -= lr * c.weight_decay * p;
                }
                if let Some(gr) = grad {
                    let mut gj = gr[j].as_f64();
                    if c.kind == OptimizerKind::Adam {
                        gj += c.weight_decay * p;
                    }
                    m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                    v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                    next -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                }
                data[j] = T::lit(next);
            }
        }
    }
}

/// Slanted triangular schedule: linear warm-up from `lr_max / ratio` to
/// `lr_max` over the first `cut_fraction` of steps, then linear decay back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stlr {
    pub total_steps: usize,
    pub cut_fraction: f64,
    pub lr_max: f64,
    pub ratio: f64,
}

impl Stlr {
    pub fn new(total_steps: usize, cut_fraction: f64, lr_max: f64, ratio: f64) -> Result<Self> {
        if !(cut_fraction > 0.0 && cut_fraction < 1.0) {
            return Err(Error::Config(format!(
                "cut_fraction {cut_fraction} outside (0, 1)"
            )));
        }
        if ratio < 1.0 || lr_max < 0.0 || total_steps == 0 {
            return Err(Error::Config(
                "STLR needs ratio >= 1, lr_max >= 0 and at least one step".into(),
            ));
        }
        Ok(Self {
            total_steps,
            cut_fraction,
            lr_max,
            ratio,
        })
    }

    pub fn cut(&self) -> f64 {
        self.total_steps as f64 * self.cut_fraction
    }

    pub fn lr(&self, step: usize) -> f64 {
        let t = step.min(self.total_steps) as f64;
        let cut = self.cut();
        let p = if t < cut {
            t / cut
        } else {
            1.0 - (t - cut) / (self.total_steps as f64 - cut)
        };
        self.lr_max * (1.0 + p * (self.ratio - 1.0)) / self.ratio
    }
}
