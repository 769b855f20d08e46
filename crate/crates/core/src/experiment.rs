//! Joint vs detection-only comparison on a synthetic world.
//!
//! A model is first pretrained on detection data alone. From that shared
//! starting point one copy continues with joint training and another with
//! detection-only training for the same number of optimizer steps; both are
//! then scored on the held-out unseen classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::model::ToyModel;
use crate::optim::TrainConfig;
use crate::splits::shipped_templates;
use crate::train::{
    steps_per_epoch, train, Classifiers, EvalSets, TrainMode, TrainState, WeakConfig,
};
use crate::world::{generate_world, SyntheticWorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainProtocol {
    pub world: SyntheticWorldConfig,
    pub hidden_dim: usize,
    /// Detection-only pretraining; its seed is replaced by the run seed.
    pub pretrain: TrainConfig,
    pub joint_epochs: usize,
    pub joint_warmup_epochs: usize,
    pub weak: WeakConfig,
    pub inference: InferenceConfig,
}

impl Default for GainProtocol {
    fn default() -> Self {
        Self {
            world: SyntheticWorldConfig {
                feature_dim: 9,
                det_images: 48,
                cls_images: 192,
                test_images: 100,
                unseen_affinity: 0.5,
                ..Default::default()
            },
            hidden_dim: 32,
            pretrain: TrainConfig {
                base_lr: 0.05,
                total_epochs: 200,
                warmup_epochs: 2,
                ..Default::default()
            },
            joint_epochs: 40,
            joint_warmup_epochs: 1,
            weak: WeakConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainOutcome {
    pub seed: u64,
    pub pretrain_map_unseen: f64,
    pub joint_map_unseen: f64,
    pub control_map_unseen: f64,
    pub joint_map_seen: f64,
    pub control_map_seen: f64,
    pub joint_steps: u64,
    pub control_steps: u64,
}

impl GainOutcome {
    pub fn gain(&self) -> f64 {
        self.joint_map_unseen - self.control_map_unseen
    }
}

pub fn run_gain(protocol: &GainProtocol, seed: u64) -> Result<GainOutcome> {
    let templates = shipped_templates();
    let wcfg = SyntheticWorldConfig {
        seed,
        ..protocol.world.clone()
    };
    let world = generate_world(&wcfg, &templates)?;
    let classifiers = Classifiers::from_world(&world, &templates)?;
    let mut eval = EvalSets::from_world(&world, &templates, protocol.inference)?;
    eval.every = 0;
    let weak = &protocol.weak;

    let base = TrainConfig {
        seed,
        ..protocol.pretrain.clone()
    };
    let mut pre = TrainState::new(ToyModel::init(
        wcfg.channels(),
        protocol.hidden_dim,
        wcfg.embed_dim,
        seed,
    ));
    let rp = train(
        &mut pre,
        (&world).into(),
        &classifiers,
        &base,
        weak,
        TrainMode::DetectionOnly,
        Some(&eval),
    )?;

    let spe_j = steps_per_epoch((&world).into(), TrainMode::Joint, weak, &base);
    let spe_d = steps_per_epoch((&world).into(), TrainMode::DetectionOnly, weak, &base);
    let joint_steps = protocol.joint_epochs * spe_j;
    let warmup_steps = protocol.joint_warmup_epochs * spe_j;
    if !joint_steps.is_multiple_of(spe_d) || !warmup_steps.is_multiple_of(spe_d) {
        return Err(Error::InvalidConfig(format!(
            "joint phase of {joint_steps} steps cannot be matched by whole detection-only epochs of {spe_d} steps"
        )));
    }
    let jcfg = TrainConfig {
        total_epochs: protocol.joint_epochs,
        warmup_epochs: protocol.joint_warmup_epochs,
        ..base.clone()
    };
    let dcfg = TrainConfig {
        total_epochs: joint_steps / spe_d,
        warmup_epochs: warmup_steps / spe_d,
        ..base.clone()
    };
    let mut joint = pre.clone();
    let rj = train(
        &mut joint,
        (&world).into(),
        &classifiers,
        &jcfg,
        weak,
        TrainMode::Joint,
        Some(&eval),
    )?;
    let mut control = pre.clone();
    let rd = train(
        &mut control,
        (&world).into(),
        &classifiers,
        &dcfg,
        weak,
        TrainMode::DetectionOnly,
        Some(&eval),
    )?;

    let last = |r: &[crate::train::EpochRecord]| -> Result<(f64, f64)> {
        let rec = r
            .last()
            .ok_or_else(|| Error::InvalidConfig("phase has zero epochs".into()))?;
        Ok((rec.map_unseen.unwrap_or(0.0), rec.map_seen.unwrap_or(0.0)))
    };
    let (pu, _) = last(&rp)?;
    let (ju, js) = last(&rj)?;
    let (cu, cs) = last(&rd)?;
    Ok(GainOutcome {
        seed,
        pretrain_map_unseen: pu,
        joint_map_unseen: ju,
        control_map_unseen: cu,
        joint_map_seen: js,
        control_map_seen: cs,
        joint_steps: joint.optimizer.step - pre.optimizer.step,
        control_steps: control.optimizer.step - pre.optimizer.step,
    })
}
