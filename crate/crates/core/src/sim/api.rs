use std::collections::BTreeMap;
use std::sync::Arc;

use crate::blueprint::BlueprintDraft;
use crate::clock::{Clock, ManualClock, Millis};
use crate::error::Result;
use crate::experiments::{default_base_config, AteResult, ExperimentSpec, LearnerKind};
use crate::service::{
    DecisionRequest, DecisionResponse, DisplayRequest, MaintenanceReport, MaintenanceRequest, ObservationBatch,
    Platform, PlatformConfig, RankingRequest, RankingResponse,
};
use crate::space::DecisionSpace;

/// The platform surface a scenario drives. Implemented in-process over a
/// simulated clock and remotely over HTTP.
pub trait LoopApi {
    /// Whether `set_time` moves the platform clock. Remote platforms run on
    /// their own clock, so scenarios leave timestamps to the server.
    fn controls_clock(&self) -> bool;
    fn set_time(&self, t: Millis);
    fn now(&self) -> Result<Millis>;

    fn register_usecase(&self, usecase: &str, space: DecisionSpace) -> Result<()>;
    fn create_blueprint(&self, usecase: &str, draft: &BlueprintDraft) -> Result<u32>;
    fn activate(&self, usecase: &str, version: u32) -> Result<()>;

    fn get_decision(&self, req: &DecisionRequest) -> Result<DecisionResponse>;
    fn log_observations(&self, batch: &ObservationBatch) -> Result<()>;
    fn get_ranking(&self, req: &RankingRequest) -> Result<RankingResponse>;
    fn log_display(&self, req: &DisplayRequest) -> Result<()>;

    fn maintain(&self, usecase: &str, req: &MaintenanceRequest) -> Result<MaintenanceReport>;

    fn create_experiment(&self, spec: &ExperimentSpec) -> Result<String>;
    fn advance_phase(&self, experiment_id: &str, learner: LearnerKind) -> Result<()>;
    fn ate(&self, experiment_id: &str) -> Result<AteResult>;
    fn predict_cate(&self, experiment_id: &str, x: &[f64]) -> Result<BTreeMap<String, f64>>;
}

/// A platform in this process whose clock the scenario owns.
pub struct InProcess {
    pub platform: Arc<Platform>,
    pub clock: Arc<ManualClock>,
}

impl InProcess {
    pub fn new(config: PlatformConfig, start: Millis) -> Result<Self> {
        let clock = Arc::new(ManualClock::new(start));
        let platform = Platform::with_clock(config, clock.clone())?;
        Ok(Self { platform, clock })
    }
}

impl LoopApi for InProcess {
    fn controls_clock(&self) -> bool {
        true
    }

    fn set_time(&self, t: Millis) {
        self.clock.set(t);
    }

    fn now(&self) -> Result<Millis> {
        Ok(self.clock.now())
    }

    fn register_usecase(&self, usecase: &str, space: DecisionSpace) -> Result<()> {
        self.platform.blueprints.register_usecase(usecase, space)
    }

    fn create_blueprint(&self, usecase: &str, draft: &BlueprintDraft) -> Result<u32> {
        let fs = &self.platform.features;
        let bp = self.platform.blueprints.create_version(usecase, draft.clone(), &|g| fs.has_group(g), self.clock.now())?;
        Ok(bp.version)
    }

    fn activate(&self, usecase: &str, version: u32) -> Result<()> {
        self.platform.blueprints.activate(usecase, version).map(|_| ())
    }

    fn get_decision(&self, req: &DecisionRequest) -> Result<DecisionResponse> {
        self.platform.get_decision(req)
    }

    fn log_observations(&self, batch: &ObservationBatch) -> Result<()> {
        self.platform.log_observations(batch)
    }

    fn get_ranking(&self, req: &RankingRequest) -> Result<RankingResponse> {
        self.platform.get_ranking(req)
    }

    fn log_display(&self, req: &DisplayRequest) -> Result<()> {
        self.platform.log_display(req)
    }

    fn maintain(&self, usecase: &str, req: &MaintenanceRequest) -> Result<MaintenanceReport> {
        self.platform.maintain(usecase, req)
    }

    fn create_experiment(&self, spec: &ExperimentSpec) -> Result<String> {
        Ok(self.platform.experiments.create(spec.clone(), self.clock.now())?.experiment_id.clone())
    }

    fn advance_phase(&self, experiment_id: &str, learner: LearnerKind) -> Result<()> {
        self.platform.experiments.advance_phase(experiment_id, learner, &default_base_config()).map(|_| ())
    }

    fn ate(&self, experiment_id: &str) -> Result<AteResult> {
        self.platform.experiments.ate(experiment_id, None)
    }

    fn predict_cate(&self, experiment_id: &str, x: &[f64]) -> Result<BTreeMap<String, f64>> {
        self.platform.experiments.predict_cate(experiment_id, x)
    }
}
