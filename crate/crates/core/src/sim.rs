//! Closed-loop episode engine: surrounding-vehicle behavior generation, the
//! observe -> estimate -> decide -> plan -> act loop, collision checking,
//! per-episode metrics, Monte-Carlo batches, and the information-set
//! convergence study.
//!
//! Episodes are deterministic given (config, planner kind, seed) and
//! independent across seeds, so batches fan out across threads when the
//! `parallel` feature is enabled; aggregation is order-independent because
//! results are collected in episode-index order either way.

use crate::decision::{decide, DecisionParams, Maneuver};
use crate::estimator::{init_bounds, worst_case_bounds, AccelBounds, EstimatorError, InformationSet};
use crate::models::{
    ev_step_rk4, sv_step, EvControl, EvState, FeedbackGains, ModelError, SvState, VehicleGeometry,
};
use crate::planner::{
    inflate_obstacle, occupancy_for_planner, solve_mpc, MpcSolution, ObstacleStep, PlannerParams,
    SolveStatus, SqpSettings,
};
use crate::polytope::Polytope2;
use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::time::Instant;
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which input set drives occupancy prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlannerKind {
    Proposed,
    Rmpc,
    Dmpc,
}

impl PlannerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlannerKind::Proposed => "proposed",
            PlannerKind::Rmpc => "rmpc",
            PlannerKind::Dmpc => "dmpc",
        }
    }

    pub const ALL: [PlannerKind; 3] = [PlannerKind::Proposed, PlannerKind::Rmpc, PlannerKind::Dmpc];
}

impl std::str::FromStr for PlannerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "proposed" => Ok(PlannerKind::Proposed),
            "rmpc" => Ok(PlannerKind::Rmpc),
            "dmpc" => Ok(PlannerKind::Dmpc),
            other => Err(format!("unknown planner kind `{other}`")),
        }
    }
}

/// Gaussian truncated to `[lo, hi]` by rejection (clamped after 64 misses).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedGaussian {
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncatedGaussian {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.std <= 0.0 {
            return self.mean.clamp(self.lo, self.hi);
        }
        let normal = Normal::new(self.mean, self.std).expect("finite std");
        for _ in 0..64 {
            let x = normal.sample(rng);
            if x >= self.lo && x <= self.hi {
                return x;
            }
        }
        normal.sample(rng).clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorKind {
    Nominal,
    SuddenAccelNearTerminal,
}

/// Acceleration generator for one surrounding vehicle. The burst distribution
/// replaces the nominal one while the ego is mid-merge nearby and close to
/// the lane terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorProfile {
    pub kind: BehaviorKind,
    pub nominal: TruncatedGaussian,
    pub burst: TruncatedGaussian,
    /// Longitudinal window around the ego that arms the burst.
    pub trigger_gap: f64,
    /// Distance before the lane terminal within which the burst can arm.
    pub trigger_range: f64,
}

impl BehaviorProfile {
    pub fn nominal(mean: f64, std: f64, lo: f64, hi: f64) -> Self {
        Self {
            kind: BehaviorKind::Nominal,
            nominal: TruncatedGaussian { mean, std, lo, hi },
            burst: TruncatedGaussian {
                mean,
                std,
                lo,
                hi,
            },
            trigger_gap: 30.0,
            trigger_range: 250.0,
        }
    }
}

/// Everything one episode needs. `standard()` carries the stock two-lane
/// forced-merge setup.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub t: f64,
    pub n_predict: usize,
    pub n_mpc: usize,
    pub mu: f64,
    pub g: f64,
    pub v_adm: f64,
    pub lane_width: f64,
    pub p_x_ter: f64,
    pub geometry: VehicleGeometry,
    pub w_accel_x: f64,
    pub w_accel_y: f64,
    pub w_velocity: f64,
    pub w_lane_dev: f64,
    /// Safety distance in the reference-velocity corridor (vehicle length is
    /// added on top).
    pub min_gap: f64,
    pub k_lon: Vector3<f64>,
    pub k_lat: Vector3<f64>,
    pub q_steer: f64,
    pub q_jerk: f64,
    pub q_terminal: Vector2<f64>,
    /// Collision keep-out distance in the planner.
    pub min_distance: f64,
    pub u_lower: Vector3<f64>,
    pub u_upper: Vector3<f64>,
    pub sqp: SqpSettings,
    pub ev_initial: EvState,
    pub sv_initial: [SvState; 2],
    pub sv_profiles: [BehaviorProfile; 2],
    /// Initial information set shared by both vehicles (the convergence study
    /// overrides it per vehicle).
    pub initial_info: Vec<f64>,
    pub max_steps: usize,
    pub settle_steps: usize,
    pub stop_steps: usize,
}

impl ScenarioConfig {
    /// Stock scenario: ego merging from the ending lane at 30 m/s, lead
    /// vehicle 10 m behind it in the target lane, trailing vehicle 50 m
    /// further back, lead vehicle armed to surge while the ego merges near
    /// the terminal.
    pub fn standard() -> Self {
        let nominal = TruncatedGaussian {
            mean: 0.0,
            std: 0.3,
            lo: -1.5,
            hi: 1.5,
        };
        let sv0 = BehaviorProfile {
            kind: BehaviorKind::SuddenAccelNearTerminal,
            nominal,
            burst: TruncatedGaussian {
                mean: 2.0,
                std: 0.3,
                lo: 0.5,
                hi: 4.0,
            },
            trigger_gap: 30.0,
            trigger_range: 250.0,
        };
        let sv1 = BehaviorProfile {
            kind: BehaviorKind::Nominal,
            nominal,
            burst: nominal,
            trigger_gap: 30.0,
            trigger_range: 250.0,
        };
        Self {
            t: 0.25,
            n_predict: 20,
            n_mpc: 10,
            mu: 0.71,
            g: 9.8,
            v_adm: 50.0,
            lane_width: 4.0,
            p_x_ter: 1000.0,
            geometry: VehicleGeometry::new(1.65, 1.65, 4.3, 1.8).expect("stock geometry"),
            w_accel_x: 0.1,
            w_accel_y: 0.1,
            w_velocity: 0.7,
            w_lane_dev: 0.1,
            min_gap: 0.5,
            k_lon: Vector3::new(0.0, 0.3847, 0.8663),
            k_lat: Vector3::new(0.5681, 1.4003, 1.7260),
            q_steer: 100.0,
            q_jerk: 0.001,
            q_terminal: Vector2::new(1.0, 1.0),
            min_distance: 0.1,
            u_lower: Vector3::new(0.0, -5.0, -0.1),
            u_upper: Vector3::new(50.0, 2.5, 0.1),
            sqp: SqpSettings::default(),
            ev_initial: EvState {
                p_x: 822.5,
                p_y: 2.0,
                phi: 0.0,
                v: 30.0,
                a: 0.0,
            },
            sv_initial: [
                SvState {
                    p_x: 812.5,
                    v_x: 30.0,
                },
                SvState {
                    p_x: 772.5,
                    v_x: 30.0,
                },
            ],
            sv_profiles: [sv0, sv1],
            initial_info: vec![0.0],
            max_steps: 400,
            settle_steps: 20,
            stop_steps: 8,
        }
    }

    pub fn lane1_center(&self) -> f64 {
        0.5 * self.lane_width
    }

    pub fn lane2_center(&self) -> f64 {
        1.5 * self.lane_width
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_string()));
        if self.t <= 0.0 {
            return bad("step time must be positive");
        }
        if self.n_predict == 0 || self.n_mpc == 0 {
            return bad("horizons must be at least one step");
        }
        if self.n_mpc > self.n_predict {
            return bad("planning horizon cannot exceed the prediction horizon");
        }
        if self.mu <= 0.0 || self.g <= 0.0 {
            return bad("friction parameters must be positive");
        }
        if self.v_adm <= 0.0 || self.lane_width <= 0.0 {
            return bad("road parameters must be positive");
        }
        if self.min_gap < 0.0 || self.min_distance < 0.0 {
            return bad("safety distances must be nonnegative");
        }
        if self.sv_initial[1].p_x > self.sv_initial[0].p_x {
            return bad("the trailing vehicle must start behind the lead vehicle");
        }
        if self.max_steps == 0 {
            return bad("episode step limit must be positive");
        }
        if self.initial_info.is_empty() {
            return bad("initial information set must be nonempty");
        }
        let worst = self.mu * self.g;
        for (i, p) in self.sv_profiles.iter().enumerate() {
            for d in [&p.nominal, &p.burst] {
                if d.lo > d.hi || d.std < 0.0 {
                    return bad(&format!("vehicle {i} acceleration distribution is malformed"));
                }
                if d.lo < -worst || d.hi > worst {
                    return bad(&format!(
                        "vehicle {i} acceleration support exceeds the friction limit"
                    ));
                }
            }
        }
        FeedbackGains::new(self.k_lon, self.k_lat, self.t)?;
        Ok(())
    }

    pub fn decision_params(&self) -> DecisionParams {
        DecisionParams {
            d_min_qp: self.min_gap + self.geometry.l_veh,
            w_accel_x: self.w_accel_x,
            w_accel_y: self.w_accel_y,
            w_velocity: self.w_velocity,
            w_lane: self.w_lane_dev,
            gains: FeedbackGains::new(self.k_lon, self.k_lat, self.t).expect("validated config"),
            t: self.t,
            n: self.n_predict,
            lane_width: self.lane_width,
            p_x_ter: self.p_x_ter,
            v_adm: self.v_adm,
        }
    }

    pub fn planner_params(&self) -> PlannerParams {
        PlannerParams {
            n_p: self.n_mpc,
            q1: self.q_steer,
            q2: self.q_jerk,
            q3: self.q_terminal,
            u_lower: self.u_lower,
            u_upper: self.u_upper,
            d_min: self.min_distance,
            lane_width: self.lane_width,
            p_x_ter: self.p_x_ter,
            t: self.t,
            geometry: self.geometry,
            sqp: self.sqp.clone(),
        }
    }
}

/// Acceleration draw for one vehicle at one tick: burst distribution while
/// the ego is mid-merge within the trigger window near the terminal,
/// otherwise nominal. Draws always stay inside the friction limits because
/// profile supports are validated against them.
pub fn sample_sv_accel(
    profile: &BehaviorProfile,
    sv: &SvState,
    ev: &EvState,
    cfg: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let dist = if profile.kind == BehaviorKind::SuddenAccelNearTerminal
        && burst_triggered(profile, sv, ev, cfg)
    {
        &profile.burst
    } else {
        &profile.nominal
    };
    dist.sample(rng)
}

fn burst_triggered(
    profile: &BehaviorProfile,
    sv: &SvState,
    ev: &EvState,
    cfg: &ScenarioConfig,
) -> bool {
    let merging = ev.p_y > cfg.lane1_center() + 0.05 * cfg.lane_width
        && ev.p_y - cfg.geometry.half_width() < cfg.lane_width;
    merging
        && (ev.p_x - sv.p_x).abs() < profile.trigger_gap
        && ev.p_x > cfg.p_x_ter - profile.trigger_range
}

/// Acceleration actually applied by the simulator: saturated so the
/// double-integrator step lands inside the admissible speed window. The
/// saturated value is what the ego observes, keeping estimation consistent
/// with realized motion.
pub fn admissible_accel(sample: f64, v: f64, t: f64, v_adm: f64) -> f64 {
    sample.clamp(-v / t, (v_adm - v) / t)
}

/// Axis-aligned footprint overlap (heading ignored), road-boundary exit, and
/// at episode end the missed-merge clause: still in lane 1 beyond the
/// terminal while moving.
pub fn check_collision(
    ev: &EvState,
    svs: &[SvState],
    geom: &VehicleGeometry,
    lane_width: f64,
    sv_lateral: f64,
    p_x_ter: f64,
    at_episode_end: bool,
) -> bool {
    for sv in svs {
        if (ev.p_x - sv.p_x).abs() < geom.l_veh && (ev.p_y - sv_lateral).abs() < geom.w_veh {
            return true;
        }
    }
    if ev.p_y - geom.half_width() < 0.0 || ev.p_y + geom.half_width() > 2.0 * lane_width {
        return true;
    }
    if at_episode_end && ev.p_y < lane_width && ev.p_x > p_x_ter && ev.v > 0.1 {
        return true;
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeClass {
    Ahead,
    Between,
    After,
    NoMerge,
}

impl MergeClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            MergeClass::Ahead => "ahead",
            MergeClass::Between => "between",
            MergeClass::After => "after",
            MergeClass::NoMerge => "no_merge",
        }
    }
}

/// Classify at the first instant the ego footprint is fully inside lane 2 by
/// the longitudinal order of the vehicle centers.
pub fn classify_merge(
    series: &[(EvState, [SvState; 2])],
    geom: &VehicleGeometry,
    lane_width: f64,
) -> (MergeClass, Option<usize>) {
    for (idx, (ev, svs)) in series.iter().enumerate() {
        if ev.p_y - geom.half_width() >= lane_width {
            let class = if ev.p_x > svs[0].p_x {
                MergeClass::Ahead
            } else if ev.p_x < svs[1].p_x {
                MergeClass::After
            } else {
                MergeClass::Between
            };
            return (class, Some(idx));
        }
    }
    (MergeClass::NoMerge, None)
}

#[derive(Debug, Clone, Copy)]
pub struct SvStepRecord {
    pub state: SvState,
    pub a_applied: f64,
    pub bounds: AccelBounds,
}

/// One closed-loop tick: the state at its time stamp, the control and
/// vehicle accelerations applied over the following interval, the decision
/// and solver outputs that produced them, and footprint distances.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub time: f64,
    pub ev: EvState,
    pub control: EvControl,
    pub sv: [SvStepRecord; 2],
    pub maneuver: Maneuver,
    pub v_ref: f64,
    pub p_y_ref: f64,
    pub solver_status: SolveStatus,
    pub solve_time_s: f64,
    pub planning_time_s: f64,
    pub d_sv: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeOutcome {
    Merged,
    StoppedInLane1,
    Collision,
    StepLimit,
}

#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub planner: PlannerKind,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub final_ev: EvState,
    pub final_svs: [SvState; 2],
    pub outcome: EpisodeOutcome,
    pub merge_step: Option<usize>,
    pub collision: bool,
}

impl EpisodeLog {
    /// State series at t = 0..=K (records carry t = 0..K-1, plus the final
    /// state).
    pub fn state_series(&self) -> Vec<(EvState, [SvState; 2])> {
        let mut out: Vec<(EvState, [SvState; 2])> = self
            .records
            .iter()
            .map(|r| (r.ev, [r.sv[0].state, r.sv[1].state]))
            .collect();
        out.push((self.final_ev, self.final_svs));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSummary {
    pub success: bool,
    pub merge_class: MergeClass,
    /// Minimum footprint distance to the lead vehicle while the ego center is
    /// in lane 2; absent if the ego never got there.
    pub min_d_sv0: Option<f64>,
    pub min_d_sv1: Option<f64>,
    pub max_abs_accel: f64,
}

/// Footprint distance between the ego and one surrounding vehicle.
pub fn footprint_distance(
    ev: &EvState,
    sv: &SvState,
    geom: &VehicleGeometry,
    sv_lateral: f64,
) -> f64 {
    let half = Vector2::new(geom.half_length(), geom.half_width());
    let ev_box = Polytope2::from_box(&Vector2::new(ev.p_x, ev.p_y), &half).expect("footprint");
    let sv_box =
        Polytope2::from_box(&Vector2::new(sv.p_x, sv_lateral), &half).expect("footprint");
    ev_box.distance_to(&sv_box)
}

struct SvAgent {
    state: SvState,
    profile: BehaviorProfile,
    info: InformationSet,
    bounds: AccelBounds,
    last_applied: Option<f64>,
}

/// One closed-loop episode; `step` executes a single tick.
pub struct Episode {
    cfg: ScenarioConfig,
    kind: PlannerKind,
    seed: u64,
    rng: ChaCha8Rng,
    ev: EvState,
    svs: [SvAgent; 2],
    warm: Option<MpcSolution>,
    worst: AccelBounds,
    records: Vec<StepRecord>,
    collision: bool,
    merge_step: Option<usize>,
}

impl Episode {
    pub fn new(cfg: &ScenarioConfig, kind: PlannerKind, seed: u64) -> Result<Self, SimError> {
        Self::with_info(
            cfg,
            kind,
            seed,
            [cfg.initial_info.clone(), cfg.initial_info.clone()],
        )
    }

    /// Variant with a per-vehicle initial information set (convergence study).
    pub fn with_info(
        cfg: &ScenarioConfig,
        kind: PlannerKind,
        seed: u64,
        info: [Vec<f64>; 2],
    ) -> Result<Self, SimError> {
        cfg.validate()?;
        let worst = worst_case_bounds(cfg.mu, cfg.g)?;
        let make_agent = |i: usize, samples: Vec<f64>| -> Result<SvAgent, SimError> {
            let info = InformationSet::new(samples)?;
            let bounds = init_bounds(&info);
            Ok(SvAgent {
                state: cfg.sv_initial[i],
                profile: cfg.sv_profiles[i].clone(),
                info,
                bounds,
                last_applied: None,
            })
        };
        let [info0, info1] = info;
        Ok(Self {
            cfg: cfg.clone(),
            kind,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ev: cfg.ev_initial,
            svs: [make_agent(0, info0)?, make_agent(1, info1)?],
            warm: None,
            worst,
            records: Vec::new(),
            collision: false,
            merge_step: None,
        })
    }

    pub fn ev(&self) -> &EvState {
        &self.ev
    }

    pub fn sv_states(&self) -> [SvState; 2] {
        [self.svs[0].state, self.svs[1].state]
    }

    pub fn sv_bounds(&self) -> [AccelBounds; 2] {
        [self.svs[0].bounds, self.svs[1].bounds]
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    /// One tick of the closed loop. Returns the record it appended.
    pub fn step(&mut self) -> &StepRecord {
        let cfg = &self.cfg;
        let t_index = self.records.len();
        let planning_start = Instant::now();

        // (1) Fold in each vehicle's realized acceleration from the last tick.
        for sv in &mut self.svs {
            if let Some(a) = sv.last_applied {
                sv.bounds = sv.bounds.update(a).expect("finite applied accel");
                sv.info.push(a).expect("finite applied accel");
            }
        }

        // (2) Forward occupancy with this planner's input set.
        let lane2 = cfg.lane2_center();
        let predictions: Vec<_> = self
            .svs
            .iter()
            .map(|sv| {
                occupancy_for_planner(
                    self.kind,
                    &sv.state,
                    &sv.bounds,
                    &self.worst,
                    cfg.n_predict,
                    cfg.v_adm,
                    cfg.t,
                    &cfg.geometry,
                    lane2,
                )
            })
            .collect();

        // (3) Maneuver decision.
        let decision = decide(
            &self.ev,
            &self.svs[0].state,
            &self.svs[1].state,
            &predictions[0],
            &predictions[1],
            &cfg.decision_params(),
        );

        // (4) Trajectory planning against the inflated occupancies.
        let obstacles: Vec<Vec<ObstacleStep>> = predictions
            .iter()
            .map(|p| {
                p.occupancy[..cfg.n_mpc]
                    .iter()
                    .map(|o| inflate_obstacle(o, &cfg.geometry))
                    .collect()
            })
            .collect();
        let solution = solve_mpc(
            &self.ev,
            &decision.reference,
            &obstacles,
            &cfg.planner_params(),
            self.warm.as_ref(),
        );
        let planning_time = planning_start.elapsed().as_secs_f64();

        let control = if solution.status == SolveStatus::InfeasibleRelaxed {
            // Brake hard for one tick, steering held at zero; the jerk is
            // floored so velocity cannot undershoot zero over the step.
            let eta_brake = (cfg.u_lower[1] - self.ev.a) / cfg.t;
            let eta_floor =
                2.0 * (0.0 - self.ev.v - cfg.t * self.ev.a) / (cfg.t * cfg.t);
            EvControl {
                delta: 0.0,
                eta: eta_brake.max(eta_floor),
            }
        } else {
            solution.controls[0]
        };

        let d_sv = [
            footprint_distance(&self.ev, &self.svs[0].state, &cfg.geometry, lane2),
            footprint_distance(&self.ev, &self.svs[1].state, &cfg.geometry, lane2),
        ];
        let pre_ev = self.ev;
        let pre_sv = [self.svs[0].state, self.svs[1].state];

        // (5) Ego advances under the first control.
        self.ev = ev_step_rk4(&self.ev, &control, &cfg.geometry, cfg.t);

        // (6) Surrounding vehicles advance under saturated draws.
        let mut applied = [0.0_f64; 2];
        for (i, sv) in self.svs.iter_mut().enumerate() {
            let sample = sample_sv_accel(&sv.profile, &sv.state, &pre_ev, cfg, &mut self.rng);
            let a = admissible_accel(sample, sv.state.v_x, cfg.t, cfg.v_adm);
            sv.state = sv_step(&sv.state, a, cfg.t);
            sv.last_applied = Some(a);
            applied[i] = a;
        }

        // (7) Log and bookkeeping.
        if check_collision(
            &self.ev,
            &self.sv_states(),
            &cfg.geometry,
            cfg.lane_width,
            lane2,
            cfg.p_x_ter,
            false,
        ) {
            self.collision = true;
        }
        if self.merge_step.is_none() && self.ev.p_y - cfg.geometry.half_width() >= cfg.lane_width
        {
            self.merge_step = Some(t_index + 1);
        }
        self.warm = Some(solution.clone());
        self.records.push(StepRecord {
            time: t_index as f64 * cfg.t,
            ev: pre_ev,
            control,
            sv: [
                SvStepRecord {
                    state: pre_sv[0],
                    a_applied: applied[0],
                    bounds: self.svs[0].bounds,
                },
                SvStepRecord {
                    state: pre_sv[1],
                    a_applied: applied[1],
                    bounds: self.svs[1].bounds,
                },
            ],
            maneuver: decision.reference.maneuver,
            v_ref: decision.reference.v_x_ref,
            p_y_ref: decision.reference.p_y_ref,
            solver_status: solution.status,
            solve_time_s: solution.solve_time,
            planning_time_s: planning_time,
            d_sv,
        });
        self.records.last().expect("just pushed")
    }

    /// Drive the episode to termination: merge completion plus a settling
    /// window, a sustained stop in lane 1, a collision, or the step limit.
    pub fn run(mut self) -> (EpisodeLog, MetricsSummary) {
        let cfg = self.cfg.clone();
        let mut outcome = EpisodeOutcome::StepLimit;
        let mut stop_count = 0usize;
        let mut settle_count = 0usize;
        for _ in 0..cfg.max_steps {
            self.step();
            if self.collision {
                outcome = EpisodeOutcome::Collision;
                break;
            }
            if self.merge_step.is_some() {
                settle_count += 1;
                if settle_count >= cfg.settle_steps {
                    outcome = EpisodeOutcome::Merged;
                    break;
                }
            }
            if self.ev.v <= 0.1 && self.ev.p_y < cfg.lane_width {
                stop_count += 1;
                if stop_count >= cfg.stop_steps {
                    outcome = EpisodeOutcome::StoppedInLane1;
                    break;
                }
            } else {
                stop_count = 0;
            }
        }
        if outcome == EpisodeOutcome::StepLimit && self.merge_step.is_some() {
            outcome = EpisodeOutcome::Merged;
        }

        let log = EpisodeLog {
            planner: self.kind,
            seed: self.seed,
            records: self.records,
            final_ev: self.ev,
            final_svs: [self.svs[0].state, self.svs[1].state],
            outcome,
            merge_step: self.merge_step,
            collision: self.collision,
        };
        let metrics = summarize_episode(&log, &cfg);
        (log, metrics)
    }
}

fn summarize_episode(log: &EpisodeLog, cfg: &ScenarioConfig) -> MetricsSummary {
    let series = log.state_series();
    let (merge_class, _) = classify_merge(&series, &cfg.geometry, cfg.lane_width);
    let lane2 = cfg.lane2_center();
    let mut min_d = [f64::INFINITY; 2];
    let mut in_lane2_seen = false;
    let mut max_abs_accel = 0.0_f64;
    for (ev, svs) in &series {
        max_abs_accel = max_abs_accel.max(ev.a.abs());
        if ev.p_y >= cfg.lane_width {
            in_lane2_seen = true;
            for i in 0..2 {
                min_d[i] =
                    min_d[i].min(footprint_distance(ev, &svs[i], &cfg.geometry, lane2));
            }
        }
    }
    let end_clause = check_collision(
        &log.final_ev,
        &log.final_svs,
        &cfg.geometry,
        cfg.lane_width,
        lane2,
        cfg.p_x_ter,
        true,
    );
    let mission_done = match log.outcome {
        EpisodeOutcome::Merged => true,
        EpisodeOutcome::StoppedInLane1 => {
            log.final_ev.p_x + cfg.geometry.half_length() <= cfg.p_x_ter
        }
        _ => false,
    };
    let success = !log.collision && !end_clause && mission_done;
    MetricsSummary {
        success,
        merge_class,
        min_d_sv0: in_lane2_seen.then_some(min_d[0]),
        min_d_sv1: in_lane2_seen.then_some(min_d[1]),
        max_abs_accel,
    }
}

/// Run one seeded episode to completion.
pub fn run_episode(
    cfg: &ScenarioConfig,
    kind: PlannerKind,
    seed: u64,
) -> Result<(EpisodeLog, MetricsSummary), SimError> {
    Ok(Episode::new(cfg, kind, seed)?.run())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Seed for episode `index` in a batch rooted at `base_seed`.
pub fn episode_seed(base_seed: u64, index: u64) -> u64 {
    splitmix64(base_seed ^ splitmix64(index.wrapping_add(1)))
}

/// Mean/std pair over a sample; the std is the sample standard deviation and
/// zero for fewer than two values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let count = samples.len();
        if count == 0 {
            return Self {
                mean: f64::NAN,
                std: 0.0,
                count,
            };
        }
        let mean = samples.iter().sum::<f64>() / count as f64;
        let std = if count > 1 {
            (samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (count - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        Self { mean, std, count }
    }
}

/// Aggregated batch metrics in the comparison-table layout: success rate,
/// merge-class counts, and mean/std of the three per-episode scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMetrics {
    pub episodes: usize,
    pub success_rate: f64,
    pub merge_ahead: usize,
    pub merge_between: usize,
    pub merge_after: usize,
    pub merge_none: usize,
    pub min_d_sv0: Stats,
    pub min_d_sv1: Stats,
    pub max_abs_accel: Stats,
}

pub fn aggregate(summaries: &[MetricsSummary]) -> BatchMetrics {
    let episodes = summaries.len();
    let successes = summaries.iter().filter(|s| s.success).count();
    let count_class = |c: MergeClass| summaries.iter().filter(|s| s.merge_class == c).count();
    let d0: Vec<f64> = summaries.iter().filter_map(|s| s.min_d_sv0).collect();
    let d1: Vec<f64> = summaries.iter().filter_map(|s| s.min_d_sv1).collect();
    let acc: Vec<f64> = summaries.iter().map(|s| s.max_abs_accel).collect();
    BatchMetrics {
        episodes,
        success_rate: if episodes == 0 {
            0.0
        } else {
            successes as f64 / episodes as f64
        },
        merge_ahead: count_class(MergeClass::Ahead),
        merge_between: count_class(MergeClass::Between),
        merge_after: count_class(MergeClass::After),
        merge_none: count_class(MergeClass::NoMerge),
        min_d_sv0: Stats::from_samples(&d0),
        min_d_sv1: Stats::from_samples(&d1),
        max_abs_accel: Stats::from_samples(&acc),
    }
}

/// Per-episode summaries for a seeded batch, in episode order. Fans out
/// across threads when the `parallel` feature is on.
pub fn run_monte_carlo_collect(
    cfg: &ScenarioConfig,
    kind: PlannerKind,
    episodes: usize,
    base_seed: u64,
) -> Result<Vec<MetricsSummary>, SimError> {
    assert!(episodes >= 1);
    cfg.validate()?;
    #[cfg(feature = "parallel")]
    {
        (0..episodes)
            .into_par_iter()
            .map(|i| run_episode(cfg, kind, episode_seed(base_seed, i as u64)).map(|(_, m)| m))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_monte_carlo_collect_seq(cfg, kind, episodes, base_seed)
    }
}

/// Strictly sequential batch; same seeds, same results as the parallel path.
pub fn run_monte_carlo_collect_seq(
    cfg: &ScenarioConfig,
    kind: PlannerKind,
    episodes: usize,
    base_seed: u64,
) -> Result<Vec<MetricsSummary>, SimError> {
    assert!(episodes >= 1);
    cfg.validate()?;
    (0..episodes)
        .map(|i| run_episode(cfg, kind, episode_seed(base_seed, i as u64)).map(|(_, m)| m))
        .collect()
}

pub fn run_monte_carlo(
    cfg: &ScenarioConfig,
    kind: PlannerKind,
    episodes: usize,
    base_seed: u64,
) -> Result<BatchMetrics, SimError> {
    Ok(aggregate(&run_monte_carlo_collect(
        cfg, kind, episodes, base_seed,
    )?))
}

pub fn run_monte_carlo_seq(
    cfg: &ScenarioConfig,
    kind: PlannerKind,
    episodes: usize,
    base_seed: u64,
) -> Result<BatchMetrics, SimError> {
    Ok(aggregate(&run_monte_carlo_collect_seq(
        cfg, kind, episodes, base_seed,
    )?))
}

/// One row of the information-set convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub info_size: usize,
    pub repeats: usize,
    pub success_rate: f64,
    pub min_d_sv0: Stats,
    pub min_d_sv1: Stats,
    pub max_abs_accel: Stats,
}

/// Sweep the initial information-set size: for each size, run `repeats`
/// proposed-planner episodes whose initial sets are fresh draws from each
/// vehicle's nominal acceleration distribution, and aggregate the metrics.
pub fn convergence_study(
    cfg: &ScenarioConfig,
    sizes: &[usize],
    repeats: usize,
    base_seed: u64,
) -> Result<Vec<ConvergenceRow>, SimError> {
    assert!(!sizes.is_empty(), "need at least one information-set size");
    assert!(repeats >= 1);
    cfg.validate()?;
    let run_one = |size: usize, rep: usize| -> Result<MetricsSummary, SimError> {
        let seed = episode_seed(base_seed ^ splitmix64(size as u64), rep as u64);
        let mut info_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
        let draw = |profile: &BehaviorProfile, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..size).map(|_| profile.nominal.sample(rng)).collect()
        };
        let info = [
            draw(&cfg.sv_profiles[0], &mut info_rng),
            draw(&cfg.sv_profiles[1], &mut info_rng),
        ];
        let (_, metrics) =
            Episode::with_info(cfg, PlannerKind::Proposed, seed, info)?.run();
        Ok(metrics)
    };
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        #[cfg(feature = "parallel")]
        let summaries: Result<Vec<_>, SimError> = (0..repeats)
            .into_par_iter()
            .map(|rep| run_one(size, rep))
            .collect();
        #[cfg(not(feature = "parallel"))]
        let summaries: Result<Vec<_>, SimError> =
            (0..repeats).map(|rep| run_one(size, rep)).collect();
        let summaries = summaries?;
        let batch = aggregate(&summaries);
        rows.push(ConvergenceRow {
            info_size: size,
            repeats,
            success_rate: batch.success_rate,
            min_d_sv0: batch.min_d_sv0,
            min_d_sv1: batch.min_d_sv1,
            max_abs_accel: batch.max_abs_accel,
        });
    }
    Ok(rows)
}

/// Thread cap requested through `MERGE_PLANNER_THREADS`, if any.
pub fn thread_cap_from_env() -> Option<usize> {
    std::env::var("MERGE_PLANNER_THREADS")
        .ok()?
        .parse()
        .ok()
        .filter(|&n| n >= 1)
}
