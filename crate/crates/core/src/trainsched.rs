//! Learning-rate schedules, early stopping, and a generic epoch loop.
//!
//! The loop validates once before the first epoch. That baseline seeds the
//! "best so far" of both the plateau schedule and early stopping, so
//! patience counts epochs that fail to beat the starting model.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SchedError {
    #[error("validation loss is NaN at epoch {epoch}; training diverged")]
    NanLoss { epoch: usize },
    #[error("early stopping already triggered")]
    AlreadyStopped,
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model failed at epoch {epoch}{}: {source}", .iteration.map(|i| format!(", iteration {i}")).unwrap_or_default())]
    Model {
        epoch: usize,
        iteration: Option<u64>,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Schedule(#[from] SchedError),
}

/// Triangular cyclic learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclicLrConfig {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Half-cycle length in iterations.
    pub step_size: u64,
}

impl Default for CyclicLrConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-5,
            max_lr: 1e-4,
            step_size: 500,
        }
    }
}

impl CyclicLrConfig {
    pub fn validate(&self) -> Result<(), SchedError> {
        if !(self.base_lr < self.max_lr) || self.step_size == 0 {
            return Err(SchedError::Invalid(format!("{self:?}")));
        }
        Ok(())
    }
}

pub fn cyclic_lr(cfg: &CyclicLrConfig, t: u64) -> f64 {
    let step = cfg.step_size as f64;
    let t = t as f64;
    let cycle = (1.0 + t / (2.0 * step)).floor();
    let x = (t / step - 2.0 * cycle + 1.0).abs();
    cfg.base_lr + (cfg.max_lr - cfg.base_lr) * (1.0 - x).max(0.0)
}

/// Reduce-on-plateau: multiply by `factor` after `patience` epochs without
/// a strictly lower validation loss, never going below `floor_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub start_lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub floor_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            start_lr: 1e-3,
            factor: 0.1,
            patience: 10,
            floor_lr: 1e-5,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<(), SchedError> {
        if !(self.factor > 0.0 && self.factor < 1.0) || !(self.floor_lr <= self.start_lr) || self.patience == 0 {
            return Err(SchedError::Invalid(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauState {
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
    pub epoch: usize,
}

impl PlateauState {
    pub fn new(cfg: &PlateauConfig) -> Self {
        Self {
            lr: cfg.start_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
            epoch: 0,
        }
    }

    /// State after an initial (epoch 0) validation.
    pub fn with_baseline(cfg: &PlateauConfig, loss: f64) -> Self {
        Self {
            best: loss,
            ..Self::new(cfg)
        }
    }
}

/// Feeds one epoch's validation loss; returns the learning rate for the next
/// epoch. The bad-epoch counter resets after every drop.
pub fn plateau_lr_step(
    cfg: &PlateauConfig,
    state: PlateauState,
    val_loss: f64,
) -> Result<(f64, PlateauState), SchedError> {
    let epoch = state.epoch + 1;
    if val_loss.is_nan() {
        return Err(SchedError::NanLoss { epoch });
    }
    let mut s = PlateauState { epoch, ..state };
    if val_loss < s.best {
        s.best = val_loss;
        s.bad_epochs = 0;
    } else {
        s.bad_epochs += 1;
        if s.bad_epochs >= cfg.patience {
            s.lr = (s.lr * cfg.factor).max(cfg.floor_lr);
            s.bad_epochs = 0;
        }
    }
    Ok((s.lr, s))
}

/// Single drop: `start_lr` through `drop_epoch`, `drop_to` afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLrConfig {
    pub start_lr: f64,
    pub drop_to: f64,
    pub drop_epoch: usize,
}

impl Default for StepLrConfig {
    fn default() -> Self {
        Self {
            start_lr: 1e-3,
            drop_to: 1e-4,
            drop_epoch: 12,
        }
    }
}

impl StepLrConfig {
    /// `epoch` is 1-based.
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch <= self.drop_epoch {
            self.start_lr
        } else {
            self.drop_to
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub patience: usize,
    pub epoch: usize,
    pub stopped: bool,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self {
            best_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
            patience,
            epoch: 0,
            stopped: false,
        }
    }

    pub fn with_baseline(patience: usize, loss: f64) -> Self {
        Self {
            best_loss: loss,
            ..Self::new(patience)
        }
    }
}

/// Stops once the number of epochs since the best exceeds `patience`.
pub fn early_stop_update(state: EarlyStopState, val_loss: f64) -> Result<EarlyStopState, SchedError> {
    if state.stopped {
        return Err(SchedError::AlreadyStopped);
    }
    let epoch = state.epoch + 1;
    if val_loss.is_nan() {
        return Err(SchedError::NanLoss { epoch });
    }
    let mut s = EarlyStopState { epoch, ..state };
    if val_loss < s.best_loss {
        s.best_loss = val_loss;
        s.best_epoch = epoch;
        s.epochs_since_best = 0;
    } else {
        s.epochs_since_best += 1;
        s.stopped = s.epochs_since_best > s.patience;
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Updated every iteration.
    Cyclic(CyclicLrConfig),
    /// Updated every epoch from the validation loss.
    Plateau(PlateauConfig),
    /// Updated every epoch.
    Step(StepLrConfig),
    Constant { lr: f64 },
}

impl LrSchedule {
    fn validate(&self) -> Result<(), SchedError> {
        match self {
            LrSchedule::Cyclic(c) => c.validate(),
            LrSchedule::Plateau(p) => p.validate(),
            LrSchedule::Step(s) if !(s.drop_to < s.start_lr) => {
                Err(SchedError::Invalid(format!("{s:?}")))
            }
            _ => Ok(()),
        }
    }
}

/// Anything the loop can drive.
pub trait Trainable {
    type Batch;
    type Error: std::error::Error + Send + Sync + 'static;

    /// One optimizer step; returns the batch training loss.
    fn train_step(&mut self, batch: &Self::Batch, lr: f64) -> Result<f64, Self::Error>;
    fn validate(&mut self) -> Result<f64, Self::Error>;
    /// Snapshot the current parameters; the returned tag is opaque to the loop.
    fn checkpoint(&mut self, epoch: usize) -> String;
}

/// Supplies the batches of each (1-based) epoch, in order.
pub trait EpochSource<B> {
    fn batches(&mut self, epoch: usize) -> Vec<B>;
}

impl<B, F: FnMut(usize) -> Vec<B>> EpochSource<B> for F {
    fn batches(&mut self, epoch: usize) -> Vec<B> {
        self(epoch)
    }
}

/// What `Trainable::validate` returns, and so which direction counts as
/// improvement for early stopping and the plateau schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// A loss; lower is better.
    #[default]
    Loss,
    /// A score such as validation Jaccard; higher is better.
    Score,
}

impl Monitor {
    /// The value as a quantity to minimize.
    fn key(self, v: f64) -> f64 {
        match self {
            Monitor::Loss => v,
            Monitor::Score => -v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub schedule: LrSchedule,
    /// `None` disables early stopping.
    pub patience: Option<usize>,
    pub max_epochs: usize,
    #[serde(default)]
    pub monitor: Monitor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    /// The monitored validation value, as returned by the model.
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub baseline_val_loss: f64,
    pub epochs: Vec<EpochLog>,
    /// 0 when no epoch beat the baseline.
    pub best_epoch: usize,
    pub best_tag: String,
    pub stopped_early: bool,
    pub iterations: u64,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,lr,train_loss,val_loss,is_best")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{}",
                e.epoch,
                e.lr,
                e.train_loss,
                e.val_loss,
                u8::from(e.epoch == self.best_epoch)
            )?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()
    }
}

pub fn run_training_loop<M, S>(model: &mut M, source: &mut S, cfg: &LoopConfig) -> Result<TrainingLog, TrainError>
where
    M: Trainable,
    S: EpochSource<M::Batch>,
{
    cfg.schedule.validate()?;
    let fail = |epoch: usize, iteration: Option<u64>| {
        move |e: M::Error| TrainError::Model {
            epoch,
            iteration,
            source: Box::new(e),
        }
    };

    let baseline = model.validate().map_err(fail(0, None))?;
    if baseline.is_nan() {
        return Err(SchedError::NanLoss { epoch: 0 }.into());
    }
    let mut best_tag = model.checkpoint(0);
    let mut stop = EarlyStopState::with_baseline(cfg.patience.unwrap_or(usize::MAX), cfg.monitor.key(baseline));
    let mut plateau = match cfg.schedule {
        LrSchedule::Plateau(p) => Some((p, PlateauState::with_baseline(&p, cfg.monitor.key(baseline)))),
        _ => None,
    };

    let mut epochs = Vec::new();
    let mut iteration: u64 = 0;
    for epoch in 1..=cfg.max_epochs {
        let epoch_lr = match cfg.schedule {
            LrSchedule::Cyclic(c) => cyclic_lr(&c, iteration),
            LrSchedule::Plateau(_) => plateau.as_ref().map(|(_, s)| s.lr).unwrap_or_default(),
            LrSchedule::Step(s) => s.lr(epoch),
            LrSchedule::Constant { lr } => lr,
        };

        let batches = source.batches(epoch);
        let mut loss_sum = 0.0;
        for batch in &batches {
            let lr = match cfg.schedule {
                LrSchedule::Cyclic(c) => cyclic_lr(&c, iteration),
                _ => epoch_lr,
            };
            loss_sum += model.train_step(batch, lr).map_err(fail(epoch, Some(iteration)))?;
            iteration += 1;
        }
        let train_loss = if batches.is_empty() {
            f64::NAN
        } else {
            loss_sum / batches.len() as f64
        };

        let val_loss = model.validate().map_err(fail(epoch, None))?;
        stop = early_stop_update(stop, cfg.monitor.key(val_loss))?;
        if stop.best_epoch == epoch {
            best_tag = model.checkpoint(epoch);
        }
        if let Some((p, s)) = plateau.as_mut() {
            *s = plateau_lr_step(p, *s, cfg.monitor.key(val_loss))?.1;
        }
        epochs.push(EpochLog {
            epoch,
            lr: epoch_lr,
            train_loss,
            val_loss,
        });
        if stop.stopped {
            break;
        }
    }

    Ok(TrainingLog {
        baseline_val_loss: baseline,
        epochs,
        best_epoch: stop.best_epoch,
        best_tag,
        stopped_early: stop.stopped,
        iterations: iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cyclic_anchor_values() {
        let cfg = CyclicLrConfig::default();
        assert_eq!(cyclic_lr(&cfg, 0), 1e-5);
        assert_eq!(cyclic_lr(&cfg, 500), 1e-4);
        assert_eq!(cyclic_lr(&cfg, 250), 5.5e-5);
        assert_eq!(cyclic_lr(&cfg, 1000), 1e-5);
    }

    #[test]
    fn cyclic_is_periodic_and_bounded() {
        let cfg = CyclicLrConfig {
            base_lr: 0.01,
            max_lr: 0.2,
            step_size: 7,
        };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in 0..200 {
            let lr = cyclic_lr(&cfg, t);
            assert!((lr - cyclic_lr(&cfg, t + 14)).abs() < 1e-15);
            lo = lo.min(lr);
            hi = hi.max(lr);
        }
        assert_eq!((lo, hi), (0.01, 0.2));
    }

    #[test]
    fn plateau_holds_on_improvement() {
        let cfg = PlateauConfig::default();
        let mut s = PlateauState::new(&cfg);
        for k in 0..40 {
            let (lr, next) = plateau_lr_step(&cfg, s, 10.0 - k as f64 * 0.1).unwrap();
            assert_eq!(lr, 1e-3);
            s = next;
        }
    }

    #[test]
    fn plateau_drops_on_tenth_flat_epoch() {
        let cfg = PlateauConfig::default();
        let mut s = PlateauState::with_baseline(&cfg, 1.0);
        let mut lrs = Vec::new();
        for _ in 0..30 {
            let (lr, next) = plateau_lr_step(&cfg, s, 1.0).unwrap();
            lrs.push(lr);
            s = next;
        }
        assert!(lrs[..9].iter().all(|&lr| lr == 1e-3));
        assert!(lrs[9..19].iter().all(|&lr| lr == 1e-4));
        assert!(lrs[19..].iter().all(|&lr| lr == 1e-5));
    }

    #[test]
    fn plateau_rejects_nan() {
        let cfg = PlateauConfig::default();
        assert_eq!(
            plateau_lr_step(&cfg, PlateauState::new(&cfg), f64::NAN),
            Err(SchedError::NanLoss { epoch: 1 })
        );
    }

    #[test]
    fn step_schedule_drops_after_epoch_12() {
        let s = StepLrConfig::default();
        assert_eq!(s.lr(12), 1e-3);
        assert_eq!(s.lr(13), 1e-4);
    }

    #[test]
    fn early_stop_cases() {
        let mut s = EarlyStopState::new(5);
        for k in 0..100 {
            s = early_stop_update(s, -(k as f64)).unwrap();
            assert!(!s.stopped);
        }

        // constant loss: epoch 1 sets the best, stop when 21 epochs follow it
        let mut s = EarlyStopState::new(20);
        while !s.stopped {
            s = early_stop_update(s, 3.0).unwrap();
        }
        assert_eq!((s.best_epoch, s.epoch, s.epochs_since_best), (1, 22, 21));

        // dip at epoch 5, then flat, patience 3
        let losses = [5.0, 4.0, 4.0, 4.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let mut s = EarlyStopState::new(3);
        for &l in &losses {
            s = early_stop_update(s, l).unwrap();
            if s.stopped {
                break;
            }
        }
        assert_eq!((s.epoch, s.best_epoch), (9, 5));
        assert_eq!(early_stop_update(s, 0.0), Err(SchedError::AlreadyStopped));
        assert_eq!(
            early_stop_update(EarlyStopState::new(1), f64::NAN),
            Err(SchedError::NanLoss { epoch: 1 })
        );
    }

    #[derive(Debug, thiserror::Error)]
    #[error("boom")]
    struct Boom;

    /// Records every call the loop makes.
    struct Scripted {
        val: Vec<f64>,
        calls: usize,
        lrs: Vec<f64>,
        fail_at: Option<usize>,
    }

    impl Trainable for Scripted {
        type Batch = ();
        type Error = Boom;

        fn train_step(&mut self, _: &(), lr: f64) -> Result<f64, Boom> {
            if Some(self.lrs.len()) == self.fail_at {
                return Err(Boom);
            }
            self.lrs.push(lr);
            Ok(1.0)
        }

        fn validate(&mut self) -> Result<f64, Boom> {
            let v = self.val[self.calls.min(self.val.len() - 1)];
            self.calls += 1;
            Ok(v)
        }

        fn checkpoint(&mut self, epoch: usize) -> String {
            format!("ckpt-{epoch}")
        }
    }

    fn scripted(val: Vec<f64>) -> Scripted {
        Scripted {
            val,
            calls: 0,
            lrs: Vec::new(),
            fail_at: None,
        }
    }

    #[test]
    fn loop_with_always_improving_model() {
        let mut m = scripted(vec![4.0, 3.0, 2.0, 1.0]);
        let cfg = LoopConfig {
            schedule: LrSchedule::Constant { lr: 0.1 },
            patience: Some(2),
            max_epochs: 3,
            monitor: Monitor::Loss,
        };
        let log = run_training_loop(&mut m, &mut |_| vec![(); 2], &cfg).unwrap();
        assert_eq!(log.epochs.len(), 3);
        assert_eq!(log.best_epoch, 3);
        assert_eq!(log.best_tag, "ckpt-3");
        assert!(!log.stopped_early);
    }

    #[test]
    fn score_monitor_treats_higher_as_better() {
        let trace = vec![0.1, 0.2, 0.5, 0.5];
        let cfg = |monitor| LoopConfig {
            schedule: LrSchedule::Constant { lr: 0.1 },
            patience: Some(2),
            max_epochs: 50,
            monitor,
        };
        let score = run_training_loop(&mut scripted(trace.clone()), &mut |_| vec![()], &cfg(Monitor::Score)).unwrap();
        assert_eq!((score.best_epoch, score.epochs.len()), (2, 5));
        let loss = run_training_loop(&mut scripted(trace), &mut |_| vec![()], &cfg(Monitor::Loss)).unwrap();
        assert_eq!((loss.best_epoch, loss.epochs.len()), (0, 3));
    }

    #[test]
    fn loop_stops_constant_model() {
        let mut m = scripted(vec![1.0]);
        let cfg = LoopConfig {
            schedule: LrSchedule::Constant { lr: 0.1 },
            patience: Some(2),
            max_epochs: 50,
            monitor: Monitor::Loss,
        };
        let log = run_training_loop(&mut m, &mut |_| vec![(); 4], &cfg).unwrap();
        assert_eq!(log.epochs.len(), 3);
        assert!(log.stopped_early);
        assert_eq!(log.best_epoch, 0);
        assert_eq!(log.best_tag, "ckpt-0");
        // no training after the stop
        assert_eq!(m.lrs.len(), 12);
    }

    #[test]
    fn cyclic_schedule_is_per_iteration() {
        let mut m = scripted(vec![1.0]);
        let c = CyclicLrConfig {
            base_lr: 0.0,
            max_lr: 1.0,
            step_size: 4,
        };
        let cfg = LoopConfig {
            schedule: LrSchedule::Cyclic(c),
            patience: None,
            max_epochs: 3,
            monitor: Monitor::Loss,
        };
        let log = run_training_loop(&mut m, &mut |_| vec![(); 5], &cfg).unwrap();
        let expected: Vec<f64> = (0..15).map(|t| cyclic_lr(&c, t)).collect();
        assert_eq!(m.lrs, expected);
        assert_eq!(log.iterations, 15);
        assert_eq!(log.epochs[1].lr, cyclic_lr(&c, 5));
    }

    #[test]
    fn plateau_schedule_is_per_epoch() {
        let mut m = scripted(vec![1.0]);
        let cfg = LoopConfig {
            schedule: LrSchedule::Plateau(PlateauConfig {
                patience: 2,
                ..PlateauConfig::default()
            }),
            patience: None,
            max_epochs: 6,
            monitor: Monitor::Loss,
        };
        let log = run_training_loop(&mut m, &mut |_| vec![(); 1], &cfg).unwrap();
        let lrs: Vec<f64> = log.epochs.iter().map(|e| e.lr).collect();
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5]);
        assert_eq!(m.lrs, lrs);
    }

    #[test]
    fn model_failure_carries_context() {
        let mut m = scripted(vec![1.0]);
        m.fail_at = Some(5);
        let cfg = LoopConfig {
            schedule: LrSchedule::Constant { lr: 0.1 },
            patience: None,
            max_epochs: 5,
            monitor: Monitor::Loss,
        };
        let err = run_training_loop(&mut m, &mut |_| vec![(); 3], &cfg).unwrap_err();
        match err {
            TrainError::Model { epoch, iteration, .. } => assert_eq!((epoch, iteration), (2, Some(5))),
            other => panic!("unexpected {other:?}"),
        }
    }

    /// `loss = (θ − 3)²`, plain gradient steps.
    struct Bowl {
        theta: f64,
    }

    impl Trainable for Bowl {
        type Batch = ();
        type Error = Boom;

        fn train_step(&mut self, _: &(), lr: f64) -> Result<f64, Boom> {
            self.theta -= lr * 2.0 * (self.theta - 3.0);
            Ok((self.theta - 3.0).powi(2))
        }

        fn validate(&mut self) -> Result<f64, Boom> {
            Ok((self.theta - 3.0).powi(2))
        }

        fn checkpoint(&mut self, epoch: usize) -> String {
            format!("{epoch}:{}", self.theta)
        }
    }

    #[test]
    fn quadratic_bowl_converges_under_plateau() {
        let mut m = Bowl { theta: 0.0 };
        let cfg = LoopConfig {
            schedule: LrSchedule::Plateau(PlateauConfig::default()),
            patience: Some(22),
            max_epochs: 100,
            monitor: Monitor::Loss,
        };
        let log = run_training_loop(&mut m, &mut |_| vec![(); 100], &cfg).unwrap();
        // contraction factor (1 − 2·lr)^10_000 with lr = 1e-3
        assert!(log.epochs.last().unwrap().val_loss < 1e-6);
    }

    #[test]
    fn csv_log_format() {
        let log = TrainingLog {
            baseline_val_loss: 2.0,
            epochs: vec![
                EpochLog { epoch: 1, lr: 0.1, train_loss: 1.5, val_loss: 1.0 },
                EpochLog { epoch: 2, lr: 0.1, train_loss: 1.0, val_loss: 1.2 },
            ],
            best_epoch: 1,
            best_tag: "x".into(),
            stopped_early: false,
            iterations: 4,
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,lr,train_loss,val_loss,is_best\n1,0.1,1.5,1,1\n2,0.1,1,1.2,0\n"
        );
    }
}
