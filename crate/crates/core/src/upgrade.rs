//! Live replacement of a mounted file-system instance.
//!
//! The swap happens under the connection's exclusive gate: new dispatches
//! wait, in-flight ones drain, the old instance hands its state to the new
//! one, and the gate opens again on the new instance. If the new instance
//! refuses the state, the old one takes it back and keeps serving.

use std::fmt;
use std::thread;
use std::time::{Duration, Instant};

use crate::fsapi::{FileSystem, RefusalKind, RequestContext, UpgradeTicket};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpgradeReport {
    /// Time spent waiting for the exclusive gate.
    pub wait: Duration,
    /// Time the exclusive gate was held.
    pub pause: Duration,
    /// Dispatches that had to wait for the gate during the upgrade.
    pub ops_blocked: u64,
    pub old_generation: u64,
    pub new_generation: u64,
    pub in_flight_at_acquire: usize,
    /// False when the old instance had no state to hand over and the new
    /// one performed a full mount.
    pub state_transferred: bool,
    pub gate_acquired: Instant,
    pub gate_released: Instant,
}

impl fmt::Display for UpgradeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "generation {} -> {}, pause {:.3} ms, wait {:.3} ms, ops blocked {}, {}",
            self.old_generation,
            self.new_generation,
            self.pause.as_secs_f64() * 1e3,
            self.wait.as_secs_f64() * 1e3,
            self.ops_blocked,
            if self.state_transferred { "state transferred" } else { "full mount" }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FailureKind {
    Refused(RefusalKind),
    /// The connection was upgraded by someone else after the ticket was issued.
    StaleTicket { expected: u64, found: u64 },
    /// The connection has been unregistered.
    Shutdown,
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureKind::Refused(k) => write!(f, "{k}"),
            FailureKind::StaleTicket { expected, found } => {
                write!(f, "ticket for generation {expected}, connection is at {found}")
            }
            FailureKind::Shutdown => write!(f, "connection shut down"),
        }
    }
}

/// A failed upgrade. The old instance is still serving unless
/// `rolled_back` is false.
pub struct UpgradeFailure {
    pub kind: FailureKind,
    pub rolled_back: bool,
    pub report: UpgradeReport,
    /// The rejected replacement.
    pub instance: Box<dyn FileSystem>,
}

impl fmt::Debug for UpgradeFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UpgradeFailure")
            .field("kind", &self.kind)
            .field("rolled_back", &self.rolled_back)
            .field("report", &self.report)
            .finish()
    }
}

impl fmt::Display for UpgradeFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "upgrade failed: {}", self.kind)?;
        if !self.rolled_back {
            write!(f, " (old instance could not be restored)")?;
        }
        Ok(())
    }
}

impl std::error::Error for UpgradeFailure {}

/// Swaps the ticket's instance in for the active one.
pub fn upgrade(ticket: UpgradeTicket) -> Result<UpgradeReport, UpgradeFailure> {
    let UpgradeTicket {
        conn,
        instance: mut new,
        target_generation,
    } = ticket;
    let ctx = RequestContext::default();
    let blocked_before = conn.ops_blocked();
    let requested = Instant::now();
    let mut gate = conn.lock_exclusive();
    let acquired = gate.acquired_at;
    let in_flight_at_acquire = gate.in_flight_at_acquire;
    let old_generation = conn.generation();

    let finish = |gate_released: Instant, new_generation: u64, state_transferred: bool| UpgradeReport {
        wait: acquired - requested,
        pause: gate_released - acquired,
        ops_blocked: 0,
        old_generation,
        new_generation,
        in_flight_at_acquire,
        state_transferred,
        gate_acquired: acquired,
        gate_released,
    };

    let fail = |gate_released: Instant, kind: FailureKind, rolled_back: bool, instance: Box<dyn FileSystem>| {
        let mut report = finish(gate_released, old_generation, false);
        report.ops_blocked = conn.ops_blocked() - blocked_before;
        UpgradeFailure {
            kind,
            rolled_back,
            report,
            instance,
        }
    };

    if old_generation + 1 != target_generation {
        drop(gate);
        return Err(fail(
            Instant::now(),
            FailureKind::StaleTicket {
                expected: target_generation - 1,
                found: old_generation,
            },
            true,
            new,
        ));
    }
    let Some(mut old) = gate.guard.take() else {
        drop(gate);
        return Err(fail(Instant::now(), FailureKind::Shutdown, false, new));
    };

    let capsule = old.update_prepare();
    let transferred = capsule.is_some();
    if !transferred {
        old.destroy(&ctx);
    }
    match new.update_transfer(&ctx, capsule) {
        Ok(()) => {
            *gate.guard = Some(new);
            let new_generation = conn.bump_generation();
            drop(gate);
            let released = Instant::now();
            let mut report = finish(released, new_generation, transferred);
            report.ops_blocked = conn.ops_blocked() - blocked_before;
            // Dropping the old instance may do I/O; keep it off the caller's path.
            thread::spawn(move || drop(old));
            log::info!("upgraded {}: {report}", conn.name());
            Ok(report)
        }
        Err(refusal) => {
            let rolled_back = match old.update_transfer(&ctx, refusal.capsule) {
                Ok(()) => true,
                Err(e) => {
                    log::error!("old instance could not take its state back: {e}");
                    false
                }
            };
            if rolled_back {
                *gate.guard = Some(old);
            }
            drop(gate);
            let f = fail(Instant::now(), FailureKind::Refused(refusal.kind), rolled_back, new);
            log::warn!("{f}");
            Err(f)
        }
    }
}
