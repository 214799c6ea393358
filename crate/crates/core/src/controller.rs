//! Navigational control: command derivation from route points, aim-point
//! geometry, the two PID loops, and the learned/PID control fusion.
//!
//! Sign conventions (shared with `geonav`): the local frame has +y forward;
//! steering is negative toward the local +x side, so a lateral error of
//! `theta − 90°` (aim point off to +x gives theta < 90°) feeds the lateral
//! PID directly and the closed loop converges. The fusion rule is a literal
//! transcription of the deadband branch structure; see `fuse_controls`.

use serde::{Deserialize, Serialize};

use crate::geonav::LocalPoint;

/// Steering/throttle deadband: magnitudes below this count as inactive.
pub const CONTROL_DEADBAND: f64 = 0.1;

/// High-level navigation command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Command {
    Straight = 0,
    Left = 1,
    Right = 2,
}

impl Command {
    pub fn from_u8(v: u8) -> Option<Command> {
        match v {
            0 => Some(Command::Straight),
            1 => Some(Command::Left),
            2 => Some(Command::Right),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Threshold rule over the next two route points, right branch first:
/// rp1.x ≤ −4 or rp2.x ≤ −8 turns right; the mirrored +4/+8 test turns
/// left; anything else goes straight.
pub fn derive_command(rp1: LocalPoint, rp2: LocalPoint) -> Command {
    if rp1.x <= -4.0 || rp2.x <= -8.0 {
        Command::Right
    } else if rp1.x >= 4.0 || rp2.x >= 8.0 {
        Command::Left
    } else {
        Command::Straight
    }
}

/// Aim-point geometry for the PID pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AimGeometry {
    /// Bearing of the waypoint midpoint, degrees; 90 means dead ahead.
    pub theta_deg: f64,
    /// Target speed: 1.75 × waypoint separation, m/s.
    pub gamma: f64,
    /// True when the midpoint coincides with the vehicle and theta is
    /// defined as 90° by convention.
    pub degenerate: bool,
}

/// Midpoint bearing and speed target from two predicted waypoints.
pub fn aim_geometry(wp1: LocalPoint, wp2: LocalPoint) -> AimGeometry {
    let mid_x = (wp1.x + wp2.x) / 2.0;
    let mid_y = (wp1.y + wp2.y) / 2.0;
    let degenerate = mid_x == 0.0 && mid_y == 0.0;
    let theta_deg = if degenerate {
        90.0
    } else {
        mid_y.atan2(mid_x).to_degrees()
    };
    let gamma = 1.75 * (wp1.x - wp2.x).hypot(wp1.y - wp2.y);
    AimGeometry { theta_deg, gamma, degenerate }
}

/// Vehicle speed from rear wheel speeds: mean angular rate times radius.
pub fn linear_speed(omega_l: f64, omega_r: f64, wheel_radius: f64) -> f64 {
    (omega_l + omega_r) / 2.0 * wheel_radius
}

/// One PID loop with anti-windup and output clamping.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PidState {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub output_range: (f64, f64),
    integral: f64,
    prev_error: Option<f64>,
}

impl PidState {
    pub fn new(kp: f64, ki: f64, kd: f64, output_range: (f64, f64)) -> Self {
        assert!(output_range.0 < output_range.1, "empty output range");
        PidState { kp, ki, kd, output_range, integral: 0.0, prev_error: None }
    }

    /// Lateral controller on the theta − 90° error, degrees in, steering out.
    pub fn lateral_default() -> Self {
        PidState::new(0.02, 0.001, 0.005, (-1.0, 1.0))
    }

    /// Longitudinal controller on the gamma − nu error, m/s in, throttle out.
    pub fn longitudinal_default() -> Self {
        PidState::new(0.8, 0.1, 0.0, (0.0, 1.0))
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.prev_error = None;
    }
}

/// Advances the PID one sample; returns the clamped output and next state.
///
/// The integral is clamped to output_range / ki so a long saturation phase
/// cannot wind it past what the output could ever use.
pub fn pid_step(state: PidState, error: f64, dt: f64) -> (f64, PidState) {
    assert!(dt > 0.0, "pid_step needs dt > 0");
    let mut s = state;
    s.integral += error * dt;
    if s.ki > 0.0 {
        s.integral = s.integral.clamp(s.output_range.0 / s.ki, s.output_range.1 / s.ki);
    }
    let derivative = match s.prev_error {
        Some(prev) => (error - prev) / dt,
        None => 0.0,
    };
    s.prev_error = Some(error);
    let raw = s.kp * error + s.ki * s.integral + s.kd * derivative;
    (raw.clamp(s.output_range.0, s.output_range.1), s)
}

/// Blend weights between the learned controls and the PID controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlWeights {
    /// [steering, throttle] weight on the learned source.
    pub learned: [f64; 2],
    /// [steering, throttle] weight on the PID source; rows sum to 1.
    pub pid: [f64; 2],
}

/// Weights from the three task-loss weights (waypoint, steering, throttle):
/// each control channel trusts the learned source in proportion to its task
/// weight relative to the waypoint task's.
pub fn init_control_weights(alpha: [f64; 3]) -> ControlWeights {
    assert!(alpha.iter().all(|&a| a > 0.0), "loss weights must be positive");
    let b00 = alpha[1] / (alpha[1] + alpha[0]);
    let b01 = alpha[2] / (alpha[2] + alpha[0]);
    ControlWeights { learned: [b00, b01], pid: [1.0 - b00, 1.0 - b01] }
}

/// Final steering/throttle pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub steering: f64,
    pub throttle: f64,
}

/// Deadband-gated fusion of the learned and PID control pairs.
///
/// Branch structure, transcribed with the dangling else bound to the inner
/// conditional (both-active and both-inactive steering cases blend):
///
/// ```text
/// if mlp_th >= 0.1 and pid_th >= 0.1:
///     if |mlp_st| >= 0.1 and |pid_st| < 0.1:   steering = mlp_st
///     elif |pid_st| >= 0.1 and |mlp_st| < 0.1: steering = pid_st
///     else:                                    steering = b00*mlp_st + b10*pid_st
///     throttle = b01*mlp_th + b11*pid_th
/// elif mlp_th >= 0.1: (steering, throttle) = mlp pair
/// elif pid_th >= 0.1: (steering, throttle) = pid pair
/// else:               (steering, throttle) = (0, 0)
/// ```
pub fn fuse_controls(
    mlp_st: f64,
    mlp_th: f64,
    pid_st: f64,
    pid_th: f64,
    w: &ControlWeights,
) -> ControlCommand {
    let mlp_active = mlp_th >= CONTROL_DEADBAND;
    let pid_active = pid_th >= CONTROL_DEADBAND;
    let (steering, throttle) = if mlp_active && pid_active {
        let mlp_steers = mlp_st.abs() >= CONTROL_DEADBAND;
        let pid_steers = pid_st.abs() >= CONTROL_DEADBAND;
        let st = if mlp_steers && !pid_steers {
            mlp_st
        } else if pid_steers && !mlp_steers {
            pid_st
        } else {
            w.learned[0] * mlp_st + w.pid[0] * pid_st
        };
        (st, w.learned[1] * mlp_th + w.pid[1] * pid_th)
    } else if mlp_active {
        (mlp_st, mlp_th)
    } else if pid_active {
        (pid_st, pid_th)
    } else {
        (0.0, 0.0)
    };
    ControlCommand {
        steering: steering.clamp(-1.0, 1.0),
        throttle: throttle.clamp(0.0, 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lp(x: f64, y: f64) -> LocalPoint {
        LocalPoint::new(x, y)
    }

    #[test]
    fn command_thresholds() {
        assert_eq!(derive_command(lp(-5.0, 10.0), lp(0.0, 20.0)), Command::Right);
        assert_eq!(derive_command(lp(5.0, 10.0), lp(0.0, 20.0)), Command::Left);
        assert_eq!(derive_command(lp(0.0, 10.0), lp(0.0, 20.0)), Command::Straight);
        // boundaries are inclusive
        assert_eq!(derive_command(lp(-4.0, 0.0), lp(0.0, 0.0)), Command::Right);
        assert_eq!(derive_command(lp(4.0, 0.0), lp(0.0, 0.0)), Command::Left);
        assert_eq!(derive_command(lp(0.0, 0.0), lp(-8.0, 0.0)), Command::Right);
        assert_eq!(derive_command(lp(0.0, 0.0), lp(8.0, 0.0)), Command::Left);
        // right is checked first when both sides trigger
        assert_eq!(derive_command(lp(-4.0, 0.0), lp(8.0, 0.0)), Command::Right);
        assert_eq!(derive_command(lp(5.0, 0.0), lp(-8.0, 0.0)), Command::Right);
    }

    #[test]
    fn aim_geometry_hand_examples() {
        let g = aim_geometry(lp(0.0, 1.0), lp(0.0, 3.0));
        assert_eq!(g.theta_deg, 90.0);
        assert_relative_eq!(g.gamma, 3.5, max_relative = 1e-12);
        assert!(!g.degenerate);

        let g = aim_geometry(lp(1.0, 1.0), lp(1.0, 3.0));
        assert_relative_eq!(g.theta_deg, 63.43494882292201, max_relative = 1e-12);
        assert_relative_eq!(g.theta_deg - 90.0, -26.565, epsilon = 1e-3);
    }

    #[test]
    fn coincident_waypoints_mean_stop_intent() {
        let g = aim_geometry(lp(0.0, 1.0), lp(0.0, 1.0));
        assert_eq!(g.gamma, 0.0);
        assert_eq!(g.theta_deg, 90.0);
        assert!(!g.degenerate);
    }

    #[test]
    fn zero_midpoint_is_flagged_degenerate() {
        let g = aim_geometry(lp(1.0, 1.0), lp(-1.0, -1.0));
        assert!(g.degenerate);
        assert_eq!(g.theta_deg, 90.0);
    }

    #[test]
    fn linear_speed_examples() {
        assert_eq!(linear_speed(0.0, 0.0, 0.15), 0.0);
        assert_relative_eq!(linear_speed(8.3333, 8.3333, 0.15), 1.25, epsilon = 1e-4);
        assert_relative_eq!(linear_speed(2.0, 4.0, 0.15), 0.45, max_relative = 1e-12);
    }

    #[test]
    fn zero_gain_pid_is_silent() {
        let mut s = PidState::new(0.0, 0.0, 0.0, (-1.0, 1.0));
        for e in [3.0, -5.0, 100.0, 0.0] {
            let (out, next) = pid_step(s, e, 0.25);
            assert_eq!(out, 0.0);
            s = next;
        }
    }

    #[test]
    fn pure_p_is_a_clamped_gain() {
        let s = PidState::new(0.5, 0.0, 0.0, (-1.0, 1.0));
        assert_eq!(pid_step(s, 1.0, 0.25).0, 0.5);
        assert_eq!(pid_step(s, 10.0, 0.25).0, 1.0);
        assert_eq!(pid_step(s, -10.0, 0.25).0, -1.0);
    }

    #[test]
    fn pi_step_response_matches_recurrence() {
        let (kp, ki, dt, e) = (0.3, 0.2, 0.25, 0.8);
        let mut s = PidState::new(kp, ki, 0.0, (-10.0, 10.0));
        for n in 1..=40 {
            let (out, next) = pid_step(s, e, dt);
            let want = kp * e + ki * (n as f64) * e * dt;
            assert_relative_eq!(out, want.clamp(-10.0, 10.0), max_relative = 1e-12);
            s = next;
        }
    }

    #[test]
    fn integral_windup_is_capped() {
        let mut s = PidState::new(0.0, 0.1, 0.0, (0.0, 1.0));
        for _ in 0..10_000 {
            let (out, next) = pid_step(s, 100.0, 0.25);
            assert!(out <= 1.0);
            s = next;
        }
        // error flips sign: recovery must not take thousands of steps
        let mut recovered = None;
        for n in 0..200 {
            let (out, next) = pid_step(s, -100.0, 0.25);
            s = next;
            if out <= 0.0 {
                recovered = Some(n);
                break;
            }
        }
        assert!(recovered.is_some(), "integral failed to unwind within 200 steps");
    }

    #[test]
    fn derivative_kicks_on_error_change() {
        let s = PidState::new(0.0, 0.0, 0.5, (-10.0, 10.0));
        let (out0, s) = pid_step(s, 2.0, 0.25);
        assert_eq!(out0, 0.0); // no previous error yet
        let (out1, _) = pid_step(s, 3.0, 0.25);
        assert_relative_eq!(out1, 0.5 * (3.0 - 2.0) / 0.25, max_relative = 1e-12);
    }

    #[test]
    fn weight_rows_always_sum_to_one() {
        let w = init_control_weights([1.0, 1.0, 1.0]);
        assert_eq!(w.learned, [0.5, 0.5]);
        assert_eq!(w.pid, [0.5, 0.5]);

        let w = init_control_weights([1.0, 3.0, 1.0]);
        assert_relative_eq!(w.learned[0], 0.75, max_relative = 1e-15);
        assert_relative_eq!(w.pid[0], 0.25, max_relative = 1e-15);

        for a in [[0.3, 2.7, 1.1], [5.0, 0.1, 0.1], [2.0, 2.0, 9.0]] {
            let w = init_control_weights(a);
            assert!((w.learned[0] + w.pid[0] - 1.0).abs() < 1e-12);
            assert!((w.learned[1] + w.pid[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "positive")]
    fn nonpositive_loss_weights_are_rejected() {
        init_control_weights([1.0, 0.0, 1.0]);
    }

    #[test]
    fn fusion_hand_examples() {
        let w = init_control_weights([1.0, 1.0, 1.0]);
        let c = fuse_controls(0.5, 0.5, 0.5, 0.5, &w);
        assert_eq!((c.steering, c.throttle), (0.5, 0.5));

        let c = fuse_controls(0.9, 0.05, -0.9, 0.05, &w);
        assert_eq!((c.steering, c.throttle), (0.0, 0.0));

        // exclusive steering deadband: only the learned source is active
        let c = fuse_controls(0.3, 0.5, 0.05, 0.5, &w);
        assert_eq!((c.steering, c.throttle), (0.3, 0.5));

        // both steer: blend
        let c = fuse_controls(0.3, 0.5, 0.4, 0.5, &w);
        assert_relative_eq!(c.steering, 0.35, max_relative = 1e-12);
        assert_eq!(c.throttle, 0.5);
    }

    /// Exhaustive 4-region truth table over rp1.x, rp2.x in {−9,−5,0,5,9},
    /// worked by hand from the threshold rule (right branch first).
    #[test]
    fn command_grid_matches_hand_truth_table() {
        let xs = [-9.0, -5.0, 0.0, 5.0, 9.0];
        use Command::{Left as L, Right as R, Straight as S};
        #[rustfmt::skip]
        let want = [
            // rp2.x: -9  -5   0   5   9     rp1.x:
                      R,  R,  R,  R,  R,  // -9
                      R,  R,  R,  R,  R,  // -5
                      R,  S,  S,  S,  L,  //  0
                      R,  L,  L,  L,  L,  //  5
                      R,  L,  L,  L,  L,  //  9
        ];
        for (i, &x1) in xs.iter().enumerate() {
            for (j, &x2) in xs.iter().enumerate() {
                let got = derive_command(lp(x1, 10.0), lp(x2, 20.0));
                assert_eq!(got, want[i * 5 + j], "rp1.x={x1} rp2.x={x2}");
            }
        }
    }

    /// Literal restatement of the fusion branch structure, kept separate from
    /// the production code so a transcription slip in either copy shows up.
    fn fusion_reference(
        mlp_st: f64,
        mlp_th: f64,
        pid_st: f64,
        pid_th: f64,
        w: &ControlWeights,
    ) -> (f64, f64) {
        let (st, th);
        if mlp_th >= 0.1 && pid_th >= 0.1 {
            if mlp_st.abs() >= 0.1 && pid_st.abs() < 0.1 {
                st = mlp_st;
            } else if pid_st.abs() >= 0.1 && mlp_st.abs() < 0.1 {
                st = pid_st;
            } else {
                st = w.learned[0] * mlp_st + w.pid[0] * pid_st;
            }
            th = w.learned[1] * mlp_th + w.pid[1] * pid_th;
        } else if mlp_th >= 0.1 {
            st = mlp_st;
            th = mlp_th;
        } else if pid_th >= 0.1 {
            st = pid_st;
            th = pid_th;
        } else {
            st = 0.0;
            th = 0.0;
        }
        (st.clamp(-1.0, 1.0), th.clamp(0.0, 1.0))
    }

    /// All 16 activity combinations of (|mlp_st|, |pid_st|, mlp_th, pid_th)
    /// relative to the 0.1 deadband, at off-threshold magnitudes.
    #[test]
    fn fusion_matches_reference_on_all_sixteen_activity_cases() {
        let w = init_control_weights([1.0, 3.0, 1.0]);
        let st_vals = [0.04, 0.6]; // inactive, active steering magnitude
        let th_vals = [0.03, 0.7]; // inactive, active throttle
        for &ms in &st_vals {
            for &ps in &st_vals {
                for &mt in &th_vals {
                    for &pt in &th_vals {
                        // opposite steering signs make blending visible
                        let (ms, ps) = (ms, -ps);
                        let got = fuse_controls(ms, mt, ps, pt, &w);
                        let want = fusion_reference(ms, mt, ps, pt, &w);
                        assert_eq!(
                            (got.steering, got.throttle),
                            want,
                            "mlp=({ms},{mt}) pid=({ps},{pt})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn single_active_throttle_passes_its_pair_through() {
        let w = init_control_weights([1.0, 3.0, 1.0]);
        let c = fuse_controls(0.7, 0.6, -0.9, 0.02, &w);
        assert_eq!((c.steering, c.throttle), (0.7, 0.6));
        let c = fuse_controls(0.7, 0.02, -0.9, 0.6, &w);
        assert_eq!((c.steering, c.throttle), (-0.9, 0.6));
    }

    #[test]
    fn fusion_output_always_in_range() {
        let w = init_control_weights([0.5, 2.5, 0.3]);
        for st in [-3.0, -1.0, -0.05, 0.0, 0.5, 2.0] {
            for th in [-1.0, 0.0, 0.05, 0.5, 1.0, 3.0] {
                let c = fuse_controls(st, th, -st, 1.0 - th, &w);
                assert!((-1.0..=1.0).contains(&c.steering), "{c:?}");
                assert!((0.0..=1.0).contains(&c.throttle), "{c:?}");
            }
        }
    }
}
