/// Gains and anti-windup bound for a PID loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Absolute bound on the integral accumulator.
    pub integral_limit: f64,
}

impl PidGains {
    /// Cross-track gains: critically damped (natural frequency 3 rad/s) with a
    /// small integral term.
    pub const LATERAL: PidGains = PidGains { kp: 9.0, ki: 0.2, kd: 6.0, integral_limit: 0.5 };
    pub const SPEED: PidGains = PidGains { kp: 2.0, ki: 0.2, kd: 0.0, integral_limit: 2.0 };

    pub const fn proportional(kp: f64) -> Self {
        PidGains { kp, ki: 0.0, kd: 0.0, integral_limit: f64::INFINITY }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PidState {
    pub gains: PidGains,
    pub integral: f64,
    /// `None` until the first step, so the derivative term does not kick.
    pub previous_error: Option<f64>,
}

impl PidState {
    pub fn new(gains: PidGains) -> Self {
        PidState { gains, integral: 0.0, previous_error: None }
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.previous_error = None;
    }

    /// Advances the controller by `dt` and returns the command.
    pub fn step(&mut self, error: f64, dt: f64) -> f64 {
        debug_assert!(dt > 0.0);
        let g = self.gains;
        self.integral = (self.integral + error * dt).clamp(-g.integral_limit, g.integral_limit);
        let derivative = match self.previous_error {
            Some(prev) => (error - prev) / dt,
            None => 0.0,
        };
        self.previous_error = Some(error);
        g.kp * error + g.ki * self.integral + g.kd * derivative
    }
}

/// Functional form of [`PidState::step`].
pub fn pid_step(state: &PidState, error: f64, dt: f64) -> (f64, PidState) {
    let mut next = state.clone();
    let command = next.step(error, dt);
    (command, next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_error_zero_command() {
        let (cmd, _) = pid_step(&PidState::new(PidGains::LATERAL), 0.0, 0.05);
        assert_eq!(cmd, 0.0);
    }

    #[test]
    fn proportional_identity() {
        let (cmd, _) = pid_step(&PidState::new(PidGains::proportional(1.0)), 0.5, 0.05);
        assert_eq!(cmd, 0.5);
    }

    #[test]
    fn integral_is_clamped() {
        let mut s = PidState::new(PidGains { kp: 0.0, ki: 1.0, kd: 0.0, integral_limit: 0.3 });
        for _ in 0..100 {
            s.step(1.0, 0.1);
        }
        assert_eq!(s.integral, 0.3);
        assert_eq!(s.step(1.0, 0.1), 0.3);
        s.reset();
        assert_eq!(s.integral, 0.0);
        assert!(s.previous_error.is_none());
    }

    #[test]
    fn derivative_uses_previous_error() {
        let mut s = PidState::new(PidGains { kp: 0.0, ki: 0.0, kd: 2.0, integral_limit: 1.0 });
        assert_eq!(s.step(1.0, 0.5), 0.0);
        assert_eq!(s.step(2.0, 0.5), 4.0);
    }
}
